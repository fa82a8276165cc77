#include "stair/errors.hpp"

namespace stair {

void throw_invalid(const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); }
void throw_io(const std::string& what) { throw Error(ErrorCode::Io, what); }
void throw_format(const std::string& what) { throw Error(ErrorCode::Format, what); }
void throw_numeric(const std::string& what) { throw Error(ErrorCode::Numeric, what); }
void throw_config(const std::string& what) { throw Error(ErrorCode::Config, what); }

} // namespace stair
