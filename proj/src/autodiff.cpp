#include "stair/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "stair/errors.hpp"

namespace stair::ad {

namespace {

Tape& tape_of(Var v) { return *v.tape; }

void require_same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw_invalid(std::string(op) + ": operands recorded on different tapes");
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw_invalid(std::string(op) + ": expected a matrix, got " + t.shape_string());
}

Var finish(Tape& tape, Tensor value, bool needs_grad, const char* op, Tape::Backward fn) {
    require_finite(value, op);
    return tape.record(std::move(value), needs_grad, needs_grad ? std::move(fn) : Tape::Backward{});
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

} // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) { return record(std::move(value), false, {}); }

Var Tape::variable(Tensor value) { return record(std::move(value), true, {}); }

Var Tape::record(Tensor value, bool requires_grad, Backward fn) {
    if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) throw_invalid("tape overflow");
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(fn)});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::accumulator(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor::zeros_like(n.value);
    return n.grad;
}

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor::zeros_like(n.value) : n.grad;
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw_invalid("backward: loss belongs to another tape");
    if (nodes_[loss.id].value.size() != 1) throw_invalid("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad = Tensor{};
    accumulator(loss.id)[0] = 1.0;
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this);
    }
}

void Tape::rewind(std::size_t count) {
    if (count < nodes_.size()) nodes_.resize(count);
}

void Tape::note_branch(std::uint64_t value) {
    if (track_branches_) branch_hash_ = mix(branch_hash_, value);
}

// ---- kernels ----------------------------------------------------------------

void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            pc[i * n + j] += s;
        }
    }
}

void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = pa + p * m;
        const double* brow = pb + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double softmax_xent(std::span<const double> logits, std::size_t target) {
    if (target >= logits.size()) {
        throw_invalid("softmax_xent: target " + std::to_string(target) + " out of range for " +
                      std::to_string(logits.size()) + " classes");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    return -(logits[target] - mx - std::log(z));
}

// ---- ops ----------------------------------------------------------------------

Var matmul(Var a, Var b) {
    require_same_tape(a, b, "matmul");
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_matrix(av, "matmul");
    require_matrix(bv, "matmul");
    if (av.cols() != bv.rows()) {
        throw_invalid("matmul: shape mismatch " + av.shape_string() + " x " + bv.shape_string());
    }
    Tensor out({av.rows(), bv.cols()});
    gemm_nn(av, bv, out);
    const bool g = t.requires_grad(a) || t.requires_grad(b);
    const auto ia = a.id, ib = b.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "matmul", [ia, ib, io](Tape& tp) {
        const Tensor& dc = tp.node_grad(io);
        if (tp.requires_grad(Var{&tp, ia})) gemm_nt(dc, tp.value(Var{&tp, ib}), tp.accumulator(ia));
        if (tp.requires_grad(Var{&tp, ib})) gemm_tn(tp.value(Var{&tp, ia}), dc, tp.accumulator(ib));
    });
}

Var matmul_nt(Var a, Var b) {
    require_same_tape(a, b, "matmul_nt");
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_matrix(av, "matmul_nt");
    require_matrix(bv, "matmul_nt");
    if (av.cols() != bv.cols()) {
        throw_invalid("matmul_nt: shape mismatch " + av.shape_string() + " x " + bv.shape_string() + "^T");
    }
    Tensor out({av.rows(), bv.rows()});
    gemm_nt(av, bv, out);
    const bool g = t.requires_grad(a) || t.requires_grad(b);
    const auto ia = a.id, ib = b.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "matmul_nt", [ia, ib, io](Tape& tp) {
        const Tensor& dc = tp.node_grad(io);
        if (tp.requires_grad(Var{&tp, ia})) gemm_nn(dc, tp.value(Var{&tp, ib}), tp.accumulator(ia));
        if (tp.requires_grad(Var{&tp, ib})) gemm_tn(dc, tp.value(Var{&tp, ia}), tp.accumulator(ib));
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_matrix(av, "transpose");
    Tensor out({av.cols(), av.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "transpose", [ia, io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& ga = tp.accumulator(ia);
        for (std::size_t i = 0; i < ga.rows(); ++i)
            for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) += d(j, i);
    });
}

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) throw_invalid("add: shape mismatch " + av.shape_string() + " vs " + bv.shape_string());
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const bool g = t.requires_grad(a) || t.requires_grad(b);
    const auto ia = a.id, ib = b.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "add", [ia, ib, io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        for (auto id : {ia, ib}) {
            if (!tp.requires_grad(Var{&tp, id})) continue;
            Tensor& acc = tp.accumulator(id);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
    });
}

Var add_row(Var a, Var bias) {
    require_same_tape(a, bias, "add_row");
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    const Tensor& bv = bias.value();
    if (bv.size() != av.cols()) {
        throw_invalid("add_row: bias " + bv.shape_string() + " does not match " + av.shape_string());
    }
    Tensor out = av;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
    }
    const bool g = t.requires_grad(a) || t.requires_grad(bias);
    const auto ia = a.id, ib = bias.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "add_row", [ia, ib, io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        if (tp.requires_grad(Var{&tp, ia})) {
            Tensor& acc = tp.accumulator(ia);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
        }
        if (tp.requires_grad(Var{&tp, ib})) {
            Tensor& acc = tp.accumulator(ib);
            for (std::size_t r = 0; r < d.rows(); ++r) {
                auto row = d.row(r);
                for (std::size_t c = 0; c < row.size(); ++c) acc[c] += row[c];
            }
        }
    });
}

Var scale(Var a, double factor) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (auto& v : out.data()) v *= factor;
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "scale", [ia, io, factor](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += factor * d[i];
    });
}

Var mul_const(Var a, const Tensor& factor) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    if (factor.size() != av.size()) {
        throw_invalid("mul_const: factor " + factor.shape_string() + " does not match " + av.shape_string());
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factor[i];
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "mul_const", [ia, io, factor](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += factor[i] * d[i];
    });
}

Var relu(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    std::uint64_t sig = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] <= 0.0) {
            out[i] = 0.0;
        } else {
            sig = mix(sig, i);
        }
    }
    t.note_branch(sig);
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "relu", [ia, io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        const Tensor& y = tp.value(Var{&tp, io});
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t i = 0; i < acc.size(); ++i)
            if (y[i] > 0.0) acc[i] += d[i];
    });
}

Var gelu(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (auto& v : out.data()) v = gelu_value(v);
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "gelu", [ia, io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        const Tensor& x = tp.value(Var{&tp, ia});
        Tensor& acc = tp.accumulator(ia);
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < acc.size(); ++i) {
            const double xi = x[i];
            const double cdf = 0.5 * (1.0 + std::erf(xi / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
            acc[i] += d[i] * (cdf + xi * pdf);
        }
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    require_same_tape(x, gain, "layer_norm");
    require_same_tape(x, bias, "layer_norm");
    Tape& t = tape_of(x);
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), d = xv.cols();
    if (d == 0) throw_invalid("layer_norm: empty last axis");
    if (gain.value().size() != d || bias.value().size() != d) {
        throw_invalid("layer_norm: gain/bias length must equal " + std::to_string(d));
    }
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    Tensor xhat(xv.shape());
    std::vector<double> rstd(n);
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < n; ++r) {
        auto row = xv.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat(r, c) = (row[c] - mean) * rstd[r];
            out(r, c) = xhat(r, c) * gv[c] + bv[c];
        }
    }
    const bool g = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
    const auto ix = x.id, ig = gain.id, ib = bias.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "layer_norm",
                  [ix, ig, ib, io, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tp) {
        const Tensor& dy = tp.node_grad(io);
        const Tensor& gv2 = tp.value(Var{&tp, ig});
        const std::size_t rows = dy.rows(), cols = dy.cols();
        if (tp.requires_grad(Var{&tp, ig})) {
            Tensor& acc = tp.accumulator(ig);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) acc[c] += dy(r, c) * xhat(r, c);
        }
        if (tp.requires_grad(Var{&tp, ib})) {
            Tensor& acc = tp.accumulator(ib);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) acc[c] += dy(r, c);
        }
        if (tp.requires_grad(Var{&tp, ix})) {
            Tensor& acc = tp.accumulator(ix);
            std::vector<double> dxhat(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dxhat[c] = dy(r, c) * gv2[c];
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat(r, c);
                }
                mean_d /= static_cast<double>(cols);
                mean_dx /= static_cast<double>(cols);
                for (std::size_t c = 0; c < cols; ++c)
                    acc(r, c) += rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
            }
        }
    });
}

Var softmax_rows(Var a, const std::vector<bool>& key_valid) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_matrix(av, "softmax_rows");
    const std::size_t n = av.rows(), m = av.cols();
    if (!key_valid.empty() && key_valid.size() != m) throw_invalid("softmax_rows: key mask length mismatch");
    auto valid = [&](std::size_t c) { return key_valid.empty() || key_valid[c]; };
    Tensor out(av.shape());
    for (std::size_t r = 0; r < n; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < m; ++c)
            if (valid(c)) mx = std::max(mx, av(r, c));
        if (!std::isfinite(mx)) throw_invalid("softmax_rows: every key is masked");
        double z = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            if (!valid(c)) continue;
            out(r, c) = std::exp(av(r, c) - mx);
            z += out(r, c);
        }
        for (std::size_t c = 0; c < m; ++c) out(r, c) /= z;
    }
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "softmax_rows", [ia, io](Tape& tp) {
        const Tensor& dy = tp.node_grad(io);
        const Tensor& y = tp.value(Var{&tp, io});
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) dot += dy(r, c) * y(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) acc(r, c) += y(r, c) * (dy(r, c) - dot);
        }
    });
}

Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
    Tape& t = tape_of(table);
    const Tensor& tv = table.value();
    require_matrix(tv, "gather_rows");
    const std::size_t d = tv.cols();
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= tv.rows()) throw_invalid("gather_rows: id " + std::to_string(ids[i]) + " out of range");
        auto src = tv.row(ids[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    const auto it = table.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    std::vector<std::uint32_t> idv(ids.begin(), ids.end());
    return finish(t, std::move(out), t.requires_grad(table), "gather_rows", [it, io, idv = std::move(idv)](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& acc = tp.accumulator(it);
        for (std::size_t i = 0; i < idv.size(); ++i) {
            auto src = d.row(i);
            auto dst = acc.row(idv[i]);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_matrix(av, "slice_cols");
    if (begin + count > av.cols()) throw_invalid("slice_cols: range exceeds " + av.shape_string());
    Tensor out({av.rows(), count});
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "slice_cols", [ia, io, begin](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t r = 0; r < d.rows(); ++r)
            for (std::size_t c = 0; c < d.cols(); ++c) acc(r, begin + c) += d(r, c);
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw_invalid("concat_cols: no inputs");
    Tape& t = tape_of(parts[0]);
    const std::size_t rows = parts[0].value().rows();
    std::size_t total = 0;
    bool g = false;
    for (Var p : parts) {
        require_same_tape(parts[0], p, "concat_cols");
        if (p.value().rows() != rows) throw_invalid("concat_cols: row count mismatch");
        total += p.value().cols();
        g = g || t.requires_grad(p);
    }
    Tensor out({rows, total});
    std::vector<std::uint32_t> ids;
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& pv = p.value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pv.cols(); ++c) out(r, off + c) = pv(r, c);
        off += pv.cols();
        ids.push_back(p.id);
    }
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "concat_cols", [ids = std::move(ids), io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        std::size_t offset = 0;
        for (auto id : ids) {
            const std::size_t w = tp.value(Var{&tp, id}).cols();
            if (tp.requires_grad(Var{&tp, id})) {
                Tensor& acc = tp.accumulator(id);
                for (std::size_t r = 0; r < d.rows(); ++r)
                    for (std::size_t c = 0; c < w; ++c) acc(r, c) += d(r, offset + c);
            }
            offset += w;
        }
    });
}

Var stack_rows(std::span<const Var> parts) {
    if (parts.empty()) throw_invalid("stack_rows: no inputs");
    Tape& t = tape_of(parts[0]);
    const std::size_t cols = parts[0].value().cols();
    std::size_t total = 0;
    bool g = false;
    for (Var p : parts) {
        require_same_tape(parts[0], p, "stack_rows");
        if (p.value().cols() != cols) throw_invalid("stack_rows: column count mismatch");
        total += p.value().rows();
        g = g || t.requires_grad(p);
    }
    std::vector<double> data;
    data.reserve(total * cols);
    std::vector<std::uint32_t> ids;
    for (Var p : parts) {
        auto src = p.value().data();
        data.insert(data.end(), src.begin(), src.end());
        ids.push_back(p.id);
    }
    Tensor out({total, cols}, std::move(data));
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "stack_rows", [ids = std::move(ids), io](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        std::size_t offset = 0;
        for (auto id : ids) {
            const std::size_t n = tp.value(Var{&tp, id}).size();
            if (tp.requires_grad(Var{&tp, id})) {
                Tensor& acc = tp.accumulator(id);
                for (std::size_t i = 0; i < n; ++i) acc[i] += d[offset + i];
            }
            offset += n;
        }
    });
}

Var pool_log_relu_max(Var logits, const std::vector<bool>& valid) {
    Tape& t = tape_of(logits);
    const Tensor& lv = logits.value();
    require_matrix(lv, "pool_log_relu_max");
    const std::size_t n = lv.rows(), v = lv.cols();
    if (valid.size() != n) throw_invalid("pool_log_relu_max: validity flags length mismatch");
    std::vector<std::size_t> valid_rows;
    for (std::size_t r = 0; r < n; ++r)
        if (valid[r]) valid_rows.push_back(r);
    if (valid_rows.empty()) throw_invalid("pool_log_relu_max: no valid positions");

    Tensor out({1, v});
    // argmax row per column, or n when the ReLU is inactive
    std::vector<std::uint32_t> arg(v, static_cast<std::uint32_t>(n));
    std::uint64_t sig = 0;
    for (std::size_t k = 0; k < v; ++k) {
        std::size_t best = valid_rows[0];
        double mx = lv(best, k);
        for (std::size_t r : valid_rows) {
            if (lv(r, k) > mx) {
                mx = lv(r, k);
                best = r;
            }
        }
        if (mx > 0.0) {
            out[k] = std::log1p(mx);
            arg[k] = static_cast<std::uint32_t>(best);
        }
        sig = mix(sig, arg[k]);
    }
    t.note_branch(sig);
    const auto il = logits.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(logits), "pool_log_relu_max",
                  [il, io, n, arg = std::move(arg)](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& acc = tp.accumulator(il);
        const Tensor& x = tp.value(Var{&tp, il});
        for (std::size_t k = 0; k < arg.size(); ++k) {
            if (arg[k] == n) continue;
            acc(arg[k], k) += d[k] / (1.0 + x(arg[k], k));
        }
    });
}

Var mean_rows(Var a, const std::vector<bool>& valid) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_matrix(av, "mean_rows");
    if (valid.size() != av.rows()) throw_invalid("mean_rows: validity flags length mismatch");
    const auto count = static_cast<double>(std::count(valid.begin(), valid.end(), true));
    if (count == 0.0) throw_invalid("mean_rows: no valid positions");
    Tensor out({1, av.cols()});
    for (std::size_t r = 0; r < av.rows(); ++r) {
        if (!valid[r]) continue;
        for (std::size_t c = 0; c < av.cols(); ++c) out[c] += av(r, c) / count;
    }
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "mean_rows", [ia, io, valid, count](Tape& tp) {
        const Tensor& d = tp.node_grad(io);
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t r = 0; r < acc.rows(); ++r) {
            if (!valid[r]) continue;
            for (std::size_t c = 0; c < acc.cols(); ++c) acc(r, c) += d[c] / count;
        }
    });
}

Var l2_normalize_rows(Var a) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_matrix(av, "l2_normalize_rows");
    Tensor out(av.shape());
    std::vector<double> norms(av.rows());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        double s = 0.0;
        for (double v : av.row(r)) s += v * v;
        norms[r] = std::sqrt(s);
        if (norms[r] == 0.0) continue;
        for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = av(r, c) / norms[r];
    }
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), t.requires_grad(a), "l2_normalize_rows",
                  [ia, io, norms = std::move(norms)](Tape& tp) {
        const Tensor& dy = tp.node_grad(io);
        const Tensor& y = tp.value(Var{&tp, io});
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            if (norms[r] == 0.0) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * dy(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) acc(r, c) += (dy(r, c) - y(r, c) * dot) / norms[r];
        }
    });
}

Var divide_by_temperature(Var a, Var log_temperature, double floor) {
    require_same_tape(a, log_temperature, "divide_by_temperature");
    Tape& t = tape_of(a);
    if (log_temperature.value().size() != 1) throw_invalid("divide_by_temperature: temperature must be scalar");
    const double raw = std::exp(log_temperature.value()[0]);
    const bool floored = raw < floor;
    const double temp = floored ? floor : raw;
    t.note_branch(floored ? 1 : 0);
    Tensor out = a.value();
    for (auto& v : out.data()) v /= temp;
    const bool g = t.requires_grad(a) || t.requires_grad(log_temperature);
    const auto ia = a.id, it = log_temperature.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, std::move(out), g, "divide_by_temperature", [ia, it, io, temp, floored](Tape& tp) {
        const Tensor& dy = tp.node_grad(io);
        const Tensor& y = tp.value(Var{&tp, io});
        if (tp.requires_grad(Var{&tp, ia})) {
            Tensor& acc = tp.accumulator(ia);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += dy[i] / temp;
        }
        if (tp.requires_grad(Var{&tp, it}) && !floored) {
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += dy[i] * y[i];
            tp.accumulator(it)[0] -= s;
        }
    });
}

Var softmax_xent_rows(Var logits, std::span<const std::size_t> targets) {
    Tape& t = tape_of(logits);
    const Tensor& lv = logits.value();
    require_matrix(lv, "softmax_xent_rows");
    const std::size_t n = lv.rows(), m = lv.cols();
    if (targets.size() != n) throw_invalid("softmax_xent_rows: one target per row required");
    if (n == 0) throw_invalid("softmax_xent_rows: empty batch");
    Tensor probs(lv.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        auto row = lv.row(r);
        total += softmax_xent(row, targets[r]);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            probs(r, c) = std::exp(row[c] - mx);
            z += probs(r, c);
        }
        for (std::size_t c = 0; c < m; ++c) probs(r, c) /= z;
    }
    Tensor out({1}, {total / static_cast<double>(n)});
    const auto il = logits.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return finish(t, std::move(out), t.requires_grad(logits), "softmax_xent_rows",
                  [il, io, probs = std::move(probs), tg = std::move(tg)](Tape& tp) {
        const double g = tp.node_grad(io)[0] / static_cast<double>(probs.rows());
        Tensor& acc = tp.accumulator(il);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
            for (std::size_t c = 0; c < probs.cols(); ++c) {
                const double onehot = (c == tg[r]) ? 1.0 : 0.0;
                acc(r, c) += g * (probs(r, c) - onehot);
            }
        }
    });
}

Var column_mean_square_sum(Var a) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    require_matrix(av, "column_mean_square_sum");
    const std::size_t n = av.rows(), v = av.cols();
    if (n == 0) throw_invalid("column_mean_square_sum: empty batch");
    std::vector<double> means(v, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        auto row = av.row(r);
        for (std::size_t k = 0; k < v; ++k) means[k] += row[k];
    }
    double total = 0.0;
    for (auto& m : means) {
        m /= static_cast<double>(n);
        total += m * m;
    }
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, Tensor({1}, {total}), t.requires_grad(a), "column_mean_square_sum",
                  [ia, io, means = std::move(means), n](Tape& tp) {
        const double g = tp.node_grad(io)[0];
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t r = 0; r < n; ++r) {
            auto row = acc.row(r);
            for (std::size_t k = 0; k < means.size(); ++k) row[k] += g * 2.0 * means[k] / static_cast<double>(n);
        }
    });
}

Var sum(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, Tensor({1}, {s}), t.requires_grad(a), "sum", [ia, io](Tape& tp) {
        const double g = tp.node_grad(io)[0];
        for (auto& v : tp.accumulator(ia).data()) v += g;
    });
}

Var sum_squares(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double v : a.value().data()) s += v * v;
    const auto ia = a.id;
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, Tensor({1}, {s}), t.requires_grad(a), "sum_squares", [ia, io](Tape& tp) {
        const double g = tp.node_grad(io)[0];
        const Tensor& x = tp.value(Var{&tp, ia});
        Tensor& acc = tp.accumulator(ia);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += 2.0 * g * x[i];
    });
}

Var linear_combination(std::span<const std::pair<double, Var>> terms) {
    if (terms.empty()) throw_invalid("linear_combination: no terms");
    Tape& t = tape_of(terms[0].second);
    double s = 0.0;
    bool g = false;
    std::vector<std::pair<double, std::uint32_t>> ids;
    for (const auto& [w, v] : terms) {
        require_same_tape(terms[0].second, v, "linear_combination");
        if (v.value().size() != 1) throw_invalid("linear_combination: terms must be scalars");
        s += w * v.value()[0];
        g = g || t.requires_grad(v);
        ids.emplace_back(w, v.id);
    }
    const auto io = static_cast<std::uint32_t>(t.node_count());
    return finish(t, Tensor({1}, {s}), g, "linear_combination", [ids = std::move(ids), io](Tape& tp) {
        const double gr = tp.node_grad(io)[0];
        for (const auto& [w, id] : ids)
            if (tp.requires_grad(Var{&tp, id})) tp.accumulator(id)[0] += w * gr;
    });
}

} // namespace stair::ad
