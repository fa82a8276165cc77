#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "stair/binio.hpp"
#include "stair/errors.hpp"
#include "stair/evalsuite.hpp"

namespace stair {

GrayImage to_gray(const Heatmap& h) {
    GrayImage img;
    img.width = h.width;
    img.height = h.height;
    const auto vals = h.values.data();
    if (vals.size() != static_cast<std::size_t>(h.width) * h.height) throw_invalid("to_gray: heatmap shape mismatch");
    img.pixels.resize(vals.size(), 0);
    if (vals.empty()) return img;
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    const double span = *hi - *lo;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double t = span > 0.0 ? (vals[i] - *lo) / span : 0.0;
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
    return img;
}

std::string write_pgm(const GrayImage& img) {
    if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height) {
        throw_invalid("write_pgm: pixel count does not match dimensions");
    }
    std::ostringstream out;
    out << "P2\n" << img.width << ' ' << img.height << "\n255\n";
    for (std::uint32_t r = 0; r < img.height; ++r) {
        for (std::uint32_t c = 0; c < img.width; ++c) {
            out << (c ? " " : "") << static_cast<int>(img.pixels[r * img.width + c]);
        }
        out << '\n';
    }
    return out.str();
}

GrayImage read_pgm(const std::string& text) {
    std::istringstream in(text);
    std::string magic;
    GrayImage img;
    int maxval = 0;
    if (!(in >> magic) || magic != "P2") throw_format("pgm: expected P2 header");
    if (!(in >> img.width >> img.height >> maxval) || maxval != 255) throw_format("pgm: bad dimensions or maxval");
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    for (auto& p : img.pixels) {
        int v = -1;
        if (!(in >> v) || v < 0 || v > 255) throw_format("pgm: bad or missing pixel");
        p = static_cast<std::uint8_t>(v);
    }
    std::string extra;
    if (in >> extra) throw_format("pgm: trailing data");
    return img;
}

std::filesystem::path export_report(const std::filesystem::path& out_dir, const std::string& report_json,
                                    std::span<const NamedHeatmap> heatmaps) {
    std::filesystem::create_directories(out_dir);
    nlohmann::ordered_json manifest;
    manifest["files"] = nlohmann::ordered_json::array();
    auto record = [&](const std::string& name, const std::string& bytes) {
        binio::write_file_atomic(out_dir / name, bytes);
        manifest["files"].push_back({{"path", name}, {"sha256", binio::sha256_hex(bytes)}});
    };
    if (!report_json.empty()) {
        nlohmann::ordered_json parsed;
        try {
            parsed = nlohmann::ordered_json::parse(report_json);
        } catch (const nlohmann::json::exception& e) {
            throw_invalid(std::string("export_report: report is not valid JSON: ") + e.what());
        }
        record("report.json", parsed.dump(2) + "\n");
    }
    for (const auto& h : heatmaps) {
        if (h.name.empty() || h.name.find_first_of("/\\") != std::string::npos) {
            throw_invalid("export_report: heatmap names must be plain file stems");
        }
        record("heatmap-" + h.name + ".pgm", write_pgm(to_gray(h.heatmap)));
    }
    const auto path = out_dir / "manifest.json";
    binio::write_file_atomic(path, manifest.dump(2) + "\n");
    return path;
}

} // namespace stair
