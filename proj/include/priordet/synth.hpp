// Deterministic synthetic ultrasound-like images: hypoechoic elliptical
// nodules with blurred boundaries on a textured background, multiplicative
// Rayleigh speckle and optional vertical shadow bands. Nodule geometry is
// drawn from a known GMM so prior-recovery tests can close the loop.
// Per-sample RNG streams are derived from (seed, index), so generation is
// reproducible regardless of batching or thread count.

#pragma once

#include <filesystem>
#include <fstream>

#include "priordet/detection.hpp"
#include "priordet/gmm.hpp"
#include "priordet/tensor_io.hpp"

namespace priordet {

struct SynthConfig {
    int height = 96, width = 96;
    int min_nodules = 1, max_nodules = 3;
    GmmPrior2D geometry;          // generation ground truth over (r, log w)
    double speckle_scale = 0.3;   // 0 disables the multiplicative speckle
    double boundary_blur = 1.2;   // Gaussian sigma in pixels, 0 = hard edge
    double texture = 0.15;        // background texture amplitude
    double shadow_prob = 0.25;
    double shadow_strength = 0.35;
    double malignant_waviness = 0.22;  // boundary perturbation for class 1
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 64 || width < 64)
            throw std::invalid_argument("SynthConfig: image size must be at least 64x64");
        if (shadow_prob < 0 || shadow_prob > 1)
            throw std::invalid_argument("SynthConfig: shadow_prob must be in [0,1]");
        if (min_nodules < 0 || max_nodules < min_nodules)
            throw std::invalid_argument("SynthConfig: bad nodule count range");
        geometry.validate();
    }
};

// Default generation mixture: a dominant near-round mode plus flat and
// elongated modes, in (aspect ratio, log width-in-pixels) coordinates.
inline GmmPrior2D default_geometry(double image_width = 96) {
    GmmPrior2D g;
    g.M = 3;
    g.weights = {0.5, 0.3, 0.2};
    const double w0 = image_width;
    g.means = {Eigen::Vector2d(1.0, std::log(0.28 * w0)), Eigen::Vector2d(0.55, std::log(0.36 * w0)),
               Eigen::Vector2d(1.7, std::log(0.20 * w0))};
    Eigen::Matrix2d c1, c2, c3;
    c1 << 0.010, 0.002, 0.002, 0.015;
    c2 << 0.006, -0.001, -0.001, 0.012;
    c3 << 0.014, 0.000, 0.000, 0.010;
    g.covs = {c1, c2, c3};
    g.w_ref = 0.28 * w0;
    return g;
}

struct Sample {
    int id = 0;
    Tensor<double> image;  // (H, W), values in [0, 1]
    std::vector<BoxCxcywh> boxes;
    std::vector<int> labels;  // 0 = regular boundary, 1 = perturbed boundary
};

namespace detail {

// splitmix64: decorrelates per-sample streams derived from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline void gaussian_blur_inplace(std::vector<double>& img, int H, int W, double sigma) {
    if (sigma <= 0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double s = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += k[i + radius];
    }
    for (auto& v : k) v /= s;
    std::vector<double> tmp(img.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = std::clamp(x + i, 0, W - 1);
                acc += k[i + radius] * img[y * W + xx];
            }
            tmp[y * W + x] = acc;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = std::clamp(y + i, 0, H - 1);
                acc += k[i + radius] * tmp[yy * W + x];
            }
            img[y * W + x] = acc;
        }
}

}  // namespace detail

inline Sample generate_one(const SynthConfig& cfg, int index) {
    const int H = cfg.height, W = cfg.width;
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    Sample s;
    s.id = index;
    std::vector<double> img(static_cast<std::size_t>(H) * W, 0.6);

    // Low-frequency background texture from an upsampled coarse noise grid.
    if (cfg.texture > 0) {
        const int ch = H / 8 + 2, cw = W / 8 + 2;
        std::vector<double> coarse(static_cast<std::size_t>(ch) * cw);
        for (auto& v : coarse) v = u01(rng) - 0.5;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double fy = static_cast<double>(y) / 8.0, fx = static_cast<double>(x) / 8.0;
                const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
                const double ty = fy - y0, tx = fx - x0;
                const double v =
                    (1 - ty) * ((1 - tx) * coarse[y0 * cw + x0] + tx * coarse[y0 * cw + x0 + 1]) +
                    ty * ((1 - tx) * coarse[(y0 + 1) * cw + x0] + tx * coarse[(y0 + 1) * cw + x0 + 1]);
                img[y * W + x] = 0.6 + cfg.texture * v;
            }
    }

    // Nodules: geometry from the GMM, rendered as radial shapes whose pixel
    // extent matches the sampled (w, h) so EM on emitted boxes recovers the
    // generating mixture.
    std::uniform_int_distribution<int> ncount(cfg.min_nodules, cfg.max_nodules);
    const int want = ncount(rng);
    std::vector<double> occupancy(static_cast<std::size_t>(H) * W, 0.0);
    for (int nod = 0; nod < want; ++nod) {
        bool placed = false;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
            const auto draw = sample_prior(cfg.geometry, rng, 1)[0];
            const double w_px = std::exp(draw[1]);
            const double h_px = draw[0] * w_px;
            const int label = u01(rng) < 0.5 ? 0 : 1;
            const double amp = label == 1 ? cfg.malignant_waviness : 0.0;
            const int lobes = label == 1 ? 5 + static_cast<int>(u01(rng) * 4.99) : 0;
            const double phase = u01(rng) * 2.0 * M_PI;
            if (w_px < 6 || h_px < 6) continue;
            if (w_px > W - 6 || h_px > H - 6) continue;

            auto rho = [&](double theta) { return 1.0 + amp * std::sin(lobes * theta + phase); };
            // Envelope along each axis, used to pin the pixel extent to (w, h).
            double mx = 0, my = 0;
            for (int t = 0; t < 720; ++t) {
                const double th = t * M_PI / 360.0;
                mx = std::max(mx, std::abs(std::cos(th)) * rho(th));
                my = std::max(my, std::abs(std::sin(th)) * rho(th));
            }
            const double margin = 2.0;
            const double ex = 0.5 * w_px, ey = 0.5 * h_px;
            if (2 * ex + 2 * margin >= W || 2 * ey + 2 * margin >= H) continue;
            std::uniform_real_distribution<double> ux(ex + margin, W - ex - margin);
            std::uniform_real_distribution<double> uy(ey + margin, H - ey - margin);
            const double cx = ux(rng), cy = uy(rng);

            int px1 = W, px2 = -1, py1 = H, py2 = -1;
            std::vector<double> mask(static_cast<std::size_t>(H) * W, 0.0);
            const int x_lo = std::max(0, static_cast<int>(cx - ex - 1));
            const int x_hi = std::min(W - 1, static_cast<int>(cx + ex + 1));
            const int y_lo = std::max(0, static_cast<int>(cy - ey - 1));
            const int y_hi = std::min(H - 1, static_cast<int>(cy + ey + 1));
            for (int y = y_lo; y <= y_hi; ++y)
                for (int x = x_lo; x <= x_hi; ++x) {
                    const double un = (x - cx) / ex * mx;
                    const double vn = (y - cy) / ey * my;
                    const double rad = std::sqrt(un * un + vn * vn);
                    const double th = std::atan2(vn, un);
                    if (rad <= rho(th)) {
                        mask[y * W + x] = 1.0;
                        px1 = std::min(px1, x);
                        px2 = std::max(px2, x);
                        py1 = std::min(py1, y);
                        py2 = std::max(py2, y);
                    }
                }
            if (px2 < 0 || px2 - px1 < 3 || py2 - py1 < 3) continue;

            // Avoid heavy overlap so boxes stay meaningful.
            double overlap = 0;
            for (int y = py1; y <= py2; ++y)
                for (int x = px1; x <= px2; ++x) overlap = std::max(overlap, occupancy[y * W + x] * mask[y * W + x]);
            if (overlap > 0) continue;

            detail::gaussian_blur_inplace(mask, H, W, cfg.boundary_blur);
            const double depth = 0.55 + 0.2 * u01(rng);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    img[y * W + x] *= (1.0 - depth * mask[y * W + x]);
                    if (mask[y * W + x] > 0.05) occupancy[y * W + x] = 1.0;
                }

            BoxCxcywh box;
            box.cx = (px1 + px2 + 1) * 0.5 / W;
            box.cy = (py1 + py2 + 1) * 0.5 / H;
            box.w = static_cast<double>(px2 - px1 + 1) / W;
            box.h = static_cast<double>(py2 - py1 + 1) / H;
            s.boxes.push_back(box);
            s.labels.push_back(label);
            placed = true;
        }
        if (!placed)
            std::cerr << "generate_one: nodule " << nod << " of image " << index
                      << " skipped after bounded retries\n";
    }

    // Vertical attenuation band (acoustic shadowing).
    if (u01(rng) < cfg.shadow_prob) {
        const int bw = std::max(4, static_cast<int>(W * (0.08 + 0.10 * u01(rng))));
        const int x0 = static_cast<int>(u01(rng) * (W - bw));
        for (int x = x0; x < x0 + bw; ++x) {
            const double t = (x - x0 + 0.5) / bw;
            const double att = 1.0 - cfg.shadow_strength * std::sin(M_PI * t);
            for (int y = 0; y < H; ++y) img[y * W + x] *= att;
        }
    }

    // Multiplicative unit-mean Rayleigh speckle, blended by the scale knob.
    if (cfg.speckle_scale > 0) {
        const double mean_rayleigh = std::sqrt(M_PI / 2.0);
        for (auto& v : img) {
            const double r = std::sqrt(-2.0 * std::log(std::max(u01(rng), 1e-12)));
            const double unit = r / mean_rayleigh;
            v *= std::max(0.0, 1.0 + cfg.speckle_scale * (unit - 1.0));
        }
    }

    for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
    s.image = Tensor<double>::from({H, W}, std::move(img));
    return s;
}

inline std::vector<Sample> generate(const SynthConfig& cfg, int n) {
    if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
    cfg.validate();
    std::vector<Sample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(generate_one(cfg, i));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON object per line, images as binary tensor files.
// ---------------------------------------------------------------------------

inline void write_dataset(const std::vector<Sample>& samples, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    std::ofstream os(fs::path(out_dir) / "annotations.jsonl");
    if (!os) throw std::runtime_error("write_dataset: cannot open annotations file in " + out_dir);
    for (const auto& s : samples) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.tnsr", s.id);
        save_tensor((fs::path(out_dir) / "images" / name).string(), s.image);
        nlohmann::json j;
        j["id"] = s.id;
        j["height"] = s.image.dim(0);
        j["width"] = s.image.dim(1);
        auto boxes = nlohmann::json::array();
        for (const auto& b : s.boxes) boxes.push_back({b.cx, b.cy, b.w, b.h});
        j["boxes"] = boxes;
        j["labels"] = s.labels;
        j["image_file"] = std::string("images/") + name;
        os << j.dump() << "\n";
    }
}

inline std::vector<Sample> read_dataset(const std::string& annotations_path, bool load_images = true) {
    namespace fs = std::filesystem;
    fs::path apath(annotations_path);
    if (fs::is_directory(apath)) apath /= "annotations.jsonl";
    std::ifstream is(apath);
    if (!is) throw std::runtime_error("read_dataset: cannot open " + apath.string());
    std::vector<Sample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            Sample s;
            s.id = j.at("id").get<int>();
            for (const auto& b : j.at("boxes")) {
                BoxCxcywh box{b[0], b[1], b[2], b[3]};
                box.validate();
                if (box.x1() < -1e-9 || box.y1() < -1e-9 || box.x2() > 1 + 1e-9 || box.y2() > 1 + 1e-9)
                    throw std::invalid_argument("box outside [0,1]^2");
                s.boxes.push_back(box);
            }
            s.labels = j.at("labels").get<std::vector<int>>();
            if (s.labels.size() != s.boxes.size())
                throw std::invalid_argument("labels/boxes length mismatch");
            if (load_images) {
                const auto ipath = apath.parent_path() / j.at("image_file").get<std::string>();
                s.image = load_tensor<double>(ipath.string());
            } else {
                const auto h = j.at("height").get<std::int64_t>();
                const auto w = j.at("width").get<std::int64_t>();
                s.image = Tensor<double>::zeros({h, w});
            }
            out.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_dataset: line " + std::to_string(lineno) + " of " +
                                     apath.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace priordet
