#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "priordet/synth.hpp"

using namespace priordet;
namespace fs = std::filesystem;

namespace {

SynthConfig quiet_config() {
    SynthConfig c;
    c.height = 96;
    c.width = 96;
    c.geometry = default_geometry(96);
    c.seed = 42;
    return c;
}

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("priordet_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_SUITE_BEGIN("synth");

TEST_CASE("same seed generates bitwise identical datasets") {
    const auto cfg = quiet_config();
    const auto a = generate(cfg, 6);
    const auto b = generate(cfg, 6);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].boxes.size() == b[i].boxes.size());
        for (std::size_t k = 0; k < a[i].boxes.size(); ++k) {
            CHECK(a[i].boxes[k].cx == b[i].boxes[k].cx);
            CHECK(a[i].labels[k] == b[i].labels[k]);
        }
        for (std::int64_t k = 0; k < a[i].image.numel(); ++k)
            CHECK(a[i].image.values()[k] == b[i].image.values()[k]);
    }
    // per-sample streams: generating a longer run leaves earlier samples unchanged
    const auto c = generate(cfg, 9);
    for (std::int64_t k = 0; k < a[2].image.numel(); ++k)
        CHECK(c[2].image.values()[k] == a[2].image.values()[k]);
}

TEST_CASE("noise-free limit: piecewise-constant image, boxes bound the dark regions") {
    auto cfg = quiet_config();
    cfg.speckle_scale = 0;
    cfg.boundary_blur = 0;
    cfg.texture = 0;
    cfg.shadow_prob = 0;
    const auto samples = generate(cfg, 8);
    for (const auto& s : samples) {
        std::set<double> distinct(s.image.values().begin(), s.image.values().end());
        CHECK(distinct.size() <= 1 + s.boxes.size());
        const int H = static_cast<int>(s.image.dim(0)), W = static_cast<int>(s.image.dim(1));
        const double bg = 0.6;
        // every dark pixel falls inside some annotated box
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (s.image.at(y, x) >= bg - 1e-9) continue;
                bool inside = false;
                for (const auto& b : s.boxes)
                    inside = inside || (x + 0.5 >= b.x1() * W && x + 0.5 <= b.x2() * W &&
                                        y + 0.5 >= b.y1() * H && y + 0.5 <= b.y2() * H);
                CHECK(inside);
            }
        // and every box is tight: dark pixels touch all four edges
        for (const auto& b : s.boxes) {
            const int x1 = static_cast<int>(std::round(b.x1() * W));
            const int x2 = static_cast<int>(std::round(b.x2() * W)) - 1;
            const int y1 = static_cast<int>(std::round(b.y1() * H));
            const int y2 = static_cast<int>(std::round(b.y2() * H)) - 1;
            auto dark = [&](int y, int x) { return s.image.at(y, x) < bg - 1e-9; };
            bool left = false, right = false, top = false, bottom = false;
            for (int y = y1; y <= y2; ++y) {
                left = left || dark(y, x1);
                right = right || dark(y, x2);
            }
            for (int x = x1; x <= x2; ++x) {
                top = top || dark(y1, x);
                bottom = bottom || dark(y2, x);
            }
            CHECK(left);
            CHECK(right);
            CHECK(top);
            CHECK(bottom);
        }
    }
}

TEST_CASE("all emitted boxes satisfy the invariants") {
    const auto samples = generate(quiet_config(), 40);
    int total = 0;
    for (const auto& s : samples) {
        REQUIRE(s.labels.size() == s.boxes.size());
        for (std::size_t k = 0; k < s.boxes.size(); ++k) {
            const auto& b = s.boxes[k];
            CHECK(b.w > 0);
            CHECK(b.h > 0);
            CHECK(b.x1() >= -1e-12);
            CHECK(b.y1() >= -1e-12);
            CHECK(b.x2() <= 1 + 1e-12);
            CHECK(b.y2() <= 1 + 1e-12);
            CHECK((s.labels[k] == 0 || s.labels[k] == 1));
            ++total;
        }
        for (std::int64_t i = 0; i < s.image.numel(); ++i) {
            CHECK(s.image.values()[i] >= 0.0);
            CHECK(s.image.values()[i] <= 1.0);
        }
    }
    CHECK(total > 40);  // at least one nodule per image on average
}

TEST_CASE("EM on generated boxes recovers the generating mixture") {
    auto cfg = quiet_config();
    cfg.max_nodules = 3;
    const auto samples = generate(cfg, 1200);
    std::vector<Eigen::Vector2d> pts;
    for (const auto& s : samples) {
        const double W = static_cast<double>(s.image.dim(1));
        const double H = static_cast<double>(s.image.dim(0));
        for (const auto& b : s.boxes)
            pts.emplace_back((b.h * H) / (b.w * W), std::log(b.w * W));
    }
    REQUIRE(pts.size() >= 2000);
    const auto fit = fit_em(pts, 3, 300, 1e-9, 17);
    // brute-force alignment over the 6 permutations
    std::vector<int> perm{0, 1, 2}, best;
    double best_cost = 1e300;
    do {
        double cost = 0;
        for (int m = 0; m < 3; ++m)
            cost += (fit.prior.means[perm[m]] - cfg.geometry.means[m]).norm();
        if (cost < best_cost) {
            best_cost = cost;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    for (int m = 0; m < 3; ++m) {
        const auto diff = fit.prior.means[best[m]] - cfg.geometry.means[m];
        CHECK(std::abs(diff[0]) < 0.1);
        CHECK(std::abs(diff[1]) < 0.1);
    }
}

TEST_CASE("dataset write/read roundtrip is lossless") {
    const auto dir = temp_dir("roundtrip");
    const auto samples = generate(quiet_config(), 4);
    write_dataset(samples, dir.string());
    const auto back = read_dataset(dir.string());
    REQUIRE(back.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(back[i].id == samples[i].id);
        REQUIRE(back[i].boxes.size() == samples[i].boxes.size());
        for (std::size_t k = 0; k < samples[i].boxes.size(); ++k) {
            CHECK(std::abs(back[i].boxes[k].cx - samples[i].boxes[k].cx) < 1e-9);
            CHECK(std::abs(back[i].boxes[k].w - samples[i].boxes[k].w) < 1e-9);
            CHECK(back[i].labels[k] == samples[i].labels[k]);
        }
        for (std::int64_t k = 0; k < samples[i].image.numel(); ++k)
            CHECK(back[i].image.values()[k] == samples[i].image.values()[k]);
    }
}

TEST_CASE("empty dataset writes an empty file that reads back empty") {
    const auto dir = temp_dir("empty");
    write_dataset({}, dir.string());
    CHECK(read_dataset(dir.string()).empty());
}

TEST_CASE("hand-written two-image fixture parses to the expected boxes") {
    const auto dir = temp_dir("fixture");
    fs::create_directories(dir / "images");
    save_tensor((dir / "images" / "a.tnsr").string(), Tensor<double>::zeros({64, 64}));
    save_tensor((dir / "images" / "b.tnsr").string(), Tensor<double>::zeros({64, 64}));
    std::ofstream os(dir / "annotations.jsonl");
    os << R"({"id":0,"height":64,"width":64,"boxes":[[0.5,0.5,0.25,0.3]],"labels":[0],"image_file":"images/a.tnsr"})"
       << "\n";
    os << R"({"id":1,"height":64,"width":64,"boxes":[[0.3,0.4,0.1,0.2],[0.7,0.7,0.2,0.1]],"labels":[1,0],"image_file":"images/b.tnsr"})"
       << "\n";
    os.close();
    const auto ds = read_dataset(dir.string());
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].boxes.size() == 1);
    CHECK(ds[0].boxes[0].cx == 0.5);
    CHECK(ds[0].boxes[0].h == 0.3);
    CHECK(ds[1].boxes.size() == 2);
    CHECK(ds[1].labels[0] == 1);
    CHECK(ds[1].boxes[1].w == 0.2);
}

TEST_CASE("malformed annotation lines report the line number") {
    const auto dir = temp_dir("malformed");
    std::ofstream os(dir / "annotations.jsonl");
    os << R"({"id":0,"height":64,"width":64,"boxes":[],"labels":[],"image_file":"x"})" << "\n";
    os << "{not json at all\n";
    os.close();
    CHECK_THROWS_WITH_AS(read_dataset(dir.string(), false), doctest::Contains("line 2"),
                         std::runtime_error);
}

TEST_CASE("config validation") {
    SynthConfig c = quiet_config();
    c.height = 32;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = quiet_config();
    c.shadow_prob = 1.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = quiet_config();
    c.max_nodules = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_SUITE_END();
