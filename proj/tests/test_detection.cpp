#include <doctest.h>

#include "priordet/detection.hpp"
#include "priordet/finite_diff.hpp"
#include "oracles.hpp"

using namespace priordet;
using T = Tensor<double>;

namespace {

// corner-form constructor for readability
BoxCxcywh corners(double x1, double y1, double x2, double y2) {
    return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
}

}  // namespace

TEST_SUITE_BEGIN("detection");

TEST_CASE("giou hand cases") {
    const auto a = corners(0, 0, 1, 1);
    CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    const auto b = corners(2, 0, 3, 1);
    CHECK(giou(a, b) == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
    // touching boxes whose union fills the enclosure: penalty term vanishes
    const auto c = corners(1, 0, 2, 1);
    CHECK(giou(a, c) == doctest::Approx(iou(a, c)).epsilon(1e-12));
    CHECK_THROWS_AS(giou(a, BoxCxcywh{0.5, 0.5, 0.0, 1.0}), std::invalid_argument);
}

TEST_CASE("giou stays within [-1, 1] on random pairs and is exactly 1 on itself") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> up(0.1, 0.9), us(0.02, 0.5);
    for (int t = 0; t < 100000; ++t) {
        BoxCxcywh a{up(rng), up(rng), us(rng), us(rng)};
        BoxCxcywh b{up(rng), up(rng), us(rng), us(rng)};
        const double g = giou(a, b);
        CHECK(g >= -1.0);
        CHECK(g <= 1.0);
        if (t % 1000 == 0) CHECK(giou(a, a) == 1.0);
    }
}

TEST_CASE("giou_pairwise matches the scalar formula") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> up(0.2, 0.8), us(0.05, 0.3);
    std::vector<double> av, bv;
    std::vector<BoxCxcywh> as, bs;
    for (int i = 0; i < 12; ++i) {
        BoxCxcywh a{up(rng), up(rng), us(rng), us(rng)}, b{up(rng), up(rng), us(rng), us(rng)};
        as.push_back(a);
        bs.push_back(b);
        av.insert(av.end(), {a.cx, a.cy, a.w, a.h});
        bv.insert(bv.end(), {b.cx, b.cy, b.w, b.h});
    }
    auto g = giou_pairwise(T::from({12, 4}, std::move(av)), T::from({12, 4}, std::move(bv)));
    for (int i = 0; i < 12; ++i)
        CHECK(g.values()[i] == doctest::Approx(giou(as[i], bs[i])).epsilon(1e-12));
}

TEST_CASE("focal loss degenerates to binary cross entropy at gamma=0, alpha off") {
    std::mt19937_64 rng(3);
    auto logits = T::uniform({6, 3}, rng, -3, 3);
    std::vector<double> tv(18);
    for (auto& v : tv) v = rng() % 2 ? 1.0 : 0.0;
    auto targets = T::from({6, 3}, std::move(tv));
    const auto loss = focal_loss(logits, targets, /*alpha=*/-1.0, /*gamma=*/0.0);
    double bce = 0;
    for (int i = 0; i < 18; ++i) {
        const double l = logits.values()[i], t = targets.values()[i];
        const double p = 1.0 / (1.0 + std::exp(-l));
        bce += -(t * std::log(p) + (1 - t) * std::log(1 - p));
    }
    bce /= 18;
    CHECK(loss.item() == doctest::Approx(bce).epsilon(1e-10));
}

TEST_CASE("focal loss vanishes as p_t approaches one") {
    auto logits = T::from({2, 1}, {20.0, -20.0});
    auto targets = T::from({2, 1}, {1.0, 0.0});
    CHECK(focal_loss(logits, targets).item() < 1e-8);
}

TEST_CASE("focal loss gradient under 1e-6") {
    std::mt19937_64 rng(4);
    std::vector<double> tv(12);
    for (auto& v : tv) v = rng() % 2 ? 1.0 : 0.0;
    auto targets = T::from({4, 3}, std::move(tv));
    auto rep = finite_diff_check<double>(
        [&](const T& l) { return focal_loss(l, targets, 0.25, 2.0); },
        T::uniform({4, 3}, rng, -2.5, 2.5), 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("hungarian: exact query lands on its ground truth") {
    auto logits = T::from({2, 2}, {8.0, -8.0, -8.0, -8.0});
    auto boxes = T::from({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.8, 0.8, 0.1, 0.1});
    GtImage gt{{BoxCxcywh{0.5, 0.5, 0.2, 0.2}, 0}};
    const auto m = hungarian_match(logits, boxes, gt);
    REQUIRE(m.pairs.size() == 1);
    CHECK(m.pairs[0] == std::make_pair(0, 0));
}

TEST_CASE("hungarian equals brute force on random rectangular costs up to n=7") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uc(-4.0, 4.0);
    for (int trial = 0; trial < 500; ++trial) {
        const int rows = 1 + static_cast<int>(rng() % 7);
        const int cols = std::min<int>(7, rows + static_cast<int>(rng() % 3));
        std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
        for (auto& r : cost)
            for (auto& v : r) v = uc(rng);
        const auto assign = solve_assignment(cost);
        double total = 0;
        std::vector<char> used(cols, 0);
        for (int i = 0; i < rows; ++i) {
            REQUIRE(assign[i] >= 0);
            REQUIRE(!used[assign[i]]);
            used[assign[i]] = 1;
            total += cost[i][assign[i]];
        }
        CHECK(total == doctest::Approx(oracles::brute_force_assignment(cost)).epsilon(1e-9));
    }
}

TEST_CASE("permuting ground-truth order permutes the matching, same pairing set") {
    std::mt19937_64 rng(6);
    auto logits = T::uniform({6, 2}, rng, -2, 2);
    auto boxes = sigmoid(T::uniform({6, 4}, rng, -1, 1));
    GtImage gt{{BoxCxcywh{0.3, 0.3, 0.2, 0.2}, 0},
               {BoxCxcywh{0.7, 0.6, 0.25, 0.2}, 1},
               {BoxCxcywh{0.5, 0.8, 0.15, 0.1}, 0}};
    GtImage permuted{gt[2], gt[0], gt[1]};
    auto m1 = hungarian_match(logits, boxes, gt);
    auto m2 = hungarian_match(logits, boxes, permuted);
    // same (query -> gt box) associations up to the index relabeling 0->1, 1->2, 2->0
    std::vector<std::pair<int, int>> remapped;
    for (auto [q, j] : m2.pairs) remapped.push_back({q, (j + 2) % 3});
    std::sort(remapped.begin(), remapped.end());
    CHECK(remapped == m1.pairs);
}

TEST_CASE("empty ground truth yields an empty match and a finite loss") {
    std::mt19937_64 rng(7);
    auto logits = T::uniform({4, 2}, rng, -1, 1);
    auto boxes = sigmoid(T::uniform({4, 4}, rng, -1, 1));
    CHECK(hungarian_match(logits, boxes, {}).pairs.empty());
    DetectionOutput<double> out{reshape(logits, {1, 4, 2}), reshape(boxes, {1, 4, 4})};
    auto [loss, bd] = detection_loss<double>({out}, {GtImage{}});
    CHECK(std::isfinite(bd.total));
    CHECK(bd.l1 == 0.0);
    CHECK(bd.giou == 0.0);
    CHECK(bd.total >= 0.0);
}

TEST_CASE("perfect prediction zeroes the box losses") {
    GtImage gt{{BoxCxcywh{0.4, 0.4, 0.2, 0.3}, 0}, {BoxCxcywh{0.7, 0.7, 0.2, 0.2}, 1}};
    std::vector<double> logits(3 * 2, -12.0);
    logits[0 * 2 + 0] = 12.0;  // query 0 -> class 0
    logits[1 * 2 + 1] = 12.0;  // query 1 -> class 1
    std::vector<double> boxes{0.4, 0.4, 0.2, 0.3, 0.7, 0.7, 0.2, 0.2, 0.1, 0.1, 0.05, 0.05};
    DetectionOutput<double> out{T::from({1, 3, 2}, std::move(logits)),
                                T::from({1, 3, 4}, std::move(boxes))};
    auto [loss, bd] = detection_loss<double>({out}, {gt});
    CHECK(bd.l1 == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(bd.giou == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(bd.cls < 1e-6);
}

TEST_CASE("disabling the GIoU term changes only that component") {
    std::mt19937_64 rng(8);
    auto logits = reshape(T::uniform({5, 2}, rng, -1, 1), {1, 5, 2});
    auto boxes = reshape(sigmoid(T::uniform({5, 4}, rng, -1, 1)), {1, 5, 4});
    GtImage gt{{BoxCxcywh{0.4, 0.4, 0.2, 0.3}, 0}, {BoxCxcywh{0.6, 0.7, 0.25, 0.2}, 1}};
    DetectionOutput<double> out{logits, boxes};
    MatchWeights w;
    auto [l_full, bd_full] = detection_loss<double>({out}, {gt}, w);
    MatchWeights w_nog = w;
    w_nog.lambda_giou = 0.0;
    auto [l_ng, bd_ng] = detection_loss<double>({out}, {gt}, w_nog);
    CHECK(bd_ng.giou == 0.0);
    CHECK(bd_ng.cls == doctest::Approx(bd_full.cls).epsilon(1e-12));
    CHECK(bd_ng.l1 == doctest::Approx(bd_full.l1).epsilon(1e-12));
    CHECK(bd_ng.total == doctest::Approx(bd_full.total - bd_full.giou).epsilon(1e-12));
}

TEST_CASE("total loss is invariant to ground-truth ordering") {
    std::mt19937_64 rng(9);
    auto logits = reshape(T::uniform({6, 2}, rng, -1, 1), {1, 6, 2});
    auto boxes = reshape(sigmoid(T::uniform({6, 4}, rng, -1, 1)), {1, 6, 4});
    GtImage gt{{BoxCxcywh{0.3, 0.3, 0.2, 0.2}, 0},
               {BoxCxcywh{0.7, 0.6, 0.25, 0.2}, 1},
               {BoxCxcywh{0.5, 0.8, 0.15, 0.1}, 0}};
    GtImage perm{gt[1], gt[2], gt[0]};
    DetectionOutput<double> out{logits, boxes};
    auto a = detection_loss<double>({out}, {gt}).second;
    auto b = detection_loss<double>({out}, {perm}).second;
    CHECK(std::abs(a.total - b.total) < 1e-12);
}

TEST_CASE("loss is non-negative with default weights") {
    std::mt19937_64 rng(10);
    for (int t = 0; t < 20; ++t) {
        auto logits = reshape(T::uniform({5, 2}, rng, -3, 3), {1, 5, 2});
        auto boxes = reshape(sigmoid(T::uniform({5, 4}, rng, -2, 2)), {1, 5, 4});
        GtImage gt{{BoxCxcywh{0.4, 0.5, 0.3, 0.2}, static_cast<int>(rng() % 2)}};
        DetectionOutput<double> out{logits, boxes};
        CHECK(detection_loss<double>({out}, {gt}).second.total >= 0.0);
    }
}

TEST_CASE("total loss gradient w.r.t. boxes passes finite differences") {
    std::mt19937_64 rng(11);
    GtImage gt{{BoxCxcywh{0.35, 0.45, 0.2, 0.25}, 0}, {BoxCxcywh{0.7, 0.6, 0.15, 0.2}, 1}};
    auto logits = reshape(T::uniform({5, 2}, rng, -1, 1), {1, 5, 2});
    auto rep = finite_diff_check<double>(
        [&](const T& raw) {
            DetectionOutput<double> out{logits, reshape(sigmoid(raw), {1, 5, 4})};
            return detection_loss<double>({out}, {gt}).first;
        },
        T::uniform({1, 5, 4}, rng, -1, 1), 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("more ground truths than queries is rejected") {
    auto logits = T::zeros({1, 2});
    auto boxes = T::from({1, 4}, {0.5, 0.5, 0.2, 0.2});
    GtImage gt{{BoxCxcywh{0.5, 0.5, 0.2, 0.2}, 0}, {BoxCxcywh{0.3, 0.3, 0.2, 0.2}, 1}};
    CHECK_THROWS_AS(hungarian_match(logits, boxes, gt), std::invalid_argument);
}

TEST_SUITE_END();
