// Set-prediction heads and the training objective: sigmoid focal
// classification, L1 + GIoU box regression, and minimum-cost bipartite
// matching between queries and ground truth.

#pragma once

#include "priordet/nn.hpp"

namespace priordet {

// Box in normalized cx/cy/w/h, [0, 1] relative to the image.
struct BoxCxcywh {
    double cx = 0, cy = 0, w = 0, h = 0;

    void validate() const {
        if (!(w > 0) || !(h > 0))
            throw std::invalid_argument("BoxCxcywh: degenerate box with w=" + std::to_string(w) +
                                        " h=" + std::to_string(h));
    }
    double x1() const { return cx - 0.5 * w; }
    double y1() const { return cy - 0.5 * h; }
    double x2() const { return cx + 0.5 * w; }
    double y2() const { return cy + 0.5 * h; }
    double area() const { return w * h; }
};

// Areas and intersections both come from corner differences so coincident
// boxes give IoU and GIoU of exactly 1.
inline double iou(const BoxCxcywh& a, const BoxCxcywh& b) {
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = ix * iy;
    const double area_a = (a.x2() - a.x1()) * (a.y2() - a.y1());
    const double area_b = (b.x2() - b.x1()) * (b.y2() - b.y1());
    const double uni = area_a + area_b - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// IoU minus the enclosing-box penalty; range [-1, 1].
inline double giou(const BoxCxcywh& a, const BoxCxcywh& b) {
    a.validate();
    b.validate();
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = ix * iy;
    const double area_a = (a.x2() - a.x1()) * (a.y2() - a.y1());
    const double area_b = (b.x2() - b.x1()) * (b.y2() - b.y1());
    const double uni = area_a + area_b - inter;
    const double ex = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
    const double ey = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
    const double enclose = ex * ey;
    return inter / uni - (enclose - uni) / enclose;
}

// Differentiable GIoU for paired box tensors (n, 4) in cxcywh.
template <typename S>
Tensor<S> giou_pairwise(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || a.dim(1) != 4 || b.shape() != a.shape())
        fail_shape("giou_pairwise: expected matching (n, 4) boxes");
    auto col = [](const Tensor<S>& t, int i) { return slice(t, 1, i, 1); };
    auto half = [](const Tensor<S>& t) { return mul_scalar(t, S(0.5)); };
    auto ax1 = sub(col(a, 0), half(col(a, 2))), ax2 = add(col(a, 0), half(col(a, 2)));
    auto ay1 = sub(col(a, 1), half(col(a, 3))), ay2 = add(col(a, 1), half(col(a, 3)));
    auto bx1 = sub(col(b, 0), half(col(b, 2))), bx2 = add(col(b, 0), half(col(b, 2)));
    auto by1 = sub(col(b, 1), half(col(b, 3))), by2 = add(col(b, 1), half(col(b, 3)));
    auto iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)));
    auto ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)));
    auto inter = mul(iw, ih);
    auto area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
    auto area_b = mul(sub(bx2, bx1), sub(by2, by1));
    auto uni = sub(add(area_a, area_b), inter);
    auto enclose = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)),
                       sub(maximum(ay2, by2), minimum(ay1, by1)));
    auto iou_t = div(inter, uni);
    return reshape(sub(iou_t, div(sub(enclose, uni), enclose)), {a.dim(0)});
}

// Sigmoid focal loss, mean over all elements. targets hold {0,1} per class;
// alpha < 0 disables the class balancing factor.
template <typename S>
Tensor<S> focal_loss_elements(const Tensor<S>& logits, const Tensor<S>& targets, double alpha,
                              double gamma) {
    if (logits.shape() != targets.shape())
        fail_shape("focal_loss: logits " + dims_str(logits.shape()) + " vs targets " +
                   dims_str(targets.shape()));
    auto p = sigmoid(logits);
    auto one_minus_t = add_scalar(neg(targets), S(1));
    auto pt = add(mul(p, targets), mul(add_scalar(neg(p), S(1)), one_minus_t));
    auto log_pt = add(mul(targets, log_sigmoid(logits)), mul(one_minus_t, log_sigmoid(neg(logits))));
    auto loss = neg(log_pt);
    if (gamma != 0.0) loss = mul(pow_scalar(add_scalar(neg(pt), S(1)), static_cast<S>(gamma)), loss);
    if (alpha >= 0.0) {
        auto at = add(mul_scalar(targets, static_cast<S>(alpha)),
                      mul_scalar(one_minus_t, static_cast<S>(1.0 - alpha)));
        loss = mul(at, loss);
    }
    return loss;
}

template <typename S>
Tensor<S> focal_loss(const Tensor<S>& logits, const Tensor<S>& targets, double alpha = 0.25,
                     double gamma = 2.0) {
    return mean(focal_loss_elements(logits, targets, alpha, gamma));
}

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

// Minimum-cost assignment of every row to a distinct column, n_rows <= n_cols.
// Shortest augmenting paths with potentials; handles arbitrary finite costs.
inline std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    const int m = static_cast<int>(cost[0].size());
    if (n > m) throw std::invalid_argument("solve_assignment: more rows than columns");
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(m + 1, 0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, INF);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = 0;
            double delta = INF;
            for (int j = 1; j <= m; ++j)
                if (!used[j]) {
                    const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if (cur < minv[j]) {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if (minv[j] < delta) {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

struct GtInstance {
    BoxCxcywh box;
    int label = 0;
};
using GtImage = std::vector<GtInstance>;

struct MatchWeights {
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
};

// (query, gt) pairs, injective in both coordinates; empty gt -> empty match.
struct MatchResult {
    std::vector<std::pair<int, int>> pairs;
};

// Match cost per (query, gt): focal-style classification cost plus L1 and
// GIoU box terms. Pure double math; the gradient never flows through the
// assignment itself.
template <typename S>
MatchResult hungarian_match(const Tensor<S>& class_logits, const Tensor<S>& boxes,
                            const GtImage& gt, const MatchWeights& w = {}) {
    MatchResult res;
    const int n_gt = static_cast<int>(gt.size());
    if (n_gt == 0) return res;
    if (class_logits.rank() != 2 || boxes.rank() != 2 || boxes.dim(1) != 4)
        fail_shape("hungarian_match: expected (Q, K) logits and (Q, 4) boxes");
    const int Q = static_cast<int>(class_logits.dim(0));
    const int K = static_cast<int>(class_logits.dim(1));
    if (n_gt > Q)
        throw std::invalid_argument("hungarian_match: more ground-truth boxes (" +
                                    std::to_string(n_gt) + ") than queries (" + std::to_string(Q) + ")");
    const auto lv = class_logits.values();
    const auto bv = boxes.values();
    std::vector<std::vector<double>> cost(n_gt, std::vector<double>(Q, 0.0));
    for (int j = 0; j < n_gt; ++j) {
        gt[j].box.validate();
        if (gt[j].label < 0 || gt[j].label >= K)
            throw std::invalid_argument("hungarian_match: label " + std::to_string(gt[j].label) +
                                        " outside [0," + std::to_string(K) + ")");
        for (int q = 0; q < Q; ++q) {
            const double l = static_cast<double>(lv[q * K + gt[j].label]);
            const double pr = 1.0 / (1.0 + std::exp(-l));
            const double eps = 1e-8;
            const double pos = w.focal_alpha * std::pow(1.0 - pr, w.focal_gamma) * (-std::log(pr + eps));
            const double negc =
                (1.0 - w.focal_alpha) * std::pow(pr, w.focal_gamma) * (-std::log(1.0 - pr + eps));
            BoxCxcywh pb{static_cast<double>(bv[q * 4 + 0]), static_cast<double>(bv[q * 4 + 1]),
                         static_cast<double>(bv[q * 4 + 2]), static_cast<double>(bv[q * 4 + 3])};
            const double l1 = std::abs(pb.cx - gt[j].box.cx) + std::abs(pb.cy - gt[j].box.cy) +
                              std::abs(pb.w - gt[j].box.w) + std::abs(pb.h - gt[j].box.h);
            double gi;
            if (pb.w > 0 && pb.h > 0) {
                gi = giou(pb, gt[j].box);
            } else {
                gi = -1.0;  // degenerate prediction: worst case
            }
            cost[j][q] = w.lambda_cls * (pos - negc) + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - gi);
            if (!std::isfinite(cost[j][q]))
                throw NumericError("hungarian_match: non-finite matching cost at query " +
                                   std::to_string(q) + ", gt " + std::to_string(j));
        }
    }
    const auto assign = solve_assignment(cost);
    for (int j = 0; j < n_gt; ++j) res.pairs.push_back({assign[j], j});
    std::sort(res.pairs.begin(), res.pairs.end());
    return res;
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

template <typename S>
struct DetectionOutput {
    Tensor<S> class_logits;  // (B, Q, num_classes)
    Tensor<S> boxes;         // (B, Q, 4), cxcywh in [0, 1]
};

struct LossBreakdown {
    double cls = 0, l1 = 0, giou = 0;  // final-layer components, weighted
    double total = 0;                  // includes any auxiliary layers
};

// Weighted Focal + L1 + GIoU over Hungarian-matched pairs. When several
// decoder layers are given, every layer is matched and supervised and the
// last one provides the reported components.
template <typename S>
std::pair<Tensor<S>, LossBreakdown> detection_loss(const std::vector<DetectionOutput<S>>& layers,
                                                   const std::vector<GtImage>& gts,
                                                   const MatchWeights& w = {}) {
    if (layers.empty()) fail_shape("detection_loss: no decoder outputs");
    const std::int64_t B = layers.back().class_logits.dim(0);
    if (static_cast<std::int64_t>(gts.size()) != B)
        fail_shape("detection_loss: batch size mismatch with ground truth");
    std::int64_t total_gt = 0;
    for (const auto& g : gts) total_gt += static_cast<std::int64_t>(g.size());
    const double norm = static_cast<double>(std::max<std::int64_t>(total_gt, 1));

    Tensor<S> total = Tensor<S>::zeros({1});
    LossBreakdown bd;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto& out = layers[li];
        const std::int64_t Q = out.class_logits.dim(1), K = out.class_logits.dim(2);
        Tensor<S> layer_cls = Tensor<S>::zeros({1});
        Tensor<S> layer_l1 = Tensor<S>::zeros({1});
        Tensor<S> layer_giou = Tensor<S>::zeros({1});
        for (std::int64_t b = 0; b < B; ++b) {
            auto logits = reshape(slice(out.class_logits, 0, b, 1), {Q, K});
            auto boxes = reshape(slice(out.boxes, 0, b, 1), {Q, 4});
            const auto match = hungarian_match(logits, boxes, gts[b], w);

            std::vector<S> tgt(static_cast<std::size_t>(Q * K), S(0));
            for (const auto& [q, j] : match.pairs) tgt[q * K + gts[b][j].label] = S(1);
            auto elements = focal_loss_elements(logits, Tensor<S>::from({Q, K}, std::move(tgt)),
                                                w.focal_alpha, w.focal_gamma);
            layer_cls = add(layer_cls, sum(elements));

            if (!match.pairs.empty()) {
                std::vector<std::int64_t> qidx;
                std::vector<S> gbox;
                for (const auto& [q, j] : match.pairs) {
                    qidx.push_back(q);
                    gbox.insert(gbox.end(), {static_cast<S>(gts[b][j].box.cx),
                                             static_cast<S>(gts[b][j].box.cy),
                                             static_cast<S>(gts[b][j].box.w),
                                             static_cast<S>(gts[b][j].box.h)});
                }
                auto matched = gather_rows(boxes, qidx);
                auto gtb = Tensor<S>::from({static_cast<std::int64_t>(qidx.size()), 4}, std::move(gbox));
                layer_l1 = add(layer_l1, sum(abs(sub(matched, gtb))));
                layer_giou =
                    add(layer_giou, sum(add_scalar(neg(giou_pairwise(matched, gtb)), S(1))));
            }
        }
        auto cls_term = mul_scalar(layer_cls, static_cast<S>(w.lambda_cls / norm));
        auto l1_term = mul_scalar(layer_l1, static_cast<S>(w.lambda_l1 / norm));
        auto giou_term = mul_scalar(layer_giou, static_cast<S>(w.lambda_giou / norm));
        total = add(total, add(cls_term, add(l1_term, giou_term)));
        if (li + 1 == layers.size()) {
            bd.cls = static_cast<double>(cls_term.item());
            bd.l1 = static_cast<double>(l1_term.item());
            bd.giou = static_cast<double>(giou_term.item());
        }
    }
    bd.total = static_cast<double>(total.item());
    return {total, bd};
}

// Query/box heads shared across decoder layers.
template <typename S>
struct DetectionHead {
    Linear<S> cls;
    Linear<S> box1, box2, box3;

    DetectionHead() = default;
    template <typename Rng>
    DetectionHead(std::int64_t d, std::int64_t num_classes, Rng& rng)
        : cls(d, num_classes, rng), box1(d, d, rng), box2(d, d, rng), box3(d, 4, rng) {}

    DetectionOutput<S> forward(const Tensor<S>& queries) const {
        DetectionOutput<S> out;
        out.class_logits = cls.forward(queries);
        out.boxes = sigmoid(box3.forward(relu(box2.forward(relu(box1.forward(queries))))));
        return out;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        cls.params(out, p + ".cls");
        box1.params(out, p + ".box1");
        box2.params(out, p + ".box2");
        box3.params(out, p + ".box3");
    }
};

}  // namespace priordet
