// Precision/Recall/AP evaluation with COCO-style conventions: greedy
// matching by descending confidence, 101-point interpolated AP, IoU
// thresholds 0.50:0.05:0.95 and pixel-area size bins (small < 32^2,
// medium < 96^2, large otherwise).
//
// For size-binned AP a detection whose best overlap (>= threshold) lands on
// an out-of-bin ground truth is ignored rather than counted as a false
// positive; everything else is evaluated normally.

#pragma once

#include <array>
#include <nlohmann/json.hpp>
#include <optional>

#include "priordet/detection.hpp"

namespace priordet {

struct EvalDetection {
    int image_id = 0;
    int label = 0;
    double score = 0;
    BoxCxcywh box;
};

struct EvalGroundTruth {
    int image_id = 0;
    int label = 0;
    BoxCxcywh box;
    double pixel_area = 0;  // absolute gt box area in pixels, for size bins
};

struct EvalReport {
    std::optional<double> ap;        // mean over IoU 0.50:0.05:0.95
    std::optional<double> ap50, ap75;
    std::optional<double> ap_small, ap_medium, ap_large;
    std::vector<std::optional<double>> per_class_ap50;

    nlohmann::json to_json() const {
        auto opt = [](const std::optional<double>& v) {
            return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
        };
        nlohmann::json j;
        j["AP"] = opt(ap);
        j["AP50"] = opt(ap50);
        j["AP75"] = opt(ap75);
        j["AP_s"] = opt(ap_small);
        j["AP_m"] = opt(ap_medium);
        j["AP_l"] = opt(ap_large);
        auto pc = nlohmann::json::array();
        for (const auto& v : per_class_ap50) pc.push_back(opt(v));
        j["per_class_AP50"] = pc;
        return j;
    }

    // Aligned table mirroring the reporting column order.
    std::string to_table() const {
        auto cell = [](const std::optional<double>& v) {
            char buf[16];
            if (v)
                std::snprintf(buf, sizeof(buf), "%9.3f", *v);
            else
                std::snprintf(buf, sizeof(buf), "%9s", "--");
            return std::string(buf);
        };
        std::ostringstream os;
        os << "AP@0.5-BN AP@0.5-MN        AP    AP@0.5   AP@0.75      AP_s      AP_m      AP_l\n";
        os << cell(per_class_ap50.size() > 0 ? per_class_ap50[0] : std::nullopt)
           << cell(per_class_ap50.size() > 1 ? per_class_ap50[1] : std::nullopt) << cell(ap)
           << cell(ap50) << cell(ap75) << cell(ap_small) << cell(ap_medium) << cell(ap_large)
           << "\n";
        return os.str();
    }
};

namespace detail {

// Content-based total order: deterministic and invariant to input order.
inline bool det_before(const EvalDetection& a, const EvalDetection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
    if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    return a.label < b.label;
}

}  // namespace detail

// Cumulative TP/FP sweep at one IoU threshold. Detections and ground truths
// must already belong to a single class; matching is greedy by descending
// confidence with each gt matched at most once.
inline std::vector<std::pair<double, double>> pr_curve(std::vector<EvalDetection> dets,
                                                       const std::vector<EvalGroundTruth>& gts,
                                                       double iou_threshold) {
    std::sort(dets.begin(), dets.end(), detail::det_before);
    std::vector<char> taken(gts.size(), 0);
    std::vector<std::pair<double, double>> curve;
    if (gts.empty()) return curve;
    int tp = 0, fp = 0;
    const auto n_gt = static_cast<double>(gts.size());
    for (const auto& d : dets) {
        double best = 0;
        int best_j = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (gts[j].image_id != d.image_id || taken[j]) continue;
            const double i = iou(d.box, gts[j].box);
            if (i > best) {
                best = i;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0 && best >= iou_threshold) {
            taken[best_j] = 1;
            ++tp;
        } else {
            ++fp;
        }
        curve.push_back({static_cast<double>(tp) / (tp + fp), static_cast<double>(tp) / n_gt});
    }
    return curve;
}

// 101-point interpolated area under the PR curve: precision envelope
// max over recall >= r, averaged over r in {0, 0.01, ..., 1}.
inline double average_precision(const std::vector<std::pair<double, double>>& curve) {
    if (curve.empty()) return 0.0;
    double acc = 0;
    for (int k = 0; k <= 100; ++k) {
        const double r = k / 100.0;
        double best = 0;
        for (const auto& [p, rec] : curve)
            if (rec >= r - 1e-12) best = std::max(best, p);
        acc += best;
    }
    return acc / 101.0;
}

namespace detail {

// AP at one threshold over a gt subset, with the ignore rule for detections
// that hit an out-of-subset gt. keep[j] marks in-subset ground truths.
inline std::optional<double> ap_subset(const std::vector<EvalDetection>& dets,
                                       const std::vector<EvalGroundTruth>& gts,
                                       const std::vector<char>& keep, double thr) {
    std::vector<EvalGroundTruth> sub;
    for (std::size_t j = 0; j < gts.size(); ++j)
        if (keep[j]) sub.push_back(gts[j]);
    if (sub.empty()) return std::nullopt;
    std::vector<EvalDetection> used;
    for (const auto& d : dets) {
        double best = 0;
        int best_j = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (gts[j].image_id != d.image_id) continue;
            const double i = iou(d.box, gts[j].box);
            if (i > best) {
                best = i;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0 && best >= thr && !keep[best_j]) continue;  // ignored
        used.push_back(d);
    }
    return average_precision(pr_curve(std::move(used), sub, thr));
}

}  // namespace detail

// Full report. Detections and ground truths carry class labels; every AP is
// averaged over the classes that have at least one ground truth.
inline EvalReport evaluate(const std::vector<EvalDetection>& dets,
                           const std::vector<EvalGroundTruth>& gts, int num_classes) {
    EvalReport rep;
    std::vector<double> thresholds;
    for (int t = 0; t < 10; ++t) thresholds.push_back(0.50 + 0.05 * t);

    const double small_max = 32.0 * 32.0, medium_max = 96.0 * 96.0;
    auto bin_of = [&](double area) { return area < small_max ? 0 : (area < medium_max ? 1 : 2); };

    std::vector<std::vector<double>> ap_all;        // [class][threshold]
    std::vector<std::array<std::vector<double>, 3>> ap_bin(num_classes);
    rep.per_class_ap50.assign(num_classes, std::nullopt);
    ap_all.assign(num_classes, {});

    for (int c = 0; c < num_classes; ++c) {
        std::vector<EvalDetection> dc;
        std::vector<EvalGroundTruth> gc;
        for (const auto& d : dets)
            if (d.label == c) dc.push_back(d);
        for (const auto& g : gts)
            if (g.label == c) gc.push_back(g);
        if (gc.empty()) continue;
        for (double thr : thresholds) {
            const double ap = average_precision(pr_curve(dc, gc, thr));
            ap_all[c].push_back(ap);
            if (thr == 0.50) rep.per_class_ap50[c] = ap;
            for (int b = 0; b < 3; ++b) {
                std::vector<char> keep(gc.size(), 0);
                bool any = false;
                for (std::size_t j = 0; j < gc.size(); ++j)
                    if (bin_of(gc[j].pixel_area) == b) {
                        keep[j] = 1;
                        any = true;
                    }
                if (!any) continue;
                if (auto v = detail::ap_subset(dc, gc, keep, thr)) ap_bin[c][b].push_back(*v);
            }
        }
    }

    auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
        if (v.empty()) return std::nullopt;
        double s = 0;
        for (double x : v) s += x;
        return s / v.size();
    };

    std::vector<double> per_class_mean, per_class_50, per_class_75;
    std::array<std::vector<double>, 3> bin_means;
    for (int c = 0; c < num_classes; ++c) {
        if (ap_all[c].empty()) continue;
        double s = 0;
        for (double x : ap_all[c]) s += x;
        per_class_mean.push_back(s / ap_all[c].size());
        per_class_50.push_back(ap_all[c][0]);
        per_class_75.push_back(ap_all[c][5]);
        for (int b = 0; b < 3; ++b)
            if (auto v = mean_of(ap_bin[c][b])) bin_means[b].push_back(*v);
    }
    rep.ap = mean_of(per_class_mean);
    rep.ap50 = mean_of(per_class_50);
    rep.ap75 = mean_of(per_class_75);
    rep.ap_small = mean_of(bin_means[0]);
    rep.ap_medium = mean_of(bin_means[1]);
    rep.ap_large = mean_of(bin_means[2]);
    return rep;
}

}  // namespace priordet
