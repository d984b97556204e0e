#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cffa/art.hpp"
#include "cffa/box.hpp"
#include "cffa/detector.hpp"
#include "cffa/domains.hpp"
#include "cffa/rng.hpp"

namespace cffa {

struct EvalReport {
    std::vector<double> per_class_ap;  // NaN marks classes with zero GTs
    std::vector<std::size_t> gt_counts;
    std::vector<std::size_t> det_counts;
    double map = 0.0;
    double gain = 0.0;  // filled by callers comparing against a baseline
};

/// VOC-style AP with all-point interpolation; per-image, per-class greedy
/// matching of score-sorted detections to their highest-IoU unmatched GT.
inline EvalReport average_precision(const std::vector<std::vector<Detection>>& dets,
                                    const std::vector<std::vector<Annotation>>& gts,
                                    double iou_thresh, std::size_t num_classes) {
    if (dets.size() != gts.size())
        throw std::invalid_argument("average_precision: image count mismatch");
    EvalReport rep;
    rep.per_class_ap.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
    rep.gt_counts.assign(num_classes, 0);
    rep.det_counts.assign(num_classes, 0);
    double ap_sum = 0.0;
    std::size_t ap_classes = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::size_t n_gt = 0;
        for (const auto& g : gts)
            for (const auto& a : g)
                if (a.category == k) ++n_gt;
        rep.gt_counts[k] = n_gt;
        struct Cand {
            double score;
            std::size_t img, idx;
        };
        std::vector<Cand> cands;
        for (std::size_t im = 0; im < dets.size(); ++im)
            for (std::size_t d = 0; d < dets[im].size(); ++d)
                if (dets[im][d].category == k) cands.push_back({dets[im][d].score, im, d});
        rep.det_counts[k] = cands.size();
        if (n_gt == 0) continue;  // AP undefined, excluded from mAP
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.score > b.score; });
        std::vector<std::vector<bool>> used(gts.size());
        for (std::size_t im = 0; im < gts.size(); ++im) used[im].assign(gts[im].size(), false);
        std::vector<int> tp(cands.size(), 0);
        for (std::size_t c = 0; c < cands.size(); ++c) {
            const auto& det = dets[cands[c].img][cands[c].idx];
            double best = -1.0;
            std::size_t bj = 0;
            const auto& g = gts[cands[c].img];
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (g[j].category != k || used[cands[c].img][j]) continue;
                const double v = iou(det.box, g[j].box);
                if (v > best) {
                    best = v;
                    bj = j;
                }
            }
            if (best >= iou_thresh) {
                tp[c] = 1;
                used[cands[c].img][bj] = true;
            }
        }
        // all-point interpolated area under the precision-recall curve
        double ap = 0.0;
        std::size_t acc_tp = 0;
        std::vector<double> recall(cands.size()), precision(cands.size());
        for (std::size_t c = 0; c < cands.size(); ++c) {
            acc_tp += static_cast<std::size_t>(tp[c]);
            recall[c] = static_cast<double>(acc_tp) / static_cast<double>(n_gt);
            precision[c] = static_cast<double>(acc_tp) / static_cast<double>(c + 1);
        }
        for (std::size_t c = cands.size(); c-- > 1;)
            precision[c - 1] = std::max(precision[c - 1], precision[c]);
        double prev_recall = 0.0;
        for (std::size_t c = 0; c < cands.size(); ++c) {
            ap += (recall[c] - prev_recall) * precision[c];
            prev_recall = recall[c];
        }
        rep.per_class_ap[k] = ap;
        ap_sum += ap;
        ++ap_classes;
    }
    rep.map = ap_classes ? ap_sum / static_cast<double>(ap_classes) : 0.0;
    return rep;
}

struct ErrorProfile {
    double correct_pct = 0.0, mislocalization_pct = 0.0, background_pct = 0.0;
    std::vector<double> per_class_correct, per_class_misloc, per_class_background;
};

/// Top-K error typing: per class take the K = GT-count highest-scoring
/// detections and bin by max IoU against same-class, same-image GTs:
/// Correct >= 0.5, Mislocalization in [0.3, 0.5), Background < 0.3.
inline ErrorProfile error_analysis(const std::vector<std::vector<Detection>>& dets,
                                   const std::vector<std::vector<Annotation>>& gts,
                                   std::size_t num_classes) {
    ErrorProfile out;
    double c_sum = 0, m_sum = 0, b_sum = 0;
    std::size_t classes = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::size_t n_gt = 0;
        for (const auto& g : gts)
            for (const auto& a : g)
                if (a.category == k) ++n_gt;
        if (n_gt == 0) continue;
        struct Cand {
            double score, best_iou;
        };
        std::vector<Cand> cands;
        for (std::size_t im = 0; im < dets.size(); ++im)
            for (const auto& d : dets[im]) {
                if (d.category != k) continue;
                double best = 0.0;
                for (const auto& a : gts[im])
                    if (a.category == k) best = std::max(best, iou(d.box, a.box));
                cands.push_back({d.score, best});
            }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.score > b.score; });
        if (cands.size() > n_gt) cands.resize(n_gt);
        if (cands.empty()) {
            out.per_class_correct.push_back(0.0);
            out.per_class_misloc.push_back(0.0);
            out.per_class_background.push_back(100.0);
            b_sum += 100.0;
            ++classes;
            continue;
        }
        std::size_t nc = 0, nm = 0, nb = 0;
        for (const auto& c : cands) {
            if (c.best_iou >= 0.5) ++nc;
            else if (c.best_iou >= 0.3) ++nm;
            else ++nb;
        }
        const double denom = static_cast<double>(cands.size());
        out.per_class_correct.push_back(100.0 * nc / denom);
        out.per_class_misloc.push_back(100.0 * nm / denom);
        out.per_class_background.push_back(100.0 * nb / denom);
        c_sum += out.per_class_correct.back();
        m_sum += out.per_class_misloc.back();
        b_sum += out.per_class_background.back();
        ++classes;
    }
    if (classes) {
        out.correct_pct = c_sum / classes;
        out.mislocalization_pct = m_sum / classes;
        out.background_pct = b_sum / classes;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Proxy A-distance
// ---------------------------------------------------------------------------

struct ADistanceResult {
    double d_a = 0.0;
    double epsilon = 0.0;
};

/// d_A = 2(1 - eps) where eps is the held-out error of a linear domain
/// probe (logistic regression by default, hinge loss behind the flag).
inline ADistanceResult proxy_a_distance(const std::vector<std::vector<double>>& source_features,
                                        const std::vector<std::vector<double>>& target_features,
                                        double train_fraction = 0.8, std::uint64_t seed = 0,
                                        bool hinge = false) {
    if (source_features.size() < 20 || target_features.size() < 20)
        throw std::invalid_argument("proxy_a_distance: each domain needs >= 20 vectors");
    const std::size_t d = source_features[0].size();
    Rng rng(seed ^ 0x41445354ULL);

    std::vector<std::pair<const std::vector<double>*, double>> train, test;
    auto split = [&](const std::vector<std::vector<double>>& feats, double label) {
        std::vector<std::uint64_t> idx(feats.size());
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        const std::size_t n_train =
            static_cast<std::size_t>(train_fraction * static_cast<double>(feats.size()));
        for (std::size_t i = 0; i < feats.size(); ++i)
            (i < n_train ? train : test).push_back({&feats[idx[i]], label});
    };
    split(source_features, 1.0);
    split(target_features, 0.0);

    // standardize with train statistics
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (const auto& [x, y] : train)
        for (std::size_t j = 0; j < d; ++j) mu[j] += (*x)[j];
    for (auto& v : mu) v /= static_cast<double>(train.size());
    for (const auto& [x, y] : train)
        for (std::size_t j = 0; j < d; ++j) sd[j] += ((*x)[j] - mu[j]) * ((*x)[j] - mu[j]);
    for (auto& v : sd) v = std::sqrt(v / static_cast<double>(train.size())) + 1e-8;

    std::vector<double> w(d, 0.0);
    double b = 0.0;
    const double lr = 0.5, reg = 1e-3;
    const std::size_t epochs = 300;
    std::vector<double> zx(d);
    for (std::size_t e = 0; e < epochs; ++e) {
        std::vector<double> gw(d, 0.0);
        double gb = 0.0;
        for (const auto& [x, y] : train) {
            double z = b;
            for (std::size_t j = 0; j < d; ++j) {
                zx[j] = ((*x)[j] - mu[j]) / sd[j];
                z += w[j] * zx[j];
            }
            double coef;
            if (hinge) {
                const double ys = y > 0.5 ? 1.0 : -1.0;
                coef = (ys * z < 1.0) ? -ys : 0.0;
            } else {
                const double p = 1.0 / (1.0 + std::exp(-z));
                coef = p - y;
            }
            for (std::size_t j = 0; j < d; ++j) gw[j] += coef * zx[j];
            gb += coef;
        }
        const double n = static_cast<double>(train.size());
        for (std::size_t j = 0; j < d; ++j) w[j] -= lr * (gw[j] / n + reg * w[j]);
        b -= lr * gb / n;
    }

    std::size_t wrong = 0;
    for (const auto& [x, y] : test) {
        double z = b;
        for (std::size_t j = 0; j < d; ++j) z += w[j] * (((*x)[j] - mu[j]) / sd[j]);
        const double pred = z > 0.0 ? 1.0 : 0.0;
        if (pred != y) ++wrong;
    }
    double eps = static_cast<double>(wrong) / static_cast<double>(test.size());
    eps = std::min(eps, 1.0 - eps);  // an anti-learning probe is still a probe
    return {2.0 * (1.0 - eps), eps};
}

/// FC2 features of ground-truth foreground boxes, grouped by class.
inline std::vector<std::vector<std::vector<double>>> gt_foreground_features(DetectorModel& model,
                                                                            const Dataset& ds) {
    const std::size_t nc = model.cfg.num_classes;
    const std::size_t dim = model.fc2_dim();
    std::vector<std::vector<std::vector<double>>> out(nc);
    for (const auto& s : ds) {
        const auto& anns = s.annotations();
        if (anns.empty()) continue;
        Graph g;
        auto fp = forward_to_rpn(g, model, s.to_tensor());
        std::vector<BBox> rois;
        for (const auto& a : anns) rois.push_back(a.box);
        auto head = roi_head_forward(g, model, fp.backbone.blocks[2], rois);
        for (std::size_t r = 0; r < anns.size(); ++r) {
            std::vector<double> f(dim);
            for (std::size_t j = 0; j < dim; ++j) f[j] = head.fc2_features->data[r * dim + j];
            out[anns[r].category].push_back(std::move(f));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, std::size_t h, std::size_t w,
                      const std::vector<double>& values01) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    for (double v : values01) {
        const int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        f.put(static_cast<char>(q));
    }
}

/// A(x) up-sampled to image size, quantized to an 8-bit grayscale PGM.
inline void export_attention(DetectorModel& model, const TensorPtr& image,
                             const std::string& out_path) {
    Graph g;
    auto fp = forward_to_rpn(g, model, image);
    AttentionMap att = compute_attention(fp.rpn.f_rpn);
    const std::size_t h = image->dim(2), w = image->dim(3);
    auto small = make_tensor({att.h, att.w}, att.filtered);
    auto up = bilinear_upsample(g, small, h, w);
    write_pgm(out_path, h, w, up->data);
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

inline std::string eval_csv(const EvalReport& rep, bool with_gain = false) {
    std::ostringstream os;
    os.precision(17);
    os << "class,ap,gt_count,det_count\n";
    for (std::size_t k = 0; k < rep.per_class_ap.size(); ++k) {
        os << k << ",";
        if (std::isnan(rep.per_class_ap[k])) os << "undefined";
        else os << rep.per_class_ap[k];
        os << "," << rep.gt_counts[k] << "," << rep.det_counts[k] << "\n";
    }
    os << "mAP," << rep.map << "\n";
    if (with_gain) os << "gain," << rep.gain << "\n";
    return os.str();
}

inline std::string errors_csv(const ErrorProfile& p) {
    std::ostringstream os;
    os.precision(17);
    os << "class,correct_pct,misloc_pct,background_pct\n";
    for (std::size_t k = 0; k < p.per_class_correct.size(); ++k)
        os << k << "," << p.per_class_correct[k] << "," << p.per_class_misloc[k] << ","
           << p.per_class_background[k] << "\n";
    os << "mean," << p.correct_pct << "," << p.mislocalization_pct << "," << p.background_pct
       << "\n";
    return os.str();
}

/// Convenience: run the detector over a labeled dataset and report mAP.
inline EvalReport evaluate_map(DetectorModel& model, const Dataset& ds, double iou_thresh = 0.5,
                               double score_thresh = 0.05, double nms_iou = 0.5) {
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<Annotation>> gts;
    for (const auto& s : ds) {
        dets.push_back(detect(model, s.to_tensor(), score_thresh, nms_iou));
        gts.push_back(s.annotations());
    }
    return average_precision(dets, gts, iou_thresh, model.cfg.num_classes);
}

inline std::pair<std::vector<std::vector<Detection>>, std::vector<std::vector<Annotation>>>
run_detector(DetectorModel& model, const Dataset& ds, double score_thresh = 0.05,
             double nms_iou = 0.5) {
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<Annotation>> gts;
    for (const auto& s : ds) {
        dets.push_back(detect(model, s.to_tensor(), score_thresh, nms_iou));
        gts.push_back(s.annotations());
    }
    return {dets, gts};
}

}  // namespace cffa
