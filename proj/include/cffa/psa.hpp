#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

#include "cffa/art.hpp"
#include "cffa/detector.hpp"
#include "cffa/ops.hpp"
#include "cffa/tensor.hpp"

namespace cffa {

constexpr double kNormEps = 1e-12;

/// Per-category global prototype vectors for one domain. A slot is read only
/// once its initialization flag is set.
struct PrototypeBank {
    Domain domain = Domain::Source;
    std::size_t dim = 0;
    std::vector<std::vector<double>> prototypes;  // [C][dim]
    std::vector<bool> initialized;                // [C]

    static PrototypeBank create(Domain d, std::size_t num_classes, std::size_t dim) {
        PrototypeBank b;
        b.domain = d;
        b.dim = dim;
        b.prototypes.assign(num_classes, std::vector<double>(dim, 0.0));
        b.initialized.assign(num_classes, false);
        return b;
    }
    std::size_t num_classes() const { return prototypes.size(); }
};

/// Per-batch class means of RoI-head FC2 features.
struct LocalPrototypes {
    // class id -> (mean vector, contributing region count)
    std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> by_class;
    bool empty() const { return by_class.empty(); }
};

/// Graph-connected variant used inside a training step so gradients can flow
/// through the current batch's contribution.
struct LocalPrototypeNodes {
    std::map<std::size_t, std::pair<TensorPtr, std::size_t>> by_class;  // [1,D] rows
    bool empty() const { return by_class.empty(); }
};

/// Mean of FC2 feature rows grouped by ground-truth category.
inline LocalPrototypes source_local_prototypes(const TensorPtr& fc2,
                                               const std::vector<std::size_t>& region_labels) {
    LocalPrototypes out;
    if (region_labels.empty()) return out;
    const std::size_t d = fc2->dim(1);
    for (std::size_t r = 0; r < region_labels.size(); ++r) {
        auto& slot = out.by_class[region_labels[r]];
        if (slot.first.empty()) slot.first.assign(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) slot.first[j] += fc2->data[r * d + j];
        ++slot.second;
    }
    for (auto& [k, slot] : out.by_class)
        for (auto& v : slot.first) v /= static_cast<double>(slot.second);
    return out;
}

inline LocalPrototypeNodes source_local_prototype_nodes(Graph& g, const TensorPtr& fc2,
                                                        const std::vector<std::size_t>& labels) {
    LocalPrototypeNodes out;
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < labels.size(); ++r) groups[labels[r]].push_back(r);
    for (auto& [k, rows] : groups) {
        std::vector<double> w(labels.size(), 0.0);
        for (auto r : rows) w[r] = 1.0 / static_cast<double>(rows.size());
        out.by_class[k] = {average_rows(g, fc2, std::move(w)), rows.size()};
    }
    return out;
}

/// Pseudo-labels for target RoIs: argmax over foreground classes, rejecting
/// background argmax or a best foreground score below the threshold.
/// Returns per-RoI labels (class id, or num_classes for "rejected").
inline std::vector<std::size_t> pseudo_labels(const TensorPtr& class_scores,
                                              std::size_t num_classes, double score_thresh) {
    const std::size_t n = class_scores->dim(0);
    const std::size_t k = class_scores->dim(1);  // C+1, index 0 background
    std::vector<std::size_t> out(n, num_classes);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t arg = 0;
        double best = class_scores->data[r * k];
        for (std::size_t j = 1; j < k; ++j)
            if (class_scores->data[r * k + j] > best) {
                best = class_scores->data[r * k + j];
                arg = j;
            }
        if (arg == 0 || best < score_thresh) continue;
        out[r] = arg - 1;
    }
    return out;
}

inline LocalPrototypes target_local_prototypes(const TensorPtr& fc2, const TensorPtr& class_scores,
                                               std::size_t num_classes, double score_thresh) {
    auto labels = pseudo_labels(class_scores, num_classes, score_thresh);
    LocalPrototypes out;
    const std::size_t d = fc2->dim(1);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] >= num_classes) continue;
        auto& slot = out.by_class[labels[r]];
        if (slot.first.empty()) slot.first.assign(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) slot.first[j] += fc2->data[r * d + j];
        ++slot.second;
    }
    for (auto& [k, slot] : out.by_class)
        for (auto& v : slot.first) v /= static_cast<double>(slot.second);
    return out;
}

inline LocalPrototypeNodes target_local_prototype_nodes(Graph& g, const TensorPtr& fc2,
                                                        const TensorPtr& class_scores,
                                                        std::size_t num_classes,
                                                        double score_thresh) {
    auto labels = pseudo_labels(class_scores, num_classes, score_thresh);
    LocalPrototypeNodes out;
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t r = 0; r < labels.size(); ++r)
        if (labels[r] < num_classes) groups[labels[r]].push_back(r);
    for (auto& [k, rows] : groups) {
        std::vector<double> w(labels.size(), 0.0);
        for (auto r : rows) w[r] = 1.0 / static_cast<double>(rows.size());
        out.by_class[k] = {average_rows(g, fc2, std::move(w)), rows.size()};
    }
    return out;
}

inline double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Shifted cosine similarity: 1 parallel, 0.5 orthogonal, 0 anti-parallel.
inline double similarity(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = vec_norm(a), nb = vec_norm(b);
    if (na <= kNormEps || nb <= kNormEps)
        throw std::invalid_argument("similarity: near-zero norm, caller must skip the update");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return (dot / (na * nb) + 1.0) / 2.0;
}

/// Similarity-gated EMA update of global prototypes from batch-local ones.
/// First sight of a class bootstraps the slot. Near-zero norms are skipped.
inline void update_global(PrototypeBank& bank, const LocalPrototypes& local) {
    for (const auto& [k, slot] : local.by_class) {
        const auto& p = slot.first;
        if (p.size() != bank.dim)
            throw std::invalid_argument("update_global: prototype dimension mismatch");
        if (!bank.initialized[k]) {
            if (vec_norm(p) <= kNormEps) continue;
            bank.prototypes[k] = p;
            bank.initialized[k] = true;
            continue;
        }
        if (vec_norm(p) <= kNormEps || vec_norm(bank.prototypes[k]) <= kNormEps) continue;
        const double alpha = similarity(p, bank.prototypes[k]);
        for (std::size_t j = 0; j < bank.dim; ++j)
            bank.prototypes[k][j] = alpha * p[j] + (1.0 - alpha) * bank.prototypes[k][j];
    }
}

/// Graph-connected bank update for one step: GP_new = alpha*P + (1-alpha)*GP_old
/// with alpha and GP_old held constant, so gradients reach the network only
/// through the batch's local-prototype contribution.
struct BankStepResult {
    std::map<std::size_t, TensorPtr> updated;  // class -> [1,D] graph tensor
};

inline BankStepResult update_global_nodes(Graph& g, PrototypeBank& bank,
                                          const LocalPrototypeNodes& local) {
    BankStepResult res;
    for (const auto& [k, slot] : local.by_class) {
        const TensorPtr& p = slot.first;
        if (p->numel() != bank.dim)
            throw std::invalid_argument("update_global: prototype dimension mismatch");
        const double pn = vec_norm(p->data);
        if (!bank.initialized[k]) {
            if (pn <= kNormEps) continue;
            res.updated[k] = p;
            continue;
        }
        if (pn <= kNormEps || vec_norm(bank.prototypes[k]) <= kNormEps) continue;
        const double alpha = similarity(p->data, bank.prototypes[k]);
        std::vector<double> rest(bank.dim);
        for (std::size_t j = 0; j < bank.dim; ++j)
            rest[j] = -(1.0 - alpha) * bank.prototypes[k][j];
        // alpha*P + (1-alpha)*GP_old, constants folded into shift_by
        res.updated[k] = shift_by(g, scale(g, p, alpha), std::move(rest));
    }
    return res;
}

/// Commits the numeric values of a step's updated prototypes into the bank.
inline void commit_bank(PrototypeBank& bank, const BankStepResult& step) {
    for (const auto& [k, t] : step.updated) {
        bank.prototypes[k] = t->data;
        bank.initialized[k] = true;
    }
}

/// Squared L2 distance, normalized by the feature dimension, summed over
/// classes initialized in both banks. The 1/dim keeps the alignment term
/// commensurate with the per-image detection loss at any feature width.
inline double psa_loss_value(const PrototypeBank& src, const PrototypeBank& tgt) {
    if (src.num_classes() != tgt.num_classes() || src.dim != tgt.dim)
        throw std::invalid_argument("psa_loss: bank layout mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < src.num_classes(); ++k) {
        if (!src.initialized[k] || !tgt.initialized[k]) continue;
        for (std::size_t j = 0; j < src.dim; ++j) {
            const double d = src.prototypes[k][j] - tgt.prototypes[k][j];
            s += d * d;
        }
    }
    return s / static_cast<double>(src.dim);
}

/// Graph-connected PSA loss over a step's updated prototypes. Classes whose
/// counterpart bank slot is uninitialized contribute nothing. Returns null if
/// no class is commonly initialized (caller logs a warning and uses 0).
inline TensorPtr psa_loss_nodes(Graph& g, const PrototypeBank& src_bank,
                                const PrototypeBank& tgt_bank, const BankStepResult& src_step,
                                const BankStepResult& tgt_step) {
    TensorPtr total;
    const std::size_t c = src_bank.num_classes();
    for (std::size_t k = 0; k < c; ++k) {
        const bool src_has = src_step.updated.count(k) || src_bank.initialized[k];
        const bool tgt_has = tgt_step.updated.count(k) || tgt_bank.initialized[k];
        if (!src_has || !tgt_has) continue;
        TensorPtr sp = src_step.updated.count(k)
                           ? src_step.updated.at(k)
                           : make_tensor({1, src_bank.dim}, src_bank.prototypes[k]);
        TensorPtr tp = tgt_step.updated.count(k)
                           ? tgt_step.updated.at(k)
                           : make_tensor({1, tgt_bank.dim}, tgt_bank.prototypes[k]);
        auto diff = sub(g, sp, tp);
        auto term = sum(g, mul(g, diff, diff));
        total = total ? add(g, total, term) : term;
    }
    return total ? scale(g, total, 1.0 / static_cast<double>(src_bank.dim)) : total;
}

/// One full pass over each dataset with the pretrained model: source bank
/// from ground-truth boxes, target bank from accepted pseudo-labeled RoIs.
inline std::pair<PrototypeBank, PrototypeBank> init_global_prototypes(
    DetectorModel& model, const Dataset& source, const Dataset& target, double score_thresh) {
    const std::size_t nc = model.cfg.num_classes;
    const std::size_t d = model.fc2_dim();
    auto src = PrototypeBank::create(Domain::Source, nc, d);
    auto tgt = PrototypeBank::create(Domain::Target, nc, d);

    std::vector<std::vector<double>> src_sum(nc, std::vector<double>(d, 0.0));
    std::vector<std::size_t> src_cnt(nc, 0);
    for (const auto& s : source) {
        const auto& anns = s.annotations();
        if (anns.empty()) continue;
        Graph g;
        auto fp = forward_to_rpn(g, model, s.to_tensor());
        std::vector<BBox> rois;
        for (const auto& a : anns) rois.push_back(a.box);
        auto head = roi_head_forward(g, model, fp.backbone.blocks[2], rois);
        for (std::size_t r = 0; r < anns.size(); ++r)
            for (std::size_t j = 0; j < d; ++j)
                src_sum[anns[r].category][j] += head.fc2_features->data[r * d + j];
        for (const auto& a : anns) ++src_cnt[a.category];
    }
    for (std::size_t k = 0; k < nc; ++k) {
        if (src_cnt[k] == 0) continue;
        for (std::size_t j = 0; j < d; ++j)
            src.prototypes[k][j] = src_sum[k][j] / static_cast<double>(src_cnt[k]);
        src.initialized[k] = true;
    }

    std::vector<std::vector<double>> tgt_sum(nc, std::vector<double>(d, 0.0));
    std::vector<std::size_t> tgt_cnt(nc, 0);
    for (const auto& s : target) {
        Graph g;
        auto fp = forward_to_rpn(g, model, s.to_tensor());
        auto rois = generate_proposals(fp.rpn.objectness, fp.rpn.deltas, fp.anchors, fp.img_w,
                                       fp.img_h, model.cfg.pre_nms_k, model.cfg.post_nms_k,
                                       model.cfg.proposal_nms_iou);
        if (rois.empty()) continue;
        auto head = roi_head_forward(g, model, fp.backbone.blocks[2], rois);
        auto labels = pseudo_labels(head.class_scores, nc, score_thresh);
        for (std::size_t r = 0; r < rois.size(); ++r) {
            if (labels[r] >= nc) continue;
            for (std::size_t j = 0; j < d; ++j)
                tgt_sum[labels[r]][j] += head.fc2_features->data[r * d + j];
            ++tgt_cnt[labels[r]];
        }
    }
    for (std::size_t k = 0; k < nc; ++k) {
        if (tgt_cnt[k] == 0) continue;
        for (std::size_t j = 0; j < d; ++j)
            tgt.prototypes[k][j] = tgt_sum[k][j] / static_cast<double>(tgt_cnt[k]);
        tgt.initialized[k] = true;
    }
    return {src, tgt};
}

}  // namespace cffa
