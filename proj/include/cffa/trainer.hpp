#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cffa/art.hpp"
#include "cffa/checkpoint.hpp"
#include "cffa/config.hpp"
#include "cffa/detector.hpp"
#include "cffa/domains.hpp"
#include "cffa/psa.hpp"

namespace cffa {

/// Uniform-without-replacement stream over one epoch-shuffled dataset.
struct EpochSampler {
    std::vector<std::uint64_t> perm;
    std::size_t pos = 0;

    std::size_t next(std::size_t n, Rng& rng) {
        if (n == 0) throw std::invalid_argument("sample_batch: empty dataset");
        if (pos >= perm.size() || perm.size() != n) {
            perm.resize(n);
            for (std::size_t i = 0; i < n; ++i) perm[i] = i;
            rng.shuffle(perm);
            pos = 0;
        }
        return static_cast<std::size_t>(perm[pos++]);
    }
};

struct TrainState {
    FullConfig cfg;
    DetectorModel model;
    std::array<DomainClassifier, 3> dcs;
    std::vector<std::pair<std::string, TensorPtr>> det_params, dc_params;
    std::vector<std::vector<double>> sgd_mom;        // per detector param
    std::vector<std::vector<double>> adam_m, adam_v; // per classifier param
    double adam_t = 0.0;
    PrototypeBank src_bank, tgt_bank;
    bool banks_ready = false;
    std::uint64_t iter = 0;  // global across pretrain + adapt
    Rng rng_src, rng_tgt, rng_step;
    EpochSampler samp_src, samp_tgt;
};

inline TrainState make_train_state(const FullConfig& cfg) {
    cfg.train.validate();
    TrainState s;
    s.cfg = cfg;
    s.model.cfg.num_classes = cfg.train.category_count;
    Rng init_rng(cfg.train.seed);
    s.model.init(init_rng);
    const std::size_t hidden = 16;
    for (std::size_t l = 0; l < 3; ++l)
        s.dcs[l] = DomainClassifier::create(s.model.cfg.channels[l], hidden, init_rng);
    s.det_params = s.model.named_params();
    for (std::size_t l = 0; l < 3; ++l) {
        auto ps = s.dcs[l].named_params("dc" + std::to_string(l));
        s.dc_params.insert(s.dc_params.end(), ps.begin(), ps.end());
    }
    for (const auto& [n, p] : s.det_params) s.sgd_mom.emplace_back(p->numel(), 0.0);
    for (const auto& [n, p] : s.dc_params) {
        s.adam_m.emplace_back(p->numel(), 0.0);
        s.adam_v.emplace_back(p->numel(), 0.0);
    }
    s.src_bank = PrototypeBank::create(Domain::Source, cfg.train.category_count, s.model.fc2_dim());
    s.tgt_bank = PrototypeBank::create(Domain::Target, cfg.train.category_count, s.model.fc2_dim());
    s.rng_src.reseed(cfg.train.seed + 1);
    s.rng_tgt.reseed(cfg.train.seed + 2);
    s.rng_step.reseed(cfg.train.seed + 3);
    return s;
}

/// Draws B/2 samples per domain. Target annotations are never touched here.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> sample_batch(
    TrainState& s, std::size_t n_source, std::size_t n_target) {
    const std::size_t half = s.cfg.train.batch_size / 2;
    std::vector<std::size_t> src, tgt;
    for (std::size_t i = 0; i < half; ++i) src.push_back(s.samp_src.next(n_source, s.rng_src));
    for (std::size_t i = 0; i < half; ++i) tgt.push_back(s.samp_tgt.next(n_target, s.rng_tgt));
    return {src, tgt};
}

namespace detail {

inline void sgd_step(TrainState& s, double lr) {
    for (std::size_t i = 0; i < s.det_params.size(); ++i) {
        auto& p = s.det_params[i].second;
        auto& m = s.sgd_mom[i];
        for (std::size_t j = 0; j < p->data.size(); ++j) {
            m[j] = 0.9 * m[j] + p->grad[j];
            p->data[j] -= lr * m[j];
        }
    }
}

inline void adam_step(TrainState& s, double lr, double grad_scale) {
    s.adam_t += 1.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, s.adam_t);
    const double c2 = 1.0 - std::pow(b2, s.adam_t);
    for (std::size_t i = 0; i < s.dc_params.size(); ++i) {
        auto& p = s.dc_params[i].second;
        auto& m = s.adam_m[i];
        auto& v = s.adam_v[i];
        for (std::size_t j = 0; j < p->data.size(); ++j) {
            const double gr = p->grad[j] * grad_scale;
            m[j] = b1 * m[j] + (1.0 - b1) * gr;
            v[j] = b2 * v[j] + (1.0 - b2) * gr * gr;
            p->data[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
        }
    }
}

inline void require_finite(double v, const std::string& term, const std::string& batch_id) {
    if (!std::isfinite(v))
        throw std::runtime_error("non-finite " + term + " at batch " + batch_id);
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

constexpr const char* kMetricsHeader = "iter,l_det,l_rpn,l_reg,l_cls,l_art,l_psa,l_total,lr\n";

/// One optimization step shared by the pretraining and adaptation phases.
/// `target` may be null during pretraining; adaptation modules run only when
/// their lambdas are positive (and, for PSA, after psa_start_iter).
inline void train_step(TrainState& s, const Dataset& source, const Dataset* target,
                       std::string* metrics) {
    const TrainConfig& tc = s.cfg.train;
    const bool adapting = target != nullptr;
    const std::size_t half = tc.batch_size / 2;
    const std::uint64_t adapt_iter = adapting ? s.iter - tc.pretrain_iters : 0;
    const bool art_on = adapting && tc.lambda1 > 0.0;
    const bool psa_on = adapting && tc.lambda2 > 0.0 && adapt_iter >= tc.psa_start_iter;
    const double lr = (!adapting || adapt_iter < tc.lr_decay_iter) ? tc.detector_lr
                                                                   : tc.detector_lr_after_decay;

    std::vector<std::size_t> src_idx, tgt_idx;
    for (std::size_t i = 0; i < half; ++i) src_idx.push_back(s.samp_src.next(source.size(), s.rng_src));
    if (adapting)
        for (std::size_t i = 0; i < half; ++i)
            tgt_idx.push_back(s.samp_tgt.next(target->size(), s.rng_tgt));

    Graph g;
    std::string batch_id = source[src_idx[0]].id;

    // --- Supervised learning on the source image(s) ------------------------
    std::vector<ForwardPass> src_fp;
    TensorPtr l_det;
    LossBreakdown det_vals{};
    for (auto i : src_idx) {
        auto fp = forward_to_rpn(g, s.model, source[i].to_tensor());
        auto dl = detection_loss(g, s.model, fp, source[i].annotations(), s.rng_step);
        const auto v = dl.values();
        det_vals.rpn_loss += v.rpn_loss / half;
        det_vals.reg_loss += v.reg_loss / half;
        det_vals.cls_loss += v.cls_loss / half;
        l_det = l_det ? add(g, l_det, dl.total) : dl.total;
        src_fp.push_back(std::move(fp));
    }
    if (half > 1) l_det = scale(g, l_det, 1.0 / static_cast<double>(half));
    det_vals.total = l_det->data[0];

    // --- Coarse-grained adaptation (ART) -----------------------------------
    TensorPtr l_art;
    std::vector<ForwardPass> tgt_fp;
    if (adapting) {
        for (auto i : tgt_idx)
            tgt_fp.push_back(forward_to_rpn(g, s.model, (*target)[i].to_tensor()));
    }
    if (art_on) {
        std::size_t n_img = 0;
        auto art_for = [&](const ForwardPass& fp, Domain dom) {
            AttentionMap att = compute_attention(fp.rpn.f_rpn);
            if (tc.zero_attention) std::fill(att.filtered.begin(), att.filtered.end(), 0.0);
            std::vector<TensorPtr> maps;
            for (std::size_t l = 0; l < 3; ++l)
                maps.push_back(adversarial_loss_map(g, fp.backbone.blocks[l], s.dcs[l], dom,
                                                    tc.grl_coeff));
            ++n_img;
            return art_loss(g, maps, att);
        };
        for (const auto& fp : src_fp) {
            auto t = art_for(fp, Domain::Source);
            l_art = l_art ? add(g, l_art, t) : t;
        }
        for (const auto& fp : tgt_fp) {
            auto t = art_for(fp, Domain::Target);
            l_art = add(g, l_art, t);
        }
        l_art = scale(g, l_art, 1.0 / static_cast<double>(n_img));
    }

    // --- Fine-grained adaptation (PSA) -------------------------------------
    TensorPtr l_psa;
    BankStepResult src_step, tgt_step;
    bool psa_computed = false;
    if (psa_on) {
        LocalPrototypeNodes src_local, tgt_local;
        for (std::size_t b = 0; b < src_fp.size(); ++b) {
            const auto& anns = source[src_idx[b]].annotations();
            if (anns.empty()) continue;
            std::vector<BBox> rois;
            std::vector<std::size_t> labels;
            for (const auto& a : anns) {
                rois.push_back(a.box);
                labels.push_back(a.category);
            }
            auto head = roi_head_forward(g, s.model, src_fp[b].backbone.blocks[2], rois);
            auto local = source_local_prototype_nodes(g, head.fc2_features, labels);
            for (auto& [k, slot] : local.by_class) src_local.by_class[k] = slot;
        }
        for (std::size_t b = 0; b < tgt_fp.size(); ++b) {
            const auto& fp = tgt_fp[b];
            auto rois = generate_proposals(fp.rpn.objectness, fp.rpn.deltas, fp.anchors, fp.img_w,
                                           fp.img_h, s.model.cfg.pre_nms_k, s.model.cfg.post_nms_k,
                                           s.model.cfg.proposal_nms_iou);
            if (rois.empty()) continue;
            auto head = roi_head_forward(g, s.model, fp.backbone.blocks[2], rois);
            auto local = target_local_prototype_nodes(g, head.fc2_features, head.class_scores,
                                                      tc.category_count, tc.pseudo_score_thresh);
            for (auto& [k, slot] : local.by_class) tgt_local.by_class[k] = slot;
        }
        src_step = update_global_nodes(g, s.src_bank, src_local);
        tgt_step = update_global_nodes(g, s.tgt_bank, tgt_local);
        l_psa = psa_loss_nodes(g, s.src_bank, s.tgt_bank, src_step, tgt_step);
        psa_computed = true;
    }

    // --- Combined objective and parameter updates --------------------------
    TensorPtr total = l_det;
    if (l_art) total = add(g, total, scale(g, l_art, tc.lambda1));
    if (l_psa) total = add(g, total, scale(g, l_psa, tc.lambda2));

    detail::require_finite(det_vals.rpn_loss, "l_rpn", batch_id);
    detail::require_finite(det_vals.reg_loss, "l_reg", batch_id);
    detail::require_finite(det_vals.cls_loss, "l_cls", batch_id);
    if (l_art) detail::require_finite(l_art->data[0], "l_art", batch_id);
    if (l_psa) detail::require_finite(l_psa->data[0], "l_psa", batch_id);
    detail::require_finite(total->data[0], "l_total", batch_id);

    g.backward(total);
    detail::sgd_step(s, lr);
    // Classifiers descend the plain adversarial loss; undo the lambda1 factor
    // their gradients picked up inside the combined objective.
    if (art_on) detail::adam_step(s, tc.classifier_lr, 1.0 / tc.lambda1);
    if (psa_computed) {
        commit_bank(s.src_bank, src_step);
        commit_bank(s.tgt_bank, tgt_step);
    }

    if (metrics) {
        *metrics += std::to_string(s.iter) + "," + detail::fmt(det_vals.total) + "," +
                    detail::fmt(det_vals.rpn_loss) + "," + detail::fmt(det_vals.reg_loss) + "," +
                    detail::fmt(det_vals.cls_loss) + ",";
        *metrics += l_art ? detail::fmt(l_art->data[0]) : "";
        *metrics += ",";
        *metrics += psa_computed ? detail::fmt(l_psa ? l_psa->data[0] : 0.0) : "";
        *metrics += "," + detail::fmt(total->data[0]) + "," + detail::fmt(lr) + "\n";
    }
    ++s.iter;
}

/// Supervised pretraining on the labeled source domain (global iterations
/// [0, pretrain_iters)).
inline void pretrain(TrainState& s, const Dataset& source, std::string* metrics) {
    if (metrics && metrics->empty()) *metrics = kMetricsHeader;
    while (s.iter < s.cfg.train.pretrain_iters) train_step(s, source, nullptr, metrics);
}

/// Joint adaptation loop (global iterations [pretrain_iters,
/// pretrain_iters + adapt_iters)). Initializes global prototype banks once.
inline void adapt(TrainState& s, const Dataset& source, const Dataset& target,
                  std::string* metrics) {
    const TrainConfig& tc = s.cfg.train;
    if (s.iter < tc.pretrain_iters)
        throw std::invalid_argument("adapt: state is not pretrained");
    if (!s.banks_ready && tc.lambda2 > 0.0) {
        auto banks = init_global_prototypes(s.model, source, target, tc.pseudo_score_thresh);
        s.src_bank = banks.first;
        s.tgt_bank = banks.second;
        s.banks_ready = true;
    }
    if (metrics && metrics->empty()) *metrics = kMetricsHeader;
    while (s.iter < tc.pretrain_iters + tc.adapt_iters) train_step(s, source, &target, metrics);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline NamedTensorFile state_to_checkpoint(const TrainState& s) {
    NamedTensorFile f;
    auto cfg_bytes = bytes_to_doubles(serialize_config(s.cfg));
    f.add("config", {cfg_bytes.size()}, cfg_bytes);
    f.add("state.iter", {1}, {static_cast<double>(s.iter)});
    f.add("state.banks_ready", {1}, {s.banks_ready ? 1.0 : 0.0});
    for (const auto& [n, p] : s.det_params) f.add(n, p->shape, p->data);
    for (const auto& [n, p] : s.dc_params) f.add(n, p->shape, p->data);
    for (std::size_t i = 0; i < s.det_params.size(); ++i)
        f.add("mom." + s.det_params[i].first, {s.sgd_mom[i].size()}, s.sgd_mom[i]);
    for (std::size_t i = 0; i < s.dc_params.size(); ++i) {
        f.add("adam.m." + s.dc_params[i].first, {s.adam_m[i].size()}, s.adam_m[i]);
        f.add("adam.v." + s.dc_params[i].first, {s.adam_v[i].size()}, s.adam_v[i]);
    }
    f.add("adam.t", {1}, {s.adam_t});
    auto add_bank = [&f](const std::string& prefix, const PrototypeBank& b) {
        std::vector<double> flat;
        for (const auto& p : b.prototypes) flat.insert(flat.end(), p.begin(), p.end());
        f.add(prefix + ".proto", {b.num_classes(), b.dim}, std::move(flat));
        std::vector<double> init(b.num_classes());
        for (std::size_t k = 0; k < b.num_classes(); ++k) init[k] = b.initialized[k] ? 1.0 : 0.0;
        f.add(prefix + ".init", {b.num_classes()}, std::move(init));
    };
    add_bank("bank.src", s.src_bank);
    add_bank("bank.tgt", s.tgt_bank);
    auto add_rng = [&f](const std::string& name, const Rng& r) {
        std::vector<double> v;
        for (auto w : r.state()) v.push_back(u64_to_f64_bits(w));
        f.add(name, {4}, std::move(v));
    };
    add_rng("rng.src", s.rng_src);
    add_rng("rng.tgt", s.rng_tgt);
    add_rng("rng.step", s.rng_step);
    auto add_sampler = [&f](const std::string& prefix, const EpochSampler& es) {
        std::vector<double> perm(es.perm.begin(), es.perm.end());
        const std::size_t n = perm.size();
        f.add(prefix + ".perm", {n}, std::move(perm));
        f.add(prefix + ".pos", {1}, {static_cast<double>(es.pos)});
    };
    add_sampler("sampler.src", s.samp_src);
    add_sampler("sampler.tgt", s.samp_tgt);
    return f;
}

inline TrainState checkpoint_to_state(const NamedTensorFile& f) {
    std::istringstream cfg_text(doubles_to_bytes(f.get("config").values));
    FullConfig cfg = parse_config_text(cfg_text, "<checkpoint>");
    TrainState s = make_train_state(cfg);
    s.iter = static_cast<std::uint64_t>(f.get("state.iter").values[0]);
    s.banks_ready = f.get("state.banks_ready").values[0] != 0.0;
    auto load_param = [&f](const std::string& n, const TensorPtr& p) {
        const auto& e = f.get(n);
        if (e.values.size() != p->numel())
            throw std::runtime_error("checkpoint: shape mismatch for " + n);
        p->data = e.values;
    };
    for (const auto& [n, p] : s.det_params) load_param(n, p);
    for (const auto& [n, p] : s.dc_params) load_param(n, p);
    for (std::size_t i = 0; i < s.det_params.size(); ++i)
        s.sgd_mom[i] = f.get("mom." + s.det_params[i].first).values;
    for (std::size_t i = 0; i < s.dc_params.size(); ++i) {
        s.adam_m[i] = f.get("adam.m." + s.dc_params[i].first).values;
        s.adam_v[i] = f.get("adam.v." + s.dc_params[i].first).values;
    }
    s.adam_t = f.get("adam.t").values[0];
    auto load_bank = [&f](const std::string& prefix, PrototypeBank& b) {
        const auto& proto = f.get(prefix + ".proto");
        const auto& init = f.get(prefix + ".init");
        for (std::size_t k = 0; k < b.num_classes(); ++k) {
            for (std::size_t j = 0; j < b.dim; ++j) b.prototypes[k][j] = proto.values[k * b.dim + j];
            b.initialized[k] = init.values[k] != 0.0;
        }
    };
    load_bank("bank.src", s.src_bank);
    load_bank("bank.tgt", s.tgt_bank);
    auto load_rng = [&f](const std::string& name, Rng& r) {
        const auto& e = f.get(name);
        std::array<std::uint64_t, 4> st;
        for (std::size_t i = 0; i < 4; ++i) st[i] = f64_bits_to_u64(e.values[i]);
        r.set_state(st);
    };
    load_rng("rng.src", s.rng_src);
    load_rng("rng.tgt", s.rng_tgt);
    load_rng("rng.step", s.rng_step);
    auto load_sampler = [&f](const std::string& prefix, EpochSampler& es) {
        const auto& perm = f.get(prefix + ".perm");
        es.perm.assign(perm.values.begin(), perm.values.end());
        es.pos = static_cast<std::size_t>(f.get(prefix + ".pos").values[0]);
    };
    load_sampler("sampler.src", s.samp_src);
    load_sampler("sampler.tgt", s.samp_tgt);
    return s;
}

inline void save_state(const TrainState& s, const std::string& path) {
    save_checkpoint_file(state_to_checkpoint(s), path);
}

inline TrainState load_state(const std::string& path) {
    return checkpoint_to_state(load_checkpoint_file(path));
}

}  // namespace cffa
