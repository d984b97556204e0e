#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cffa/box.hpp"
#include "cffa/domains.hpp"
#include "cffa/ops.hpp"
#include "cffa/rng.hpp"
#include "cffa/tensor.hpp"

namespace cffa {

struct DetectorConfig {
    std::size_t num_classes = 3;
    std::size_t channels[3] = {16, 32, 64};
    std::size_t rpn_channels = 64;
    std::size_t fc_width = 64;
    std::size_t roi_pool = 3;
    std::vector<double> anchor_scales = {12.0, 24.0, 40.0};
    std::size_t stride = 8;  // total backbone downsampling
    std::size_t pre_nms_k = 64;
    std::size_t post_nms_k = 32;
    double proposal_nms_iou = 0.7;
    std::size_t roi_sample = 32;
    double roi_fg_fraction = 0.25;
    double rpn_pos_iou = 0.7, rpn_neg_iou = 0.3;
    double roi_fg_iou = 0.5;
};

struct ConvParam {
    TensorPtr w, b;
};
struct FcParam {
    TensorPtr w, b;
};

struct LossBreakdown {
    double rpn_loss = 0, reg_loss = 0, cls_loss = 0, total = 0;
};

/// Miniature two-stage detector: 3-block strided backbone, RPN with shared
/// conv + objectness/delta heads, RoI head with two FC layers.
struct DetectorModel {
    DetectorConfig cfg;
    ConvParam block[3];
    ConvParam rpn_conv, rpn_obj, rpn_delta;
    FcParam fc1, fc2, cls_head, box_head;

    std::size_t anchors_per_cell() const { return cfg.anchor_scales.size(); }
    std::size_t fc2_dim() const { return cfg.fc_width; }

    static ConvParam conv_param(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng,
                                double scale_mul = 1.0) {
        ConvParam p;
        p.w = make_tensor({cout, cin, k, k}, true);
        p.b = make_tensor({cout}, true);
        const double s = scale_mul * std::sqrt(2.0 / static_cast<double>(cin * k * k));
        for (auto& v : p.w->data) v = s * rng.normal();
        return p;
    }
    static FcParam fc_param(std::size_t dout, std::size_t din, Rng& rng, double scale_mul = 1.0) {
        FcParam p;
        p.w = make_tensor({dout, din}, true);
        p.b = make_tensor({dout}, true);
        const double s = scale_mul * std::sqrt(2.0 / static_cast<double>(din));
        for (auto& v : p.w->data) v = s * rng.normal();
        return p;
    }

    void init(Rng& rng) {
        const auto a = anchors_per_cell();
        std::size_t cin = 3;
        for (std::size_t l = 0; l < 3; ++l) {
            block[l] = conv_param(cfg.channels[l], cin, 3, rng);
            cin = cfg.channels[l];
        }
        rpn_conv = conv_param(cfg.rpn_channels, cfg.channels[2], 3, rng);
        rpn_obj = conv_param(a, cfg.rpn_channels, 1, rng, 0.1);
        rpn_delta = conv_param(4 * a, cfg.rpn_channels, 1, rng, 0.1);
        const std::size_t pooled = cfg.channels[2] * cfg.roi_pool * cfg.roi_pool;
        fc1 = fc_param(cfg.fc_width, pooled, rng);
        fc2 = fc_param(cfg.fc_width, cfg.fc_width, rng);
        cls_head = fc_param(cfg.num_classes + 1, cfg.fc_width, rng, 0.1);
        box_head = fc_param(4 * (cfg.num_classes + 1), cfg.fc_width, rng, 0.1);
    }

    std::vector<std::pair<std::string, TensorPtr>> named_params() {
        std::vector<std::pair<std::string, TensorPtr>> out;
        auto push = [&](const std::string& n, const TensorPtr& t) { out.emplace_back(n, t); };
        for (std::size_t l = 0; l < 3; ++l) {
            push("det.block" + std::to_string(l) + ".w", block[l].w);
            push("det.block" + std::to_string(l) + ".b", block[l].b);
        }
        push("det.rpn_conv.w", rpn_conv.w);
        push("det.rpn_conv.b", rpn_conv.b);
        push("det.rpn_obj.w", rpn_obj.w);
        push("det.rpn_obj.b", rpn_obj.b);
        push("det.rpn_delta.w", rpn_delta.w);
        push("det.rpn_delta.b", rpn_delta.b);
        push("det.fc1.w", fc1.w);
        push("det.fc1.b", fc1.b);
        push("det.fc2.w", fc2.w);
        push("det.fc2.b", fc2.b);
        push("det.cls_head.w", cls_head.w);
        push("det.cls_head.b", cls_head.b);
        push("det.box_head.w", box_head.w);
        push("det.box_head.b", box_head.b);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Anchors and box coding
// ---------------------------------------------------------------------------

inline std::vector<BBox> make_anchors(std::size_t hf, std::size_t wf, std::size_t stride,
                                      const std::vector<double>& scales) {
    std::vector<BBox> out;
    out.reserve(hf * wf * scales.size());
    for (std::size_t y = 0; y < hf; ++y)
        for (std::size_t x = 0; x < wf; ++x)
            for (double s : scales) {
                const double cx = (static_cast<double>(x) + 0.5) * stride;
                const double cy = (static_cast<double>(y) + 0.5) * stride;
                out.push_back({cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
            }
    return out;
}

/// Standard (tx,ty,tw,th) parameterization of box relative to anchor.
inline std::array<double, 4> encode_box(const BBox& box, const BBox& anchor) {
    return {(box.cx() - anchor.cx()) / anchor.width(), (box.cy() - anchor.cy()) / anchor.height(),
            std::log(box.width() / anchor.width()), std::log(box.height() / anchor.height())};
}

inline BBox decode_box(const BBox& anchor, double tx, double ty, double tw, double th) {
    tw = std::clamp(tw, -4.0, 4.0);
    th = std::clamp(th, -4.0, 4.0);
    const double cx = anchor.cx() + tx * anchor.width();
    const double cy = anchor.cy() + ty * anchor.height();
    const double w = anchor.width() * std::exp(tw);
    const double h = anchor.height() * std::exp(th);
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

/// Greedy score-descending NMS; ties broken by index for determinism.
inline std::vector<std::size_t> nms(const std::vector<BBox>& boxes,
                                    const std::vector<double>& scores, double iou_thresh) {
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::size_t> keep;
    std::vector<bool> dead(boxes.size(), false);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (dead[i]) continue;
        keep.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (!dead[j] && iou(boxes[i], boxes[j]) > iou_thresh) dead[j] = true;
        }
    }
    return keep;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

struct BackboneFeatures {
    TensorPtr blocks[3];
};

inline BackboneFeatures backbone_forward(Graph& g, DetectorModel& m, const TensorPtr& image) {
    check_shape(image->rank() == 4 && image->dim(1) == 3, "backbone: [1,3,H,W] image required");
    check_shape(image->dim(2) % 8 == 0 && image->dim(3) % 8 == 0,
                "backbone: image size must be divisible by 8");
    BackboneFeatures f;
    TensorPtr x = image;
    for (std::size_t l = 0; l < 3; ++l) {
        x = relu(g, conv2d(g, x, m.block[l].w, m.block[l].b, 2, 1));
        f.blocks[l] = x;
    }
    return f;
}

struct RpnOutputs {
    TensorPtr f_rpn;       // [1,Cr,Hf,Wf], post-relu shared conv
    TensorPtr objectness;  // [1,A,Hf,Wf], sigmoid
    TensorPtr deltas;      // [1,4A,Hf,Wf]
};

inline RpnOutputs rpn_forward(Graph& g, DetectorModel& m, const TensorPtr& top_feature) {
    RpnOutputs r;
    r.f_rpn = relu(g, conv2d(g, top_feature, m.rpn_conv.w, m.rpn_conv.b, 1, 1));
    r.objectness = sigmoid(g, conv2d(g, r.f_rpn, m.rpn_obj.w, m.rpn_obj.b, 1, 0));
    r.deltas = conv2d(g, r.f_rpn, m.rpn_delta.w, m.rpn_delta.b, 1, 0);
    return r;
}

/// Flattened anchor order matching make_anchors: (y, x, scale).
inline double anchor_objectness(const TensorPtr& obj, std::size_t hf, std::size_t wf,
                                std::size_t a_per_cell, std::size_t idx) {
    const std::size_t cell = idx / a_per_cell, a = idx % a_per_cell;
    const std::size_t y = cell / wf, x = cell % wf;
    return obj->data[(a * hf + y) * wf + x];
}

inline std::array<double, 4> anchor_deltas(const TensorPtr& deltas, std::size_t hf, std::size_t wf,
                                           std::size_t a_per_cell, std::size_t idx) {
    const std::size_t cell = idx / a_per_cell, a = idx % a_per_cell;
    const std::size_t y = cell / wf, x = cell % wf;
    std::array<double, 4> t;
    for (std::size_t k = 0; k < 4; ++k) t[k] = deltas->data[((4 * a + k) * hf + y) * wf + x];
    return t;
}

/// Decode + clip + top-k + NMS on plain values (no gradient through boxes).
inline std::vector<BBox> generate_proposals(const TensorPtr& objectness, const TensorPtr& deltas,
                                            const std::vector<BBox>& anchors, double img_w,
                                            double img_h, std::size_t pre_nms_k,
                                            std::size_t post_nms_k, double nms_iou) {
    if (anchors.empty()) return {};
    const std::size_t a_per_cell = objectness->dim(1);
    const std::size_t hf = objectness->dim(2), wf = objectness->dim(3);
    std::vector<BBox> boxes;
    std::vector<double> scores;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const auto t = anchor_deltas(deltas, hf, wf, a_per_cell, i);
        BBox b = decode_box(anchors[i], t[0], t[1], t[2], t[3]).clipped(img_w, img_h);
        if (b.width() < 1.0 || b.height() < 1.0) continue;
        boxes.push_back(b);
        scores.push_back(anchor_objectness(objectness, hf, wf, a_per_cell, i));
    }
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    if (order.size() > pre_nms_k) order.resize(pre_nms_k);
    std::vector<BBox> cand;
    std::vector<double> cand_scores;
    for (auto i : order) {
        cand.push_back(boxes[i]);
        cand_scores.push_back(scores[i]);
    }
    auto keep = nms(cand, cand_scores, nms_iou);
    if (keep.size() > post_nms_k) keep.resize(post_nms_k);
    std::vector<BBox> out;
    for (auto i : keep) out.push_back(cand[i]);
    return out;
}

struct RoiHeadOutputs {
    TensorPtr fc2_features;  // [R, Dfc], post-relu FC2
    TensorPtr class_scores;  // [R, C+1], softmax rows
    TensorPtr box_refine;    // [R, 4(C+1)]
    std::size_t count = 0;
};

inline RoiHeadOutputs roi_head_forward(Graph& g, DetectorModel& m, const TensorPtr& top_feature,
                                       const std::vector<BBox>& rois) {
    RoiHeadOutputs out;
    out.count = rois.size();
    if (rois.empty()) {
        out.fc2_features = make_tensor({0, m.cfg.fc_width});
        out.class_scores = make_tensor({0, m.cfg.num_classes + 1});
        out.box_refine = make_tensor({0, 4 * (m.cfg.num_classes + 1)});
        return out;
    }
    const double s = static_cast<double>(m.cfg.stride);
    std::vector<TensorPtr> pooled;
    pooled.reserve(rois.size());
    for (const auto& r : rois) {
        // map pixel box to feature coordinates (cell centers at +0.5)
        pooled.push_back(roi_align(g, top_feature, r.x_min / s - 0.5, r.y_min / s - 0.5,
                                   r.x_max / s - 0.5, r.y_max / s - 0.5, m.cfg.roi_pool));
    }
    auto x = concat_rows(g, pooled);
    auto h1 = relu(g, fully_connected(g, x, m.fc1.w, m.fc1.b));
    out.fc2_features = relu(g, fully_connected(g, h1, m.fc2.w, m.fc2.b));
    out.class_scores = softmax_rows(g, fully_connected(g, out.fc2_features, m.cls_head.w, m.cls_head.b));
    out.box_refine = fully_connected(g, out.fc2_features, m.box_head.w, m.box_head.b);
    return out;
}

// ---------------------------------------------------------------------------
// Supervised loss (source domain)
// ---------------------------------------------------------------------------

struct DetectionLoss {
    TensorPtr rpn, reg, cls, total;  // graph scalars
    LossBreakdown values() const {
        return {rpn->data[0], reg->data[0], cls->data[0], total->data[0]};
    }
};

struct ForwardPass {
    BackboneFeatures backbone;
    RpnOutputs rpn;
    std::vector<BBox> anchors;
    double img_w = 0, img_h = 0;
};

inline ForwardPass forward_to_rpn(Graph& g, DetectorModel& m, const TensorPtr& image) {
    ForwardPass fp;
    fp.img_h = static_cast<double>(image->dim(2));
    fp.img_w = static_cast<double>(image->dim(3));
    fp.backbone = backbone_forward(g, m, image);
    fp.rpn = rpn_forward(g, m, fp.backbone.blocks[2]);
    fp.anchors = make_anchors(fp.backbone.blocks[2]->dim(2), fp.backbone.blocks[2]->dim(3),
                              m.cfg.stride, m.cfg.anchor_scales);
    return fp;
}

/// Anchor labels: +1 positive, 0 negative, -1 ignored. Positive if IoU above
/// the high threshold or best match for a ground-truth box.
inline std::vector<int> assign_anchors(const std::vector<BBox>& anchors,
                                       const std::vector<Annotation>& gts, double pos_iou,
                                       double neg_iou) {
    std::vector<int> labels(anchors.size(), 0);
    if (gts.empty()) return labels;  // everything stays negative
    std::vector<double> best(anchors.size(), 0.0);
    std::vector<std::size_t> gt_best(gts.size(), 0);
    std::vector<double> gt_best_iou(gts.size(), -1.0);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        for (std::size_t j = 0; j < gts.size(); ++j) {
            const double v = iou(anchors[i], gts[j].box);
            best[i] = std::max(best[i], v);
            if (v > gt_best_iou[j]) {
                gt_best_iou[j] = v;
                gt_best[j] = i;
            }
        }
    }
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (best[i] >= pos_iou) labels[i] = 1;
        else if (best[i] <= neg_iou) labels[i] = 0;
        else labels[i] = -1;
    }
    for (std::size_t j = 0; j < gts.size(); ++j)
        if (gt_best_iou[j] > 0.0) labels[gt_best[j]] = 1;
    return labels;
}

/// Best-matching ground truth index per anchor (for delta targets).
inline std::vector<std::size_t> best_gt_per_anchor(const std::vector<BBox>& anchors,
                                                   const std::vector<Annotation>& gts) {
    std::vector<std::size_t> out(anchors.size(), 0);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        double best = -1.0;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            const double v = iou(anchors[i], gts[j].box);
            if (v > best) {
                best = v;
                out[i] = j;
            }
        }
    }
    return out;
}

inline DetectionLoss detection_loss(Graph& g, DetectorModel& m, const ForwardPass& fp,
                                    const std::vector<Annotation>& gts, Rng& rng) {
    const std::size_t hf = fp.rpn.objectness->dim(2), wf = fp.rpn.objectness->dim(3);
    const std::size_t a_per_cell = m.anchors_per_cell();
    const std::size_t n_anchor = fp.anchors.size();

    // --- RPN objectness BCE over non-ignored anchors -----------------------
    auto labels = assign_anchors(fp.anchors, gts, m.cfg.rpn_pos_iou, m.cfg.rpn_neg_iou);
    std::vector<double> obj_target(fp.rpn.objectness->numel(), 0.0);
    std::vector<double> obj_mask(fp.rpn.objectness->numel(), 0.0);
    std::size_t n_considered = 0, n_pos = 0;
    auto plane_index = [&](std::size_t idx) {
        const std::size_t cell = idx / a_per_cell, a = idx % a_per_cell;
        const std::size_t y = cell / wf, x = cell % wf;
        return (a * hf + y) * wf + x;
    };
    for (std::size_t i = 0; i < n_anchor; ++i) {
        if (labels[i] < 0) continue;
        const std::size_t pi = plane_index(i);
        obj_mask[pi] = 1.0;
        obj_target[pi] = labels[i] == 1 ? 1.0 : 0.0;
        ++n_considered;
        if (labels[i] == 1) ++n_pos;
    }
    auto bce_map = binary_cross_entropy(g, fp.rpn.objectness, obj_target);
    auto bce_sum = sum(g, weight_by(g, bce_map, obj_mask));
    auto rpn_cls = scale(g, bce_sum, 1.0 / std::max<std::size_t>(1, n_considered));

    // --- RPN delta smooth-L1 on positive anchors ---------------------------
    auto gt_of = best_gt_per_anchor(fp.anchors, gts);
    std::vector<double> delta_target(fp.rpn.deltas->numel(), 0.0);
    std::vector<double> delta_mask(fp.rpn.deltas->numel(), 0.0);
    for (std::size_t i = 0; i < n_anchor; ++i) {
        if (labels[i] != 1 || gts.empty()) continue;
        const auto t = encode_box(gts[gt_of[i]].box, fp.anchors[i]);
        const std::size_t cell = i / a_per_cell, a = i % a_per_cell;
        const std::size_t y = cell / wf, x = cell % wf;
        for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t di = ((4 * a + k) * hf + y) * wf + x;
            delta_target[di] = t[k];
            delta_mask[di] = 1.0;
        }
    }
    auto delta_err = smooth_l1(g, shift_by(g, fp.rpn.deltas, delta_target));
    auto rpn_reg = scale(g, sum(g, weight_by(g, delta_err, delta_mask)),
                         1.0 / std::max<std::size_t>(1, 4 * n_pos));
    auto rpn_total = add(g, rpn_cls, rpn_reg);

    // --- RoI sampling: current proposals plus ground-truth boxes -----------
    auto proposals = generate_proposals(fp.rpn.objectness, fp.rpn.deltas, fp.anchors, fp.img_w,
                                        fp.img_h, m.cfg.pre_nms_k, m.cfg.post_nms_k,
                                        m.cfg.proposal_nms_iou);
    for (const auto& a : gts) proposals.push_back(a.box);

    std::vector<std::size_t> fg, bg;
    std::vector<std::size_t> fg_class, fg_gt;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
        double best = -1.0;
        std::size_t bj = 0;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            const double v = iou(proposals[i], gts[j].box);
            if (v > best) {
                best = v;
                bj = j;
            }
        }
        if (!gts.empty() && best >= m.cfg.roi_fg_iou) {
            fg.push_back(i);
            fg_class.push_back(gts[bj].category + 1);  // 0 is background
            fg_gt.push_back(bj);
        } else {
            bg.push_back(i);
        }
    }
    const std::size_t max_fg =
        static_cast<std::size_t>(m.cfg.roi_fg_fraction * static_cast<double>(m.cfg.roi_sample));
    auto subsample = [&rng](std::vector<std::size_t>& v, std::size_t want) {
        while (v.size() > want) {
            const std::size_t drop = static_cast<std::size_t>(rng.uniform_int(v.size()));
            v.erase(v.begin() + static_cast<std::ptrdiff_t>(drop));
        }
    };
    std::vector<std::size_t> fg_keep_order(fg.size());
    std::iota(fg_keep_order.begin(), fg_keep_order.end(), 0);
    subsample(fg_keep_order, max_fg);
    subsample(bg, m.cfg.roi_sample - std::min(max_fg, fg.size()));

    std::vector<BBox> rois;
    std::vector<std::size_t> roi_labels;
    std::vector<std::size_t> roi_gt;  // valid for foreground only
    for (auto oi : fg_keep_order) {
        rois.push_back(proposals[fg[oi]]);
        roi_labels.push_back(fg_class[oi]);
        roi_gt.push_back(fg_gt[oi]);
    }
    const std::size_t n_fg = rois.size();
    for (auto i : bg) {
        rois.push_back(proposals[i]);
        roi_labels.push_back(0);
    }

    DetectionLoss out;
    out.rpn = rpn_total;
    if (rois.empty()) {
        out.cls = make_scalar(0.0);
        out.reg = make_scalar(0.0);
        out.total = rpn_total;
        return out;
    }
    auto head = roi_head_forward(g, m, fp.backbone.blocks[2], rois);
    out.cls = cross_entropy(g, head.class_scores, roi_labels);

    // class-specific deltas for foreground RoIs
    const std::size_t dbox = 4 * (m.cfg.num_classes + 1);
    std::vector<double> box_target(head.box_refine->numel(), 0.0);
    std::vector<double> box_mask(head.box_refine->numel(), 0.0);
    for (std::size_t r = 0; r < n_fg; ++r) {
        const auto t = encode_box(gts[roi_gt[r]].box, rois[r]);
        for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t bi = r * dbox + 4 * roi_labels[r] + k;
            box_target[bi] = t[k];
            box_mask[bi] = 1.0;
        }
    }
    auto box_err = smooth_l1(g, shift_by(g, head.box_refine, box_target));
    out.reg = scale(g, sum(g, weight_by(g, box_err, box_mask)),
                    1.0 / std::max<std::size_t>(1, 4 * n_fg));
    out.total = add(g, add(g, out.rpn, out.reg), out.cls);
    return out;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

inline std::vector<Detection> detect(DetectorModel& m, const TensorPtr& image, double score_thresh,
                                     double nms_iou) {
    Graph g;
    auto fp = forward_to_rpn(g, m, image);
    auto proposals = generate_proposals(fp.rpn.objectness, fp.rpn.deltas, fp.anchors, fp.img_w,
                                        fp.img_h, m.cfg.pre_nms_k, m.cfg.post_nms_k,
                                        m.cfg.proposal_nms_iou);
    if (proposals.empty()) return {};
    auto head = roi_head_forward(g, m, fp.backbone.blocks[2], proposals);
    const std::size_t nc = m.cfg.num_classes;
    std::vector<Detection> out;
    for (std::size_t k = 0; k < nc; ++k) {
        std::vector<BBox> boxes;
        std::vector<double> scores;
        for (std::size_t r = 0; r < proposals.size(); ++r) {
            const double sc = head.class_scores->data[r * (nc + 1) + (k + 1)];
            if (sc < score_thresh) continue;
            const std::size_t off = r * 4 * (nc + 1) + 4 * (k + 1);
            BBox b = decode_box(proposals[r], head.box_refine->data[off],
                                head.box_refine->data[off + 1], head.box_refine->data[off + 2],
                                head.box_refine->data[off + 3])
                         .clipped(fp.img_w, fp.img_h);
            if (b.width() < 1.0 || b.height() < 1.0) continue;
            boxes.push_back(b);
            scores.push_back(sc);
        }
        for (auto i : nms(boxes, scores, nms_iou)) out.push_back({boxes[i], k, scores[i]});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    return out;
}

}  // namespace cffa
