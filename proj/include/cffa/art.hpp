#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cffa/detector.hpp"
#include "cffa/ops.hpp"
#include "cffa/tensor.hpp"

namespace cffa {

/// Foreground attention derived from the RPN feature map: sigmoid of the
/// channel-mean absolute activation, thresholded at its spatial mean.
/// Values are plain numbers, deliberately detached from the gradient graph.
struct AttentionMap {
    std::size_t h = 0, w = 0;
    std::vector<double> pre_filter;  // M(x), each value in (0,1)
    double threshold = 0.0;          // T(x), mean of M
    std::vector<double> filtered;    // A(x) = I(M > T) * M
};

inline AttentionMap compute_attention(const TensorPtr& f_rpn) {
    check_shape(f_rpn->rank() == 4 && f_rpn->dim(0) == 1, "compute_attention: [1,C,H,W] required");
    const std::size_t c = f_rpn->dim(1), h = f_rpn->dim(2), w = f_rpn->dim(3);
    check_shape(c >= 1, "compute_attention: at least one channel");
    AttentionMap a;
    a.h = h;
    a.w = w;
    a.pre_filter.resize(h * w);
    const std::size_t plane = h * w;
    for (std::size_t p = 0; p < plane; ++p) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) s += std::abs(f_rpn->data[ch * plane + p]);
        a.pre_filter[p] = 1.0 / (1.0 + std::exp(-s / static_cast<double>(c)));
    }
    double t = 0.0;
    for (double v : a.pre_filter) t += v;
    a.threshold = t / static_cast<double>(plane);
    a.filtered.resize(plane);
    for (std::size_t p = 0; p < plane; ++p)
        a.filtered[p] = a.pre_filter[p] > a.threshold ? a.pre_filter[p] : 0.0;
    return a;
}

/// Per-block pixel-wise domain classifier: 1x1 conv, relu, 1x1 conv, sigmoid.
struct DomainClassifier {
    ConvParam conv1, conv2;

    static DomainClassifier create(std::size_t in_channels, std::size_t hidden, Rng& rng) {
        DomainClassifier d;
        d.conv1 = DetectorModel::conv_param(hidden, in_channels, 1, rng);
        d.conv2 = DetectorModel::conv_param(1, hidden, 1, rng);
        return d;
    }

    TensorPtr forward(Graph& g, const TensorPtr& x) {
        auto h = relu(g, conv2d(g, x, conv1.w, conv1.b, 1, 0));
        return sigmoid(g, conv2d(g, h, conv2.w, conv2.b, 1, 0));
    }

    std::vector<std::pair<std::string, TensorPtr>> named_params(const std::string& prefix) {
        return {{prefix + ".conv1.w", conv1.w},
                {prefix + ".conv1.b", conv1.b},
                {prefix + ".conv2.w", conv2.w},
                {prefix + ".conv2.b", conv2.b}};
    }
};

enum class Domain { Source, Target };

/// Per-location adversarial BCE behind a gradient-reverse layer.
/// The classifier descends this loss; the backbone ascends it via the GRL.
inline TensorPtr adversarial_loss_map(Graph& g, const TensorPtr& features, DomainClassifier& d,
                                      Domain domain, double grl_coeff) {
    auto p = d.forward(g, gradient_reverse(g, features, grl_coeff));
    const double target = domain == Domain::Source ? 1.0 : 0.0;
    return binary_cross_entropy(g, p, std::vector<double>(p->numel(), target));
}

/// Attention-weighted mean of per-block adversarial maps, with the skip
/// connection keeping a baseline weight of 1 everywhere. Each block is
/// normalized by its location count (and the result by the block count) so
/// the transfer term stays commensurate with the per-image detection loss.
inline TensorPtr art_loss(Graph& g, const std::vector<TensorPtr>& loss_maps,
                          const AttentionMap& attention) {
    check_shape(!loss_maps.empty(), "art_loss: at least one loss map");
    TensorPtr total;
    auto att = make_tensor({attention.h, attention.w}, attention.filtered);
    for (const auto& lm : loss_maps) {
        const std::size_t hl = lm->dim(lm->rank() - 2), wl = lm->dim(lm->rank() - 1);
        check_shape(hl >= attention.h && wl >= attention.w,
                    "art_loss: block smaller than attention map");
        std::vector<double> weights(hl * wl);
        {
            Graph up;  // fixed-value interpolation, no gradient needed
            auto u = bilinear_upsample(up, att, hl, wl);
            for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = 1.0 + u->data[i];
        }
        auto weighted = scale(g, sum(g, weight_by(g, lm, std::move(weights))),
                              1.0 / static_cast<double>(hl * wl));
        total = total ? add(g, total, weighted) : weighted;
    }
    return scale(g, total, 1.0 / static_cast<double>(loss_maps.size()));
}

}  // namespace cffa
