#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace cffa {

/// Dense row-major tensor of doubles with an optional gradient buffer.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, bool rg = false)
        : shape(std::move(s)), requires_grad(rg) {
        data.assign(numel(), 0.0);
        if (requires_grad) grad.assign(numel(), 0.0);
    }

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    void zero_grad() {
        if (requires_grad) grad.assign(data.size(), 0.0);
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(std::vector<std::size_t> shape, bool requires_grad = false) {
    return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

inline TensorPtr make_tensor(std::vector<std::size_t> shape, const std::vector<double>& values,
                             bool requires_grad = false) {
    auto t = make_tensor(std::move(shape), requires_grad);
    if (values.size() != t->numel())
        throw std::invalid_argument("make_tensor: value count does not match shape");
    t->data = values;
    return t;
}

inline TensorPtr make_scalar(double v, bool requires_grad = false) {
    return make_tensor({1}, {v}, requires_grad);
}

inline void check_shape(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument("shape error: " + msg);
}

/// One recorded operation: re-runnable forward plus a backward rule.
struct GraphNode {
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> forward;
    std::function<void()> backward;
};

/// Tape of operations in execution order. Leaves (requires_grad inputs that
/// are never produced by a node) are tracked for gradient checking.
class Graph {
public:
    TensorPtr record(std::vector<TensorPtr> inputs, TensorPtr output,
                     std::function<void()> fwd, std::function<void()> bwd) {
        for (const auto& in : inputs) {
            if (in->requires_grad && !produced_.count(in.get()) && !leaf_set_.count(in.get())) {
                leaf_set_.insert(in.get());
                leaves_.push_back(in);
            }
        }
        output->requires_grad = true;
        output->grad.assign(output->data.size(), 0.0);
        produced_.insert(output.get());
        fwd();
        nodes_.push_back({std::move(inputs), output, std::move(fwd), std::move(bwd)});
        return nodes_.back().output;
    }

    /// Re-runs every recorded forward rule in order.
    void forward() {
        for (auto& n : nodes_) n.forward();
    }

    /// Seeds d(loss)/d(loss)=1 and accumulates gradients in reverse order.
    void backward(const TensorPtr& loss) {
        if (loss->numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar");
        for (auto& n : nodes_) {
            n.output->grad.assign(n.output->data.size(), 0.0);
        }
        for (const auto& l : leaves_) l->grad.assign(l->data.size(), 0.0);
        loss->grad.assign(1, 1.0);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    }

    const std::vector<TensorPtr>& leaves() const { return leaves_; }
    std::size_t size() const { return nodes_.size(); }

    /// Central finite-difference check over every leaf parameter.
    /// Returns the worst relative error across all coordinates.
    double check_gradients(const TensorPtr& loss, double step = 1e-5) {
        if (loss->numel() != 1)
            throw std::invalid_argument("check_gradients: loss must be scalar");
        backward(loss);
        double worst = 0.0;
        for (const auto& p : leaves_) {
            for (std::size_t i = 0; i < p->data.size(); ++i) {
                double saved = p->data[i];
                p->data[i] = saved + step;
                forward();
                double up = loss->data[0];
                p->data[i] = saved - step;
                forward();
                double down = loss->data[0];
                p->data[i] = saved;
                forward();
                double numeric = (up - down) / (2.0 * step);
                double analytic = p->grad[i];
                double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
                worst = std::max(worst, std::abs(numeric - analytic) / denom);
            }
        }
        return worst;
    }

private:
    std::vector<GraphNode> nodes_;
    std::vector<TensorPtr> leaves_;
    std::unordered_set<Tensor*> leaf_set_;
    std::unordered_set<Tensor*> produced_;
};

}  // namespace cffa
