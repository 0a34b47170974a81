#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dvfa/common.hpp"

namespace dvfa::ag {

struct Node;
using TensorPtr = std::shared_ptr<Node>;

// One node of the dynamic tape. Tensors are dense, row-major, at most 2-D
// in practice (scalars have shape {1}).
struct Node {
    std::vector<std::int64_t> shape;
    std::vector<real> val;
    std::vector<real> grad;  // allocated lazily, same size as val
    bool requires_grad = false;
    bool backward_done = false;  // set on the root after backward()
    std::string name;            // parameters only

    std::vector<TensorPtr> parents;
    // Accumulates into parents' grads given this->grad.
    std::function<void(Node&)> backprop;

    std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    std::int64_t size() const { return static_cast<std::int64_t>(val.size()); }
    bool is_scalar() const { return val.size() == 1; }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), real(0));
    }
    void zero_grad() { grad.assign(val.size(), real(0)); }
};

TensorPtr make_tensor(std::vector<std::int64_t> shape, std::vector<real> values,
                      bool requires_grad = false);
TensorPtr constant(std::vector<std::int64_t> shape, std::vector<real> values);
TensorPtr scalar(real v);
TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
// Custom differentiable node; backprop accumulates into the parents'
// grads given the node's own grad.
TensorPtr make_op(std::vector<std::int64_t> shape, std::vector<real> values,
                  std::vector<TensorPtr> parents, std::function<void(Node&)> backprop);

// ---- forward ops -------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);
// Same-shape add, or b broadcast over rows of a when b is 1 x cols(a).
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, real c);
TensorPtr concat(const std::vector<TensorPtr>& parts, int axis);
TensorPtr slice(const TensorPtr& a, int axis, std::int64_t start, std::int64_t len);
// Mean over rows -> 1 x cols.
TensorPtr mean_rows(const TensorPtr& a);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr embedding(const TensorPtr& table, const std::vector<std::int64_t>& ids);
TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                     real eps = real(1e-5));
TensorPtr softmax(const TensorPtr& x);
TensorPtr log_softmax(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr swish(const TensorPtr& x);
TensorPtr relu(const TensorPtr& x);
// Depthwise temporal convolution, odd kernel, same padding. Rows at or
// beyond valid_len are treated as zero on input and forced to zero on
// output, so padded tails can never leak into valid frames.
TensorPtr depthwise_conv1d(const TensorPtr& x, const TensorPtr& kernel,
                           const TensorPtr& bias, std::int64_t valid_len);
// Identity when rate == 0 or !training; otherwise inverted dropout.
TensorPtr dropout(const TensorPtr& x, real rate, bool training, Rng* rng);

// ---- losses ------------------------------------------------------------

// -sum over unmasked rows of log_probs[t, target[t]].
TensorPtr cross_entropy(const TensorPtr& log_probs, const std::vector<std::int64_t>& targets,
                        const std::vector<bool>& mask);
// -sum over unmasked entries of y log p + (1-y) log(1-p); probs clamped
// to [1e-7, 1 - 1e-7] before the logs.
TensorPtr binary_cross_entropy(const TensorPtr& probs, const std::vector<int>& targets,
                               const std::vector<bool>& mask);

// ---- backward ----------------------------------------------------------

// Reverse-mode sweep from a scalar root. A second call on the same root
// without reset_backward() is rejected.
void backward(const TensorPtr& loss);
void reset_backward(const TensorPtr& loss);

// ---- optimizer ---------------------------------------------------------

struct AdamW {
    real lr = real(1e-4);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
    real weight_decay = real(0.01);
    std::int64_t step_count = 0;
    std::map<std::string, std::vector<real>> m;
    std::map<std::string, std::vector<real>> v;

    // Decoupled-weight-decay update over an ordered parameter map.
    void step(const std::map<std::string, TensorPtr>& params);
    void zero_grad(const std::map<std::string, TensorPtr>& params);
};

}  // namespace dvfa::ag
