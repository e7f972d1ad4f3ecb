#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cablab/model.hpp"
#include "cablab/tensor.hpp"

namespace cablab {

// Reverse-mode autodiff over a recorded forward pass. Every op appends its
// output node and a backward closure; backward() replays the closures once in
// reverse order, then flushes accumulated gradients into the `param` tensors'
// grad buffers. One backward per tape.
class Tape {
public:
    using Id = int;

    Id leaf(const Tensor& t);    // constant, no gradient tracking
    Id param(Tensor& t);         // tracked; grad accumulated into t.grad
    Id input(const Tensor& t);   // tracked; grad readable via grad(id)

    Id dense(Id x, Id w, Id b);                               // x:(N,in) w:(out,in) b:(out)
    Id conv2d(Id x, Id w, Id b, int stride, int padding);     // x:(N,C,H,W) w:(O,C*k*k) b:(O)
    Id relu(Id x);
    Id reshape(Id x, Shape s);
    Id sigmoid(Id x);
    // Straight-through fake quantization: forward dequantize(quantize(x)),
    // backward passes gradient where the quantized value did not clamp.
    Id fake_quant(Id x, float scale, int zero_point, int qmin, int qmax);
    Id mul_mask(Id x, const Tensor& mask);                    // elementwise by a constant mask
    // (1-m) .* x + m .* p with x:(N,C,H,W), mask:(H,W), pattern:(C,H,W).
    Id blend(Id x, Id mask, Id pattern);
    // Mean over the batch of -sum(target * log softmax(logits)). Targets are
    // one-hot or soft rows summing to 1 within 1e-5.
    Id softmax_cross_entropy(Id logits, const Tensor& targets);
    // Mean over rows of KL(softmax(p) || softmax(q)); differentiates through both.
    Id kl_divergence(Id logits_p, Id logits_q);
    Id sum(Id x);
    Id weighted_sum(const std::vector<std::pair<float, Id>>& scalar_terms);

    const Tensor& value(Id id) const;
    float scalar(Id id) const;
    void backward(Id loss);
    const std::vector<float>& grad(Id id) const;

private:
    struct ParamLink {
        Id node;
        Tensor* target;
    };

    Id push(Tensor t);
    Tensor& node(Id id);
    const Tensor& cnode(Id id) const;

    std::vector<Tensor> nodes_;
    std::vector<std::function<void()>> backward_ops_;
    std::vector<ParamLink> links_;
    bool ran_backward_ = false;
};

// Records a model forward; returns the logits node. `view` injects compressed
// weight transforms (masks / weight fake-quant) so the compressed branch
// shares the trainee's parameter storage. With track_params = false the
// parameters enter as constants (input gradients still flow; nothing is
// flushed into parameter grad buffers).
Tape::Id forward_on_tape(Tape& tape, const Model& m, Tape::Id x, const ViewTransforms* view = nullptr,
                         bool track_params = true);

// Convenience wrapper matching the train-loop call shape: validates the batch
// against the model and returns logits plus the recording tape.
struct Forward {
    Tape tape;
    Tape::Id input = -1;
    Tape::Id logits = -1;
};
Forward forward(const Model& m, const Tensor& batch, const ViewTransforms* view = nullptr);

// w <- w - lr * v with v the momentum-accumulated gradient; grads cleared.
struct SgdState {
    std::vector<std::vector<float>> velocity;  // one per param tensor, lazily sized
};
void sgd_step(Model& m, SgdState& state, float lr, float momentum);

}  // namespace cablab
