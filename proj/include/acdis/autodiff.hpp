#ifndef ACDIS_AUTODIFF_HPP_
#define ACDIS_AUTODIFF_HPP_

#include <functional>
#include <memory>
#include <vector>

#include "acdis/tensor.hpp"

namespace acdis {
namespace ad {

// Reverse-mode tape. Graphs are rebuilt every step; nodes whose inputs do
// not require gradients drop their closures so inference builds no tape.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
  void accumulate_grad(const Tensor& g);
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor value, bool requires_grad);
Var constant(Tensor value);
// New leaf sharing the value buffer; gradients never flow past it.
Var detach(const Var& v);

// Backpropagate from a scalar root (seeds d root = 1).
void backward(const Var& root);

Var make_node(Tensor value, std::vector<Var> inputs,
              std::function<void(Node&)> backward_fn);

// ---- elementwise / broadcast ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var exp_op(const Var& a);
Var log_op(const Var& a);
Var sqrt_op(const Var& a);
Var rsqrt_op(const Var& a, double eps);

// ---- reductions / shape ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
// (B,C,D,H,W) -> (B,C,1,1,1); also serves as global average pooling.
Var spatial_mean(const Var& a);
Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var permute(const Var& a, const std::vector<int>& axes);
Var concat_channels(const std::vector<Var>& parts);

// ---- dense algebra ----
Var matmul(const Var& a, const Var& b);                 // (M,K)x(K,N)
Var bmm(const Var& a, const Var& b);                    // (N,M,K)x(N,K,R)
Var softmax_lastdim(const Var& a);

// ---- structured ops ----
Var conv3d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
Var upsample_nearest2(const Var& x);
Var avg_pool2(const Var& x);  // 2x2x2 mean pooling, even extents required

// ---- task losses (labels/weights are constants) ----
// logits (B,K,D,H,W); labels (B,D,H,W) integer-valued; weights (K).
Var weighted_cross_entropy(const Var& logits, const Tensor& labels,
                           const Tensor& weights);
// 1 - mean over foreground classes of smoothed soft Dice.
Var soft_dice_loss(const Var& logits, const Tensor& labels, double eps);

// ---- windowed statistics losses ----
// Both operate on non-overlapping wxwxw windows per (batch, channel);
// spatial remainders are dropped. The second argument is a value-only
// target: no gradient ever flows into it.
Var window_variance_loss(const Var& a, const Tensor& target, int window,
                         double eps);
Var window_covariance_loss(const Var& a, const Tensor& target, int window,
                           double eps);

}  // namespace ad
}  // namespace acdis

#endif  // ACDIS_AUTODIFF_HPP_
