#ifndef ACDIS_NN_HPP_
#define ACDIS_NN_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "acdis/autodiff.hpp"
#include "acdis/common.hpp"
#include "acdis/tensor.hpp"

namespace acdis {
namespace nn {

// Named parameter registry. Registration order is fixed by model
// construction, which makes initialization and optimizer sweeps
// deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, std::vector<std::int64_t> shape);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::int64_t total_size() const;

  // FNV-1a over the raw little-endian bytes of all parameters in
  // registration order; used by determinism checks.
  std::uint64_t content_hash() const;

 private:
  std::map<std::string, Tensor> params_;
  std::vector<std::string> order_;
};

// Per-forward context. Wraps parameters into tape leaves exactly once per
// step so that shared modules (e.g. one decoder applied to five inputs)
// accumulate gradients into a single node.
class Ctx {
 public:
  Ctx(ParamStore& store, bool train) : store_(store), train_(train) {}

  ad::Var param(const std::string& name);
  bool train() const { return train_; }
  // Gradient read-back after backward(); zero tensor when the parameter
  // never entered the graph.
  Tensor grad_of(const std::string& name) const;

 private:
  ParamStore& store_;
  bool train_;
  std::unordered_map<std::string, ad::Var> cache_;
};

// Fan-in scaled uniform init, biases zero.
void init_conv_params(Tensor& weight, Tensor& bias, Rng& rng);
void init_linear_params(Tensor& weight, Tensor& bias, Rng& rng);

// 3-D convolution with cubic kernel.
struct Conv3d {
  std::string name;
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;

  Conv3d() = default;
  Conv3d(std::string n, int in, int out, int kernel, int stride_, int pad_)
      : name(std::move(n)), in_c(in), out_c(out), k(kernel), stride(stride_),
        pad(pad_) {}

  void register_params(ParamStore& ps, Rng& rng) const;
  ad::Var operator()(Ctx& ctx, const ad::Var& x) const;
};

// Per-(sample, channel) normalization over the spatial axes with a learned
// affine; the usual choice for small-batch volumetric segmentation.
struct InstanceNorm {
  std::string name;
  int channels = 0;
  double eps = 1e-5;

  InstanceNorm() = default;
  InstanceNorm(std::string n, int c) : name(std::move(n)), channels(c) {}

  void register_params(ParamStore& ps, Rng& rng) const;
  ad::Var operator()(Ctx& ctx, const ad::Var& x) const;
};

// conv -> instance norm -> SiLU
struct ConvBlock {
  Conv3d conv;
  InstanceNorm norm;

  ConvBlock() = default;
  ConvBlock(const std::string& n, int in, int out, int kernel, int stride,
            int pad)
      : conv(n + ".conv", in, out, kernel, stride, pad),
        norm(n + ".norm", out) {}

  void register_params(ParamStore& ps, Rng& rng) const;
  ad::Var operator()(Ctx& ctx, const ad::Var& x) const;
};

// Dense map over the last axis: y = x W + b, x (..., in), W (in, out).
struct Linear {
  std::string name;
  int in_c = 0, out_c = 0;

  Linear() = default;
  Linear(std::string n, int in, int out)
      : name(std::move(n)), in_c(in), out_c(out) {}

  void register_params(ParamStore& ps, Rng& rng) const;
  ad::Var operator()(Ctx& ctx, const ad::Var& x) const;
};

// Adam with decoupled weight decay.
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step_count() const { return t_; }

  // Applies one update to every parameter; missing gradients are treated
  // as zero (decay still applies).
  void step(ParamStore& store, Ctx& ctx);

  // Checkpoint plumbing.
  struct State {
    std::int64_t t = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
  };
  State& state() { return state_; }
  const State& state() const { return state_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  State state_;
  std::int64_t t_ = 0;
};

}  // namespace nn
}  // namespace acdis

#endif  // ACDIS_NN_HPP_
