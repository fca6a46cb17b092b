#include "acdis/nn.hpp"

#include <cmath>

namespace acdis {
namespace nn {

Tensor& ParamStore::create(const std::string& name,
                           std::vector<std::int64_t> shape) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    throw ConfigError("param store: duplicate parameter '" + name + "'");
  }
  order_.push_back(name);
  return params_.emplace(name, Tensor::zeros(std::move(shape))).first->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ConfigError("param store: unknown parameter '" + name + "'");
  }
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ConfigError("param store: unknown parameter '" + name + "'");
  }
  return it->second;
}

bool ParamStore::has(const std::string& name) const {
  return params_.count(name) != 0;
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::uint64_t ParamStore::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& name : order_) {
    const Tensor& t = params_.at(name);
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double), h);
  }
  return h;
}

ad::Var Ctx::param(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  ad::Var v = ad::leaf(store_.get(name), train_);
  cache_.emplace(name, v);
  return v;
}

Tensor Ctx::grad_of(const std::string& name) const {
  auto it = cache_.find(name);
  if (it == cache_.end() || !it->second->grad.defined()) {
    return Tensor::zeros(store_.get(name).shape());
  }
  return it->second->grad;
}

namespace {

void fan_in_uniform(Tensor& weight, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  const std::int64_t n = weight.size();
  for (std::int64_t i = 0; i < n; ++i) {
    weight[i] = rng.uniform(-bound, bound);
  }
}

}  // namespace

void init_conv_params(Tensor& weight, Tensor& bias, Rng& rng) {
  const auto& s = weight.shape();
  fan_in_uniform(weight, s[1] * s[2] * s[3] * s[4], rng);
  bias.fill(0.0);
}

void init_linear_params(Tensor& weight, Tensor& bias, Rng& rng) {
  fan_in_uniform(weight, weight.dim(0), rng);
  bias.fill(0.0);
}

void Conv3d::register_params(ParamStore& ps, Rng& rng) const {
  Tensor& w = ps.create(name + ".weight", {out_c, in_c, k, k, k});
  Tensor& b = ps.create(name + ".bias", {out_c});
  init_conv_params(w, b, rng);
}

ad::Var Conv3d::operator()(Ctx& ctx, const ad::Var& x) const {
  return ad::conv3d(x, ctx.param(name + ".weight"), ctx.param(name + ".bias"),
                    stride, pad);
}

void InstanceNorm::register_params(ParamStore& ps, Rng& rng) const {
  (void)rng;
  Tensor& g = ps.create(name + ".gain", {1, channels, 1, 1, 1});
  g.fill(1.0);
  ps.create(name + ".bias", {1, channels, 1, 1, 1});
}

ad::Var InstanceNorm::operator()(Ctx& ctx, const ad::Var& x) const {
  using namespace ad;
  Var mu = spatial_mean(x);
  Var centered = sub(x, mu);
  Var var = spatial_mean(mul(centered, centered));
  Var normed = mul(centered, rsqrt_op(var, eps));
  return add(mul(normed, ctx.param(name + ".gain")), ctx.param(name + ".bias"));
}

void ConvBlock::register_params(ParamStore& ps, Rng& rng) const {
  conv.register_params(ps, rng);
  norm.register_params(ps, rng);
}

ad::Var ConvBlock::operator()(Ctx& ctx, const ad::Var& x) const {
  return ad::silu(norm(ctx, conv(ctx, x)));
}

void Linear::register_params(ParamStore& ps, Rng& rng) const {
  Tensor& w = ps.create(name + ".weight", {in_c, out_c});
  Tensor& b = ps.create(name + ".bias", {out_c});
  init_linear_params(w, b, rng);
}

ad::Var Linear::operator()(Ctx& ctx, const ad::Var& x) const {
  const auto& s = x->value.shape();
  if (s.empty() || s.back() != in_c) {
    throw ShapeError("linear '" + name + "': last axis mismatch");
  }
  const std::int64_t rows = x->value.size() / in_c;
  ad::Var flat = ad::reshape(x, {rows, in_c});
  ad::Var y = ad::matmul(flat, ctx.param(name + ".weight"));
  y = ad::add(y, ctx.param(name + ".bias"));
  std::vector<std::int64_t> out_shape(s);
  out_shape.back() = out_c;
  return ad::reshape(y, std::move(out_shape));
}

void Adam::step(ParamStore& store, Ctx& ctx) {
  ++t_;
  state_.t = t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : store.names()) {
    Tensor& p = store.get(name);
    const Tensor g = ctx.grad_of(name);
    auto mit = state_.m.find(name);
    if (mit == state_.m.end()) {
      mit = state_.m.emplace(name, Tensor::zeros(p.shape())).first;
      state_.v.emplace(name, Tensor::zeros(p.shape()));
    }
    Tensor& m = mit->second;
    Tensor& v = state_.v.at(name);
    const std::int64_t n = p.size();
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                         cfg_.weight_decay * p[i]);
    }
  }
}

}  // namespace nn
}  // namespace acdis
