#include "acdis/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "acdis/common.hpp"

namespace acdis {
namespace ad {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void advance_index(std::vector<std::int64_t>& idx,
                   const std::vector<std::int64_t>& shape) {
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    if (++idx[static_cast<size_t>(i)] < shape[static_cast<size_t>(i)]) return;
    idx[static_cast<size_t>(i)] = 0;
  }
}

struct BcastPlan {
  std::vector<std::int64_t> out_shape;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
};

BcastPlan make_bcast_plan(const std::vector<std::int64_t>& sa,
                          const std::vector<std::int64_t>& sb) {
  const int nd = std::max(static_cast<int>(sa.size()),
                          static_cast<int>(sb.size()));
  std::vector<std::int64_t> pa(static_cast<size_t>(nd), 1);
  std::vector<std::int64_t> pb(static_cast<size_t>(nd), 1);
  std::copy(sa.begin(), sa.end(),
            pa.begin() + (nd - static_cast<int>(sa.size())));
  std::copy(sb.begin(), sb.end(),
            pb.begin() + (nd - static_cast<int>(sb.size())));
  BcastPlan plan;
  plan.out_shape.resize(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    const auto da = pa[static_cast<size_t>(i)];
    const auto db = pb[static_cast<size_t>(i)];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible shapes");
    }
    plan.out_shape[static_cast<size_t>(i)] = std::max(da, db);
  }
  auto stra = row_major_strides(pa);
  auto strb = row_major_strides(pb);
  for (int i = 0; i < nd; ++i) {
    if (pa[static_cast<size_t>(i)] == 1) stra[static_cast<size_t>(i)] = 0;
    if (pb[static_cast<size_t>(i)] == 1) strb[static_cast<size_t>(i)] = 0;
  }
  plan.stride_a = std::move(stra);
  plan.stride_b = std::move(strb);
  return plan;
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

}  // namespace

Tensor& Node::ensure_grad() {
  if (!grad.defined()) grad = Tensor::zeros(value.shape());
  return grad;
}

void Node::accumulate_grad(const Tensor& g) {
  Tensor& dst = ensure_grad();
  const std::int64_t n = dst.size();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var detach(const Var& v) { return leaf(v->value, false); }

Var make_node(Tensor value, std::vector<Var> inputs,
              std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void backward(const Var& root) {
  if (root->value.size() != 1) {
    throw ShapeError("backward: root must be a scalar");
  }
  if (!root->requires_grad) return;

  // Post-order over the subgraph that requires gradients.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->inputs.size()) {
      Node* child = node->inputs[next_child++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.defined()) {
      node->backward_fn(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

static Var binary_op(const Var& a, const Var& b, BinOp op) {
  const BcastPlan plan = make_bcast_plan(a->value.shape(), b->value.shape());
  const int nd = static_cast<int>(plan.out_shape.size());
  Tensor out(plan.out_shape);
  const std::int64_t n = out.size();
  {
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    double* po = out.data();
    std::vector<std::int64_t> idx(static_cast<size_t>(nd), 0);
    for (std::int64_t o = 0; o < n; ++o) {
      std::int64_t ia = 0, ib = 0;
      for (int i = 0; i < nd; ++i) {
        ia += idx[static_cast<size_t>(i)] * plan.stride_a[static_cast<size_t>(i)];
        ib += idx[static_cast<size_t>(i)] * plan.stride_b[static_cast<size_t>(i)];
      }
      switch (op) {
        case BinOp::kAdd: po[o] = pa[ia] + pb[ib]; break;
        case BinOp::kSub: po[o] = pa[ia] - pb[ib]; break;
        case BinOp::kMul: po[o] = pa[ia] * pb[ib]; break;
        case BinOp::kDiv: po[o] = pa[ia] / pb[ib]; break;
      }
      advance_index(idx, plan.out_shape);
    }
  }
  Tensor aval = a->value;
  Tensor bval = b->value;
  return make_node(
      std::move(out), {a, b},
      [plan, nd, op, aval, bval](Node& node) {
        Var a_in = node.inputs[0];
        Var b_in = node.inputs[1];
        const double* dy = node.grad.data();
        double* ga = a_in->requires_grad ? a_in->ensure_grad().data() : nullptr;
        double* gb = b_in->requires_grad ? b_in->ensure_grad().data() : nullptr;
        const double* pa = aval.data();
        const double* pb = bval.data();
        const std::int64_t n = node.grad.size();
        std::vector<std::int64_t> idx(static_cast<size_t>(nd), 0);
        for (std::int64_t o = 0; o < n; ++o) {
          std::int64_t ia = 0, ib = 0;
          for (int i = 0; i < nd; ++i) {
            ia += idx[static_cast<size_t>(i)] *
                  plan.stride_a[static_cast<size_t>(i)];
            ib += idx[static_cast<size_t>(i)] *
                  plan.stride_b[static_cast<size_t>(i)];
          }
          const double g = dy[o];
          switch (op) {
            case BinOp::kAdd:
              if (ga) ga[ia] += g;
              if (gb) gb[ib] += g;
              break;
            case BinOp::kSub:
              if (ga) ga[ia] += g;
              if (gb) gb[ib] -= g;
              break;
            case BinOp::kMul:
              if (ga) ga[ia] += g * pb[ib];
              if (gb) gb[ib] += g * pa[ia];
              break;
            case BinOp::kDiv: {
              const double inv = 1.0 / pb[ib];
              if (ga) ga[ia] += g * inv;
              if (gb) gb[ib] -= g * pa[ia] * inv * inv;
              break;
            }
          }
          advance_index(idx, plan.out_shape);
        }
      });
}

Var add(const Var& a, const Var& b) { return binary_op(a, b, BinOp::kAdd); }
Var sub(const Var& a, const Var& b) { return binary_op(a, b, BinOp::kSub); }
Var mul(const Var& a, const Var& b) { return binary_op(a, b, BinOp::kMul); }
Var div(const Var& a, const Var& b) { return binary_op(a, b, BinOp::kDiv); }

template <class Fwd, class Dfn>
static Var unary_op(const Var& a, Fwd fwd, Dfn dfn) {
  Tensor out(a->value.shape());
  const std::int64_t n = out.size();
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  Tensor aval = a->value;
  Tensor oval = out;
  return make_node(std::move(out), {a}, [aval, oval, dfn](Node& node) {
    Var a_in = node.inputs[0];
    if (!a_in->requires_grad) return;
    double* ga = a_in->ensure_grad().data();
    const double* dy = node.grad.data();
    const double* x = aval.data();
    const double* y = oval.data();
    const std::int64_t n = node.grad.size();
    for (std::int64_t i = 0; i < n; ++i) ga[i] += dy[i] * dfn(x[i], y[i]);
  });
}

static double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var add_scalar(const Var& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; },
      [s](double, double) { return s; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var sigmoid(const Var& a) {
  return unary_op(
      a, [](double x) { return sigmoid_scalar(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
  return unary_op(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var exp_op(const Var& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var log_op(const Var& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var sqrt_op(const Var& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var rsqrt_op(const Var& a, double eps) {
  return unary_op(
      a, [eps](double x) { return 1.0 / std::sqrt(x + eps); },
      [](double, double y) { return -0.5 * y * y * y; });
}

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
  double acc = 0.0;
  const double* pa = a->value.data();
  const std::int64_t n = a->value.size();
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  return make_node(Tensor::scalar(acc), {a}, [](Node& node) {
    Var a_in = node.inputs[0];
    if (!a_in->requires_grad) return;
    const double g = node.grad[0];
    double* ga = a_in->ensure_grad().data();
    const std::int64_t n = a_in->value.size();
    for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Var mean_all(const Var& a) {
  return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

Var spatial_mean(const Var& a) {
  if (a->value.ndim() != 5) throw ShapeError("spatial_mean: expects 5-D input");
  const auto& s = a->value.shape();
  const std::int64_t bc = s[0] * s[1];
  const std::int64_t vox = s[2] * s[3] * s[4];
  Tensor out({s[0], s[1], 1, 1, 1});
  const double* pa = a->value.data();
  double* po = out.data();
  const double inv = 1.0 / static_cast<double>(vox);
  for (std::int64_t i = 0; i < bc; ++i) {
    double acc = 0.0;
    const double* src = pa + i * vox;
    for (std::int64_t v = 0; v < vox; ++v) acc += src[v];
    po[i] = acc * inv;
  }
  return make_node(std::move(out), {a}, [bc, vox, inv](Node& node) {
    Var a_in = node.inputs[0];
    if (!a_in->requires_grad) return;
    double* ga = a_in->ensure_grad().data();
    const double* dy = node.grad.data();
    for (std::int64_t i = 0; i < bc; ++i) {
      const double g = dy[i] * inv;
      double* dst = ga + i * vox;
      for (std::int64_t v = 0; v < vox; ++v) dst[v] += g;
    }
  });
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& node) {
    Var a_in = node.inputs[0];
    if (!a_in->requires_grad) return;
    double* ga = a_in->ensure_grad().data();
    const double* dy = node.grad.data();
    const std::int64_t n = node.grad.size();
    for (std::int64_t i = 0; i < n; ++i) ga[i] += dy[i];
  });
}

Var permute(const Var& a, const std::vector<int>& axes) {
  const auto& in_shape = a->value.shape();
  const int nd = a->value.ndim();
  if (static_cast<int>(axes.size()) != nd) {
    throw ShapeError("permute: axes rank mismatch");
  }
  std::vector<std::int64_t> out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(axes[i])];
  }
  const auto in_strides = row_major_strides(in_shape);
  std::vector<std::int64_t> gather(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    gather[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[i])];
  }
  Tensor out(out_shape);
  const double* pa = a->value.data();
  double* po = out.data();
  const std::int64_t n = out.size();
  std::vector<std::int64_t> idx(static_cast<size_t>(nd), 0);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t src = 0;
    for (int i = 0; i < nd; ++i) {
      src += idx[static_cast<size_t>(i)] * gather[static_cast<size_t>(i)];
    }
    po[o] = pa[src];
    advance_index(idx, out_shape);
  }
  return make_node(std::move(out), {a}, [out_shape, gather, nd](Node& node) {
    Var a_in = node.inputs[0];
    if (!a_in->requires_grad) return;
    double* ga = a_in->ensure_grad().data();
    const double* dy = node.grad.data();
    const std::int64_t n = node.grad.size();
    std::vector<std::int64_t> idx(static_cast<size_t>(nd), 0);
    for (std::int64_t o = 0; o < n; ++o) {
      std::int64_t src = 0;
      for (int i = 0; i < nd; ++i) {
        src += idx[static_cast<size_t>(i)] * gather[static_cast<size_t>(i)];
      }
      ga[src] += dy[o];
      advance_index(idx, out_shape);
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& first = parts[0]->value.shape();
  if (parts[0]->value.ndim() != 5) {
    throw ShapeError("concat_channels: expects 5-D inputs");
  }
  std::int64_t total_c = 0;
  for (const auto& p : parts) {
    const auto& s = p->value.shape();
    if (s.size() != 5 || s[0] != first[0] || s[2] != first[2] ||
        s[3] != first[3] || s[4] != first[4]) {
      throw ShapeError("concat_channels: mismatched shapes");
    }
    total_c += s[1];
  }
  const std::int64_t b = first[0];
  const std::int64_t vox = first[2] * first[3] * first[4];
  Tensor out({b, total_c, first[2], first[3], first[4]});
  double* po = out.data();
  std::vector<std::int64_t> chans;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::int64_t c_off = 0;
    for (const auto& p : parts) {
      const std::int64_t pc = p->value.dim(1);
      const double* src = p->value.data() + bi * pc * vox;
      double* dst = po + (bi * total_c + c_off) * vox;
      std::copy(src, src + pc * vox, dst);
      c_off += pc;
    }
  }
  for (const auto& p : parts) chans.push_back(p->value.dim(1));
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_node(std::move(out), std::move(inputs),
                   [b, vox, total_c, chans](Node& node) {
                     const double* dy = node.grad.data();
                     for (std::int64_t bi = 0; bi < b; ++bi) {
                       std::int64_t c_off = 0;
                       for (size_t k = 0; k < node.inputs.size(); ++k) {
                         const std::int64_t pc = chans[k];
                         Var in = node.inputs[k];
                         if (in->requires_grad) {
                           double* ga =
                               in->ensure_grad().data() + bi * pc * vox;
                           const double* src =
                               dy + (bi * total_c + c_off) * vox;
                           for (std::int64_t i = 0; i < pc * vox; ++i) {
                             ga[i] += src[i];
                           }
                         }
                         c_off += pc;
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// dense algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.dim(1) != b->value.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + a->value.shape_str() + " x " +
                     b->value.shape_str());
  }
  const std::int64_t m = a->value.dim(0);
  const std::int64_t k = a->value.dim(1);
  const std::int64_t n = b->value.dim(1);
  Tensor out({m, n});
  ConstMap A(a->value.data(), m, k);
  ConstMap B(b->value.data(), k, n);
  MutMap(out.data(), m, n).noalias() = A * B;
  Tensor aval = a->value;
  Tensor bval = b->value;
  return make_node(std::move(out), {a, b}, [aval, bval, m, k, n](Node& node) {
    ConstMap dY(node.grad.data(), m, n);
    ConstMap A(aval.data(), m, k);
    ConstMap B(bval.data(), k, n);
    if (node.inputs[0]->requires_grad) {
      MutMap(node.inputs[0]->ensure_grad().data(), m, k).noalias() +=
          dY * B.transpose();
    }
    if (node.inputs[1]->requires_grad) {
      MutMap(node.inputs[1]->ensure_grad().data(), k, n).noalias() +=
          A.transpose() * dY;
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  if (a->value.ndim() != 3 || b->value.ndim() != 3 ||
      a->value.dim(0) != b->value.dim(0) ||
      a->value.dim(2) != b->value.dim(1)) {
    throw ShapeError("bmm: shape mismatch " + a->value.shape_str() + " x " +
                     b->value.shape_str());
  }
  const std::int64_t nb = a->value.dim(0);
  const std::int64_t m = a->value.dim(1);
  const std::int64_t k = a->value.dim(2);
  const std::int64_t n = b->value.dim(2);
  Tensor out({nb, m, n});
  for (std::int64_t i = 0; i < nb; ++i) {
    ConstMap A(a->value.data() + i * m * k, m, k);
    ConstMap B(b->value.data() + i * k * n, k, n);
    MutMap(out.data() + i * m * n, m, n).noalias() = A * B;
  }
  Tensor aval = a->value;
  Tensor bval = b->value;
  return make_node(
      std::move(out), {a, b}, [aval, bval, nb, m, k, n](Node& node) {
        for (std::int64_t i = 0; i < nb; ++i) {
          ConstMap dY(node.grad.data() + i * m * n, m, n);
          ConstMap A(aval.data() + i * m * k, m, k);
          ConstMap B(bval.data() + i * k * n, k, n);
          if (node.inputs[0]->requires_grad) {
            MutMap(node.inputs[0]->ensure_grad().data() + i * m * k, m, k)
                .noalias() += dY * B.transpose();
          }
          if (node.inputs[1]->requires_grad) {
            MutMap(node.inputs[1]->ensure_grad().data() + i * k * n, k, n)
                .noalias() += A.transpose() * dY;
          }
        }
      });
}

Var softmax_lastdim(const Var& a) {
  const int nd = a->value.ndim();
  if (nd < 1) throw ShapeError("softmax: needs at least one axis");
  const std::int64_t last = a->value.dim(nd - 1);
  const std::int64_t rows = a->value.size() / last;
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  double* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * last;
    double* y = po + r * last;
    double mx = x[0];
    for (std::int64_t i = 1; i < last; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (std::int64_t i = 0; i < last; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    const double inv = 1.0 / z;
    for (std::int64_t i = 0; i < last; ++i) y[i] *= inv;
  }
  Tensor oval = out;
  return make_node(std::move(out), {a}, [oval, rows, last](Node& node) {
    Var a_in = node.inputs[0];
    if (!a_in->requires_grad) return;
    double* ga = a_in->ensure_grad().data();
    const double* dy = node.grad.data();
    const double* y = oval.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yr = y + r * last;
      const double* dr = dy + r * last;
      double dot = 0.0;
      for (std::int64_t i = 0; i < last; ++i) dot += dr[i] * yr[i];
      double* gr = ga + r * last;
      for (std::int64_t i = 0; i < last; ++i) {
        gr[i] += yr[i] * (dr[i] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// conv3d / upsample
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t b, cin, d, h, w;
  std::int64_t cout, k;
  int stride, pad;
  std::int64_t od, oh, ow;
  std::int64_t patch() const { return cin * k * k * k; }
  std::int64_t ovox() const { return od * oh * ow; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 5 || w.ndim() != 5) {
    throw ShapeError("conv3d: expects 5-D input and weight");
  }
  ConvDims cd;
  cd.b = x.dim(0);
  cd.cin = x.dim(1);
  cd.d = x.dim(2);
  cd.h = x.dim(3);
  cd.w = x.dim(4);
  cd.cout = w.dim(0);
  cd.k = w.dim(2);
  if (w.dim(1) != cd.cin || w.dim(3) != cd.k || w.dim(4) != cd.k) {
    throw ShapeError("conv3d: weight shape mismatch, input " + x.shape_str() +
                     " weight " + w.shape_str());
  }
  cd.stride = stride;
  cd.pad = pad;
  cd.od = (cd.d + 2 * pad - cd.k) / stride + 1;
  cd.oh = (cd.h + 2 * pad - cd.k) / stride + 1;
  cd.ow = (cd.w + 2 * pad - cd.k) / stride + 1;
  if (cd.od <= 0 || cd.oh <= 0 || cd.ow <= 0) {
    throw ShapeError("conv3d: kernel larger than padded input");
  }
  return cd;
}

void im2col(const double* x, const ConvDims& cd, std::int64_t batch,
            double* cols) {
  const std::int64_t in_vox = cd.d * cd.h * cd.w;
  const double* xb = x + batch * cd.cin * in_vox;
  const std::int64_t ovox = cd.ovox();
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < cd.cin; ++ci) {
    for (std::int64_t kz = 0; kz < cd.k; ++kz) {
      for (std::int64_t ky = 0; ky < cd.k; ++ky) {
        for (std::int64_t kx = 0; kx < cd.k; ++kx, ++row) {
          double* dst = cols + row * ovox;
          std::int64_t o = 0;
          for (std::int64_t oz = 0; oz < cd.od; ++oz) {
            const std::int64_t iz = oz * cd.stride + kz - cd.pad;
            for (std::int64_t oy = 0; oy < cd.oh; ++oy) {
              const std::int64_t iy = oy * cd.stride + ky - cd.pad;
              for (std::int64_t ox = 0; ox < cd.ow; ++ox, ++o) {
                const std::int64_t ix = ox * cd.stride + kx - cd.pad;
                const bool inside = iz >= 0 && iz < cd.d && iy >= 0 &&
                                    iy < cd.h && ix >= 0 && ix < cd.w;
                dst[o] = inside
                             ? xb[(ci * cd.d + iz) * cd.h * cd.w + iy * cd.w + ix]
                             : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

void col2im_accumulate(const double* cols, const ConvDims& cd,
                       std::int64_t batch, double* gx) {
  const std::int64_t in_vox = cd.d * cd.h * cd.w;
  double* gxb = gx + batch * cd.cin * in_vox;
  const std::int64_t ovox = cd.ovox();
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < cd.cin; ++ci) {
    for (std::int64_t kz = 0; kz < cd.k; ++kz) {
      for (std::int64_t ky = 0; ky < cd.k; ++ky) {
        for (std::int64_t kx = 0; kx < cd.k; ++kx, ++row) {
          const double* src = cols + row * ovox;
          std::int64_t o = 0;
          for (std::int64_t oz = 0; oz < cd.od; ++oz) {
            const std::int64_t iz = oz * cd.stride + kz - cd.pad;
            for (std::int64_t oy = 0; oy < cd.oh; ++oy) {
              const std::int64_t iy = oy * cd.stride + ky - cd.pad;
              for (std::int64_t ox = 0; ox < cd.ow; ++ox, ++o) {
                const std::int64_t ix = ox * cd.stride + kx - cd.pad;
                if (iz >= 0 && iz < cd.d && iy >= 0 && iy < cd.h && ix >= 0 &&
                    ix < cd.w) {
                  gxb[(ci * cd.d + iz) * cd.h * cd.w + iy * cd.w + ix] +=
                      src[o];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  const ConvDims cd = conv_dims(x->value, w->value, stride, pad);
  if (bias->value.ndim() != 1 || bias->value.dim(0) != cd.cout) {
    throw ShapeError("conv3d: bias shape mismatch");
  }
  Tensor out({cd.b, cd.cout, cd.od, cd.oh, cd.ow});
  const std::int64_t patch = cd.patch();
  const std::int64_t ovox = cd.ovox();
  std::vector<double> cols(static_cast<size_t>(patch * ovox));
  ConstMap W2d(w->value.data(), cd.cout, patch);
  for (std::int64_t bi = 0; bi < cd.b; ++bi) {
    im2col(x->value.data(), cd, bi, cols.data());
    ConstMap C(cols.data(), patch, ovox);
    MutMap Y(out.data() + bi * cd.cout * ovox, cd.cout, ovox);
    Y.noalias() = W2d * C;
    for (std::int64_t co = 0; co < cd.cout; ++co) {
      Y.row(co).array() += bias->value[co];
    }
  }
  Tensor xval = x->value;
  Tensor wval = w->value;
  return make_node(
      std::move(out), {x, w, bias}, [cd, xval, wval](Node& node) {
        const std::int64_t patch = cd.patch();
        const std::int64_t ovox = cd.ovox();
        std::vector<double> cols(static_cast<size_t>(patch * ovox));
        std::vector<double> dcols(static_cast<size_t>(patch * ovox));
        Var x_in = node.inputs[0];
        Var w_in = node.inputs[1];
        Var b_in = node.inputs[2];
        ConstMap W2d(wval.data(), cd.cout, patch);
        const bool need_x = x_in->requires_grad;
        const bool need_w = w_in->requires_grad;
        const bool need_b = b_in->requires_grad;
        double* gw = need_w ? w_in->ensure_grad().data() : nullptr;
        double* gb = need_b ? b_in->ensure_grad().data() : nullptr;
        double* gx = need_x ? x_in->ensure_grad().data() : nullptr;
        for (std::int64_t bi = 0; bi < cd.b; ++bi) {
          ConstMap dY(node.grad.data() + bi * cd.cout * ovox, cd.cout, ovox);
          if (need_b) {
            for (std::int64_t co = 0; co < cd.cout; ++co) {
              gb[co] += dY.row(co).sum();
            }
          }
          if (need_w) {
            im2col(xval.data(), cd, bi, cols.data());
            ConstMap C(cols.data(), patch, ovox);
            MutMap(gw, cd.cout, patch).noalias() += dY * C.transpose();
          }
          if (need_x) {
            MutMap dC(dcols.data(), patch, ovox);
            dC.noalias() = W2d.transpose() * dY;
            col2im_accumulate(dcols.data(), cd, bi, gx);
          }
        }
      });
}

Var upsample_nearest2(const Var& x) {
  if (x->value.ndim() != 5) throw ShapeError("upsample: expects 5-D input");
  const auto& s = x->value.shape();
  const std::int64_t bc = s[0] * s[1];
  const std::int64_t d = s[2], h = s[3], w = s[4];
  Tensor out({s[0], s[1], 2 * d, 2 * h, 2 * w});
  const double* px = x->value.data();
  double* po = out.data();
  for (std::int64_t i = 0; i < bc; ++i) {
    const double* src = px + i * d * h * w;
    double* dst = po + i * 8 * d * h * w;
    for (std::int64_t z = 0; z < 2 * d; ++z) {
      for (std::int64_t y = 0; y < 2 * h; ++y) {
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
          dst[(z * 2 * h + y) * 2 * w + xx] =
              src[((z / 2) * h + y / 2) * w + xx / 2];
        }
      }
    }
  }
  return make_node(std::move(out), {x}, [bc, d, h, w](Node& node) {
    Var x_in = node.inputs[0];
    if (!x_in->requires_grad) return;
    double* gx = x_in->ensure_grad().data();
    const double* dy = node.grad.data();
    for (std::int64_t i = 0; i < bc; ++i) {
      const double* src = dy + i * 8 * d * h * w;
      double* dst = gx + i * d * h * w;
      for (std::int64_t z = 0; z < 2 * d; ++z) {
        for (std::int64_t y = 0; y < 2 * h; ++y) {
          for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
            dst[((z / 2) * h + y / 2) * w + xx / 2] +=
                src[(z * 2 * h + y) * 2 * w + xx];
          }
        }
      }
    }
  });
}

Var avg_pool2(const Var& x) {
  if (x->value.ndim() != 5) throw ShapeError("avg_pool2: expects 5-D input");
  const auto& s = x->value.shape();
  if (s[2] % 2 || s[3] % 2 || s[4] % 2) {
    throw ShapeError("avg_pool2: spatial extents must be even");
  }
  const std::int64_t bc = s[0] * s[1];
  const std::int64_t d = s[2] / 2, h = s[3] / 2, w = s[4] / 2;
  Tensor out({s[0], s[1], d, h, w});
  const double* px = x->value.data();
  double* po = out.data();
  for (std::int64_t i = 0; i < bc; ++i) {
    const double* src = px + i * 8 * d * h * w;
    double* dst = po + i * d * h * w;
    for (std::int64_t z = 0; z < d; ++z) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t xx = 0; xx < w; ++xx) {
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                acc += src[((2 * z + dz) * 2 * h + 2 * y + dy) * 2 * w +
                           2 * xx + dx];
          dst[(z * h + y) * w + xx] = acc * 0.125;
        }
      }
    }
  }
  return make_node(std::move(out), {x}, [bc, d, h, w](Node& node) {
    Var x_in = node.inputs[0];
    if (!x_in->requires_grad) return;
    double* gx = x_in->ensure_grad().data();
    const double* dy = node.grad.data();
    for (std::int64_t i = 0; i < bc; ++i) {
      const double* src = dy + i * d * h * w;
      double* dst = gx + i * 8 * d * h * w;
      for (std::int64_t z = 0; z < d; ++z) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t xx = 0; xx < w; ++xx) {
            const double g = src[(z * h + y) * w + xx] * 0.125;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy2 = 0; dy2 < 2; ++dy2)
                for (int dx = 0; dx < 2; ++dx)
                  dst[((2 * z + dz) * 2 * h + 2 * y + dy2) * 2 * w + 2 * xx +
                      dx] += g;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// task losses
// ---------------------------------------------------------------------------

Var weighted_cross_entropy(const Var& logits, const Tensor& labels,
                           const Tensor& weights) {
  if (logits->value.ndim() != 5 || labels.ndim() != 4) {
    throw ShapeError("wce: logits must be 5-D and labels 4-D");
  }
  const auto& s = logits->value.shape();
  const std::int64_t b = s[0], kc = s[1];
  const std::int64_t vox = s[2] * s[3] * s[4];
  if (labels.dim(0) != b || labels.size() != b * vox) {
    throw ShapeError("wce: label shape mismatch");
  }
  if (weights.size() != kc) throw ShapeError("wce: weight count mismatch");
  const double* z = logits->value.data();
  const double* lb = labels.data();
  const std::int64_t total = b * vox;
  // Cache class probabilities for the backward pass.
  Tensor probs(logits->value.shape());
  double* pp = probs.data();
  double acc = 0.0;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t v = 0; v < vox; ++v) {
      const double lab_d = lb[bi * vox + v];
      const auto lab = static_cast<std::int64_t>(lab_d);
      if (lab < 0 || lab >= kc || static_cast<double>(lab) != lab_d) {
        throw ValueError("wce: label value out of range");
      }
      double mx = z[(bi * kc) * vox + v];
      for (std::int64_t c = 1; c < kc; ++c) {
        mx = std::max(mx, z[(bi * kc + c) * vox + v]);
      }
      double Z = 0.0;
      for (std::int64_t c = 0; c < kc; ++c) {
        const double e = std::exp(z[(bi * kc + c) * vox + v] - mx);
        pp[(bi * kc + c) * vox + v] = e;
        Z += e;
      }
      const double inv = 1.0 / Z;
      for (std::int64_t c = 0; c < kc; ++c) {
        pp[(bi * kc + c) * vox + v] *= inv;
      }
      const double lse = mx + std::log(Z);
      acc += weights[lab] * (lse - z[(bi * kc + lab) * vox + v]);
    }
  }
  const double inv_total = 1.0 / static_cast<double>(total);
  Tensor wcopy = weights;
  Tensor lcopy = labels;
  return make_node(
      Tensor::scalar(acc * inv_total), {logits},
      [probs, wcopy, lcopy, b, kc, vox, inv_total](Node& node) {
        Var lg = node.inputs[0];
        if (!lg->requires_grad) return;
        double* g = lg->ensure_grad().data();
        const double scale = node.grad[0] * inv_total;
        const double* pp = probs.data();
        const double* lb = lcopy.data();
        for (std::int64_t bi = 0; bi < b; ++bi) {
          for (std::int64_t v = 0; v < vox; ++v) {
            const auto lab =
                static_cast<std::int64_t>(lb[bi * vox + v]);
            const double wl = wcopy[lab] * scale;
            for (std::int64_t c = 0; c < kc; ++c) {
              const std::int64_t at = (bi * kc + c) * vox + v;
              g[at] += wl * (pp[at] - (c == lab ? 1.0 : 0.0));
            }
          }
        }
      });
}

Var soft_dice_loss(const Var& logits, const Tensor& labels, double eps) {
  if (logits->value.ndim() != 5 || labels.ndim() != 4) {
    throw ShapeError("dice: logits must be 5-D and labels 4-D");
  }
  const auto& s = logits->value.shape();
  const std::int64_t b = s[0], kc = s[1];
  const std::int64_t vox = s[2] * s[3] * s[4];
  if (labels.dim(0) != b || labels.size() != b * vox) {
    throw ShapeError("dice: label shape mismatch");
  }
  const double* z = logits->value.data();
  const double* lb = labels.data();
  Tensor probs(logits->value.shape());
  double* pp = probs.data();
  // Soft Dice over foreground classes, pooled over the whole batch.
  std::vector<double> inter(static_cast<size_t>(kc), 0.0);
  std::vector<double> psum(static_cast<size_t>(kc), 0.0);
  std::vector<double> gsum(static_cast<size_t>(kc), 0.0);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t v = 0; v < vox; ++v) {
      const double lab_d = lb[bi * vox + v];
      const auto lab = static_cast<std::int64_t>(lab_d);
      if (lab < 0 || lab >= kc || static_cast<double>(lab) != lab_d) {
        throw ValueError("dice: label value out of range");
      }
      double mx = z[(bi * kc) * vox + v];
      for (std::int64_t c = 1; c < kc; ++c) {
        mx = std::max(mx, z[(bi * kc + c) * vox + v]);
      }
      double Z = 0.0;
      for (std::int64_t c = 0; c < kc; ++c) {
        const double e = std::exp(z[(bi * kc + c) * vox + v] - mx);
        pp[(bi * kc + c) * vox + v] = e;
        Z += e;
      }
      const double inv = 1.0 / Z;
      for (std::int64_t c = 0; c < kc; ++c) {
        const std::int64_t at = (bi * kc + c) * vox + v;
        pp[at] *= inv;
        psum[static_cast<size_t>(c)] += pp[at];
        if (c == lab) {
          inter[static_cast<size_t>(c)] += pp[at];
          gsum[static_cast<size_t>(c)] += 1.0;
        }
      }
    }
  }
  const std::int64_t fg = kc - 1;
  double dice_sum = 0.0;
  std::vector<double> num(static_cast<size_t>(kc), 0.0);
  std::vector<double> den(static_cast<size_t>(kc), 0.0);
  for (std::int64_t c = 1; c < kc; ++c) {
    num[static_cast<size_t>(c)] = 2.0 * inter[static_cast<size_t>(c)] + eps;
    den[static_cast<size_t>(c)] =
        psum[static_cast<size_t>(c)] + gsum[static_cast<size_t>(c)] + eps;
    dice_sum += num[static_cast<size_t>(c)] / den[static_cast<size_t>(c)];
  }
  const double loss = 1.0 - dice_sum / static_cast<double>(fg);
  Tensor lcopy = labels;
  return make_node(
      Tensor::scalar(loss), {logits},
      [probs, lcopy, num, den, b, kc, vox, fg](Node& node) {
        Var lg = node.inputs[0];
        if (!lg->requires_grad) return;
        double* g = lg->ensure_grad().data();
        const double* pp = probs.data();
        const double* lb = lcopy.data();
        const double scale = node.grad[0] / static_cast<double>(fg);
        // dL/dp_c = -(1/fg) * (2*1[label==c]*den_c - num_c) / den_c^2
        for (std::int64_t bi = 0; bi < b; ++bi) {
          for (std::int64_t v = 0; v < vox; ++v) {
            const auto lab = static_cast<std::int64_t>(lb[bi * vox + v]);
            double dot = 0.0;
            for (std::int64_t c = 1; c < kc; ++c) {
              const double dc = den[static_cast<size_t>(c)];
              const double dldp =
                  -scale *
                  (2.0 * (c == lab ? 1.0 : 0.0) * dc - num[static_cast<size_t>(c)]) /
                  (dc * dc);
              dot += dldp * pp[(bi * kc + c) * vox + v];
            }
            for (std::int64_t c = 0; c < kc; ++c) {
              const std::int64_t at = (bi * kc + c) * vox + v;
              double dldp = 0.0;
              if (c >= 1) {
                const double dc = den[static_cast<size_t>(c)];
                dldp = -scale *
                       (2.0 * (c == lab ? 1.0 : 0.0) * dc -
                        num[static_cast<size_t>(c)]) /
                       (dc * dc);
              }
              g[at] += pp[at] * (dldp - dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// windowed statistics losses
// ---------------------------------------------------------------------------

namespace {

struct WindowGrid {
  std::int64_t b, c, nd, nh, nw;  // window counts per axis
  std::int64_t d, h, w;           // original spatial extents
  int win;
  std::int64_t count() const { return b * c * nd * nh * nw; }
  std::int64_t n() const {
    return static_cast<std::int64_t>(win) * win * win;
  }
};

WindowGrid window_grid(const Tensor& a, int win) {
  if (a.ndim() != 5) throw ShapeError("window loss: expects 5-D input");
  if (win < 2) throw ValueError("window loss: window must be >= 2");
  WindowGrid g;
  g.b = a.dim(0);
  g.c = a.dim(1);
  g.d = a.dim(2);
  g.h = a.dim(3);
  g.w = a.dim(4);
  g.win = win;
  g.nd = g.d / win;
  g.nh = g.h / win;
  g.nw = g.w / win;
  if (g.nd == 0 || g.nh == 0 || g.nw == 0) {
    throw ShapeError("window loss: window exceeds spatial extent");
  }
  return g;
}

// Kahan-compensated accumulator; keeps window reductions order-stable and
// exact enough that constant windows give variance ~0 at double precision.
struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;
  void add(double v) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

struct WindowMoments {
  double mean_a, mean_b, sxx, syy, sxy;
};

template <class Fn>
void for_each_window(const WindowGrid& g, Fn&& fn) {
  std::int64_t widx = 0;
  for (std::int64_t bi = 0; bi < g.b; ++bi) {
    for (std::int64_t ci = 0; ci < g.c; ++ci) {
      for (std::int64_t wz = 0; wz < g.nd; ++wz) {
        for (std::int64_t wy = 0; wy < g.nh; ++wy) {
          for (std::int64_t wx = 0; wx < g.nw; ++wx, ++widx) {
            fn(widx, bi, ci, wz, wy, wx);
          }
        }
      }
    }
  }
}

template <class Fn>
void for_each_voxel_in_window(const WindowGrid& g, std::int64_t bi,
                              std::int64_t ci, std::int64_t wz,
                              std::int64_t wy, std::int64_t wx, Fn&& fn) {
  const std::int64_t base = (bi * g.c + ci) * g.d * g.h * g.w;
  for (int z = 0; z < g.win; ++z) {
    for (int y = 0; y < g.win; ++y) {
      for (int x = 0; x < g.win; ++x) {
        const std::int64_t zz = wz * g.win + z;
        const std::int64_t yy = wy * g.win + y;
        const std::int64_t xx = wx * g.win + x;
        fn(base + (zz * g.h + yy) * g.w + xx);
      }
    }
  }
}

WindowMoments window_moments(const WindowGrid& g, const double* a,
                             const double* b, std::int64_t bi, std::int64_t ci,
                             std::int64_t wz, std::int64_t wy,
                             std::int64_t wx) {
  const double inv_n = 1.0 / static_cast<double>(g.n());
  KahanSum sa, sb;
  for_each_voxel_in_window(g, bi, ci, wz, wy, wx, [&](std::int64_t at) {
    sa.add(a[at]);
    sb.add(b[at]);
  });
  WindowMoments m{};
  m.mean_a = sa.sum * inv_n;
  m.mean_b = sb.sum * inv_n;
  KahanSum xx, yy, xy;
  for_each_voxel_in_window(g, bi, ci, wz, wy, wx, [&](std::int64_t at) {
    const double dx = a[at] - m.mean_a;
    const double dy = b[at] - m.mean_b;
    xx.add(dx * dx);
    yy.add(dy * dy);
    xy.add(dx * dy);
  });
  m.sxx = xx.sum;
  m.syy = yy.sum;
  m.sxy = xy.sum;
  return m;
}

}  // namespace

Var window_variance_loss(const Var& a, const Tensor& target, int window,
                         double eps) {
  if (!a->value.same_shape(target)) {
    throw ShapeError("variance loss: input shapes differ, " +
                     a->value.shape_str() + " vs " + target.shape_str());
  }
  const WindowGrid g = window_grid(a->value, window);
  const std::int64_t nw = g.count();
  const double nm1 = static_cast<double>(g.n() - 1);
  auto moments = std::make_shared<std::vector<WindowMoments>>(
      static_cast<size_t>(nw));
  const double* pa = a->value.data();
  const double* pb = target.data();
  KahanSum total;
  for_each_window(g, [&](std::int64_t widx, std::int64_t bi, std::int64_t ci,
                         std::int64_t wz, std::int64_t wy, std::int64_t wx) {
    const WindowMoments m = window_moments(g, pa, pb, bi, ci, wz, wy, wx);
    (*moments)[static_cast<size_t>(widx)] = m;
    const double va = m.sxx / nm1;
    const double vb = m.syy / nm1;
    const double sa = std::sqrt(va);
    const double sb = std::sqrt(vb);
    total.add(1.0 - (2.0 * sa * sb + eps) / (va + vb + eps));
  });
  const double loss = total.sum / static_cast<double>(nw);
  Tensor aval = a->value;
  return make_node(
      Tensor::scalar(loss), {a},
      [g, nm1, nw, eps, moments, aval](Node& node) {
        Var a_in = node.inputs[0];
        if (!a_in->requires_grad) return;
        double* ga = a_in->ensure_grad().data();
        const double* pa = aval.data();
        const double gscale = node.grad[0] / static_cast<double>(nw);
        for_each_window(g, [&](std::int64_t widx, std::int64_t bi,
                               std::int64_t ci, std::int64_t wz,
                               std::int64_t wy, std::int64_t wx) {
          const WindowMoments& m = (*moments)[static_cast<size_t>(widx)];
          const double va = m.sxx / nm1;
          const double vb = m.syy / nm1;
          const double sa = std::sqrt(va);
          const double sb = std::sqrt(vb);
          const double denom = va + vb + eps;
          // d loss_w / d va; the sb/sa term comes from d(2*sa*sb)/dva.
          double dva = 0.0;
          if (sa > 0.0) {
            dva = -((sb / sa) * denom - (2.0 * sa * sb + eps)) / (denom * denom);
          } else {
            dva = (2.0 * sa * sb + eps) / (denom * denom);
          }
          const double coef = gscale * dva * 2.0 / nm1;
          for_each_voxel_in_window(
              g, bi, ci, wz, wy, wx,
              [&](std::int64_t at) { ga[at] += coef * (pa[at] - m.mean_a); });
        });
      });
}

Var window_covariance_loss(const Var& a, const Tensor& target, int window,
                           double eps) {
  if (!a->value.same_shape(target)) {
    throw ShapeError("covariance loss: input shapes differ, " +
                     a->value.shape_str() + " vs " + target.shape_str());
  }
  const WindowGrid g = window_grid(a->value, window);
  const std::int64_t nw = g.count();
  const double nm1 = static_cast<double>(g.n() - 1);
  auto moments = std::make_shared<std::vector<WindowMoments>>(
      static_cast<size_t>(nw));
  const double* pa = a->value.data();
  const double* pb = target.data();
  KahanSum total;
  for_each_window(g, [&](std::int64_t widx, std::int64_t bi, std::int64_t ci,
                         std::int64_t wz, std::int64_t wy, std::int64_t wx) {
    const WindowMoments m = window_moments(g, pa, pb, bi, ci, wz, wy, wx);
    (*moments)[static_cast<size_t>(widx)] = m;
    const double cov = m.sxy / nm1;
    const double sa = std::sqrt(m.sxx / nm1);
    const double sb = std::sqrt(m.syy / nm1);
    total.add(1.0 - (std::abs(cov) + eps) / (sa * sb + eps));
  });
  const double loss = total.sum / static_cast<double>(nw);
  Tensor aval = a->value;
  Tensor tval = target;
  return make_node(
      Tensor::scalar(loss), {a},
      [g, nm1, nw, eps, moments, aval, tval](Node& node) {
        Var a_in = node.inputs[0];
        if (!a_in->requires_grad) return;
        double* ga = a_in->ensure_grad().data();
        const double* pa = aval.data();
        const double* pb = tval.data();
        const double gscale = node.grad[0] / static_cast<double>(nw);
        for_each_window(g, [&](std::int64_t widx, std::int64_t bi,
                               std::int64_t ci, std::int64_t wz,
                               std::int64_t wy, std::int64_t wx) {
          const WindowMoments& m = (*moments)[static_cast<size_t>(widx)];
          const double cov = m.sxy / nm1;
          const double sa = std::sqrt(m.sxx / nm1);
          const double sb = std::sqrt(m.syy / nm1);
          const double den = sa * sb + eps;
          const double num = std::abs(cov) + eps;
          const double sign = cov > 0.0 ? 1.0 : (cov < 0.0 ? -1.0 : 0.0);
          const double dcov = -sign / den;
          // d loss_w / d va through den = sa*sb + eps.
          const double dva =
              sa > 0.0 ? num * sb / (2.0 * sa * den * den) : 0.0;
          const double ccov = gscale * dcov / nm1;
          const double cva = gscale * dva * 2.0 / nm1;
          for_each_voxel_in_window(g, bi, ci, wz, wy, wx, [&](std::int64_t at) {
            ga[at] += ccov * (pb[at] - m.mean_b) + cva * (pa[at] - m.mean_a);
          });
        });
      });
}

}  // namespace ad
}  // namespace acdis
