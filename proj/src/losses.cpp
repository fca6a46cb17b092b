#include "acdis/losses.hpp"

#include <cmath>

#include "acdis/common.hpp"
#include "json.hpp"

using nlohmann::json;

namespace acdis {
namespace losses {

void WindowConfig::validate() const {
  if (window < 2) {
    throw ConfigError("window config: window must be >= 2 (variance of a "
                      "1-voxel window is undefined)");
  }
  if (!(eps > 0.0)) throw ConfigError("window config: eps must be > 0");
}

namespace {

struct Kahan {
  double sum = 0.0, comp = 0.0;
  void add(double v) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

Tensor sigmoid_tensor(const Tensor& t) {
  Tensor out(t.shape());
  const std::int64_t n = t.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = t[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
  }
  return out;
}

ad::Var maybe_squash(const ad::Var& v, const WindowConfig& cfg) {
  return cfg.normalize ? ad::sigmoid(v) : v;
}

Tensor maybe_squash(const Tensor& t, const WindowConfig& cfg) {
  return cfg.normalize ? sigmoid_tensor(t) : t;
}

void check_pair_shapes(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shapes differ, " + a.shape_str() +
                     " vs " + b.shape_str());
  }
}

}  // namespace

WindowStats window_stats(const Tensor& a, const Tensor* b,
                         const WindowConfig& cfg) {
  cfg.validate();
  if (a.ndim() != 5) throw ShapeError("window stats: expects 5-D input");
  if (b != nullptr) check_pair_shapes(a, *b, "window stats");
  const int w = cfg.window;
  WindowStats st;
  st.grid = {a.dim(0), a.dim(1), a.dim(2) / w, a.dim(3) / w, a.dim(4) / w};
  if (st.grid[2] == 0 || st.grid[3] == 0 || st.grid[4] == 0) {
    throw ShapeError("window stats: window exceeds spatial extent");
  }
  st.n = static_cast<std::int64_t>(w) * w * w;
  const std::int64_t nw = st.window_count();
  st.mean_a.resize(static_cast<size_t>(nw));
  st.var_a.resize(static_cast<size_t>(nw));
  if (b != nullptr) {
    st.mean_b.resize(static_cast<size_t>(nw));
    st.var_b.resize(static_cast<size_t>(nw));
    st.covar.resize(static_cast<size_t>(nw));
  }
  const std::int64_t d = a.dim(2), h = a.dim(3), ww = a.dim(4);
  const double* pa = a.data();
  const double* pb = b != nullptr ? b->data() : nullptr;
  const double inv_n = 1.0 / static_cast<double>(st.n);
  const double inv_nm1 = 1.0 / static_cast<double>(st.n - 1);
  std::int64_t widx = 0;
  for (std::int64_t bi = 0; bi < st.grid[0]; ++bi) {
    for (std::int64_t ci = 0; ci < st.grid[1]; ++ci) {
      const std::int64_t base = (bi * st.grid[1] + ci) * d * h * ww;
      for (std::int64_t wz = 0; wz < st.grid[2]; ++wz) {
        for (std::int64_t wy = 0; wy < st.grid[3]; ++wy) {
          for (std::int64_t wx = 0; wx < st.grid[4]; ++wx, ++widx) {
            Kahan sa, sb;
            for (int z = 0; z < w; ++z) {
              for (int y = 0; y < w; ++y) {
                for (int x = 0; x < w; ++x) {
                  const std::int64_t at =
                      base + ((wz * w + z) * h + wy * w + y) * ww + wx * w + x;
                  sa.add(pa[at]);
                  if (pb) sb.add(pb[at]);
                }
              }
            }
            const double ma = sa.sum * inv_n;
            const double mb = pb ? sb.sum * inv_n : 0.0;
            Kahan xx, yy, xy;
            for (int z = 0; z < w; ++z) {
              for (int y = 0; y < w; ++y) {
                for (int x = 0; x < w; ++x) {
                  const std::int64_t at =
                      base + ((wz * w + z) * h + wy * w + y) * ww + wx * w + x;
                  const double dx = pa[at] - ma;
                  xx.add(dx * dx);
                  if (pb) {
                    const double dy = pb[at] - mb;
                    yy.add(dy * dy);
                    xy.add(dx * dy);
                  }
                }
              }
            }
            st.mean_a[static_cast<size_t>(widx)] = ma;
            st.var_a[static_cast<size_t>(widx)] = xx.sum * inv_nm1;
            if (pb) {
              st.mean_b[static_cast<size_t>(widx)] = mb;
              st.var_b[static_cast<size_t>(widx)] = yy.sum * inv_nm1;
              st.covar[static_cast<size_t>(widx)] = xy.sum * inv_nm1;
            }
          }
        }
      }
    }
  }
  return st;
}

ad::Var variance_loss(const ad::Var& f_m, const Tensor& f_aux,
                      const WindowConfig& cfg) {
  cfg.validate();
  check_pair_shapes(f_m->value, f_aux, "variance loss");
  return ad::window_variance_loss(maybe_squash(f_m, cfg),
                                  maybe_squash(f_aux, cfg), cfg.window,
                                  cfg.eps);
}

ad::Var covariance_loss(const ad::Var& f_m, const Tensor& f_aux,
                        const WindowConfig& cfg) {
  cfg.validate();
  check_pair_shapes(f_m->value, f_aux, "covariance loss");
  return ad::window_covariance_loss(maybe_squash(f_m, cfg),
                                    maybe_squash(f_aux, cfg), cfg.window,
                                    cfg.eps);
}

AcctLoss acct_loss(const ad::Var& f_m, const Tensor& f_aux,
                   const WindowConfig& cfg) {
  AcctLoss out;
  out.variance = variance_loss(f_m, f_aux, cfg);
  out.covariance = covariance_loss(f_m, f_aux, cfg);
  out.total = ad::add(out.variance, out.covariance);
  return out;
}

double variance_loss_value(const Tensor& f_m, const Tensor& f_aux,
                           const WindowConfig& cfg) {
  return variance_loss(ad::constant(f_m), f_aux, cfg)->value.item();
}

double covariance_loss_value(const Tensor& f_m, const Tensor& f_aux,
                             const WindowConfig& cfg) {
  return covariance_loss(ad::constant(f_m), f_aux, cfg)->value.item();
}

ad::Var synthesis_loss(const ad::Var& synth, const Tensor& target) {
  check_pair_shapes(synth->value, target, "synthesis loss");
  ad::Var diff = ad::sub(synth, ad::constant(target));
  return ad::mean_all(ad::mul(diff, diff));
}

ad::Var dice_loss(const ad::Var& logits, const Tensor& label, int class_count,
                  double eps) {
  if (logits->value.ndim() != 5 || logits->value.dim(1) != class_count) {
    throw ShapeError("dice loss: logits must be (B, classes, D, H, W)");
  }
  return ad::soft_dice_loss(logits, label, eps);
}

ad::Var weighted_ce_loss(const ad::Var& logits, const Tensor& label,
                         const Tensor& weights) {
  return ad::weighted_cross_entropy(logits, label, weights);
}

Tensor wce_batch_weights(const Tensor& label, int class_count) {
  std::vector<double> counts(static_cast<size_t>(class_count), 0.0);
  const std::int64_t n = label.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::int64_t>(label[i]);
    if (c < 0 || c >= class_count ||
        static_cast<double>(c) != label[i]) {
      throw ValueError("wce weights: label value out of range");
    }
    counts[static_cast<size_t>(c)] += 1.0;
  }
  Tensor w({class_count});
  double present_sum = 0.0;
  int present = 0;
  for (int c = 0; c < class_count; ++c) {
    if (counts[static_cast<size_t>(c)] > 0.0) {
      w[c] = static_cast<double>(n) / counts[static_cast<size_t>(c)];
      present_sum += w[c];
      ++present;
    }
  }
  if (present == 0) throw ValueError("wce weights: empty label");
  const double mean = present_sum / static_cast<double>(present);
  for (int c = 0; c < class_count; ++c) {
    if (counts[static_cast<size_t>(c)] > 0.0) {
      w[c] = std::min(10.0, std::max(0.1, w[c] / mean));
    }
  }
  return w;
}

SegmentationLoss segmentation_loss(const std::vector<ad::Var>& heads,
                                   const Tensor& label, int class_count) {
  if (heads.size() != static_cast<size_t>(kNumHeads)) {
    throw ProtocolError("segmentation loss: expected " +
                        std::to_string(kNumHeads) + " heads, got " +
                        std::to_string(heads.size()));
  }
  const Tensor weights = wce_batch_weights(label, class_count);
  SegmentationLoss out;
  ad::Var total;
  Kahan wce_acc, dice_acc;
  for (int i = 0; i < kNumHeads; ++i) {
    ad::Var wce = weighted_ce_loss(heads[static_cast<size_t>(i)], label,
                                   weights);
    ad::Var dice = dice_loss(heads[static_cast<size_t>(i)], label, class_count);
    ad::Var head_sum = ad::add(wce, dice);
    out.per_head[static_cast<size_t>(i)] = head_sum->value.item();
    wce_acc.add(wce->value.item());
    dice_acc.add(dice->value.item());
    total = total == nullptr ? head_sum : ad::add(total, head_sum);
  }
  out.total = total;
  out.wce_sum = wce_acc.sum;
  out.dice_sum = dice_acc.sum;
  return out;
}

ad::Var baseline_mse_distill(const ad::Var& f_m, const Tensor& f_aux) {
  return synthesis_loss(f_m, f_aux);
}

ad::Var baseline_kl_distill(const ad::Var& f_m, const Tensor& f_aux) {
  check_pair_shapes(f_m->value, f_aux, "kl distill");
  if (f_m->value.ndim() != 5) {
    throw ShapeError("kl distill: expects 5-D features");
  }
  const auto& s = f_m->value.shape();
  const std::vector<int> to_last{0, 2, 3, 4, 1};
  // Student channel distribution.
  ad::Var q = ad::softmax_lastdim(
      ad::permute(ad::sigmoid(f_m), to_last));
  ad::Var log_q = ad::log_op(q);
  // Teacher distribution, fixed.
  ad::Var p = ad::softmax_lastdim(
      ad::permute(ad::constant(sigmoid_tensor(f_aux)), to_last));
  Tensor pv = p->value;
  Tensor log_pv(pv.shape());
  for (std::int64_t i = 0; i < pv.size(); ++i) log_pv[i] = std::log(pv[i]);
  const double rows =
      static_cast<double>(s[0] * s[2] * s[3] * s[4]);
  ad::Var diff = ad::sub(ad::constant(log_pv), log_q);
  ad::Var weighted = ad::mul(ad::constant(pv), diff);
  return ad::mul_scalar(ad::sum_all(weighted), 1.0 / rows);
}

LossReport compose_overall(double l_var, double l_covar, double l_syn,
                           double l_wce, double l_dice,
                           const std::array<double, kNumHeads>& heads,
                           int epoch, const LossSchedule& schedule) {
  LossReport r;
  r.epoch = epoch;
  r.l_var = l_var;
  r.l_covar = l_covar;
  r.l_syn = l_syn;
  r.l_wce = l_wce;
  r.l_dice = l_dice;
  r.heads = heads;
  r.l_acct = l_var + l_covar;
  r.l_seg = l_wce + l_dice;
  r.active_acct = epoch >= schedule.acct_start_epoch;
  r.active_syn = epoch >= schedule.syn_start_epoch;
  const double aa = r.active_acct ? 1.0 : 0.0;
  const double as = r.active_syn ? 1.0 : 0.0;
  r.l_overall = (r.l_acct * aa + r.l_seg) + r.l_syn * as;
  if (!std::isfinite(r.l_overall)) {
    throw NumericalError("loss report: non-finite overall loss");
  }
  return r;
}

std::string LossReport::to_json_line() const {
  json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["l_var"] = l_var;
  j["l_covar"] = l_covar;
  j["l_acct"] = l_acct;
  j["l_syn"] = l_syn;
  j["l_wce"] = l_wce;
  j["l_dice"] = l_dice;
  j["l_seg"] = l_seg;
  j["l_overall"] = l_overall;
  j["heads"] = heads;
  j["active_acct"] = active_acct;
  j["active_syn"] = active_syn;
  return j.dump();
}

LossReport LossReport::from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError("loss report: invalid JSON line: " +
                      std::string(e.what()));
  }
  LossReport r;
  r.step = j.at("step").get<std::int64_t>();
  r.epoch = j.at("epoch").get<int>();
  r.l_var = j.at("l_var").get<double>();
  r.l_covar = j.at("l_covar").get<double>();
  r.l_acct = j.at("l_acct").get<double>();
  r.l_syn = j.at("l_syn").get<double>();
  r.l_wce = j.at("l_wce").get<double>();
  r.l_dice = j.at("l_dice").get<double>();
  r.l_seg = j.at("l_seg").get<double>();
  r.l_overall = j.at("l_overall").get<double>();
  const auto& h = j.at("heads");
  for (int i = 0; i < kNumHeads; ++i) {
    r.heads[static_cast<size_t>(i)] = h.at(static_cast<size_t>(i)).get<double>();
  }
  r.active_acct = j.at("active_acct").get<bool>();
  r.active_syn = j.at("active_syn").get<bool>();
  return r;
}

}  // namespace losses
}  // namespace acdis
