#ifndef ACDIS_LOSSES_HPP_
#define ACDIS_LOSSES_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "acdis/autodiff.hpp"
#include "acdis/tensor.hpp"

namespace acdis {
namespace losses {

struct WindowConfig {
  int window = 4;
  double eps = 1e-6;
  bool normalize = true;  // logistic squashing before the window losses

  void validate() const;
};

// Per-window first and second moments (unbiased, divisor n-1), one entry
// per (batch, channel, window) in row-major order of the window grid.
struct WindowStats {
  std::int64_t n = 0;  // voxels per window
  std::array<std::int64_t, 5> grid{};  // (B, C, nd, nh, nw)
  std::vector<double> mean_a, var_a;
  std::vector<double> mean_b, var_b, covar;

  bool has_pair() const { return !covar.empty(); }
  std::int64_t window_count() const {
    return grid[0] * grid[1] * grid[2] * grid[3] * grid[4];
  }
};

// Two-pass (mean then moments) with compensated accumulation; `b` may be
// null for single-input statistics. Never applies squashing: it reports
// moments of exactly the values given.
WindowStats window_stats(const Tensor& a, const Tensor* b,
                         const WindowConfig& cfg);

// ---- windowed distillation losses ----
// The target is consumed by value: no gradient ever reaches it.
ad::Var variance_loss(const ad::Var& f_m, const Tensor& f_aux,
                      const WindowConfig& cfg);
ad::Var covariance_loss(const ad::Var& f_m, const Tensor& f_aux,
                        const WindowConfig& cfg);

struct AcctLoss {
  ad::Var total;
  ad::Var variance;
  ad::Var covariance;
};
AcctLoss acct_loss(const ad::Var& f_m, const Tensor& f_aux,
                   const WindowConfig& cfg);

// Value-only convenience wrappers for tests and reporting.
double variance_loss_value(const Tensor& f_m, const Tensor& f_aux,
                           const WindowConfig& cfg);
double covariance_loss_value(const Tensor& f_m, const Tensor& f_aux,
                             const WindowConfig& cfg);

// Mean squared error against a fixed target.
ad::Var synthesis_loss(const ad::Var& synth, const Tensor& target);

// ---- segmentation losses ----
inline constexpr double kDiceEps = 1e-5;

ad::Var dice_loss(const ad::Var& logits, const Tensor& label, int class_count,
                  double eps = kDiceEps);
ad::Var weighted_ce_loss(const ad::Var& logits, const Tensor& label,
                         const Tensor& weights);

// Inverse class-voxel-frequency per batch, normalized to mean 1 over the
// classes present, clipped to [0.1, 10]; absent classes get weight 0
// (they contribute no terms).
Tensor wce_batch_weights(const Tensor& label, int class_count);

inline constexpr int kNumHeads = 6;

struct SegmentationLoss {
  ad::Var total;
  double wce_sum = 0.0;
  double dice_sum = 0.0;
  std::array<double, kNumHeads> per_head{};
};
SegmentationLoss segmentation_loss(const std::vector<ad::Var>& heads,
                                   const Tensor& label, int class_count);

// ---- ablation baselines ----
ad::Var baseline_mse_distill(const ad::Var& f_m, const Tensor& f_aux);
// KL between channelwise softmax distributions of logistic-squashed
// features, teacher distribution fixed.
ad::Var baseline_kl_distill(const ad::Var& f_m, const Tensor& f_aux);

// ---- overall objective ----
struct LossSchedule {
  int acct_start_epoch = 1;
  int syn_start_epoch = 21;
};

struct LossReport {
  std::int64_t step = 0;
  int epoch = 0;
  double l_var = 0.0, l_covar = 0.0, l_acct = 0.0, l_syn = 0.0;
  double l_wce = 0.0, l_dice = 0.0, l_seg = 0.0, l_overall = 0.0;
  std::array<double, kNumHeads> heads{};
  bool active_acct = true;
  bool active_syn = true;

  std::string to_json_line() const;
  static LossReport from_json_line(const std::string& line);
};

// Gated composition; arithmetic is fixed so the logged identities
// l_acct == l_var + l_covar, l_seg == l_wce + l_dice and
// l_overall == l_acct*aa + l_seg + l_syn*as hold bit-exactly.
LossReport compose_overall(double l_var, double l_covar, double l_syn,
                           double l_wce, double l_dice,
                           const std::array<double, kNumHeads>& heads,
                           int epoch, const LossSchedule& schedule);

}  // namespace losses
}  // namespace acdis

#endif  // ACDIS_LOSSES_HPP_
