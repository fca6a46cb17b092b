#ifndef ACDIS_TRAINING_HPP_
#define ACDIS_TRAINING_HPP_

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "acdis/losses.hpp"
#include "acdis/network.hpp"
#include "acdis/nn.hpp"
#include "acdis/volume.hpp"

namespace acdis {
namespace train {

struct TrainConfig {
  net::ModelConfig model;

  int epochs = 30;
  int batch_size = 1;
  int steps_per_epoch = 0;  // 0: ceil(cases / batch_size)
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int syn_start_epoch = 21;
  int acct_start_epoch = 1;
  std::int64_t crop = 16;
  std::uint64_t seed = 0;
  std::string mask_sampling = "uniform15";  // "uniform15" | "full"
  AugmentConfig augment;
  std::string data_dir;
  int checkpoint_every = 1;

  void validate(bool require_data_dir = false) const;
  // Strict flat key-value schema; unknown keys are rejected by name.
  static TrainConfig from_json_text(const std::string& text);
  std::string to_json_text() const;  // canonical: sorted keys
  std::uint64_t config_hash() const;
  losses::LossSchedule schedule() const {
    return {acct_start_epoch, syn_start_epoch};
  }
};

// Uniform draw over the 15 non-empty masks.
ModalityMask sample_modality_mask(Rng& rng);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  net::AcdisModel& model() { return *model_; }
  const net::AcdisModel& model() const { return *model_; }
  nn::Adam& optimizer() { return adam_; }
  const TrainConfig& config() const { return cfg_; }
  int epochs_completed() const { return epoch_; }
  std::int64_t steps_completed() const { return step_; }

  // One optimizer update. The batch must be complete-modality; the mask
  // gates only the synthesis path.
  losses::LossReport train_step(const Tensor& batch_vol,
                                const Tensor& batch_label,
                                const ModalityMask& mask, int epoch);

  // Full loop: per-step reports appended to <out_dir>/train_log.jsonl,
  // checkpoints under <out_dir>. Resumes from the stored epoch when the
  // trainer was loaded from a checkpoint.
  void train(const Dataset& dataset, const std::string& out_dir);

  void save_checkpoint(const std::string& path) const;
  static Trainer load_checkpoint(const std::string& path);

  std::uint64_t param_hash() const { return model_->params().content_hash(); }

 private:
  Trainer(const TrainConfig& cfg, bool fresh);

  TrainConfig cfg_;
  std::unique_ptr<net::AcdisModel> model_;
  nn::Adam adam_;
  Rng rng_data_, rng_mask_, rng_augment_;
  int epoch_ = 0;
  std::int64_t step_ = 0;
};

// ---- finite-difference verification harness ----

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  bool teacher_grad_zero = true;  // for losses with a fixed target
};

// Selectors: quadratic, var, covar, acct, syn, dice, wce, mse_distill,
// kl_distill.
GradCheckResult gradient_check(const std::string& selector,
                               std::uint64_t seed, double h, double tol);

std::vector<GradCheckResult> gradient_check_suite(double h = 1e-3,
                                                  double tol = 1e-4,
                                                  int repeats = 20);

}  // namespace train
}  // namespace acdis

#endif  // ACDIS_TRAINING_HPP_
