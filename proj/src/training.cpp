#include "acdis/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace acdis {
namespace train {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void TrainConfig::validate(bool require_data_dir) const {
  model.validate();
  if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (steps_per_epoch < 0) {
    throw ConfigError("config: steps_per_epoch must be >= 0");
  }
  if (!(lr > 0.0)) throw ConfigError("config: lr must be > 0");
  if (weight_decay < 0.0) {
    throw ConfigError("config: weight_decay must be >= 0");
  }
  if (syn_start_epoch < 1 || syn_start_epoch > epochs + 1) {
    throw ConfigError("config: syn_start_epoch must be in [1, epochs+1]");
  }
  if (acct_start_epoch < 1) {
    throw ConfigError("config: acct_start_epoch must be >= 1");
  }
  if (crop < (std::int64_t{1} << model.encoder_depth)) {
    throw ConfigError("config: crop too small for encoder_depth");
  }
  if (mask_sampling != "uniform15" && mask_sampling != "full") {
    throw ConfigError("config: mask_sampling must be 'uniform15' or 'full'");
  }
  if (checkpoint_every < 1) {
    throw ConfigError("config: checkpoint_every must be >= 1");
  }
  if (require_data_dir && data_dir.empty()) {
    throw ConfigError("config: data_dir is required");
  }
}

namespace {

const std::set<std::string> kKnownKeys = {
    "epochs", "batch_size", "steps_per_epoch", "lr", "weight_decay",
    "syn_start_epoch", "acct_start_epoch", "crop", "seed", "mask_sampling",
    "base_channels", "encoder_depth", "class_count", "afeb_heads",
    "stage_set", "window", "window_eps", "window_normalize",
    "augment_flip_prob", "augment_rot90_prob", "augment_intensity_scale",
    "augment_intensity_shift", "data_dir", "checkpoint_every"};

json config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["steps_per_epoch"] = c.steps_per_epoch;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["syn_start_epoch"] = c.syn_start_epoch;
  j["acct_start_epoch"] = c.acct_start_epoch;
  j["crop"] = c.crop;
  j["seed"] = c.seed;
  j["mask_sampling"] = c.mask_sampling;
  j["base_channels"] = c.model.base_channels;
  j["encoder_depth"] = c.model.encoder_depth;
  j["class_count"] = c.model.class_count;
  j["afeb_heads"] = c.model.afeb_heads;
  j["stage_set"] = c.model.stage_set;
  j["window"] = c.model.window.window;
  j["window_eps"] = c.model.window.eps;
  j["window_normalize"] = c.model.window.normalize;
  j["augment_flip_prob"] = c.augment.flip_prob;
  j["augment_rot90_prob"] = c.augment.rot90_prob;
  j["augment_intensity_scale"] = c.augment.intensity_scale;
  j["augment_intensity_shift"] = c.augment.intensity_shift;
  j["data_dir"] = c.data_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

}  // namespace

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: invalid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  std::vector<std::string> unknown;
  for (const auto& [key, _] : j.items()) {
    if (!kKnownKeys.count(key)) unknown.push_back(key);
  }
  if (!unknown.empty()) {
    std::string msg = "config: unrecognized keys:";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
  TrainConfig c;
  auto get_int = [&](const char* key, int fallback) {
    return j.contains(key) ? j.at(key).get<int>() : fallback;
  };
  auto get_dbl = [&](const char* key, double fallback) {
    return j.contains(key) ? j.at(key).get<double>() : fallback;
  };
  c.epochs = get_int("epochs", c.epochs);
  c.batch_size = get_int("batch_size", c.batch_size);
  c.steps_per_epoch = get_int("steps_per_epoch", c.steps_per_epoch);
  c.lr = get_dbl("lr", c.lr);
  c.weight_decay = get_dbl("weight_decay", c.weight_decay);
  c.syn_start_epoch = get_int("syn_start_epoch", c.syn_start_epoch);
  c.acct_start_epoch = get_int("acct_start_epoch", c.acct_start_epoch);
  if (j.contains("crop")) c.crop = j.at("crop").get<std::int64_t>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("mask_sampling")) {
    c.mask_sampling = j.at("mask_sampling").get<std::string>();
  }
  c.model.base_channels = get_int("base_channels", c.model.base_channels);
  c.model.encoder_depth = get_int("encoder_depth", c.model.encoder_depth);
  c.model.class_count = get_int("class_count", c.model.class_count);
  c.model.afeb_heads = get_int("afeb_heads", c.model.afeb_heads);
  if (j.contains("stage_set")) {
    c.model.stage_set = j.at("stage_set").get<std::vector<int>>();
  }
  c.model.window.window = get_int("window", c.model.window.window);
  c.model.window.eps = get_dbl("window_eps", c.model.window.eps);
  if (j.contains("window_normalize")) {
    c.model.window.normalize = j.at("window_normalize").get<bool>();
  }
  c.augment.flip_prob = get_dbl("augment_flip_prob", c.augment.flip_prob);
  c.augment.rot90_prob = get_dbl("augment_rot90_prob", c.augment.rot90_prob);
  c.augment.intensity_scale =
      get_dbl("augment_intensity_scale", c.augment.intensity_scale);
  c.augment.intensity_shift =
      get_dbl("augment_intensity_shift", c.augment.intensity_shift);
  if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
  c.checkpoint_every = get_int("checkpoint_every", c.checkpoint_every);
  c.validate();
  return c;
}

std::string TrainConfig::to_json_text() const {
  return config_to_json(*this).dump(2) + "\n";
}

std::uint64_t TrainConfig::config_hash() const {
  // nlohmann::json orders object keys lexicographically, so dump() is a
  // canonical form.
  return fnv1a64(config_to_json(*this).dump());
}

ModalityMask sample_modality_mask(Rng& rng) {
  static const std::vector<ModalityMask> kMasks = enumerate_masks();
  return kMasks[static_cast<size_t>(rng.uniform_int(kMasks.size()))];
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg) : Trainer(cfg, true) {}

Trainer::Trainer(const TrainConfig& cfg, bool fresh)
    : cfg_(cfg),
      model_(std::make_unique<net::AcdisModel>(
          cfg.model, seeded_stream(cfg.seed, "init").next_u64())),
      adam_(nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}),
      rng_data_(seeded_stream(cfg.seed, "data")),
      rng_mask_(seeded_stream(cfg.seed, "mask")),
      rng_augment_(seeded_stream(cfg.seed, "augment")) {
  cfg_.validate();
  (void)fresh;
}

losses::LossReport Trainer::train_step(const Tensor& batch_vol,
                                       const Tensor& batch_label,
                                       const ModalityMask& mask, int epoch) {
  using ad::Var;
  nn::Ctx ctx(model_->params(), true);
  net::ForwardResult fwd = model_->forward_full(
      ctx, batch_vol, mask, net::Phase::kTraining);

  // ACCT: variance and covariance parts averaged over (stage, modality)
  // pairs; the auxiliary features enter as fixed targets.
  Var var_sum, covar_sum;
  for (const auto& pair : fwd.acct_pairs) {
    losses::AcctLoss part =
        losses::acct_loss(pair.student, pair.teacher, cfg_.model.window);
    var_sum = var_sum ? ad::add(var_sum, part.variance) : part.variance;
    covar_sum =
        covar_sum ? ad::add(covar_sum, part.covariance) : part.covariance;
  }
  const double inv_pairs =
      fwd.acct_pairs.empty() ? 0.0
                             : 1.0 / static_cast<double>(fwd.acct_pairs.size());
  Var l_var = ad::mul_scalar(var_sum, inv_pairs);
  Var l_covar = ad::mul_scalar(covar_sum, inv_pairs);
  Var l_acct = ad::add(l_var, l_covar);

  losses::SegmentationLoss seg = losses::segmentation_loss(
      fwd.heads, batch_label, cfg_.model.class_count);

  Var syn_sum;
  for (int m = 0; m < kNumModalities; ++m) {
    Var term = losses::synthesis_loss(fwd.synth[static_cast<size_t>(m)],
                                      fwd.synth_targets[static_cast<size_t>(m)]);
    syn_sum = syn_sum ? ad::add(syn_sum, term) : term;
  }
  Var l_syn = ad::mul_scalar(syn_sum, 1.0 / kNumModalities);

  const losses::LossSchedule sched = cfg_.schedule();
  const bool active_acct = epoch >= sched.acct_start_epoch;
  const bool active_syn = epoch >= sched.syn_start_epoch;
  Var total = seg.total;
  if (active_acct) total = ad::add(total, l_acct);
  if (active_syn) total = ad::add(total, l_syn);

  const double v_var = l_var->value.item();
  const double v_covar = l_covar->value.item();
  const double v_syn = l_syn->value.item();
  if (!std::isfinite(v_var) || !std::isfinite(v_covar) ||
      !std::isfinite(v_syn) || !std::isfinite(seg.wce_sum) ||
      !std::isfinite(seg.dice_sum)) {
    throw NumericalError(
        "train step: non-finite loss (l_var=" + format_double(v_var) +
        " l_covar=" + format_double(v_covar) + " l_syn=" +
        format_double(v_syn) + " l_wce=" + format_double(seg.wce_sum) +
        " l_dice=" + format_double(seg.dice_sum) + ")");
  }

  ad::backward(total);
  adam_.step(model_->params(), ctx);

  losses::LossReport report = losses::compose_overall(
      v_var, v_covar, v_syn, seg.wce_sum, seg.dice_sum, seg.per_head, epoch,
      sched);
  report.step = ++step_;
  return report;
}

void Trainer::train(const Dataset& dataset, const std::string& out_dir) {
  if (dataset.size() == 0) {
    throw ConfigError("train: dataset is empty");
  }
  for (const auto& v : dataset.cases) {
    if (cfg_.crop > v.dim_d() || cfg_.crop > v.dim_h() ||
        cfg_.crop > v.dim_w()) {
      throw ShapeError("train: crop exceeds a dataset volume");
    }
  }
  fs::create_directories(out_dir);
  const std::string log_path = (fs::path(out_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, epoch_ > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("train: cannot open log " + log_path);

  const int n = static_cast<int>(dataset.size());
  const int steps =
      cfg_.steps_per_epoch > 0
          ? cfg_.steps_per_epoch
          : (n + cfg_.batch_size - 1) / cfg_.batch_size;
  const std::int64_t c = cfg_.crop;

  for (int epoch = epoch_ + 1; epoch <= cfg_.epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(
          rng_data_.uniform_int(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    for (int s = 0; s < steps; ++s) {
      Tensor vols({cfg_.batch_size, kNumModalities, c, c, c});
      Tensor labels({cfg_.batch_size, c, c, c});
      for (int b = 0; b < cfg_.batch_size; ++b) {
        const int idx =
            order[static_cast<size_t>((s * cfg_.batch_size + b) % n)];
        MultiModalVolume v = preprocess_crop(
            dataset.cases[static_cast<size_t>(idx)], c, rng_augment_);
        v = augment(v, cfg_.augment, rng_augment_);
        const Tensor mv = modalities_to_tensor(v);
        const Tensor lv = label_to_tensor(v);
        std::copy(mv.data(), mv.data() + mv.size(),
                  vols.data() + b * mv.size());
        std::copy(lv.data(), lv.data() + lv.size(),
                  labels.data() + b * lv.size());
      }
      const ModalityMask mask = cfg_.mask_sampling == "full"
                                    ? ModalityMask::all_available()
                                    : sample_modality_mask(rng_mask_);
      const losses::LossReport report =
          train_step(vols, labels, mask, epoch);
      log << report.to_json_line() << "\n";
    }
    log.flush();
    epoch_ = epoch;
    if (epoch % cfg_.checkpoint_every == 0 || epoch == cfg_.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.bin", epoch);
      save_checkpoint((fs::path(out_dir) / name).string());
    }
  }
  save_checkpoint((fs::path(out_dir) / "final.ckpt").string());

  json summary;
  summary["epochs_completed"] = epoch_;
  summary["steps_completed"] = step_;
  summary["param_hash"] = std::to_string(param_hash());
  summary["final_checkpoint"] = "final.ckpt";
  write_text_file((fs::path(out_dir) / "train_summary.json").string(),
                  summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[9] = "ACDISCK1";

void append_tensor_payload(std::vector<double>& payload, const Tensor& t) {
  payload.insert(payload.end(), t.data(), t.data() + t.size());
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  const nn::ParamStore& store = model_->params();
  json header;
  header["format_version"] = 1;
  header["config"] = json::parse(cfg_.to_json_text());
  header["config_hash"] = std::to_string(cfg_.config_hash());
  header["epoch"] = epoch_;
  header["step"] = step_;
  header["adam_t"] = adam_.step_count();
  header["rng"] = {{"data", rng_data_.serialize_state()},
                   {"mask", rng_mask_.serialize_state()},
                   {"augment", rng_augment_.serialize_state()}};
  json tensors = json::array();
  std::vector<double> payload;
  auto add_entry = [&](const std::string& name, const char* kind,
                       const Tensor& t) {
    json e;
    e["name"] = name;
    e["kind"] = kind;
    e["shape"] = t.shape();
    e["offset"] = payload.size();
    tensors.push_back(e);
    append_tensor_payload(payload, t);
  };
  for (const auto& name : store.names()) {
    add_entry(name, "param", store.get(name));
  }
  const auto& st = adam_.state();
  for (const auto& name : store.names()) {
    auto it = st.m.find(name);
    if (it != st.m.end()) {
      add_entry(name, "adam_m", it->second);
      add_entry(name, "adam_v", st.v.at(name));
    }
  }
  header["tensors"] = tensors;

  const std::string htext = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + path);
  out.write(kCkptMagic, 8);
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw DataError("checkpoint: write failed " + path);
}

Trainer Trainer::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic in " + path);
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in) throw FormatError("checkpoint: truncated header length");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw FormatError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint: invalid header JSON: " +
                      std::string(e.what()));
  }
  if (header.value("format_version", 0) != 1) {
    throw FormatError("checkpoint: unsupported format_version");
  }
  TrainConfig cfg = TrainConfig::from_json_text(header.at("config").dump());
  if (std::to_string(cfg.config_hash()) !=
      header.at("config_hash").get<std::string>()) {
    throw FormatError("checkpoint: config hash mismatch");
  }

  Trainer t(cfg, false);
  t.epoch_ = header.at("epoch").get<int>();
  t.step_ = header.at("step").get<std::int64_t>();
  t.adam_.set_step_count(header.at("adam_t").get<std::int64_t>());
  t.rng_data_.restore_state(header.at("rng").at("data").get<std::string>());
  t.rng_mask_.restore_state(header.at("rng").at("mask").get<std::string>());
  t.rng_augment_.restore_state(
      header.at("rng").at("augment").get<std::string>());

  std::vector<double> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0) {
      throw FormatError("checkpoint: payload size not a multiple of 8");
    }
    payload.resize(rest.size() / sizeof(double));
    std::memcpy(payload.data(), rest.data(), rest.size());
  }

  nn::ParamStore& store = t.model_->params();
  auto& st = t.adam_.state();
  st.t = t.adam_.step_count();
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const std::string kind = e.at("kind").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    if (!store.has(name)) {
      throw FormatError("checkpoint: unknown tensor '" + name + "'");
    }
    Tensor* dst = nullptr;
    if (kind == "param") {
      dst = &store.get(name);
    } else if (kind == "adam_m") {
      dst = &st.m.emplace(name, Tensor::zeros(shape)).first->second;
    } else if (kind == "adam_v") {
      dst = &st.v.emplace(name, Tensor::zeros(shape)).first->second;
    } else {
      throw FormatError("checkpoint: unknown tensor kind '" + kind + "'");
    }
    if (dst->shape() != shape) {
      throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    }
    if (offset + static_cast<std::uint64_t>(dst->size()) > payload.size()) {
      throw FormatError("checkpoint: payload overrun for '" + name + "'");
    }
    std::copy(payload.begin() + static_cast<std::ptrdiff_t>(offset),
              payload.begin() + static_cast<std::ptrdiff_t>(offset) +
                  dst->size(),
              dst->data());
  }
  return t;
}

// ---------------------------------------------------------------------------
// finite-difference harness
// ---------------------------------------------------------------------------

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo,
                     double hi) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

Tensor random_labels(std::vector<std::int64_t> shape, int classes, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<double>(rng.uniform_int(
        static_cast<std::uint64_t>(classes)));
  }
  return t;
}

struct Probe {
  Tensor x0;
  std::function<ad::Var(const ad::Var&)> build;
  ad::Var teacher_leaf;  // set when the loss has a fixed feature target
};

Probe make_probe(const std::string& selector, std::uint64_t seed) {
  Rng rng = seeded_stream(seed, ("gradcheck." + selector).c_str());
  Probe p;
  losses::WindowConfig wcfg;
  if (selector == "quadratic") {
    p.x0 = random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
    p.build = [](const ad::Var& x) {
      return ad::sum_all(ad::add(ad::mul(x, x), ad::mul_scalar(x, 3.0)));
    };
    return p;
  }
  if (selector == "var" || selector == "covar" || selector == "acct") {
    p.x0 = random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
    p.teacher_leaf =
        ad::leaf(random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0), true);
    Tensor target = p.teacher_leaf->value;
    if (selector == "var") {
      p.build = [target, wcfg](const ad::Var& x) {
        return losses::variance_loss(x, target, wcfg);
      };
    } else if (selector == "covar") {
      p.build = [target, wcfg](const ad::Var& x) {
        return losses::covariance_loss(x, target, wcfg);
      };
    } else {
      p.build = [target, wcfg](const ad::Var& x) {
        return losses::acct_loss(x, target, wcfg).total;
      };
    }
    return p;
  }
  if (selector == "syn" || selector == "mse_distill" ||
      selector == "kl_distill") {
    p.x0 = random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0);
    p.teacher_leaf =
        ad::leaf(random_tensor({1, 2, 4, 4, 4}, rng, -1.0, 1.0), true);
    Tensor target = p.teacher_leaf->value;
    if (selector == "kl_distill") {
      p.build = [target](const ad::Var& x) {
        return losses::baseline_kl_distill(x, target);
      };
    } else {
      p.build = [target](const ad::Var& x) {
        return losses::synthesis_loss(x, target);
      };
    }
    return p;
  }
  if (selector == "dice" || selector == "wce") {
    const int classes = 2;
    p.x0 = random_tensor({1, classes, 4, 4, 4}, rng, -1.0, 1.0);
    Tensor labels = random_labels({1, 4, 4, 4}, classes, rng);
    if (selector == "dice") {
      p.build = [labels, classes](const ad::Var& x) {
        return losses::dice_loss(x, labels, classes);
      };
    } else {
      Tensor weights = losses::wce_batch_weights(labels, classes);
      p.build = [labels, weights](const ad::Var& x) {
        return losses::weighted_ce_loss(x, labels, weights);
      };
    }
    return p;
  }
  throw ConfigError("gradient check: unknown selector '" + selector + "'");
}

}  // namespace

GradCheckResult gradient_check(const std::string& selector,
                               std::uint64_t seed, double h, double tol) {
  Probe probe = make_probe(selector, seed);
  GradCheckResult res;
  res.name = selector;
  res.tolerance = tol;

  ad::Var x = ad::leaf(probe.x0.clone(), true);
  ad::Var loss = probe.build(x);
  ad::backward(loss);
  const Tensor grad =
      x->grad.defined() ? x->grad : Tensor::zeros(probe.x0.shape());

  if (probe.teacher_leaf != nullptr && probe.teacher_leaf->grad.defined()) {
    for (std::int64_t i = 0; i < probe.teacher_leaf->grad.size(); ++i) {
      if (probe.teacher_leaf->grad[i] != 0.0) {
        res.teacher_grad_zero = false;
        break;
      }
    }
  }

  // Vector-level relative error: every deviation is measured against the
  // gradient's scale, so near-zero components do not inflate the ratio.
  double linf_diff = 0.0, linf_scale = 0.0;
  const std::int64_t n = probe.x0.size();
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor xp = probe.x0.clone();
    xp[i] += h;
    const double fp = probe.build(ad::constant(xp))->value.item();
    Tensor xm = probe.x0.clone();
    xm[i] -= h;
    const double fm = probe.build(ad::constant(xm))->value.item();
    const double fd = (fp - fm) / (2.0 * h);
    linf_diff = std::max(linf_diff, std::abs(grad[i] - fd));
    linf_scale = std::max({linf_scale, std::abs(grad[i]), std::abs(fd)});
  }
  res.max_rel_err = linf_diff / std::max(linf_scale, 1e-12);
  res.pass = res.max_rel_err < tol && res.teacher_grad_zero;
  return res;
}

std::vector<GradCheckResult> gradient_check_suite(double h, double tol,
                                                  int repeats) {
  const std::vector<std::string> selectors = {
      "quadratic", "var", "covar", "acct", "syn",
      "dice",      "wce", "mse_distill", "kl_distill"};
  std::vector<GradCheckResult> out;
  for (const auto& sel : selectors) {
    GradCheckResult agg;
    agg.name = sel;
    agg.tolerance = sel == "quadratic" ? 1e-8 : tol;
    agg.pass = true;
    for (int r = 0; r < repeats; ++r) {
      GradCheckResult one = gradient_check(
          sel, 1000 + static_cast<std::uint64_t>(r), h, agg.tolerance);
      agg.max_rel_err = std::max(agg.max_rel_err, one.max_rel_err);
      agg.pass = agg.pass && one.pass;
      agg.teacher_grad_zero = agg.teacher_grad_zero && one.teacher_grad_zero;
    }
    out.push_back(agg);
  }
  return out;
}

}  // namespace train
}  // namespace acdis
