// Acceptance suite: runs every contract criterion end to end and prints one
// PASS/FAIL line per criterion. Exit code = number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "acdis/evaluation.hpp"
#include "acdis/losses.hpp"
#include "acdis/network.hpp"
#include "acdis/training.hpp"
#include "acdis/volume.hpp"

using namespace acdis;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int id;
  std::string name;
  std::function<bool(std::string&)> run;
};

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng, double lo,
                     double hi) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

fs::path work_dir() {
  fs::path p = fs::temp_directory_path() / "acdis_acceptance";
  return p;
}

// The toy profile: 16^3 crops, C=8, depth 2, synthesis deferred to epoch 5.
train::TrainConfig toy_profile() {
  train::TrainConfig cfg;
  cfg.model.base_channels = 8;
  cfg.model.encoder_depth = 2;
  cfg.model.afeb_heads = 2;
  cfg.model.window.window = 4;
  cfg.epochs = 30;
  cfg.batch_size = 1;
  cfg.steps_per_epoch = 8;
  cfg.lr = 2e-3;
  cfg.weight_decay = 1e-4;
  cfg.syn_start_epoch = 5;
  cfg.crop = 16;
  cfg.seed = 20240601;
  cfg.augment.flip_prob = 0.0;
  cfg.augment.rot90_prob = 0.0;
  cfg.augment.intensity_scale = 0.0;
  cfg.augment.intensity_shift = 0.0;
  return cfg;
}

Dataset toy_phantoms(int n, std::int64_t size) {
  Dataset ds;
  for (int i = 0; i < n; ++i) {
    PhantomSpec spec;
    spec.size = size;
    spec.num_lesions = i == 0 ? 1 : 2;
    spec.seed = 9000 + static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d", i);
    ds.case_ids.push_back(name);
    ds.cases.push_back(generate_phantom(spec));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// 1. gradient suite
// ---------------------------------------------------------------------------
bool criterion_gradients(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> selectors = {"var", "covar", "syn", "dice",
                                              "wce"};
  double worst = 0.0;
  std::string worst_name;
  bool ok = true;
  for (const auto& sel : selectors) {
    for (int rep = 0; rep < 20; ++rep) {
      const train::GradCheckResult r = train::gradient_check(
          sel, 1000 + static_cast<std::uint64_t>(rep), 1e-3, 1e-4);
      if (r.max_rel_err > worst) {
        worst = r.max_rel_err;
        worst_name = sel;
      }
      ok = ok && r.pass && r.teacher_grad_zero;
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::ostringstream os;
  os << "max rel err " << worst << " (" << worst_name << "), " << secs
     << " s";
  detail = os.str();
  return ok && secs < 120.0;
}

// ---------------------------------------------------------------------------
// 2. loss identities
// ---------------------------------------------------------------------------
bool criterion_identities(std::string& detail) {
  losses::WindowConfig cfg;
  Rng rng(71);
  bool ok = true;

  for (int trial = 0; trial < 10; ++trial) {
    Tensor f = random_tensor({1, 2, 4, 4, 4}, rng, -2.0, 2.0);
    losses::AcctLoss l = losses::acct_loss(ad::constant(f), f, cfg);
    ok = ok && std::abs(l.variance->value.item()) < 1e-9;
    ok = ok && std::abs(l.covariance->value.item()) < 1e-9;
    ok = ok && std::abs(l.total->value.item()) < 1e-9;
  }

  Tensor ca = Tensor::full({1, 1, 4, 4, 4}, 0.3);
  Tensor cb = Tensor::full({1, 1, 4, 4, 4}, -1.7);
  ok = ok && std::abs(losses::variance_loss_value(ca, cb, cfg)) < 1e-9;

  losses::WindowConfig raw = cfg;
  raw.normalize = false;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor f = random_tensor({1, 2, 4, 4, 4}, rng, -2.0, 2.0);
    Tensor g = random_tensor({1, 2, 4, 4, 4}, rng, -2.0, 2.0);
    Tensor ng(g.shape());
    for (std::int64_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
    if (losses::covariance_loss_value(f, g, raw) !=
        losses::covariance_loss_value(f, ng, raw)) {
      ok = false;
    }
  }

  double lo = 1e300, hi = -1e300;
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor a = random_tensor({1, 1, 4, 4, 4}, rng, -4.0, 4.0);
    Tensor b = random_tensor({1, 1, 4, 4, 4}, rng, -4.0, 4.0);
    for (double v : {losses::variance_loss_value(a, b, cfg),
                     losses::covariance_loss_value(a, b, cfg)}) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      ok = ok && v >= 0.0 && v <= 1.0 + 1e-6;
    }
  }
  std::ostringstream os;
  os << "range observed [" << lo << ", " << hi << "]";
  detail = os.str();
  return ok;
}

// ---------------------------------------------------------------------------
// 3. oracle equivalence
// ---------------------------------------------------------------------------
bool criterion_oracles(std::string& detail) {
  bool ok = true;
  Rng rng(72);
  losses::WindowConfig cfg;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_tensor({1, 1, 4, 4, 4}, rng, -2.0, 2.0);
    Tensor b = random_tensor({1, 1, 4, 4, 4}, rng, -2.0, 2.0);
    losses::WindowStats st = losses::window_stats(a, &b, cfg);
    // Double-loop brute force.
    double ma = 0.0, mb = 0.0;
    for (std::int64_t i = 0; i < 64; ++i) {
      ma += a[i];
      mb += b[i];
    }
    ma /= 64.0;
    mb /= 64.0;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::int64_t i = 0; i < 64; ++i) {
      sxx += (a[i] - ma) * (a[i] - ma);
      syy += (b[i] - mb) * (b[i] - mb);
      sxy += (a[i] - ma) * (b[i] - mb);
    }
    const double var_a = sxx / 63.0, var_b = syy / 63.0, cov = sxy / 63.0;
    auto rel = [](double x, double y) {
      return std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-12});
    };
    worst = std::max({worst, rel(st.var_a[0], var_a), rel(st.var_b[0], var_b),
                      rel(st.covar[0], cov)});

    // Pearson identity in the small-eps limit with raw values.
    losses::WindowConfig tiny = cfg;
    tiny.normalize = false;
    tiny.eps = 1e-15;
    const double corr = cov / std::sqrt(var_a * var_b);
    const double covar_loss = losses::covariance_loss_value(a, b, tiny);
    worst = std::max(worst, std::abs(covar_loss - (1.0 - std::abs(corr))));
  }
  ok = ok && worst < 1e-6;

  // Dice set-count oracle.
  Rng drng(73);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::uint8_t> a(128), b(128);
    for (size_t i = 0; i < a.size(); ++i) {
      a[i] = drng.uniform() < 0.25 ? 1 : 0;
      b[i] = drng.uniform() < 0.25 ? 1 : 0;
    }
    std::int64_t inter = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      na += a[i];
      nb += b[i];
      inter += (a[i] && b[i]) ? 1 : 0;
    }
    const double expect = (na + nb) == 0
                              ? 1.0
                              : 2.0 * static_cast<double>(inter) /
                                    static_cast<double>(na + nb);
    if (eval::dice(a, b) != expect) ok = false;
  }
  {
    std::vector<std::uint8_t> empty(16, 0);
    if (eval::dice(empty, empty) != 1.0) ok = false;
    std::vector<std::uint8_t> pred = {1, 1, 0, 0, 0, 0};
    std::vector<std::uint8_t> gt = {1, 1, 1, 1, 0, 0};
    if (std::abs(eval::dice(pred, gt) - 2.0 / 3.0) > 1e-15) ok = false;
  }
  std::ostringstream os;
  os << "max window-stat deviation " << worst;
  detail = os.str();
  return ok;
}

// ---------------------------------------------------------------------------
// 4. MFSB contract
// ---------------------------------------------------------------------------
bool criterion_mfsb(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const int c = 8;
  nn::ParamStore ps;
  Rng init(74);
  net::Mfsb mfsb("mfsb", c);
  mfsb.register_params(ps, init);
  Rng rng(75);
  std::array<ad::Var, kNumModalities> feats;
  for (int m = 0; m < kNumModalities; ++m) {
    feats[static_cast<size_t>(m)] =
        ad::constant(random_tensor({1, c, 4, 4, 4}, rng, -1.0, 1.0));
  }
  bool ok = true;
  const std::int64_t vox = 64;
  for (const auto& mask : enumerate_masks()) {
    std::array<ad::Var, kNumModalities> in = feats;
    for (int m = 0; m < kNumModalities; ++m) {
      if (!mask.available[static_cast<size_t>(m)]) {
        in[static_cast<size_t>(m)] =
            ad::constant(Tensor::zeros({1, c, 4, 4, 4}));
      }
    }
    nn::Ctx ctx(ps, false);
    net::Mfsb::Output out = mfsb(ctx, in, mask);
    // GAP collapses spatial extents to 1.
    ok = ok && out.channel_prior->value.dim(2) == 1 &&
         out.channel_prior->value.dim(3) == 1 &&
         out.channel_prior->value.dim(4) == 1;
    for (int m = 0; m < kNumModalities; ++m) {
      const auto& alpha = out.alpha[static_cast<size_t>(m)]->value;
      const auto& beta = out.beta[static_cast<size_t>(m)]->value;
      for (std::int64_t i = 0; i < alpha.size(); ++i) {
        ok = ok && alpha[i] > 0.0 && alpha[i] < 1.0 && beta[i] > 0.0 &&
             beta[i] < 1.0;
      }
      for (std::int64_t i = 0; i < c * vox; ++i) {
        const double got = out.f_comp->value[m * c * vox + i];
        const double want = mask.available[static_cast<size_t>(m)]
                                ? in[static_cast<size_t>(m)]->value[i]
                                : out.synth[static_cast<size_t>(m)]->value[i];
        if (got != want) ok = false;
      }
    }
    if (mask.count() == 4) {
      for (int m = 0; m < kNumModalities; ++m) {
        for (std::int64_t i = 0; i < c * vox; ++i) {
          if (out.f_comp->value[m * c * vox + i] !=
              feats[static_cast<size_t>(m)]->value[i]) {
            ok = false;
          }
        }
      }
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::ostringstream os;
  os << "15 masks checked in " << secs << " s";
  detail = os.str();
  return ok && secs < 60.0;
}

// ---------------------------------------------------------------------------
// 5. schedule contract
// ---------------------------------------------------------------------------
bool criterion_schedule(std::string& detail) {
  train::TrainConfig cfg;
  cfg.model.base_channels = 4;
  cfg.model.encoder_depth = 1;
  cfg.model.afeb_heads = 2;
  cfg.model.window.window = 2;
  cfg.epochs = 6;
  cfg.steps_per_epoch = 2;
  cfg.lr = 1e-3;
  cfg.syn_start_epoch = 5;
  cfg.crop = 8;
  cfg.seed = 31;
  cfg.augment.flip_prob = 0.0;
  cfg.augment.rot90_prob = 0.0;
  cfg.augment.intensity_scale = 0.0;
  cfg.augment.intensity_shift = 0.0;

  const fs::path dir = work_dir() / "schedule";
  fs::remove_all(dir);
  train::Trainer trainer(cfg);
  Dataset ds = toy_phantoms(2, 8);
  trainer.train(ds, dir.string());

  std::ifstream log((dir / "train_log.jsonl").string());
  if (!log) {
    detail = "missing train_log.jsonl";
    return false;
  }
  bool ok = true;
  int checked = 0;
  std::string line;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    const losses::LossReport r = losses::LossReport::from_json_line(line);
    ++checked;
    if (r.epoch < 5) {
      ok = ok && !r.active_syn && r.l_overall == r.l_acct + r.l_seg;
    } else {
      ok = ok && r.active_syn &&
           r.l_overall == (r.l_acct + r.l_seg) + r.l_syn;
    }
    ok = ok && r.l_acct == r.l_var + r.l_covar;
  }
  std::ostringstream os;
  os << checked << " logged steps checked";
  detail = os.str();
  return ok && checked == 12;
}

// ---------------------------------------------------------------------------
// 6. end-to-end smoke
// ---------------------------------------------------------------------------
bool criterion_smoke(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = work_dir() / "smoke";
  fs::remove_all(dir);
  fs::create_directories(dir);

  train::TrainConfig cfg = toy_profile();
  Dataset ds = toy_phantoms(3, 16);
  train::Trainer trainer(cfg);
  trainer.train(ds, (dir / "run").string());

  eval::EvalReport rep = eval::evaluate_all_masks(trainer.model(), ds, 1);
  eval::render_report(rep, (dir / "eval").string(), "acceptance smoke");

  // Table layout: 15 columns x 3 rows with exact AVG.
  const std::string csv =
      read_text_file((dir / "eval" / "dice_table.csv").string());
  eval::DiceTable table = eval::dice_table_from_csv(csv);
  bool ok = true;
  for (int r = 0; r < 3; ++r) {
    double acc = 0.0;
    for (int c = 0; c < eval::kNumEvalMasks; ++c) {
      acc += table.cells[static_cast<size_t>(r)][static_cast<size_t>(c)];
    }
    ok = ok && std::abs(table.avg[static_cast<size_t>(r)] - acc / 15.0) <
                   1e-12;
  }

  const auto masks = enumerate_masks();
  int full_idx = -1, flair_idx = -1;
  for (int i = 0; i < static_cast<int>(masks.size()); ++i) {
    if (masks[static_cast<size_t>(i)].bits() == "1111") full_idx = i;
    if (masks[static_cast<size_t>(i)].bits() == "1000") flair_idx = i;
  }
  const double wt_full = table.cells[0][static_cast<size_t>(full_idx)];
  const double wt_flair = table.cells[0][static_cast<size_t>(flair_idx)];
  ok = ok && wt_full > 0.95 && wt_flair > 0.6;

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::ostringstream os;
  os << "WT full " << wt_full << ", WT FLAIR-only " << wt_flair << ", "
     << secs << " s";
  detail = os.str();
  return ok && secs < 1200.0;
}

// ---------------------------------------------------------------------------
// 7. determinism and resume
// ---------------------------------------------------------------------------
bool criterion_determinism(std::string& detail) {
  train::TrainConfig cfg;
  cfg.model.base_channels = 4;
  cfg.model.encoder_depth = 1;
  cfg.model.afeb_heads = 2;
  cfg.model.window.window = 2;
  cfg.epochs = 4;
  cfg.steps_per_epoch = 2;
  cfg.lr = 1e-3;
  cfg.syn_start_epoch = 2;
  cfg.crop = 8;
  cfg.seed = 77;
  cfg.augment.flip_prob = 0.5;  // exercise the augment stream too
  cfg.augment.rot90_prob = 0.5;
  cfg.augment.intensity_scale = 0.05;
  cfg.augment.intensity_shift = 0.02;

  Dataset ds = toy_phantoms(2, 8);
  const fs::path d1 = work_dir() / "det1";
  const fs::path d2 = work_dir() / "det2";
  const fs::path d3 = work_dir() / "det3";
  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(d3);

  train::Trainer a(cfg);
  a.train(ds, d1.string());
  train::Trainer b(cfg);
  b.train(ds, d2.string());
  bool ok = a.param_hash() == b.param_hash();

  // Resume from the epoch-2 checkpoint and require a bitwise-equal tail.
  train::Trainer resumed = train::Trainer::load_checkpoint(
      (d1 / "ckpt_epoch_0002.bin").string());
  resumed.train(ds, d3.string());
  ok = ok && resumed.param_hash() == a.param_hash();

  auto read_lines = [](const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) lines.push_back(line);
    }
    return lines;
  };
  const auto full_log = read_lines(d1 / "train_log.jsonl");
  const auto tail_log = read_lines(d3 / "train_log.jsonl");
  ok = ok && full_log.size() == 8 && tail_log.size() == 4;
  for (size_t i = 0; ok && i < tail_log.size(); ++i) {
    if (full_log[4 + i] != tail_log[i]) ok = false;  // bitwise JSON equality
  }
  std::ostringstream os;
  os << "param hash " << a.param_hash();
  detail = os.str();
  return ok;
}

// ---------------------------------------------------------------------------
// 8. six-head contract
// ---------------------------------------------------------------------------
bool criterion_heads(std::string& detail) {
  net::ModelConfig mc;
  mc.base_channels = 4;
  mc.encoder_depth = 2;
  mc.afeb_heads = 2;
  mc.window.window = 2;
  net::AcdisModel model(mc, 4242);
  Rng rng(76);
  Tensor vol = random_tensor({1, kNumModalities, 8, 8, 8}, rng, 0.05, 1.0);

  nn::Ctx tctx(model.params(), true);
  net::ForwardResult t = model.forward_full(
      tctx, vol, ModalityMask::all_available(), net::Phase::kTraining);
  nn::Ctx ictx(model.params(), false);
  net::ForwardResult i = model.forward_full(
      ictx, vol, ModalityMask::all_available(), net::Phase::kInference);
  bool ok = t.heads.size() == 6 && i.heads.size() == 1;
  if (ok) {
    const Tensor& fusion = t.heads[5]->value;
    const Tensor& infer = i.heads[0]->value;
    ok = fusion.same_shape(infer);
    for (std::int64_t k = 0; ok && k < fusion.size(); ++k) {
      if (fusion[k] != infer[k]) ok = false;
    }
  }
  detail = ok ? "6 training heads, 1 inference head, fusion path bitwise "
                "equal"
              : "head contract violated";
  return ok;
}

}  // namespace

int main() {
  std::vector<Criterion> criteria = {
      {1, "gradient suite (FD vs analytic, teacher grads zero)",
       criterion_gradients},
      {2, "loss identities and ranges", criterion_identities},
      {3, "oracle equivalence (window stats, Pearson, Dice counts)",
       criterion_oracles},
      {4, "MFSB substitution contract over all 15 masks", criterion_mfsb},
      {5, "synthesis-loss schedule gating", criterion_schedule},
      {6, "end-to-end overfit smoke with 15-mask evaluation",
       criterion_smoke},
      {7, "determinism and checkpoint resume", criterion_determinism},
      {8, "six-head training / one-head inference contract", criterion_heads},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    std::string detail;
    bool pass = false;
    try {
      pass = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
      pass = false;
    }
    std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", c.id,
                c.name.c_str(), detail.empty() ? "" : " -- ",
                detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
  if (failures == 0) {
    std::printf("all %zu acceptance criteria passed\n", criteria.size());
  } else {
    std::printf("%d acceptance criteria FAILED\n", failures);
  }
  return failures;
}
