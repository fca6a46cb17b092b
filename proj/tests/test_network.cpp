#include <cmath>

#include "acdis/losses.hpp"
#include "acdis/network.hpp"
#include "acdis/volume.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace acdis;
using namespace acdis::net;
using acdis::testing::random_tensor;

namespace {

ModelConfig toy_config(int base = 8, int depth = 2) {
  ModelConfig cfg;
  cfg.base_channels = base;
  cfg.encoder_depth = depth;
  cfg.afeb_heads = 2;
  return cfg;
}

Tensor random_volume(std::int64_t size, Rng& rng, std::int64_t batch = 1) {
  return acdis::testing::random_tensor({batch, kNumModalities, size, size,
                                        size},
                                       rng, 0.05, 1.0);
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("stage shape arithmetic") {
    // depth 2, C=8 on a 16^3 single-channel input: (1,8,8^3), (1,16,4^3)
    ModelConfig cfg = toy_config(8, 2);
    nn::ParamStore ps;
    Rng rng(1);
    Encoder enc("enc_t", 1, cfg);
    enc.register_params(ps, rng);
    nn::Ctx ctx(ps, false);
    Tensor x = random_tensor({1, 1, 16, 16, 16}, rng);
    auto stages = enc(ctx, ad::constant(x));
    REQUIRE(stages.size() == 2);
    CHECK(stages[0]->value.shape() ==
          std::vector<std::int64_t>{1, 8, 8, 8, 8});
    CHECK(stages[1]->value.shape() ==
          std::vector<std::int64_t>{1, 16, 4, 4, 4});
  }

  TEST_CASE("shape closure over the config grid") {
    Rng rng(2);
    for (int base : {4, 8}) {
      for (int depth : {1, 2}) {
        for (std::int64_t size : {8, 16}) {
          ModelConfig cfg = toy_config(base, depth);
          nn::ParamStore ps;
          Rng init(3);
          Encoder enc("enc_g", 1, cfg);
          enc.register_params(ps, init);
          nn::Ctx ctx(ps, false);
          Tensor x = random_tensor({1, 1, size, size, size}, rng);
          auto stages = enc(ctx, ad::constant(x));
          REQUIRE(static_cast<int>(stages.size()) == depth);
          for (int s = 1; s <= depth; ++s) {
            const auto& sh = stages[static_cast<size_t>(s - 1)]->value.shape();
            CHECK(sh[1] == cfg.stage_channels(s));
            CHECK(sh[2] == size >> s);
          }
        }
      }
    }
  }

  TEST_CASE("zero input produces finite deterministic outputs") {
    ModelConfig cfg = toy_config(4, 2);
    nn::ParamStore ps;
    Rng init(4);
    Encoder enc("enc_z", 1, cfg);
    enc.register_params(ps, init);
    nn::Ctx ctx(ps, false);
    Tensor x = Tensor::zeros({1, 1, 8, 8, 8});
    auto s1 = enc(ctx, ad::constant(x));
    CHECK(s1.back()->value.all_finite());
    nn::Ctx ctx2(ps, false);
    auto s2 = enc(ctx2, ad::constant(x));
    for (std::int64_t i = 0; i < s1.back()->value.size(); ++i) {
      CHECK(s1.back()->value[i] == s2.back()->value[i]);
    }
  }

  TEST_CASE("wrong channel count raises shape error") {
    ModelConfig cfg = toy_config(4, 1);
    nn::ParamStore ps;
    Rng init(5);
    Encoder enc("enc_c", 1, cfg);
    enc.register_params(ps, init);
    nn::Ctx ctx(ps, false);
    Tensor x = Tensor::zeros({1, 2, 8, 8, 8});
    CHECK_THROWS_AS(enc(ctx, ad::constant(x)), ShapeError);
  }
}

TEST_SUITE("afeb") {
  TEST_CASE("output shape equals input shape") {
    nn::ParamStore ps;
    Rng init(6);
    Afeb afeb("afeb_t", 8, 2, false);
    afeb.register_params(ps, init);
    nn::Ctx ctx(ps, false);
    Rng rng(7);
    Tensor x = random_tensor({2, 8, 4, 4, 4}, rng);
    ad::Var y = afeb(ctx, ad::constant(x));
    CHECK(y->value.shape() == x.shape());
  }

  TEST_CASE("attention rows sum to one") {
    nn::ParamStore ps;
    Rng init(1);
    Afeb afeb("afeb_s", 8, 2, false);
    afeb.register_params(ps, init);
    nn::Ctx ctx(ps, false);
    Rng rng(1);
    Tensor x = random_tensor({1, 8, 4, 4, 4}, rng);
    AfebTrace trace;
    afeb(ctx, ad::constant(x), &trace);
    REQUIRE(trace.attention_probs != nullptr);
    const auto& s = trace.attention_probs->value.shape();
    REQUIRE(s.size() == 3);
    CHECK(s[0] == 2);   // batch * heads
    CHECK(s[1] == 64);  // tokens
    for (std::int64_t r = 0; r < s[0] * s[1]; ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < s[2]; ++c) {
        acc += trace.attention_probs->value[r * s[2] + c];
      }
      CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("single token with identity value/out maps is a channel map") {
    const int c = 4;
    nn::ParamStore ps;
    Rng init(8);
    Afeb afeb("afeb_i", c, 1, false);
    afeb.register_params(ps, init);
    // Force V and O to identity and their biases to zero: with one token
    // the softmax is 1, so the attention branch returns the embedded token.
    for (const char* wname : {"afeb_i.wv.weight", "afeb_i.wo.weight"}) {
      Tensor& w = ps.get(wname);
      w.fill(0.0);
      for (int i = 0; i < c; ++i) w[i * c + i] = 1.0;
    }
    ps.get("afeb_i.wv.bias").fill(0.0);
    ps.get("afeb_i.wo.bias").fill(0.0);
    nn::Ctx ctx(ps, false);
    Rng rng(9);
    Tensor x = random_tensor({1, c, 1, 1, 1}, rng);
    // Compare the attention branch against the embedding alone by zeroing
    // the local branch and making the fusion map the identity.
    ps.get("afeb_i.local.weight").fill(0.0);
    ps.get("afeb_i.local.bias").fill(0.0);
    Tensor& fw = ps.get("afeb_i.fuse.weight");
    fw.fill(0.0);
    for (int i = 0; i < c; ++i) fw[i * c + i] = 1.0;
    ps.get("afeb_i.fuse.bias").fill(0.0);
    nn::Ctx ctx2(ps, false);
    ad::Var y = afeb(ctx2, ad::constant(x));
    // Embedding output for comparison.
    ad::Var e = ad::conv3d(ad::constant(x), ctx2.param("afeb_i.embed.weight"),
                           ctx2.param("afeb_i.embed.bias"), 1, 0);
    for (std::int64_t i = 0; i < y->value.size(); ++i) {
      CHECK(y->value[i] == doctest::Approx(e->value[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("pooled-token variant keeps the output shape") {
    nn::ParamStore ps;
    Rng init(10);
    Afeb afeb("afeb_p", 8, 2, true);
    afeb.register_params(ps, init);
    nn::Ctx ctx(ps, false);
    Rng rng(11);
    Tensor x = random_tensor({1, 8, 8, 8, 8}, rng);
    ad::Var y = afeb(ctx, ad::constant(x));
    CHECK(y->value.shape() == x.shape());
  }
}

TEST_SUITE("mfsb") {
  TEST_CASE("gap on constant input gives the per-channel value") {
    Rng rng(12);
    Tensor x({1, 3, 2, 2, 2});
    for (int c = 0; c < 3; ++c) {
      for (int v = 0; v < 8; ++v) x[c * 8 + v] = 0.5 + c;
    }
    ad::Var g = ad::spatial_mean(ad::constant(x));
    CHECK(g->value.shape() == std::vector<std::int64_t>{1, 3, 1, 1, 1});
    for (int c = 0; c < 3; ++c) {
      CHECK(g->value[c] == doctest::Approx(0.5 + c).epsilon(1e-14));
    }
  }

  TEST_CASE("alpha and beta live in (0,1); f_comp substitution is exact") {
    const int c = 8;
    nn::ParamStore ps;
    Rng init(13);
    Mfsb mfsb("mfsb_t", c);
    mfsb.register_params(ps, init);
    Rng rng(14);
    std::array<ad::Var, kNumModalities> feats;
    for (int m = 0; m < kNumModalities; ++m) {
      feats[static_cast<size_t>(m)] =
          ad::constant(random_tensor({1, c, 4, 4, 4}, rng));
    }
    for (const auto& mask : enumerate_masks()) {
      // Zero-fill the unavailable features, as the pipeline does.
      std::array<ad::Var, kNumModalities> in = feats;
      for (int m = 0; m < kNumModalities; ++m) {
        if (!mask.available[static_cast<size_t>(m)]) {
          in[static_cast<size_t>(m)] = ad::constant(
              Tensor::zeros(feats[static_cast<size_t>(m)]->value.shape()));
        }
      }
      nn::Ctx ctx(ps, false);
      Mfsb::Output out = mfsb(ctx, in, mask);
      CHECK(out.f_comp->value.dim(1) == 4 * c);
      for (int m = 0; m < kNumModalities; ++m) {
        const auto& a = out.alpha[static_cast<size_t>(m)]->value;
        const auto& b = out.beta[static_cast<size_t>(m)]->value;
        for (std::int64_t i = 0; i < a.size(); ++i) {
          CHECK(a[i] > 0.0);
          CHECK(a[i] < 1.0);
          CHECK(b[i] > 0.0);
          CHECK(b[i] < 1.0);
        }
        // Available channels of f_comp are bit-equal to the true features.
        const std::int64_t vox = 4 * 4 * 4;
        for (std::int64_t i = 0; i < c * vox; ++i) {
          const double got = out.f_comp->value[m * c * vox + i];
          const double want =
              mask.available[static_cast<size_t>(m)]
                  ? in[static_cast<size_t>(m)]->value[i]
                  : out.synth[static_cast<size_t>(m)]->value[i];
          CHECK(got == want);
        }
      }
    }
  }

  TEST_CASE("full mask keeps every true feature, no synthesized entries") {
    const int c = 4;
    nn::ParamStore ps;
    Rng init(15);
    Mfsb mfsb("mfsb_f", c);
    mfsb.register_params(ps, init);
    Rng rng(16);
    std::array<ad::Var, kNumModalities> feats;
    for (int m = 0; m < kNumModalities; ++m) {
      feats[static_cast<size_t>(m)] =
          ad::constant(random_tensor({1, c, 2, 2, 2}, rng));
    }
    nn::Ctx ctx(ps, false);
    Mfsb::Output out = mfsb(ctx, feats, ModalityMask::all_available());
    const std::int64_t vox = 8;
    for (int m = 0; m < kNumModalities; ++m) {
      for (std::int64_t i = 0; i < c * vox; ++i) {
        CHECK(out.f_comp->value[m * c * vox + i] ==
              feats[static_cast<size_t>(m)]->value[i]);
      }
    }
  }

  TEST_CASE("saturation probe: large negative style bias collapses the "
            "affine") {
    const int c = 4;
    nn::ParamStore ps;
    Rng init(17);
    Mfsb mfsb("mfsb_s", c);
    mfsb.register_params(ps, init);
    for (int m = 0; m < kNumModalities; ++m) {
      const std::string mn = std::string("mfsb_s.") + kModalityNames[m];
      ps.get(mn + ".scale.weight").fill(0.0);
      ps.get(mn + ".scale.bias").fill(-20.0);
      ps.get(mn + ".shift.weight").fill(0.0);
      ps.get(mn + ".shift.bias").fill(-20.0);
    }
    Rng rng(18);
    std::array<ad::Var, kNumModalities> feats;
    for (int m = 0; m < kNumModalities; ++m) {
      feats[static_cast<size_t>(m)] =
          ad::constant(random_tensor({1, c, 2, 2, 2}, rng, 0.0, 1.0));
    }
    ModalityMask mask;
    mask.available = {true, true, true, false};
    nn::Ctx ctx(ps, false);
    Mfsb::Output out = mfsb(ctx, feats, mask);
    // f_hat should collapse to f_cha; recover f_cha from the graph by
    // inverting the affine with alpha=beta=sigmoid(-20).
    const double eps_gate = 1.0 / (1.0 + std::exp(20.0));
    for (int m = 0; m < kNumModalities; ++m) {
      const auto& synth = out.synth[static_cast<size_t>(m)]->value;
      const auto& alpha = out.alpha[static_cast<size_t>(m)]->value;
      for (std::int64_t i = 0; i < synth.size(); ++i) {
        CHECK(alpha[i] == doctest::Approx(eps_gate).epsilon(1e-9));
        const double f_cha = (synth[i] - eps_gate) / (1.0 + eps_gate);
        const double err = std::abs(synth[i] - f_cha);
        CHECK(err < 1e-8 * (1.0 + std::abs(f_cha)) + 5e-9);
      }
    }
  }

  TEST_CASE("all-missing mask raises protocol error") {
    const int c = 4;
    nn::ParamStore ps;
    Rng init(19);
    Mfsb mfsb("mfsb_e", c);
    mfsb.register_params(ps, init);
    std::array<ad::Var, kNumModalities> feats;
    for (int m = 0; m < kNumModalities; ++m) {
      feats[static_cast<size_t>(m)] =
          ad::constant(Tensor::zeros({1, c, 2, 2, 2}));
    }
    ModalityMask none;
    none.available = {false, false, false, false};
    nn::Ctx ctx(ps, false);
    CHECK_THROWS_AS(mfsb(ctx, feats, none), ProtocolError);
  }
}

TEST_SUITE("model") {
  TEST_CASE("training forward returns six heads with full-volume logits") {
    ModelConfig cfg = toy_config(4, 2);
    AcdisModel model(cfg, 99);
    Rng rng(20);
    Tensor vol = random_volume(8, rng);
    nn::Ctx ctx(model.params(), true);
    ForwardResult fwd = model.forward_full(
        ctx, vol, ModalityMask::all_available(), Phase::kTraining);
    REQUIRE(fwd.heads.size() == 6);
    for (const auto& h : fwd.heads) {
      CHECK(h->value.shape() ==
            std::vector<std::int64_t>{1, 4, 8, 8, 8});
      CHECK(h->value.all_finite());
    }
    CHECK(fwd.acct_pairs.size() == 4);  // bottleneck only, four modalities
    CHECK(fwd.f_comp->value.dim(1) == 4 * cfg.bottleneck_channels());
  }

  TEST_CASE("inference returns exactly one head") {
    ModelConfig cfg = toy_config(4, 2);
    AcdisModel model(cfg, 100);
    Rng rng(21);
    Tensor vol = random_volume(8, rng);
    ModalityMask m;
    m.available = {true, false, false, true};
    nn::Ctx ctx(model.params(), false);
    ForwardResult fwd = model.forward_full(ctx, vol, m, Phase::kInference);
    CHECK(fwd.heads.size() == 1);
    CHECK(fwd.heads[0]->value.shape() ==
          std::vector<std::int64_t>{1, 4, 8, 8, 8});
  }

  TEST_CASE("inference with full mask equals the training fusion head") {
    ModelConfig cfg = toy_config(4, 2);
    AcdisModel model(cfg, 101);
    Rng rng(22);
    Tensor vol = random_volume(8, rng);
    nn::Ctx train_ctx(model.params(), true);
    ForwardResult t = model.forward_full(
        train_ctx, vol, ModalityMask::all_available(), Phase::kTraining);
    nn::Ctx infer_ctx(model.params(), false);
    ForwardResult i = model.forward_full(
        infer_ctx, vol, ModalityMask::all_available(), Phase::kInference);
    REQUIRE(t.heads.size() == 6);
    REQUIRE(i.heads.size() == 1);
    const Tensor& fusion = t.heads[5]->value;
    const Tensor& infer = i.heads[0]->value;
    REQUIRE(fusion.same_shape(infer));
    for (std::int64_t k = 0; k < fusion.size(); ++k) {
      CHECK(fusion[k] == infer[k]);
    }
  }

  TEST_CASE("training with an all-zero modality is a protocol error") {
    ModelConfig cfg = toy_config(4, 1);
    AcdisModel model(cfg, 102);
    Rng rng(23);
    Tensor vol = random_volume(8, rng);
    // Zero out T1ce entirely (mimics a masked teacher input).
    const std::int64_t vox = 8 * 8 * 8;
    for (std::int64_t i = 0; i < vox; ++i) vol[vox + i] = 0.0;
    nn::Ctx ctx(model.params(), true);
    CHECK_THROWS_AS(model.forward_full(ctx, vol,
                                       ModalityMask::all_available(),
                                       Phase::kTraining),
                    ProtocolError);
  }

  TEST_CASE("teacher isolation: distillation terms send no gradient to the "
            "auxiliary encoder") {
    ModelConfig cfg = toy_config(4, 1);
    AcdisModel model(cfg, 103);
    Rng rng(24);
    Tensor vol = random_volume(8, rng);
    nn::Ctx ctx(model.params(), true);
    ForwardResult fwd = model.forward_full(
        ctx, vol, ModalityMask::all_available(), Phase::kTraining);
    // L_ACCT + L_Syn only; no segmentation heads.
    ad::Var total;
    for (const auto& pr : fwd.acct_pairs) {
      losses::AcctLoss part =
          losses::acct_loss(pr.student, pr.teacher, cfg.window);
      total = total ? ad::add(total, part.total) : part.total;
    }
    for (int m = 0; m < kNumModalities; ++m) {
      total = ad::add(total,
                      losses::synthesis_loss(
                          fwd.synth[static_cast<size_t>(m)],
                          fwd.synth_targets[static_cast<size_t>(m)]));
    }
    ad::backward(total);
    int aux_params = 0;
    for (const auto& name : model.params().names()) {
      if (name.rfind("enc_aux.", 0) == 0 || name.rfind("d_aux.", 0) == 0) {
        ++aux_params;
        const Tensor g = ctx.grad_of(name);
        for (std::int64_t i = 0; i < g.size(); ++i) {
          CHECK(g[i] == 0.0);
        }
      }
    }
    CHECK(aux_params > 0);
    // The student path does receive gradient.
    double mono_norm = 0.0;
    for (const auto& name : model.params().names()) {
      if (name.rfind("enc_flair.", 0) == 0 ||
          name.rfind("afeb_flair.", 0) == 0) {
        const Tensor g = ctx.grad_of(name);
        for (std::int64_t i = 0; i < g.size(); ++i) mono_norm += g[i] * g[i];
      }
    }
    CHECK(mono_norm > 0.0);
  }

  TEST_CASE("finite differences agree with backprop through the whole "
            "objective") {
    ModelConfig cfg = toy_config(4, 1);
    cfg.window.window = 2;
    AcdisModel model(cfg, 104);
    Rng rng(25);
    Tensor vol = random_volume(8, rng);
    Tensor label({1, 8, 8, 8});
    for (std::int64_t i = 0; i < label.size(); ++i) {
      label[i] = static_cast<double>(rng.uniform_int(4));
    }
    ModalityMask mask;
    mask.available = {true, true, false, true};

    // Freeze the distillation targets at their base values: the loss
    // treats them as constants (stop-gradient), so finite differences
    // must too, otherwise perturbing teacher-path parameters measures
    // exactly the derivative the contract removes.
    std::vector<Tensor> frozen_teachers;
    std::array<Tensor, kNumModalities> frozen_syn_targets;
    {
      nn::Ctx base_ctx(model.params(), false);
      ForwardResult base =
          model.forward_full(base_ctx, vol, mask, Phase::kTraining);
      for (const auto& pr : base.acct_pairs) {
        frozen_teachers.push_back(pr.teacher);
      }
      frozen_syn_targets = base.synth_targets;
    }

    auto overall = [&](nn::Ctx& ctx) {
      ForwardResult fwd =
          model.forward_full(ctx, vol, mask, Phase::kTraining);
      ad::Var total;
      for (size_t i = 0; i < fwd.acct_pairs.size(); ++i) {
        losses::AcctLoss part = losses::acct_loss(
            fwd.acct_pairs[i].student, frozen_teachers[i], cfg.window);
        total = total ? ad::add(total, part.total) : part.total;
      }
      total = ad::mul_scalar(total, 0.25);
      losses::SegmentationLoss seg =
          losses::segmentation_loss(fwd.heads, label, cfg.class_count);
      total = ad::add(total, seg.total);
      ad::Var syn;
      for (int m = 0; m < kNumModalities; ++m) {
        ad::Var term = losses::synthesis_loss(
            fwd.synth[static_cast<size_t>(m)],
            frozen_syn_targets[static_cast<size_t>(m)]);
        syn = syn ? ad::add(syn, term) : term;
      }
      return ad::add(total, ad::mul_scalar(syn, 0.25));
    };

    nn::Ctx ctx(model.params(), true);
    ad::Var loss = overall(ctx);
    ad::backward(loss);

    // Probe a handful of parameters in every block family.
    const std::vector<std::string> names = {
        "enc_flair.stage1.down.conv.weight",
        "enc_aux.stage1.conv.conv.weight",
        "afeb_t1ce.stage1.wq.weight",
        "afeb_t2.stage1.local.weight",
        "mfsb.squeeze.weight",
        "mfsb.t1.scale.weight",
        "d_aux.full.conv.weight",
        "d_fuse.head.weight",
        "d_fuse.full.norm.gain",
    };
    Rng pick(26);
    const double h = 1e-4;
    for (const auto& name : names) {
      Tensor& p = model.params().get(name);
      const Tensor g = ctx.grad_of(name);
      for (int probe = 0; probe < 3; ++probe) {
        const std::int64_t idx = static_cast<std::int64_t>(
            pick.uniform_int(static_cast<std::uint64_t>(p.size())));
        const double keep = p[idx];
        p[idx] = keep + h;
        nn::Ctx cp(model.params(), false);
        const double fp = overall(cp)->value.item();
        p[idx] = keep - h;
        nn::Ctx cm(model.params(), false);
        const double fm = overall(cm)->value.item();
        p[idx] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(g[idx]), std::abs(fd), 1e-6});
        CHECK(std::abs(g[idx] - fd) / denom < 1e-3);
      }
    }
  }

  TEST_CASE("zero features decode to finite logits") {
    ModelConfig cfg = toy_config(4, 2);
    nn::ParamStore ps;
    Rng init(60);
    Decoder dec("dz", 2, cfg.bottleneck_channels(), {cfg.stage_channels(1)},
                {cfg.stage_channels(1)}, cfg.base_channels, cfg.class_count);
    dec.register_params(ps, init);
    nn::Ctx ctx(ps, false);
    ad::Var bottleneck = ad::constant(Tensor::zeros({1, 8, 2, 2, 2}));
    ad::Var skip = ad::constant(Tensor::zeros({1, 4, 4, 4, 4}));
    ad::Var logits = dec(ctx, bottleneck, {skip});
    CHECK(logits->value.shape() == std::vector<std::int64_t>{1, 4, 8, 8, 8});
    CHECK(logits->value.all_finite());
  }

  TEST_CASE("head shapes close over the config grid") {
    Rng rng(61);
    for (int base : {4, 8}) {
      for (int depth : {1, 2}) {
        for (std::int64_t size : {8, 16}) {
          ModelConfig cfg = toy_config(base, depth);
          cfg.window.window = 2;
          AcdisModel model(cfg, 7000 + base + depth);
          Tensor vol = random_volume(size, rng);
          nn::Ctx ctx(model.params(), false);
          ForwardResult fwd = model.forward_full(
              ctx, vol, ModalityMask::all_available(), Phase::kTraining);
          REQUIRE(fwd.heads.size() == 6);
          for (const auto& h : fwd.heads) {
            CHECK(h->value.shape() ==
                  std::vector<std::int64_t>{1, 4, size, size, size});
          }
        }
      }
    }
  }

  TEST_CASE("shared auxiliary decoder: one parameter set serves all mono "
            "heads") {
    ModelConfig cfg = toy_config(4, 2);
    AcdisModel model(cfg, 105);
    int d_aux_count = 0;
    for (const auto& name : model.params().names()) {
      if (name.rfind("d_aux.", 0) == 0) ++d_aux_count;
    }
    // One decoder's worth of parameters, not four.
    Rng tmp(0);
    nn::ParamStore solo;
    Decoder ref("d_aux", 2, cfg.bottleneck_channels(),
                {cfg.stage_channels(1)}, {cfg.stage_channels(1)},
                cfg.base_channels, cfg.class_count);
    ref.register_params(solo, tmp);
    CHECK(d_aux_count == static_cast<int>(solo.names().size()));
  }

  TEST_CASE("config validation") {
    ModelConfig bad = toy_config(3, 1);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = toy_config(8, 0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = toy_config(8, 2);
    bad.stage_set = {3};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.stage_set = {1, 2};
    CHECK_NOTHROW(bad.validate());
  }

  TEST_CASE("multi-stage distillation produces one pair per stage and "
            "modality") {
    ModelConfig cfg = toy_config(4, 2);
    cfg.stage_set = {1, 2};
    AcdisModel model(cfg, 106);
    Rng rng(27);
    Tensor vol = random_volume(8, rng);
    nn::Ctx ctx(model.params(), true);
    ForwardResult fwd = model.forward_full(
        ctx, vol, ModalityMask::all_available(), Phase::kTraining);
    CHECK(fwd.acct_pairs.size() == 8);
    // Teacher/student stage dims agree pairwise.
    for (const auto& pr : fwd.acct_pairs) {
      CHECK(pr.student->value.same_shape(pr.teacher));
    }
  }
}
