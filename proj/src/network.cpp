#include "acdis/network.hpp"

#include <algorithm>
#include <cmath>

namespace acdis {
namespace net {

void ModelConfig::validate() const {
  if (base_channels < 4) {
    throw ConfigError("model: base_channels must be >= 4");
  }
  if (afeb_heads < 1 || base_channels % afeb_heads != 0) {
    throw ConfigError("model: base_channels must be divisible by afeb_heads");
  }
  if (encoder_depth < 1) throw ConfigError("model: encoder_depth must be >= 1");
  if (class_count < 2 || class_count > 16) {
    throw ConfigError("model: class_count out of range");
  }
  for (int s : stage_set) {
    if (s < 1 || s > encoder_depth) {
      throw ConfigError("model: stage_set entry " + std::to_string(s) +
                        " outside [1, encoder_depth]");
    }
  }
  window.validate();
}

int ModelConfig::stage_channels(int stage) const {
  return base_channels << (stage - 1);
}

std::vector<int> ModelConfig::resolved_stage_set() const {
  if (stage_set.empty()) return {encoder_depth};
  std::vector<int> s = stage_set;
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  return s;
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(std::string n, int in_c, const ModelConfig& cfg)
    : name(std::move(n)), in_channels(in_c), depth(cfg.encoder_depth) {
  int prev = in_c;
  for (int s = 1; s <= depth; ++s) {
    const int ch = cfg.stage_channels(s);
    const std::string stage = name + ".stage" + std::to_string(s);
    down.emplace_back(stage + ".down", prev, ch, 3, 2, 1);
    refine.emplace_back(stage + ".conv", ch, ch, 3, 1, 1);
    prev = ch;
  }
}

void Encoder::register_params(nn::ParamStore& ps, Rng& rng) const {
  for (int s = 0; s < depth; ++s) {
    down[static_cast<size_t>(s)].register_params(ps, rng);
    refine[static_cast<size_t>(s)].register_params(ps, rng);
  }
}

std::vector<ad::Var> Encoder::operator()(nn::Ctx& ctx,
                                         const ad::Var& x) const {
  if (x->value.ndim() != 5 || x->value.dim(1) != in_channels) {
    throw ShapeError("encoder '" + name + "': expected " +
                     std::to_string(in_channels) + "-channel input, got " +
                     x->value.shape_str());
  }
  std::vector<ad::Var> stages;
  ad::Var cur = x;
  for (int s = 0; s < depth; ++s) {
    cur = down[static_cast<size_t>(s)](ctx, cur);
    cur = refine[static_cast<size_t>(s)](ctx, cur);
    stages.push_back(cur);
  }
  return stages;
}

// ---------------------------------------------------------------------------
// AFEB
// ---------------------------------------------------------------------------

Afeb::Afeb(std::string n, int channels_, int heads_, bool pool_tokens_)
    : name(std::move(n)), channels(channels_), heads(heads_),
      pool_tokens(pool_tokens_),
      embed(name + ".embed", channels_, channels_, 1, 1, 0),
      local(name + ".local", channels_, channels_, 3, 1, 1),
      fuse(name + ".fuse", channels_, channels_, 1, 1, 0),
      wq(name + ".wq", channels_, channels_),
      wk(name + ".wk", channels_, channels_),
      wv(name + ".wv", channels_, channels_),
      wo(name + ".wo", channels_, channels_) {
  if (channels_ % heads_ != 0) {
    throw ConfigError("afeb: channels must be divisible by heads");
  }
}

void Afeb::register_params(nn::ParamStore& ps, Rng& rng) const {
  embed.register_params(ps, rng);
  local.register_params(ps, rng);
  fuse.register_params(ps, rng);
  wq.register_params(ps, rng);
  wk.register_params(ps, rng);
  wv.register_params(ps, rng);
  wo.register_params(ps, rng);
}

ad::Var Afeb::operator()(nn::Ctx& ctx, const ad::Var& x,
                         AfebTrace* trace) const {
  using namespace ad;
  if (x->value.ndim() != 5 || x->value.dim(1) != channels) {
    throw ShapeError("afeb '" + name + "': channel mismatch, got " +
                     x->value.shape_str());
  }
  Var e = embed(ctx, x);

  // Global branch: multi-head self-attention over flattened spatial tokens.
  Var tokens_src = pool_tokens ? avg_pool2(e) : e;
  const auto& es = tokens_src->value.shape();
  const std::int64_t b = es[0];
  const std::int64_t t = es[2] * es[3] * es[4];
  const std::int64_t hd = channels / heads;
  Var seq = permute(reshape(tokens_src, {b, channels, t}), {0, 2, 1});
  auto split_heads = [&](const Var& v) {
    // (B,T,C) -> (B*heads, T, hd)
    Var r = reshape(v, {b, t, heads, hd});
    r = permute(r, {0, 2, 1, 3});
    return reshape(r, {b * heads, t, hd});
  };
  Var q = split_heads(wq(ctx, seq));
  Var k = split_heads(wk(ctx, seq));
  Var v = split_heads(wv(ctx, seq));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Var scores = mul_scalar(bmm(q, permute(k, {0, 2, 1})), scale);
  Var probs = softmax_lastdim(scores);
  if (trace != nullptr) trace->attention_probs = probs;
  Var attended = bmm(probs, v);  // (B*heads, T, hd)
  Var merged = reshape(attended, {b, heads, t, hd});
  merged = permute(merged, {0, 2, 1, 3});
  merged = reshape(merged, {b, t, channels});
  Var global_out = permute(wo(ctx, merged), {0, 2, 1});
  global_out = reshape(global_out, {b, channels, es[2], es[3], es[4]});
  if (pool_tokens) global_out = upsample_nearest2(global_out);

  Var local_out = local(ctx, e);
  return fuse(ctx, add(global_out, local_out));
}

// ---------------------------------------------------------------------------
// MFSB
// ---------------------------------------------------------------------------

Mfsb::Mfsb(std::string n, int channels_)
    : name(std::move(n)), channels(channels_),
      prior(name + ".prior", 4 * channels_, 4 * channels_, 1, 1, 0),
      squeeze(name + ".squeeze", 4 * channels_, channels_, 1, 1, 0) {
  for (int m = 0; m < kNumModalities; ++m) {
    const std::string mn = name + "." + kModalityNames[m];
    style_scale[static_cast<size_t>(m)] =
        nn::Conv3d(mn + ".scale", channels_, channels_, 1, 1, 0);
    style_shift[static_cast<size_t>(m)] =
        nn::Conv3d(mn + ".shift", channels_, channels_, 1, 1, 0);
  }
}

void Mfsb::register_params(nn::ParamStore& ps, Rng& rng) const {
  prior.register_params(ps, rng);
  squeeze.register_params(ps, rng);
  for (int m = 0; m < kNumModalities; ++m) {
    style_scale[static_cast<size_t>(m)].register_params(ps, rng);
    style_shift[static_cast<size_t>(m)].register_params(ps, rng);
  }
}

Mfsb::Output Mfsb::operator()(
    nn::Ctx& ctx, const std::array<ad::Var, kNumModalities>& features,
    const ModalityMask& mask) const {
  using namespace ad;
  if (!mask.any()) {
    throw ProtocolError("mfsb: at least one modality must be available");
  }
  for (const auto& f : features) {
    if (f->value.ndim() != 5 || f->value.dim(1) != channels ||
        !f->value.same_shape(features[0]->value)) {
      throw ShapeError("mfsb: features must share shape (B," +
                       std::to_string(channels) + ",D,H,W)");
    }
  }

  Output out;
  std::vector<Var> parts(features.begin(), features.end());
  Var f_ava = concat_channels(parts);
  Var pooled = spatial_mean(f_ava);  // GAP
  out.channel_prior = sigmoid(prior(ctx, pooled));
  Var amplified = mul(f_ava, out.channel_prior);
  Var f_cha = squeeze(ctx, amplified);
  for (int m = 0; m < kNumModalities; ++m) {
    Var alpha = sigmoid(style_scale[static_cast<size_t>(m)](ctx, f_cha));
    Var beta = sigmoid(style_shift[static_cast<size_t>(m)](ctx, f_cha));
    out.alpha[static_cast<size_t>(m)] = alpha;
    out.beta[static_cast<size_t>(m)] = beta;
    out.synth[static_cast<size_t>(m)] =
        add(mul(add_scalar(alpha, 1.0), f_cha), beta);
  }
  std::vector<Var> comp_parts;
  for (int m = 0; m < kNumModalities; ++m) {
    comp_parts.push_back(mask.available[static_cast<size_t>(m)]
                             ? features[static_cast<size_t>(m)]
                             : out.synth[static_cast<size_t>(m)]);
  }
  out.f_comp = concat_channels(comp_parts);
  return out;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Decoder::Decoder(std::string n, int depth_, int bottleneck_ch_,
                 std::vector<int> skip_ch_, std::vector<int> level_out_,
                 int full_res_ch_, int classes_)
    : name(std::move(n)), depth(depth_), bottleneck_ch(bottleneck_ch_),
      skip_ch(std::move(skip_ch_)), level_out(std::move(level_out_)),
      full_res_ch(full_res_ch_), classes(classes_) {
  if (static_cast<int>(skip_ch.size()) != depth - 1 ||
      skip_ch.size() != level_out.size()) {
    throw ConfigError("decoder '" + name + "': skip/level arity mismatch");
  }
  int cur = bottleneck_ch;
  for (int lvl = depth - 1; lvl >= 1; --lvl) {
    const int in_c = cur + skip_ch[static_cast<size_t>(lvl - 1)];
    const int out_c = level_out[static_cast<size_t>(lvl - 1)];
    level_blocks.emplace_back(name + ".up" + std::to_string(lvl), in_c, out_c,
                              3, 1, 1);
    cur = out_c;
  }
  full_block = nn::ConvBlock(name + ".full", cur, full_res_ch, 3, 1, 1);
  head = nn::Conv3d(name + ".head", full_res_ch, classes, 1, 1, 0);
}

void Decoder::register_params(nn::ParamStore& ps, Rng& rng) const {
  for (const auto& b : level_blocks) b.register_params(ps, rng);
  full_block.register_params(ps, rng);
  head.register_params(ps, rng);
}

ad::Var Decoder::operator()(nn::Ctx& ctx, const ad::Var& bottleneck,
                            const std::vector<ad::Var>& skips) const {
  using namespace ad;
  if (static_cast<int>(skips.size()) != depth - 1) {
    throw ShapeError("decoder '" + name + "': expected " +
                     std::to_string(depth - 1) + " skip inputs");
  }
  Var cur = bottleneck;
  size_t block = 0;
  for (int lvl = depth - 1; lvl >= 1; --lvl, ++block) {
    cur = upsample_nearest2(cur);
    cur = concat_channels({cur, skips[static_cast<size_t>(lvl - 1)]});
    cur = level_blocks[block](ctx, cur);
  }
  cur = upsample_nearest2(cur);
  cur = full_block(ctx, cur);
  return head(ctx, cur);
}

// ---------------------------------------------------------------------------
// AcdisModel
// ---------------------------------------------------------------------------

AcdisModel::AcdisModel(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  for (int m = 0; m < kNumModalities; ++m) {
    mono_enc_[static_cast<size_t>(m)] =
        Encoder(std::string("enc_") + kModalityNames[m], 1, cfg_);
  }
  aux_enc_ = Encoder("enc_aux", kNumModalities, cfg_);

  afeb_stages_ = cfg_.resolved_stage_set();
  if (std::find(afeb_stages_.begin(), afeb_stages_.end(),
                cfg_.encoder_depth) == afeb_stages_.end()) {
    afeb_stages_.push_back(cfg_.encoder_depth);  // MFSB needs the bottleneck
  }
  for (int m = 0; m < kNumModalities; ++m) {
    for (int s : afeb_stages_) {
      afeb_[static_cast<size_t>(m)].emplace_back(
          std::string("afeb_") + kModalityNames[m] + ".stage" +
              std::to_string(s),
          cfg_.stage_channels(s), cfg_.afeb_heads, s != cfg_.encoder_depth);
    }
  }
  mfsb_ = Mfsb("mfsb", cfg_.bottleneck_channels());

  const int depth = cfg_.encoder_depth;
  std::vector<int> aux_skips, aux_out, fuse_skips, fuse_out;
  for (int s = 1; s <= depth - 1; ++s) {
    aux_skips.push_back(cfg_.stage_channels(s));
    aux_out.push_back(cfg_.stage_channels(s));
    fuse_skips.push_back(kNumModalities * cfg_.stage_channels(s));
    fuse_out.push_back(2 * cfg_.stage_channels(s));
  }
  d_aux_ = Decoder("d_aux", depth, cfg_.bottleneck_channels(), aux_skips,
                   aux_out, cfg_.base_channels, cfg_.class_count);
  d_fuse_ = Decoder("d_fuse", depth,
                    kNumModalities * cfg_.bottleneck_channels(), fuse_skips,
                    fuse_out, 2 * cfg_.base_channels, cfg_.class_count);

  for (int m = 0; m < kNumModalities; ++m) {
    mono_enc_[static_cast<size_t>(m)].register_params(store_, rng);
  }
  aux_enc_.register_params(store_, rng);
  for (int m = 0; m < kNumModalities; ++m) {
    for (const auto& a : afeb_[static_cast<size_t>(m)]) {
      a.register_params(store_, rng);
    }
  }
  mfsb_.register_params(store_, rng);
  d_aux_.register_params(store_, rng);
  d_fuse_.register_params(store_, rng);
}

const Afeb& AcdisModel::afeb(int modality, int stage) const {
  for (size_t i = 0; i < afeb_stages_.size(); ++i) {
    if (afeb_stages_[i] == stage) {
      return afeb_[static_cast<size_t>(modality)][i];
    }
  }
  throw ConfigError("afeb: stage " + std::to_string(stage) +
                    " has no enhancement block");
}

void AcdisModel::check_input(const Tensor& vol) const {
  if (vol.ndim() != 5 || vol.dim(1) != kNumModalities) {
    throw ShapeError("model: input must be (B,4,D,H,W), got " +
                     vol.shape_str());
  }
  const std::int64_t div = std::int64_t{1} << cfg_.encoder_depth;
  for (int a = 2; a < 5; ++a) {
    if (vol.dim(a) % div != 0 || vol.dim(a) < div) {
      throw ShapeError("model: spatial extents must be divisible by " +
                       std::to_string(div));
    }
  }
}

namespace {

Tensor slice_channel(const Tensor& vol, int channel) {
  const auto& s = vol.shape();
  Tensor out({s[0], 1, s[2], s[3], s[4]});
  const std::int64_t vox = s[2] * s[3] * s[4];
  for (std::int64_t b = 0; b < s[0]; ++b) {
    const double* src = vol.data() + (b * s[1] + channel) * vox;
    std::copy(src, src + vox, out.data() + b * vox);
  }
  return out;
}

bool channel_all_zero(const Tensor& vol, int channel) {
  const auto& s = vol.shape();
  const std::int64_t vox = s[2] * s[3] * s[4];
  for (std::int64_t b = 0; b < s[0]; ++b) {
    const double* src = vol.data() + (b * s[1] + channel) * vox;
    for (std::int64_t i = 0; i < vox; ++i) {
      if (src[i] != 0.0) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<ad::Var> AcdisModel::encode_modality(nn::Ctx& ctx,
                                                 const Tensor& vol,
                                                 int modality) const {
  return mono_enc_[static_cast<size_t>(modality)](
      ctx, ad::constant(slice_channel(vol, modality)));
}

ForwardResult AcdisModel::forward_full(nn::Ctx& ctx, const Tensor& vol,
                                       const ModalityMask& mask, Phase phase,
                                       AfebTrace* trace) const {
  check_input(vol);
  if (!vol.all_finite()) throw ValueError("model: non-finite input");
  if (!mask.any()) {
    throw ProtocolError("model: mask must keep at least one modality");
  }
  const int depth = cfg_.encoder_depth;
  ForwardResult out;

  if (phase == Phase::kTraining) {
    for (int m = 0; m < kNumModalities; ++m) {
      if (channel_all_zero(vol, m)) {
        throw ProtocolError(
            std::string("model: training requires the complete volume; '") +
            kModalityNames[m] + "' channel is all zero");
      }
    }

    std::array<std::vector<ad::Var>, kNumModalities> enc;
    for (int m = 0; m < kNumModalities; ++m) {
      enc[static_cast<size_t>(m)] = encode_modality(ctx, vol, m);
    }
    std::vector<ad::Var> aux = aux_enc_(ctx, ad::constant(vol));

    // Enhanced features per (modality, configured stage); the auxiliary
    // stage features pair with them as fixed targets.
    std::array<ad::Var, kNumModalities> bottleneck_enh;
    for (int m = 0; m < kNumModalities; ++m) {
      for (size_t si = 0; si < afeb_stages_.size(); ++si) {
        const int stage = afeb_stages_[si];
        AfebTrace* tr =
            (trace != nullptr && m == 0 && stage == depth) ? trace : nullptr;
        ad::Var enhanced = afeb_[static_cast<size_t>(m)][si](
            ctx, enc[static_cast<size_t>(m)][static_cast<size_t>(stage - 1)],
            tr);
        if (stage == depth) bottleneck_enh[static_cast<size_t>(m)] = enhanced;
        const auto& acct_stages = cfg_.resolved_stage_set();
        if (std::find(acct_stages.begin(), acct_stages.end(), stage) !=
            acct_stages.end()) {
          out.acct_pairs.push_back(
              {enhanced, aux[static_cast<size_t>(stage - 1)]->value, stage,
               m});
        }
      }
    }

    // Synthesis inputs: enhanced features, zero-filled where masked.
    std::array<ad::Var, kNumModalities> mfsb_in;
    for (int m = 0; m < kNumModalities; ++m) {
      mfsb_in[static_cast<size_t>(m)] =
          mask.available[static_cast<size_t>(m)]
              ? bottleneck_enh[static_cast<size_t>(m)]
              : ad::constant(Tensor::zeros(
                    bottleneck_enh[static_cast<size_t>(m)]->value.shape()));
      out.synth_targets[static_cast<size_t>(m)] =
          bottleneck_enh[static_cast<size_t>(m)]->value;
    }
    Mfsb::Output mo = mfsb_(ctx, mfsb_in, mask);
    out.synth = mo.synth;
    out.f_comp = mo.f_comp;

    // Heads: four mono (shared decoder), teacher, fusion.
    for (int m = 0; m < kNumModalities; ++m) {
      std::vector<ad::Var> skips(
          enc[static_cast<size_t>(m)].begin(),
          enc[static_cast<size_t>(m)].begin() + (depth - 1));
      out.heads.push_back(
          d_aux_(ctx, enc[static_cast<size_t>(m)].back(), skips));
    }
    {
      std::vector<ad::Var> skips(aux.begin(), aux.begin() + (depth - 1));
      out.heads.push_back(d_aux_(ctx, aux.back(), skips));
    }
    {
      std::vector<ad::Var> fuse_skips;
      for (int s = 1; s <= depth - 1; ++s) {
        std::vector<ad::Var> parts;
        for (int m = 0; m < kNumModalities; ++m) {
          ad::Var stage_feat =
              enc[static_cast<size_t>(m)][static_cast<size_t>(s - 1)];
          parts.push_back(mask.available[static_cast<size_t>(m)]
                              ? stage_feat
                              : ad::constant(Tensor::zeros(
                                    stage_feat->value.shape())));
        }
        fuse_skips.push_back(ad::concat_channels(parts));
      }
      out.heads.push_back(d_fuse_(ctx, mo.f_comp, fuse_skips));
    }
    return out;
  }

  // Inference: encoders run for available modalities only; missing
  // features are zero-filled before synthesis.
  std::array<std::vector<ad::Var>, kNumModalities> enc;
  std::array<ad::Var, kNumModalities> mfsb_in;
  for (int m = 0; m < kNumModalities; ++m) {
    if (!mask.available[static_cast<size_t>(m)]) continue;
    enc[static_cast<size_t>(m)] = encode_modality(ctx, vol, m);
    for (size_t si = 0; si < afeb_stages_.size(); ++si) {
      if (afeb_stages_[si] != depth) continue;
      AfebTrace* tr = (trace != nullptr && m == 0) ? trace : nullptr;
      mfsb_in[static_cast<size_t>(m)] = afeb_[static_cast<size_t>(m)][si](
          ctx, enc[static_cast<size_t>(m)].back(), tr);
    }
  }
  // Shapes of the missing features from config arithmetic.
  const std::int64_t bsz = vol.dim(0);
  std::vector<std::int64_t> bot_shape{
      bsz, cfg_.bottleneck_channels(), vol.dim(2) >> depth,
      vol.dim(3) >> depth, vol.dim(4) >> depth};
  for (int m = 0; m < kNumModalities; ++m) {
    if (!mask.available[static_cast<size_t>(m)]) {
      mfsb_in[static_cast<size_t>(m)] =
          ad::constant(Tensor::zeros(bot_shape));
    }
  }
  Mfsb::Output mo = mfsb_(ctx, mfsb_in, mask);
  out.synth = mo.synth;
  out.f_comp = mo.f_comp;
  std::vector<ad::Var> fuse_skips;
  for (int s = 1; s <= depth - 1; ++s) {
    std::vector<ad::Var> parts;
    std::vector<std::int64_t> stage_shape{
        bsz, cfg_.stage_channels(s), vol.dim(2) >> s, vol.dim(3) >> s,
        vol.dim(4) >> s};
    for (int m = 0; m < kNumModalities; ++m) {
      parts.push_back(
          mask.available[static_cast<size_t>(m)]
              ? enc[static_cast<size_t>(m)][static_cast<size_t>(s - 1)]
              : ad::constant(Tensor::zeros(stage_shape)));
    }
    fuse_skips.push_back(ad::concat_channels(parts));
  }
  out.heads.push_back(d_fuse_(ctx, mo.f_comp, fuse_skips));
  return out;
}

}  // namespace net
}  // namespace acdis
