#ifndef ACDIS_NETWORK_HPP_
#define ACDIS_NETWORK_HPP_

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "acdis/losses.hpp"
#include "acdis/nn.hpp"
#include "acdis/volume.hpp"

namespace acdis {
namespace net {

struct ModelConfig {
  int base_channels = 8;   // first-stage width; doubles per stage
  int encoder_depth = 2;   // number of stride-2 stages
  int class_count = 4;
  int afeb_heads = 2;
  // 1-based encoder stages where the distillation constraint applies;
  // empty means bottleneck only.
  std::vector<int> stage_set;
  losses::WindowConfig window;

  void validate() const;
  int stage_channels(int stage) const;  // stage in [1, encoder_depth]
  int bottleneck_channels() const { return stage_channels(encoder_depth); }
  std::vector<int> resolved_stage_set() const;
};

// U-Net style encoder: each stage halves the spatial extents and doubles
// the channels (stride-2 conv followed by a refining conv).
struct Encoder {
  std::string name;
  int in_channels = 1;
  int depth = 1;
  std::vector<nn::ConvBlock> down;
  std::vector<nn::ConvBlock> refine;

  Encoder() = default;
  Encoder(std::string n, int in_c, const ModelConfig& cfg);
  void register_params(nn::ParamStore& ps, Rng& rng) const;
  // Returns one feature map per stage, shallowest first.
  std::vector<ad::Var> operator()(nn::Ctx& ctx, const ad::Var& x) const;
};

struct AfebTrace {
  ad::Var attention_probs;  // (B*heads, T, T), rows sum to 1
};

// Anatomical feature enhancement: channel embedding, then a global
// self-attention branch in parallel with a local 3x3x3 convolution,
// fused by sum and a final channel map.
struct Afeb {
  std::string name;
  int channels = 0;
  int heads = 1;
  bool pool_tokens = false;  // 2x token pooling at shallower stages
  nn::Conv3d embed, local, fuse;
  nn::Linear wq, wk, wv, wo;

  Afeb() = default;
  Afeb(std::string n, int channels_, int heads_, bool pool_tokens_);
  void register_params(nn::ParamStore& ps, Rng& rng) const;
  ad::Var operator()(nn::Ctx& ctx, const ad::Var& x,
                     AfebTrace* trace = nullptr) const;
};

// Modality feature synthesis: channel prior from pooled statistics,
// channel squeeze, then per-modality learned affine styles.
struct Mfsb {
  std::string name;
  int channels = 0;  // per-modality channels C at the operating stage
  nn::Conv3d prior;    // 4C -> 4C on pooled features
  nn::Conv3d squeeze;  // 4C -> C
  std::array<nn::Conv3d, kNumModalities> style_scale;  // C -> C
  std::array<nn::Conv3d, kNumModalities> style_shift;  // C -> C

  struct Output {
    ad::Var f_comp;                                // (B, 4C, D, H, W)
    std::array<ad::Var, kNumModalities> synth;     // all four f_hat
    ad::Var channel_prior;                         // (B, 4C, 1, 1, 1)
    std::array<ad::Var, kNumModalities> alpha, beta;
  };

  Mfsb() = default;
  Mfsb(std::string n, int channels_);
  void register_params(nn::ParamStore& ps, Rng& rng) const;
  Output operator()(nn::Ctx& ctx,
                    const std::array<ad::Var, kNumModalities>& features,
                    const ModalityMask& mask) const;
};

// U-Net style decoder: upsample, concatenate skip, convolve; a final
// full-resolution block and a 1x1x1 classification head.
struct Decoder {
  std::string name;
  int depth = 1;
  int bottleneck_ch = 0;
  std::vector<int> skip_ch;    // per stage 1..depth-1
  std::vector<int> level_out;  // output channels per fused level
  int full_res_ch = 0;
  int classes = 4;
  std::vector<nn::ConvBlock> level_blocks;
  nn::ConvBlock full_block;
  nn::Conv3d head;

  Decoder() = default;
  Decoder(std::string n, int depth_, int bottleneck_ch_,
          std::vector<int> skip_ch_, std::vector<int> level_out_,
          int full_res_ch_, int classes_);
  void register_params(nn::ParamStore& ps, Rng& rng) const;
  // skips[i] pairs with stage i+1; may be empty when depth == 1.
  ad::Var operator()(nn::Ctx& ctx, const ad::Var& bottleneck,
                     const std::vector<ad::Var>& skips) const;
};

enum class Phase { kTraining, kInference };

struct AcctPair {
  ad::Var student;   // enhanced mono-modal stage feature
  Tensor teacher;    // auxiliary encoder stage feature, value only
  int stage = 0;
  int modality = 0;
};

struct ForwardResult {
  // Training: [FLAIR, T1ce, T1, T2, teacher, fusion]; inference: [fusion].
  std::vector<ad::Var> heads;
  std::vector<AcctPair> acct_pairs;
  std::array<ad::Var, kNumModalities> synth{};
  std::array<Tensor, kNumModalities> synth_targets{};
  ad::Var f_comp;
};

class AcdisModel {
 public:
  AcdisModel(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  // vol is (B, 4, D, H, W). Training requires the complete volume: the
  // mask only controls which enhanced features reach the synthesis block
  // and the fusion skips. Inference runs encoders for available
  // modalities only and returns the fusion head alone.
  ForwardResult forward_full(nn::Ctx& ctx, const Tensor& vol,
                             const ModalityMask& mask, Phase phase,
                             AfebTrace* trace = nullptr) const;

  const Afeb& afeb(int modality, int stage) const;
  const Decoder& aux_decoder() const { return d_aux_; }
  const Decoder& fuse_decoder() const { return d_fuse_; }
  const Mfsb& mfsb() const { return mfsb_; }

 private:
  std::vector<ad::Var> encode_modality(nn::Ctx& ctx, const Tensor& vol,
                                       int modality) const;
  void check_input(const Tensor& vol) const;

  ModelConfig cfg_;
  nn::ParamStore store_;
  std::array<Encoder, kNumModalities> mono_enc_;
  Encoder aux_enc_;
  // afeb_[m] indexed by position in resolved stage set (bottleneck last).
  std::array<std::vector<Afeb>, kNumModalities> afeb_;
  std::vector<int> afeb_stages_;
  Mfsb mfsb_;
  Decoder d_aux_;
  Decoder d_fuse_;
};

}  // namespace net
}  // namespace acdis

#endif  // ACDIS_NETWORK_HPP_
