#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dosediff/diffusion.hpp"
#include "dosediff/ops.hpp"
#include "dosediff/phantom.hpp"
#include "dosediff/rng.hpp"
#include "dosediff/tensor.hpp"

namespace dosediff::nets {

struct NetConfig {
  int in_channels = 2 + phantom::kOarCount;  // CT + PTV + OAR masks
  std::array<int, 6> widths = {16, 32, 64, 64, 96, 96};
  int groups = 8;
  int temb_dim = 64;  // sinusoidal dimension; the MLP output is twice this
  float norm_eps = 1e-5f;

  int time_dim() const { return 2 * temb_dim; }
  void validate() const;
};

// Ordered named-parameter collection; the unit the checkpoint format stores.
class ParamRegistry {
 public:
  void add(std::string name, const Tensor& t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  const Tensor* find(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// 3x3 conv -> GroupNorm -> Swish.
struct ConvBlock {
  Tensor w, b, gamma, beta;
  int groups = 1;
  float eps = 1e-5f;

  ConvBlock() = default;
  ConvBlock(int c_in, int c_out, const NetConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Two ConvBlocks with a residual skip (1x1 conv when the channel count
// changes) and an optional noise-level projection added between them.
struct ResBlock {
  ConvBlock cb1, cb2;
  Tensor skip_w, skip_b;  // defined iff c_in != c_out
  Tensor temb_w, temb_b;  // defined iff time-conditioned

  ResBlock() = default;
  ResBlock(int c_in, int c_out, int time_dim, const NetConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  Tensor forward(const Tensor& x, const Tensor& temb) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// 3x3 stride-2 conv, channel-preserving.
struct Downsample {
  Tensor w, b;

  Downsample() = default;
  Downsample(int channels, const NetConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Sinusoidal embedding of the continuous noise intensity gamma_t followed by
// a two-layer projection with Swish. Distinct gamma values map to distinct
// embeddings.
struct NoiseLevelEmbedding {
  int emb_dim = 0;
  int out_dim = 0;
  Tensor w1, b1, w2, b2;

  NoiseLevelEmbedding() = default;
  NoiseLevelEmbedding(int emb_dim, int out_dim, Rng& rng);
  static Tensor sinusoidal(const std::vector<float>& gamma, int dim);
  Tensor forward(const std::vector<float>& gamma) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Anatomy feature extractor g: an input convolution emitting the level-0
// feature, then five stages of ResBlock + stride-2 Down (the fifth stage has
// no Down). Emits 6 feature maps at spatial scales /1,/2,/4,/8,/16,/16.
class StructureEncoder {
 public:
  StructureEncoder() = default;
  StructureEncoder(const NetConfig& cfg, Rng& rng);

  std::vector<Tensor> forward(const Tensor& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
  const NetConfig& config() const { return config_; }

 private:
  NetConfig config_;
  Tensor in_w, in_b;
  std::array<ResBlock, 5> res_;
  std::array<Downsample, 4> down_;
};

// Six-level UNet noise predictor f(x_e, y_t, gamma_t). Structure features are
// fused by element-wise addition at levels 0-2 and by cross-attention
// (queries from predictor features) at levels 3-5; the bottleneck carries two
// ResBlocks around a self-attention module; the decoder has four
// nearest-upsample stages plus a final ResBlock stage, with encoder skip
// connections concatenated at each resolution.
class NoisePredictor {
 public:
  NoisePredictor() = default;
  NoisePredictor(const NetConfig& cfg, Rng& rng);

  Tensor forward(const std::vector<Tensor>& features, const Tensor& y_t,
                 const std::vector<float>& gamma) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
  const NetConfig& config() const { return config_; }

 private:
  struct UpStage {
    bool has_up = false;
    Tensor up_w, up_b;  // 1x1 conv after nearest upsampling
    ResBlock rb1, rb2;
  };

  NetConfig config_;
  NoiseLevelEmbedding temb_;
  Tensor in_w, in_b;
  std::array<ResBlock, 5> enc_res_;
  std::array<Downsample, 4> enc_down_;
  std::array<AttentionParams, 3> fuse_attn_;  // fusion at levels 3, 4, 5
  ResBlock mid1_, mid2_;
  AttentionParams mid_attn_;
  std::array<UpStage, 5> dec_;
  Tensor out_w, out_b;
};

// Structure encoder + noise predictor pair driven by the diffusion chain.
class DiffusionModel final : public diffusion::ConditionalModel {
 public:
  DiffusionModel(const NetConfig& cfg, std::uint64_t init_seed);

  std::vector<Tensor> encode(const Tensor& x) const override;
  Tensor predict(const std::vector<Tensor>& features, const Tensor& y_t,
                 const std::vector<float>& gamma) const override;
  std::vector<Tensor> parameters() override;

  StructureEncoder& encoder() { return encoder_; }
  const StructureEncoder& encoder() const { return encoder_; }
  NoisePredictor& predictor() { return predictor_; }
  ParamRegistry named_params() const;
  const NetConfig& config() const { return config_; }

 private:
  NetConfig config_;
  StructureEncoder encoder_;
  NoisePredictor predictor_;
};

// Plain L1-regression UNet over the same ResBlock/Down/Up vocabulary; the
// in-repo comparator for the over-smoothing contrast.
class BaselineUNet {
 public:
  BaselineUNet() = default;
  BaselineUNet(const NetConfig& cfg, std::uint64_t init_seed);

  Tensor forward(const Tensor& x) const;
  std::vector<Tensor> parameters();
  ParamRegistry named_params() const;
  const NetConfig& config() const { return config_; }

 private:
  struct UpStage {
    bool has_up = false;
    Tensor up_w, up_b;
    ResBlock rb1, rb2;
  };

  NetConfig config_;
  Tensor in_w, in_b;
  std::array<ResBlock, 5> enc_res_;
  std::array<Downsample, 4> enc_down_;
  ResBlock mid1_, mid2_;
  std::array<UpStage, 5> dec_;
  Tensor out_w, out_b;
};

struct PretrainConfig {
  NetConfig net;
  int epochs = 80;
  int batch_size = 8;
  float lr = 1e-3f;
  std::uint64_t seed = 1;
  float dose_scale = 2.0f;
};

struct PretrainResult {
  StructureEncoder encoder;
  std::vector<float> epoch_loss;  // mean training L1 per epoch
};

// Pretrains the structure encoder by attaching a lightweight mirror decoder,
// regressing the dose map under mean-absolute-error, and discarding the
// decoder. Zero epochs returns the freshly initialized encoder.
PretrainResult pretrain_structure_encoder(const std::vector<phantom::PhantomCase>& dataset,
                                          const PretrainConfig& cfg);

}  // namespace dosediff::nets
