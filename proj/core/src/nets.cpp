#include "dosediff/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dosediff::nets {

namespace {

int norm_groups(int channels, int preferred) {
  const int g = std::min(channels, preferred);
  DD_CHECK(channels % g == 0, "channel count " + std::to_string(channels) +
                                  " not divisible by group count " + std::to_string(g));
  return g;
}

}  // namespace

void NetConfig::validate() const {
  DD_CHECK(in_channels >= 1, "NetConfig: in_channels must be >= 1");
  for (int w : widths) DD_CHECK(w >= 1, "NetConfig: channel widths must be >= 1");
  DD_CHECK(groups >= 1, "NetConfig: groups must be >= 1");
  DD_CHECK(temb_dim >= 2 && temb_dim % 2 == 0, "NetConfig: temb_dim must be even and >= 2");
  DD_CHECK(norm_eps > 0.0f, "NetConfig: norm_eps must be positive");
  for (int w : widths) norm_groups(w, groups);  // throws on indivisible widths
}

void ParamRegistry::add(std::string name, const Tensor& t) {
  DD_CHECK(t.defined(), "ParamRegistry: undefined tensor for " + name);
  DD_CHECK(find(name) == nullptr, "ParamRegistry: duplicate parameter name " + name);
  items_.emplace_back(std::move(name), t);
}

std::vector<Tensor> ParamRegistry::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) out.push_back(t);
  return out;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

ConvBlock::ConvBlock(int c_in, int c_out, const NetConfig& cfg, Rng& rng)
    : w(init_conv_weight(c_out, c_in, 3, rng)),
      b(Tensor::zeros({c_out})),
      gamma(Tensor::full({c_out}, 1.0f)),
      beta(Tensor::zeros({c_out})),
      groups(norm_groups(c_out, cfg.groups)),
      eps(cfg.norm_eps) {}

Tensor ConvBlock::forward(const Tensor& x) const {
  return swish(group_norm(conv2d(x, w, b, 1, 1), groups, gamma, beta, eps));
}

void ConvBlock::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".w", w);
  reg.add(prefix + ".b", b);
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
}

ResBlock::ResBlock(int c_in, int c_out, int time_dim, const NetConfig& cfg, Rng& rng)
    : cb1(c_in, c_out, cfg, rng), cb2(c_out, c_out, cfg, rng) {
  if (c_in != c_out) {
    skip_w = init_conv_weight(c_out, c_in, 1, rng);
    skip_b = Tensor::zeros({c_out});
  }
  if (time_dim > 0) {
    temb_w = init_linear_weight(c_out, time_dim, rng);
    temb_b = Tensor::zeros({c_out});
  }
}

Tensor ResBlock::forward(const Tensor& x) const {
  DD_CHECK(!temb_w.defined(), "ResBlock: time-conditioned block called without embedding");
  Tensor h = cb2.forward(cb1.forward(x));
  return add(h, skip_w.defined() ? conv2d(x, skip_w, skip_b) : x);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb) const {
  DD_CHECK(temb_w.defined(), "ResBlock: embedding passed to an unconditioned block");
  Tensor h = cb1.forward(x);
  h = add_channel_bias(h, linear(temb, temb_w, temb_b));
  h = cb2.forward(h);
  return add(h, skip_w.defined() ? conv2d(x, skip_w, skip_b) : x);
}

void ResBlock::register_params(ParamRegistry& reg, const std::string& prefix) const {
  cb1.register_params(reg, prefix + ".cb1");
  cb2.register_params(reg, prefix + ".cb2");
  if (skip_w.defined()) {
    reg.add(prefix + ".skip.w", skip_w);
    reg.add(prefix + ".skip.b", skip_b);
  }
  if (temb_w.defined()) {
    reg.add(prefix + ".temb.w", temb_w);
    reg.add(prefix + ".temb.b", temb_b);
  }
}

Downsample::Downsample(int channels, const NetConfig& cfg, Rng& rng)
    : w(init_conv_weight(channels, channels, 3, rng)), b(Tensor::zeros({channels})) {
  (void)cfg;
}

Tensor Downsample::forward(const Tensor& x) const { return conv2d(x, w, b, 2, 1); }

void Downsample::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".w", w);
  reg.add(prefix + ".b", b);
}

NoiseLevelEmbedding::NoiseLevelEmbedding(int emb_dim_in, int out_dim_in, Rng& rng)
    : emb_dim(emb_dim_in),
      out_dim(out_dim_in),
      w1(init_linear_weight(out_dim_in, emb_dim_in, rng)),
      b1(Tensor::zeros({out_dim_in})),
      w2(init_linear_weight(out_dim_in, out_dim_in, rng)),
      b2(Tensor::zeros({out_dim_in})) {}

Tensor NoiseLevelEmbedding::sinusoidal(const std::vector<float>& gamma, int dim) {
  DD_CHECK(dim >= 2 && dim % 2 == 0, "sinusoidal embedding dimension must be even");
  const int half = dim / 2;
  const int n = static_cast<int>(gamma.size());
  Tensor out = Tensor::zeros({n, dim});
  float* p = out.mutable_data().data();
  for (int i = 0; i < n; ++i) {
    // gamma lives in (0,1); spread it across the usual positional range.
    const double pos = static_cast<double>(gamma[static_cast<std::size_t>(i)]) * 1000.0;
    for (int j = 0; j < half; ++j) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(j) / std::max(1, half - 1));
      p[static_cast<std::size_t>(i) * dim + j] = static_cast<float>(std::sin(pos * freq));
      p[static_cast<std::size_t>(i) * dim + half + j] =
          static_cast<float>(std::cos(pos * freq));
    }
  }
  return out;
}

Tensor NoiseLevelEmbedding::forward(const std::vector<float>& gamma) const {
  Tensor emb = sinusoidal(gamma, emb_dim);
  return linear(swish(linear(emb, w1, b1)), w2, b2);
}

void NoiseLevelEmbedding::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".w1", w1);
  reg.add(prefix + ".b1", b1);
  reg.add(prefix + ".w2", w2);
  reg.add(prefix + ".b2", b2);
}

StructureEncoder::StructureEncoder(const NetConfig& cfg, Rng& rng) : config_(cfg) {
  cfg.validate();
  const auto& w = cfg.widths;
  in_w = init_conv_weight(w[0], cfg.in_channels, 3, rng);
  in_b = Tensor::zeros({w[0]});
  for (int k = 0; k < 5; ++k) {
    res_[static_cast<std::size_t>(k)] =
        ResBlock(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k + 1)], 0, cfg, rng);
  }
  for (int k = 0; k < 4; ++k) {
    down_[static_cast<std::size_t>(k)] = Downsample(w[static_cast<std::size_t>(k + 1)], cfg, rng);
  }
}

std::vector<Tensor> StructureEncoder::forward(const Tensor& x) const {
  DD_CHECK(x.rank() == 4, "encode_structure: input must be [N,C,H,W]");
  DD_CHECK(x.dim(1) == config_.in_channels,
           "encode_structure: expected " + std::to_string(config_.in_channels) +
               " input channels, got " + std::to_string(x.dim(1)));
  DD_CHECK(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
           "encode_structure: spatial size must be divisible by 16");

  std::vector<Tensor> levels;
  levels.reserve(6);
  Tensor h = conv2d(x, in_w, in_b, 1, 1);
  levels.push_back(h);
  for (int k = 0; k < 4; ++k) {
    h = res_[static_cast<std::size_t>(k)].forward(h);
    h = down_[static_cast<std::size_t>(k)].forward(h);
    levels.push_back(h);
  }
  levels.push_back(res_[4].forward(h));
  return levels;
}

void StructureEncoder::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".in.w", in_w);
  reg.add(prefix + ".in.b", in_b);
  for (int k = 0; k < 5; ++k) {
    res_[static_cast<std::size_t>(k)].register_params(reg,
                                                      prefix + ".stage" + std::to_string(k + 1));
  }
  for (int k = 0; k < 4; ++k) {
    down_[static_cast<std::size_t>(k)].register_params(reg,
                                                       prefix + ".down" + std::to_string(k + 1));
  }
}

NoisePredictor::NoisePredictor(const NetConfig& cfg, Rng& rng) : config_(cfg) {
  cfg.validate();
  const auto& w = cfg.widths;
  const int td = cfg.time_dim();
  temb_ = NoiseLevelEmbedding(cfg.temb_dim, td, rng);
  in_w = init_conv_weight(w[0], 1, 3, rng);
  in_b = Tensor::zeros({w[0]});
  for (int k = 0; k < 5; ++k) {
    enc_res_[static_cast<std::size_t>(k)] =
        ResBlock(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k + 1)], td, cfg, rng);
  }
  for (int k = 0; k < 4; ++k) {
    enc_down_[static_cast<std::size_t>(k)] =
        Downsample(w[static_cast<std::size_t>(k + 1)], cfg, rng);
  }
  for (int k = 0; k < 3; ++k) {
    const int c = w[static_cast<std::size_t>(k + 3)];
    fuse_attn_[static_cast<std::size_t>(k)] = make_attention_params(c, c, rng);
  }
  mid1_ = ResBlock(w[5], w[5], td, cfg, rng);
  mid_attn_ = make_attention_params(w[5], w[5], rng);
  mid2_ = ResBlock(w[5], w[5], td, cfg, rng);

  // Decoder: stages at levels 3,2,1,0 carry an Up block; the last stage
  // refines at full resolution without one.
  const std::array<int, 5> in_ch = {w[5], w[3], w[2], w[1], w[0]};
  const std::array<int, 5> out_ch = {w[3], w[2], w[1], w[0], w[0]};
  const std::array<int, 5> skip_ch = {w[3], w[2], w[1], w[0], 0};
  for (int k = 0; k < 5; ++k) {
    UpStage& st = dec_[static_cast<std::size_t>(k)];
    st.has_up = k < 4;
    if (st.has_up) {
      st.up_w = init_conv_weight(out_ch[static_cast<std::size_t>(k)],
                                 in_ch[static_cast<std::size_t>(k)], 1, rng);
      st.up_b = Tensor::zeros({out_ch[static_cast<std::size_t>(k)]});
    }
    const int rb_in = (st.has_up ? out_ch[static_cast<std::size_t>(k)]
                                 : in_ch[static_cast<std::size_t>(k)]) +
                      skip_ch[static_cast<std::size_t>(k)];
    st.rb1 = ResBlock(rb_in, out_ch[static_cast<std::size_t>(k)], td, cfg, rng);
    st.rb2 = ResBlock(out_ch[static_cast<std::size_t>(k)], out_ch[static_cast<std::size_t>(k)],
                      td, cfg, rng);
  }

  out_w = init_conv_weight(1, w[0], 3, rng);
  out_b = Tensor::zeros({1});
}

Tensor NoisePredictor::forward(const std::vector<Tensor>& features, const Tensor& y_t,
                               const std::vector<float>& gamma) const {
  DD_CHECK(y_t.rank() == 4 && y_t.dim(1) == 1, "predict_noise: y_t must be [N,1,H,W]");
  DD_CHECK(features.size() == 6, "predict_noise: expected 6 structure feature levels, got " +
                                     std::to_string(features.size()));
  const int n = y_t.dim(0), h = y_t.dim(2), w_sp = y_t.dim(3);
  DD_CHECK(static_cast<int>(gamma.size()) == n,
           "predict_noise: gamma must carry one value per batch element");
  DD_CHECK(h % 16 == 0 && w_sp % 16 == 0,
           "predict_noise: spatial size must be divisible by 16");
  for (int k = 0; k < 6; ++k) {
    const Tensor& f = features[static_cast<std::size_t>(k)];
    const int scale = 1 << std::min(k, 4);
    const Shape expect = {n, config_.widths[static_cast<std::size_t>(k)], h / scale,
                          w_sp / scale};
    DD_CHECK(f.defined() && f.shape() == expect,
             "predict_noise: structure feature level " + std::to_string(k) +
                 " has shape " + shape_str(f.shape()) + ", expected " + shape_str(expect));
  }

  Tensor temb = temb_.forward(gamma);

  std::vector<Tensor> skips;
  skips.reserve(4);
  Tensor head = conv2d(y_t, in_w, in_b, 1, 1);
  head = add(head, features[0]);  // fusion level 0
  skips.push_back(head);

  Tensor x = enc_res_[0].forward(head, temb);
  x = enc_down_[0].forward(x);
  x = add(x, features[1]);  // fusion level 1
  skips.push_back(x);

  x = enc_res_[1].forward(x, temb);
  x = enc_down_[1].forward(x);
  x = add(x, features[2]);  // fusion level 2
  skips.push_back(x);

  x = enc_res_[2].forward(x, temb);
  x = enc_down_[2].forward(x);
  x = attention(x, features[3], fuse_attn_[0]);  // fusion level 3
  skips.push_back(x);

  x = enc_res_[3].forward(x, temb);
  x = enc_down_[3].forward(x);
  x = attention(x, features[4], fuse_attn_[1]);  // fusion level 4

  x = enc_res_[4].forward(x, temb);
  x = attention(x, features[5], fuse_attn_[2]);  // fusion level 5

  x = mid1_.forward(x, temb);
  x = attention(x, x, mid_attn_);  // self-attention bottleneck
  x = mid2_.forward(x, temb);

  for (int k = 0; k < 5; ++k) {
    const UpStage& st = dec_[static_cast<std::size_t>(k)];
    if (st.has_up) {
      x = conv2d(nearest_upsample2x(x), st.up_w, st.up_b);
      x = concat_channels(x, skips[static_cast<std::size_t>(3 - k)]);
    }
    x = st.rb1.forward(x, temb);
    x = st.rb2.forward(x, temb);
  }

  // Plain output head: GroupNorm here would erase the global-offset signal
  // the reverse chain needs to steer the sample mean.
  return conv2d(x, out_w, out_b, 1, 1);
}

void NoisePredictor::register_params(ParamRegistry& reg, const std::string& prefix) const {
  temb_.register_params(reg, prefix + ".temb");
  reg.add(prefix + ".in.w", in_w);
  reg.add(prefix + ".in.b", in_b);
  for (int k = 0; k < 5; ++k) {
    enc_res_[static_cast<std::size_t>(k)].register_params(
        reg, prefix + ".enc" + std::to_string(k + 1));
  }
  for (int k = 0; k < 4; ++k) {
    enc_down_[static_cast<std::size_t>(k)].register_params(
        reg, prefix + ".down" + std::to_string(k + 1));
  }
  auto reg_attn = [&reg](const AttentionParams& a, const std::string& p) {
    reg.add(p + ".wq", a.wq);
    reg.add(p + ".bq", a.bq);
    reg.add(p + ".wk", a.wk);
    reg.add(p + ".bk", a.bk);
    reg.add(p + ".wv", a.wv);
    reg.add(p + ".bv", a.bv);
    reg.add(p + ".wo", a.wo);
    reg.add(p + ".bo", a.bo);
  };
  for (int k = 0; k < 3; ++k) {
    reg_attn(fuse_attn_[static_cast<std::size_t>(k)],
             prefix + ".fuse" + std::to_string(k + 3));
  }
  mid1_.register_params(reg, prefix + ".mid1");
  reg_attn(mid_attn_, prefix + ".mid_attn");
  mid2_.register_params(reg, prefix + ".mid2");
  for (int k = 0; k < 5; ++k) {
    const UpStage& st = dec_[static_cast<std::size_t>(k)];
    const std::string p = prefix + ".dec" + std::to_string(k + 1);
    if (st.has_up) {
      reg.add(p + ".up.w", st.up_w);
      reg.add(p + ".up.b", st.up_b);
    }
    st.rb1.register_params(reg, p + ".rb1");
    st.rb2.register_params(reg, p + ".rb2");
  }
  reg.add(prefix + ".out.w", out_w);
  reg.add(prefix + ".out.b", out_b);
}

DiffusionModel::DiffusionModel(const NetConfig& cfg, std::uint64_t init_seed) : config_(cfg) {
  Rng enc_rng = Rng::stream(init_seed, "init-structure-encoder");
  Rng pred_rng = Rng::stream(init_seed, "init-noise-predictor");
  encoder_ = StructureEncoder(cfg, enc_rng);
  predictor_ = NoisePredictor(cfg, pred_rng);
}

std::vector<Tensor> DiffusionModel::encode(const Tensor& x) const {
  return encoder_.forward(x);
}

Tensor DiffusionModel::predict(const std::vector<Tensor>& features, const Tensor& y_t,
                               const std::vector<float>& gamma) const {
  return predictor_.forward(features, y_t, gamma);
}

ParamRegistry DiffusionModel::named_params() const {
  ParamRegistry reg;
  encoder_.register_params(reg, "g");
  predictor_.register_params(reg, "f");
  return reg;
}

std::vector<Tensor> DiffusionModel::parameters() {
  std::vector<Tensor> out = named_params().tensors();
  for (Tensor& t : out) t.set_requires_grad(true);
  return out;
}

BaselineUNet::BaselineUNet(const NetConfig& cfg, std::uint64_t init_seed) : config_(cfg) {
  cfg.validate();
  Rng rng = Rng::stream(init_seed, "init-baseline-unet");
  const auto& w = cfg.widths;
  in_w = init_conv_weight(w[0], cfg.in_channels, 3, rng);
  in_b = Tensor::zeros({w[0]});
  for (int k = 0; k < 5; ++k) {
    enc_res_[static_cast<std::size_t>(k)] =
        ResBlock(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k + 1)], 0, cfg, rng);
  }
  for (int k = 0; k < 4; ++k) {
    enc_down_[static_cast<std::size_t>(k)] =
        Downsample(w[static_cast<std::size_t>(k + 1)], cfg, rng);
  }
  mid1_ = ResBlock(w[5], w[5], 0, cfg, rng);
  mid2_ = ResBlock(w[5], w[5], 0, cfg, rng);
  const std::array<int, 5> in_ch = {w[5], w[3], w[2], w[1], w[0]};
  const std::array<int, 5> out_ch = {w[3], w[2], w[1], w[0], w[0]};
  const std::array<int, 5> skip_ch = {w[3], w[2], w[1], w[0], 0};
  for (int k = 0; k < 5; ++k) {
    UpStage& st = dec_[static_cast<std::size_t>(k)];
    st.has_up = k < 4;
    if (st.has_up) {
      st.up_w = init_conv_weight(out_ch[static_cast<std::size_t>(k)],
                                 in_ch[static_cast<std::size_t>(k)], 1, rng);
      st.up_b = Tensor::zeros({out_ch[static_cast<std::size_t>(k)]});
    }
    const int rb_in = (st.has_up ? out_ch[static_cast<std::size_t>(k)]
                                 : in_ch[static_cast<std::size_t>(k)]) +
                      skip_ch[static_cast<std::size_t>(k)];
    st.rb1 = ResBlock(rb_in, out_ch[static_cast<std::size_t>(k)], 0, cfg, rng);
    st.rb2 = ResBlock(out_ch[static_cast<std::size_t>(k)], out_ch[static_cast<std::size_t>(k)],
                      0, cfg, rng);
  }
  out_w = init_conv_weight(1, w[0], 3, rng);
  out_b = Tensor::zeros({1});
}

Tensor BaselineUNet::forward(const Tensor& x) const {
  DD_CHECK(x.rank() == 4 && x.dim(1) == config_.in_channels,
           "baseline: input must be [N," + std::to_string(config_.in_channels) + ",H,W]");
  DD_CHECK(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
           "baseline: spatial size must be divisible by 16");

  std::vector<Tensor> skips;
  Tensor h = conv2d(x, in_w, in_b, 1, 1);
  skips.push_back(h);
  for (int k = 0; k < 4; ++k) {
    h = enc_res_[static_cast<std::size_t>(k)].forward(h);
    h = enc_down_[static_cast<std::size_t>(k)].forward(h);
    if (k < 3) skips.push_back(h);
  }
  h = enc_res_[4].forward(h);
  h = mid1_.forward(h);
  h = mid2_.forward(h);
  for (int k = 0; k < 5; ++k) {
    const UpStage& st = dec_[static_cast<std::size_t>(k)];
    if (st.has_up) {
      h = conv2d(nearest_upsample2x(h), st.up_w, st.up_b);
      h = concat_channels(h, skips[static_cast<std::size_t>(3 - k)]);
    }
    h = st.rb1.forward(h);
    h = st.rb2.forward(h);
  }
  return conv2d(h, out_w, out_b, 1, 1);
}

ParamRegistry BaselineUNet::named_params() const {
  ParamRegistry reg;
  reg.add("b.in.w", in_w);
  reg.add("b.in.b", in_b);
  for (int k = 0; k < 5; ++k) {
    enc_res_[static_cast<std::size_t>(k)].register_params(reg, "b.enc" + std::to_string(k + 1));
  }
  for (int k = 0; k < 4; ++k) {
    enc_down_[static_cast<std::size_t>(k)].register_params(reg, "b.down" + std::to_string(k + 1));
  }
  mid1_.register_params(reg, "b.mid1");
  mid2_.register_params(reg, "b.mid2");
  for (int k = 0; k < 5; ++k) {
    const UpStage& st = dec_[static_cast<std::size_t>(k)];
    const std::string p = "b.dec" + std::to_string(k + 1);
    if (st.has_up) {
      reg.add(p + ".up.w", st.up_w);
      reg.add(p + ".up.b", st.up_b);
    }
    st.rb1.register_params(reg, p + ".rb1");
    st.rb2.register_params(reg, p + ".rb2");
  }
  reg.add("b.out.w", out_w);
  reg.add("b.out.b", out_b);
  return reg;
}

std::vector<Tensor> BaselineUNet::parameters() {
  std::vector<Tensor> out = named_params().tensors();
  for (Tensor& t : out) t.set_requires_grad(true);
  return out;
}

namespace {

// Lightweight mirror decoder used only during pretraining: 1x1 projections
// walking the feature pyramid back to full resolution, summing each level in,
// and a 3x3 output convolution.
struct MirrorDecoder {
  std::array<Tensor, 5> proj_w, proj_b;
  Tensor out_w, out_b;

  MirrorDecoder(const NetConfig& cfg, Rng& rng) {
    const auto& w = cfg.widths;
    for (int k = 4; k >= 0; --k) {
      proj_w[static_cast<std::size_t>(k)] =
          init_conv_weight(w[static_cast<std::size_t>(k)], w[static_cast<std::size_t>(k + 1)], 1,
                           rng);
      proj_b[static_cast<std::size_t>(k)] =
          Tensor::zeros({w[static_cast<std::size_t>(k)]});
    }
    out_w = init_conv_weight(1, w[0], 3, rng);
    out_b = Tensor::zeros({1});
  }

  Tensor forward(const std::vector<Tensor>& levels) const {
    Tensor h = levels[5];
    for (int k = 4; k >= 0; --k) {
      h = conv2d(h, proj_w[static_cast<std::size_t>(k)], proj_b[static_cast<std::size_t>(k)]);
      if (h.dim(2) != levels[static_cast<std::size_t>(k)].dim(2)) {
        h = nearest_upsample2x(h);
      }
      h = add(h, levels[static_cast<std::size_t>(k)]);
    }
    return conv2d(swish(h), out_w, out_b, 1, 1);
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    for (auto& t : proj_w) out.push_back(t.set_requires_grad(true));
    for (auto& t : proj_b) out.push_back(t.set_requires_grad(true));
    out.push_back(out_w.set_requires_grad(true));
    out.push_back(out_b.set_requires_grad(true));
    return out;
  }
};

}  // namespace

PretrainResult pretrain_structure_encoder(const std::vector<phantom::PhantomCase>& dataset,
                                          const PretrainConfig& cfg) {
  DD_CHECK(!dataset.empty(), "pretrain: dataset must be non-empty");
  Rng init_rng = Rng::stream(cfg.seed, "init-structure-encoder");
  Rng dec_rng = Rng::stream(cfg.seed, "init-mirror-decoder");
  Rng order_rng = Rng::stream(cfg.seed, "pretrain-order");

  PretrainResult result{StructureEncoder(cfg.net, init_rng), {}};
  MirrorDecoder decoder(cfg.net, dec_rng);

  std::vector<Tensor> params;
  {
    ParamRegistry reg;
    result.encoder.register_params(reg, "g");
    params = reg.tensors();
    for (Tensor& t : params) t.set_requires_grad(true);
    for (Tensor& t : decoder.parameters()) params.push_back(t);
  }
  Adam opt(params, AdamConfig{.lr = cfg.lr});

  const diffusion::DoseNormalizer norm{cfg.dose_scale};
  std::vector<Tensor> xs, ys;
  for (const auto& c : dataset) {
    xs.push_back(c.x);
    ys.push_back(norm.to_model(c.y));
  }

  const int n = static_cast<int>(dataset.size());
  const int batch = std::max(1, std::min(cfg.batch_size, n));
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng.next_u64() % i]);
    }
    double epoch_loss = 0.0;
    int steps = 0;
    for (int start = 0; start < n; start += batch) {
      const int count = std::min(batch, n - start);
      std::vector<Tensor> bx, by;
      for (int j = 0; j < count; ++j) {
        bx.push_back(xs[order[static_cast<std::size_t>(start + j)]]);
        by.push_back(ys[order[static_cast<std::size_t>(start + j)]]);
      }
      Tensor x = stack(bx);
      Tensor y = stack(by);
      GradientTape tape;
      Tensor pred = decoder.forward(result.encoder.forward(x));
      Tensor loss = mean_abs_error(pred, y);
      const float lv = loss.item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("pretrain: non-finite loss — training diverged");
      }
      tape.backward(loss);
      opt.step();
      epoch_loss += lv;
      ++steps;
    }
    result.epoch_loss.push_back(static_cast<float>(epoch_loss / std::max(1, steps)));
  }
  return result;
}

}  // namespace dosediff::nets
