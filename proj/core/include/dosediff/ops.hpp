#pragma once

#include "dosediff/rng.hpp"
#include "dosediff/tensor.hpp"

namespace dosediff {

// Elementwise and structural operations. All of them are differentiable and
// record onto the active GradientTape when any input tracks gradients.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor swish(const Tensor& x);

// Channel concatenation of two [N,C,H,W] tensors.
Tensor concat_channels(const Tensor& a, const Tensor& b);
// x: [N,C,H,W], per_sample: [N,C]; adds per_sample broadcast over H,W.
Tensor add_channel_bias(const Tensor& x, const Tensor& per_sample);

// Reductions to scalar tensors.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_abs_error(const Tensor& pred, const Tensor& target);

// x: [N,Fin], weight: [Fout,Fin], bias: [Fout] -> [N,Fout].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// input: [N,Cin,H,W], weight: [Cout,Cin,k,k], bias: [Cout].
// Cross-correlation semantics, k in {1,3}, stride in {1,2}.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0);

// Per-(sample, group) normalization to zero mean / unit variance followed by
// the per-channel affine transform gamma * xhat + beta.
Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma,
                  const Tensor& beta, float eps = 1e-5f);

// [N,C,H,W] -> [N,C,2H,2W], each pixel replicated into a 2x2 block.
Tensor nearest_upsample2x(const Tensor& x);

// softmax(Q K^T / sqrt(C)) over flattened spatial positions.
// q: [N,C,H,W], k: [N,C,Hk,Wk] -> [N, H*W, Hk*Wk]; rows sum to 1.
Tensor attention_probs(const Tensor& q, const Tensor& k);
// probs: [N,P,Pk], v: [N,C,Hk,Wk] -> [N,C,out_h,out_w] with out_h*out_w == P.
Tensor attention_apply(const Tensor& probs, const Tensor& v, int out_h, int out_w);

// Single-head attention block with learned 1x1 projections and a residual
// path: out = query_src + proj_out(softmax(QK^T/sqrt(d)) V). Self-attention
// is the special case key_value_src == query_src.
struct AttentionParams {
  Tensor wq, bq;  // [C, Cq, 1, 1]
  Tensor wk, bk;  // [C, Ckv, 1, 1]
  Tensor wv, bv;  // [C, Ckv, 1, 1]
  Tensor wo, bo;  // [Cq, C, 1, 1]; wo starts at zero so the block is identity
};
AttentionParams make_attention_params(int query_channels, int kv_channels, Rng& rng);
Tensor attention(const Tensor& query_src, const Tensor& key_value_src,
                 const AttentionParams& params);

// Truncated-normal fan-in initialization used for conv and linear weights.
Tensor init_conv_weight(int c_out, int c_in, int k, Rng& rng);
Tensor init_linear_weight(int f_out, int f_in, Rng& rng);

}  // namespace dosediff
