#include "dosediff/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

namespace dosediff {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

using Node = detail::TensorNode;
using NodePtr = std::shared_ptr<Node>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (GradientTape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, bool track) {
  Tensor out = Tensor::zeros(std::move(shape));
  if (track) out.set_requires_grad(true);
  return out;
}

void record(std::vector<NodePtr> inputs, const Tensor& out, std::function<void()> pull) {
  GradientTape::active()->record(std::move(inputs), out.node(), std::move(pull));
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  DD_CHECK(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (track) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    record({an, bn}, out, [an, bn, on] {
      detail::ensure_grad(*an);
      detail::ensure_grad(*bn);
      const std::size_t n = on->grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        an->grad[i] += on->grad[i];
        bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (track) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    record({an, bn}, out, [an, bn, on] {
      detail::ensure_grad(*an);
      detail::ensure_grad(*bn);
      const std::size_t n = on->grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        an->grad[i] += on->grad[i];
        bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), track);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = a.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (track) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    record({an, bn}, out, [an, bn, on] {
      detail::ensure_grad(*an);
      detail::ensure_grad(*bn);
      const std::size_t n = on->grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        an->grad[i] += on->grad[i] * bn->data[i];
        bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, float factor) {
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = x.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = factor * px[i];
  if (track) {
    NodePtr xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, factor] {
      detail::ensure_grad(*xn);
      const std::size_t n = on->grad.size();
      for (std::size_t i = 0; i < n; ++i) xn->grad[i] += factor * on->grad[i];
    });
  }
  return out;
}

Tensor swish(const Tensor& x) {
  const bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  const std::size_t n = x.data().size();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[i] * sigmoidf(px[i]);
  if (track) {
    NodePtr xn = x.node(), on = out.node();
    record({xn}, out, [xn, on] {
      detail::ensure_grad(*xn);
      const std::size_t n = on->grad.size();
      for (std::size_t i = 0; i < n; ++i) {
        const float s = sigmoidf(xn->data[i]);
        xn->grad[i] += on->grad[i] * s * (1.0f + xn->data[i] * (1.0f - s));
      }
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  DD_CHECK(a.rank() == 4 && b.rank() == 4, "concat_channels: rank-4 tensors required");
  DD_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
           "concat_channels: N/H/W mismatch");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const bool track = tracking({&a, &b});
  Tensor out = make_output({n, ca + cb, h, w}, track);
  float* po = out.mutable_data().data();
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  for (int i = 0; i < n; ++i) {
    std::copy_n(pa + i * ca * hw, ca * hw, po + i * (ca + cb) * hw);
    std::copy_n(pb + i * cb * hw, cb * hw, po + i * (ca + cb) * hw + ca * hw);
  }
  if (track) {
    NodePtr an = a.node(), bn = b.node(), on = out.node();
    record({an, bn}, out, [an, bn, on, n, ca, cb, hw] {
      detail::ensure_grad(*an);
      detail::ensure_grad(*bn);
      const float* go = on->grad.data();
      for (int i = 0; i < n; ++i) {
        const float* src = go + i * (ca + cb) * hw;
        float* ga = an->grad.data() + i * ca * hw;
        float* gb = bn->grad.data() + i * cb * hw;
        for (std::size_t j = 0; j < ca * hw; ++j) ga[j] += src[j];
        for (std::size_t j = 0; j < cb * hw; ++j) gb[j] += src[ca * hw + j];
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& per_sample) {
  DD_CHECK(x.rank() == 4, "add_channel_bias: x must be [N,C,H,W]");
  DD_CHECK(per_sample.rank() == 2 && per_sample.dim(0) == x.dim(0) &&
               per_sample.dim(1) == x.dim(1),
           "add_channel_bias: bias must be [N,C]");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const bool track = tracking({&x, &per_sample});
  Tensor out = make_output(x.shape(), track);
  const float* px = x.data().data();
  const float* pb = per_sample.data().data();
  float* po = out.mutable_data().data();
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const float bias = pb[i * c + ch];
      const float* src = px + (i * c + ch) * hw;
      float* dst = po + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] + bias;
    }
  }
  if (track) {
    NodePtr xn = x.node(), bn = per_sample.node(), on = out.node();
    record({xn, bn}, out, [xn, bn, on, n, c, hw] {
      detail::ensure_grad(*xn);
      detail::ensure_grad(*bn);
      const float* go = on->grad.data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += go[i];
      for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
          const float* src = go + (i * c + ch) * hw;
          double acc = 0.0;
          for (std::size_t j = 0; j < hw; ++j) acc += src[j];
          bn->grad[i * c + ch] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = make_output({1}, track);
  out.mutable_data()[0] = static_cast<float>(acc);
  if (track) {
    NodePtr xn = x.node(), on = out.node();
    record({xn}, out, [xn, on] {
      detail::ensure_grad(*xn);
      const float g = on->grad[0];
      for (float& v : xn->grad) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const bool track = tracking({&x});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const float inv_n = 1.0f / static_cast<float>(x.numel());
  Tensor out = make_output({1}, track);
  out.mutable_data()[0] = static_cast<float>(acc * inv_n);
  if (track) {
    NodePtr xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, inv_n] {
      detail::ensure_grad(*xn);
      const float g = on->grad[0] * inv_n;
      for (float& v : xn->grad) v += g;
    });
  }
  return out;
}

Tensor mean_abs_error(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mean_abs_error");
  const bool track = tracking({&pred, &target});
  double acc = 0.0;
  const float* pp = pred.data().data();
  const float* pt = target.data().data();
  const std::size_t n = pred.data().size();
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(pp[i] - pt[i]);
  const float inv_n = 1.0f / static_cast<float>(n);
  Tensor out = make_output({1}, track);
  out.mutable_data()[0] = static_cast<float>(acc / static_cast<double>(n));
  if (track) {
    NodePtr pn = pred.node(), tn = target.node(), on = out.node();
    record({pn, tn}, out, [pn, tn, on, inv_n] {
      detail::ensure_grad(*pn);
      detail::ensure_grad(*tn);
      const float g = on->grad[0] * inv_n;
      const std::size_t n = pn->data.size();
      for (std::size_t i = 0; i < n; ++i) {
        const float diff = pn->data[i] - tn->data[i];
        const float s = diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f);
        pn->grad[i] += g * s;
        tn->grad[i] -= g * s;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  DD_CHECK(x.rank() == 2, "linear: x must be [N,Fin]");
  DD_CHECK(weight.rank() == 2, "linear: weight must be [Fout,Fin]");
  DD_CHECK(x.dim(1) == weight.dim(1), "linear: Fin mismatch");
  DD_CHECK(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "linear: bias must be [Fout]");
  const int n = x.dim(0), fin = x.dim(1), fout = weight.dim(0);
  const bool track = tracking({&x, &weight, &bias});
  Tensor out = make_output({n, fout}, track);
  {
    ConstMatMap xm(x.data().data(), n, fin);
    ConstMatMap wm(weight.data().data(), fout, fin);
    MatMap om(out.mutable_data().data(), n, fout);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), fout);
  }
  if (track) {
    NodePtr xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    record({xn, wn, bn}, out, [xn, wn, bn, on, n, fin, fout] {
      detail::ensure_grad(*xn);
      detail::ensure_grad(*wn);
      detail::ensure_grad(*bn);
      ConstMatMap go(on->grad.data(), n, fout);
      ConstMatMap xm(xn->data.data(), n, fin);
      ConstMatMap wm(wn->data.data(), fout, fin);
      MatMap gx(xn->grad.data(), n, fin);
      MatMap gw(wn->grad.data(), fout, fin);
      gx.noalias() += go * wm;
      gw.noalias() += go.transpose() * xm;
      Eigen::Map<Eigen::RowVectorXf> gb(bn->grad.data(), fout);
      gb += go.colwise().sum();
    });
  }
  return out;
}

namespace {

struct ConvDims {
  int n, c_in, h, w, c_out, k, stride, padding, h_out, w_out;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor& bias,
                   int stride, int padding) {
  DD_CHECK(input.rank() == 4, "conv2d: input must be [N,Cin,H,W]");
  DD_CHECK(weight.rank() == 4, "conv2d: weight must be [Cout,Cin,k,k]");
  ConvDims d{};
  d.n = input.dim(0);
  d.c_in = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.c_out = weight.dim(0);
  d.k = weight.dim(2);
  d.stride = stride;
  d.padding = padding;
  DD_CHECK(weight.dim(3) == d.k, "conv2d: kernel must be square");
  DD_CHECK(d.k == 1 || d.k == 3, "conv2d: kernel size must be 1 or 3");
  DD_CHECK(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  DD_CHECK(padding >= 0, "conv2d: padding must be non-negative");
  DD_CHECK(weight.dim(1) == d.c_in,
           "conv2d: input channels " + std::to_string(d.c_in) + " do not match weight Cin " +
               std::to_string(weight.dim(1)));
  DD_CHECK(bias.rank() == 1 && bias.dim(0) == d.c_out, "conv2d: bias must be [Cout]");
  DD_CHECK(d.h + 2 * padding >= d.k && d.w + 2 * padding >= d.k,
           "conv2d: padded spatial size smaller than kernel");
  d.h_out = (d.h + 2 * padding - d.k) / stride + 1;
  d.w_out = (d.w + 2 * padding - d.k) / stride + 1;
  return d;
}

// Column layout: rows are (c_in, ki, kj), columns are (n, oy, ox).
void im2col(const float* input, const ConvDims& d, float* col) {
  const int kk = d.k * d.k;
  const std::size_t cols = static_cast<std::size_t>(d.n) * d.h_out * d.w_out;
  const std::size_t hw_out = static_cast<std::size_t>(d.h_out) * d.w_out;
  for (int c = 0; c < d.c_in; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        float* row = col + (static_cast<std::size_t>(c) * kk + ki * d.k + kj) * cols;
        for (int n = 0; n < d.n; ++n) {
          const float* plane = input + (static_cast<std::size_t>(n) * d.c_in + c) *
                                           static_cast<std::size_t>(d.h) * d.w;
          float* dst = row + n * hw_out;
          for (int oy = 0; oy < d.h_out; ++oy) {
            const int iy = oy * d.stride + ki - d.padding;
            if (iy < 0 || iy >= d.h) {
              std::fill_n(dst + static_cast<std::size_t>(oy) * d.w_out, d.w_out, 0.0f);
              continue;
            }
            for (int ox = 0; ox < d.w_out; ++ox) {
              const int ix = ox * d.stride + kj - d.padding;
              dst[static_cast<std::size_t>(oy) * d.w_out + ox] =
                  (ix >= 0 && ix < d.w) ? plane[static_cast<std::size_t>(iy) * d.w + ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_accumulate(const float* col, const ConvDims& d, float* grad_input) {
  const int kk = d.k * d.k;
  const std::size_t cols = static_cast<std::size_t>(d.n) * d.h_out * d.w_out;
  const std::size_t hw_out = static_cast<std::size_t>(d.h_out) * d.w_out;
  for (int c = 0; c < d.c_in; ++c) {
    for (int ki = 0; ki < d.k; ++ki) {
      for (int kj = 0; kj < d.k; ++kj) {
        const float* row = col + (static_cast<std::size_t>(c) * kk + ki * d.k + kj) * cols;
        for (int n = 0; n < d.n; ++n) {
          float* plane = grad_input + (static_cast<std::size_t>(n) * d.c_in + c) *
                                          static_cast<std::size_t>(d.h) * d.w;
          const float* src = row + n * hw_out;
          for (int oy = 0; oy < d.h_out; ++oy) {
            const int iy = oy * d.stride + ki - d.padding;
            if (iy < 0 || iy >= d.h) continue;
            for (int ox = 0; ox < d.w_out; ++ox) {
              const int ix = ox * d.stride + kj - d.padding;
              if (ix >= 0 && ix < d.w) {
                plane[static_cast<std::size_t>(iy) * d.w + ix] +=
                    src[static_cast<std::size_t>(oy) * d.w_out + ox];
              }
            }
          }
        }
      }
    }
  }
}

// Gathers [N,Cout,Hout,Wout] into the GEMM layout [Cout, N*Hout*Wout].
void gather_output_grad(const float* grad, const ConvDims& d, float* out) {
  const std::size_t hw = static_cast<std::size_t>(d.h_out) * d.w_out;
  const std::size_t cols = static_cast<std::size_t>(d.n) * hw;
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c_out; ++c) {
      const float* src = grad + (static_cast<std::size_t>(n) * d.c_out + c) * hw;
      std::copy_n(src, hw, out + c * cols + n * hw);
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  const ConvDims d = conv_dims(input, weight, bias, stride, padding);
  const bool track = tracking({&input, &weight, &bias});
  Tensor out = make_output({d.n, d.c_out, d.h_out, d.w_out}, track);

  const int kk = d.c_in * d.k * d.k;
  const std::size_t cols = static_cast<std::size_t>(d.n) * d.h_out * d.w_out;
  const std::size_t hw = static_cast<std::size_t>(d.h_out) * d.w_out;
  {
    std::vector<float> col(static_cast<std::size_t>(kk) * cols);
    im2col(input.data().data(), d, col.data());
    Mat y(d.c_out, static_cast<Eigen::Index>(cols));
    ConstMatMap wm(weight.data().data(), d.c_out, kk);
    ConstMatMap cm(col.data(), kk, static_cast<Eigen::Index>(cols));
    y.noalias() = wm * cm;
    float* po = out.mutable_data().data();
    const float* pb = bias.data().data();
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < d.c_out; ++c) {
        const float* src = y.data() + static_cast<std::size_t>(c) * cols + n * hw;
        float* dst = po + (static_cast<std::size_t>(n) * d.c_out + c) * hw;
        const float b = pb[c];
        for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] + b;
      }
    }
  }

  if (track) {
    NodePtr in = input.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    record({in, wn, bn}, out, [in, wn, bn, on, d, kk, cols, hw] {
      detail::ensure_grad(*in);
      detail::ensure_grad(*wn);
      detail::ensure_grad(*bn);
      // The im2col buffer is rebuilt from the saved input instead of being
      // kept alive across the forward pass; trades ~10% time for memory.
      std::vector<float> col(static_cast<std::size_t>(kk) * cols);
      im2col(in->data.data(), d, col.data());
      std::vector<float> gy(static_cast<std::size_t>(d.c_out) * cols);
      gather_output_grad(on->grad.data(), d, gy.data());

      ConstMatMap gym(gy.data(), d.c_out, static_cast<Eigen::Index>(cols));
      ConstMatMap cm(col.data(), kk, static_cast<Eigen::Index>(cols));
      MatMap gw(wn->grad.data(), d.c_out, kk);
      gw.noalias() += gym * cm.transpose();

      for (int c = 0; c < d.c_out; ++c) {
        double acc = 0.0;
        const float* row = gy.data() + static_cast<std::size_t>(c) * cols;
        for (std::size_t j = 0; j < cols; ++j) acc += row[j];
        bn->grad[c] += static_cast<float>(acc);
      }

      ConstMatMap wm(wn->data.data(), d.c_out, kk);
      Mat gcol(kk, static_cast<Eigen::Index>(cols));
      gcol.noalias() = wm.transpose() * gym;
      col2im_accumulate(gcol.data(), d, in->grad.data());
    });
  }
  return out;
}

Tensor group_norm(const Tensor& input, int groups, const Tensor& gamma,
                  const Tensor& beta, float eps) {
  DD_CHECK(input.rank() == 4, "group_norm: input must be [N,C,H,W]");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  DD_CHECK(groups >= 1, "group_norm: groups must be >= 1");
  DD_CHECK(c % groups == 0, "group_norm: channels " + std::to_string(c) +
                                " not divisible by groups " + std::to_string(groups));
  DD_CHECK(eps > 0.0f, "group_norm: eps must be positive");
  DD_CHECK(gamma.rank() == 1 && gamma.dim(0) == c, "group_norm: gamma must be [C]");
  DD_CHECK(beta.rank() == 1 && beta.dim(0) == c, "group_norm: beta must be [C]");

  const int cg = c / groups;                          // channels per group
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t group_size = cg * hw;
  const bool track = tracking({&input, &gamma, &beta});
  Tensor out = make_output(input.shape(), track);

  // Per-(sample, group) statistics saved for the backward pass.
  auto stats = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * groups * 2);
  const float* px = input.data().data();
  const float* pg = gamma.data().data();
  const float* pb = beta.data().data();
  float* po = out.mutable_data().data();
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const float* src = px + (static_cast<std::size_t>(i) * c + g * cg) * hw;
      double acc = 0.0;
      for (std::size_t j = 0; j < group_size; ++j) acc += src[j];
      const float mu = static_cast<float>(acc / static_cast<double>(group_size));
      double var_acc = 0.0;
      for (std::size_t j = 0; j < group_size; ++j) {
        const double dlt = src[j] - mu;
        var_acc += dlt * dlt;
      }
      const float rstd =
          1.0f / std::sqrt(static_cast<float>(var_acc / static_cast<double>(group_size)) + eps);
      (*stats)[(static_cast<std::size_t>(i) * groups + g) * 2] = mu;
      (*stats)[(static_cast<std::size_t>(i) * groups + g) * 2 + 1] = rstd;
      float* dst = po + (static_cast<std::size_t>(i) * c + g * cg) * hw;
      for (int cc = 0; cc < cg; ++cc) {
        const float gam = pg[g * cg + cc];
        const float bet = pb[g * cg + cc];
        for (std::size_t j = 0; j < hw; ++j) {
          dst[cc * hw + j] = gam * (src[cc * hw + j] - mu) * rstd + bet;
        }
      }
    }
  }

  if (track) {
    NodePtr xn = input.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    record({xn, gn, bn}, out, [xn, gn, bn, on, stats, n, c, cg, groups, hw, group_size] {
      detail::ensure_grad(*xn);
      detail::ensure_grad(*gn);
      detail::ensure_grad(*bn);
      for (int i = 0; i < n; ++i) {
        for (int g = 0; g < groups; ++g) {
          const float mu = (*stats)[(static_cast<std::size_t>(i) * groups + g) * 2];
          const float rstd = (*stats)[(static_cast<std::size_t>(i) * groups + g) * 2 + 1];
          const std::size_t base = (static_cast<std::size_t>(i) * c + g * cg) * hw;
          const float* x = xn->data.data() + base;
          const float* dy = on->grad.data() + base;
          // dxhat = dy * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int cc = 0; cc < cg; ++cc) {
            const float gam = gn->data[g * cg + cc];
            for (std::size_t j = 0; j < hw; ++j) {
              const float xhat = (x[cc * hw + j] - mu) * rstd;
              const float dxh = dy[cc * hw + j] * gam;
              sum_dxhat += dxh;
              sum_dxhat_xhat += static_cast<double>(dxh) * xhat;
            }
          }
          const float m1 = static_cast<float>(sum_dxhat / static_cast<double>(group_size));
          const float m2 = static_cast<float>(sum_dxhat_xhat / static_cast<double>(group_size));
          float* dx = xn->grad.data() + base;
          for (int cc = 0; cc < cg; ++cc) {
            const float gam = gn->data[g * cg + cc];
            double dgam = 0.0, dbet = 0.0;
            for (std::size_t j = 0; j < hw; ++j) {
              const float xhat = (x[cc * hw + j] - mu) * rstd;
              const float dyv = dy[cc * hw + j];
              const float dxh = dyv * gam;
              dx[cc * hw + j] += rstd * (dxh - m1 - xhat * m2);
              dgam += static_cast<double>(dyv) * xhat;
              dbet += dyv;
            }
            gn->grad[g * cg + cc] += static_cast<float>(dgam);
            bn->grad[g * cg + cc] += static_cast<float>(dbet);
          }
        }
      }
    });
  }
  return out;
}

Tensor nearest_upsample2x(const Tensor& x) {
  DD_CHECK(x.rank() == 4, "nearest_upsample2x: input must be [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool track = tracking({&x});
  Tensor out = make_output({n, c, 2 * h, 2 * w}, track);
  const float* px = x.data().data();
  float* po = out.mutable_data().data();
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = px + p * h * w;
    float* dst = po + p * 4 * h * w;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const float v = src[static_cast<std::size_t>(y) * w + xx];
        float* d0 = dst + static_cast<std::size_t>(2 * y) * 2 * w + 2 * xx;
        d0[0] = v;
        d0[1] = v;
        d0[2 * w] = v;
        d0[2 * w + 1] = v;
      }
    }
  }
  if (track) {
    NodePtr xn = x.node(), on = out.node();
    record({xn}, out, [xn, on, planes, h, w] {
      detail::ensure_grad(*xn);
      const float* go = on->grad.data();
      for (std::size_t p = 0; p < planes; ++p) {
        const float* src = go + p * 4 * h * w;
        float* dst = xn->grad.data() + p * h * w;
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            const float* s0 = src + static_cast<std::size_t>(2 * y) * 2 * w + 2 * xx;
            dst[static_cast<std::size_t>(y) * w + xx] += s0[0] + s0[1] + s0[2 * w] + s0[2 * w + 1];
          }
        }
      }
    });
  }
  return out;
}

Tensor attention_probs(const Tensor& q, const Tensor& k) {
  DD_CHECK(q.rank() == 4 && k.rank() == 4, "attention_probs: rank-4 inputs required");
  DD_CHECK(q.dim(0) == k.dim(0), "attention_probs: batch mismatch");
  DD_CHECK(q.dim(1) == k.dim(1),
           "attention_probs: channel mismatch between query and key sources");
  const int n = q.dim(0), c = q.dim(1);
  const int p = q.dim(2) * q.dim(3);
  const int pk = k.dim(2) * k.dim(3);
  const float inv_sqrt_c = 1.0f / std::sqrt(static_cast<float>(c));
  const bool track = tracking({&q, &k});
  Tensor out = make_output({n, p, pk}, track);

  float* po = out.mutable_data().data();
  const float* pq = q.data().data();
  const float* pkd = k.data().data();
  for (int i = 0; i < n; ++i) {
    ConstMatMap qm(pq + static_cast<std::size_t>(i) * c * p, c, p);
    ConstMatMap km(pkd + static_cast<std::size_t>(i) * c * pk, c, pk);
    MatMap am(po + static_cast<std::size_t>(i) * p * pk, p, pk);
    am.noalias() = (qm.transpose() * km) * inv_sqrt_c;
    for (int r = 0; r < p; ++r) {
      float* row = am.data() + static_cast<std::size_t>(r) * pk;
      float mx = row[0];
      for (int j = 1; j < pk; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (int j = 0; j < pk; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int j = 0; j < pk; ++j) row[j] *= inv;
    }
  }

  if (track) {
    NodePtr qn = q.node(), kn = k.node(), on = out.node();
    record({qn, kn}, out, [qn, kn, on, n, c, p, pk, inv_sqrt_c] {
      detail::ensure_grad(*qn);
      detail::ensure_grad(*kn);
      for (int i = 0; i < n; ++i) {
        ConstMatMap am(on->data.data() + static_cast<std::size_t>(i) * p * pk, p, pk);
        ConstMatMap gam(on->grad.data() + static_cast<std::size_t>(i) * p * pk, p, pk);
        // dS = A o (dA - rowsum(dA o A))
        Mat ds(p, pk);
        for (int r = 0; r < p; ++r) {
          double dot = 0.0;
          for (int j = 0; j < pk; ++j) dot += static_cast<double>(gam(r, j)) * am(r, j);
          const float d = static_cast<float>(dot);
          for (int j = 0; j < pk; ++j) ds(r, j) = am(r, j) * (gam(r, j) - d);
        }
        ConstMatMap qm(qn->data.data() + static_cast<std::size_t>(i) * c * p, c, p);
        ConstMatMap km(kn->data.data() + static_cast<std::size_t>(i) * c * pk, c, pk);
        MatMap gq(qn->grad.data() + static_cast<std::size_t>(i) * c * p, c, p);
        MatMap gk(kn->grad.data() + static_cast<std::size_t>(i) * c * pk, c, pk);
        gq.noalias() += km * ds.transpose() * inv_sqrt_c;
        gk.noalias() += qm * ds * inv_sqrt_c;
      }
    });
  }
  return out;
}

Tensor attention_apply(const Tensor& probs, const Tensor& v, int out_h, int out_w) {
  DD_CHECK(probs.rank() == 3, "attention_apply: probs must be [N,P,Pk]");
  DD_CHECK(v.rank() == 4, "attention_apply: v must be [N,C,Hk,Wk]");
  DD_CHECK(probs.dim(0) == v.dim(0), "attention_apply: batch mismatch");
  DD_CHECK(probs.dim(2) == v.dim(2) * v.dim(3), "attention_apply: key positions mismatch");
  DD_CHECK(out_h * out_w == probs.dim(1), "attention_apply: output spatial size mismatch");
  const int n = probs.dim(0), p = probs.dim(1), pk = probs.dim(2), c = v.dim(1);
  const bool track = tracking({&probs, &v});
  Tensor out = make_output({n, c, out_h, out_w}, track);
  const float* pa = probs.data().data();
  const float* pv = v.data().data();
  float* po = out.mutable_data().data();
  for (int i = 0; i < n; ++i) {
    ConstMatMap am(pa + static_cast<std::size_t>(i) * p * pk, p, pk);
    ConstMatMap vm(pv + static_cast<std::size_t>(i) * c * pk, c, pk);
    MatMap om(po + static_cast<std::size_t>(i) * c * p, c, p);
    om.noalias() = vm * am.transpose();
  }
  if (track) {
    NodePtr an = probs.node(), vn = v.node(), on = out.node();
    record({an, vn}, out, [an, vn, on, n, c, p, pk] {
      detail::ensure_grad(*an);
      detail::ensure_grad(*vn);
      for (int i = 0; i < n; ++i) {
        ConstMatMap go(on->grad.data() + static_cast<std::size_t>(i) * c * p, c, p);
        ConstMatMap am(an->data.data() + static_cast<std::size_t>(i) * p * pk, p, pk);
        ConstMatMap vm(vn->data.data() + static_cast<std::size_t>(i) * c * pk, c, pk);
        MatMap ga(an->grad.data() + static_cast<std::size_t>(i) * p * pk, p, pk);
        MatMap gv(vn->grad.data() + static_cast<std::size_t>(i) * c * pk, c, pk);
        ga.noalias() += go.transpose() * vm;
        gv.noalias() += go * am;
      }
    });
  }
  return out;
}

AttentionParams make_attention_params(int query_channels, int kv_channels, Rng& rng) {
  AttentionParams p;
  const int c = query_channels;
  p.wq = init_conv_weight(c, query_channels, 1, rng);
  p.wk = init_conv_weight(c, kv_channels, 1, rng);
  p.wv = init_conv_weight(c, kv_channels, 1, rng);
  p.wo = Tensor::zeros({query_channels, c, 1, 1});  // identity block at init
  p.bq = Tensor::zeros({c});
  p.bk = Tensor::zeros({c});
  p.bv = Tensor::zeros({c});
  p.bo = Tensor::zeros({query_channels});
  return p;
}

Tensor attention(const Tensor& query_src, const Tensor& key_value_src,
                 const AttentionParams& params) {
  DD_CHECK(params.wq.dim(0) == params.wk.dim(0) && params.wk.dim(0) == params.wv.dim(0),
           "attention: projected channel counts of Q, K, V must match");
  DD_CHECK(params.wo.dim(0) == query_src.dim(1),
           "attention: output projection must restore the query channel count");
  Tensor q = conv2d(query_src, params.wq, params.bq);
  Tensor k = conv2d(key_value_src, params.wk, params.bk);
  Tensor v = conv2d(key_value_src, params.wv, params.bv);
  Tensor probs = attention_probs(q, k);
  Tensor attended = attention_apply(probs, v, query_src.dim(2), query_src.dim(3));
  return add(query_src, conv2d(attended, params.wo, params.bo));
}

Tensor init_conv_weight(int c_out, int c_in, int k, Rng& rng) {
  const double fan_in = static_cast<double>(c_in) * k * k;
  const double stddev = std::sqrt(1.0 / fan_in);
  Tensor w = Tensor::zeros({c_out, c_in, k, k});
  for (float& v : w.mutable_data()) {
    v = static_cast<float>(rng.truncated_normal(stddev));
  }
  return w;
}

Tensor init_linear_weight(int f_out, int f_in, Rng& rng) {
  const double stddev = std::sqrt(1.0 / static_cast<double>(f_in));
  Tensor w = Tensor::zeros({f_out, f_in});
  for (float& v : w.mutable_data()) {
    v = static_cast<float>(rng.truncated_normal(stddev));
  }
  return w;
}

}  // namespace dosediff
