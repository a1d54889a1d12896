#pragma once

#include <string>
#include <vector>

#include "attnseg/rng.hpp"
#include "attnseg/tensor.hpp"

namespace attnseg {

/// Named view of one parameter tensor and its gradient accumulator.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};

// ---------------------------------------------------------------------------
// Conv2d — kxk convolution via im2col + GEMM. Weight layout (k*k*in_ch, out_ch)
// with patch columns ordered (ky, kx, ci).
// ---------------------------------------------------------------------------
struct Conv2d {
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1, dilation = 1;

  Tensor W, b, gW, gb;

  struct Ctx {
    Tensor x;
    int oh = 0, ow = 0;
  };

  void configure(int in_channels, int out_channels, int kernel = 3, int stride_ = 1,
                 int pad_ = 1, int dilation_ = 1);
  void init_he(Rng& rng);

  int out_extent(int in_extent) const;
  Tensor forward(const Tensor& x, Ctx* ctx) const;
  /// Accumulates gW/gb, returns dL/dx.
  Tensor backward(const Ctx& ctx, const Tensor& dy);

  void params(const std::string& prefix, std::vector<ParamRef>& out);

 private:
  void im2col(const Tensor& x, int oh, int ow, MatX& patches) const;
};

// ---------------------------------------------------------------------------
// Pointwise / shape ops
// ---------------------------------------------------------------------------
Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

Tensor sigmoid(const Tensor& x);
inline Scalar sigmoid(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Fixed 2x bilinear upsample (half-pixel centers, clamped borders).
Tensor bilinear_up2(const Tensor& x);
Tensor bilinear_up2_backward(int in_h, int in_w, int ch, const Tensor& dy);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& dy, int ca, Tensor& da, Tensor& db);

VecX global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(int h, int w, int ch, const VecX& dy);

// ---------------------------------------------------------------------------
// Linear — y = W^T x + b, W is (in, out).
// ---------------------------------------------------------------------------
struct Linear {
  int in = 0, out = 0;
  Tensor W, b, gW, gb;

  void configure(int in_, int out_);
  void init_normal(Rng& rng, Scalar sd);
  void init_he(Rng& rng);

  VecX forward(const VecX& x) const;
  VecX backward(const VecX& x, const VecX& dy);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
};

// ---------------------------------------------------------------------------
// Dense1x1 — 1x1 convolution expressed on the (N, C) pixel matrix.
// ---------------------------------------------------------------------------
struct Dense1x1 {
  int in = 0, out = 0;
  Tensor W, b, gW, gb;  // W is (in, out)

  void configure(int in_, int out_);
  void init_he(Rng& rng);

  MatX forward(const MatX& x) const;
  MatX backward(const MatX& x, const MatX& dy);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
};

// ---------------------------------------------------------------------------
// Spatial self-attention (non-local block). Embeddings B, C (N x C') and
// D (N x C) from 1x1 convs; S = B C^T; P = rowsoftmax(S); out = P D + X.
// ---------------------------------------------------------------------------
struct SpatialSelfAttention {
  int ch = 0, embed_ch = 0;
  Dense1x1 embed_b, embed_c, embed_d;

  struct Ctx {
    Tensor x;
    MatX B, C, D, P;
  };

  void configure(int channels, int embed_channels);
  void init(Rng& rng);

  Tensor forward(const Tensor& x, Ctx* ctx) const;
  Tensor backward(const Ctx& ctx, const Tensor& dy);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Row-wise softmax with max subtraction. Rows sum to 1.
MatX row_softmax(const MatX& s);

// ---------------------------------------------------------------------------
// Classification-gated channel attention: out = A + alpha * s * A.
// alpha is a learned scalar, initialized to zero; s is the classification
// probability and receives gradient (no detachment).
// ---------------------------------------------------------------------------
struct ClassGate {
  Tensor alpha = Tensor::scalar(0.0);
  Tensor galpha = Tensor::scalar(0.0);

  struct Ctx {
    Tensor a;
    Scalar s = 0.0;
  };

  Tensor forward(const Tensor& a, Scalar s, Ctx* ctx) const;
  /// Accumulates galpha, adds dL/ds into *ds, returns dL/dA.
  Tensor backward(const Ctx& ctx, const Tensor& dy, Scalar* ds);

  void params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Functional form of the gate, out_ij = a_ij + (alpha*s) * a_ij.
Tensor gated_attention(const Tensor& a, Scalar s, Scalar alpha);

}  // namespace attnseg
