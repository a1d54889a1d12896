#include "attnseg/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace attnseg {

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

void Conv2d::configure(int in_channels, int out_channels, int kernel, int stride_, int pad_,
                       int dilation_) {
  in_ch = in_channels;
  out_ch = out_channels;
  k = kernel;
  stride = stride_;
  pad = pad_;
  dilation = dilation_;
  W = Tensor({k * k * in_ch, out_ch});
  b = Tensor({out_ch});
  gW = Tensor({k * k * in_ch, out_ch});
  gb = Tensor({out_ch});
}

void Conv2d::init_he(Rng& rng) {
  Scalar sd = std::sqrt(2.0 / (k * k * in_ch));
  for (auto& x : W.v) x = rng.normal(0.0, sd);
  b.set_zero();
}

int Conv2d::out_extent(int in_extent) const {
  int eff = dilation * (k - 1) + 1;
  return (in_extent + 2 * pad - eff) / stride + 1;
}

void Conv2d::im2col(const Tensor& x, int oh, int ow, MatX& patches) const {
  const int h = x.h(), w = x.w();
  patches.setZero(oh * ow, k * k * in_ch);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      Scalar* row = patches.data() + static_cast<size_t>(oy * ow + ox) * patches.cols();
      int iy0 = oy * stride - pad;
      int ix0 = ox * stride - pad;
      for (int ky = 0; ky < k; ++ky) {
        int iy = iy0 + ky * dilation;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          int ix = ix0 + kx * dilation;
          if (ix < 0 || ix >= w) continue;
          const Scalar* src = &x.v[(static_cast<size_t>(iy) * w + ix) * in_ch];
          Scalar* dst = row + (ky * k + kx) * in_ch;
          for (int ci = 0; ci < in_ch; ++ci) dst[ci] = src[ci];
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, Ctx* ctx) const {
  if (x.c() != in_ch)
    throw std::invalid_argument("conv: expected " + std::to_string(in_ch) + " channels, got " +
                                x.shape_str());
  int oh = out_extent(x.h());
  int ow = out_extent(x.w());
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv: input too small " + x.shape_str());

  MatX patches;
  im2col(x, oh, ow, patches);

  Tensor y({oh, ow, out_ch});
  auto ym = y.pixmat();
  ym.noalias() = patches * W.mat(k * k * in_ch, out_ch);
  ym.rowwise() += b.vec().transpose();

  if (ctx) {
    ctx->x = x;
    ctx->oh = oh;
    ctx->ow = ow;
  }
  return y;
}

Tensor Conv2d::backward(const Ctx& ctx, const Tensor& dy) {
  const Tensor& x = ctx.x;
  const int oh = ctx.oh, ow = ctx.ow;
  const int h = x.h(), w = x.w();

  MatX patches;
  im2col(x, oh, ow, patches);  // recomputed; cheaper than caching per layer

  auto dym = dy.mat(oh * ow, out_ch);
  gW.mat(k * k * in_ch, out_ch).noalias() += patches.transpose() * dym;
  gb.vec() += dym.colwise().sum().transpose();

  MatX dpatches(oh * ow, k * k * in_ch);
  dpatches.noalias() = dym * W.mat(k * k * in_ch, out_ch).transpose();

  // col2im scatter-add
  Tensor dx({h, w, in_ch});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Scalar* row = dpatches.data() + static_cast<size_t>(oy * ow + ox) * dpatches.cols();
      int iy0 = oy * stride - pad;
      int ix0 = ox * stride - pad;
      for (int ky = 0; ky < k; ++ky) {
        int iy = iy0 + ky * dilation;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          int ix = ix0 + kx * dilation;
          if (ix < 0 || ix >= w) continue;
          Scalar* dst = &dx.v[(static_cast<size_t>(iy) * w + ix) * in_ch];
          const Scalar* src = row + (ky * k + kx) * in_ch;
          for (int ci = 0; ci < in_ch; ++ci) dst[ci] += src[ci];
        }
      }
    }
  }
  return dx;
}

void Conv2d::params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".W", &W, &gW});
  out.push_back({prefix + ".b", &b, &gb});
}

// ---------------------------------------------------------------------------
// Pointwise / shape ops
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.v) v = v > 0 ? v : 0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  check_same_shape(x, dy, "relu_backward");
  Tensor dx = dy;
  for (size_t i = 0; i < dx.v.size(); ++i)
    if (x.v[i] <= 0) dx.v[i] = 0;
  return dx;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.v) v = sigmoid(v);
  return y;
}

namespace {

struct LerpTable {
  std::vector<int> i0, i1;
  std::vector<Scalar> w1;  // weight of i1; weight of i0 is 1-w1
};

// half-pixel-center mapping from out extent 2n to in extent n
LerpTable up2_table(int n) {
  LerpTable t;
  int on = 2 * n;
  t.i0.resize(on);
  t.i1.resize(on);
  t.w1.resize(on);
  for (int o = 0; o < on; ++o) {
    Scalar src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    if (src > n - 1) src = n - 1;
    int i0 = static_cast<int>(std::floor(src));
    int i1 = i0 + 1 < n ? i0 + 1 : n - 1;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w1[o] = src - i0;
  }
  return t;
}

}  // namespace

Tensor bilinear_up2(const Tensor& x) {
  const int h = x.h(), w = x.w(), c = x.c();
  LerpTable ty = up2_table(h), tx = up2_table(w);
  Tensor y({2 * h, 2 * w, c});
  for (int oy = 0; oy < 2 * h; ++oy) {
    for (int ox = 0; ox < 2 * w; ++ox) {
      Scalar wy1 = ty.w1[oy], wx1 = tx.w1[ox];
      const Scalar* p00 = &x.v[(static_cast<size_t>(ty.i0[oy]) * w + tx.i0[ox]) * c];
      const Scalar* p01 = &x.v[(static_cast<size_t>(ty.i0[oy]) * w + tx.i1[ox]) * c];
      const Scalar* p10 = &x.v[(static_cast<size_t>(ty.i1[oy]) * w + tx.i0[ox]) * c];
      const Scalar* p11 = &x.v[(static_cast<size_t>(ty.i1[oy]) * w + tx.i1[ox]) * c];
      Scalar* dst = &y.v[(static_cast<size_t>(oy) * 2 * w + ox) * c];
      for (int ci = 0; ci < c; ++ci) {
        dst[ci] = (1 - wy1) * ((1 - wx1) * p00[ci] + wx1 * p01[ci]) +
                  wy1 * ((1 - wx1) * p10[ci] + wx1 * p11[ci]);
      }
    }
  }
  return y;
}

Tensor bilinear_up2_backward(int in_h, int in_w, int ch, const Tensor& dy) {
  if (dy.h() != 2 * in_h || dy.w() != 2 * in_w || dy.c() != ch)
    throw std::invalid_argument("bilinear_up2_backward: bad dy shape " + dy.shape_str());
  LerpTable ty = up2_table(in_h), tx = up2_table(in_w);
  Tensor dx({in_h, in_w, ch});
  for (int oy = 0; oy < 2 * in_h; ++oy) {
    for (int ox = 0; ox < 2 * in_w; ++ox) {
      Scalar wy1 = ty.w1[oy], wx1 = tx.w1[ox];
      const Scalar* g = &dy.v[(static_cast<size_t>(oy) * 2 * in_w + ox) * ch];
      Scalar* p00 = &dx.v[(static_cast<size_t>(ty.i0[oy]) * in_w + tx.i0[ox]) * ch];
      Scalar* p01 = &dx.v[(static_cast<size_t>(ty.i0[oy]) * in_w + tx.i1[ox]) * ch];
      Scalar* p10 = &dx.v[(static_cast<size_t>(ty.i1[oy]) * in_w + tx.i0[ox]) * ch];
      Scalar* p11 = &dx.v[(static_cast<size_t>(ty.i1[oy]) * in_w + tx.i1[ox]) * ch];
      for (int ci = 0; ci < ch; ++ci) {
        p00[ci] += (1 - wy1) * (1 - wx1) * g[ci];
        p01[ci] += (1 - wy1) * wx1 * g[ci];
        p10[ci] += wy1 * (1 - wx1) * g[ci];
        p11[ci] += wy1 * wx1 * g[ci];
      }
    }
  }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.h() != b.h() || a.w() != b.w())
    throw std::invalid_argument("concat: spatial mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor y({a.h(), a.w(), a.c() + b.c()});
  const int n = a.h() * a.w();
  for (int i = 0; i < n; ++i) {
    const Scalar* pa = &a.v[static_cast<size_t>(i) * a.c()];
    const Scalar* pb = &b.v[static_cast<size_t>(i) * b.c()];
    Scalar* py = &y.v[static_cast<size_t>(i) * y.c()];
    std::copy(pa, pa + a.c(), py);
    std::copy(pb, pb + b.c(), py + a.c());
  }
  return y;
}

void split_channels(const Tensor& dy, int ca, Tensor& da, Tensor& db) {
  const int cb = dy.c() - ca;
  da = Tensor({dy.h(), dy.w(), ca});
  db = Tensor({dy.h(), dy.w(), cb});
  const int n = dy.h() * dy.w();
  for (int i = 0; i < n; ++i) {
    const Scalar* py = &dy.v[static_cast<size_t>(i) * dy.c()];
    std::copy(py, py + ca, &da.v[static_cast<size_t>(i) * ca]);
    std::copy(py + ca, py + ca + cb, &db.v[static_cast<size_t>(i) * cb]);
  }
}

VecX global_avg_pool(const Tensor& x) {
  return x.pixmat().colwise().mean().transpose();
}

Tensor global_avg_pool_backward(int h, int w, int ch, const VecX& dy) {
  Tensor dx({h, w, ch});
  const Scalar inv = 1.0 / (static_cast<Scalar>(h) * w);
  dx.pixmat().rowwise() = (dy * inv).transpose();
  return dx;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

void Linear::configure(int in_, int out_) {
  in = in_;
  out = out_;
  W = Tensor({in, out});
  b = Tensor({out});
  gW = Tensor({in, out});
  gb = Tensor({out});
}

void Linear::init_normal(Rng& rng, Scalar sd) {
  for (auto& x : W.v) x = rng.normal(0.0, sd);
  b.set_zero();
}

void Linear::init_he(Rng& rng) { init_normal(rng, std::sqrt(2.0 / in)); }

VecX Linear::forward(const VecX& x) const {
  return W.mat(in, out).transpose() * x + b.vec();
}

VecX Linear::backward(const VecX& x, const VecX& dy) {
  gW.mat(in, out).noalias() += x * dy.transpose();
  gb.vec() += dy;
  return W.mat(in, out) * dy;
}

void Linear::params(const std::string& prefix, std::vector<ParamRef>& out_) {
  out_.push_back({prefix + ".W", &W, &gW});
  out_.push_back({prefix + ".b", &b, &gb});
}

// ---------------------------------------------------------------------------
// Dense1x1
// ---------------------------------------------------------------------------

void Dense1x1::configure(int in_, int out_) {
  in = in_;
  out = out_;
  W = Tensor({in, out});
  b = Tensor({out});
  gW = Tensor({in, out});
  gb = Tensor({out});
}

void Dense1x1::init_he(Rng& rng) {
  Scalar sd = std::sqrt(2.0 / in);
  for (auto& x : W.v) x = rng.normal(0.0, sd);
  b.set_zero();
}

MatX Dense1x1::forward(const MatX& x) const {
  MatX y = x * W.mat(in, out);
  y.rowwise() += b.vec().transpose();
  return y;
}

MatX Dense1x1::backward(const MatX& x, const MatX& dy) {
  gW.mat(in, out).noalias() += x.transpose() * dy;
  gb.vec() += dy.colwise().sum().transpose();
  return dy * W.mat(in, out).transpose();
}

void Dense1x1::params(const std::string& prefix, std::vector<ParamRef>& out_) {
  out_.push_back({prefix + ".W", &W, &gW});
  out_.push_back({prefix + ".b", &b, &gb});
}

// ---------------------------------------------------------------------------
// Spatial self-attention
// ---------------------------------------------------------------------------

MatX row_softmax(const MatX& s) {
  MatX p(s.rows(), s.cols());
  for (long i = 0; i < s.rows(); ++i) {
    Scalar m = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

void SpatialSelfAttention::configure(int channels, int embed_channels) {
  if (embed_channels < 1 || embed_channels > channels)
    throw std::invalid_argument("self-attention embed channels " +
                                std::to_string(embed_channels) + " out of range for C=" +
                                std::to_string(channels));
  ch = channels;
  embed_ch = embed_channels;
  embed_b.configure(ch, embed_ch);
  embed_c.configure(ch, embed_ch);
  embed_d.configure(ch, ch);
}

void SpatialSelfAttention::init(Rng& rng) {
  embed_b.init_he(rng);
  embed_c.init_he(rng);
  embed_d.init_he(rng);
}

Tensor SpatialSelfAttention::forward(const Tensor& x, Ctx* ctx) const {
  if (x.c() != ch)
    throw std::invalid_argument("self-attention: expected C=" + std::to_string(ch) + ", got " +
                                x.shape_str());
  auto xm = x.pixmat();  // N x C
  MatX B = embed_b.forward(xm);
  MatX C = embed_c.forward(xm);
  MatX D = embed_d.forward(xm);
  MatX P = row_softmax(B * C.transpose());

  Tensor y({x.h(), x.w(), ch});
  y.pixmat().noalias() = P * D;
  y.pixmat() += xm;

  if (ctx) {
    ctx->x = x;
    ctx->B = std::move(B);
    ctx->C = std::move(C);
    ctx->D = std::move(D);
    ctx->P = std::move(P);
  }
  return y;
}

Tensor SpatialSelfAttention::backward(const Ctx& ctx, const Tensor& dy) {
  auto xm = ctx.x.pixmat();
  auto dym = dy.pixmat();

  MatX dD = ctx.P.transpose() * dym;
  MatX dP = dym * ctx.D.transpose();

  // softmax backward, row-wise: dS = P .* (dP - rowsum(dP .* P))
  MatX dS = dP;
  for (long i = 0; i < dS.rows(); ++i) {
    Scalar dot = dS.row(i).cwiseProduct(ctx.P.row(i)).sum();
    dS.row(i) = (ctx.P.row(i).array() * (dS.row(i).array() - dot)).matrix();
  }

  MatX dB = dS * ctx.C;
  MatX dC = dS.transpose() * ctx.B;

  Tensor dx = dy;  // residual path
  dx.pixmat() += embed_b.backward(xm, dB);
  dx.pixmat() += embed_c.backward(xm, dC);
  dx.pixmat() += embed_d.backward(xm, dD);
  return dx;
}

void SpatialSelfAttention::params(const std::string& prefix, std::vector<ParamRef>& out) {
  embed_b.params(prefix + ".b", out);
  embed_c.params(prefix + ".c", out);
  embed_d.params(prefix + ".d", out);
}

// ---------------------------------------------------------------------------
// Classification-gated channel attention
// ---------------------------------------------------------------------------

Tensor gated_attention(const Tensor& a, Scalar s, Scalar alpha) {
  Tensor y = a;
  const Scalar g = alpha * s;
  for (auto& v : y.v) v += g * v;
  return y;
}

Tensor ClassGate::forward(const Tensor& a, Scalar s, Ctx* ctx) const {
  if (ctx) {
    ctx->a = a;
    ctx->s = s;
  }
  return gated_attention(a, s, alpha.v[0]);
}

Tensor ClassGate::backward(const Ctx& ctx, const Tensor& dy, Scalar* ds) {
  check_same_shape(ctx.a, dy, "gate_backward");
  const Scalar al = alpha.v[0];
  Scalar dot = 0.0;
  for (size_t i = 0; i < dy.v.size(); ++i) dot += dy.v[i] * ctx.a.v[i];
  galpha.v[0] += ctx.s * dot;
  if (ds) *ds += al * dot;
  Tensor da = dy;
  const Scalar g = 1.0 + al * ctx.s;
  for (auto& v : da.v) v *= g;
  return da;
}

void ClassGate::params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".alpha", &alpha, &galpha});
}

}  // namespace attnseg
