#pragma once

// Independent reference implementations used to cross-check the production
// code. Everything here is written with plain per-element loops on purpose;
// none of it shares code with src/.

#include <cmath>
#include <optional>
#include <vector>

#include "attnseg/layers.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/model.hpp"
#include "attnseg/tensor.hpp"

namespace oracles {

using attnseg::Scalar;
using attnseg::Tensor;

/// Direct quadruple-loop convolution. Weight layout matches Conv2d:
/// (k*k*in_ch, out_ch) with patch rows ordered (ky, kx, ci).
inline Tensor naive_conv2d(const Tensor& x, const Tensor& W, const Tensor& b, int k, int stride,
                           int pad, int dilation) {
  const int h = x.h(), w = x.w(), ci = x.c();
  const int co = W.dim(1);
  const int span = dilation * (k - 1) + 1;
  const int oh = (h + 2 * pad - span) / stride + 1;
  const int ow = (w + 2 * pad - span) / stride + 1;
  Tensor y({oh, ow, co});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int oc = 0; oc < co; ++oc) {
        Scalar acc = b.v[static_cast<size_t>(oc)];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * stride - pad + ky * dilation;
            const int ix = ox * stride - pad + kx * dilation;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            for (int ic = 0; ic < ci; ++ic) {
              const int wrow = (ky * k + kx) * ci + ic;
              acc += x.at(iy, ix, ic) * W.v[static_cast<size_t>(wrow) * co + oc];
            }
          }
        }
        y.at(oy, ox, oc) = acc;
      }
    }
  }
  return y;
}

/// Dense non-local block: embeddings through explicit 1x1 products, an N x N
/// score matrix, row softmax with max subtraction, and the residual add.
inline Tensor dense_selfattn(const Tensor& x, const attnseg::SpatialSelfAttention& block) {
  const int h = x.h(), w = x.w(), c = x.c();
  const int n = h * w;
  const int e = block.embed_ch;

  auto embed = [&](const attnseg::Dense1x1& layer, int out_ch) {
    std::vector<std::vector<Scalar>> m(static_cast<size_t>(n),
                                       std::vector<Scalar>(static_cast<size_t>(out_ch)));
    for (int p = 0; p < n; ++p) {
      const int y = p / w, xx = p % w;
      for (int oc = 0; oc < out_ch; ++oc) {
        Scalar acc = layer.b.v[static_cast<size_t>(oc)];
        for (int ic = 0; ic < c; ++ic)
          acc += x.at(y, xx, ic) * layer.W.v[static_cast<size_t>(ic) * out_ch + oc];
        m[static_cast<size_t>(p)][static_cast<size_t>(oc)] = acc;
      }
    }
    return m;
  };

  auto B = embed(block.embed_b, e);
  auto C = embed(block.embed_c, e);
  auto D = embed(block.embed_d, c);

  Tensor out({h, w, c});
  for (int i = 0; i < n; ++i) {
    std::vector<Scalar> row(static_cast<size_t>(n));
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (int j = 0; j < n; ++j) {
      Scalar s = 0.0;
      for (int q = 0; q < e; ++q)
        s += B[static_cast<size_t>(i)][static_cast<size_t>(q)] *
             C[static_cast<size_t>(j)][static_cast<size_t>(q)];
      row[static_cast<size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    Scalar z = 0.0;
    for (int j = 0; j < n; ++j) {
      row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
      z += row[static_cast<size_t>(j)];
    }
    const int y = i / w, xx = i % w;
    for (int ch = 0; ch < c; ++ch) {
      Scalar acc = 0.0;
      for (int j = 0; j < n; ++j)
        acc += row[static_cast<size_t>(j)] / z * D[static_cast<size_t>(j)][static_cast<size_t>(ch)];
      out.at(y, xx, ch) = acc + x.at(y, xx, ch);
    }
  }
  return out;
}

/// Brute-force corpus metrics: every quantity recomputed with bare loops.
inline attnseg::MetricReport brute_force_report(const std::vector<attnseg::SegClassOutput>& outs,
                                                const std::vector<attnseg::EvalRecord>& recs,
                                                Scalar threshold) {
  const size_t n = outs.size();
  long tp = 0, fp = 0, tn = 0, fn = 0;
  double acc_sum = 0.0, cons_sum = 0.0;
  long cls_right = 0;
  bool any_cls = false;

  for (size_t i = 0; i < n; ++i) {
    const Tensor& prob = outs[i].seg_prob;
    const Tensor& gt = recs[i].mask;
    long right = 0, total = 0, pred_fire = 0;
    long itp = 0, ifp = 0, itn = 0, ifn = 0;
    for (int y = 0; y < prob.h(); ++y) {
      for (int x = 0; x < prob.w(); ++x) {
        const int p = prob.at(y, x, 0) >= threshold ? 1 : 0;
        const int g = gt.at(y, x, 0) != 0.0 ? 1 : 0;
        if (p == g) ++right;
        ++total;
        if (p == 1) ++pred_fire;
        if (p == 1 && g == 1) ++itp;
        if (p == 1 && g == 0) ++ifp;
        if (p == 0 && g == 0) ++itn;
        if (p == 0 && g == 1) ++ifn;
      }
    }
    tp += itp;
    fp += ifp;
    tn += itn;
    fn += ifn;
    acc_sum += static_cast<double>(right) / static_cast<double>(total);
    const int inferred = pred_fire > 0 ? 1 : 0;
    cons_sum += inferred == recs[i].label ? 1.0 : 0.0;
    if (outs[i].class_prob) {
      any_cls = true;
      const int cls = *outs[i].class_prob >= 0.5 ? 1 : 0;
      if (cls == recs[i].label) ++cls_right;
    }
  }

  attnseg::MetricReport r;
  r.pixel_accuracy = acc_sum / static_cast<double>(n);
  r.iou_fire = (tp + fp + fn) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
  r.iou_background =
      (tn + fp + fn) == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp + fn);
  r.mean_iou = (r.iou_fire + r.iou_background) / 2.0;
  if (any_cls) r.class_accuracy = static_cast<double>(cls_right) / static_cast<double>(n);
  r.avg_consistency = cons_sum / static_cast<double>(n);
  return r;
}

}  // namespace oracles
