// SPDX-License-Identifier: Apache-2.0
//
// Causal scaled dot-product attention, in two forms:
//  * causal_attention: composed from tape primitives (scores, mask, softmax).
//  * blockwise_attention: fused tiled kernel with an online softmax. Keys and
//    values stream through in blocks; only a block x block score tile exists
//    at any time. The backward pass recomputes tiles from the saved row
//    log-sum-exp.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "icl_lab/autodiff.hpp"

namespace icl::ad {

namespace detail {
inline void check_qkv(const Shape& q, const Shape& k, const Shape& v, const char* op) {
  if (q.size() < 2 || q != k || q != v) {
    throw ShapeError(std::string(op) + ": q/k/v must share a shape [..., T, d_head], got " + shape_str(q) + ", " +
                     shape_str(k) + ", " + shape_str(v));
  }
}
}  // namespace detail

/// softmax(q k^T / sqrt(d_head) + causal mask) v over the last two axes.
inline Var causal_attention(Var q, Var k, Var v) {
  detail::check_qkv(q.shape(), k.shape(), v.shape(), "causal_attention");
  const double s = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Var scores = scale(matmul(q, transpose_last2(k)), s);
  Var probs = softmax_last(causal_mask(scores));
  return matmul(probs, v);
}

/// Optional forward-pass record: running_max[row] lists the row's running
/// maximum after each key block it consumed.
struct BlockwiseTrace {
  std::vector<std::vector<double>> running_max;
};

inline Var blockwise_attention(Var q, Var k, Var v, std::size_t block_size, BlockwiseTrace* trace = nullptr) {
  detail::check_qkv(q.shape(), k.shape(), v.shape(), "blockwise_attention");
  if (block_size < 1) throw ShapeError("blockwise_attention: block_size must be >= 1");
  Tape& tape = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const Shape& sh = q.shape();
  const std::size_t T = sh[sh.size() - 2], dh = sh.back();
  const std::size_t mats = T * dh == 0 ? 0 : q.value().size() / (T * dh);
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t bs = block_size;

  Tensor out(sh);
  auto lse = std::make_shared<std::vector<double>>(mats * T);
  if (trace) trace->running_max.assign(mats * T, {});

  const double* Q = q.value().data().data();
  const double* K = k.value().data().data();
  const double* V = v.value().data().data();
  std::vector<double> tile(bs * bs);
  std::vector<double> row_max(bs), row_sum(bs);
  for (std::size_t m = 0; m < mats; ++m) {
    const double* Qm = Q + m * T * dh;
    const double* Km = K + m * T * dh;
    const double* Vm = V + m * T * dh;
    double* Om = out.data().data() + m * T * dh;
    for (std::size_t i0 = 0; i0 < T; i0 += bs) {
      const std::size_t i1 = std::min(T, i0 + bs);
      std::fill(row_max.begin(), row_max.end(), -std::numeric_limits<double>::infinity());
      std::fill(row_sum.begin(), row_sum.end(), 0.0);
      for (std::size_t j0 = 0; j0 < i1; j0 += bs) {
        const std::size_t j1 = std::min(T, j0 + bs);
        for (std::size_t i = i0; i < i1; ++i) {
          const std::size_t ii = i - i0;
          const std::size_t jmax = std::min(j1, i + 1);  // causal: keys j <= i
          if (jmax <= j0) continue;
          double bmax = -std::numeric_limits<double>::infinity();
          for (std::size_t j = j0; j < jmax; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += Qm[i * dh + e] * Km[j * dh + e];
            s *= scale_f;
            tile[ii * bs + (j - j0)] = s;
            bmax = std::max(bmax, s);
          }
          const double new_max = std::max(row_max[ii], bmax);
          const double corr = std::exp(row_max[ii] - new_max);
          double* o = Om + i * dh;
          for (std::size_t e = 0; e < dh; ++e) o[e] *= corr;
          double sum = row_sum[ii] * corr;
          for (std::size_t j = j0; j < jmax; ++j) {
            const double p = std::exp(tile[ii * bs + (j - j0)] - new_max);
            sum += p;
            for (std::size_t e = 0; e < dh; ++e) o[e] += p * Vm[j * dh + e];
          }
          row_sum[ii] = sum;
          row_max[ii] = new_max;
          if (trace) trace->running_max[m * T + i].push_back(new_max);
        }
      }
      for (std::size_t i = i0; i < i1; ++i) {
        const std::size_t ii = i - i0;
        double* o = Om + i * dh;
        for (std::size_t e = 0; e < dh; ++e) o[e] /= row_sum[ii];
        (*lse)[m * T + i] = row_max[ii] + std::log(row_sum[ii]);
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return tape.record(
      "blockwise_attention", std::move(out), {iq, ik, iv},
      [iq, ik, iv, mats, T, dh, bs, scale_f, lse](Tape& t, std::size_t self) {
        const double* G = t.upstream(self).data().data();
        const double* O = t.value(self).data().data();
        const double* Q = t.value(iq).data().data();
        const double* K = t.value(ik).data().data();
        const double* V = t.value(iv).data().data();
        double* GQ = t.requires_grad(iq) ? t.grad_buffer(iq).data().data() : nullptr;
        double* GK = t.requires_grad(ik) ? t.grad_buffer(ik).data().data() : nullptr;
        double* GV = t.requires_grad(iv) ? t.grad_buffer(iv).data().data() : nullptr;
        std::vector<double> Drow(T);
        for (std::size_t m = 0; m < mats; ++m) {
          const std::size_t off = m * T * dh;
          for (std::size_t i = 0; i < T; ++i) {
            double s = 0.0;
            for (std::size_t e = 0; e < dh; ++e) s += G[off + i * dh + e] * O[off + i * dh + e];
            Drow[i] = s;
          }
          for (std::size_t j0 = 0; j0 < T; j0 += bs) {
            const std::size_t j1 = std::min(T, j0 + bs);
            for (std::size_t i = j0; i < T; ++i) {
              const std::size_t jmax = std::min(j1, i + 1);
              const double L = (*lse)[m * T + i];
              for (std::size_t j = j0; j < jmax; ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += Q[off + i * dh + e] * K[off + j * dh + e];
                const double p = std::exp(s * scale_f - L);
                double dp = 0.0;
                for (std::size_t e = 0; e < dh; ++e) dp += G[off + i * dh + e] * V[off + j * dh + e];
                const double ds = p * (dp - Drow[i]) * scale_f;
                for (std::size_t e = 0; e < dh; ++e) {
                  if (GV) GV[off + j * dh + e] += p * G[off + i * dh + e];
                  if (GQ) GQ[off + i * dh + e] += ds * K[off + j * dh + e];
                  if (GK) GK[off + j * dh + e] += ds * Q[off + i * dh + e];
                }
              }
            }
          }
        }
      });
}

}  // namespace icl::ad
