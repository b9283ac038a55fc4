// SPDX-License-Identifier: Apache-2.0
//
// Selective state-space scan with a zero-order-hold style discretisation:
//   abar[t, d, n] = exp(-delta[t, d] * a[d, n])
//   bbar[t, d, n] = delta[t, d] * b[t, n]
//   h[t] = abar[t] * h[t-1] + bbar[t] * u[t]
//   y[t, d] = sum_n c[t, n] * h[t, d, n]
// The fused primitive never stores abar/bbar, only the hidden states.

#pragma once

#include <cmath>
#include <memory>

#include "icl_lab/autodiff.hpp"

namespace icl::ad {

/// delta, u: [B, T, D]; a: [D, N] (positive); b, c: [B, T, N]. Output [B, T, D].
inline Var selective_scan_zoh(Var delta, Var a, Var b, Var c, Var u) {
  Tape& tape = detail::same_tape(delta, a);
  detail::same_tape(delta, b);
  detail::same_tape(delta, c);
  detail::same_tape(delta, u);
  const Shape& su = u.shape();
  if (su.size() != 3 || delta.shape() != su || a.shape().size() != 2 || a.shape()[0] != su[2] ||
      b.shape() != Shape{su[0], su[1], a.shape()[1]} || c.shape() != b.shape()) {
    throw ShapeError("selective_scan_zoh shape mismatch: delta " + shape_str(delta.shape()) + ", a " +
                     shape_str(a.shape()) + ", b " + shape_str(b.shape()) + ", c " + shape_str(c.shape()) + ", u " +
                     shape_str(su));
  }
  const std::size_t B = su[0], T = su[1], D = su[2], N = a.shape()[1];
  const Tensor& Dl = delta.value();
  const Tensor& Av = a.value();
  const Tensor& Bv = b.value();
  const Tensor& Cv = c.value();
  const Tensor& U = u.value();
  auto H = std::make_shared<Tensor>(Shape{B, T, D, N});
  Tensor y(su);
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t bt = bb * T + t;
      for (std::size_t d = 0; d < D; ++d) {
        const double dl = Dl[bt * D + d];
        const double ud = U[bt * D + d];
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const double ab = std::exp(-dl * Av[d * N + n]);
          const double hp = t == 0 ? 0.0 : (*H)[((bt - 1) * D + d) * N + n];
          const double h = ab * hp + dl * Bv[bt * N + n] * ud;
          (*H)[(bt * D + d) * N + n] = h;
          acc += Cv[bt * N + n] * h;
        }
        y[bt * D + d] = acc;
      }
    }
  if (!H->all_finite()) throw NonFiniteError("selective scan produced a non-finite hidden state");

  const std::size_t idl = delta.id(), ia = a.id(), ib = b.id(), ic = c.id(), iu = u.id();
  return tape.record(
      "selective_scan_zoh", std::move(y), {idl, ia, ib, ic, iu},
      [idl, ia, ib, ic, iu, B, T, D, N, H](Tape& tp, std::size_t self) {
        const Tensor& G = tp.upstream(self);
        const Tensor& Dl = tp.value(idl);
        const Tensor& Av = tp.value(ia);
        const Tensor& Bv = tp.value(ib);
        const Tensor& Cv = tp.value(ic);
        const Tensor& U = tp.value(iu);
        Tensor* gdl = tp.requires_grad(idl) ? &tp.grad_buffer(idl) : nullptr;
        Tensor* ga = tp.requires_grad(ia) ? &tp.grad_buffer(ia) : nullptr;
        Tensor* gb = tp.requires_grad(ib) ? &tp.grad_buffer(ib) : nullptr;
        Tensor* gc = tp.requires_grad(ic) ? &tp.grad_buffer(ic) : nullptr;
        Tensor* gu = tp.requires_grad(iu) ? &tp.grad_buffer(iu) : nullptr;
        std::vector<double> adj(D * N);
        for (std::size_t bb = 0; bb < B; ++bb) {
          std::fill(adj.begin(), adj.end(), 0.0);
          for (std::size_t t = T; t-- > 0;) {
            const std::size_t bt = bb * T + t;
            for (std::size_t d = 0; d < D; ++d) {
              const double gy = G[bt * D + d];
              const double dl = Dl[bt * D + d];
              const double ud = U[bt * D + d];
              double g_dl = 0.0, g_u = 0.0;
              for (std::size_t n = 0; n < N; ++n) {
                const std::size_t hi = (bt * D + d) * N + n;
                const double h = (*H)[hi];
                const double hp = t == 0 ? 0.0 : (*H)[hi - D * N];
                double& gh = adj[d * N + n];
                gh += Cv[bt * N + n] * gy;
                if (gc) (*gc)[bt * N + n] += gy * h;
                const double an = Av[d * N + n];
                const double ab = std::exp(-dl * an);
                const double g_ab = gh * hp;
                const double g_bb = gh * ud;
                g_dl += g_ab * ab * (-an) + g_bb * Bv[bt * N + n];
                if (ga) (*ga)[d * N + n] += g_ab * ab * (-dl);
                if (gb) (*gb)[bt * N + n] += g_bb * dl;
                g_u += gh * dl * Bv[bt * N + n];
                gh *= ab;
              }
              if (gdl) (*gdl)[bt * D + d] += g_dl;
              if (gu) (*gu)[bt * D + d] += g_u;
            }
          }
        }
      });
}

}  // namespace icl::ad
