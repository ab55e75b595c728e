#pragma once

#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "nmrf/core/ops.hpp"

namespace nmrf {

// Attention neighborhoods: each group is an independent softmax pool. allow
// masks pairs inside a group (empty matrix = fully connected); posidx maps a
// pair to a row of the relative-position tables (-1 = no positional terms).
struct AttnGroups {
  std::vector<std::vector<int>> tokens;
  std::vector<MatXu8> allow;
  std::vector<MatXi> posidx;
};

// Optional relative-position machinery. rq/rk/rv are [table_size x D] in the
// same channel layout as q/k/v; scalar_bias is [table_size x heads].
template <class S>
struct AttnTables {
  Var<S> rq, rk, rv;
  Var<S> scalar_bias;
  bool adaptive_bias = false;    // q.rk + k.rq logit terms
  bool position_agg = false;     // rv added to values
  bool use_scalar_bias = false;  // per-head scalar bias from posidx
};

// Multi-head softmax aggregation over the given groups:
//   out_a = sum_b alpha_ab (v_b + rv[pos])
//   alpha = softmax_b( q_a.k_b + q_a.rk[pos] + k_b.rq[pos] + bias[pos] )
// Tokens with no allowed partner receive a zero message.
template <class S>
Var<S> grouped_attention(Var<S> q, Var<S> k, Var<S> v, int heads,
                         std::shared_ptr<const AttnGroups> groups,
                         const AttnTables<S>* tables = nullptr) {
  Tape<S>& t = q.tape();
  const Eigen::Index n_tokens = q.rows(), dim = q.cols();
  if (dim % heads != 0) throw std::invalid_argument("grouped_attention: dim % heads != 0");
  const Eigen::Index dh = dim / heads;

  const bool has_tables = tables && tables->rq.defined();
  const bool adaptive = has_tables && tables->adaptive_bias;
  const bool posagg = has_tables && tables->position_agg;
  const bool sbias = tables && tables->use_scalar_bias && tables->scalar_bias.defined();

  // Saved softmax weights per (group, head) for the backward pass.
  auto alphas = std::make_shared<std::vector<MatX<S>>>();
  alphas->resize(groups->tokens.size() * heads);

  MatX<S> out = MatX<S>::Zero(n_tokens, dim);
  const MatX<S>& qv = q.value();
  const MatX<S>& kv = k.value();
  const MatX<S>& vv = v.value();

  for (std::size_t gi = 0; gi < groups->tokens.size(); ++gi) {
    const auto& toks = groups->tokens[gi];
    const Eigen::Index n = static_cast<Eigen::Index>(toks.size());
    if (n == 0) continue;
    const MatXu8* allow = groups->allow.size() > gi && groups->allow[gi].size() ? &groups->allow[gi] : nullptr;
    const MatXi* pos = groups->posidx.size() > gi && groups->posidx[gi].size() ? &groups->posidx[gi] : nullptr;

    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      MatX<S> qh(n, dh), kh(n, dh), vh(n, dh);
      for (Eigen::Index a = 0; a < n; ++a) {
        qh.row(a) = qv.row(toks[a]).middleCols(c0, dh);
        kh.row(a) = kv.row(toks[a]).middleCols(c0, dh);
        vh.row(a) = vv.row(toks[a]).middleCols(c0, dh);
      }
      MatX<S> logits = qh * kh.transpose();
      if (pos && adaptive) {
        MatX<S> p1 = qh * tables->rk.value().middleCols(c0, dh).transpose();  // [n x T]
        MatX<S> p2 = kh * tables->rq.value().middleCols(c0, dh).transpose();
        for (Eigen::Index a = 0; a < n; ++a)
          for (Eigen::Index b = 0; b < n; ++b) {
            int p = (*pos)(a, b);
            if (p >= 0) logits(a, b) += p1(a, p) + p2(b, p);
          }
      }
      if (pos && sbias) {
        const MatX<S>& bt = tables->scalar_bias.value();
        for (Eigen::Index a = 0; a < n; ++a)
          for (Eigen::Index b = 0; b < n; ++b) {
            int p = (*pos)(a, b);
            if (p >= 0) logits(a, b) += bt(p, h);
          }
      }

      MatX<S>& alpha = (*alphas)[gi * heads + h];
      alpha = MatX<S>::Zero(n, n);
      for (Eigen::Index a = 0; a < n; ++a) {
        S mx = -std::numeric_limits<S>::infinity();
        for (Eigen::Index b = 0; b < n; ++b)
          if (!allow || (*allow)(a, b)) mx = std::max(mx, logits(a, b));
        if (mx == -std::numeric_limits<S>::infinity()) continue;  // no partners
        S z = S(0);
        for (Eigen::Index b = 0; b < n; ++b) {
          if (!allow || (*allow)(a, b)) {
            S e = std::exp(logits(a, b) - mx);
            alpha(a, b) = e;
            z += e;
          }
        }
        alpha.row(a) /= z;
      }

      MatX<S> msg = alpha * vh;  // [n x dh]
      if (pos && posagg) {
        // A2(a,p) = sum_{b: pos(a,b)=p} alpha(a,b); msg += A2 * rv_head
        MatX<S> a2 = MatX<S>::Zero(n, tables->rv.rows());
        for (Eigen::Index a = 0; a < n; ++a)
          for (Eigen::Index b = 0; b < n; ++b) {
            int p = (*pos)(a, b);
            if (p >= 0 && alpha(a, b) != S(0)) a2(a, p) += alpha(a, b);
          }
        msg += a2 * tables->rv.value().middleCols(c0, dh);
      }
      for (Eigen::Index a = 0; a < n; ++a) out.row(toks[a]).middleCols(c0, dh) += msg.row(a);
    }
  }

  bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  int iq = q.id(), ik = k.id(), iv = v.id();
  int irq = -1, irk = -1, irv = -1, isb = -1;
  if (has_tables) {
    irq = tables->rq.id();
    irk = tables->rk.id();
    irv = tables->rv.id();
    rg = rg || tables->rq.requires_grad() || tables->rk.requires_grad() || tables->rv.requires_grad();
  }
  if (sbias) {
    isb = tables->scalar_bias.id();
    rg = rg || tables->scalar_bias.requires_grad();
  }

  int id = t.add(std::move(out), rg,
                 [iq, ik, iv, irq, irk, irv, isb, heads, dh, groups, alphas, adaptive, posagg,
                  sbias](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    const MatX<S>& qv = t.value(iq);
    const MatX<S>& kv = t.value(ik);
    const MatX<S>& vv = t.value(iv);
    const Eigen::Index tsize = irq >= 0 ? t.value(irq).rows() : 0;

    for (std::size_t gi = 0; gi < groups->tokens.size(); ++gi) {
      const auto& toks = groups->tokens[gi];
      const Eigen::Index n = static_cast<Eigen::Index>(toks.size());
      if (n == 0) continue;
      const MatXi* pos = groups->posidx.size() > gi && groups->posidx[gi].size() ? &groups->posidx[gi] : nullptr;

      for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = h * dh;
        const MatX<S>& alpha = (*alphas)[gi * heads + h];
        MatX<S> qh(n, dh), kh(n, dh), vh(n, dh), gh(n, dh);
        for (Eigen::Index a = 0; a < n; ++a) {
          qh.row(a) = qv.row(toks[a]).middleCols(c0, dh);
          kh.row(a) = kv.row(toks[a]).middleCols(c0, dh);
          vh.row(a) = vv.row(toks[a]).middleCols(c0, dh);
          gh.row(a) = g.row(toks[a]).middleCols(c0, dh);
        }

        // d(alpha)
        MatX<S> dalpha = gh * vh.transpose();
        if (pos && posagg) {
          MatX<S> grv = gh * t.value(irv).middleCols(c0, dh).transpose();  // [n x T]
          for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < n; ++b) {
              int p = (*pos)(a, b);
              if (p >= 0) dalpha(a, b) += grv(a, p);
            }
          // d(rv): A2^T * gh
          if (t.requires_grad(irv)) {
            MatX<S> a2 = MatX<S>::Zero(n, tsize);
            for (Eigen::Index a = 0; a < n; ++a)
              for (Eigen::Index b = 0; b < n; ++b) {
                int p = (*pos)(a, b);
                if (p >= 0 && alpha(a, b) != S(0)) a2(a, p) += alpha(a, b);
              }
            t.grad(irv).middleCols(c0, dh) += a2.transpose() * gh;
          }
        }
        // dv
        if (t.requires_grad(iv)) {
          MatX<S> dvh = alpha.transpose() * gh;
          for (Eigen::Index a = 0; a < n; ++a)
            t.grad(iv).row(toks[a]).middleCols(c0, dh) += dvh.row(a);
        }
        // softmax backward (rows of alpha; zero rows give zero dlogits)
        MatX<S> dlog(n, n);
        for (Eigen::Index a = 0; a < n; ++a) {
          S dot = alpha.row(a).dot(dalpha.row(a));
          dlog.row(a) = alpha.row(a).cwiseProduct(dalpha.row(a).array().matrix() -
                                                   Eigen::Matrix<S, 1, Eigen::Dynamic>::Constant(n, dot));
        }

        MatX<S> dqh = dlog * kh;
        MatX<S> dkh = dlog.transpose() * qh;
        if (pos && (adaptive || sbias)) {
          MatX<S> d1, d2;
          d1 = MatX<S>::Zero(n, std::max<Eigen::Index>(tsize, sbias ? t.value(isb).rows() : 0));
          d2 = MatX<S>::Zero(n, d1.cols());
          for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < n; ++b) {
              int p = (*pos)(a, b);
              if (p < 0 || dlog(a, b) == S(0)) continue;
              d1(a, p) += dlog(a, b);
              d2(b, p) += dlog(a, b);
            }
          if (adaptive) {
            dqh += d1.leftCols(tsize) * t.value(irk).middleCols(c0, dh);
            dkh += d2.leftCols(tsize) * t.value(irq).middleCols(c0, dh);
            if (t.requires_grad(irk)) t.grad(irk).middleCols(c0, dh) += d1.leftCols(tsize).transpose() * qh;
            if (t.requires_grad(irq)) t.grad(irq).middleCols(c0, dh) += d2.leftCols(tsize).transpose() * kh;
          }
          if (sbias && t.requires_grad(isb)) {
            const Eigen::Index bt = t.value(isb).rows();
            t.grad(isb).col(h) += d1.leftCols(bt).colwise().sum().transpose();
          }
        }
        if (t.requires_grad(iq))
          for (Eigen::Index a = 0; a < n; ++a) t.grad(iq).row(toks[a]).middleCols(c0, dh) += dqh.row(a);
        if (t.requires_grad(ik))
          for (Eigen::Index a = 0; a < n; ++a) t.grad(ik).row(toks[a]).middleCols(c0, dh) += dkh.row(a);
      }
    }
  });
  return Var<S>(&t, id);
}

}  // namespace nmrf
