#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nmrf/core/tape.hpp"

namespace nmrf {

namespace detail {

enum class Bcast { kSame, kScalar, kCol, kRow };

template <class S>
Bcast bcast_kind(const MatX<S>& a, const MatX<S>& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  throw std::invalid_argument("binary op: incompatible shapes");
}

template <class S>
MatX<S> reduce_like(const MatX<S>& g, Bcast kind) {
  switch (kind) {
    case Bcast::kSame: return g;
    case Bcast::kScalar: {
      MatX<S> r(1, 1);
      r(0, 0) = g.sum();
      return r;
    }
    case Bcast::kCol: return g.rowwise().sum();
    case Bcast::kRow: return g.colwise().sum();
  }
  return g;
}

template <class S>
MatX<S> expand_like(const MatX<S>& b, Eigen::Index rows, Eigen::Index cols, Bcast kind) {
  switch (kind) {
    case Bcast::kSame: return b;
    case Bcast::kScalar: return MatX<S>::Constant(rows, cols, b(0, 0));
    case Bcast::kCol: return b.replicate(1, cols);
    case Bcast::kRow: return b.replicate(rows, 1);
  }
  return b;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic

template <class S>
Var<S> vadd(Var<S> a, Var<S> b) {
  Tape<S>& t = a.tape();
  auto kind = detail::bcast_kind(a.value(), b.value());
  MatX<S> y = a.value() + detail::expand_like(b.value(), a.rows(), a.cols(), kind);
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  int id = t.add(std::move(y), rg, [ia, ib, kind](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, detail::reduce_like(g, kind));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> vsub(Var<S> a, Var<S> b) {
  Tape<S>& t = a.tape();
  auto kind = detail::bcast_kind(a.value(), b.value());
  MatX<S> y = a.value() - detail::expand_like(b.value(), a.rows(), a.cols(), kind);
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  int id = t.add(std::move(y), rg, [ia, ib, kind](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, MatX<S>(-detail::reduce_like(g, kind)));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> vmul(Var<S> a, Var<S> b) {
  Tape<S>& t = a.tape();
  auto kind = detail::bcast_kind(a.value(), b.value());
  MatX<S> bx = detail::expand_like(b.value(), a.rows(), a.cols(), kind);
  MatX<S> y = a.value().cwiseProduct(bx);
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  int id = t.add(std::move(y), rg, [ia, ib, kind](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    const MatX<S>& av = t.value(ia);
    MatX<S> bx = detail::expand_like(t.value(ib), av.rows(), av.cols(), kind);
    t.accumulate(ia, MatX<S>(g.cwiseProduct(bx)));
    t.accumulate(ib, detail::reduce_like(MatX<S>(g.cwiseProduct(av)), kind));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> scale(Var<S> a, S s) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  int id = t.add(MatX<S>(a.value() * s), a.requires_grad(), [ia, s](Tape<S>& t, int self) {
    t.accumulate(ia, MatX<S>(t.grad(self) * s));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> add_const(Var<S> a, S s) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  int id = t.add(MatX<S>(a.value().array() + s), a.requires_grad(), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = a.tape();
  MatX<S> y = a.value() * b.value();
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  int id = t.add(std::move(y), rg, [ia, ib](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, MatX<S>(g * t.value(ib).transpose()));
    if (t.requires_grad(ib)) t.accumulate(ib, MatX<S>(t.value(ia).transpose() * g));
  });
  return Var<S>(&t, id);
}

// y = x * W^T + bias (bias broadcast over rows); W is [out x in], bias [1 x out].
template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> bias) {
  Tape<S>& t = x.tape();
  MatX<S> y = x.value() * w.value().transpose();
  y.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(bias.value().row(0));
  bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  int ix = x.id(), iw = w.id(), ib = bias.id();
  int id = t.add(std::move(y), rg, [ix, iw, ib](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    if (t.requires_grad(ix)) t.accumulate(ix, MatX<S>(g * t.value(iw)));
    if (t.requires_grad(iw)) t.accumulate(iw, MatX<S>(g.transpose() * t.value(ix)));
    if (t.requires_grad(ib)) t.accumulate(ib, MatX<S>(g.colwise().sum()));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> linear_nobias(Var<S> x, Var<S> w) {
  Tape<S>& t = x.tape();
  MatX<S> y = x.value() * w.value().transpose();
  bool rg = x.requires_grad() || w.requires_grad();
  int ix = x.id(), iw = w.id();
  int id = t.add(std::move(y), rg, [ix, iw](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    if (t.requires_grad(ix)) t.accumulate(ix, MatX<S>(g * t.value(iw)));
    if (t.requires_grad(iw)) t.accumulate(iw, MatX<S>(g.transpose() * t.value(ix)));
  });
  return Var<S>(&t, id);
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities

template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value().cwiseMax(S(0));
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    MatX<S> mask = (t.value(ia).array() > S(0)).template cast<S>();
    t.accumulate(ia, MatX<S>(t.grad(self).cwiseProduct(mask)));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  const S inv_sqrt2 = S(0.7071067811865475);
  MatX<S> y = a.value().unaryExpr([&](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  int id = t.add(std::move(y), a.requires_grad(), [ia, inv_sqrt2](Tape<S>& t, int self) {
    const S inv_sqrt2pi = S(0.3989422804014327);
    MatX<S> d = t.value(ia).unaryExpr([&](S x) {
      S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
      S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
      return cdf + x * pdf;
    });
    t.accumulate(ia, MatX<S>(t.grad(self).cwiseProduct(d)));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> vsin(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  int id = t.add(MatX<S>(a.value().array().sin()), a.requires_grad(), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, MatX<S>(t.grad(self).array() * t.value(ia).array().cos()));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> vcos(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  int id = t.add(MatX<S>(a.value().array().cos()), a.requires_grad(), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, MatX<S>(-t.grad(self).array() * t.value(ia).array().sin()));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> square(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  int id = t.add(MatX<S>(a.value().array().square()), a.requires_grad(), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, MatX<S>(S(2) * t.grad(self).cwiseProduct(t.value(ia))));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> rsqrt(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value().array().rsqrt();
  int iy = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    // d/dx x^-1/2 = -1/2 x^-3/2 = -1/2 y^3
    const MatX<S>& yv = t.value(self);
    t.accumulate(ia, MatX<S>(S(-0.5) * t.grad(self).array() * yv.array().cube()));
  });
  return Var<S>(&t, iy);
}

template <class S>
Var<S> vabs(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  int id = t.add(MatX<S>(a.value().cwiseAbs()), a.requires_grad(), [ia](Tape<S>& t, int self) {
    MatX<S> sgn = t.value(ia).unaryExpr([](S x) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
    t.accumulate(ia, MatX<S>(t.grad(self).cwiseProduct(sgn)));
  });
  return Var<S>(&t, id);
}

// Huber with transition at |x| = 1.
template <class S>
Var<S> smooth_l1(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value().unaryExpr([](S x) {
    S ax = std::abs(x);
    return ax < S(1) ? S(0.5) * x * x : ax - S(0.5);
  });
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    MatX<S> d = t.value(ia).unaryExpr([](S x) { return x > S(1) ? S(1) : (x < S(-1) ? S(-1) : x); });
    t.accumulate(ia, MatX<S>(t.grad(self).cwiseProduct(d)));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> clampv(Var<S> a, S lo, S hi) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value().cwiseMax(lo).cwiseMin(hi);
  int id = t.add(std::move(y), a.requires_grad(), [ia, lo, hi](Tape<S>& t, int self) {
    MatX<S> mask = t.value(ia).unaryExpr([&](S x) { return (x > lo && x < hi) ? S(1) : S(0); });
    t.accumulate(ia, MatX<S>(t.grad(self).cwiseProduct(mask)));
  });
  return Var<S>(&t, id);
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
Var<S> vsum(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y(1, 1);
  y(0, 0) = a.value().sum();
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    const MatX<S>& av = t.value(ia);
    t.accumulate(ia, MatX<S>(MatX<S>::Constant(av.rows(), av.cols(), t.grad(self)(0, 0))));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> vmean(Var<S> a) {
  S inv = S(1) / S(a.value().size());
  return scale(vsum(a), inv);
}

template <class S>
Var<S> rowwise_sum(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value().rowwise().sum();
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    t.accumulate(ia, MatX<S>(g.replicate(1, t.value(ia).cols())));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> rowwise_mean(Var<S> a) {
  return scale(rowwise_sum(a), S(1) / S(a.value().cols()));
}

template <class S>
Var<S> colwise_sum(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value().colwise().sum();
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    t.accumulate(ia, MatX<S>(g.replicate(t.value(ia).rows(), 1)));
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> colwise_mean(Var<S> a) {
  return scale(colwise_sum(a), S(1) / S(a.value().rows()));
}

// ---------------------------------------------------------------------------
// softmax family

template <class S>
Var<S> softmax_rows(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    S m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    const MatX<S>& y = t.value(self);
    const MatX<S>& g = t.grad(self);
    MatX<S> gy = g.cwiseProduct(y);
    VecX<S> dot = gy.rowwise().sum();
    MatX<S> gx = gy - y.cwiseProduct(dot.replicate(1, y.cols()));
    t.accumulate(ia, gx);
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> log_softmax_rows(Var<S> a) {
  Tape<S>& t = a.tape();
  int ia = a.id();
  MatX<S> y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    S m = y.row(r).maxCoeff();
    S lse = std::log((y.row(r).array() - m).exp().sum()) + m;
    y.row(r).array() -= lse;
  }
  int id = t.add(std::move(y), a.requires_grad(), [ia](Tape<S>& t, int self) {
    const MatX<S>& y = t.value(self);
    const MatX<S>& g = t.grad(self);
    VecX<S> gsum = g.rowwise().sum();
    MatX<S> sm = y.array().exp();
    MatX<S> gx = g - sm.cwiseProduct(gsum.replicate(1, y.cols()));
    t.accumulate(ia, gx);
  });
  return Var<S>(&t, id);
}

// Softmax over groups of `group` consecutive rows, independently per column.
// Row layout is (group-major, member-minor).
template <class S>
Var<S> softmax_rowgroups(Var<S> a, int group) {
  Tape<S>& t = a.tape();
  if (a.rows() % group != 0) throw std::invalid_argument("softmax_rowgroups: rows not divisible");
  int ia = a.id();
  MatX<S> y = a.value();
  const Eigen::Index ng = y.rows() / group;
  for (Eigen::Index g = 0; g < ng; ++g) {
    auto blk = y.middleRows(g * group, group);
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      S m = blk.col(c).maxCoeff();
      blk.col(c) = (blk.col(c).array() - m).exp();
      blk.col(c) /= blk.col(c).sum();
    }
  }
  int id = t.add(std::move(y), a.requires_grad(), [ia, group](Tape<S>& t, int self) {
    const MatX<S>& y = t.value(self);
    const MatX<S>& g = t.grad(self);
    MatX<S> gx(y.rows(), y.cols());
    const Eigen::Index ng = y.rows() / group;
    for (Eigen::Index gi = 0; gi < ng; ++gi) {
      auto yb = y.middleRows(gi * group, group);
      auto gb = g.middleRows(gi * group, group);
      auto xb = gx.middleRows(gi * group, group);
      for (Eigen::Index c = 0; c < y.cols(); ++c) {
        S dot = yb.col(c).dot(gb.col(c));
        xb.col(c) = yb.col(c).cwiseProduct(gb.col(c).array().matrix() - VecX<S>::Constant(group, dot));
      }
    }
    t.accumulate(ia, gx);
  });
  return Var<S>(&t, id);
}

// ---------------------------------------------------------------------------
// structure ops

// out.row(n) = x.row(idx[n]), or zeros where idx[n] < 0.
template <class S>
Var<S> gather_rows(Var<S> x, std::vector<int> idx) {
  Tape<S>& t = x.tape();
  int ix = x.id();
  const MatX<S>& xv = x.value();
  MatX<S> y(static_cast<Eigen::Index>(idx.size()), xv.cols());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    if (idx[n] >= 0)
      y.row(n) = xv.row(idx[n]);
    else
      y.row(n).setZero();
  }
  int id = t.add(std::move(y), x.requires_grad(), [ix, idx = std::move(idx)](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    MatX<S>& gx = t.grad(ix);
    for (std::size_t n = 0; n < idx.size(); ++n)
      if (idx[n] >= 0) gx.row(idx[n]) += g.row(n);
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> slice_cols(Var<S> x, Eigen::Index off, Eigen::Index n) {
  Tape<S>& t = x.tape();
  int ix = x.id();
  MatX<S> y = x.value().middleCols(off, n);
  int id = t.add(std::move(y), x.requires_grad(), [ix, off, n](Tape<S>& t, int self) {
    t.grad(ix).middleCols(off, n) += t.grad(self);
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> slice_rows(Var<S> x, Eigen::Index off, Eigen::Index n) {
  Tape<S>& t = x.tape();
  int ix = x.id();
  MatX<S> y = x.value().middleRows(off, n);
  int id = t.add(std::move(y), x.requires_grad(), [ix, off, n](Tape<S>& t, int self) {
    t.grad(ix).middleRows(off, n) += t.grad(self);
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
  Tape<S>& t = xs[0].tape();
  Eigen::Index rows = xs[0].rows(), cols = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& x : xs) {
    if (x.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += x.cols();
    widths.push_back(x.cols());
    ids.push_back(x.id());
    rg = rg || x.requires_grad();
  }
  MatX<S> y(rows, cols);
  Eigen::Index off = 0;
  for (const auto& x : xs) {
    y.middleCols(off, x.cols()) = x.value();
    off += x.cols();
  }
  int id = t.add(std::move(y), rg, [ids, widths](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.grad(ids[i]) += g.middleCols(off, widths[i]);
      off += widths[i];
    }
  });
  return Var<S>(&t, id);
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty");
  Tape<S>& t = xs[0].tape();
  Eigen::Index cols = xs[0].cols(), rows = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const auto& x : xs) {
    if (x.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += x.rows();
    heights.push_back(x.rows());
    ids.push_back(x.id());
    rg = rg || x.requires_grad();
  }
  MatX<S> y(rows, cols);
  Eigen::Index off = 0;
  for (const auto& x : xs) {
    y.middleRows(off, x.rows()) = x.value();
    off += x.rows();
  }
  int id = t.add(std::move(y), rg, [ids, heights](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.grad(ids[i]) += g.middleRows(off, heights[i]);
      off += heights[i];
    }
  });
  return Var<S>(&t, id);
}

// Linear interpolation along the column axis of a (h x w) grid stored as a
// [h*w x C] matrix. Sample n reads row `row_of[n]` of the grid at continuous
// column pos[n]; pos < 0 or pos > w-1 yields a zero feature. Differentiable in
// both the grid and the positions.
template <class S>
Var<S> sample_cols(Var<S> grid, int w, const std::vector<int>& row_of, Var<S> pos) {
  Tape<S>& t = grid.tape();
  if (pos.cols() != 1 || pos.rows() != static_cast<Eigen::Index>(row_of.size()))
    throw std::invalid_argument("sample_cols: pos must be [n x 1] matching row_of");
  const MatX<S>& gv = grid.value();
  const MatX<S>& pv = pos.value();
  const Eigen::Index n = pv.rows(), c = gv.cols();
  MatX<S> y(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    S x = pv(i, 0);
    if (!(x >= S(0)) || x > S(w - 1)) {
      y.row(i).setZero();
      continue;
    }
    int c0 = static_cast<int>(std::floor(x));
    if (c0 >= w - 1) c0 = w - 2 >= 0 ? w - 2 : 0;
    S f = x - S(c0);
    Eigen::Index base = static_cast<Eigen::Index>(row_of[i]) * w;
    if (w == 1)
      y.row(i) = gv.row(base);
    else
      y.row(i) = (S(1) - f) * gv.row(base + c0) + f * gv.row(base + c0 + 1);
  }
  bool rg = grid.requires_grad() || pos.requires_grad();
  int ig = grid.id(), ip = pos.id();
  int id = t.add(std::move(y), rg, [ig, ip, w, row_of](Tape<S>& t, int self) {
    const MatX<S>& g = t.grad(self);
    const MatX<S>& gv = t.value(ig);
    const MatX<S>& pv = t.value(ip);
    const bool need_grid = t.requires_grad(ig);
    const bool need_pos = t.requires_grad(ip);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      S x = pv(i, 0);
      if (!(x >= S(0)) || x > S(w - 1)) continue;
      int c0 = static_cast<int>(std::floor(x));
      if (c0 >= w - 1) c0 = w - 2 >= 0 ? w - 2 : 0;
      S f = x - S(c0);
      Eigen::Index base = static_cast<Eigen::Index>(row_of[i]) * w;
      if (w == 1) {
        if (need_grid) t.grad(ig).row(base) += g.row(i);
        continue;
      }
      if (need_grid) {
        t.grad(ig).row(base + c0) += (S(1) - f) * g.row(i);
        t.grad(ig).row(base + c0 + 1) += f * g.row(i);
      }
      if (need_pos) {
        S d = g.row(i).dot(gv.row(base + c0 + 1) - gv.row(base + c0));
        t.grad(ip)(i, 0) += d;
      }
    }
  });
  return Var<S>(&t, id);
}

// ---------------------------------------------------------------------------
// normalization helpers (composed from primitives)

// Normalizes each row to zero mean / unit variance across columns, then
// applies a learned per-column affine. gamma/beta are [1 x C].
template <class S>
Var<S> channel_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Var<S> m = rowwise_mean(x);
  Var<S> d = vsub(x, m);
  Var<S> v = rowwise_mean(square(d));
  Var<S> inv = rsqrt(add_const(v, eps));
  Var<S> y = vmul(d, inv);
  return vadd(vmul(y, gamma), beta);
}

// Instance norm over a [H*W x C] feature map: per-column statistics.
template <class S>
Var<S> instance_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Var<S> m = colwise_mean(x);
  Var<S> d = vsub(x, m);
  Var<S> v = colwise_mean(square(d));
  Var<S> inv = rsqrt(add_const(v, eps));
  Var<S> y = vmul(d, inv);
  return vadd(vmul(y, gamma), beta);
}

// Sinusoidal encoding of a column of scalars: [sin(w_t x) ..., cos(w_t x) ...].
template <class S>
Var<S> sinusoidal_encoding(Var<S> x, int dim, S base = S(10000)) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_encoding: dim must be even");
  Tape<S>& t = x.tape();
  const int half = dim / 2;
  MatX<S> freqs(1, half);
  for (int i = 0; i < half; ++i) freqs(0, i) = std::pow(base, -S(i) / S(half));
  Var<S> phase = matmul(x, constant(t, std::move(freqs)));
  return concat_cols<S>({vsin(phase), vcos(phase)});
}

}  // namespace nmrf
