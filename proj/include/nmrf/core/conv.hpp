#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "nmrf/core/ops.hpp"

namespace nmrf {

enum class Pad { kZero, kReplicate };

struct ConvGeometry {
  int h = 0, w = 0, cin = 0, k = 0, stride = 1, pad = 0;
  Pad mode = Pad::kZero;
  int out_h() const { return (h + 2 * pad - k) / stride + 1; }
  int out_w() const { return (w + 2 * pad - k) / stride + 1; }
};

namespace detail {

// Source-row index per (output position, tap); -1 means zero fill.
inline std::shared_ptr<std::vector<int>> im2col_indices(const ConvGeometry& g) {
  auto idx = std::make_shared<std::vector<int>>();
  const int oh = g.out_h(), ow = g.out_w();
  idx->resize(static_cast<std::size_t>(oh) * ow * g.k * g.k);
  std::size_t n = 0;
  for (int oi = 0; oi < oh; ++oi) {
    for (int oj = 0; oj < ow; ++oj) {
      for (int ki = 0; ki < g.k; ++ki) {
        for (int kj = 0; kj < g.k; ++kj) {
          int si = oi * g.stride - g.pad + ki;
          int sj = oj * g.stride - g.pad + kj;
          if (g.mode == Pad::kReplicate) {
            si = si < 0 ? 0 : (si >= g.h ? g.h - 1 : si);
            sj = sj < 0 ? 0 : (sj >= g.w ? g.w - 1 : sj);
          }
          bool in = si >= 0 && si < g.h && sj >= 0 && sj < g.w;
          (*idx)[n++] = in ? si * g.w + sj : -1;
        }
      }
    }
  }
  return idx;
}

template <class S>
MatX<S> im2col(const MatX<S>& x, const ConvGeometry& g, const std::vector<int>& idx) {
  const int taps = g.k * g.k;
  const Eigen::Index rows = static_cast<Eigen::Index>(g.out_h()) * g.out_w();
  MatX<S> cols(rows, static_cast<Eigen::Index>(taps) * g.cin);
  for (Eigen::Index n = 0; n < rows; ++n) {
    for (int t = 0; t < taps; ++t) {
      int src = idx[static_cast<std::size_t>(n) * taps + t];
      if (src >= 0)
        cols.block(n, static_cast<Eigen::Index>(t) * g.cin, 1, g.cin) = x.row(src);
      else
        cols.block(n, static_cast<Eigen::Index>(t) * g.cin, 1, g.cin).setZero();
    }
  }
  return cols;
}

}  // namespace detail

// 2D convolution over a [h*w x cin] map; weight is [cout x k*k*cin], bias
// [1 x cout]. Output is [out_h*out_w x cout]. The im2col buffer is rebuilt in
// the backward pass instead of being kept on the tape.
template <class S>
Var<S> conv2d(Var<S> x, const ConvGeometry& g, Var<S> weight, Var<S> bias) {
  Tape<S>& t = x.tape();
  if (x.rows() != static_cast<Eigen::Index>(g.h) * g.w || x.cols() != g.cin)
    throw std::invalid_argument("conv2d: input shape mismatch");
  auto idx = detail::im2col_indices(g);
  MatX<S> cols = detail::im2col(x.value(), g, *idx);
  MatX<S> y = cols * weight.value().transpose();
  y.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(bias.value().row(0));
  bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  int ix = x.id(), iw = weight.id(), ib = bias.id();
  int id = t.add(std::move(y), rg, [ix, iw, ib, g, idx](Tape<S>& t, int self) {
    const MatX<S>& grad = t.grad(self);
    const int taps = g.k * g.k;
    if (t.requires_grad(iw)) {
      MatX<S> cols = detail::im2col(t.value(ix), g, *idx);
      t.grad(iw) += grad.transpose() * cols;
    }
    if (t.requires_grad(ib)) t.grad(ib) += grad.colwise().sum();
    if (t.requires_grad(ix)) {
      MatX<S> dcols = grad * t.value(iw);  // [n_out x taps*cin]
      MatX<S>& gx = t.grad(ix);
      for (Eigen::Index n = 0; n < dcols.rows(); ++n) {
        for (int tap = 0; tap < taps; ++tap) {
          int src = (*idx)[static_cast<std::size_t>(n) * taps + tap];
          if (src >= 0) gx.row(src) += dcols.block(n, static_cast<Eigen::Index>(tap) * g.cin, 1, g.cin);
        }
      }
    }
  });
  return Var<S>(&t, id);
}

// Depthwise 3x3 convolution (zero padding, stride 1) over a [h*w x c] map.
// weight is [c x 9], bias [1 x c].
template <class S>
Var<S> depthwise3x3(Var<S> x, int h, int w, Var<S> weight, Var<S> bias) {
  Tape<S>& t = x.tape();
  const Eigen::Index c = x.cols();
  ConvGeometry g{h, w, 1, 3, 1, 1, Pad::kZero};
  auto idx = detail::im2col_indices(g);
  const MatX<S>& xv = x.value();
  MatX<S> y = MatX<S>::Zero(xv.rows(), c);
  for (Eigen::Index n = 0; n < y.rows(); ++n) {
    for (int tap = 0; tap < 9; ++tap) {
      int src = (*idx)[static_cast<std::size_t>(n) * 9 + tap];
      if (src >= 0) y.row(n) += xv.row(src).cwiseProduct(weight.value().col(tap).transpose());
    }
  }
  y.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(bias.value().row(0));
  bool rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  int ix = x.id(), iw = weight.id(), ib = bias.id();
  int id = t.add(std::move(y), rg, [ix, iw, ib, idx](Tape<S>& t, int self) {
    const MatX<S>& grad = t.grad(self);
    const MatX<S>& xv = t.value(ix);
    const MatX<S>& wv = t.value(iw);
    const bool need_x = t.requires_grad(ix);
    const bool need_w = t.requires_grad(iw);
    for (Eigen::Index n = 0; n < grad.rows(); ++n) {
      for (int tap = 0; tap < 9; ++tap) {
        int src = (*idx)[static_cast<std::size_t>(n) * 9 + tap];
        if (src < 0) continue;
        if (need_x) t.grad(ix).row(src) += grad.row(n).cwiseProduct(wv.col(tap).transpose());
        if (need_w) t.grad(iw).col(tap) += grad.row(n).cwiseProduct(xv.row(src)).transpose();
      }
    }
    if (t.requires_grad(ib)) t.grad(ib) += grad.colwise().sum();
  });
  return Var<S>(&t, id);
}

// 2x2 average pooling with stride 2; h and w must be even.
template <class S>
Var<S> avg_pool2(Var<S> x, int h, int w) {
  if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("avg_pool2: odd extent");
  const int oh = h / 2, ow = w / 2;
  std::vector<int> i00(static_cast<std::size_t>(oh) * ow), i01(i00.size()), i10(i00.size()), i11(i00.size());
  for (int oi = 0; oi < oh; ++oi)
    for (int oj = 0; oj < ow; ++oj) {
      std::size_t n = static_cast<std::size_t>(oi) * ow + oj;
      i00[n] = (2 * oi) * w + 2 * oj;
      i01[n] = (2 * oi) * w + 2 * oj + 1;
      i10[n] = (2 * oi + 1) * w + 2 * oj;
      i11[n] = (2 * oi + 1) * w + 2 * oj + 1;
    }
  Var<S> s = vadd(vadd(gather_rows(x, i00), gather_rows(x, i01)),
                  vadd(gather_rows(x, i10), gather_rows(x, i11)));
  return scale(s, S(0.25));
}

}  // namespace nmrf
