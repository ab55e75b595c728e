#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "nmrf/core/types.hpp"

namespace nmrf {

// Multi-channel raster stored as [h*w x c]; row index = i*w + j.
struct ImageF {
  MatXf data;
  int h = 0, w = 0, c = 0;

  float at(int i, int j, int ch) const { return data(static_cast<Eigen::Index>(i) * w + j, ch); }
  float& at(int i, int j, int ch) { return data(static_cast<Eigen::Index>(i) * w + j, ch); }

  static ImageF zeros(int h, int w, int c) {
    ImageF im;
    im.h = h;
    im.w = w;
    im.c = c;
    im.data = MatXf::Zero(static_cast<Eigen::Index>(h) * w, c);
    return im;
  }
};

inline ImageF image_from_u8(const std::vector<std::uint8_t>& px, int h, int w, int c) {
  ImageF im = ImageF::zeros(h, w, c);
  for (Eigen::Index n = 0; n < im.data.rows(); ++n)
    for (int ch = 0; ch < c; ++ch) im.data(n, ch) = px[static_cast<std::size_t>(n) * c + ch] / 255.0f;
  return im;
}

struct PadInfo {
  int orig_h = 0, orig_w = 0;
  int padded_h = 0, padded_w = 0;
  bool padded() const { return orig_h != padded_h || orig_w != padded_w; }
};

inline int round_up(int x, int m) { return (x + m - 1) / m * m; }

// Replicate-pads the right and bottom borders so both extents are multiples
// of `multiple`.
inline ImageF pad_to_multiple(const ImageF& im, int multiple, PadInfo& info) {
  info.orig_h = im.h;
  info.orig_w = im.w;
  info.padded_h = round_up(im.h, multiple);
  info.padded_w = round_up(im.w, multiple);
  if (!info.padded()) return im;
  ImageF out = ImageF::zeros(info.padded_h, info.padded_w, im.c);
  for (int i = 0; i < info.padded_h; ++i) {
    int si = i < im.h ? i : im.h - 1;
    for (int j = 0; j < info.padded_w; ++j) {
      int sj = j < im.w ? j : im.w - 1;
      for (int ch = 0; ch < im.c; ++ch) out.at(i, j, ch) = im.at(si, sj, ch);
    }
  }
  return out;
}

// Crops a per-pixel map (h x w matrix) back to the original extent.
inline MatXf crop_map(const MatXf& m, const PadInfo& info) {
  return m.topLeftCorner(info.orig_h, info.orig_w);
}

}  // namespace nmrf
