#pragma once

#include <cstdint>
#include <string>

#include "accvit/ops.hpp"
#include "accvit/tensor.hpp"

// Dilated window partitioning and its inverse. A feature map is resampled
// into r*r sub-images, where sub-image (dy, dx) is the stride-r sampling of
// the map at offset (dy, dx):
//
//   out[(n*r + dy)*r + dx, c, i, j] = x[n, c, i*r + dy, j*r + dx]
//
// Every input pixel lands in exactly one sub-image, windowed attention over
// the sub-images is attention over dilated pixel grids, and departitioning is
// the bit-exact inverse. Plain non-overlapping PxP windowing lives here too.

namespace accvit {

struct PartitionSpec {
  int level = 1;        // k
  int rate = 2;         // r = 2^k
  std::int64_t input_h = 0;
  std::int64_t input_w = 0;
  std::int64_t sub_h = 0;
  std::int64_t sub_w = 0;

  // level 0 (rate 1) is the degenerate identity partition, allowed for tests.
  static PartitionSpec make(int level, std::int64_t h, std::int64_t w) {
    if (level < 0) throw PartitionError("PartitionSpec: level must be >= 0, got " + std::to_string(level));
    PartitionSpec s;
    s.level = level;
    s.rate = 1 << level;
    s.input_h = h;
    s.input_w = w;
    if (h % s.rate != 0) throw PartitionError("PartitionSpec: H=" + std::to_string(h) + " not divisible by rate " + std::to_string(s.rate));
    if (w % s.rate != 0) throw PartitionError("PartitionSpec: W=" + std::to_string(w) + " not divisible by rate " + std::to_string(s.rate));
    s.sub_h = h / s.rate;
    s.sub_w = w / s.rate;
    return s;
  }
};

struct WindowSpec {
  std::int64_t window = 1;  // P
  std::int64_t grid_h = 0;  // H / P
  std::int64_t grid_w = 0;  // W / P

  static WindowSpec make(std::int64_t window, std::int64_t h, std::int64_t w) {
    if (window < 1) throw PartitionError("WindowSpec: window must be >= 1, got " + std::to_string(window));
    if (h % window != 0) throw PartitionError("WindowSpec: H=" + std::to_string(h) + " not divisible by window " + std::to_string(window));
    if (w % window != 0) throw PartitionError("WindowSpec: W=" + std::to_string(w) + " not divisible by window " + std::to_string(window));
    return {window, h / window, w / window};
  }
};

namespace detail {

// Gather out[dst] = x[src] over the (dst, src) pairs produced by a loop-nest
// enumerator; backward scatters gradients through the same bijection (each
// source index is hit exactly once). Enumerators use plain nested loops so
// the mapping costs no divisions in the hot path.
template <typename T, class EnumFn>
Tensor<T> index_bijection(const Tensor<T>& x, Shape out_shape, EnumFn enumerate) {
  Tensor<T> out(out_shape);
  const T* xv = x.data().data();
  T* ov = out.data_mut().data();
  enumerate([xv, ov](std::int64_t dst, std::int64_t src) { ov[dst] = xv[src]; });
  if (taping<T>({&x})) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape<T>::current()->record(out.impl(), [xi, oi, enumerate] {
      if (oi->grad.empty()) return;
      T* gx = grad_of(xi.get()).data();
      const T* gy = oi->grad.data();
      enumerate([gx, gy](std::int64_t dst, std::int64_t src) { gx[src] += gy[dst]; });
    });
  }
  return out;
}

}  // namespace detail

// (N, C, H, W) -> (N*r^2, C, H/r, W/r); sub-image batch order is (dy, dx)
// row-major, matching the (b hs ws) rearrange layout.
template <typename T>
Tensor<T> partition_dilated(const Tensor<T>& x, const PartitionSpec& spec) {
  detail::require(x.rank() == 4, "partition_dilated: expects NCHW input, got " + x.shape().str());
  if (x.dim(2) != spec.input_h || x.dim(3) != spec.input_w)
    throw PartitionError("partition_dilated: input " + x.shape().str() + " does not match spec (" +
                         std::to_string(spec.input_h) + ", " + std::to_string(spec.input_w) + ")");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = spec.input_h, w = spec.input_w;
  const std::int64_t r = spec.rate, sh = spec.sub_h, sw = spec.sub_w;
  const Shape out_shape{n * r * r, c, sh, sw};
  return detail::index_bijection(x, out_shape, [=](auto&& emit) {
    std::int64_t dst = 0;  // output is written sequentially
    for (std::int64_t item = 0; item < n; ++item)
      for (std::int64_t dy = 0; dy < r; ++dy)
        for (std::int64_t dx = 0; dx < r; ++dx)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t plane = (item * c + ch) * h * w;
            for (std::int64_t i = 0; i < sh; ++i) {
              std::int64_t src = plane + (i * r + dy) * w + dx;
              for (std::int64_t j = 0; j < sw; ++j, src += r) emit(dst++, src);
            }
          }
  });
}

// Exact inverse of partition_dilated.
template <typename T>
Tensor<T> departition_dilated(const Tensor<T>& sub, const PartitionSpec& spec) {
  detail::require(sub.rank() == 4, "departition_dilated: expects rank-4 input, got " + sub.shape().str());
  const std::int64_t r = spec.rate;
  if (sub.dim(0) % (r * r) != 0)
    throw PartitionError("departition_dilated: batch " + std::to_string(sub.dim(0)) + " not divisible by r^2=" + std::to_string(r * r));
  if (sub.dim(2) != spec.sub_h || sub.dim(3) != spec.sub_w)
    throw PartitionError("departition_dilated: sub-image " + sub.shape().str() + " does not match spec (" +
                         std::to_string(spec.sub_h) + ", " + std::to_string(spec.sub_w) + ")");
  const std::int64_t n = sub.dim(0) / (r * r), c = sub.dim(1);
  const std::int64_t h = spec.input_h, w = spec.input_w, sh = spec.sub_h, sw = spec.sub_w;
  const Shape out_shape{n, c, h, w};
  return detail::index_bijection(sub, out_shape, [=](auto&& emit) {
    std::int64_t src = 0;  // sub-images are read sequentially
    for (std::int64_t item = 0; item < n; ++item)
      for (std::int64_t dy = 0; dy < r; ++dy)
        for (std::int64_t dx = 0; dx < r; ++dx)
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t plane = (item * c + ch) * h * w;
            for (std::int64_t i = 0; i < sh; ++i) {
              std::int64_t dst = plane + (i * r + dy) * w + dx;
              for (std::int64_t j = 0; j < sw; ++j, dst += r) emit(dst, src++);
            }
          }
  });
}

// (N, C, H, W) -> (N*(H/P)*(W/P), P^2, C): non-overlapping PxP windows,
// row-major over the window grid, tokens row-major within the window.
template <typename T>
Tensor<T> partition_windows(const Tensor<T>& x, const WindowSpec& spec) {
  detail::require(x.rank() == 4, "partition_windows: expects NCHW input, got " + x.shape().str());
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t p = spec.window;
  if (h != spec.grid_h * p || w != spec.grid_w * p)
    throw PartitionError("partition_windows: input " + x.shape().str() + " does not match window spec (P=" + std::to_string(p) + ")");
  const std::int64_t gh = spec.grid_h, gw = spec.grid_w;
  const Shape out_shape{n * gh * gw, p * p, c};
  return detail::index_bijection(x, out_shape, [=](auto&& emit) {
    std::int64_t dst = 0;  // (window, token, channel) written sequentially
    for (std::int64_t item = 0; item < n; ++item)
      for (std::int64_t wy = 0; wy < gh; ++wy)
        for (std::int64_t wx = 0; wx < gw; ++wx)
          for (std::int64_t ty = 0; ty < p; ++ty)
            for (std::int64_t tx = 0; tx < p; ++tx) {
              std::int64_t src = (item * c * h + (wy * p + ty)) * w + (wx * p + tx);
              for (std::int64_t ch = 0; ch < c; ++ch, src += h * w) emit(dst++, src);
            }
  });
}

// Exact inverse of partition_windows; (H, W) names the full-resolution target.
template <typename T>
Tensor<T> departition_windows(const Tensor<T>& win, const WindowSpec& spec, std::int64_t h, std::int64_t w) {
  detail::require(win.rank() == 3, "departition_windows: expects (windows, tokens, C) input, got " + win.shape().str());
  const std::int64_t p = spec.window, gh = spec.grid_h, gw = spec.grid_w;
  if (h != gh * p || w != gw * p)
    throw PartitionError("departition_windows: target (" + std::to_string(h) + ", " + std::to_string(w) + ") does not match window spec");
  if (win.dim(1) != p * p)
    throw PartitionError("departition_windows: token count " + std::to_string(win.dim(1)) + " != P^2=" + std::to_string(p * p));
  if (win.dim(0) % (gh * gw) != 0)
    throw PartitionError("departition_windows: window batch " + std::to_string(win.dim(0)) + " not divisible by grid " + std::to_string(gh * gw));
  const std::int64_t n = win.dim(0) / (gh * gw), c = win.dim(2);
  const Shape out_shape{n, c, h, w};
  return detail::index_bijection(win, out_shape, [=](auto&& emit) {
    std::int64_t src = 0;  // windows are read sequentially
    for (std::int64_t item = 0; item < n; ++item)
      for (std::int64_t wy = 0; wy < gh; ++wy)
        for (std::int64_t wx = 0; wx < gw; ++wx)
          for (std::int64_t ty = 0; ty < p; ++ty)
            for (std::int64_t tx = 0; tx < p; ++tx) {
              std::int64_t dst = (item * c * h + (wy * p + ty)) * w + (wx * p + tx);
              for (std::int64_t ch = 0; ch < c; ++ch, dst += h * w) emit(dst, src++);
            }
  });
}

}  // namespace accvit
