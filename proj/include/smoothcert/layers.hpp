#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "smoothcert/error.hpp"
#include "smoothcert/parallel.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

namespace detail {

// Dot product with eight independent lanes (vectorizes without
// reassociation), folded into double in a fixed order.
template <typename T>
double dot(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  double acc = 0.0;
  for (std::size_t l = 0; l < 8; ++l) acc += lanes[l];
  for (; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

// y = x W^T + b, x: [N, in], W: [out, in].
template <typename T>
class Dense {
 public:
  Dense(std::size_t in, std::size_t out)
      : weight(Shape{out, in}), bias(Shape{out}), in_(in), out_(out) {}

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }

  BasicTensor<T> weight;
  BasicTensor<T> bias;

  BasicTensor<T> forward(const BasicTensor<T>& x) {
    BasicTensor<T> y = infer(x);
    input_ = x;
    return y;
  }

  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    check(x);
    const std::size_t batch = x.dim(0);
    BasicTensor<T> y(Shape{batch, out_});
    parallel_for(batch, [&](std::size_t n) {
      const T* xr = x.ptr() + n * in_;
      for (std::size_t o = 0; o < out_; ++o) {
        y[n * out_ + o] = static_cast<T>(
            bias[o] + detail::dot(weight.ptr() + o * in_, xr, in_));
      }
    });
    return y;
  }

  BasicTensor<T> backward(const BasicTensor<T>& gy, bool need_input_grad) {
    const std::size_t batch = input_.dim(0);
    weight.ensure_grad();
    bias.ensure_grad();
    parallel_for(out_, [&](std::size_t o) {
      double db = 0.0;
      std::vector<double> dw(in_, 0.0);
      for (std::size_t n = 0; n < batch; ++n) {
        const double g = gy[n * out_ + o];
        db += g;
        const T* xr = input_.ptr() + n * in_;
        for (std::size_t i = 0; i < in_; ++i) dw[i] += g * xr[i];
      }
      bias.grad()[o] += static_cast<T>(db);
      T* wg = weight.grad().data() + o * in_;
      for (std::size_t i = 0; i < in_; ++i) wg[i] += static_cast<T>(dw[i]);
    });
    if (!need_input_grad) return {};
    BasicTensor<T> dx(input_.shape());
    parallel_for(batch, [&](std::size_t n) {
      T* dr = dx.ptr() + n * in_;
      for (std::size_t o = 0; o < out_; ++o) {
        detail::axpy(gy[n * out_ + o], weight.ptr() + o * in_, dr, in_);
      }
    });
    return dx;
  }

  void clear_cache() { input_ = {}; }

 private:
  void check(const BasicTensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != in_) {
      throw ShapeError("dense expects [N," + std::to_string(in_) + "], got " +
                       shape_str(x.shape()));
    }
  }

  std::size_t in_;
  std::size_t out_;
  BasicTensor<T> input_;
};

// 3x3 convolution, stride 1, zero padding 1, via explicit patch expansion:
// each sample becomes a [C_in*9, H*W] column matrix multiplied by the
// [C_out, C_in*9] filter bank.
template <typename T>
class Conv2d {
 public:
  static constexpr std::size_t kKernel = 3;
  static constexpr std::size_t kTaps = kKernel * kKernel;

  Conv2d(std::size_t in_channels, std::size_t out_channels)
      : weight(Shape{out_channels, in_channels, kKernel, kKernel}),
        bias(Shape{out_channels}),
        in_(in_channels),
        out_(out_channels) {}

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }

  BasicTensor<T> weight;
  BasicTensor<T> bias;

  BasicTensor<T> forward(const BasicTensor<T>& x) {
    check(x);
    height_ = x.dim(2);
    width_ = x.dim(3);
    batch_ = x.dim(0);
    const std::size_t rows = in_ * kTaps;
    const std::size_t plane = height_ * width_;
    cols_.resize(batch_ * rows * plane);
    BasicTensor<T> y(Shape{batch_, out_, height_, width_});
    parallel_for(batch_, [&](std::size_t n) {
      T* cols = cols_.data() + n * rows * plane;
      im2col(x.ptr() + n * in_ * plane, cols);
      multiply(cols, y.ptr() + n * out_ * plane, plane);
    });
    return y;
  }

  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    check(x);
    const std::size_t batch = x.dim(0);
    const std::size_t h = x.dim(2), w = x.dim(3);
    const std::size_t plane = h * w;
    BasicTensor<T> y(Shape{batch, out_, h, w});
    parallel_for(batch, [&](std::size_t n) {
      thread_local std::vector<T> cols;
      cols.resize(in_ * kTaps * plane);
      im2col(x.ptr() + n * in_ * plane, cols.data(), h, w);
      multiply(cols.data(), y.ptr() + n * out_ * plane, plane);
    });
    return y;
  }

  BasicTensor<T> backward(const BasicTensor<T>& gy, bool need_input_grad) {
    if (cols_.empty()) throw ShapeError("conv2d backward without forward");
    const std::size_t rows = in_ * kTaps;
    const std::size_t plane = height_ * width_;
    weight.ensure_grad();
    bias.ensure_grad();

    // Per-sample partials first, then a fixed-order double reduction, so the
    // result does not depend on how samples were split across threads.
    std::vector<T> partial(batch_ * out_ * rows);
    parallel_for(batch_, [&](std::size_t n) {
      const T* g = gy.ptr() + n * out_ * plane;
      const T* cols = cols_.data() + n * rows * plane;
      T* dst = partial.data() + n * out_ * rows;
      std::vector<T> cols_t(plane * rows);
      for (std::size_t q = 0; q < rows; ++q) {
        for (std::size_t p = 0; p < plane; ++p) cols_t[p * rows + q] = cols[q * plane + p];
      }
      for (std::size_t o = 0; o < out_; ++o) {
        for (std::size_t p = 0; p < plane; ++p) {
          detail::axpy(g[o * plane + p], cols_t.data() + p * rows, dst + o * rows, rows);
        }
      }
    });
    parallel_for(out_ * rows, [&](std::size_t idx) {
      double acc = 0.0;
      for (std::size_t n = 0; n < batch_; ++n) acc += partial[n * out_ * rows + idx];
      weight.grad()[idx] += static_cast<T>(acc);
    });
    for (std::size_t o = 0; o < out_; ++o) {
      double acc = 0.0;
      for (std::size_t n = 0; n < batch_; ++n) {
        const T* g = gy.ptr() + (n * out_ + o) * plane;
        for (std::size_t p = 0; p < plane; ++p) acc += g[p];
      }
      bias.grad()[o] += static_cast<T>(acc);
    }

    if (!need_input_grad) return {};
    BasicTensor<T> dx(Shape{batch_, in_, height_, width_});
    parallel_for(batch_, [&](std::size_t n) {
      std::vector<T> dcols(rows * plane, T{0});
      const T* g = gy.ptr() + n * out_ * plane;
      for (std::size_t o = 0; o < out_; ++o) {
        const T* wrow = weight.ptr() + o * rows;
        for (std::size_t q = 0; q < rows; ++q) {
          detail::axpy(wrow[q], g + o * plane, dcols.data() + q * plane, plane);
        }
      }
      col2im(dcols.data(), dx.ptr() + n * in_ * plane);
    });
    return dx;
  }

  void clear_cache() {
    cols_.clear();
    cols_.shrink_to_fit();
  }

 private:
  void check(const BasicTensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != in_) {
      throw ShapeError("conv2d expects [N," + std::to_string(in_) +
                       ",H,W], got " + shape_str(x.shape()));
    }
  }

  void im2col(const T* img, T* cols) const { im2col(img, cols, height_, width_); }

  void im2col(const T* img, T* cols, std::size_t h, std::size_t w) const {
    const std::size_t plane = h * w;
    for (std::size_t c = 0; c < in_; ++c) {
      const T* src = img + c * plane;
      for (std::size_t ky = 0; ky < kKernel; ++ky) {
        for (std::size_t kx = 0; kx < kKernel; ++kx) {
          T* dst = cols + ((c * kKernel + ky) * kKernel + kx) * plane;
          // Output columns [x0, x1) read source columns shifted by kx - 1.
          const std::size_t x0 = kx == 0 ? 1 : 0;
          const std::size_t x1 = kx == 2 ? w - 1 : w;
          for (std::size_t y = 0; y < h; ++y) {
            T* row = dst + y * w;
            const std::size_t sy = y + ky;
            if (sy == 0 || sy > h) {
              std::fill(row, row + w, T{0});
              continue;
            }
            const T* s_row = src + (sy - 1) * w + x0 + kx - 1;
            std::fill(row, row + x0, T{0});
            std::copy(s_row, s_row + (x1 - x0), row + x0);
            std::fill(row + x1, row + w, T{0});
          }
        }
      }
    }
  }

  void col2im(const T* cols, T* img) const {
    const std::size_t h = height_, w = width_, plane = h * w;
    for (std::size_t c = 0; c < in_; ++c) {
      T* dst = img + c * plane;
      for (std::size_t ky = 0; ky < kKernel; ++ky) {
        for (std::size_t kx = 0; kx < kKernel; ++kx) {
          const T* src = cols + ((c * kKernel + ky) * kKernel + kx) * plane;
          for (std::size_t y = 0; y < h; ++y) {
            const long sy = static_cast<long>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<long>(h)) continue;
            for (std::size_t x = 0; x < w; ++x) {
              const long sx = static_cast<long>(x + kx) - 1;
              if (sx < 0 || sx >= static_cast<long>(w)) continue;
              dst[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] +=
                  src[y * w + x];
            }
          }
        }
      }
    }
  }

  // out[o, p] = bias[o] + sum_q W[o, q] * cols[q, p], accumulated in q order
  // over register-sized tiles of p.
  void multiply(const T* cols, T* out, std::size_t plane) const {
    constexpr std::size_t kTile = 64;
    const std::size_t rows = in_ * kTaps;
    for (std::size_t o = 0; o < out_; ++o) {
      const T* wrow = weight.ptr() + o * rows;
      T* dst = out + o * plane;
      std::size_t p0 = 0;
      for (; p0 + kTile <= plane; p0 += kTile) {
        T acc[kTile];
        std::fill(acc, acc + kTile, bias[o]);
        for (std::size_t q = 0; q < rows; ++q) {
          const T wq = wrow[q];
          const T* c = cols + q * plane + p0;
          for (std::size_t l = 0; l < kTile; ++l) acc[l] += wq * c[l];
        }
        std::copy(acc, acc + kTile, dst + p0);
      }
      if (p0 < plane) {
        std::fill(dst + p0, dst + plane, bias[o]);
        for (std::size_t q = 0; q < rows; ++q) {
          detail::axpy(wrow[q], cols + q * plane + p0, dst + p0, plane - p0);
        }
      }
    }
  }

  std::size_t in_;
  std::size_t out_;
  std::size_t batch_ = 0, height_ = 0, width_ = 0;
  std::vector<T> cols_;
};

template <typename T>
class Relu {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x) {
    BasicTensor<T> y = infer(x);
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) mask_[i] = x[i] > T{0};
    shape_ = x.shape();
    return y;
  }

  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    BasicTensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(x[i], T{0});
    return y;
  }

  BasicTensor<T> backward(const BasicTensor<T>& gy) const {
    BasicTensor<T> dx(shape_);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = mask_[i] ? gy[i] : T{0};
    return dx;
  }

  void clear_cache() { mask_.clear(); }

 private:
  std::vector<unsigned char> mask_;
  Shape shape_;
};

// [N, ...] -> [N, prod(...)]
template <typename T>
class Flatten {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x) {
    shape_ = x.shape();
    return infer(x);
  }

  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    BasicTensor<T> y = x;
    y.drop_grad();
    y.reshape(Shape{x.dim(0), x.size() / x.dim(0)});
    return y;
  }

  BasicTensor<T> backward(const BasicTensor<T>& gy) const {
    BasicTensor<T> dx = gy;
    dx.reshape(shape_);
    return dx;
  }

  void clear_cache() {}

 private:
  Shape shape_;
};

// Global average pooling: [N, C, H, W] -> [N, C].
template <typename T>
class AvgPool {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x) {
    shape_ = x.shape();
    return infer(x);
  }

  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    if (x.rank() != 4) {
      throw ShapeError("avgpool expects [N,C,H,W], got " + shape_str(x.shape()));
    }
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t plane = x.dim(2) * x.dim(3);
    BasicTensor<T> y(Shape{x.dim(0), x.dim(1)});
    for (std::size_t i = 0; i < planes; ++i) {
      y[i] = static_cast<T>(detail::lane_sum(x.ptr() + i * plane, plane) /
                            static_cast<double>(plane));
    }
    return y;
  }

  BasicTensor<T> backward(const BasicTensor<T>& gy) const {
    BasicTensor<T> dx(shape_);
    const std::size_t plane = shape_[2] * shape_[3];
    const T scale = T{1} / static_cast<T>(plane);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      std::fill(dx.ptr() + i * plane, dx.ptr() + (i + 1) * plane, gy[i] * scale);
    }
    return dx;
  }

  void clear_cache() {}

 private:
  Shape shape_;
};

}  // namespace smoothcert
