#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "smoothcert/error.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

enum class Mode { train, eval };

// The four normalizations differ only in which elements share a mean and
// variance:
//   batch    - (N, H, W) per channel, with running statistics for eval
//   instance - (H, W) per (sample, channel)
//   group    - (channels-in-group, H, W) per (sample, group)
//   layer    - (C, H, W) per sample
enum class NormKind { batch, instance, group, layer };

inline std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::batch: return "batch";
    case NormKind::instance: return "instance";
    case NormKind::group: return "group";
    case NormKind::layer: return "layer";
  }
  return "?";
}

inline NormKind parse_norm_kind(std::string_view name) {
  if (name == "batch") return NormKind::batch;
  if (name == "instance") return NormKind::instance;
  if (name == "group") return NormKind::group;
  if (name == "layer") return NormKind::layer;
  throw Error("unknown norm kind '" + std::string(name) + "'");
}

inline constexpr double kNormEps = 1e-5;
inline constexpr double kNormMomentum = 0.1;

inline std::size_t default_groups(std::size_t channels) {
  return std::min<std::size_t>(32, channels);
}

template <typename T>
class NormLayer {
 public:
  NormLayer(NormKind kind, std::size_t channels, std::size_t groups = 0,
            double momentum = kNormMomentum, double eps = kNormEps)
      : gamma(Shape{channels ? channels : 1}, T{1}),
        beta(Shape{channels ? channels : 1}, T{0}),
        running_mean(Shape{channels ? channels : 1}, T{0}),
        running_var(Shape{channels ? channels : 1}, T{1}),
        kind_(kind),
        channels_(channels),
        groups_(kind == NormKind::group
                    ? (groups ? groups : default_groups(channels))
                    : 1),
        momentum_(momentum),
        eps_(eps) {
    if (channels == 0) throw ShapeError("norm layer needs at least one channel");
    if (kind_ == NormKind::group && channels_ % groups_ != 0) {
      throw ShapeError("group norm: " + std::to_string(channels_) +
                       " channels not divisible by " + std::to_string(groups_) +
                       " groups");
    }
    if (!(momentum_ > 0.0 && momentum_ <= 1.0)) {
      throw Error("norm momentum must lie in (0, 1]");
    }
    if (!(eps_ > 0.0)) throw Error("norm eps must be positive");
  }

  NormKind kind() const noexcept { return kind_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t groups() const noexcept { return groups_; }
  double momentum() const noexcept { return momentum_; }
  double eps() const noexcept { return eps_; }
  bool has_running_stats() const noexcept { return kind_ == NormKind::batch; }

  // Affine parameters: always exactly 2*C learnable scalars.
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  // Only meaningful for the batch kind.
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  bool stats_initialized = false;
  // Ablation switch: train-mode batch norm keeps using batch statistics but
  // stops folding them into the running estimates.
  bool freeze_running_stats = false;

  // Train-mode forward caches what backward() needs.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) {
    check_input(x);
    if (mode == Mode::train || kind_ != NormKind::batch) {
      Stats s = region_stats(x);
      if (kind_ == NormKind::batch && mode == Mode::train &&
          !freeze_running_stats) {
        update_running(s);
      }
      return remember(normalize(x, s, /*keep_xhat=*/true), s.fixed);
    }
    const Stats s = running_as_stats();
    return remember(normalize(x, s, /*keep_xhat=*/true), s.fixed);
  }

  // Eval-mode forward that touches no layer state; safe to share.
  BasicTensor<T> infer(const BasicTensor<T>& x) const {
    check_input(x);
    const Stats s =
        kind_ == NormKind::batch ? running_as_stats() : region_stats(x);
    return normalize(x, s, /*keep_xhat=*/false).y;
  }

  // Accumulates into gamma/beta gradients and returns the input gradient.
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) {
    if (cache_.xhat.empty() || grad_out.shape() != cache_.xhat.shape()) {
      throw ShapeError("norm backward called without a matching forward");
    }
    gamma.ensure_grad();
    beta.ensure_grad();
    const Layout lay = layout(grad_out.shape());
    const std::size_t plane = lay.plane;
    const T* dy = grad_out.ptr();
    const T* xh = cache_.xhat.ptr();

    std::vector<double> dgamma(channels_, 0.0), dbeta(channels_, 0.0);
    for (std::size_t n = 0; n < lay.batch; ++n) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t off = (n * channels_ + c) * plane;
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          sg += static_cast<double>(dy[off + i]) * xh[off + i];
          sb += dy[off + i];
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
      }
    }
    for (std::size_t c = 0; c < channels_; ++c) {
      gamma.grad()[c] += static_cast<T>(dgamma[c]);
      beta.grad()[c] += static_cast<T>(dbeta[c]);
    }

    BasicTensor<T> dx(grad_out.shape());
    T* out = dx.ptr();
    if (cache_.fixed_stats) {
      // Statistics were constants (eval-mode batch norm).
      for (std::size_t n = 0; n < lay.batch; ++n) {
        for (std::size_t c = 0; c < channels_; ++c) {
          const std::size_t off = (n * channels_ + c) * plane;
          const double scale = static_cast<double>(gamma[c]) * cache_.inv_std[c];
          for (std::size_t i = 0; i < plane; ++i) {
            out[off + i] = static_cast<T>(dy[off + i] * scale);
          }
        }
      }
      return dx;
    }

    // dx = inv_std * (g - mean_r(g) - xhat * mean_r(g * xhat)), g = dy * gamma
    const std::size_t regions = region_count(lay);
    std::vector<double> m1(regions, 0.0), m2(regions, 0.0);
    for (std::size_t n = 0; n < lay.batch; ++n) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t r = region_of(n, c, lay);
        const std::size_t off = (n * channels_ + c) * plane;
        const double gc = gamma[c];
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = dy[off + i] * gc;
          s1 += g;
          s2 += g * xh[off + i];
        }
        m1[r] += s1;
        m2[r] += s2;
      }
    }
    const double count = static_cast<double>(region_size(lay));
    for (std::size_t r = 0; r < regions; ++r) {
      m1[r] /= count;
      m2[r] /= count;
    }
    for (std::size_t n = 0; n < lay.batch; ++n) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t r = region_of(n, c, lay);
        const std::size_t off = (n * channels_ + c) * plane;
        const double gc = gamma[c];
        const double is = cache_.inv_std[r];
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = dy[off + i] * gc;
          out[off + i] = static_cast<T>(is * (g - m1[r] - xh[off + i] * m2[r]));
        }
      }
    }
    return dx;
  }

  void clear_cache() { cache_ = Cache{}; }

 private:
  struct Layout {
    std::size_t batch = 0;
    std::size_t plane = 0;  // H * W
  };

  struct Stats {
    std::vector<double> mean;
    std::vector<double> var;
    bool fixed = false;  // running statistics rather than data statistics
  };

  struct Cache {
    BasicTensor<T> xhat;
    std::vector<double> inv_std;
    bool fixed_stats = false;
  };

  void check_input(const BasicTensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != channels_) {
      throw ShapeError("norm layer expects [N," + std::to_string(channels_) +
                       ",H,W], got " + shape_str(x.shape()));
    }
  }

  static Layout layout(const Shape& s) { return {s[0], s[2] * s[3]}; }

  std::size_t region_count(const Layout& lay) const {
    switch (kind_) {
      case NormKind::batch: return channels_;
      case NormKind::instance: return lay.batch * channels_;
      case NormKind::group: return lay.batch * groups_;
      case NormKind::layer: return lay.batch;
    }
    return 0;
  }

  std::size_t region_of(std::size_t n, std::size_t c, const Layout&) const {
    switch (kind_) {
      case NormKind::batch: return c;
      case NormKind::instance: return n * channels_ + c;
      case NormKind::group: return n * groups_ + c / (channels_ / groups_);
      case NormKind::layer: return n;
    }
    return 0;
  }

  std::size_t region_size(const Layout& lay) const {
    switch (kind_) {
      case NormKind::batch: return lay.batch * lay.plane;
      case NormKind::instance: return lay.plane;
      case NormKind::group: return (channels_ / groups_) * lay.plane;
      case NormKind::layer: return channels_ * lay.plane;
    }
    return 0;
  }

  // Two-pass mean and population variance per region, accumulated in double.
  Stats region_stats(const BasicTensor<T>& x) const {
    const Layout lay = layout(x.shape());
    const std::size_t regions = region_count(lay);
    Stats s;
    s.mean.assign(regions, 0.0);
    s.var.assign(regions, 0.0);
    const T* px = x.ptr();
    for (std::size_t n = 0; n < lay.batch; ++n) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t off = (n * channels_ + c) * lay.plane;
        s.mean[region_of(n, c, lay)] += detail::lane_sum(px + off, lay.plane);
      }
    }
    const double count = static_cast<double>(region_size(lay));
    for (double& m : s.mean) m /= count;
    for (std::size_t n = 0; n < lay.batch; ++n) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t r = region_of(n, c, lay);
        const std::size_t off = (n * channels_ + c) * lay.plane;
        s.var[r] += detail::lane_sq_dev(px + off, lay.plane, s.mean[r]);
      }
    }
    for (double& v : s.var) v /= count;
    return s;
  }

  Stats running_as_stats() const {
    if (!stats_initialized) {
      throw Error(
          "batch norm in eval mode has uninitialized running statistics");
    }
    Stats s;
    s.mean.assign(running_mean.data().begin(), running_mean.data().end());
    s.var.assign(running_var.data().begin(), running_var.data().end());
    s.fixed = true;
    return s;
  }

  void update_running(const Stats& s) {
    const double m = momentum_;
    for (std::size_t c = 0; c < channels_; ++c) {
      running_mean[c] = static_cast<T>((1.0 - m) * running_mean[c] + m * s.mean[c]);
      running_var[c] = static_cast<T>((1.0 - m) * running_var[c] + m * s.var[c]);
    }
    stats_initialized = true;
  }

  struct Normalized {
    BasicTensor<T> y;
    BasicTensor<T> xhat;
    std::vector<double> inv_std;
  };

  Normalized normalize(const BasicTensor<T>& x, const Stats& s,
                       bool keep_xhat) const {
    const Layout lay = layout(x.shape());
    Normalized out;
    out.inv_std.resize(s.var.size());
    for (std::size_t r = 0; r < s.var.size(); ++r) {
      out.inv_std[r] = 1.0 / std::sqrt(s.var[r] + eps_);
    }
    out.y = BasicTensor<T>(x.shape());
    if (keep_xhat) out.xhat = BasicTensor<T>(x.shape());
    const T* px = x.ptr();
    T* ph = keep_xhat ? out.xhat.ptr() : nullptr;
    T* py = out.y.ptr();
    for (std::size_t n = 0; n < lay.batch; ++n) {
      for (std::size_t c = 0; c < channels_; ++c) {
        const std::size_t r = s.fixed ? c : region_of(n, c, lay);
        const std::size_t off = (n * channels_ + c) * lay.plane;
        const double mu = s.mean[r];
        const double is = out.inv_std[r];
        const T g = gamma[c];
        const T b = beta[c];
        if (ph) {
          for (std::size_t i = 0; i < lay.plane; ++i) {
            ph[off + i] = static_cast<T>((px[off + i] - mu) * is);
            py[off + i] = ph[off + i] * g + b;
          }
        } else {
          for (std::size_t i = 0; i < lay.plane; ++i) {
            py[off + i] = static_cast<T>((px[off + i] - mu) * is) * g + b;
          }
        }
      }
    }
    return out;
  }

  BasicTensor<T> remember(Normalized&& out, bool fixed) {
    cache_.xhat = std::move(out.xhat);
    cache_.inv_std = std::move(out.inv_std);
    cache_.fixed_stats = fixed;
    return std::move(out.y);
  }

  NormKind kind_;
  std::size_t channels_;
  std::size_t groups_;
  double momentum_;
  double eps_;
  Cache cache_;
};

}  // namespace smoothcert
