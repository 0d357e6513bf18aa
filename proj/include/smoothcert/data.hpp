#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smoothcert/error.hpp"
#include "smoothcert/random.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

// Images in [0, 1] as [N, C, H, W] with integer labels in [0, num_classes).
struct Dataset {
  std::string name;
  Split split = Split::train;
  Tensor images;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_numel() const { return images.size() / images.dim(0); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  void validate() const {
    if (images.rank() != 4) throw DataError(name + ": images must be [N,C,H,W]");
    if (images.dim(0) != labels.size()) {
      throw DataError(name + ": " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(labels.size()) + " labels");
    }
    std::vector<std::size_t> per_class(num_classes, 0);
    for (const int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw DataError(name + ": label " + std::to_string(l) + " outside [0, " +
                        std::to_string(num_classes) + ")");
      }
      ++per_class[static_cast<std::size_t>(l)];
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (per_class[c] == 0) {
        throw DataError(name + ": class " + std::to_string(c) + " has no samples in the " +
                        std::string(to_string(split)) + " split");
      }
    }
  }

  Tensor gather(std::span<const std::size_t> indices) const {
    const std::size_t m = sample_numel();
    Shape shape = images.shape();
    shape[0] = indices.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(images.ptr() + indices[i] * m, m, out.ptr() + i * m);
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
    return out;
  }
};

// ---------------------------------------------------------------------------
// IDX files (big-endian header, unsigned-byte payload)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off) {
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  buf.push_back(static_cast<std::uint8_t>(v >> 24));
  buf.push_back(static_cast<std::uint8_t>(v >> 16));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
  buf.push_back(static_cast<std::uint8_t>(v));
}

// Returns dims and payload offset after validating magic and length.
inline std::vector<std::uint32_t> parse_idx_header(const std::vector<std::uint8_t>& buf,
                                                   std::uint32_t magic,
                                                   const std::filesystem::path& path) {
  if (buf.size() < 4) {
    throw DataError(path.string() + ": truncated header: expected 4 bytes, found " +
                    std::to_string(buf.size()));
  }
  const std::uint32_t got = read_be32(buf, 0);
  if (got != magic) {
    std::ostringstream os;
    os << path.string() << ": bad magic 0x" << std::hex << got << ", expected 0x" << magic;
    throw DataError(os.str());
  }
  const std::size_t rank = magic & 0xff;
  const std::size_t header = 4 + 4 * rank;
  if (buf.size() < header) {
    throw DataError(path.string() + ": truncated header: expected " +
                    std::to_string(header) + " bytes, found " + std::to_string(buf.size()));
  }
  std::vector<std::uint32_t> dims(rank);
  std::size_t payload = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = read_be32(buf, 4 + 4 * i);
    payload *= dims[i];
  }
  if (buf.size() - header != payload) {
    throw DataError(path.string() + ": expected " + std::to_string(payload) +
                    " bytes, found " + std::to_string(buf.size() - header));
  }
  return dims;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace detail

// "train-images-idx3-ubyte" pairs with "train-labels-idx1-ubyte".
inline std::filesystem::path idx_label_path(const std::filesystem::path& images) {
  std::string name = images.filename().string();
  const auto pos = name.find("images");
  if (pos == std::string::npos) {
    throw DataError(images.string() + ": cannot derive label file (no 'images' in name)");
  }
  name.replace(pos, 6, "labels");
  if (const auto p3 = name.find("idx3"); p3 != std::string::npos) name.replace(p3, 4, "idx1");
  return images.parent_path() / name;
}

inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        Split split = Split::train, std::size_t num_classes = 0) {
  const auto img = detail::read_file(images_path);
  const auto dims = detail::parse_idx_header(img, kIdxImageMagic, images_path);
  const auto lab = detail::read_file(labels_path);
  const auto ldims = detail::parse_idx_header(lab, kIdxLabelMagic, labels_path);
  if (dims[0] != ldims[0]) {
    throw DataError("count mismatch: " + std::to_string(dims[0]) + " images in " +
                    images_path.string() + " vs " + std::to_string(ldims[0]) +
                    " labels in " + labels_path.string());
  }
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
    throw DataError(images_path.string() + ": empty image set");
  }
  Dataset ds;
  ds.name = images_path.filename().string();
  ds.split = split;
  ds.images = Tensor(Shape{dims[0], 1, dims[1], dims[2]});
  const std::size_t header = 16;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    ds.images[i] = static_cast<float>(img[header + i]) / 255.0f;
  }
  ds.labels.resize(ldims[0]);
  int max_label = -1;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    ds.labels[i] = lab[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label + 1);
  ds.validate();
  return ds;
}

inline Dataset load_idx(const std::filesystem::path& images_path,
                        Split split = Split::train) {
  return load_idx(images_path, idx_label_path(images_path), split);
}

// Pixels are quantized to round(255 x) after clamping to [0, 1].
inline void save_idx(const Dataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  if (ds.images.dim(1) != 1) throw DataError("IDX export supports one channel only");
  std::vector<std::uint8_t> img;
  img.reserve(16 + ds.images.size());
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.images.dim(0)));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.images.dim(2)));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.images.dim(3)));
  for (const float v : ds.images.data()) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    img.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0f)));
  }
  std::vector<std::uint8_t> lab;
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.labels.size()));
  for (const int l : ds.labels) {
    if (l < 0 || l > 255) throw DataError("IDX labels must fit in one byte");
    lab.push_back(static_cast<std::uint8_t>(l));
  }
  detail::write_file_bytes(images_path, img);
  detail::write_file_bytes(labels_path, lab);
}

// ---------------------------------------------------------------------------
// Procedural glyphs
// ---------------------------------------------------------------------------

struct SynthOptions {
  std::size_t num_classes = 10;
  std::size_t per_class = 100;
  std::size_t size = 16;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

// Glyph family of a class: bars, filled ellipses ("discs") and crosses, each
// family spreading its members evenly over the orientations it can express.
struct GlyphKind {
  int family = 0;  // 0 bar, 1 disc, 2 cross
  double angle = 0.0;
};

inline GlyphKind glyph_for_class(std::size_t cls, std::size_t num_classes) {
  const int family = static_cast<int>(cls % 3);
  const std::size_t rank = cls / 3;
  const std::size_t members = (num_classes + 2 - static_cast<std::size_t>(family)) / 3;
  const double period = family == 2 ? std::numbers::pi / 2 : std::numbers::pi;
  return {family, period * static_cast<double>(rank) / static_cast<double>(members)};
}

namespace detail {

inline bool glyph_covers(const GlyphKind& g, double dx, double dy, double size) {
  auto bar = [&](double angle, double length, double width) {
    const double u = dx * std::cos(angle) + dy * std::sin(angle);
    const double v = -dx * std::sin(angle) + dy * std::cos(angle);
    return std::abs(u) <= length / 2 && std::abs(v) <= width / 2;
  };
  switch (g.family) {
    case 0:
      return bar(g.angle, 0.75 * size, 0.16 * size);
    case 1: {
      const double u = dx * std::cos(g.angle) + dy * std::sin(g.angle);
      const double v = -dx * std::sin(g.angle) + dy * std::cos(g.angle);
      const double a = 0.36 * size, b = 0.17 * size;
      return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    default:
      return bar(g.angle, 0.7 * size, 0.14 * size) ||
             bar(g.angle + std::numbers::pi / 2, 0.7 * size, 0.14 * size);
  }
}

}  // namespace detail

// Class-distinct glyphs with per-sample translation in [-2, 2] px and
// brightness jitter in [-0.1, 0.1]; 4x4 supersampled coverage. Samples are
// class-interleaved (sample i has label i % K). Deterministic per seed.
inline Dataset synth_shapes(const SynthOptions& opt) {
  if (opt.num_classes < 1 || opt.num_classes > 16) {
    throw DataError("synth_shapes supports 1..16 classes");
  }
  if (opt.per_class == 0 || opt.size < 8) throw DataError("synth_shapes: bad size");
  const std::size_t n = opt.num_classes * opt.per_class;
  const std::size_t h = opt.size;
  Dataset ds;
  ds.name = "synth_shapes";
  ds.split = opt.split;
  ds.num_classes = opt.num_classes;
  ds.images = Tensor(Shape{n, 1, h, h});
  ds.labels.resize(n);
  constexpr int kSub = 4;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % opt.num_classes;
    ds.labels[i] = static_cast<int>(cls);
    Rng rng = Rng::stream(opt.seed, 0x73796e74ULL, i);
    const double tx = static_cast<double>(rng.below(5)) - 2.0;
    const double ty = static_cast<double>(rng.below(5)) - 2.0;
    const double brightness = 0.8 + 0.2 * rng.uniform() - 0.1;
    const GlyphKind glyph = glyph_for_class(cls, opt.num_classes);
    const double cx = static_cast<double>(h) / 2 + tx;
    const double cy = static_cast<double>(h) / 2 + ty;
    float* img = ds.images.ptr() + i * h * h;
    for (std::size_t py = 0; py < h; ++py) {
      for (std::size_t px = 0; px < h; ++px) {
        int hits = 0;
        for (int sy = 0; sy < kSub; ++sy) {
          for (int sx = 0; sx < kSub; ++sx) {
            const double x = static_cast<double>(px) + (sx + 0.5) / kSub - cx;
            const double y = static_cast<double>(py) + (sy + 0.5) / kSub - cy;
            hits += detail::glyph_covers(glyph, x, y, static_cast<double>(h));
          }
        }
        const double v = brightness * hits / double(kSub * kSub);
        img[py * h + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return ds;
}

// Splits a dataset by disjoint class sets. Labels of each side are
// re-indexed by position in its class list; images are copied unchanged.
// Sample order within each side is a seeded permutation.
inline std::pair<Dataset, Dataset> make_transfer_pair(const Dataset& ds,
                                                      const std::vector<int>& upstream,
                                                      const std::vector<int>& downstream,
                                                      std::uint64_t seed) {
  if (upstream.empty() || downstream.empty()) {
    throw DataError("transfer split needs non-empty upstream and downstream classes");
  }
  std::set<int> up(upstream.begin(), upstream.end());
  std::set<int> down(downstream.begin(), downstream.end());
  if (up.size() != upstream.size() || down.size() != downstream.size()) {
    throw DataError("transfer split lists a class twice");
  }
  for (const int c : downstream) {
    if (up.count(c)) {
      throw DataError("class " + std::to_string(c) +
                      " appears in both upstream and downstream sets");
    }
  }
  for (const int c : up) {
    if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes) {
      throw DataError("upstream class " + std::to_string(c) + " out of range");
    }
  }
  for (const int c : down) {
    if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes) {
      throw DataError("downstream class " + std::to_string(c) + " out of range");
    }
  }

  auto extract = [&](const std::vector<int>& classes, std::uint64_t stream,
                     const char* tag) {
    std::vector<int> remap(ds.num_classes, -1);
    for (std::size_t i = 0; i < classes.size(); ++i) {
      remap[static_cast<std::size_t>(classes[i])] = static_cast<int>(i);
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (remap[static_cast<std::size_t>(ds.labels[i])] >= 0) idx.push_back(i);
    }
    Rng rng = Rng::stream(seed, stream);
    rng.shuffle(std::span<std::size_t>(idx));
    Dataset out;
    out.name = ds.name + "/" + tag;
    out.split = ds.split;
    out.num_classes = classes.size();
    out.images = ds.gather(idx);
    out.labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.labels[i] = remap[static_cast<std::size_t>(ds.labels[idx[i]])];
    }
    out.validate();
    return out;
  };
  return {extract(upstream, 1, "upstream"), extract(downstream, 2, "downstream")};
}

// Keeps the first `per_class` samples of every class, preserving order.
inline Dataset limit_per_class(const Dataset& ds, std::size_t per_class) {
  std::vector<std::size_t> seen(ds.num_classes, 0), idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (seen[static_cast<std::size_t>(ds.labels[i])]++ < per_class) idx.push_back(i);
  }
  Dataset out;
  out.name = ds.name;
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  out.images = ds.gather(idx);
  out.labels = ds.gather_labels(idx);
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Mixed-noise sampling
// ---------------------------------------------------------------------------

// The noise-level set with sampling weights. sigma = 0 is the clean case.
struct NoiseSpec {
  std::vector<double> sigmas{0.0};
  std::vector<double> weights{1.0};
  std::uint64_t seed = 0;

  static NoiseSpec clean(std::uint64_t seed) { return {{0.0}, {1.0}, seed}; }

  static NoiseSpec uniform(std::vector<double> sigmas, std::uint64_t seed) {
    NoiseSpec s;
    s.weights.assign(sigmas.size(), 1.0 / static_cast<double>(sigmas.size()));
    s.sigmas = std::move(sigmas);
    s.seed = seed;
    s.validate();
    return s;
  }

  // Weights must be positive; they are rescaled to sum to one.
  void validate() {
    if (sigmas.empty()) throw DataError("noise spec needs at least one sigma");
    if (weights.empty()) {
      weights.assign(sigmas.size(), 1.0);
    }
    if (weights.size() != sigmas.size()) {
      throw DataError("noise spec: sigmas and weights differ in length");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      if (!(sigmas[i] >= 0.0) || !std::isfinite(sigmas[i])) {
        throw DataError("noise spec: sigma must be finite and non-negative");
      }
      if (!(weights[i] > 0.0) || !std::isfinite(weights[i])) {
        throw DataError("noise spec: weights must be positive");
      }
      total += weights[i];
    }
    for (double& w : weights) w /= total;
  }

  bool is_clean() const {
    return std::all_of(sigmas.begin(), sigmas.end(), [](double s) { return s == 0.0; });
  }

  // Inverse-CDF pick over the weights from a uniform draw in [0, 1).
  std::size_t pick(double u) const {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }
};

struct NoisyBatch {
  Tensor images;
  std::vector<int> labels;
  std::vector<double> sigmas;  // level drawn for each sample
};

// For every sample independently: sigma ~ weights, delta ~ N(0, sigma^2 I),
// output x + delta without clamping. Each draw is a function of
// (spec.seed, epoch, dataset index) only.
inline NoisyBatch sample_noisy_batch(const Dataset& ds, std::span<const std::size_t> indices,
                                     const NoiseSpec& spec, std::uint64_t epoch = 0) {
  for (const std::size_t i : indices) {
    if (i >= ds.size()) throw DataError("sample index " + std::to_string(i) + " out of range");
  }
  NoisyBatch out;
  out.images = ds.gather(indices);
  out.labels = ds.gather_labels(indices);
  out.sigmas.resize(indices.size());
  const std::size_t m = ds.sample_numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    Rng rng = Rng::stream(spec.seed, epoch, indices[i]);
    const double sigma = spec.sigmas[spec.pick(rng.uniform())];
    out.sigmas[i] = sigma;
    if (sigma == 0.0) continue;
    float* x = out.images.ptr() + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      x[j] = static_cast<float>(x[j] + sigma * rng.normal());
    }
  }
  return out;
}

}  // namespace smoothcert
