#pragma once

// Datasets: IDX ingestion, GSM patch synthesis, contrast augmentation and the
// image manipulations used by the evaluation experiments.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "io.hpp"
#include "ndgrad/ndgrad.hpp"
#include "numeric.hpp"

namespace eavae::data {

using ndgrad::RngStream;
using ndgrad::Tensor;
using Image = std::vector<double>;

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::size_t n = 0;
  std::size_t side = 0;  // images are side x side
  std::vector<double> pixels;  // n * side * side, row-major per image
  std::string pixel_range = "unit";  // "unit", "centered", "zscored"
  std::string provenance;
  std::vector<int> labels;  // empty when unlabeled
  std::optional<double> alpha;
  std::vector<double> contrast;  // per-image pixel std, see refresh_contrast()

  // Generative truth, only for synthesized GSM data.
  std::vector<double> true_s;
  std::vector<double> true_z;  // n * k_g
  std::size_t true_z_dim = 0;

  std::size_t dim() const { return side * side; }
  bool has_labels() const { return !labels.empty(); }

  std::span<const double> image(std::size_t i) const { return {pixels.data() + i * dim(), dim()}; }
  std::span<double> image(std::size_t i) { return {pixels.data() + i * dim(), dim()}; }

  void refresh_contrast() {
    contrast.resize(n);
    for (std::size_t i = 0; i < n; ++i) contrast[i] = num::pixel_contrast(image(i));
  }

  void validate() const {
    if (pixels.size() != n * dim())
      throw DataError("dataset: pixel buffer holds " + std::to_string(pixels.size()) + " values, expected " +
                      std::to_string(n * dim()));
    if (!labels.empty() && labels.size() != n) throw DataError("dataset: label count differs from image count");
  }

  /// Rows [begin, end) as a [rows, M] tensor.
  Tensor batch(std::size_t begin, std::size_t end) const {
    return Tensor({end - begin, dim()}, {pixels.begin() + begin * dim(), pixels.begin() + end * dim()});
  }
  Tensor batch(std::span<const std::size_t> rows) const {
    std::vector<double> v;
    v.reserve(rows.size() * dim());
    for (auto r : rows) v.insert(v.end(), image(r).begin(), image(r).end());
    return Tensor({rows.size(), dim()}, std::move(v));
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset d = empty_like();
    for (auto r : rows) {
      if (r >= n) throw DataError("subset: row " + std::to_string(r) + " out of range");
      d.push(image(r), labels.empty() ? std::nullopt : std::optional<int>(labels[r]));
      if (!true_s.empty()) {
        d.true_s.push_back(true_s[r]);
        d.true_z.insert(d.true_z.end(), true_z.begin() + r * true_z_dim, true_z.begin() + (r + 1) * true_z_dim);
      }
    }
    d.refresh_contrast();
    return d;
  }

  /// Same metadata, no images.
  Dataset empty_like() const {
    Dataset d;
    d.side = side;
    d.pixel_range = pixel_range;
    d.provenance = provenance;
    d.alpha = alpha;
    d.true_z_dim = true_z_dim;
    return d;
  }

  void push(std::span<const double> img, std::optional<int> label = std::nullopt) {
    if (img.size() != dim()) throw DataError("push: image length mismatch");
    pixels.insert(pixels.end(), img.begin(), img.end());
    if (label) labels.push_back(*label);
    ++n;
  }
};

// ---- IDX ----

namespace detail {

inline std::string read_maybe_gz(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");  // reads plain files transparently
  if (!f) throw DataError("cannot open " + path.string());
  std::string out;
  char buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(got));
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (got < 0 || (err != Z_OK && err != Z_STREAM_END)) throw DataError(path.string() + ": read error: " + msg);
  return out;
}

inline std::uint32_t be32(const std::string& b, std::size_t at) {
  return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Places a side x side image centered in a canvas x canvas zero image.
inline Image pad_centered(std::span<const double> img, std::size_t side, std::size_t canvas) {
  if (canvas < side) throw DataError("pad_centered: canvas smaller than image");
  Image out(canvas * canvas, 0.0);
  const std::size_t off = (canvas - side) / 2;
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) out[(r + off) * canvas + c + off] = img[r * side + c];
  return out;
}

/// IDX image file (optionally gzip-compressed). Pixels are scaled by 1/255 and
/// 28x28 images are zero-padded to 32x32.
inline Dataset parse_idx(const std::filesystem::path& path) {
  const std::string b = detail::read_maybe_gz(path);
  if (b.size() < 4) throw DataError(path.string() + ": truncated IDX header");
  const auto magic = detail::be32(b, 0);
  if (magic == kIdxLabelMagic) throw DataError(path.string() + ": this is an IDX label file (magic 0x00000801), not images");
  if (magic != kIdxImageMagic) throw DataError(path.string() + ": bad IDX image magic");
  if (b.size() < 16) throw DataError(path.string() + ": truncated IDX header");
  const std::size_t n = detail::be32(b, 4), rows = detail::be32(b, 8), cols = detail::be32(b, 12);
  if (rows != cols) throw DataError(path.string() + ": only square images are supported");
  if (b.size() < 16 + n * rows * cols)
    throw DataError(path.string() + ": truncated payload, expected " + std::to_string(n * rows * cols) + " bytes");
  Dataset d;
  d.side = rows == 28 ? 32 : rows;
  d.provenance = "idx:" + path.filename().string();
  d.pixels.reserve(n * d.side * d.side);
  Image img(rows * cols);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < img.size(); ++j) img[j] = std::uint8_t(b[16 + i * img.size() + j]) / 255.0;
    if (d.side != rows) {
      const auto p = pad_centered(img, rows, d.side);
      d.pixels.insert(d.pixels.end(), p.begin(), p.end());
    } else {
      d.pixels.insert(d.pixels.end(), img.begin(), img.end());
    }
  }
  d.n = n;
  d.refresh_contrast();
  return d;
}

inline std::vector<int> parse_idx_labels(const std::filesystem::path& path) {
  const std::string b = detail::read_maybe_gz(path);
  if (b.size() < 8) throw DataError(path.string() + ": truncated IDX header");
  const auto magic = detail::be32(b, 0);
  if (magic == kIdxImageMagic) throw DataError(path.string() + ": this is an IDX image file (magic 0x00000803), not labels");
  if (magic != kIdxLabelMagic) throw DataError(path.string() + ": bad IDX label magic");
  const std::size_t n = detail::be32(b, 4);
  if (b.size() < 8 + n) throw DataError(path.string() + ": truncated payload");
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::uint8_t(b[8 + i]);
  return out;
}

inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset d = parse_idx(images);
  d.labels = parse_idx_labels(labels);
  d.validate();
  return d;
}

// ---- GSM synthesis ----

struct GsmSpec {
  std::size_t side = 12;
  std::size_t k_g = 32;
  std::string mixing = "random";  // "random" or "gabor"
  std::uint64_t mixing_seed = 7;
  double sigma_obs = 0.05;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GsmSpec, side, k_g, mixing, mixing_seed, sigma_obs)

/// Mixing matrix A, [M, k_g] row-major, unit-norm columns.
inline std::vector<double> gsm_mixing(const GsmSpec& spec) {
  const std::size_t m = spec.side * spec.side, k = spec.k_g;
  std::vector<double> a(m * k);
  RngStream rng(spec.mixing_seed);
  if (spec.mixing == "random") {
    for (auto& v : a) v = rng.standard_normal();
  } else if (spec.mixing == "gabor") {
    const double s = static_cast<double>(spec.side);
    for (std::size_t j = 0; j < k; ++j) {
      const double cx = rng.uniform(0.2, 0.8) * s, cy = rng.uniform(0.2, 0.8) * s;
      const double theta = rng.uniform(0, std::numbers::pi), freq = rng.uniform(0.1, 0.3);
      const double width = rng.uniform(0.12, 0.25) * s, phase = rng.uniform(0, 2 * std::numbers::pi);
      for (std::size_t r = 0; r < spec.side; ++r)
        for (std::size_t c = 0; c < spec.side; ++c) {
          const double x = c - cx, y = r - cy;
          const double u = x * std::cos(theta) + y * std::sin(theta);
          const double env = std::exp(-(x * x + y * y) / (2 * width * width));
          a[(r * spec.side + c) * k + j] = env * std::cos(2 * std::numbers::pi * freq * u + phase);
        }
    }
  } else {
    throw std::invalid_argument("unknown GSM mixing '" + spec.mixing + "' (expected random or gabor)");
  }
  for (std::size_t j = 0; j < k; ++j) {
    double nrm = 0;
    for (std::size_t i = 0; i < m; ++i) nrm += a[i * k + j] * a[i * k + j];
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < m; ++i) a[i * k + j] /= nrm;
  }
  return a;
}

/// x = s * A z + eta with s ~ Gamma(2, 1/sqrt2), z ~ N(0, I), eta ~ N(0, sigma^2 I).
/// `fixed_s` replaces the Gamma draw (used by tests).
inline Dataset synth_gsm(const GsmSpec& spec, std::size_t n, std::uint64_t seed,
                         std::optional<double> fixed_s = std::nullopt) {
  const auto a = gsm_mixing(spec);
  const std::size_t m = spec.side * spec.side, k = spec.k_g;
  RngStream rng(seed);
  Dataset d;
  d.n = n;
  d.side = spec.side;
  d.pixel_range = "centered";
  d.provenance = "gsm:" + spec.mixing;
  d.pixels.resize(n * m);
  d.true_s.resize(n);
  d.true_z.resize(n * k);
  d.true_z_dim = k;
  const double theta0 = 1.0 / std::numbers::sqrt2;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = fixed_s ? *fixed_s : theta0 * rng.standard_gamma_shape2();
    d.true_s[i] = s;
    double* z = d.true_z.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) z[j] = rng.standard_normal();
    double* x = d.pixels.data() + i * m;
    for (std::size_t p = 0; p < m; ++p) {
      double acc = 0;
      for (std::size_t j = 0; j < k; ++j) acc += a[p * k + j] * z[j];
      x[p] = s * acc;
      if (spec.sigma_obs > 0) x[p] += spec.sigma_obs * rng.standard_normal();
    }
  }
  d.refresh_contrast();
  return d;
}

// ---- contrast augmentation ----

/// Distribution of the contrast multiplier c: log-normal clipped to [lo, hi],
/// or a constant when `constant` is set.
struct ContrastDistribution {
  double log_mu = -1.0;
  double log_sigma = 0.5;
  double lo = 0.02;
  double hi = 2.0;
  std::optional<double> constant;

  double sample(RngStream& rng) const {
    if (constant) return *constant;
    return std::clamp(std::exp(log_mu + log_sigma * rng.standard_normal()), lo, hi);
  }
};

/// x_aug = c (x - 1/2) + eta, `factor` draws per source image.
inline Dataset augment_contrast(const Dataset& src, const ContrastDistribution& c, double sigma_obs, RngStream& rng,
                                std::size_t factor = 10) {
  if (src.pixel_range != "unit") throw DataError("augment_contrast expects images in [0,1]");
  Dataset d = src.empty_like();
  d.pixel_range = "centered";
  d.provenance = src.provenance + "+contrast";
  d.pixels.reserve(src.n * factor * src.dim());
  Image img(src.dim());
  for (std::size_t i = 0; i < src.n; ++i) {
    const auto x = src.image(i);
    for (std::size_t f = 0; f < factor; ++f) {
      const double ci = c.sample(rng);
      for (std::size_t p = 0; p < img.size(); ++p) {
        img[p] = ci * (x[p] - 0.5);
        if (sigma_obs > 0) img[p] += sigma_obs * rng.standard_normal();
      }
      d.push(img, src.has_labels() ? std::optional<int>(src.labels[i]) : std::nullopt);
    }
  }
  d.refresh_contrast();
  return d;
}

/// Rescales so that mean +- 3 std of all pixels maps onto [0, 1]; stores alpha = 6 std.
inline Dataset zscore_rescale(const Dataset& src) {
  const double m = num::mean(src.pixels);
  const double sd = num::stddev(src.pixels);
  if (!(sd > 0)) throw DataError("zscore_rescale: constant dataset");
  Dataset d = src;
  d.alpha = 6.0 * sd;
  for (auto& v : d.pixels) v = (v - (m - 3.0 * sd)) / *d.alpha;
  d.pixel_range = "zscored";
  d.refresh_contrast();
  return d;
}

inline Dataset subtract_patch_means(const Dataset& src) {
  Dataset d = src;
  for (std::size_t i = 0; i < d.n; ++i) {
    auto x = d.image(i);
    const double m = num::mean(x);
    for (auto& v : x) v -= m;
  }
  d.refresh_contrast();
  return d;
}

/// Affine intensity map giving `src` the global pixel mean and std of `reference`.
inline Dataset match_intensity(const Dataset& src, const Dataset& reference) {
  const double ms = num::mean(src.pixels), ss = num::stddev(src.pixels);
  const double mr = num::mean(reference.pixels), sr = num::stddev(reference.pixels);
  Dataset d = src;
  const double g = ss > 0 ? sr / ss : 0.0;
  for (auto& v : d.pixels) v = mr + g * (v - ms);
  d.pixel_range = reference.pixel_range;
  d.refresh_contrast();
  return d;
}

/// Bilinear resampling of a square image (align-corners convention).
inline Image resize_bilinear(std::span<const double> img, std::size_t side, std::size_t out_side) {
  Image out(out_side * out_side);
  const double scale = out_side > 1 ? static_cast<double>(side - 1) / static_cast<double>(out_side - 1) : 0.0;
  for (std::size_t r = 0; r < out_side; ++r)
    for (std::size_t c = 0; c < out_side; ++c) {
      const double y = r * scale, x = c * scale;
      const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
      const auto y1 = std::min(y0 + 1, side - 1), x1 = std::min(x0 + 1, side - 1);
      const double fy = y - y0, fx = x - x0;
      out[r * out_side + c] = (1 - fy) * ((1 - fx) * img[y0 * side + x0] + fx * img[y0 * side + x1]) +
                              fy * ((1 - fx) * img[y1 * side + x0] + fx * img[y1 * side + x1]);
    }
  return out;
}

inline Dataset resize(const Dataset& src, std::size_t out_side) {
  Dataset d = src.empty_like();
  d.side = out_side;
  for (std::size_t i = 0; i < src.n; ++i)
    d.push(resize_bilinear(src.image(i), src.side, out_side),
           src.has_labels() ? std::optional<int>(src.labels[i]) : std::nullopt);
  d.refresh_contrast();
  return d;
}

/// Random split into (first, second) with `first_fraction` of the rows first.
inline std::pair<Dataset, Dataset> split(const Dataset& src, double first_fraction, RngStream& rng) {
  std::vector<std::size_t> idx(src.n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  const auto k = static_cast<std::size_t>(std::llround(first_fraction * static_cast<double>(src.n)));
  std::vector<std::size_t> a(idx.begin(), idx.begin() + k), b(idx.begin() + k, idx.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {src.subset(a), src.subset(b)};
}

// ---- image manipulations ----

inline Image average_image(const Dataset& d) {
  if (d.n == 0) throw DataError("average_image of an empty dataset");
  Image out(d.dim(), 0.0);
  for (std::size_t i = 0; i < d.n; ++i) {
    const auto x = d.image(i);
    for (std::size_t p = 0; p < out.size(); ++p) out[p] += x[p];
  }
  for (auto& v : out) v /= static_cast<double>(d.n);
  return out;
}

inline Image morph(std::span<const double> a, std::span<const double> b, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::domain_error("morph: lambda must lie in [0,1]");
  if (a.size() != b.size()) throw DataError("morph: image length mismatch");
  Image out(a.size());
  for (std::size_t p = 0; p < a.size(); ++p) out[p] = (1.0 - lambda) * a[p] + lambda * b[p];
  return out;
}

/// Symmetric (half-sample) reflection of an arbitrary index into [0, n).
inline std::size_t reflect_index(long i, long n) {
  const long period = 2 * n;
  long k = i % period;
  if (k < 0) k += period;
  return static_cast<std::size_t>(k < n ? k : period - 1 - k);
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (long t = -radius; t <= radius; ++t) total += k[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (auto& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur with standard deviation eta_b pixels, truncated at
/// ceil(3 eta_b) and reflect-padded.
inline Image blur(std::span<const double> img, std::size_t side, double eta_b) {
  if (eta_b < 0) throw std::domain_error("blur: eta_b must be >= 0");
  if (img.size() != side * side) throw DataError("blur: image is not side x side");
  if (eta_b == 0) return Image(img.begin(), img.end());
  const auto k = gaussian_kernel(eta_b);
  const long radius = static_cast<long>(k.size() / 2), n = static_cast<long>(side);
  Image tmp(img.size(), 0.0), out(img.size(), 0.0);
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < n; ++c) {
      double acc = 0;
      for (long t = -radius; t <= radius; ++t) acc += k[t + radius] * img[r * n + reflect_index(c + t, n)];
      tmp[r * n + c] = acc;
    }
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < n; ++c) {
      double acc = 0;
      for (long t = -radius; t <= radius; ++t) acc += k[t + radius] * tmp[reflect_index(r + t, n) * n + c];
      out[r * n + c] = acc;
    }
  return out;
}

/// Adds N(0, eta_p^2) per pixel, then maps the result affinely back onto the
/// original [min, max] range.
inline Image pixel_noise(std::span<const double> img, double eta_p, RngStream& rng) {
  if (eta_p < 0) throw std::domain_error("pixel_noise: eta_p must be >= 0");
  Image out(img.begin(), img.end());
  if (eta_p == 0 || img.empty()) return out;
  for (auto& v : out) v += eta_p * rng.standard_normal();
  const auto [lo0, hi0] = std::minmax_element(img.begin(), img.end());
  const auto [lo1, hi1] = std::minmax_element(out.begin(), out.end());
  const double a = *lo0, w = *hi0 - *lo0, b = *lo1, wn = *hi1 - *lo1;
  if (wn > 0)
    for (auto& v : out) v = a + (v - b) / wn * w;
  return out;
}

/// Applies `f(image)` to every image, keeping labels and metadata.
template <class F>
Dataset map_images(const Dataset& src, F&& f, const std::string& tag) {
  Dataset d = src.empty_like();
  d.provenance = src.provenance + "+" + tag;
  for (std::size_t i = 0; i < src.n; ++i)
    d.push(f(src.image(i)), src.has_labels() ? std::optional<int>(src.labels[i]) : std::nullopt);
  d.refresh_contrast();
  return d;
}

/// Independently permutes every pixel location across images.
inline Dataset pixel_shuffle(const Dataset& src, RngStream& rng) {
  if (src.n < 2) throw DataError("pixel_shuffle needs at least two images");
  Dataset d = src;
  d.labels.clear();
  d.true_s.clear();
  d.true_z.clear();
  d.provenance = src.provenance + "+shuffled";
  std::vector<std::size_t> perm(src.n);
  for (std::size_t p = 0; p < src.dim(); ++p) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    for (std::size_t i = 0; i < src.n; ++i) d.pixels[i * src.dim() + p] = src.pixels[perm[i] * src.dim() + p];
  }
  d.refresh_contrast();
  return d;
}

// ---- dataset cache ----

inline constexpr const char* kDatasetMagic = "EAVAEDS1";
inline constexpr std::uint8_t kDatasetVersion = 1;

inline void save_dataset(const std::filesystem::path& path, const Dataset& d, const io::Stamp& stamp = {}) {
  d.validate();
  io::json h = {{"n", d.n},
                {"side", d.side},
                {"pixel_range", d.pixel_range},
                {"provenance", d.provenance},
                {"labels", d.labels},
                {"true_z_dim", d.true_z_dim},
                {"meta", stamp.to_json()}};
  h["alpha"] = d.alpha ? io::json(*d.alpha) : io::json(nullptr);
  io::write_container(path, kDatasetMagic, kDatasetVersion, h, {d.pixels, d.true_s, d.true_z});
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  auto c = io::read_container(path, kDatasetMagic, kDatasetVersion);
  if (c.blobs.size() != 3) throw io::FormatError(path.string() + ": expected 3 blobs");
  Dataset d;
  d.n = c.header.at("n").get<std::size_t>();
  d.side = c.header.at("side").get<std::size_t>();
  d.pixel_range = c.header.at("pixel_range").get<std::string>();
  d.provenance = c.header.at("provenance").get<std::string>();
  d.labels = c.header.at("labels").get<std::vector<int>>();
  d.true_z_dim = c.header.at("true_z_dim").get<std::size_t>();
  if (!c.header.at("alpha").is_null()) d.alpha = c.header["alpha"].get<double>();
  d.pixels = std::move(c.blobs[0]);
  d.true_s = std::move(c.blobs[1]);
  d.true_z = std::move(c.blobs[2]);
  try {
    d.validate();
  } catch (const DataError& e) {
    throw io::FormatError(path.string() + ": " + e.what());
  }
  d.refresh_contrast();
  return d;
}

}  // namespace eavae::data
