#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "eavae/data.hpp"

namespace d = eavae::data;
namespace fs = std::filesystem;
using eavae::ndgrad::RngStream;

namespace {

const fs::path kSource = EAVAE_SOURCE_DIR;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "eavae_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

d::Dataset from_images(const std::vector<d::Image>& imgs, std::size_t side) {
  d::Dataset ds;
  ds.side = side;
  for (const auto& im : imgs) ds.push(im);
  ds.refresh_contrast();
  return ds;
}

}  // namespace

TEST(Idx, MinimalTwoByTwo) {
  const auto p = temp_path("tiny.idx");
  write_bytes(p, {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64});
  const auto ds = d::parse_idx(p);
  ASSERT_EQ(ds.n, 1u);
  ASSERT_EQ(ds.side, 2u);
  EXPECT_DOUBLE_EQ(ds.pixels[0], 0.0);
  EXPECT_DOUBLE_EQ(ds.pixels[1], 1.0);
  EXPECT_NEAR(ds.pixels[2], 0.50196, 1e-5);
  EXPECT_NEAR(ds.pixels[3], 0.25098, 1e-5);
}

TEST(Idx, LabelMagicOnImagePathIsRejected) {
  const auto p = temp_path("labels.idx");
  write_bytes(p, {0, 0, 8, 1, 0, 0, 0, 2, 3, 4});
  EXPECT_THROW(d::parse_idx(p), d::DataError);
  EXPECT_EQ(d::parse_idx_labels(p), (std::vector<int>{3, 4}));
}

TEST(Idx, TruncatedPayloadAndBadMagic) {
  const auto p = temp_path("trunc.idx");
  write_bytes(p, {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4, 5});
  try {
    d::parse_idx(p);
    FAIL() << "expected error";
  } catch (const d::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  write_bytes(p, {1, 2, 3, 4, 0, 0, 0, 0});
  EXPECT_THROW(d::parse_idx(p), d::DataError);
  EXPECT_THROW(d::parse_idx(temp_path("missing.idx")), d::DataError);
}

TEST(Idx, GoldenFixtureChecksums) {
  const auto dir = kSource / "tests" / "fixtures";
  const auto ds = d::load_idx(dir / "golden10-images.idx", dir / "golden10-labels.idx");
  const auto expected = eavae::io::read_json(dir / "golden10-checksums.json");
  ASSERT_EQ(ds.n, 10u);
  ASSERT_EQ(ds.side, 32u);
  for (std::size_t i = 0; i < ds.n; ++i) {
    double s = 0, w = 0;
    const auto img = ds.image(i);
    for (std::size_t p = 0; p < img.size(); ++p) {
      s += img[p];
      w += static_cast<double>(p) * img[p];
    }
    EXPECT_NEAR(s, expected["images"][i]["sum"].get<double>(), 1e-9) << "image " << i;
    EXPECT_NEAR(w, expected["images"][i]["weighted"].get<double>(), 1e-6) << "image " << i;
    EXPECT_EQ(ds.labels[i], expected["labels"][i].get<int>());
  }
  // the 2-pixel border of the canvas is zero
  for (std::size_t c = 0; c < 32; ++c) {
    EXPECT_EQ(ds.image(0)[c], 0.0);
    EXPECT_EQ(ds.image(0)[31 * 32 + c], 0.0);
  }
}

TEST(Idx, BundledMnistSubsetLoadsGzip) {
  const auto dir = kSource / "data" / "mnist5k";
  const auto ds = d::load_idx(dir / "images-idx3-ubyte.gz", dir / "labels-idx1-ubyte.gz");
  EXPECT_EQ(ds.n, 5000u);
  EXPECT_EQ(ds.side, 32u);
  std::map<int, int> counts;
  for (int l : ds.labels) ++counts[l];
  EXPECT_EQ(counts.size(), 10u);
  for (double v : ds.pixels) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Gsm, MixingColumnsAreUnitNorm) {
  for (std::string kind : {"random", "gabor"}) {
    d::GsmSpec spec;
    spec.mixing = kind;
    const auto a = d::gsm_mixing(spec);
    const std::size_t m = spec.side * spec.side;
    for (std::size_t j = 0; j < spec.k_g; ++j) {
      double nrm = 0;
      for (std::size_t i = 0; i < m; ++i) nrm += a[i * spec.k_g + j] * a[i * spec.k_g + j];
      EXPECT_NEAR(nrm, 1.0, 1e-12) << kind;
    }
  }
  d::GsmSpec bad;
  bad.mixing = "wavelet";
  EXPECT_THROW(d::gsm_mixing(bad), std::invalid_argument);
}

TEST(Gsm, ZeroScaleNoiselessIsZero) {
  d::GsmSpec spec;
  spec.sigma_obs = 0;
  const auto ds = d::synth_gsm(spec, 5, 1, 0.0);
  for (double v : ds.pixels) EXPECT_EQ(v, 0.0);
}

TEST(Gsm, NoiselessContrastIsHomogeneousInS) {
  d::GsmSpec spec;
  spec.sigma_obs = 0;
  const auto ds = d::synth_gsm(spec, 50, 3);
  const auto a = d::gsm_mixing(spec);
  const std::size_t m = spec.side * spec.side;
  for (std::size_t i = 0; i < ds.n; ++i) {
    std::vector<double> az(m, 0.0);
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t j = 0; j < spec.k_g; ++j) az[p] += a[p * spec.k_g + j] * ds.true_z[i * spec.k_g + j];
    EXPECT_NEAR(ds.contrast[i], ds.true_s[i] * eavae::num::stddev(az), 1e-12);
  }
}

TEST(Gsm, MeanContrastMatchesIndependentSampler) {
  d::GsmSpec spec;
  const auto ds = d::synth_gsm(spec, 10000, 11);
  const double model_mean = eavae::num::mean(ds.contrast);

  // independent draws through the standard library distributions
  const auto a = d::gsm_mixing(spec);
  const std::size_t m = spec.side * spec.side;
  std::mt19937 gen(987);
  std::gamma_distribution<double> gamma(2.0, 1.0 / std::sqrt(2.0));
  std::normal_distribution<double> normal(0.0, 1.0);
  double acc = 0;
  const int trials = 10000;
  std::vector<double> x(m), z(spec.k_g);
  for (int t = 0; t < trials; ++t) {
    const double s = gamma(gen);
    for (auto& v : z) v = normal(gen);
    for (std::size_t p = 0; p < m; ++p) {
      double v = 0;
      for (std::size_t j = 0; j < spec.k_g; ++j) v += a[p * spec.k_g + j] * z[j];
      x[p] = s * v + spec.sigma_obs * normal(gen);
    }
    acc += eavae::num::stddev(x);
  }
  const double oracle = acc / trials;
  EXPECT_NEAR(model_mean / oracle, 1.0, 0.05);
}

TEST(Augment, UnitContrastNoNoiseIsShift) {
  const auto ds = from_images({{0.0, 0.25, 0.5, 1.0}}, 2);
  d::ContrastDistribution c;
  c.constant = 1.0;
  RngStream rng(1);
  const auto aug = d::augment_contrast(ds, c, 0.0, rng);
  ASSERT_EQ(aug.n, 10u);
  for (std::size_t i = 0; i < aug.n; ++i)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(aug.image(i)[p], ds.image(0)[p] - 0.5);
}

TEST(Augment, ZeroContrastIsPureNoise) {
  std::vector<d::Image> imgs(20, d::Image(256, 0.7));
  const auto ds = from_images(imgs, 16);
  d::ContrastDistribution c;
  c.constant = 0.0;
  RngStream rng(2);
  const auto aug = d::augment_contrast(ds, c, 0.3, rng);
  EXPECT_EQ(aug.n, 200u);
  EXPECT_NEAR(eavae::num::mean(aug.contrast), 0.3, 0.01);
}

TEST(Augment, TenfoldSizeAndLabelsCarried) {
  auto ds = from_images({d::Image(4, 0.1), d::Image(4, 0.9), d::Image(4, 0.4)}, 2);
  ds.labels = {1, 2, 3};
  RngStream rng(3);
  const auto aug = d::augment_contrast(ds, {}, 0.1, rng);
  EXPECT_EQ(aug.n, 30u);
  EXPECT_EQ(aug.labels.size(), 30u);
  EXPECT_EQ(aug.labels[0], 1);
  EXPECT_EQ(aug.labels[29], 3);
  ds.pixel_range = "centered";
  EXPECT_THROW(d::augment_contrast(ds, {}, 0.1, rng), d::DataError);
}

TEST(Augment, ClippedLogNormalStaysInRange) {
  d::ContrastDistribution c;
  RngStream rng(4);
  for (int i = 0; i < 10000; ++i) {
    const double v = c.sample(rng);
    ASSERT_GE(v, 0.02);
    ASSERT_LE(v, 2.0);
  }
}

TEST(Contrast, HomogeneityUnderScaling) {
  RngStream rng(5);
  const auto x = rng.normal_vector(64);
  for (double c : {-3.0, -0.5, 0.0, 0.1, 2.0}) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = c * x[i];
    EXPECT_NEAR(eavae::num::pixel_contrast(y), std::abs(c) * eavae::num::pixel_contrast(x), 1e-12);
  }
  // (N-1) denominator: {0, 2} -> sqrt(2)
  EXPECT_DOUBLE_EQ(eavae::num::pixel_contrast(std::vector<double>{0.0, 2.0}), std::sqrt(2.0));
}

TEST(AverageImage, Cases) {
  const d::Image x{1.0, -2.0, 3.5, 0.25};
  EXPECT_EQ(d::average_image(from_images({x}, 2)), x);
  d::Image neg(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  for (double v : d::average_image(from_images({x, neg}, 2))) EXPECT_EQ(v, 0.0);
  const auto avg = d::average_image(from_images({{1, 2, 3, 4}, {4, 5, 6, 7}, {1, 1, 0, 4}}, 2));
  EXPECT_EQ(avg, (d::Image{2, 8.0 / 3.0, 3, 5}));
  d::Dataset empty;
  empty.side = 2;
  EXPECT_THROW(d::average_image(empty), d::DataError);
}

TEST(Morph, EndpointsAndMidpoint) {
  const d::Image a{0.1, 0.2, 0.3}, b{0.9, -0.4, 0.3};
  EXPECT_EQ(d::morph(a, b, 0.0), a);
  EXPECT_EQ(d::morph(a, b, 1.0), b);
  const auto mid = d::morph(a, b, 0.5);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(mid[i], 0.5 * (a[i] + b[i]));
  EXPECT_THROW(d::morph(a, b, -0.01), std::domain_error);
  EXPECT_THROW(d::morph(a, b, 1.01), std::domain_error);
}

namespace {

// Direct 2D convolution with a truncated square Gaussian kernel and symmetric
// reflection, written without the separable decomposition.
d::Image reference_blur(const d::Image& img, int side, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  auto refl = [side](int i) {
    while (i < 0 || i >= side) i = i < 0 ? -i - 1 : 2 * side - i - 1;
    return i;
  };
  double total = 0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) total += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  d::Image out(img.size());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      double acc = 0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
          acc += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) * img[refl(r + dy) * side + refl(c + dx)];
      out[r * side + c] = acc / total;
    }
  return out;
}

}  // namespace

TEST(Blur, ZeroIsIdentity) {
  RngStream rng(6);
  const auto x = rng.normal_vector(100);
  EXPECT_EQ(d::blur(x, 10, 0.0), x);
  EXPECT_THROW(d::blur(x, 10, -1.0), std::domain_error);
}

TEST(Blur, MatchesDirectConvolution) {
  RngStream rng(7);
  const auto x = rng.normal_vector(16 * 16);
  for (double sigma : {0.5, 1.0, 2.5, 7.0}) {
    const auto got = d::blur(x, 16, sigma);
    const auto want = reference_blur(x, 16, sigma);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12) << "sigma " << sigma;
  }
}

TEST(Blur, WidestKernelFlattensImage) {
  const auto dir = kSource / "tests" / "fixtures";
  const auto ds = d::parse_idx(dir / "golden10-images.idx");
  const auto img = ds.image(0);
  const d::Image x(img.begin(), img.end());
  const auto got = d::blur(x, 32, 16.0);
  const auto want = reference_blur(x, 32, 16.0);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
  EXPECT_LT(eavae::num::stddev(got), 0.05 * eavae::num::stddev(x));
}

TEST(PixelNoise, ZeroIsIdentityAndRangePreserved) {
  RngStream rng(8);
  const auto x = rng.normal_vector(64);
  EXPECT_EQ(d::pixel_noise(x, 0.0, rng), x);
  const auto y = d::pixel_noise(x, 0.7, rng);
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const auto [lo2, hi2] = std::minmax_element(y.begin(), y.end());
  EXPECT_NEAR(*lo2, *lo, 1e-12);
  EXPECT_NEAR(*hi2, *hi, 1e-12);
  EXPECT_NE(x, y);
}

TEST(PixelShuffle, PreservesPerPixelMarginals) {
  RngStream rng(9);
  d::Dataset ds;
  ds.side = 3;
  for (int i = 0; i < 40; ++i) ds.push(rng.normal_vector(9));
  ds.refresh_contrast();
  const auto sh = d::pixel_shuffle(ds, rng);
  for (std::size_t p = 0; p < 9; ++p) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < ds.n; ++i) {
      a.push_back(ds.image(i)[p]);
      b.push_back(sh.image(i)[p]);
    }
    const double ma = eavae::num::mean(a), mb = eavae::num::mean(b);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    EXPECT_NEAR(ma, mb, 1e-15);
  }
  EXPECT_NE(ds.pixels, sh.pixels);
}

TEST(PixelShuffle, IdenticalImagesUnchanged) {
  RngStream rng(10);
  const auto x = rng.normal_vector(16);
  const auto ds = from_images(std::vector<d::Image>(5, x), 4);
  EXPECT_EQ(d::pixel_shuffle(ds, rng).pixels, ds.pixels);
  EXPECT_THROW(d::pixel_shuffle(from_images({x}, 4), rng), d::DataError);
}

TEST(PixelShuffle, DestroysPixelCorrelationsOnMnist) {
  const auto dir = kSource / "data" / "mnist5k";
  const auto ds = d::parse_idx(dir / "images-idx3-ubyte.gz");
  RngStream rng(11);
  const auto sh = d::pixel_shuffle(ds, rng);
  // pairs of pixels that vary in the original data
  std::vector<std::size_t> live;
  for (std::size_t p = 0; p < ds.dim(); ++p) {
    std::vector<double> col(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) col[i] = ds.image(i)[p];
    if (eavae::num::stddev(col) > 0.1) live.push_back(p);
  }
  ASSERT_GT(live.size(), 50u);
  double before = 0, after = 0;
  for (int k = 0; k < 100; ++k) {
    const auto p = live[rng.index(live.size())], q = live[rng.index(live.size())];
    std::vector<double> a(ds.n), b(ds.n), sa(ds.n), sb(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
      a[i] = ds.image(i)[p];
      b[i] = ds.image(i)[q];
      sa[i] = sh.image(i)[p];
      sb[i] = sh.image(i)[q];
    }
    before += std::abs(eavae::num::pearson(a, b)) / 100;
    after += std::abs(eavae::num::pearson(sa, sb)) / 100;
  }
  EXPECT_GT(before, 0.1);
  EXPECT_LT(after, 0.05);
}

TEST(Rescale, ZscoreMapsThreeSigmaOntoUnitInterval) {
  d::GsmSpec spec;
  const auto ds = d::zscore_rescale(d::synth_gsm(spec, 500, 12));
  ASSERT_TRUE(ds.alpha.has_value());
  EXPECT_NEAR(eavae::num::mean(ds.pixels), 0.5, 1e-12);
  EXPECT_NEAR(eavae::num::stddev(ds.pixels), 1.0 / 6.0, 1e-12);
  const auto centered = d::subtract_patch_means(ds);
  for (std::size_t i = 0; i < centered.n; ++i) EXPECT_NEAR(eavae::num::mean(centered.image(i)), 0.0, 1e-12);
}

TEST(Cache, RoundTripIsExact) {
  d::GsmSpec spec;
  auto ds = d::synth_gsm(spec, 20, 13);
  ds.labels.assign(20, 4);
  ds.alpha = 1.25;
  const auto p = temp_path("cache.bin");
  d::save_dataset(p, ds);
  const auto back = d::load_dataset(p);
  EXPECT_EQ(back.pixels, ds.pixels);
  EXPECT_EQ(back.true_s, ds.true_s);
  EXPECT_EQ(back.true_z, ds.true_z);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.alpha, ds.alpha);
  EXPECT_EQ(back.contrast, ds.contrast);
  EXPECT_EQ(back.provenance, ds.provenance);

  // truncation and wrong magic are reported, not crashes
  const auto size = fs::file_size(p);
  fs::resize_file(p, size - 9);
  EXPECT_THROW(d::load_dataset(p), eavae::io::FormatError);
  write_bytes(p, {'E', 'A', 'V', 'A', 'E', 'C', 'P', '1', 1, 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_THROW(d::load_dataset(p), eavae::io::FormatError);
}
