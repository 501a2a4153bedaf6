#include "d3ga/losses.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace d3ga;

namespace {

Image random_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Image img(w, h);
  for (auto& v : img.data) v = u(rng);
  return img;
}

Image constant(int w, int h, double v) {
  Image img(w, h);
  for (auto& x : img.data) x = v;
  return img;
}

// Direct 2D-window SSIM (11×11 Gaussian, σ 1.5, zero padding), no separable blur.
double ssim_oracle(const Image& a, const Image& b) {
  const int r = 5;
  double g[11], gs = 0;
  for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-0.5 * (i - r) * (i - r) / 2.25);
  for (double& v : g) v /= gs;
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int j = -r; j <= r; ++j)
          for (int i = -r; i <= r; ++i) {
            const int xx = x + i, yy = y + j;
            if (xx < 0 || yy < 0 || xx >= a.width || yy >= a.height) continue;
            const double w = g[i + r] * g[j + r];
            const double p = a.pixel(xx, yy)[c], q = b.pixel(xx, yy)[c];
            mx += w * p;
            my += w * q;
            sxx += w * p * p;
            syy += w * q * q;
            sxy += w * p * q;
          }
        sxx -= mx * mx;
        syy -= my * my;
        sxy -= mx * my;
        total += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      }
  return total / (3.0 * a.width * a.height);
}

} // namespace

TEST(ColorLoss, IdenticalImagesGiveZero) {
  const Image a = random_image(20, 16, 1);
  EXPECT_NEAR(color_loss(a, a, 0.2), 0.0, 1e-15);
}

TEST(ColorLoss, PureL1Offset) {
  const Image a = constant(10, 10, 0.3);
  const Image b = constant(10, 10, 0.4);
  EXPECT_NEAR(color_loss(b, a, 0.0), 0.1, 1e-15);
}

TEST(ColorLoss, MatchesScalarOracle) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Image a = random_image(23, 17, 10 + s), b = random_image(23, 17, 20 + s);
    double l1 = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) l1 += std::abs(a.data[i] - b.data[i]);
    l1 /= static_cast<double>(a.data.size());
    const double expected = 0.8 * l1 + 0.2 * (1.0 - ssim_oracle(a, b)) / 2.0;
    EXPECT_NEAR(color_loss(a, b, 0.2), expected, 1e-12);
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-6);
  }
}

TEST(Ssim, IdentityIsOne) {
  const Image a = random_image(16, 16, 3);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(GarmentLoss, KnownValues) {
  const Image p = random_image(8, 8, 4);
  EXPECT_EQ(garment_loss(p, p), 0.0);
  EXPECT_EQ(garment_loss(constant(8, 8, 1.0), constant(8, 8, 0.0)), 1.0);
  // red vs green: two of three channels differ.
  Image red(4, 4), green(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      red.set_pixel(x, y, part_color(Part::body));
      green.set_pixel(x, y, part_color(Part::upper));
    }
  EXPECT_NEAR(garment_loss(red, green), 2.0 / 3.0, 1e-15);
}

TEST(TotalLoss, DefaultWeights) {
  EXPECT_EQ(total_loss(LossTerms{}), 0.0);
  EXPECT_NEAR(total_loss(LossTerms{1.0, 0.0, 2.0}), 10.01, 1e-12);
  EXPECT_NEAR(total_loss(LossTerms{0.5, 0.25, 4.0}), 5.0 + 2.5 + 0.02, 1e-12);
}

TEST(TotalLoss, DisabledTermsContributeNothing) {
  const LossTerms t{0.3, 0.7, 5.0};
  EXPECT_EQ(total_loss(t, {}, 10.0, 0.0), 10.0 * 0.3 + 10.0 * 0.7);
  EXPECT_EQ(total_loss(t, {}, 0.0, 0.005), 10.0 * 0.3 + 0.005 * 5.0);
}

TEST(TotalLoss, NonFiniteThrows) {
  EXPECT_THROW(total_loss(LossTerms{std::nan(""), 0, 0}), NonFiniteLoss);
  EXPECT_THROW(total_loss(LossTerms{0, 0, std::numeric_limits<double>::infinity()}), NonFiniteLoss);
}

TEST(Psnr, CapAndZero) {
  const Image a = random_image(8, 8, 5);
  EXPECT_EQ(psnr(a, a), 99.0);
  EXPECT_NEAR(psnr(constant(8, 8, 0.0), constant(8, 8, 1.0)), 0.0, 1e-15);
  EXPECT_NEAR(psnr(constant(8, 8, 0.0), constant(8, 8, 0.1)), 20.0, 1e-12);
}

TEST(PartIou, ExactAndDisjoint) {
  Image a(4, 2), b(4, 2);
  for (int x = 0; x < 4; ++x) {
    a.set_pixel(x, 0, part_color(Part::upper));
    b.set_pixel(x, 0, part_color(Part::upper));
  }
  EXPECT_EQ(part_iou(a, b).mean, 1.0);
  b.set_pixel(0, 0, part_color(Part::lower));
  const auto r = part_iou(a, b);
  EXPECT_NEAR(r.per_part[1], 0.75, 1e-15);
  EXPECT_EQ(r.per_part[2], 0.0);
  EXPECT_NEAR(r.mean, 0.375, 1e-15);
}

TEST(Losses, ShapeMismatchThrows) {
  EXPECT_THROW(color_loss(Image(4, 4), Image(4, 5), 0.2), DimensionMismatch);
}
