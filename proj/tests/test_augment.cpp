#include <cmath>

#include "doctest.h"

#include "amdim/augment.hpp"

using amdim::AugmentPolicy;
using amdim::CounterRng;
using amdim::ImageBatch;

namespace {

ImageBatch random_batch(std::int64_t b, std::int64_t size, std::uint64_t seed) {
  ImageBatch img = ImageBatch::blank(b, size);
  CounterRng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.next_double());
  for (std::int64_t i = 0; i < b; ++i) img.ids[static_cast<size_t>(i)] = 1000 + i;
  return img;
}

bool in_unit_range(const ImageBatch& img) {
  for (float v : img.data)
    if (v < 0.0f || v > 1.0f) return false;
  return true;
}

}  // namespace

TEST_CASE("random_resized_crop full-frame policy is a plain resize / identity") {
  auto img = random_batch(2, 16, 1);
  AugmentPolicy p = AugmentPolicy::degenerate(16);
  auto out = amdim::random_resized_crop(img, p, 0, amdim::kOpCropView1);
  CHECK(out.data == img.data);

  // constant-color image stays constant under any crop
  ImageBatch c = ImageBatch::blank(1, 16);
  for (std::int64_t i = 0; i < 256; ++i) {
    c.data[static_cast<size_t>(i)] = 0.2f;
    c.data[static_cast<size_t>(256 + i)] = 0.5f;
    c.data[static_cast<size_t>(512 + i)] = 0.8f;
  }
  AugmentPolicy wild;
  wild.output_size = 8;
  wild.crop_lo = 0.3;
  wild.crop_hi = 1.0;
  auto cropped = amdim::random_resized_crop(c, wild, 3, amdim::kOpCropView1);
  for (std::int64_t i = 0; i < 64; ++i) {
    CHECK(cropped.data[static_cast<size_t>(i)] == doctest::Approx(0.2f));
    CHECK(cropped.data[static_cast<size_t>(64 + i)] == doctest::Approx(0.5f));
    CHECK(cropped.data[static_cast<size_t>(128 + i)] == doctest::Approx(0.8f));
  }

  // seeded determinism
  auto a = amdim::random_resized_crop(img, wild, 7, amdim::kOpCropView1);
  auto b = amdim::random_resized_crop(img, wild, 7, amdim::kOpCropView1);
  CHECK(a.data == b.data);
}

TEST_CASE("color_jitter") {
  auto img = random_batch(2, 8, 2);
  AugmentPolicy off = AugmentPolicy::degenerate(8);
  auto out = amdim::color_jitter(img, off, 0, amdim::kOpJitterView1);
  CHECK(out.data == img.data);  // all strengths zero -> identity

  // brightness factor on a constant image scales and clamps
  ImageBatch c = ImageBatch::blank(1, 4);
  for (auto& v : c.data) v = 0.6f;
  amdim::augdetail::jitter_one(c.image(0), 4, 4, 1.3f, 1.0f, 1.0f);
  for (float v : c.data) CHECK(v == doctest::Approx(std::min(1.0f, 0.6f * 1.3f)));
  for (auto& v : c.data) v = 0.9f;
  amdim::augdetail::jitter_one(c.image(0), 4, 4, 1.4f, 1.0f, 1.0f);
  for (float v : c.data) CHECK(v == 1.0f);  // clamped

  AugmentPolicy strong;
  strong.brightness = strong.contrast = strong.saturation = 0.4;
  auto j1 = amdim::color_jitter(img, strong, 5, amdim::kOpJitterView1);
  auto j2 = amdim::color_jitter(img, strong, 5, amdim::kOpJitterView1);
  CHECK(j1.data == j2.data);
  CHECK(in_unit_range(j1));
}

TEST_CASE("to_grayscale") {
  auto img = random_batch(3, 8, 4);
  AugmentPolicy off = AugmentPolicy::degenerate(8);
  auto out = amdim::to_grayscale(img, off, 0, amdim::kOpGrayView1);
  CHECK(out.data == img.data);  // probability 0 -> identity

  // gray input is a fixed point for any probability
  ImageBatch gray = ImageBatch::blank(1, 4);
  CounterRng rng(9);
  for (std::int64_t i = 0; i < 16; ++i) {
    const float v = static_cast<float>(rng.next_double());
    gray.data[static_cast<size_t>(i)] = v;
    gray.data[static_cast<size_t>(16 + i)] = v;
    gray.data[static_cast<size_t>(32 + i)] = v;
  }
  AugmentPolicy always;
  always.grayscale_prob = 1.0;
  auto g = amdim::to_grayscale(gray, always, 0, amdim::kOpGrayView1);
  CHECK(g.data == gray.data);

  // pure red maps to 0.299 in all channels
  ImageBatch red = ImageBatch::blank(1, 2);
  for (std::int64_t i = 0; i < 4; ++i) red.data[static_cast<size_t>(i)] = 1.0f;
  auto r = amdim::to_grayscale(red, always, 0, amdim::kOpGrayView1);
  for (float v : r.data) CHECK(v == doctest::Approx(0.299f));
}

TEST_CASE("horizontal flip is an involution") {
  auto img = random_batch(2, 8, 6);
  auto twice = amdim::horizontal_flip(amdim::horizontal_flip(img));
  CHECK(twice.data == img.data);
}

TEST_CASE("make_views") {
  auto img = random_batch(4, 16, 8);

  // degenerate policy: both views equal the resized source
  AugmentPolicy p = AugmentPolicy::degenerate(12);
  auto [v1, v2] = amdim::make_views(img, p, 0);
  CHECK(v1.data == v2.data);
  auto ref = amdim::resize_bilinear(img, 12);
  CHECK(v1.data == ref.data);

  // full stochastic policy: reproducible bit-exactly, range stays in [0,1]
  AugmentPolicy full;
  full.output_size = 12;
  auto [a1, a2] = amdim::make_views(img, full, 3);
  auto [b1, b2] = amdim::make_views(img, full, 3);
  CHECK(a1.data == b1.data);
  CHECK(a2.data == b2.data);
  CHECK(in_unit_range(a1));
  CHECK(in_unit_range(a2));
  // the two views differ under a stochastic policy
  CHECK(a1.data != a2.data);
}

TEST_CASE("augmentation stream is keyed by image id, not batch position") {
  auto img = random_batch(4, 16, 10);
  AugmentPolicy full;
  full.output_size = 12;
  auto [v1, v2] = amdim::make_views(img, full, 5);

  // reorder the batch; each image must receive the same treatment
  ImageBatch shuffled = ImageBatch::blank(4, 16);
  const std::int64_t order[4] = {2, 0, 3, 1};
  for (std::int64_t i = 0; i < 4; ++i) {
    shuffled.ids[static_cast<size_t>(i)] = img.ids[static_cast<size_t>(order[i])];
    std::copy(img.image(order[i]), img.image(order[i]) + img.pixels_per_image(),
              shuffled.image(i));
  }
  auto [s1, s2] = amdim::make_views(shuffled, full, 5);
  for (std::int64_t i = 0; i < 4; ++i) {
    const std::int64_t j = order[i];
    for (std::int64_t k = 0; k < s1.pixels_per_image(); ++k) {
      CHECK(s1.image(i)[k] == v1.image(j)[k]);
      CHECK(s2.image(i)[k] == v2.image(j)[k]);
    }
  }
}

TEST_CASE("policy validation") {
  AugmentPolicy bad;
  bad.crop_lo = 0.0;
  CHECK_THROWS_AS(bad.validate(), amdim::ConfigError);
  AugmentPolicy bad2;
  bad2.output_size = 2;
  CHECK_THROWS_AS(bad2.validate(), amdim::ConfigError);
  AugmentPolicy bad3;
  bad3.flip_prob = 1.5;
  CHECK_THROWS_AS(bad3.validate(), amdim::ConfigError);
}
