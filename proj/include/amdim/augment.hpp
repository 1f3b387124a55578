#pragma once

#include <cstdint>
#include <utility>

#include "amdim/image.hpp"
#include "amdim/rng.hpp"

namespace amdim {

struct AugmentPolicy {
  double crop_lo = 0.3;   // crop area fraction range
  double crop_hi = 1.0;
  std::int64_t output_size = 32;
  double brightness = 0.4;  // max fractional deltas
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_prob = 0.25;
  double flip_prob = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    AMDIM_CONFIG_CHECK(crop_lo > 0.0 && crop_lo <= crop_hi && crop_hi <= 1.0,
                       "augment: crop scale range must satisfy 0 < lo <= hi <= 1");
    AMDIM_CONFIG_CHECK(output_size >= 4, "augment: output size must be >= 4");
    AMDIM_CONFIG_CHECK(brightness >= 0.0 && contrast >= 0.0 && saturation >= 0.0,
                       "augment: jitter strengths must be >= 0");
    AMDIM_CONFIG_CHECK(grayscale_prob >= 0.0 && grayscale_prob <= 1.0,
                       "augment: grayscale probability must be in [0,1]");
    AMDIM_CONFIG_CHECK(flip_prob >= 0.0 && flip_prob <= 1.0,
                       "augment: flip probability must be in [0,1]");
  }

  // An all-identity policy (full-frame crop, no jitter, no grayscale, no flip)
  // is handy in tests; randomness comes only from the listed knobs.
  static AugmentPolicy degenerate(std::int64_t output_size) {
    AugmentPolicy p;
    p.crop_lo = p.crop_hi = 1.0;
    p.output_size = output_size;
    p.brightness = p.contrast = p.saturation = 0.0;
    p.grayscale_prob = 0.0;
    p.flip_prob = 0.0;
    return p;
  }
};

// Stream key layout: CounterRng(policy.seed, epoch, image id, op index).
// Op indices are fixed so that reordering batches never changes the stream a
// given image sees in a given epoch.
enum AugmentOp : std::uint64_t {
  kOpFlip = 0,
  kOpCropView1 = 1,
  kOpJitterView1 = 2,
  kOpGrayView1 = 3,
  kOpCropView2 = 11,
  kOpJitterView2 = 12,
  kOpGrayView2 = 13,
};

// deterministic full-image bilinear resize (used by evaluation too)
ImageBatch resize_bilinear(const ImageBatch& img, std::int64_t out_size);

ImageBatch horizontal_flip(const ImageBatch& img);

// per-batch ops; each image draws from its own keyed stream
ImageBatch random_resized_crop(const ImageBatch& img, const AugmentPolicy& policy,
                               std::uint64_t epoch, std::uint64_t op_index);
ImageBatch color_jitter(const ImageBatch& img, const AugmentPolicy& policy, std::uint64_t epoch,
                        std::uint64_t op_index);
ImageBatch to_grayscale(const ImageBatch& img, const AugmentPolicy& policy, std::uint64_t epoch,
                        std::uint64_t op_index);

// One flip decision per source image applied before both views; crop, jitter
// and grayscale are then sampled independently for each view.
std::pair<ImageBatch, ImageBatch> make_views(const ImageBatch& img, const AugmentPolicy& policy,
                                             std::uint64_t epoch);

// single-image primitives (exposed for tests); src/dst are [3,H,W] planes
namespace augdetail {
void crop_resize_one(const float* src, std::int64_t h, std::int64_t w, std::int64_t top,
                     std::int64_t left, std::int64_t ch, std::int64_t cw, float* dst,
                     std::int64_t out);
void jitter_one(float* img, std::int64_t h, std::int64_t w, float fb, float fc, float fs);
void grayscale_one(float* img, std::int64_t h, std::int64_t w);
}  // namespace augdetail

}  // namespace amdim
