#include "amdim/augment.hpp"

#include <algorithm>
#include <cmath>

namespace amdim {

namespace {

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

// sample a crop window; falls back to the full centered square after 10 tries
void sample_crop(std::int64_t h, std::int64_t w, const AugmentPolicy& p, CounterRng& rng,
                 std::int64_t* top, std::int64_t* left, std::int64_t* ch, std::int64_t* cw) {
  const double area = static_cast<double>(h) * static_cast<double>(w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double frac = rng.uniform(p.crop_lo, p.crop_hi);
    const double ratio = rng.uniform(3.0 / 4.0, 4.0 / 3.0);
    const double target = frac * area;
    const std::int64_t cww = static_cast<std::int64_t>(std::lround(std::sqrt(target * ratio)));
    const std::int64_t chh = static_cast<std::int64_t>(std::lround(std::sqrt(target / ratio)));
    if (cww >= 1 && chh >= 1 && cww <= w && chh <= h) {
      *ch = chh;
      *cw = cww;
      *top = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(h - chh + 1)));
      *left = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(w - cww + 1)));
      return;
    }
  }
  const std::int64_t side = std::min(h, w);
  *ch = *cw = side;
  *top = (h - side) / 2;
  *left = (w - side) / 2;
}

}  // namespace

namespace augdetail {

void crop_resize_one(const float* src, std::int64_t h, std::int64_t w, std::int64_t top,
                     std::int64_t left, std::int64_t ch, std::int64_t cw, float* dst,
                     std::int64_t out) {
  // half-pixel-centered bilinear; exact identity when ch == cw == out
  const float sy = static_cast<float>(ch) / static_cast<float>(out);
  const float sx = static_cast<float>(cw) / static_cast<float>(out);
  for (std::int64_t c = 0; c < 3; ++c) {
    const float* plane = src + c * h * w;
    float* dplane = dst + c * out * out;
    for (std::int64_t y = 0; y < out; ++y) {
      float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
      if (fy < 0.0f) fy = 0.0f;
      std::int64_t y0 = static_cast<std::int64_t>(fy);
      if (y0 > ch - 1) y0 = ch - 1;
      std::int64_t y1 = std::min(y0 + 1, ch - 1);
      const float wy = fy - static_cast<float>(y0);
      for (std::int64_t x = 0; x < out; ++x) {
        float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
        if (fx < 0.0f) fx = 0.0f;
        std::int64_t x0 = static_cast<std::int64_t>(fx);
        if (x0 > cw - 1) x0 = cw - 1;
        std::int64_t x1 = std::min(x0 + 1, cw - 1);
        const float wx = fx - static_cast<float>(x0);
        const float v00 = plane[(top + y0) * w + left + x0];
        const float v01 = plane[(top + y0) * w + left + x1];
        const float v10 = plane[(top + y1) * w + left + x0];
        const float v11 = plane[(top + y1) * w + left + x1];
        const float top_row = v00 + wx * (v01 - v00);
        const float bot_row = v10 + wx * (v11 - v10);
        dplane[y * out + x] = clamp01(top_row + wy * (bot_row - top_row));
      }
    }
  }
}

void jitter_one(float* img, std::int64_t h, std::int64_t w, float fb, float fc, float fs) {
  const std::int64_t n = h * w;
  float* r = img;
  float* g = img + n;
  float* b = img + 2 * n;
  if (fb != 1.0f)
    for (std::int64_t i = 0; i < 3 * n; ++i) img[i] = clamp01(img[i] * fb);
  if (fc != 1.0f) {
    // blend with the mean luminance of the (current) image
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += luminance(r[i], g[i], b[i]);
    const float mu = static_cast<float>(acc / static_cast<double>(n));
    for (std::int64_t i = 0; i < 3 * n; ++i) img[i] = clamp01((img[i] - mu) * fc + mu);
  }
  if (fs != 1.0f) {
    for (std::int64_t i = 0; i < n; ++i) {
      const float l = luminance(r[i], g[i], b[i]);
      r[i] = clamp01((r[i] - l) * fs + l);
      g[i] = clamp01((g[i] - l) * fs + l);
      b[i] = clamp01((b[i] - l) * fs + l);
    }
  }
}

void grayscale_one(float* img, std::int64_t h, std::int64_t w) {
  const std::int64_t n = h * w;
  for (std::int64_t i = 0; i < n; ++i) {
    const float l = luminance(img[i], img[n + i], img[2 * n + i]);
    img[i] = img[n + i] = img[2 * n + i] = l;
  }
}

}  // namespace augdetail

ImageBatch resize_bilinear(const ImageBatch& img, std::int64_t out_size) {
  img.check();
  ImageBatch out = ImageBatch::blank(img.b, out_size);
  out.ids = img.ids;
  for (std::int64_t i = 0; i < img.b; ++i)
    augdetail::crop_resize_one(img.image(i), img.h, img.w, 0, 0, img.h, img.w, out.image(i),
                               out_size);
  return out;
}

ImageBatch horizontal_flip(const ImageBatch& img) {
  ImageBatch out = img;
  for (std::int64_t i = 0; i < img.b; ++i) {
    const float* src = img.image(i);
    float* dst = out.image(i);
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < img.h; ++y)
        for (std::int64_t x = 0; x < img.w; ++x)
          dst[(c * img.h + y) * img.w + x] = src[(c * img.h + y) * img.w + (img.w - 1 - x)];
  }
  return out;
}

ImageBatch random_resized_crop(const ImageBatch& img, const AugmentPolicy& policy,
                               std::uint64_t epoch, std::uint64_t op_index) {
  img.check();
  ImageBatch out = ImageBatch::blank(img.b, policy.output_size);
  out.ids = img.ids;
  for (std::int64_t i = 0; i < img.b; ++i) {
    CounterRng rng(policy.seed, epoch, static_cast<std::uint64_t>(img.ids[static_cast<size_t>(i)]),
                   op_index);
    std::int64_t top, left, ch, cw;
    sample_crop(img.h, img.w, policy, rng, &top, &left, &ch, &cw);
    augdetail::crop_resize_one(img.image(i), img.h, img.w, top, left, ch, cw, out.image(i),
                               policy.output_size);
  }
  return out;
}

ImageBatch color_jitter(const ImageBatch& img, const AugmentPolicy& policy, std::uint64_t epoch,
                        std::uint64_t op_index) {
  img.check();
  ImageBatch out = img;
  for (std::int64_t i = 0; i < img.b; ++i) {
    CounterRng rng(policy.seed, epoch, static_cast<std::uint64_t>(img.ids[static_cast<size_t>(i)]),
                   op_index);
    const float fb = static_cast<float>(rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness));
    const float fc = static_cast<float>(rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast));
    const float fs = static_cast<float>(rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation));
    augdetail::jitter_one(out.image(i), out.h, out.w, fb, fc, fs);
  }
  return out;
}

ImageBatch to_grayscale(const ImageBatch& img, const AugmentPolicy& policy, std::uint64_t epoch,
                        std::uint64_t op_index) {
  img.check();
  ImageBatch out = img;
  for (std::int64_t i = 0; i < img.b; ++i) {
    CounterRng rng(policy.seed, epoch, static_cast<std::uint64_t>(img.ids[static_cast<size_t>(i)]),
                   op_index);
    if (rng.bernoulli(policy.grayscale_prob)) augdetail::grayscale_one(out.image(i), out.h, out.w);
  }
  return out;
}

std::pair<ImageBatch, ImageBatch> make_views(const ImageBatch& img, const AugmentPolicy& policy,
                                             std::uint64_t epoch) {
  img.check();
  ImageBatch flipped = img;
  for (std::int64_t i = 0; i < img.b; ++i) {
    CounterRng rng(policy.seed, epoch, static_cast<std::uint64_t>(img.ids[static_cast<size_t>(i)]),
                   kOpFlip);
    if (rng.bernoulli(policy.flip_prob)) {
      const float* src = img.image(i);
      float* dst = flipped.image(i);
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < img.h; ++y)
          for (std::int64_t x = 0; x < img.w; ++x)
            dst[(c * img.h + y) * img.w + x] = src[(c * img.h + y) * img.w + (img.w - 1 - x)];
    }
  }
  ImageBatch v1 = random_resized_crop(flipped, policy, epoch, kOpCropView1);
  v1 = color_jitter(v1, policy, epoch, kOpJitterView1);
  v1 = to_grayscale(v1, policy, epoch, kOpGrayView1);
  ImageBatch v2 = random_resized_crop(flipped, policy, epoch, kOpCropView2);
  v2 = color_jitter(v2, policy, epoch, kOpJitterView2);
  v2 = to_grayscale(v2, policy, epoch, kOpGrayView2);
  return {std::move(v1), std::move(v2)};
}

}  // namespace amdim
