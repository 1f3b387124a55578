#pragma once

#include <cstdint>
#include <vector>

#include "amdim/common.hpp"

namespace amdim {

// Batch of RGB images in [B,3,H,W] layout, values in [0,1]. Images are
// square; `ids` names the source image (stable across epochs and shuffles).
struct ImageBatch {
  std::int64_t b = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<float> data;
  std::vector<std::int64_t> ids;

  static ImageBatch blank(std::int64_t b, std::int64_t size) {
    ImageBatch out;
    out.b = b;
    out.h = out.w = size;
    out.data.assign(static_cast<size_t>(b * 3 * size * size), 0.0f);
    out.ids.assign(static_cast<size_t>(b), 0);
    return out;
  }

  float* image(std::int64_t i) { return data.data() + i * 3 * h * w; }
  const float* image(std::int64_t i) const { return data.data() + i * 3 * h * w; }
  std::int64_t pixels_per_image() const { return 3 * h * w; }

  void check() const {
    AMDIM_CHECK(b >= 1, "ImageBatch must hold at least one image");
    AMDIM_CHECK(h == w, "ImageBatch images must be square, got " << h << "x" << w);
    AMDIM_CHECK(static_cast<std::int64_t>(data.size()) == b * 3 * h * w,
                "ImageBatch buffer size mismatch");
    AMDIM_CHECK(static_cast<std::int64_t>(ids.size()) == b, "ImageBatch id list mismatch");
  }
};

// luminance with exact identity on gray pixels (r + 0.587(g-r) + 0.114(b-r)
// equals 0.299r + 0.587g + 0.114b in exact arithmetic)
inline float luminance(float r, float g, float b) {
  return r + 0.587f * (g - r) + 0.114f * (b - r);
}

}  // namespace amdim
