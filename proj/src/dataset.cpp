#include "amdim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "amdim/rng.hpp"

namespace fs = std::filesystem;

namespace amdim {

namespace {

constexpr std::int64_t kCifarSide = 32;
constexpr std::int64_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError(path, 0, "cannot open file");
  in.seekg(0, std::ios::end);
  const auto len = static_cast<std::int64_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(static_cast<size_t>(len));
  if (len > 0) in.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!in) throw IngestError(path, 0, "read failed");
  return bytes;
}

void append_cifar_file(const std::string& path, std::vector<float>* pixels,
                       std::vector<int>* labels) {
  const auto bytes = read_file_bytes(path);
  const auto size = static_cast<std::int64_t>(bytes.size());
  const std::int64_t records = size / kCifarRecord;
  if (size % kCifarRecord != 0)
    throw IngestError(path, records * kCifarRecord,
                      "truncated record (file size " + std::to_string(size) +
                          " is not a multiple of " + std::to_string(kCifarRecord) + ")");
  if (records == 0) throw IngestError(path, 0, "file holds no records");
  for (std::int64_t r = 0; r < records; ++r) {
    const std::int64_t off = r * kCifarRecord;
    const unsigned char label = bytes[static_cast<size_t>(off)];
    if (label > 9)
      throw IngestError(path, off, "label byte " + std::to_string(label) + " out of range 0..9");
    labels->push_back(label);
    for (std::int64_t i = 0; i < kCifarRecord - 1; ++i)
      pixels->push_back(static_cast<float>(bytes[static_cast<size_t>(off + 1 + i)]) / 255.0f);
  }
}

Dataset load_cifar10_binary(const std::string& path) {
  std::vector<std::string> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IngestError(path, 0, "directory holds no .bin files");
  } else if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else {
    throw IngestError(path, 0, "no such file or directory");
  }

  std::vector<float> pixels;
  std::vector<int> labels;
  for (const auto& f : files) append_cifar_file(f, &pixels, &labels);

  Dataset ds;
  ds.num_classes = 10;
  ds.labels = std::move(labels);
  ds.images = ImageBatch::blank(static_cast<std::int64_t>(ds.labels.size()), kCifarSide);
  ds.images.data = std::move(pixels);
  for (std::int64_t i = 0; i < ds.images.b; ++i) ds.images.ids[static_cast<size_t>(i)] = i;
  ds.images.check();
  return ds;
}

// PPM (P6) reader; 8-bit RGB only
void read_ppm(const std::string& path, std::vector<float>* pixels, std::int64_t* side) {
  const auto bytes = read_file_bytes(path);
  size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      const char c = static_cast<char>(bytes[pos]);
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::int64_t {
    skip_ws();
    const size_t start = pos;
    std::int64_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
    }
    if (pos == start) throw IngestError(path, static_cast<std::int64_t>(pos), "expected integer");
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    throw IngestError(path, 0, "not a P6 PPM file");
  pos = 2;
  const std::int64_t w = read_int();
  const std::int64_t h = read_int();
  const std::int64_t maxval = read_int();
  if (maxval != 255)
    throw IngestError(path, static_cast<std::int64_t>(pos), "only maxval 255 supported");
  if (w != h)
    throw IngestError(path, static_cast<std::int64_t>(pos), "images must be square, got " +
                                                                std::to_string(w) + "x" +
                                                                std::to_string(h));
  ++pos;  // single whitespace byte after the header
  const std::int64_t need = 3 * w * h;
  if (static_cast<std::int64_t>(bytes.size()) - static_cast<std::int64_t>(pos) < need)
    throw IngestError(path, static_cast<std::int64_t>(bytes.size()), "truncated pixel data");
  *side = w;
  // interleaved RGB -> planar
  const unsigned char* px = bytes.data() + pos;
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < w * h; ++i)
      pixels->push_back(static_cast<float>(px[3 * i + c]) / 255.0f);
}

Dataset load_image_directory(const std::string& path) {
  if (!fs::is_directory(path)) throw IngestError(path, 0, "no such directory");
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_directory()) classes.push_back(e.path().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw IngestError(path, 0, "no class subdirectories");

  std::vector<float> pixels;
  std::vector<int> labels;
  std::int64_t side = 0;
  for (size_t c = 0; c < classes.size(); ++c) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::int64_t s = 0;
      read_ppm(f, &pixels, &s);
      if (side == 0) side = s;
      if (s != side)
        throw IngestError(f, 0, "image size " + std::to_string(s) + " differs from first image (" +
                                    std::to_string(side) + ")");
      labels.push_back(static_cast<int>(c));
    }
  }
  if (labels.empty()) throw IngestError(path, 0, "no .ppm images found");

  Dataset ds;
  ds.num_classes = static_cast<int>(classes.size());
  ds.labels = std::move(labels);
  ds.images = ImageBatch::blank(static_cast<std::int64_t>(ds.labels.size()), side);
  ds.images.data = std::move(pixels);
  for (std::int64_t i = 0; i < ds.images.b; ++i) ds.images.ids[static_cast<size_t>(i)] = i;
  ds.images.check();
  return ds;
}

inline float quantize_byte(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<float>(std::lround(c * 255.0f)) / 255.0f;
}

void hue_to_rgb(double hue, float* r, float* g, float* b) {
  const double h6 = 6.0 * (hue - std::floor(hue));
  const int sext = static_cast<int>(h6);
  const double f = h6 - sext;
  const double q = 1.0 - f;
  double rr = 0, gg = 0, bb = 0;
  switch (sext % 6) {
    case 0: rr = 1; gg = f; break;
    case 1: rr = q; gg = 1; break;
    case 2: gg = 1; bb = f; break;
    case 3: gg = q; bb = 1; break;
    case 4: rr = f; bb = 1; break;
    default: rr = 1; bb = q; break;
  }
  *r = static_cast<float>(rr);
  *g = static_cast<float>(gg);
  *b = static_cast<float>(bb);
}

}  // namespace

ImageBatch Dataset::batch(const std::vector<std::int64_t>& idx) const {
  AMDIM_CHECK(!idx.empty(), "Dataset::batch needs at least one index");
  ImageBatch out = ImageBatch::blank(static_cast<std::int64_t>(idx.size()), images.h);
  for (size_t i = 0; i < idx.size(); ++i) {
    AMDIM_CHECK(idx[i] >= 0 && idx[i] < images.b, "Dataset::batch index " << idx[i]
                                                                          << " out of range");
    out.ids[i] = images.ids[static_cast<size_t>(idx[i])];
    std::copy(images.image(idx[i]), images.image(idx[i]) + images.pixels_per_image(),
              out.image(static_cast<std::int64_t>(i)));
  }
  return out;
}

Dataset make_synthetic(std::int64_t count, std::int64_t size, std::uint64_t seed) {
  AMDIM_CHECK(count >= 1 && size >= 8, "synthetic dataset needs count >= 1 and size >= 8");
  Dataset ds;
  ds.num_classes = 10;
  ds.images = ImageBatch::blank(count, size);
  ds.labels.resize(static_cast<size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    CounterRng rng(seed, 0xda7a5e7ULL, static_cast<std::uint64_t>(i));
    const int cls = static_cast<int>(i % 10);
    ds.labels[static_cast<size_t>(i)] = cls;
    ds.images.ids[static_cast<size_t>(i)] = i;

    // class-coloured gradient background with a complementary-coloured shape;
    // classes are separable mostly by hue, with per-image nuisance variation
    float br, bg, bb;
    hue_to_rgb(cls / 10.0, &br, &bg, &bb);
    float fr, fg, fb;
    hue_to_rgb(cls / 10.0 + 0.5, &fr, &fg, &fb);
    const float lum_lo = static_cast<float>(rng.uniform(0.25, 0.5));
    const float lum_hi = static_cast<float>(rng.uniform(0.7, 1.0));
    const bool vertical = rng.bernoulli(0.5);
    const double cx = rng.uniform(0.25, 0.75) * static_cast<double>(size);
    const double cy = rng.uniform(0.25, 0.75) * static_cast<double>(size);
    const double rad = rng.uniform(0.15, 0.3) * static_cast<double>(size);
    const bool circle = (cls % 2) == 0;

    float* img = ds.images.image(i);
    const std::int64_t n = size * size;
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        const double t = static_cast<double>(vertical ? y : x) / static_cast<double>(size - 1);
        float lum = lum_lo + static_cast<float>(t) * (lum_hi - lum_lo);
        float r = br * lum, g = bg * lum, b = bb * lum;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const bool inside = circle ? (dx * dx + dy * dy <= rad * rad)
                                   : (std::abs(dx) <= rad && std::abs(dy) <= rad);
        if (inside) {
          r = fr * 0.9f;
          g = fg * 0.9f;
          b = fb * 0.9f;
        }
        const float noise = static_cast<float>(rng.uniform(-0.04, 0.04));
        const std::int64_t p = y * size + x;
        img[p] = quantize_byte(r + noise);
        img[n + p] = quantize_byte(g + noise);
        img[2 * n + p] = quantize_byte(b + noise);
      }
    }
  }
  ds.images.check();
  return ds;
}

void write_cifar10_binary(const std::string& path, const Dataset& ds) {
  ds.images.check();
  AMDIM_CHECK(ds.images.h == kCifarSide && ds.images.w == kCifarSide,
              "cifar10-binary requires 32x32 images, got " << ds.images.h << "x" << ds.images.w);
  AMDIM_CHECK(static_cast<std::int64_t>(ds.labels.size()) == ds.images.b,
              "label list does not match image count");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestError(path, 0, "cannot open file for writing");
  std::vector<unsigned char> rec(static_cast<size_t>(kCifarRecord));
  for (std::int64_t i = 0; i < ds.images.b; ++i) {
    const int label = ds.labels[static_cast<size_t>(i)];
    AMDIM_CHECK(label >= 0 && label <= 9, "cifar10-binary label must be in 0..9, got " << label);
    rec[0] = static_cast<unsigned char>(label);
    const float* img = ds.images.image(i);
    for (std::int64_t p = 0; p < kCifarRecord - 1; ++p) {
      const float v = std::min(1.0f, std::max(0.0f, img[p]));
      rec[static_cast<size_t>(1 + p)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(rec.data()), kCifarRecord);
  }
  if (!out) throw IngestError(path, 0, "write failed");
}

Dataset load_dataset(const std::string& path, const std::string& format, std::int64_t limit) {
  Dataset ds;
  if (format == "cifar10-binary") {
    ds = load_cifar10_binary(path);
  } else if (format == "image-directory") {
    ds = load_image_directory(path);
  } else if (format == "synthetic") {
    // path spells the recipe: "<count>x<size>@<seed>"
    std::int64_t count = 0, size = 0;
    unsigned long long seed = 0;
    char tail = 0;
    if (std::sscanf(path.c_str(), "%ld" "x" "%ld" "@" "%llu%c", &count, &size, &seed, &tail) != 3)
      throw IngestError(path, 0, "synthetic spec must look like <count>x<size>@<seed>");
    ds = make_synthetic(count, size, seed);
  } else {
    AMDIM_CONFIG_CHECK(false, "unknown dataset format '" << format
                                                         << "' (want cifar10-binary, "
                                                            "image-directory or synthetic)");
  }
  if (limit > 0 && limit < ds.images.b) {
    Dataset cut;
    cut.num_classes = ds.num_classes;
    cut.images = ImageBatch::blank(limit, ds.images.h);
    cut.labels.assign(ds.labels.begin(), ds.labels.begin() + limit);
    cut.images.ids.assign(ds.images.ids.begin(), ds.images.ids.begin() + limit);
    std::copy(ds.images.data.begin(),
              ds.images.data.begin() + limit * ds.images.pixels_per_image(),
              cut.images.data.begin());
    return cut;
  }
  return ds;
}

}  // namespace amdim
