#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "amdim/image.hpp"

namespace amdim {

struct Dataset {
  ImageBatch images;         // every image, one shared square size
  std::vector<int> labels;   // parallel to images; -1 when unlabeled
  int num_classes = 0;

  std::int64_t size() const { return images.b; }

  // gather a batch by dataset indices
  ImageBatch batch(const std::vector<std::int64_t>& idx) const;
};

// format in {"cifar10-binary", "image-directory", "synthetic"}.
//
// cifar10-binary: a single .bin file or a directory of data_batch_*.bin /
// test_batch.bin files; 3073-byte records, 1 label byte then 3072 pixel bytes
// (32x32 R plane, then G, then B, row-major), bytes scaled to [0,1].
//
// image-directory: one subdirectory per class, holding 8-bit RGB PPM (P6)
// images, all the same square size; classes ordered by subdirectory name.
//
// synthetic: path is "<count>x<size>@<seed>" (e.g. "2048x32@7"), generating
// seeded procedural scenes over 10 classes.
Dataset load_dataset(const std::string& path, const std::string& format,
                     std::int64_t limit = -1);

// writes images quantized to bytes in the cifar10-binary record layout
void write_cifar10_binary(const std::string& path, const Dataset& ds);

// seeded procedural scenes; pixel values quantized to the byte grid so a
// cifar10-binary round trip is bit-exact
Dataset make_synthetic(std::int64_t count, std::int64_t size, std::uint64_t seed);

}  // namespace amdim
