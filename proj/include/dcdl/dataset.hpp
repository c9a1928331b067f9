#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dcdl/plane.hpp"

namespace dcdl {

// Gray-scale images with values in [0, 1] and optional aligned labels.
struct Dataset {
  std::string name;
  std::vector<Plane> images;
  std::vector<int> labels;  // empty or one per image
  std::vector<std::string> ids;  // one per image
  std::vector<std::string> class_names;  // label -> name, when known

  std::size_t size() const noexcept { return images.size(); }
  bool labelled() const noexcept { return !labels.empty(); }
  // Throws ConsistencyError when labels/ids are misaligned or image sizes
  // differ.
  void validate() const;
};

// Big-endian IDX: magic 2051 images (count, rows, cols, bytes) and 2049
// labels. Pixels are scaled by 1/255. An empty labels path loads images only.
Dataset load_mnist_idx(const std::filesystem::path& images,
                       const std::filesystem::path& labels = {});

// 8-bit binary PGM (P5). Values are scaled by 1/maxval.
Plane read_pgm(const std::filesystem::path& path);
// Writes values clamped to [0, 1] as 8-bit P5.
void write_pgm(const std::filesystem::path& path, const Plane& image);
// Linearly maps [min, max] to [0, 255]; a constant plane becomes mid-gray.
void write_pgm_normalized(const std::filesystem::path& path, const Plane& image);

// Pixel-centre aligned bilinear interpolation.
Plane resize_bilinear(const Plane& image, std::size_t rows, std::size_t cols);

using WarningSink = std::function<void(const std::string&)>;

// One subdirectory per class, labels assigned in lexical order of the
// subdirectory names. Files whose extension matches (case-insensitive) are
// loaded and resized to rows x cols; empty classes are reported to `warn`
// and skipped. Only PGM is decoded.
Dataset load_image_dir(const std::filesystem::path& root,
                       const std::string& extension, std::size_t rows,
                       std::size_t cols, const WarningSink& warn = {});

// Seed-deterministic per-class split: `train_per_class` items of every class
// go to the first set and the next `test_per_class` to the second. Throws
// ValidationError naming the class when it is too small.
std::pair<Dataset, Dataset> split_per_class(const Dataset& data,
                                            std::size_t train_per_class,
                                            std::size_t test_per_class,
                                            std::uint64_t seed);

// Items [offset, offset + count); count 0 means to the end.
Dataset slice(const Dataset& data, std::size_t offset, std::size_t count);

// Subtracts each image's mean in place.
void subtract_image_means(Dataset& data);

}  // namespace dcdl
