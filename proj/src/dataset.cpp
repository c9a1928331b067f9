#include "dcdl/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "dcdl/error.hpp"
#include "dcdl/random.hpp"

namespace dcdl {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSplitStream = 6;

std::vector<unsigned char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ItemError(path.string(), "cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// PGM header token, skipping whitespace and '#' comments.
std::string pgm_token(const std::vector<unsigned char>& b, std::size_t& at,
                      const fs::path& path) {
  for (;;) {
    while (at < b.size() && std::isspace(b[at])) ++at;
    if (at < b.size() && b[at] == '#') {
      while (at < b.size() && b[at] != '\n') ++at;
      continue;
    }
    break;
  }
  std::string tok;
  while (at < b.size() && !std::isspace(b[at]) && b[at] != '#') {
    tok.push_back(static_cast<char>(b[at++]));
  }
  if (tok.empty()) throw LengthError(path.string() + ": truncated PGM header");
  return tok;
}

std::size_t pgm_number(const std::string& tok, const fs::path& path) {
  if (tok.find_first_not_of("0123456789") != std::string::npos ||
      tok.size() > 9) {
    throw FormatError(path.string() + ": bad PGM header field '" + tok + "'");
  }
  return std::stoul(tok);
}

std::vector<unsigned char> to_bytes(const Plane& image, bool normalize) {
  double lo = 0.0, hi = 1.0;
  if (normalize && !image.empty()) {
    const auto [mn, mx] = std::minmax_element(image.values().begin(),
                                              image.values().end());
    lo = *mn;
    hi = *mx;
  }
  std::vector<unsigned char> out;
  out.reserve(image.size());
  for (double v : image.values()) {
    double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    if (!std::isfinite(t)) t = 0.0;
    t = std::clamp(t, 0.0, 1.0);
    out.push_back(static_cast<unsigned char>(std::lround(t * 255.0)));
  }
  return out;
}

void write_p5(const fs::path& path, std::size_t rows, std::size_t cols,
              const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ItemError(path.string(), "cannot open for writing");
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ItemError(path.string(), "write failed");
}

Dataset pick(const Dataset& data, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.name = data.name;
  out.class_names = data.class_names;
  for (std::size_t i : idx) {
    out.images.push_back(data.images[i]);
    out.ids.push_back(data.ids[i]);
    if (data.labelled()) out.labels.push_back(data.labels[i]);
  }
  return out;
}

}  // namespace

void Dataset::validate() const {
  if (!labels.empty() && labels.size() != images.size()) {
    throw ConsistencyError("dataset '" + name + "' has " +
                           std::to_string(images.size()) + " images but " +
                           std::to_string(labels.size()) + " labels");
  }
  if (ids.size() != images.size()) {
    throw ConsistencyError("dataset '" + name + "' ids do not match images");
  }
  for (const auto& im : images) {
    if (!im.same_shape(images.front())) {
      throw ConsistencyError("dataset '" + name +
                             "' mixes image dimensions");
    }
  }
}

Dataset load_mnist_idx(const fs::path& images, const fs::path& labels) {
  const auto b = read_all(images);
  if (b.size() < 16) throw LengthError(images.string() + ": truncated IDX header");
  if (be32(b, 0) != 2051) {
    throw FormatError(images.string() + ": bad magic " +
                      std::to_string(be32(b, 0)) + ", expected 2051");
  }
  const std::size_t n = be32(b, 4), rows = be32(b, 8), cols = be32(b, 12);
  if (b.size() != 16 + n * rows * cols) {
    throw LengthError(images.string() + ": expected " +
                      std::to_string(16 + n * rows * cols) + " bytes, found " +
                      std::to_string(b.size()));
  }
  Dataset d;
  d.name = images.filename().string();
  for (std::size_t i = 0; i < n; ++i) {
    Plane p(rows, cols);
    const unsigned char* src = b.data() + 16 + i * rows * cols;
    for (std::size_t k = 0; k < rows * cols; ++k) {
      p.values()[k] = static_cast<double>(src[k]) / 255.0;
    }
    d.images.push_back(std::move(p));
    d.ids.push_back(std::to_string(i));
  }
  if (!labels.empty()) {
    const auto l = read_all(labels);
    if (l.size() < 8) throw LengthError(labels.string() + ": truncated IDX header");
    if (be32(l, 0) != 2049) {
      throw FormatError(labels.string() + ": bad magic " +
                        std::to_string(be32(l, 0)) + ", expected 2049");
    }
    const std::size_t m = be32(l, 4);
    if (l.size() != 8 + m) {
      throw LengthError(labels.string() + ": expected " +
                        std::to_string(8 + m) + " bytes, found " +
                        std::to_string(l.size()));
    }
    if (m != n) {
      throw ConsistencyError(std::to_string(n) + " images but " +
                             std::to_string(m) + " labels");
    }
    for (std::size_t i = 0; i < m; ++i) d.labels.push_back(l[8 + i]);
  }
  return d;
}

Plane read_pgm(const fs::path& path) {
  const auto b = read_all(path);
  std::size_t at = 0;
  const std::string magic = pgm_token(b, at, path);
  if (magic != "P5") {
    throw FormatError(path.string() + ": not a binary PGM (magic '" + magic +
                      "')");
  }
  const std::size_t cols = pgm_number(pgm_token(b, at, path), path);
  const std::size_t rows = pgm_number(pgm_token(b, at, path), path);
  const std::size_t maxval = pgm_number(pgm_token(b, at, path), path);
  if (rows == 0 || cols == 0) throw FormatError(path.string() + ": empty image");
  if (maxval == 0 || maxval > 255) {
    throw FormatError(path.string() + ": only 8-bit PGM is supported (maxval " +
                      std::to_string(maxval) + ")");
  }
  if (at >= b.size() || !std::isspace(b[at])) {
    throw LengthError(path.string() + ": truncated PGM header");
  }
  ++at;  // single whitespace before the raster
  if (b.size() - at < rows * cols) {
    throw LengthError(path.string() + ": raster has " +
                      std::to_string(b.size() - at) + " bytes, expected " +
                      std::to_string(rows * cols));
  }
  Plane p(rows, cols);
  for (std::size_t k = 0; k < rows * cols; ++k) {
    p.values()[k] = static_cast<double>(b[at + k]) / static_cast<double>(maxval);
  }
  return p;
}

void write_pgm(const fs::path& path, const Plane& image) {
  write_p5(path, image.rows(), image.cols(), to_bytes(image, false));
}

void write_pgm_normalized(const fs::path& path, const Plane& image) {
  write_p5(path, image.rows(), image.cols(), to_bytes(image, true));
}

Plane resize_bilinear(const Plane& image, std::size_t rows, std::size_t cols) {
  if (image.empty() || rows == 0 || cols == 0) {
    throw DimensionError("resize needs non-empty source and target");
  }
  if (image.rows() == rows && image.cols() == cols) return image;
  Plane out(rows, cols);
  const double sy = static_cast<double>(image.rows()) / static_cast<double>(rows);
  const double sx = static_cast<double>(image.cols()) / static_cast<double>(cols);
  const auto last_r = static_cast<double>(image.rows() - 1);
  const auto last_c = static_cast<double>(image.cols() - 1);
  for (std::size_t i = 0; i < rows; ++i) {
    const double y = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, last_r);
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, image.rows() - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, last_c);
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, image.cols() - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = image(y0, x0) + fx * (image(y0, x1) - image(y0, x0));
      const double bot = image(y1, x0) + fx * (image(y1, x1) - image(y1, x0));
      out(i, j) = top + fy * (bot - top);
    }
  }
  return out;
}

Dataset load_image_dir(const fs::path& root, const std::string& extension,
                       std::size_t rows, std::size_t cols,
                       const WarningSink& warn) {
  if (!fs::is_directory(root)) {
    throw ItemError(root.string(), "not a directory");
  }
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  const std::string ext = lower(extension);
  Dataset d;
  d.name = root.filename().string();
  for (const auto& dir : classes) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && lower(e.path().extension().string()) == ext) {
        files.push_back(e.path());
      }
    }
    if (files.empty()) {
      if (warn) warn("class directory " + dir.string() + " is empty; skipped");
      continue;
    }
    std::sort(files.begin(), files.end());
    const int label = static_cast<int>(d.class_names.size());
    d.class_names.push_back(dir.filename().string());
    for (const auto& f : files) {
      Plane p;
      try {
        p = read_pgm(f);
      } catch (const ItemError&) {
        throw;
      } catch (const Error& e) {
        throw ItemError(f.string(), e.what());
      }
      d.images.push_back(resize_bilinear(p, rows, cols));
      d.labels.push_back(label);
      d.ids.push_back(fs::relative(f, root).generic_string());
    }
  }
  return d;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& data,
                                            std::size_t train_per_class,
                                            std::size_t test_per_class,
                                            std::uint64_t seed) {
  if (!data.labelled()) throw ValidationError("per-class split needs labels");
  data.validate();
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  Rng rng = derive_stream(seed, kSplitStream, 0);
  std::vector<std::size_t> train, test;
  for (auto& [label, members] : by_class) {
    const std::size_t need = train_per_class + test_per_class;
    if (members.size() < need) {
      const std::string name =
          static_cast<std::size_t>(label) < data.class_names.size()
              ? data.class_names[static_cast<std::size_t>(label)]
              : std::to_string(label);
      throw ValidationError("class '" + name + "' has " +
                            std::to_string(members.size()) +
                            " items, split needs " + std::to_string(need));
    }
    for (std::size_t i = members.size(); i > 1; --i) {
      const auto r = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
      std::swap(members[i - 1], members[std::min(r, i - 1)]);
    }
    train.insert(train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(train_per_class));
    test.insert(test.end(), members.begin() + static_cast<std::ptrdiff_t>(train_per_class),
                members.begin() + static_cast<std::ptrdiff_t>(need));
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {pick(data, train), pick(data, test)};
}

Dataset slice(const Dataset& data, std::size_t offset, std::size_t count) {
  if (offset > data.size()) {
    throw ValidationError("offset " + std::to_string(offset) +
                          " beyond dataset of " + std::to_string(data.size()));
  }
  const std::size_t end = count == 0 ? data.size() : offset + count;
  if (end > data.size()) {
    throw ValidationError("requested items up to " + std::to_string(end) +
                          " but dataset has " + std::to_string(data.size()));
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = offset; i < end; ++i) idx.push_back(i);
  return pick(data, idx);
}

void subtract_image_means(Dataset& data) {
  for (auto& im : data.images) {
    double m = 0.0;
    for (double v : im.values()) m += v;
    m /= static_cast<double>(im.size());
    for (double& v : im.values()) v -= m;
  }
}

}  // namespace dcdl
