#include "dcdl/tensor_ops.hpp"

#include <cmath>
#include <string>

namespace dcdl {

namespace {

void require_non_empty(const Plane& p, const char* name) {
  if (p.empty()) throw DimensionError(std::string(name) + " is empty");
}

}  // namespace

void ensure_finite(const Plane& p, const char* what) {
  for (double v : p.values()) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string("non-finite value in ") + what);
    }
  }
}

Plane conv2d_full(const Plane& d, const Plane& s) {
  require_non_empty(d, "kernel");
  require_non_empty(s, "signal");
  Plane out(d.rows() + s.rows() - 1, d.cols() + s.cols() - 1);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = 0; j < s.cols(); ++j) {
      const double v = s(i, j);
      if (v != 0.0) add_placed(out, d, i, j, v);
    }
  }
  ensure_finite(out, "conv2d_full");
  return out;
}

Plane corr2d_valid(const Plane& d, const Plane& x) {
  require_non_empty(d, "kernel");
  require_non_empty(x, "input");
  if (d.rows() > x.rows() || d.cols() > x.cols()) {
    throw DimensionError("kernel " + std::to_string(d.rows()) + "x" +
                         std::to_string(d.cols()) + " larger than input " +
                         std::to_string(x.rows()) + "x" +
                         std::to_string(x.cols()));
  }
  Plane out(x.rows() - d.rows() + 1, x.cols() - d.cols() + 1);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) {
      out(i, j) = placed_inner(d, x, i, j);
    }
  }
  ensure_finite(out, "corr2d_valid");
  return out;
}

Plane hadamard(const Plane& a, const Plane& b) {
  if (!a.same_shape(b)) throw DimensionError("hadamard shape mismatch");
  Plane out(a.rows(), a.cols());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  ensure_finite(out, "hadamard");
  return out;
}

double inner(const Plane& a, const Plane& b) {
  if (!a.same_shape(b)) throw DimensionError("inner product shape mismatch");
  double acc = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  return acc;
}

double squared_norm(const Plane& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  return acc;
}

double squared_norm(const Volume& v) {
  double acc = 0.0;
  for (const auto& p : v) acc += squared_norm(p);
  return acc;
}

void add_placed(Plane& dst, const Plane& kernel, std::size_t r, std::size_t c,
                double scale) {
  const std::size_t kw = kernel.cols();
  for (std::size_t p = 0; p < kernel.rows(); ++p) {
    double* out = dst.row(r + p) + c;
    const double* k = kernel.row(p);
    for (std::size_t q = 0; q < kw; ++q) out[q] += scale * k[q];
  }
}

double placed_inner(const Plane& kernel, const Plane& x, std::size_t r,
                    std::size_t c) {
  const std::size_t kw = kernel.cols();
  double acc = 0.0;
  for (std::size_t p = 0; p < kernel.rows(); ++p) {
    const double* in = x.row(r + p) + c;
    const double* k = kernel.row(p);
    for (std::size_t q = 0; q < kw; ++q) acc += k[q] * in[q];
  }
  return acc;
}

Plane extract_patch(const Plane& x, std::size_t r, std::size_t c,
                    std::size_t height, std::size_t width) {
  if (r + height > x.rows() || c + width > x.cols()) {
    throw DimensionError("patch exceeds plane bounds");
  }
  Plane out(height, width);
  for (std::size_t p = 0; p < height; ++p) {
    for (std::size_t q = 0; q < width; ++q) out(p, q) = x(r + p, c + q);
  }
  return out;
}

}  // namespace dcdl
