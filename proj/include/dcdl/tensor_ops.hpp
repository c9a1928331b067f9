#pragma once

#include <cstddef>

#include "dcdl/plane.hpp"

namespace dcdl {

// Full 2D convolution: out[i,j] = sum_{p,q} d[p,q] * s[i-p, j-q].
// Output is (d_h + s_h - 1) x (d_w + s_w - 1).
Plane conv2d_full(const Plane& d, const Plane& s);

// Valid cross-correlation, the adjoint of conv2d_full in its second argument:
// out[i,j] = sum_{p,q} d[p,q] * x[i+p, j+q].
Plane corr2d_valid(const Plane& d, const Plane& x);

Plane hadamard(const Plane& a, const Plane& b);

double inner(const Plane& a, const Plane& b);
double squared_norm(const Plane& a);
double squared_norm(const Volume& v);

// dst[r+p, c+q] += scale * kernel[p,q]. No bounds checks; the caller keeps
// the kernel inside dst.
void add_placed(Plane& dst, const Plane& kernel, std::size_t r, std::size_t c,
                double scale);

// sum_{p,q} kernel[p,q] * x[r+p, c+q]. No bounds checks.
double placed_inner(const Plane& kernel, const Plane& x, std::size_t r,
                    std::size_t c);

Plane extract_patch(const Plane& x, std::size_t r, std::size_t c,
                    std::size_t height, std::size_t width);

// Throws NumericalError naming `what` if any entry is NaN or infinite.
void ensure_finite(const Plane& p, const char* what);

}  // namespace dcdl
