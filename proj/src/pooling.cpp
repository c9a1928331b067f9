#include "dcdl/pooling.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <string>

#include "dcdl/error.hpp"

namespace dcdl {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void require_shape(const Plane& pooled, const BlockGrid& grid) {
  if (pooled.rows() != grid.rows() || pooled.cols() != grid.cols()) {
    throw DimensionError("pooled plane does not match block grid");
  }
}

std::string block_name(std::size_t r, std::size_t c) {
  return "block (" + std::to_string(r) + "," + std::to_string(c) + ")";
}

}  // namespace

BlockGrid::BlockGrid(std::size_t source_rows, std::size_t source_cols,
                     std::size_t pool_rows, std::size_t pool_cols)
    : source_rows_(source_rows),
      source_cols_(source_cols),
      pool_rows_(pool_rows),
      pool_cols_(pool_cols) {
  if (source_rows == 0 || source_cols == 0 || pool_rows == 0 ||
      pool_cols == 0) {
    throw DimensionError("block grid dimensions must be positive");
  }
  rows_ = ceil_div(source_rows, pool_rows);
  cols_ = ceil_div(source_cols, pool_cols);
}

std::optional<std::pair<std::size_t, std::size_t>> BlockGrid::cell(
    std::size_t block_row, std::size_t block_col, int position) const {
  if (position < 1 || static_cast<std::size_t>(position) > block_size()) {
    throw RangeError("position " + std::to_string(position) +
                     " outside 1.." + std::to_string(block_size()));
  }
  const auto offset = static_cast<std::size_t>(position - 1);
  const std::size_t r = block_row * pool_rows_ + offset / pool_cols_;
  const std::size_t c = block_col * pool_cols_ + offset % pool_cols_;
  if (r >= source_rows_ || c >= source_cols_) return std::nullopt;
  return std::make_pair(r, c);
}

std::size_t BlockGrid::valid_count(std::size_t block_row,
                                   std::size_t block_col) const {
  const std::size_t r0 = block_row * pool_rows_;
  const std::size_t c0 = block_col * pool_cols_;
  const std::size_t nr = std::min(pool_rows_, source_rows_ - r0);
  const std::size_t nc = std::min(pool_cols_, source_cols_ - c0);
  return nr * nc;
}

PooledPlane pool_max(const Plane& s, const BlockGrid& grid) {
  if (s.rows() != grid.source_rows() || s.cols() != grid.source_cols()) {
    throw DimensionError("activation plane does not match block grid");
  }
  PooledPlane out{Plane(grid.rows(), grid.cols()),
                  PositionGrid(grid.rows(), grid.cols())};
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = 0; j < s.cols(); ++j) {
      const double v = s(i, j);
      if (v == 0.0) continue;
      const std::size_t br = i / grid.pool_rows();
      const std::size_t bc = j / grid.pool_cols();
      if (out.positions(br, bc) != 0) {
        throw InvariantViolation(block_name(br, bc) +
                                 " holds more than one non-zero");
      }
      out.values(br, bc) = v;
      out.positions(br, bc) = grid.position_of(i, j);
    }
  }
  return out;
}

Plane unpool(const Plane& pooled, const PositionGrid& positions,
             const BlockGrid& grid) {
  require_shape(pooled, grid);
  if (positions.rows() != pooled.rows() || positions.cols() != pooled.cols()) {
    throw DimensionError("position grid does not match pooled plane");
  }
  Plane out(grid.source_rows(), grid.source_cols());
  for (std::size_t br = 0; br < grid.rows(); ++br) {
    for (std::size_t bc = 0; bc < grid.cols(); ++bc) {
      const int p = positions(br, bc);
      const double v = pooled(br, bc);
      if (p < 0 || static_cast<std::size_t>(p) > grid.block_size()) {
        throw RangeError(block_name(br, bc) + " position " +
                         std::to_string(p) + " out of range");
      }
      if (p == 0) {
        if (v != 0.0) {
          throw ValidationError(block_name(br, bc) +
                                " has a non-zero value but position 0");
        }
        continue;
      }
      if (v == 0.0) {
        throw ValidationError(block_name(br, bc) +
                              " has position " + std::to_string(p) +
                              " but a zero value");
      }
      const auto cell = grid.cell(br, bc, p);
      if (!cell) {
        throw RangeError(block_name(br, bc) + " position " +
                         std::to_string(p) + " lies in padding");
      }
      out(cell->first, cell->second) = v;
    }
  }
  return out;
}

PositionGrid sample_positions(const Plane& pooled,
                              std::span<const std::vector<double>> weights,
                              const BlockGrid& grid, Rng& rng) {
  require_shape(pooled, grid);
  if (weights.size() != grid.block_count()) {
    throw DimensionError("need one weight vector per block");
  }
  PositionGrid out(grid.rows(), grid.cols());
  std::vector<double> log_w(grid.block_size());
  for (std::size_t br = 0; br < grid.rows(); ++br) {
    for (std::size_t bc = 0; bc < grid.cols(); ++bc) {
      if (pooled(br, bc) == 0.0) continue;
      const auto& w = weights[br * grid.cols() + bc];
      if (w.size() != grid.block_size()) {
        throw DimensionError("weight vector length must equal block size");
      }
      bool any = false;
      for (std::size_t p = 0; p < w.size(); ++p) {
        const bool valid = grid.cell(br, bc, static_cast<int>(p + 1)).has_value();
        if (w[p] < 0.0 || !std::isfinite(w[p])) {
          throw ValidationError(block_name(br, bc) + " has a negative weight");
        }
        const double eff = valid ? w[p] : 0.0;
        log_w[p] = eff > 0.0 ? std::log(eff)
                             : -std::numeric_limits<double>::infinity();
        any = any || eff > 0.0;
      }
      if (!any) {
        throw DegenerateError(block_name(br, bc) +
                              " has all-zero position weights");
      }
      out(br, bc) = static_cast<int>(categorical_from_log(rng, log_w)) + 1;
    }
  }
  return out;
}

bool at_most_one_per_block(const Plane& s, const BlockGrid& grid) {
  PositionGrid seen(grid.rows(), grid.cols());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (s(i, j) == 0.0) continue;
      int& n = seen(i / grid.pool_rows(), j / grid.pool_cols());
      if (++n > 1) return false;
    }
  }
  return true;
}

}  // namespace dcdl
