#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dcdl/plane.hpp"
#include "dcdl/random.hpp"

namespace dcdl {

// Partition of a source plane into contiguous pool_rows x pool_cols blocks.
// The source is conceptually zero-padded on the bottom/right up to the next
// multiple of the pool size; padding cells belong to a block but can never
// hold an activation.
//
// Positions are 1-based row-major offsets inside a block; 0 means the block
// is entirely zero.
class BlockGrid {
 public:
  BlockGrid() = default;
  BlockGrid(std::size_t source_rows, std::size_t source_cols,
            std::size_t pool_rows, std::size_t pool_cols);

  std::size_t source_rows() const noexcept { return source_rows_; }
  std::size_t source_cols() const noexcept { return source_cols_; }
  std::size_t pool_rows() const noexcept { return pool_rows_; }
  std::size_t pool_cols() const noexcept { return pool_cols_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t block_count() const noexcept { return rows_ * cols_; }
  std::size_t block_size() const noexcept { return pool_rows_ * pool_cols_; }

  // Source cell for a 1-based position, or nullopt for a padding cell.
  std::optional<std::pair<std::size_t, std::size_t>> cell(
      std::size_t block_row, std::size_t block_col, int position) const;

  // 1-based position of a source cell within its block.
  int position_of(std::size_t row, std::size_t col) const noexcept {
    return static_cast<int>((row % pool_rows_) * pool_cols_ +
                            (col % pool_cols_)) +
           1;
  }

  // Non-padding cells of a block.
  std::size_t valid_count(std::size_t block_row, std::size_t block_col) const;

 private:
  std::size_t source_rows_ = 0;
  std::size_t source_cols_ = 0;
  std::size_t pool_rows_ = 1;
  std::size_t pool_cols_ = 1;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
};

struct PooledPlane {
  Plane values;
  PositionGrid positions;
};

// Max-amplitude pooling of a plane with at most one non-zero per block.
// Throws InvariantViolation when a block holds two or more non-zeros.
PooledPlane pool_max(const Plane& s, const BlockGrid& grid);

// Places each pooled value at its block offset. Throws ValidationError for a
// non-zero value with position 0 (or a zero value with a non-zero position),
// RangeError for positions outside 0..block_size or on padding cells.
Plane unpool(const Plane& pooled, const PositionGrid& positions,
             const BlockGrid& grid);

// Draws a position for each non-zero parent value, proportional to that
// block's weight vector (length block_size, row-major); zero parents get 0.
// Weights on padding cells are ignored. Blocks are visited row-major and one
// uniform is consumed per non-zero parent.
PositionGrid sample_positions(const Plane& pooled,
                              std::span<const std::vector<double>> weights,
                              const BlockGrid& grid, Rng& rng);

// True when every block of s holds at most one non-zero.
bool at_most_one_per_block(const Plane& s, const BlockGrid& grid);

}  // namespace dcdl
