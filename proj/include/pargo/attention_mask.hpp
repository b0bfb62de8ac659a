#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pargo/error.hpp"

namespace pargo {

/// Boolean query-by-key matrix; true means the query may attend to the key.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t rows, std::size_t cols, bool fill = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

  static AttentionMask full(std::size_t rows, std::size_t cols) { return {rows, cols, true}; }

  static AttentionMask identity(std::size_t n) {
    AttentionMask m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.set(i, i, true);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool on) { bits_[r * cols_ + c] = on ? 1 : 0; }

  std::size_t row_count(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += bits_[r * cols_ + c];
    return n;
  }

  bool all_true() const {
    for (auto b : bits_) {
      if (!b) return false;
    }
    return true;
  }

  /// Column indices visible from row r, ascending.
  std::vector<std::size_t> visible(std::size_t r) const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < cols_; ++c) {
      if (bits_[r * cols_ + c]) out.push_back(c);
    }
    return out;
  }

  void require_nonempty_rows() const {
    for (std::size_t r = 0; r < rows_; ++r) {
      if (row_count(r) == 0) {
        throw MaskError("attention mask row " + std::to_string(r) + " has no visible key (softmax over empty set)");
      }
    }
  }

  void require_dims(std::size_t rows, std::size_t cols) const {
    if (rows != rows_ || cols != cols_) {
      throw ShapeError("mask is " + std::to_string(rows_) + "x" + std::to_string(cols_) + " but call site needs " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace pargo
