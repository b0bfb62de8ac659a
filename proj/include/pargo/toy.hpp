#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "pargo/error.hpp"
#include "pargo/rng.hpp"
#include "pargo/tensor.hpp"

namespace pargo {

enum class Task { detail, global, relation };

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::detail: return "detail";
    case Task::global: return "global";
    case Task::relation: return "relation";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "detail") return Task::detail;
  if (s == "global") return Task::global;
  if (s == "relation") return Task::relation;
  throw ConfigError("unknown task '" + std::string(s) + "' (expected detail, global or relation)");
}

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// A g x g grid of symbols with one query/label pair per task.
struct GridSample {
  std::size_t g = 0;
  std::size_t symbols = 0;         // K
  std::vector<std::uint8_t> grid;  // raster order, values in [0, K)
  Cell detail_query;
  std::size_t detail_label = 0;  // symbol at detail_query
  std::size_t global_label = 0;  // majority symbol, ties to the lowest id
  std::array<Cell, 2> relation_query;
  bool relation_label = false;  // both queried cells hold the same symbol

  std::size_t at(Cell c) const { return grid[c.row * g + c.col]; }

  std::size_t label(Task t) const {
    switch (t) {
      case Task::detail: return detail_label;
      case Task::global: return global_label;
      case Task::relation: return relation_label ? 1 : 0;
    }
    return 0;
  }

  friend bool operator==(const GridSample&, const GridSample&) = default;
};

inline std::size_t majority_symbol(const std::vector<std::uint8_t>& grid, std::size_t symbols) {
  std::vector<std::size_t> counts(symbols, 0);
  for (auto s : grid) ++counts[s];
  std::size_t best = 0;
  for (std::size_t s = 1; s < symbols; ++s) {
    if (counts[s] > counts[best]) best = s;
  }
  return best;
}

/// Uniform random grids and detail queries. Relation pairs are two distinct
/// cells; the second cell is drawn from the same-symbol cells with
/// probability 1/2 (when any exist) and from the other cells otherwise, so
/// the binary label is close to balanced. Sample i depends only on (seed, i).
inline std::vector<GridSample> gen_dataset(std::uint64_t seed, std::size_t count, std::size_t g, std::size_t symbols) {
  if (g < 2) throw ConfigError("gen_dataset: grid side g must be at least 2");
  if (symbols < 2 || symbols > 256) throw ConfigError("gen_dataset: symbol count K must be in [2, 256]");
  const Rng root(seed);
  const std::size_t cells = g * g;
  std::vector<GridSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = root.split(i);
    GridSample s;
    s.g = g;
    s.symbols = symbols;
    s.grid.resize(cells);
    for (auto& v : s.grid) v = static_cast<std::uint8_t>(rng.uniform_int(symbols));
    const std::size_t dq = rng.uniform_int(cells);
    s.detail_query = {dq / g, dq % g};
    s.detail_label = s.grid[dq];
    s.global_label = majority_symbol(s.grid, symbols);

    const std::size_t first = rng.uniform_int(cells);
    std::vector<std::size_t> same, other;
    for (std::size_t c = 0; c < cells; ++c) {
      if (c == first) continue;
      (s.grid[c] == s.grid[first] ? same : other).push_back(c);
    }
    const bool want_same = rng.uniform_int(2) == 0;
    const auto& pool = (want_same && !same.empty()) || other.empty() ? same : other;
    const std::size_t second = pool[rng.uniform_int(pool.size())];
    s.relation_query = {Cell{first / g, first % g}, Cell{second / g, second % g}};
    s.relation_label = s.grid[first] == s.grid[second];
    out.push_back(std::move(s));
  }
  return out;
}

struct DatasetSplit {
  std::vector<GridSample> train;
  std::vector<GridSample> val;
};

/// First 90% (by index) for training, the rest for validation.
inline DatasetSplit split_dataset(std::vector<GridSample> samples) {
  const std::size_t n_train = samples.size() * 9 / 10;
  DatasetSplit s;
  s.train.assign(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(samples.begin() + static_cast<std::ptrdiff_t>(n_train), samples.end());
  return s;
}

/// Frozen stand-in for an image encoder: symbol embedding plus a fixed 2-D
/// sinusoidal position code. Tables never receive gradients.
template <Real T>
class StubEncoder {
 public:
  StubEncoder(std::uint64_t seed, std::size_t g, std::size_t symbols, std::size_t width)
      : g_(g), symbols_(symbols), width_(width) {
    if (width % 4 != 0) throw ConfigError("encoder: width must be a multiple of 4 for the 2-D position code");
    Rng rng(seed);
    std::vector<T> embed(symbols * width);
    for (auto& v : embed) v = static_cast<T>(rng.normal());
    embed_ = Tensor<T>(Shape{symbols, width}, std::move(embed));
    pos_ = Tensor<T>(Shape{g * g, width}, position_table(g, width));
  }

  /// Row r*g + c holds [sin/cos of r | sin/cos of c], frequencies 10000^(-2i/(width/2)).
  static std::vector<T> position_table(std::size_t g, std::size_t width) {
    const std::size_t half = width / 2;
    std::vector<T> out(g * g * width);
    for (std::size_t r = 0; r < g; ++r) {
      for (std::size_t c = 0; c < g; ++c) {
        T* row = out.data() + (r * g + c) * width;
        for (std::size_t i = 0; i < half / 2; ++i) {
          const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
          row[2 * i] = static_cast<T>(std::sin(static_cast<double>(r) * freq));
          row[2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(r) * freq));
          row[half + 2 * i] = static_cast<T>(std::sin(static_cast<double>(c) * freq));
          row[half + 2 * i + 1] = static_cast<T>(std::cos(static_cast<double>(c) * freq));
        }
      }
    }
    return out;
  }

  std::size_t g() const { return g_; }
  std::size_t symbols() const { return symbols_; }
  std::size_t width() const { return width_; }
  const Tensor<T>& embedding() const { return embed_; }
  const Tensor<T>& positions() const { return pos_; }
  Tensor<T>& mutable_embedding() { return embed_; }

  /// Position code of one cell as a 1 x width row.
  Tensor<T> position(Cell cell) const {
    const auto begin = pos_.data().begin() + static_cast<std::ptrdiff_t>((cell.row * g_ + cell.col) * width_);
    return Tensor<T>(Shape{1, width_}, std::vector<T>(begin, begin + static_cast<std::ptrdiff_t>(width_)));
  }

 private:
  std::size_t g_, symbols_, width_;
  Tensor<T> embed_;
  Tensor<T> pos_;
};

/// f_v[r*g + c] = embed[symbol(r, c)] + pos[r*g + c].
template <Real T>
Tensor<T> encode(const GridSample& sample, const StubEncoder<T>& enc) {
  if (sample.g != enc.g()) {
    throw ShapeError("encode: sample grid is " + std::to_string(sample.g) + " but encoder expects " +
                     std::to_string(enc.g()));
  }
  const std::size_t w = enc.width();
  std::vector<T> out(sample.grid.size() * w);
  for (std::size_t i = 0; i < sample.grid.size(); ++i) {
    if (sample.grid[i] >= enc.symbols()) throw ShapeError("encode: symbol out of range");
    const T* e = enc.embedding().data().data() + sample.grid[i] * w;
    const T* p = enc.positions().data().data() + i * w;
    for (std::size_t d = 0; d < w; ++d) out[i * w + d] = e[d] + p[d];
  }
  return Tensor<T>(Shape{sample.grid.size(), w}, std::move(out));
}

}  // namespace pargo
