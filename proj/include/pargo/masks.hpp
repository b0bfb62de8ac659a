#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "pargo/attention_mask.hpp"
#include "pargo/error.hpp"

namespace pargo {

/// How visual features are split across partial tokens.
struct PartitionSpec {
  std::size_t n_v = 0;  // visual features
  std::size_t n_p = 0;  // partial tokens
  std::size_t n_g = 0;  // global tokens

  /// Visual features per partial token (0 when there are no partial tokens).
  std::size_t window() const { return n_p == 0 ? 0 : n_v / n_p; }

  void validate() const {
    if (n_v == 0) throw MaskError("partition: n_v must be positive");
    if (n_p + n_g == 0) throw MaskError("partition: need at least one partial or global token (n_p + n_g >= 1)");
    if (n_p > 0 && n_v % n_p != 0) {
      throw MaskError("partition: n_v=" + std::to_string(n_v) + " is not divisible by n_p=" + std::to_string(n_p) +
                      "; choose n_p dividing n_v so every partial token gets an equal window");
    }
  }
};

/// Layer-dependent visibility of the cascaded partial self-attention.
struct CascadeSpec {
  std::size_t n_p = 0;     // partial tokens
  std::size_t layers = 0;  // projector depth d

  /// Visible-window growth per layer, n_p / d.
  std::size_t increment() const { return n_p / layers; }

  /// Window length at 1-based layer l.
  std::size_t visible(std::size_t layer) const { return increment() * layer; }

  void validate() const {
    if (layers == 0) throw MaskError("cascade: layer count must be positive");
    if (n_p == 0) throw MaskError("cascade: needs at least one partial token");
    if (n_p % layers != 0) {
      throw MaskError("cascade: n_p=" + std::to_string(n_p) + " is not divisible by layers=" + std::to_string(layers) +
                      "; choose n_p as a multiple of the layer count");
    }
  }
};

/// (n_p + n_g) x n_v cross-attention mask. Partial row i sees the contiguous
/// window [i*n_s, (i+1)*n_s); global rows see everything. Independent of layer.
inline AttentionMask build_pg_mask(const PartitionSpec& spec) {
  spec.validate();
  AttentionMask mask(spec.n_p + spec.n_g, spec.n_v);
  const std::size_t ns = spec.window();
  for (std::size_t i = 0; i < spec.n_p; ++i)
    for (std::size_t j = i * ns; j < (i + 1) * ns; ++j) mask.set(i, j, true);
  for (std::size_t i = spec.n_p; i < spec.n_p + spec.n_g; ++i)
    for (std::size_t j = 0; j < spec.n_v; ++j) mask.set(i, j, true);
  return mask;
}

/// First index of the contiguous length-`width` window around token i,
/// centred where possible and clamped into [0, n - width].
inline std::size_t cascade_window_start(std::size_t i, std::size_t width, std::size_t n) {
  const std::size_t back = (width - 1) / 2;
  const std::size_t start = i > back ? i - back : 0;
  return std::min(start, n - width);
}

/// n_p x n_p self-attention mask for 1-based layer l: each partial token sees
/// the n_vis(l) = l * n_p / d nearest indices including itself.
inline AttentionMask build_cpp_mask(const CascadeSpec& spec, std::size_t layer) {
  spec.validate();
  if (layer < 1 || layer > spec.layers) {
    throw MaskError("cascade: layer " + std::to_string(layer) + " out of range 1.." + std::to_string(spec.layers));
  }
  const std::size_t n = spec.n_p;
  const std::size_t width = spec.visible(layer);
  AttentionMask mask(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = cascade_window_start(i, width, n);
    for (std::size_t j = start; j < start + width; ++j) mask.set(i, j, true);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Export
//
// csv: one line per mask row, cells "0"/"1" separated by ',', each line ends
//      with '\n' (no header, no trailing blank line).
// pgm: binary P5, header "P5\n<cols> <rows>\n255\n" followed by rows*cols
//      bytes in row-major order, 0 = masked, 255 = visible.

enum class MaskFormat { csv, pgm };

inline MaskFormat parse_mask_format(std::string_view s) {
  if (s == "csv") return MaskFormat::csv;
  if (s == "pgm") return MaskFormat::pgm;
  throw ConfigError("unknown mask format '" + std::string(s) + "' (expected csv or pgm)");
}

inline std::string export_mask(const AttentionMask& mask, MaskFormat format) {
  std::string out;
  if (format == MaskFormat::csv) {
    out.reserve(mask.rows() * mask.cols() * 2);
    for (std::size_t r = 0; r < mask.rows(); ++r) {
      for (std::size_t c = 0; c < mask.cols(); ++c) {
        if (c) out += ',';
        out += mask(r, c) ? '1' : '0';
      }
      out += '\n';
    }
    return out;
  }
  out = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) + "\n255\n";
  out.reserve(out.size() + mask.rows() * mask.cols());
  for (std::size_t r = 0; r < mask.rows(); ++r)
    for (std::size_t c = 0; c < mask.cols(); ++c) out += static_cast<char>(mask(r, c) ? 255 : 0);
  return out;
}

inline void write_mask(const AttentionMask& mask, MaskFormat format, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = export_mask(mask, format);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing '" + path + "'");
}

namespace detail {

inline std::size_t parse_pgm_number(std::string_view bytes, std::size_t& pos) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), value);
  if (ec != std::errc() || ptr == bytes.data() + pos) throw IoError("pgm: malformed header");
  pos = static_cast<std::size_t>(ptr - bytes.data());
  return value;
}

inline void expect_char(std::string_view bytes, std::size_t& pos, char ch) {
  if (pos >= bytes.size() || bytes[pos] != ch) throw IoError("pgm: malformed header");
  ++pos;
}

}  // namespace detail

/// Inverse of export_mask for the exact layouts written above.
inline AttentionMask parse_mask(std::string_view bytes, MaskFormat format) {
  if (format == MaskFormat::csv) {
    std::vector<std::vector<bool>> rows;
    std::vector<bool> row;
    bool expect_cell = true;
    for (char ch : bytes) {
      if (expect_cell) {
        if (ch != '0' && ch != '1') throw IoError("csv mask: expected 0 or 1");
        row.push_back(ch == '1');
        expect_cell = false;
      } else if (ch == ',') {
        expect_cell = true;
      } else if (ch == '\n') {
        if (!rows.empty() && rows.front().size() != row.size()) throw IoError("csv mask: ragged rows");
        rows.push_back(std::move(row));
        row.clear();
        expect_cell = true;
      } else {
        throw IoError("csv mask: unexpected character");
      }
    }
    if (!row.empty() || rows.empty()) throw IoError("csv mask: missing final newline or empty input");
    AttentionMask mask(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < rows[r].size(); ++c) mask.set(r, c, rows[r][c]);
    return mask;
  }
  std::size_t pos = 0;
  if (bytes.substr(0, 2) != "P5") throw IoError("pgm: bad magic");
  pos = 2;
  detail::expect_char(bytes, pos, '\n');
  const std::size_t cols = detail::parse_pgm_number(bytes, pos);
  detail::expect_char(bytes, pos, ' ');
  const std::size_t rows = detail::parse_pgm_number(bytes, pos);
  detail::expect_char(bytes, pos, '\n');
  if (detail::parse_pgm_number(bytes, pos) != 255) throw IoError("pgm: maxval must be 255");
  detail::expect_char(bytes, pos, '\n');
  if (bytes.size() - pos != rows * cols) throw IoError("pgm: payload size does not match header");
  AttentionMask mask(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const auto b = static_cast<unsigned char>(bytes[pos + r * cols + c]);
      if (b != 0 && b != 255) throw IoError("pgm: pixel values must be 0 or 255");
      mask.set(r, c, b == 255);
    }
  }
  return mask;
}

}  // namespace pargo
