#pragma once

// Text formats shared by the library and the CLI:
//  - doubles are written in shortest round-trip form, so write -> read -> write
//    is byte-identical;
//  - key/value documents: one `key=value` per line, `#` starts a comment line;
//  - datasets: comma-separated, header `s0,..,s{d-1},a0,..,a{k-1}`, one record per line.

#include <charconv>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "ccnf/errors.hpp"
#include "ccnf/tensor.hpp"

namespace ccnf {

inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline double parse_double(std::string_view text, std::string_view context) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw InvalidInput(std::string(context) + ": cannot parse number '" + std::string(text) + "'");
  }
  return v;
}

inline std::size_t parse_count(std::string_view text, std::string_view context) {
  text = trim(text);
  std::size_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw InvalidInput(std::string(context) + ": cannot parse count '" + std::string(text) + "'");
  }
  return v;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline Vector parse_double_list(std::string_view s, std::string_view context) {
  Vector out;
  if (trim(s).empty()) return out;
  for (const auto& tok : split(s, ',')) out.push_back(parse_double(tok, context));
  return out;
}

inline std::string format_double_list(std::span<const double> xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += format_double(xs[i]);
  }
  return out;
}

// Ordered key/value document.
class KeyValueDoc {
 public:
  void set(std::string key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(std::move(key), std::move(value));
  }
  void set(std::string key, double value) { set(std::move(key), format_double(value)); }
  void set(std::string key, std::size_t value) { set(std::move(key), std::to_string(value)); }

  std::optional<std::string> get(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
      if (k == key) return v;
    }
    return std::nullopt;
  }
  bool contains(std::string_view key) const { return get(key).has_value(); }

  std::string require(std::string_view key) const {
    auto v = get(key);
    if (!v) throw InvalidInput("missing key '" + std::string(key) + "'");
    return *v;
  }
  double require_double(std::string_view key) const { return parse_double(require(key), key); }
  std::size_t require_count(std::string_view key) const { return parse_count(require(key), key); }

  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

  void write(std::ostream& os) const {
    for (const auto& [k, v] : entries_) os << k << '=' << v << '\n';
  }

  // Reads until EOF or a line equal to `stop` (exclusive).
  static KeyValueDoc parse(std::istream& is, std::string_view stop = {}) {
    KeyValueDoc doc;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto t = trim(line);
      if (!stop.empty() && t == stop) break;
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos) {
        throw InvalidInput("key/value line " + std::to_string(lineno) + ": expected key=value");
      }
      doc.set(std::string(trim(t.substr(0, eq))), std::string(trim(t.substr(eq + 1))));
    }
    return doc;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Embeddings with their raw (unnormalized) attribute vectors.
struct Dataset {
  std::size_t d = 0;
  std::size_t k = 0;
  std::vector<Vector> embeddings;
  std::vector<Vector> attributes;

  std::size_t size() const noexcept { return embeddings.size(); }

  void push_back(Vector s, Vector a) {
    if (s.size() != d || a.size() != k) throw InvalidInput("dataset: record dimensions do not match");
    embeddings.push_back(std::move(s));
    attributes.push_back(std::move(a));
  }
};

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  for (std::size_t i = 0; i < ds.d; ++i) os << (i ? "," : "") << 's' << i;
  for (std::size_t j = 0; j < ds.k; ++j) os << ((ds.d + j) ? "," : "") << 'a' << j;
  os << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    os << format_double_list(ds.embeddings[r]);
    for (double v : ds.attributes[r]) os << ',' << format_double(v);
    os << '\n';
  }
}

inline Dataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InvalidInput("dataset: missing header row");
  Dataset ds;
  const auto header = split(trim(line), ',');
  bool in_attrs = false;
  for (const auto& raw : header) {
    const auto name = trim(raw);
    const auto expect_s = "s" + std::to_string(ds.d);
    const auto expect_a = "a" + std::to_string(ds.k);
    if (!in_attrs && name == expect_s) {
      ++ds.d;
    } else if (name == expect_a) {
      in_attrs = true;
      ++ds.k;
    } else {
      throw InvalidInput("dataset: unexpected header column '" + std::string(name) + "'");
    }
  }
  if (ds.d == 0) throw InvalidInput("dataset: header declares no embedding columns");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(trim(line), ',');
    if (cells.size() != ds.d + ds.k) {
      throw InvalidInput("dataset line " + std::to_string(lineno) + ": expected " +
                         std::to_string(ds.d + ds.k) + " columns, got " + std::to_string(cells.size()));
    }
    Vector s(ds.d), a(ds.k);
    const std::string ctx = "dataset line " + std::to_string(lineno);
    for (std::size_t i = 0; i < ds.d; ++i) s[i] = parse_double(cells[i], ctx);
    for (std::size_t j = 0; j < ds.k; ++j) a[j] = parse_double(cells[ds.d + j], ctx);
    if (!all_finite(s) || !all_finite(a)) throw InvalidInput(ctx + ": non-finite value");
    ds.push_back(std::move(s), std::move(a));
  }
  return ds;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open '" + path + "' for reading");
  return is;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InvalidInput("cannot open '" + path + "' for writing");
  return os;
}

inline Dataset read_dataset_file(const std::string& path) {
  auto is = open_input(path);
  return read_dataset(is);
}

inline void write_dataset_file(const std::string& path, const Dataset& ds) {
  auto os = open_output(path);
  write_dataset(os, ds);
  if (!os) throw InvalidInput("failed writing '" + path + "'");
}

}  // namespace ccnf
