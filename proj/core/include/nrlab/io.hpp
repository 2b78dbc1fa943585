#pragma once

// Text formats shared by every persisted artifact: round-trip number
// formatting, key-value configs, manifest headers and CSV tables.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nrlab/common.hpp"

namespace nrlab {

inline constexpr const char* kToolVersion = "0.1.0";

// %.17g; round-trips every finite double.
std::string fmt(double x);
// Empty string for a missing value.
std::string fmt(const std::optional<double>& x);

double parse_double(const std::string& text);

std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t h);

std::vector<std::string> split(const std::string& text, char sep);
std::string trim(std::string_view text);

// Flat key-value configuration. Lines are `key = value`; `[section]` headers
// prefix following keys as `section.key`; `#` starts a comment.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

  // Keys restricted to a prefix (e.g. "pretrain."), used for stage hashes.
  Config subset(const std::vector<std::string>& prefixes) const;

  // Sorted `key = value` lines; identical configs render identically.
  std::string canonical() const;
  std::uint64_t hash() const { return fnv1a64(canonical()); }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Comment block prepended to every output file.
struct Manifest {
  std::string format;  // format tag, e.g. "nrlab.pool/1"
  std::uint64_t config_hash = 0;
  std::vector<std::pair<std::string, std::string>> fields;

  Manifest& add(const std::string& key, const std::string& value) {
    fields.emplace_back(key, value);
    return *this;
  }
  std::string render() const;
};

std::string read_text(const std::string& path);
// Writes through a temporary file and renames it into place.
void write_text(const std::string& path, const std::string& content);
void ensure_dir(const std::string& path);
bool file_exists(const std::string& path);

// Minimal CSV builder: header row, then rows of preformatted fields.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(std::vector<std::string> row);
  std::string render(const Manifest& manifest) const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Rows of a CSV file written by CsvTable, skipping the manifest comments.
struct CsvData {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};
CsvData read_csv(const std::string& path);

}  // namespace nrlab
