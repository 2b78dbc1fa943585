#include "nrlab/io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nrlab {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt(const std::optional<double>& x) { return x ? fmt(*x) : std::string(); }

double parse_double(const std::string& text) {
  const std::string t = trim(text);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size()) {
    throw Error(Error::Kind::kParse, "not a number: '" + t + "'");
  }
  return v;
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(std::string_view text) {
  const auto b = text.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(b, e - b + 1));
}

Config Config::parse(const std::string& text) {
  Config cfg;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw Error(Error::Kind::kConfig, "bad section header on line " + std::to_string(lineno));
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(Error::Kind::kConfig, "expected key = value on line " + std::to_string(lineno));
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw Error(Error::Kind::kConfig, "empty key on line " + std::to_string(lineno));
    cfg.values_[section.empty() ? key : section + "." + key] = trim(std::string_view(t).substr(eq + 1));
  }
  return cfg;
}

Config Config::load(const std::string& path) {
  if (!file_exists(path)) throw Error(Error::Kind::kConfig, "config file not found: " + path);
  return parse(read_text(path));
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    return parse_double(it->second);
  } catch (const Error&) {
    throw Error(Error::Kind::kConfig, "config key '" + key + "' is not a number");
  }
}

long long Config::get_int(const std::string& key, long long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  char* end = nullptr;
  const long long v = std::strtoll(it->second.c_str(), &end, 10);
  if (it->second.empty() || *end != '\0') {
    throw Error(Error::Kind::kConfig, "config key '" + key + "' is not an integer");
  }
  return v;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
  if (it->second.empty() || *end != '\0' || it->second.front() == '-') {
    throw Error(Error::Kind::kConfig, "config key '" + key + "' is not an unsigned integer");
  }
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw Error(Error::Kind::kConfig, "config key '" + key + "' is not a boolean");
}

std::vector<double> Config::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<double> out;
  for (const auto& tok : split(it->second, ',')) {
    try {
      out.push_back(parse_double(tok));
    } catch (const Error&) {
      throw Error(Error::Kind::kConfig, "config key '" + key + "' has a non-numeric entry");
    }
  }
  return out;
}

std::vector<int> Config::get_ints(const std::string& key, const std::vector<int>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<int> out;
  for (const auto& tok : split(it->second, ',')) {
    const std::string t = trim(tok);
    char* end = nullptr;
    const long v = std::strtol(t.c_str(), &end, 10);
    if (t.empty() || *end != '\0') throw Error(Error::Kind::kConfig, "config key '" + key + "' has a non-integer entry");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

Config Config::subset(const std::vector<std::string>& prefixes) const {
  Config out;
  for (const auto& [k, v] : values_) {
    for (const auto& p : prefixes) {
      if (k.rfind(p, 0) == 0) {
        out.values_[k] = v;
        break;
      }
    }
  }
  return out;
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string Manifest::render() const {
  std::string out;
  out += "# format: " + format + "\n";
  out += "# tool-version: " + std::string(kToolVersion) + "\n";
  out += "# config-hash: " + hex64(config_hash) + "\n";
  for (const auto& [k, v] : fields) out += "# " + k + ": " + v + "\n";
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Error::Kind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& content) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Error::Kind::kIo, "cannot write " + tmp);
    out << content;
    if (!out) throw Error(Error::Kind::kIo, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void ensure_dir(const std::string& path) { std::filesystem::create_directories(path); }

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header_.size()) throw Error(Error::Kind::kDimension, "CSV row width does not match header");
  rows_.push_back(std::move(row));
}

std::string CsvTable::render(const Manifest& manifest) const {
  std::string out = manifest.render();
  auto line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

std::size_t CsvData::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw Error(Error::Kind::kParse, "missing CSV column " + name);
}

CsvData read_csv(const std::string& path) {
  std::istringstream in(read_text(path));
  CsvData data;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    if (!have_header) {
      data.header = split(line, ',');
      have_header = true;
    } else {
      data.rows.push_back(split(line, ','));
    }
  }
  return data;
}

}  // namespace nrlab
