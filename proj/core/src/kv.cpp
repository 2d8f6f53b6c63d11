#include "icegraph/kv.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "icegraph/errors.hpp"

namespace icegraph {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvPairs parse_kv_text(const std::string& text) {
  KvPairs out;
  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw validation_error("line " + std::to_string(line_no) +
                             ": expected 'key = value', got: " + t);
    const std::string key = trim(t.substr(0, eq));
    if (key.empty())
      throw validation_error("line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(key, trim(t.substr(eq + 1)));
    if (pos > text.size()) break;
  }
  return out;
}

KvPairs read_kv_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw io_error("cannot open " + path + ": " + std::strerror(errno));
  std::string text;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, n);
  std::fclose(f);
  try {
    return parse_kv_text(text);
  } catch (const validation_error& e) {
    throw validation_error(path + ": " + e.what());
  }
}

std::string serialize_kv(const KvPairs& pairs) {
  std::string out;
  for (const auto& [k, v] : pairs) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

void write_kv_file(const std::string& path, const KvPairs& pairs) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw io_error("cannot write " + path + ": " + std::strerror(errno));
  const std::string text = serialize_kv(pairs);
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw io_error("short write to " + path);
}

std::optional<std::string> kv_get(const KvPairs& pairs, const std::string& key) {
  for (const auto& [k, v] : pairs)
    if (k == key) return v;
  return std::nullopt;
}

std::string kv_require(const KvPairs& pairs, const std::string& key) {
  if (auto v = kv_get(pairs, key)) return *v;
  throw validation_error("missing required key: " + key);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE)
    throw validation_error("not a number: '" + s + "'");
  return v;
}

std::int64_t parse_int(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE)
    throw validation_error("not an integer: '" + s + "'");
  return v;
}

}  // namespace icegraph
