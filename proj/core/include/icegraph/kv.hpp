#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace icegraph {

// Order-preserving `key = value` text files: one pair per line, blank lines
// and #-comments ignored, whitespace around key and value trimmed. Used for
// configs and run manifests; parse → serialize → parse is a fixpoint.
using KvPairs = std::vector<std::pair<std::string, std::string>>;

KvPairs read_kv_file(const std::string& path);            // io_error
KvPairs parse_kv_text(const std::string& text);           // validation_error
void write_kv_file(const std::string& path, const KvPairs& pairs);
std::string serialize_kv(const KvPairs& pairs);

std::optional<std::string> kv_get(const KvPairs& pairs, const std::string& key);
std::string kv_require(const KvPairs& pairs, const std::string& key);  // validation_error

// Exact-precision double formatting/parsing for manifests.
std::string fmt_double(double v);
double parse_double(const std::string& s);     // validation_error on garbage
std::int64_t parse_int(const std::string& s);  // validation_error on garbage

}  // namespace icegraph
