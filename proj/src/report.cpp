// SPDX-License-Identifier: Apache-2.0
#include "dgh/report.hpp"

#include <cstdio>

#include "dgh/serialize.hpp"

namespace dgh {

void Report::add(const std::string& experiment, uint64_t seed, const std::string& method,
                 const std::string& scheme, const std::string& metric, double value) {
  rows.push_back({experiment, seed, method, scheme, metric, value});
}

void Report::append(const Report& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

std::string format_value(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string Report::to_csv() const {
  std::string out = "experiment,seed,method,scheme,metric,value,config_hash,version\r\n";
  for (const auto& r : rows) {
    out += csv_field(r.experiment);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += csv_field(r.method);
    out += ',';
    out += csv_field(r.scheme);
    out += ',';
    out += csv_field(r.metric);
    out += ',';
    out += format_value(r.value);
    out += ',';
    out += csv_field(config_hash);
    out += ',';
    out += kToolkitVersion;
    out += "\r\n";
  }
  return out;
}

void Report::save(const std::string& path) const { atomic_write_file(path, to_csv()); }

std::string config_hash_of(const std::string& canonical_json) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : canonical_json) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dgh
