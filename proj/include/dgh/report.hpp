// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dgh {

constexpr const char* kToolkitVersion = "0.1.0";

struct ReportRow {
  std::string experiment;
  uint64_t seed = 0;
  std::string method;
  std::string scheme;
  std::string metric;
  double value = 0;
};

// Append-only result table; every row carries the emitting config's hash so
// rows from different runs can be told apart.
struct Report {
  std::string config_hash;
  std::vector<ReportRow> rows;

  void add(const std::string& experiment, uint64_t seed, const std::string& method,
           const std::string& scheme, const std::string& metric, double value);
  void append(const Report& other);
  std::string to_csv() const;  // RFC 4180
  void save(const std::string& path) const;
};

// FNV-1a 64-bit over the canonical (sorted-key) JSON text
std::string config_hash_of(const std::string& canonical_json);

std::string csv_field(const std::string& s);
std::string format_value(double v);

}  // namespace dgh
