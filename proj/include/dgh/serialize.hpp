// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgh/tensor.hpp"

namespace dgh {

// IEEE CRC32 (reflected, poly 0xEDB88320)
uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

// Whole-file helpers. Writes go to a temp file in the same directory followed
// by an atomic rename, so a failed stage never leaves a half-written artifact.
void atomic_write_file(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);
bool file_exists(const std::string& path);

// Little-endian float32 / int32 blobs
std::string tensor_blob(const Tensor& t);
void append_tensor_blob(std::string& out, const Tensor& t);
Tensor tensor_from_blob(const std::string& blob, std::vector<int64_t> shape, size_t offset = 0);
std::string labels_blob(const std::vector<int32_t>& labels);
std::vector<int32_t> labels_from_blob(const std::string& blob);

}  // namespace dgh
