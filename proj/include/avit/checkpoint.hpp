#pragma once

// Binary checkpoint container shared by every trained module.
//
//   "AVIT" | u32 version | str tag | str config-json | u32 n |
//   n x (str name | u8 dtype | u32 ndim | u64 dims[ndim] | f64 data[]) |
//   64 ASCII hex chars: SHA-256 of all preceding bytes
//
// Strings are u32 length + bytes; integers and doubles little-endian.

#include "avit/trainkit.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>

namespace avit::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  std::string tag;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Mat> tensors;
};

std::string serialize(const Checkpoint& c);
/// Verifies magic, version, hash and (when non-empty) the module tag.
Checkpoint deserialize(const std::string& bytes, const std::string& expected_tag = "");

void save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& path, const std::string& expected_tag = "");

/// SHA-256 of a checkpoint file's bytes.
std::string file_hash(const std::filesystem::path& path);

void put_params(Checkpoint& c, const ParamSet& params);
/// Copies every tensor of `params` from `c`; missing names or shape changes raise FormatError.
void get_params(const Checkpoint& c, ParamSet& params);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace avit::ckpt
