#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "biasedit/model.hpp"
#include "biasedit/tensor.hpp"

namespace biasedit {

/// Versioned container of named float64 arrays plus a JSON header.
///
/// Layout (all integers little-endian):
///   magic[4] | u32 version | u64 header_len | header (UTF-8 JSON) |
///   u64 count | count × { u64 name_len | name | u32 rank | u64 dims[rank] |
///                         f64 data[numel] }
/// Arrays are written in lexicographic name order so files are byte-stable.
struct NamedArrays {
  nlohmann::json header;
  std::map<std::string, Tensor> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_named_arrays(const std::filesystem::path& path, std::string_view magic,
                        const NamedArrays& contents);
NamedArrays read_named_arrays(const std::filesystem::path& path, std::string_view magic);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace biasedit
