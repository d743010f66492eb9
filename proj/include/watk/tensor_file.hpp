#pragma once

// Little-endian tensor container shared by checkpoints, score matrices,
// projection bases and deltas:
//
//   "WATK1\0" | u32 count | count x { u16 name_len, name, u8 ndims,
//                                     ndims x u32 dim, f32 payload }
//
// A leading "__meta__" entry carries seven u32 architecture values instead of
// floats. An entry named "__run_config__:<json>" with a single zero dimension
// records the producing run configuration.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "watk/tensor.hpp"

namespace watk {

inline constexpr char kTensorMagic[6] = {'W', 'A', 'T', 'K', '1', '\0'};
inline constexpr std::string_view kRunConfigPrefix = "__run_config__:";

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  static NamedTensor from_matrix(std::string name, const Matrix& m);
  static NamedTensor from_vector(std::string name, std::span<const double> v);
  Matrix to_matrix() const;
  Vector to_vector() const;
};

struct TensorFile {
  std::optional<std::array<std::uint32_t, 7>> meta;
  std::optional<std::string> run_config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
};

std::vector<std::uint8_t> encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(const std::vector<std::uint8_t>& bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace watk
