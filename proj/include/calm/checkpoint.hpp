// SPDX-License-Identifier: Apache-2.0
//
// Flat binary parameter files.
//
//   magic   8 bytes  "CALMCKPT"
//   version u64 LE   (currently 1)
//   count   u64 LE
//   per tensor:
//     name length u64 LE, name bytes (UTF-8)
//     rank u64 LE, dims u64 LE x rank
//     payload float64 LE, row-major, product(dims) values

#pragma once

#include "calm/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace calm {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint64_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_checkpoint(const std::vector<const Tensor<double>*>& tensors);
std::vector<Tensor<double>> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<const Tensor<double>*>& tensors);
std::vector<Tensor<double>> load_checkpoint(const std::filesystem::path& path);

/// Copies values from `loaded` into `targets` by name; every target must be
/// present with an identical shape.
void assign_checkpoint(const std::vector<Tensor<double>>& loaded,
                       const std::vector<Tensor<double>*>& targets);

/// FNV-1a over the encoded checkpoint; used to assert parameters are untouched.
std::uint64_t checksum(const std::vector<const Tensor<double>*>& tensors);

}  // namespace calm
