#pragma once

// Checkpoint files (little-endian):
//   magic "PGW1" | u32 version | u64 iteration | u32 tensor count |
//   per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data.
// Network parameters, optimizer moments ("adam.m.<param>") and trainer state
// are all stored as named tensors, in lexicographic name order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "posewarp/errors.hpp"
#include "posewarp/nn.hpp"
#include "posewarp/tensor.hpp"

namespace posewarp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointIoError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t iteration = 0;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr const char* kArchTensor = "meta.arch";

// Stores the descriptor as "meta.arch" plus every parameter under its own name.
void put_params(Checkpoint& ckpt, const NetworkParams& params);
// Reads the descriptor and every tensor belonging to the G/D/PHI/PSI namespaces.
NetworkParams params_from(const Checkpoint& ckpt);

}  // namespace posewarp
