#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnak/network.hpp"

namespace gnak {

// GNAK checkpoint layout, all integers 32-bit little-endian unsigned:
//
//   "GNAK" | version | layer count |
//   per layer: kind code | dim count | dims... |
//   tensor count | per tensor: rank | dims... | values as LE IEEE-754 float32
//
// Tensors appear in declaration order (weight then bias for each layer that
// has them). Kind codes 0-3 follow LayerKind; code 4 is an LSTM cell and is
// only used by policy checkpoints.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kLstmKindCode = 4;

class CheckpointError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointLayer {
    std::uint32_t kind = 0;
    std::vector<std::uint32_t> dims;
};

/// Format-level view of a checkpoint, independent of the model type.
struct CheckpointData {
    std::vector<CheckpointLayer> layers;
    std::vector<Tensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes);

CheckpointData network_to_checkpoint(const Network& net);
Network network_from_checkpoint(const CheckpointData& data);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace gnak
