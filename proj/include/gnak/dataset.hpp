#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "gnak/tensor.hpp"

namespace gnak {

/// Labeled samples. `images` is (N, H, W, C) or (N, D) with pixels in
/// [0, 1]; labels are local ids in [0, classes). `class_ids` maps each local
/// id to a global class id so class-disjoint splits can be checked.
struct Dataset {
    Tensor images;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;
    std::vector<std::size_t> class_ids;

    std::size_t size() const noexcept { return labels.size(); }
    std::vector<std::size_t> sample_shape() const;
    Dataset subset(std::span<const std::size_t> indices) const;
    /// Throws std::invalid_argument when an invariant is broken.
    void validate() const;
};

class IdxError : public std::runtime_error {
public:
    IdxError(std::size_t offset, const std::string& what);
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Parses an IDX container (0x00 0x00, type code, rank, big-endian dims,
/// payload). Unsigned-byte payloads come back as raw 0..255 values.
Tensor parse_idx(std::span<const std::uint8_t> bytes);

/// Images scaled by 1/255 into (N, H, W, 1) (or (N, D) for rank-2 files).
Dataset load_idx_dataset(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path);

std::vector<std::uint8_t> encode_idx_u8(std::span<const std::size_t> dims,
                                        std::span<const std::uint8_t> payload);

struct SyntheticTaskOptions {
    std::size_t height = 10;
    std::size_t width = 10;
    std::size_t source_classes = 5;
    std::size_t target_classes = 5;
    std::size_t source_per_class = 200;
    std::size_t target_per_class = 120;
    std::size_t primitives = 12;
    std::size_t primitives_per_class = 3;
    double pixel_noise = 0.12;
    double weight_jitter = 0.35;
};

struct TransferTask {
    Dataset source;
    Dataset target;
};

/// Two class-disjoint image datasets drawn from one shared bank of stroke
/// and blob primitives. Deterministic per seed.
TransferTask make_synthetic_transfer_task(std::uint64_t seed, const SyntheticTaskOptions& options = {});

struct KShotSplit {
    Dataset kshot;
    Dataset heldout;
    std::vector<std::size_t> kshot_indices;
    std::vector<std::size_t> heldout_indices;
};

/// Exactly k random samples per class; the rest goes to `heldout`.
KShotSplit sample_kshot(const Dataset& dataset, std::size_t k, std::uint64_t seed);

struct HeldoutSplit {
    Dataset validation;
    Dataset test;
    std::vector<std::size_t> validation_indices;  // indices into the held-out set
    std::vector<std::size_t> test_indices;
};

/// Stratified split of held-out data; `fraction` of each class goes to validation.
HeldoutSplit split_validation(const Dataset& heldout, double fraction, std::uint64_t seed);

/// First `per_class` samples of every class, in dataset order.
Dataset take_per_class(const Dataset& dataset, std::size_t per_class);

}  // namespace gnak
