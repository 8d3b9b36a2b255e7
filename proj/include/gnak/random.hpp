#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gnak {

using Rng = std::mt19937_64;

// Expands one root seed into independent named streams ("init", "sampling",
// "kmeans", "policy", "episodes", ...).
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index);

inline Rng make_rng(std::uint64_t root, std::string_view stream) {
    return Rng(derive_seed(root, stream));
}

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t index) {
    return Rng(derive_seed(root, stream, index));
}

}  // namespace gnak
