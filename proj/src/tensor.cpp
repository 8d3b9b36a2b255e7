#include "gnak/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace gnak {

std::size_t shape_product(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(std::span<const std::size_t> shape) {
    return fmt::format("({})", fmt::join(shape, ", "));
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw std::invalid_argument(fmt::format("tensor shape {} does not hold {} values",
                                                shape_string(shape_), data_.size()));
    }
}

std::size_t Tensor::row_size() const {
    if (shape_.empty() || shape_[0] == 0) return 0;
    return data_.size() / shape_[0];
}

std::span<double> Tensor::row(std::size_t i) {
    const std::size_t n = row_size();
    return std::span<double>(data_).subspan(i * n, n);
}

std::span<const double> Tensor::row(std::size_t i) const {
    const std::size_t n = row_size();
    return std::span<const double>(data_).subspan(i * n, n);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    return Tensor(std::move(shape), data_);
}

}  // namespace gnak
