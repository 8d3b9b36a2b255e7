#include "gnak/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "gnak/checkpoint.hpp"
#include "gnak/random.hpp"

namespace gnak {

std::vector<std::size_t> Dataset::sample_shape() const {
    return {images.shape().begin() + 1, images.shape().end()};
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.classes = classes;
    out.class_ids = class_ids;
    std::vector<std::size_t> shape = images.shape();
    shape[0] = indices.size();
    const std::size_t row = images.row_size();
    std::vector<double> data;
    data.reserve(indices.size() * row);
    for (auto i : indices) {
        auto r = images.row(i);
        data.insert(data.end(), r.begin(), r.end());
        out.labels.push_back(labels.at(i));
    }
    out.images = Tensor(std::move(shape), std::move(data));
    return out;
}

void Dataset::validate() const {
    if (images.rank() < 2 || images.dim(0) != labels.size()) {
        throw std::invalid_argument(fmt::format("dataset has {} labels for images of shape {}",
                                                labels.size(), shape_string(images.shape())));
    }
    if (class_ids.size() != classes) throw std::invalid_argument("class id table does not match class count");
    for (auto l : labels) {
        if (l >= classes) throw std::invalid_argument(fmt::format("label {} outside [0, {})", l, classes));
    }
    for (double v : images.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pixel values must lie in [0, 1]");
    }
}

// ---------------------------------------------------------------------------
// IDX

IdxError::IdxError(std::size_t offset, const std::string& what)
    : std::runtime_error(fmt::format("IDX byte {}: {}", offset, what)), offset_(offset) {}

namespace {

std::size_t idx_element_size(std::uint8_t type) {
    switch (type) {
        case 0x08: case 0x09: return 1;
        case 0x0B: return 2;
        case 0x0C: case 0x0D: return 4;
        case 0x0E: return 8;
        default: return 0;
    }
}

std::uint64_t read_be(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t n) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v = (v << 8) | bytes[offset + i];
    return v;
}

}  // namespace

Tensor parse_idx(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw IdxError(bytes.size(), "truncated header");
    if (bytes[0] != 0 || bytes[1] != 0) throw IdxError(0, "bad magic (expected two zero bytes)");
    const std::uint8_t type = bytes[2];
    const std::size_t elem = idx_element_size(type);
    if (elem == 0) throw IdxError(2, fmt::format("unknown type code 0x{:02x}", type));
    const std::size_t rank = bytes[3];
    if (rank == 0) throw IdxError(3, "rank must be at least 1");
    if (bytes.size() < 4 + 4 * rank) throw IdxError(bytes.size(), "truncated header");
    std::vector<std::size_t> dims(rank);
    for (std::size_t i = 0; i < rank; ++i) dims[i] = read_be(bytes, 4 + 4 * i, 4);
    const std::size_t offset = 4 + 4 * rank;
    const std::size_t count = shape_product(dims);
    if ((bytes.size() - offset) / elem < count) {
        throw IdxError(bytes.size(), fmt::format("truncated payload: {} values expected", count));
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t raw = read_be(bytes, offset + i * elem, elem);
        switch (type) {
            case 0x08: data[i] = static_cast<double>(raw); break;
            case 0x09: data[i] = static_cast<double>(static_cast<std::int8_t>(raw)); break;
            case 0x0B: data[i] = static_cast<double>(static_cast<std::int16_t>(raw)); break;
            case 0x0C: data[i] = static_cast<double>(static_cast<std::int32_t>(raw)); break;
            case 0x0D: data[i] = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(raw))); break;
            case 0x0E: data[i] = std::bit_cast<double>(raw); break;
        }
    }
    return Tensor(std::move(dims), std::move(data));
}

std::vector<std::uint8_t> encode_idx_u8(std::span<const std::size_t> dims,
                                        std::span<const std::uint8_t> payload) {
    std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
    for (auto d : dims) {
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(d >> s));
    }
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

Dataset load_idx_dataset(const std::filesystem::path& images_path,
                         const std::filesystem::path& labels_path) {
    const auto image_bytes = read_file_bytes(images_path);
    const auto label_bytes = read_file_bytes(labels_path);
    Tensor raw = parse_idx(image_bytes);
    const Tensor raw_labels = parse_idx(label_bytes);
    if (raw_labels.rank() != 1) throw IdxError(3, "label file must have rank 1");
    if (raw.dim(0) != raw_labels.dim(0)) {
        throw std::invalid_argument(fmt::format("image count {} does not match label count {}",
                                                raw.dim(0), raw_labels.dim(0)));
    }
    std::vector<std::size_t> shape = raw.shape();
    if (shape.size() == 3) shape.push_back(1);
    Dataset ds;
    std::vector<double> pixels = raw.values();
    for (double& v : pixels) v /= 255.0;
    ds.images = Tensor(std::move(shape), std::move(pixels));
    std::size_t max_label = 0;
    for (double v : raw_labels.values()) {
        if (v < 0.0) throw std::invalid_argument("negative label in IDX label file");
        ds.labels.push_back(static_cast<std::size_t>(v));
        max_label = std::max(max_label, ds.labels.back());
    }
    ds.classes = ds.labels.empty() ? 0 : max_label + 1;
    ds.class_ids.resize(ds.classes);
    std::iota(ds.class_ids.begin(), ds.class_ids.end(), std::size_t{0});
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic transfer task

namespace {

using Pattern = std::vector<double>;

Pattern make_primitive(std::size_t h, std::size_t w, Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Pattern p(h * w, 0.0);
    const double cy = unit(rng) * (h - 1), cx = unit(rng) * (w - 1);
    const double theta = unit(rng) * std::numbers::pi;
    const double ct = std::cos(theta), st = std::sin(theta);
    const bool stripe = unit(rng) < 0.5;
    const double freq = 0.6 + 0.8 * unit(rng);
    const double phase = unit(rng) * 2.0 * std::numbers::pi;
    const double long_axis = 1.5 + 2.5 * unit(rng), short_axis = 0.6 + 0.8 * unit(rng);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
            double val;
            if (stripe) {
                const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * 9.0));
                val = env * 0.5 * (1.0 + std::cos(freq * u + phase));
            } else {
                val = std::exp(-0.5 * (u * u / (long_axis * long_axis) + v * v / (short_axis * short_axis)));
            }
            p[y * w + x] = val;
        }
    }
    return p;
}

struct ClassRecipe {
    std::vector<std::size_t> primitives;
    std::vector<double> weights;
};

Dataset render_classes(const std::vector<Pattern>& bank, const std::vector<ClassRecipe>& recipes,
                       std::size_t first_class_id, std::size_t per_class,
                       const SyntheticTaskOptions& opt, Rng& rng) {
    const std::size_t h = opt.height, w = opt.width;
    std::normal_distribution<double> noise(0.0, opt.pixel_noise);
    std::uniform_real_distribution<double> jitter(1.0 - opt.weight_jitter, 1.0 + opt.weight_jitter);
    std::uniform_int_distribution<int> shift(-1, 1);
    Dataset ds;
    ds.classes = recipes.size();
    for (std::size_t c = 0; c < recipes.size(); ++c) ds.class_ids.push_back(first_class_id + c);
    std::vector<double> pixels;
    pixels.reserve(recipes.size() * per_class * h * w);
    for (std::size_t n = 0; n < per_class; ++n) {
        for (std::size_t c = 0; c < recipes.size(); ++c) {
            Pattern img(h * w, 0.0);
            const int sy = shift(rng), sx = shift(rng);
            for (std::size_t j = 0; j < recipes[c].primitives.size(); ++j) {
                const Pattern& prim = bank[recipes[c].primitives[j]];
                const double weight = recipes[c].weights[j] * jitter(rng);
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t x = 0; x < w; ++x) {
                        const int yy = static_cast<int>(y) - sy, xx = static_cast<int>(x) - sx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) continue;
                        img[y * w + x] += weight * prim[yy * w + xx];
                    }
                }
            }
            for (double& v : img) v = std::clamp(0.5 * v + noise(rng), 0.0, 1.0);
            pixels.insert(pixels.end(), img.begin(), img.end());
            ds.labels.push_back(c);
        }
    }
    ds.images = Tensor({ds.labels.size(), h, w, 1}, std::move(pixels));
    return ds;
}

}  // namespace

TransferTask make_synthetic_transfer_task(std::uint64_t seed, const SyntheticTaskOptions& opt) {
    Rng rng = make_rng(seed, "synthetic-task");
    std::vector<Pattern> bank;
    for (std::size_t i = 0; i < opt.primitives; ++i) bank.push_back(make_primitive(opt.height, opt.width, rng));

    const std::size_t total = opt.source_classes + opt.target_classes;
    std::uniform_real_distribution<double> weight(0.6, 1.2);
    std::vector<ClassRecipe> recipes(total);
    for (auto& r : recipes) {
        std::vector<std::size_t> order(opt.primitives);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        r.primitives.assign(order.begin(), order.begin() + opt.primitives_per_class);
        for (std::size_t j = 0; j < opt.primitives_per_class; ++j) r.weights.push_back(weight(rng));
    }
    const std::vector<ClassRecipe> source(recipes.begin(), recipes.begin() + opt.source_classes);
    const std::vector<ClassRecipe> target(recipes.begin() + opt.source_classes, recipes.end());
    TransferTask task;
    task.source = render_classes(bank, source, 0, opt.source_per_class, opt, rng);
    task.target = render_classes(bank, target, opt.source_classes, opt.target_per_class, opt, rng);
    return task;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

std::vector<std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
    std::vector<std::vector<std::size_t>> by_class(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.labels[i]).push_back(i);
    return by_class;
}

}  // namespace

KShotSplit sample_kshot(const Dataset& dataset, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    auto by_class = indices_by_class(dataset);
    Rng rng = make_rng(seed, "sampling");
    KShotSplit split;
    std::vector<bool> picked(dataset.size(), false);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        if (idx.size() < k) {
            throw std::invalid_argument(fmt::format("class {} has {} samples, fewer than k = {}", c,
                                                    idx.size(), k));
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t j = 0; j < k; ++j) picked[idx[j]] = true;
    }
    // Class-interleaved order keeps the k-shot batch balanced when printed.
    for (std::size_t j = 0; j < k; ++j) {
        for (const auto& idx : by_class) split.kshot_indices.push_back(idx[j]);
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (!picked[i]) split.heldout_indices.push_back(i);
    }
    split.kshot = dataset.subset(split.kshot_indices);
    split.heldout = dataset.subset(split.heldout_indices);
    return split;
}

HeldoutSplit split_validation(const Dataset& heldout, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("validation fraction must be in (0, 1)");
    auto by_class = indices_by_class(heldout);
    Rng rng = make_rng(seed, "validation");
    HeldoutSplit split;
    std::vector<bool> in_val(heldout.size(), false);
    for (auto& idx : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        for (std::size_t j = 0; j < std::min(n_val, idx.size()); ++j) in_val[idx[j]] = true;
    }
    for (std::size_t i = 0; i < heldout.size(); ++i) {
        (in_val[i] ? split.validation_indices : split.test_indices).push_back(i);
    }
    split.validation = heldout.subset(split.validation_indices);
    split.test = heldout.subset(split.test_indices);
    return split;
}

Dataset take_per_class(const Dataset& dataset, std::size_t per_class) {
    std::vector<std::size_t> counts(dataset.classes, 0), chosen;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (counts[dataset.labels[i]]++ < per_class) chosen.push_back(i);
    }
    return dataset.subset(chosen);
}

}  // namespace gnak
