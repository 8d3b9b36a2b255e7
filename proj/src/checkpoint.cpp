#include "gnak/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

namespace gnak {
namespace {

constexpr char kMagic[4] = {'G', 'N', 'A', 'K'};

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
    void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f32(const char* what) { return static_cast<double>(std::bit_cast<float>(u32(what))); }
    void expect_magic() {
        need(4, "magic");
        if (std::memcmp(bytes_.data(), kMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
        pos_ += 4;
    }
    bool done() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError(fmt::format("truncated checkpoint reading {} at byte {}", what, pos_));
        }
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t narrow(std::size_t v) {
    if (v > 0xffffffffULL) throw CheckpointError("dimension does not fit in 32 bits");
    return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
    Writer w;
    w.raw(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.u32(narrow(data.layers.size()));
    for (const auto& layer : data.layers) {
        w.u32(layer.kind);
        w.u32(narrow(layer.dims.size()));
        for (auto d : layer.dims) w.u32(d);
    }
    w.u32(narrow(data.tensors.size()));
    for (const auto& t : data.tensors) {
        w.u32(narrow(t.rank()));
        for (auto d : t.shape()) w.u32(narrow(d));
        for (double v : t.values()) w.f32(v);
    }
    return w.take();
}

CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    r.expect_magic();
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(fmt::format("unsupported checkpoint version {} (reader supports {})",
                                          version, kCheckpointVersion));
    }
    CheckpointData data;
    const std::uint32_t layer_count = r.u32("layer count");
    for (std::uint32_t i = 0; i < layer_count; ++i) {
        CheckpointLayer layer;
        layer.kind = r.u32("kind code");
        const std::uint32_t dims = r.u32("dim count");
        if (dims > r.remaining() / 4) throw CheckpointError("truncated layer table");
        for (std::uint32_t d = 0; d < dims; ++d) layer.dims.push_back(r.u32("dim"));
        data.layers.push_back(std::move(layer));
    }
    const std::uint32_t tensor_count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        const std::uint32_t rank = r.u32("rank");
        if (rank > r.remaining() / 4) throw CheckpointError("truncated tensor header");
        std::vector<std::size_t> shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("tensor dim"));
        const std::size_t n = shape_product(shape);
        if (n > r.remaining() / 4) throw CheckpointError("truncated tensor payload");
        std::vector<double> values(n);
        for (auto& v : values) v = r.f32("tensor value");
        data.tensors.emplace_back(std::move(shape), std::move(values));
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
    return data;
}

CheckpointData network_to_checkpoint(const Network& net) {
    CheckpointData data;
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        const LayerSpec& s = net.layer(i);
        CheckpointLayer layer;
        layer.kind = static_cast<std::uint32_t>(s.kind);
        switch (s.kind) {
            case LayerKind::dense:
                layer.dims = {narrow(s.in_size()), narrow(s.filters), s.has_bias ? 1u : 0u};
                break;
            case LayerKind::conv2d:
                layer.dims = {narrow(s.in_shape[0]), narrow(s.in_shape[1]), narrow(s.in_shape[2]),
                              narrow(s.kernel), narrow(s.stride), narrow(s.filters),
                              s.has_bias ? 1u : 0u};
                break;
            case LayerKind::relu:
            case LayerKind::softmax:
                for (auto d : s.in_shape) layer.dims.push_back(narrow(d));
                break;
        }
        data.layers.push_back(std::move(layer));
        if (s.parameterized()) {
            data.tensors.push_back(net.params(i).weight);
            if (s.has_bias) data.tensors.push_back(net.params(i).bias);
        }
    }
    return data;
}

Network network_from_checkpoint(const CheckpointData& data) {
    std::vector<LayerSpec> specs;
    for (std::size_t i = 0; i < data.layers.size(); ++i) {
        const auto& layer = data.layers[i];
        const auto& d = layer.dims;
        auto need = [&](std::size_t n) {
            if (d.size() != n) throw CheckpointError(fmt::format("layer {}: expected {} dims", i, n));
        };
        switch (layer.kind) {
            case static_cast<std::uint32_t>(LayerKind::dense):
                need(3);
                specs.push_back(LayerSpec::dense(d[0], d[1], d[2] != 0));
                break;
            case static_cast<std::uint32_t>(LayerKind::conv2d):
                need(7);
                specs.push_back(LayerSpec::conv2d(d[0], d[1], d[2], d[3], d[4], d[5], d[6] != 0));
                break;
            case static_cast<std::uint32_t>(LayerKind::relu):
                specs.push_back(LayerSpec::relu({d.begin(), d.end()}));
                break;
            case static_cast<std::uint32_t>(LayerKind::softmax):
                need(1);
                specs.push_back(LayerSpec::softmax(d[0]));
                break;
            default:
                throw CheckpointError(fmt::format("layer {}: kind code {} is not a network layer", i,
                                                  layer.kind));
        }
    }
    Network net(std::move(specs));
    std::size_t next = 0;
    auto take = [&](Tensor& dst) {
        if (next >= data.tensors.size()) throw CheckpointError("checkpoint is missing parameter tensors");
        if (data.tensors[next].shape() != dst.shape()) {
            throw CheckpointError(fmt::format("tensor {} has shape {}, expected {}", next,
                                              shape_string(data.tensors[next].shape()),
                                              shape_string(dst.shape())));
        }
        dst = data.tensors[next++];
    };
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        if (!net.layer(i).parameterized()) continue;
        take(net.params(i).weight);
        if (net.layer(i).has_bias) take(net.params(i).bias);
    }
    if (next != data.tensors.size()) throw CheckpointError("checkpoint has extra tensors");
    return net;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(fmt::format("failed writing {}", path.string()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
    write_file_bytes(path, encode_checkpoint(network_to_checkpoint(net)));
}

Network load_checkpoint(const std::filesystem::path& path) {
    return network_from_checkpoint(decode_checkpoint(read_file_bytes(path)));
}

}  // namespace gnak
