#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "gnak/checkpoint.hpp"
#include "gnak/losses.hpp"
#include "gnak/network.hpp"
#include "oracles.hpp"

using namespace gnak;

namespace {

Network conv_net(std::uint64_t seed) {
    Rng rng = make_rng(seed, "net");
    Network net = NetworkBuilder({5, 5, 2}).conv2d(3, 2, 3).relu().dense(4).relu().dense(3).build();
    net.initialize(rng);
    std::normal_distribution<double> b(0.0, 0.2);
    for (auto& p : net.params())
        for (double& v : p.bias.values()) v = b(rng);
    return net;
}

Tensor random_batch(std::vector<std::size_t> shape, std::uint64_t seed) {
    Rng rng = make_rng(seed, "batch");
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = n(rng);
    return t;
}

// Direct convolution with nested loops over NHWC input and (F, K, K, C) weights.
Tensor naive_conv(const LayerSpec& s, const LayerParams& p, const Tensor& x) {
    const std::size_t n = x.dim(0), h = s.in_shape[0], w = s.in_shape[1], c = s.in_shape[2];
    const std::size_t ho = (h - s.kernel) / s.stride + 1, wo = (w - s.kernel) / s.stride + 1;
    Tensor y({n, ho, wo, s.filters});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j)
                for (std::size_t f = 0; f < s.filters; ++f) {
                    double acc = p.bias.empty() ? 0.0 : p.bias[f];
                    for (std::size_t di = 0; di < s.kernel; ++di)
                        for (std::size_t dj = 0; dj < s.kernel; ++dj)
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                const std::size_t xi = ((b * h + i * s.stride + di) * w + j * s.stride + dj) * c + ch;
                                const std::size_t wi = ((f * s.kernel + di) * s.kernel + dj) * c + ch;
                                acc += x[xi] * p.weight[wi];
                            }
                    y[((b * ho + i) * wo + j) * s.filters + f] = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("conv forward matches a direct convolution") {
    const Network net = conv_net(1);
    const Tensor x = random_batch({2, 5, 5, 2}, 1);
    const auto fw = forward(net, x);
    const Tensor ref = naive_conv(net.layer(0), net.params(0), x);
    CHECK(fw.record.outputs[0].shape() == ref.shape());
    CHECK(oracle::max_abs_diff(fw.record.outputs[0].data(), ref.data()) < 1e-12);
    CHECK(fw.logits.shape() == std::vector<std::size_t>{2, 3});
}

TEST_CASE("dense forward matches W x + b") {
    Rng rng(3);
    Network net = NetworkBuilder({4}).dense(3).build();
    net.initialize(rng);
    net.params(0).bias = Tensor({3}, {0.5, -0.25, 1.0});
    const Tensor x = random_batch({2, 4}, 2);
    const auto fw = forward(net, x);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t o = 0; o < 3; ++o) {
            double acc = net.params(0).bias[o];
            for (std::size_t i = 0; i < 4; ++i) acc += net.params(0).weight[o * 4 + i] * x[b * 4 + i];
            CHECK(fw.logits[b * 3 + o] == doctest::Approx(acc).epsilon(1e-14));
        }
}

TEST_CASE("backward matches finite differences of cross-entropy") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Network net = conv_net(seed);
        const Tensor x = random_batch({4, 5, 5, 2}, seed);
        const std::vector<std::size_t> labels{0, 1, 2, 1};
        const auto fw = forward(net, x);
        if (oracle::min_relu_margin(net, fw.record) < 1e-4) continue;
        const auto ce = cross_entropy(fw.logits, labels);
        const GradientSet g = backward(net, fw.record, ce.grad);
        for (std::size_t l : {std::size_t{0}, std::size_t{2}, std::size_t{4}}) {
            auto f = [&](const Tensor& w) {
                Network probe = net;
                probe.params(l).weight = w;
                return cross_entropy(forward(probe, x).logits, labels).loss;
            };
            const Tensor num = oracle::numeric_tensor_gradient(f, net.params(l).weight, 1e-6);
            CHECK(oracle::max_abs_diff(num.data(), g.layers[l].weight.data()) < 1e-7);
        }
    }
}

TEST_CASE("extra output gradients enter at their layer") {
    const Network net = conv_net(7);
    const Tensor x = random_batch({2, 5, 5, 2}, 7);
    const auto fw = forward(net, x);
    std::vector<Tensor> extra(net.layer_count());
    extra[3] = random_batch(fw.record.outputs[3].shape(), 8);
    const Tensor zero_logits(fw.logits.shape());
    const GradientSet g = backward(net, fw.record, zero_logits, extra);
    // Objective: sum(extra[3] * output of layer 3).
    auto f = [&](const Tensor& w) {
        Network probe = net;
        probe.params(2).weight = w;
        const auto r = forward(probe, x);
        double s = 0.0;
        for (std::size_t i = 0; i < extra[3].size(); ++i) s += extra[3][i] * r.record.outputs[3][i];
        return s;
    };
    const Tensor num = oracle::numeric_tensor_gradient(f, net.params(2).weight, 1e-6);
    CHECK(oracle::max_abs_diff(num.data(), g.layers[2].weight.data()) < 1e-7);
    // Layers above the injection point see nothing.
    for (double v : g.layers[4].weight.values()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects a record from another parameter state") {
    Network net = conv_net(2);
    const auto fw = forward(net, random_batch({1, 5, 5, 2}, 2));
    net.params(0).weight[0] += 1.0;
    CHECK_THROWS_AS(backward(net, fw.record, Tensor(fw.logits.shape())), NetworkError);
}

TEST_CASE("forward rejects a mismatched batch") {
    const Network net = conv_net(2);
    CHECK_THROWS_AS(forward(net, Tensor({2, 4, 4, 2})), NetworkError);
}

TEST_CASE("layer roles") {
    const Network net = conv_net(1);
    CHECK(net.head_index() == 4);
    CHECK(net.clusterable_layers() == std::vector<std::size_t>{0, 2});
    CHECK(net.activation_slot(0) == 1);
    CHECK(net.activation_slot(2) == 3);
    CHECK(net.activation_slot(4) == 4);
}

TEST_CASE("replace_head swaps only the head") {
    Network net = conv_net(1);
    const Network before = net;
    Rng rng(4);
    net.replace_head(7, rng);
    CHECK(net.output_size() == 7);
    CHECK(net.params(0) == before.params(0));
    CHECK(net.params(2) == before.params(2));
    for (double b : net.params(4).bias.values()) CHECK(b == 0.0);
}

TEST_CASE("initialization scale") {
    Rng rng(5);
    Network net = NetworkBuilder({400}).dense(200).build();
    net.initialize(rng);
    double ss = 0.0;
    for (double w : net.params(0).weight.values()) ss += w * w;
    const double var = ss / static_cast<double>(net.params(0).weight.size());
    CHECK(var == doctest::Approx(1.0 / 400.0).epsilon(0.05));
}

TEST_CASE("check_gradients flags a corrupted gradient") {
    const Network net = conv_net(3);
    const Tensor x = random_batch({3, 5, 5, 2}, 3);
    const std::vector<std::size_t> labels{0, 1, 2};
    LossFunction good = [&](const Network& n, const Tensor& b, GradientSet* g) {
        const auto fw = forward(n, b);
        const auto ce = cross_entropy(fw.logits, labels);
        if (g) *g = backward(n, fw.record, ce.grad);
        return ce.loss;
    };
    LossFunction doubled = [&](const Network& n, const Tensor& b, GradientSet* g) {
        const double l = good(n, b, g);
        if (g) g->scale(2.0);
        return l;
    };
    CHECK(check_gradients(net, good, x, 1e-5) < 1e-4);
    CHECK(check_gradients(net, doubled, x, 1e-5) == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("fingerprint tracks parameters") {
    Network a = conv_net(1);
    const Network b = a;
    CHECK(a.fingerprint() == b.fingerprint());
    a.params(2).bias[0] = std::nextafter(a.params(2).bias[0], 1.0);
    CHECK(a.fingerprint() != b.fingerprint());
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

Network float_exact(Network net) {
    for (auto& p : net.params()) {
        for (double& v : p.weight.values()) v = static_cast<float>(v);
        for (double& v : p.bias.values()) v = static_cast<float>(v);
    }
    return net;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
    const Network net = float_exact(conv_net(9));
    const auto bytes = encode_checkpoint(network_to_checkpoint(net));
    CHECK(std::memcmp(bytes.data(), "GNAK", 4) == 0);
    CHECK(network_from_checkpoint(decode_checkpoint(bytes)) == net);

    const auto path = std::filesystem::temp_directory_path() / "gnak_unit_ckpt.gnak";
    save_checkpoint(net, path);
    CHECK(load_checkpoint(path) == net);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint stores float32") {
    Network net = conv_net(9);
    const Network back = network_from_checkpoint(decode_checkpoint(encode_checkpoint(network_to_checkpoint(net))));
    CHECK(back == float_exact(net));
}

TEST_CASE("checkpoint rejects bad input") {
    const auto bytes = encode_checkpoint(network_to_checkpoint(conv_net(9)));
    SUBCASE("magic") {
        auto b = bytes;
        b[0] = 'X';
        CHECK_THROWS_WITH_AS(decode_checkpoint(b), doctest::Contains("magic"), CheckpointError);
    }
    SUBCASE("version 2") {
        auto b = bytes;
        b[4] = 2;
        CHECK_THROWS_WITH_AS(decode_checkpoint(b), doctest::Contains("unsupported checkpoint version 2"),
                             CheckpointError);
    }
    SUBCASE("truncated") {
        auto b = bytes;
        b.resize(b.size() - 3);
        CHECK_THROWS_AS(decode_checkpoint(b), CheckpointError);
    }
    SUBCASE("trailing") {
        auto b = bytes;
        b.push_back(0);
        CHECK_THROWS_AS(decode_checkpoint(b), CheckpointError);
    }
}
