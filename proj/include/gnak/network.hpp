#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "gnak/random.hpp"
#include "gnak/tensor.hpp"

namespace gnak {

enum class LayerKind : std::uint32_t { dense = 0, conv2d = 1, relu = 2, softmax = 3 };

const char* to_string(LayerKind kind);

/// One layer of a feed-forward stack. Shapes are per sample; the batch axis
/// is implicit.
///
/// conv2d uses valid padding on (H, W, C) inputs and produces (Ho, Wo, F)
/// with Ho = (H - kernel) / stride + 1. Its weight tensor is (F, kernel,
/// kernel, C). Dense weights are (out, in) over the flattened input.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::vector<std::size_t> in_shape;
    std::vector<std::size_t> out_shape;
    std::size_t filters = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    bool has_bias = false;

    static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true);
    static LayerSpec conv2d(std::size_t height, std::size_t width, std::size_t channels,
                            std::size_t kernel, std::size_t stride, std::size_t filters,
                            bool bias = true);
    static LayerSpec relu(std::vector<std::size_t> shape);
    static LayerSpec softmax(std::size_t classes);

    bool parameterized() const noexcept {
        return kind == LayerKind::dense || kind == LayerKind::conv2d;
    }
    std::size_t in_size() const { return shape_product(in_shape); }
    std::size_t out_size() const { return shape_product(out_shape); }
    /// Number of scalar weights feeding one filter (its fan-in).
    std::size_t filter_fan_in() const;
    std::vector<std::size_t> weight_shape() const;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Weight and bias of one layer. Both are empty for layers without
/// parameters; the bias is empty when has_bias is false.
struct LayerParams {
    Tensor weight;
    Tensor bias;

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Thrown for shape and consistency errors; `layer` is the offending index.
class NetworkError : public std::runtime_error {
public:
    NetworkError(std::size_t layer, const std::string& what);
    std::size_t layer() const noexcept { return layer_; }

private:
    std::size_t layer_;
};

class Network {
public:
    Network() = default;
    /// Validates that consecutive layer shapes compose; parameters start at zero.
    explicit Network(std::vector<LayerSpec> layers);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    const LayerSpec& layer(std::size_t i) const { return layers_.at(i); }
    std::size_t layer_count() const noexcept { return layers_.size(); }

    std::vector<LayerParams>& params() noexcept { return params_; }
    const std::vector<LayerParams>& params() const noexcept { return params_; }
    LayerParams& params(std::size_t i) { return params_.at(i); }
    const LayerParams& params(std::size_t i) const { return params_.at(i); }

    const std::vector<std::size_t>& input_shape() const { return layers_.front().in_shape; }
    std::size_t output_size() const { return layers_.back().out_size(); }

    /// Last parameterized layer: the replaceable classification head.
    std::size_t head_index() const;
    /// Parameterized layers other than the head, in order.
    std::vector<std::size_t> clusterable_layers() const;
    /// Record slot holding the post-nonlinearity output of parameterized
    /// layer `layer` (the following ReLU when there is one).
    std::size_t activation_slot(std::size_t layer) const;

    /// Scaled Gaussian weights (std = 1/sqrt(fan_in)), zero biases.
    void initialize(Rng& rng);
    void initialize_layer(std::size_t layer, Rng& rng);
    /// Swaps the head for a freshly initialized one with `classes` outputs.
    void replace_head(std::size_t classes, Rng& rng);

    std::size_t parameter_count() const;
    /// Hash over layer specs and parameter bits.
    std::uint64_t fingerprint() const;

    friend bool operator==(const Network&, const Network&) = default;

private:
    std::vector<LayerSpec> layers_;
    std::vector<LayerParams> params_;
};

/// Fluent construction of a layer stack starting from a per-sample input shape.
class NetworkBuilder {
public:
    explicit NetworkBuilder(std::vector<std::size_t> input_shape);

    NetworkBuilder& dense(std::size_t out, bool bias = true);
    NetworkBuilder& conv2d(std::size_t kernel, std::size_t stride, std::size_t filters,
                           bool bias = true);
    NetworkBuilder& relu();
    NetworkBuilder& softmax();

    Network build() const { return Network(layers_); }

private:
    const std::vector<std::size_t>& current() const;

    std::vector<std::size_t> input_shape_;
    std::vector<LayerSpec> layers_;
};

/// Inputs and per-layer outputs of one forward pass.
struct ActivationRecord {
    Tensor input;
    std::vector<Tensor> outputs;
    std::uint64_t fingerprint = 0;

    std::size_t batch_size() const { return input.rank() == 0 ? 0 : input.dim(0); }
};

struct ForwardResult {
    Tensor logits;  // (B, outputs)
    ActivationRecord record;
};

/// Per-layer parameter gradients, congruent with Network::params().
struct GradientSet {
    std::vector<LayerParams> layers;

    static GradientSet zeros_like(const Network& net);
    bool all_finite() const;
    /// this += scale * other
    void add_scaled(const GradientSet& other, double scale);
    void scale(double factor);
    std::size_t size() const;

    friend bool operator==(const GradientSet&, const GradientSet&) = default;
};

ForwardResult forward(const Network& net, const Tensor& batch);

/// Reverse-mode pass. `output_grads`, when non-empty, holds one entry per
/// layer with an extra upstream gradient for that layer's output (empty
/// tensors are skipped); auxiliary losses on intermediate activations
/// enter here.
GradientSet backward(const Network& net, const ActivationRecord& record, const Tensor& loss_grad,
                     std::span<const Tensor> output_grads = {});

/// Scalar objective of a network on a batch. Fills `grads` with the analytic
/// gradient when it is not null.
using LossFunction = std::function<double(const Network&, const Tensor&, GradientSet*)>;

/// Central finite differences against the analytic gradient. Returns the
/// worst |analytic - numeric| / max(|numeric|, floor) over all parameters,
/// where floor = 1e-5 * max(1, |L|) keeps round-off in near-zero
/// components from dominating.
double check_gradients(const Network& net, const LossFunction& loss_fn, const Tensor& batch,
                       double eps);

}  // namespace gnak
