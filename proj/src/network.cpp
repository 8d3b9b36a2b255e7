#include "gnak/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include <fmt/format.h>

namespace gnak {

const char* to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::softmax: return "softmax";
    }
    return "unknown";
}

NetworkError::NetworkError(std::size_t layer, const std::string& what)
    : std::runtime_error(fmt::format("layer {}: {}", layer, what)), layer_(layer) {}

// ---------------------------------------------------------------------------
// LayerSpec

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, bool bias) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in_shape = {in};
    s.out_shape = {out};
    s.filters = out;
    s.has_bias = bias;
    return s;
}

LayerSpec LayerSpec::conv2d(std::size_t height, std::size_t width, std::size_t channels,
                            std::size_t kernel, std::size_t stride, std::size_t filters,
                            bool bias) {
    if (kernel == 0 || stride == 0 || kernel > height || kernel > width) {
        throw std::invalid_argument(fmt::format(
            "conv2d kernel {} stride {} does not fit input {}x{}", kernel, stride, height, width));
    }
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_shape = {height, width, channels};
    s.out_shape = {(height - kernel) / stride + 1, (width - kernel) / stride + 1, filters};
    s.filters = filters;
    s.kernel = kernel;
    s.stride = stride;
    s.has_bias = bias;
    return s;
}

LayerSpec LayerSpec::relu(std::vector<std::size_t> shape) {
    LayerSpec s;
    s.kind = LayerKind::relu;
    s.in_shape = shape;
    s.out_shape = std::move(shape);
    return s;
}

LayerSpec LayerSpec::softmax(std::size_t classes) {
    LayerSpec s;
    s.kind = LayerKind::softmax;
    s.in_shape = {classes};
    s.out_shape = {classes};
    return s;
}

std::size_t LayerSpec::filter_fan_in() const {
    switch (kind) {
        case LayerKind::dense: return in_size();
        case LayerKind::conv2d: return kernel * kernel * in_shape.at(2);
        default: return 0;
    }
}

std::vector<std::size_t> LayerSpec::weight_shape() const {
    switch (kind) {
        case LayerKind::dense: return {filters, in_size()};
        case LayerKind::conv2d: return {filters, kernel, kernel, in_shape.at(2)};
        default: return {};
    }
}

// ---------------------------------------------------------------------------
// Network

Network::Network(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw std::invalid_argument("network needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& s = layers_[i];
        if (s.in_size() == 0 || s.out_size() == 0) throw NetworkError(i, "empty layer shape");
        if (s.parameterized() && s.filters == 0) throw NetworkError(i, "filter count must be >= 1");
        if (s.kind == LayerKind::conv2d && (s.kernel == 0 || s.stride == 0 || s.in_shape.size() != 3)) {
            throw NetworkError(i, "invalid conv2d geometry");
        }
        if (i > 0 && layers_[i - 1].out_size() != s.in_size()) {
            throw NetworkError(i, fmt::format("input {} does not match previous output {}",
                                              shape_string(s.in_shape),
                                              shape_string(layers_[i - 1].out_shape)));
        }
        if (i > 0 && s.kind == LayerKind::conv2d && layers_[i - 1].out_shape != s.in_shape) {
            throw NetworkError(i, "conv2d input must match previous spatial shape");
        }
    }
    params_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& s = layers_[i];
        if (!s.parameterized()) continue;
        params_[i].weight = Tensor(s.weight_shape());
        if (s.has_bias) params_[i].bias = Tensor({s.filters});
    }
}

std::size_t Network::head_index() const {
    for (std::size_t i = layers_.size(); i-- > 0;) {
        if (layers_[i].parameterized()) return i;
    }
    throw std::logic_error("network has no parameterized layer");
}

std::vector<std::size_t> Network::clusterable_layers() const {
    std::vector<std::size_t> out;
    const std::size_t head = head_index();
    for (std::size_t i = 0; i < head; ++i) {
        if (layers_[i].parameterized()) out.push_back(i);
    }
    return out;
}

std::size_t Network::activation_slot(std::size_t layer) const {
    if (!layers_.at(layer).parameterized()) {
        throw NetworkError(layer, "layer has no filters");
    }
    if (layer + 1 < layers_.size() && layers_[layer + 1].kind == LayerKind::relu) return layer + 1;
    return layer;
}

void Network::initialize(Rng& rng) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].parameterized()) initialize_layer(i, rng);
    }
}

void Network::initialize_layer(std::size_t layer, Rng& rng) {
    const LayerSpec& s = layers_.at(layer);
    if (!s.parameterized()) return;
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(s.filter_fan_in())));
    for (double& w : params_[layer].weight.values()) w = gauss(rng);
    params_[layer].bias.fill(0.0);
}

void Network::replace_head(std::size_t classes, Rng& rng) {
    const std::size_t head = head_index();
    const LayerSpec old = layers_[head];
    if (old.kind != LayerKind::dense) throw NetworkError(head, "only dense heads are replaceable");
    layers_[head] = LayerSpec::dense(old.in_size(), classes, old.has_bias);
    for (std::size_t i = head + 1; i < layers_.size(); ++i) {
        layers_[i].in_shape = {classes};
        layers_[i].out_shape = {classes};
    }
    params_[head].weight = Tensor(layers_[head].weight_shape());
    params_[head].bias = old.has_bias ? Tensor({classes}) : Tensor();
    initialize_layer(head, rng);
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.weight.size() + p.bias.size();
    return n;
}

std::uint64_t Network::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& s = layers_[i];
        mix(static_cast<std::uint64_t>(s.kind));
        for (auto d : s.in_shape) mix(d);
        for (auto d : s.out_shape) mix(d);
        mix(s.kernel);
        mix(s.stride);
        for (double v : params_[i].weight.values()) mix(std::bit_cast<std::uint64_t>(v));
        for (double v : params_[i].bias.values()) mix(std::bit_cast<std::uint64_t>(v));
    }
    return h;
}

// ---------------------------------------------------------------------------
// NetworkBuilder

NetworkBuilder::NetworkBuilder(std::vector<std::size_t> input_shape)
    : input_shape_(std::move(input_shape)) {}

const std::vector<std::size_t>& NetworkBuilder::current() const {
    return layers_.empty() ? input_shape_ : layers_.back().out_shape;
}

NetworkBuilder& NetworkBuilder::dense(std::size_t out, bool bias) {
    layers_.push_back(LayerSpec::dense(shape_product(current()), out, bias));
    return *this;
}

NetworkBuilder& NetworkBuilder::conv2d(std::size_t kernel, std::size_t stride, std::size_t filters,
                                       bool bias) {
    const auto& in = current();
    if (in.size() != 3) throw std::invalid_argument("conv2d needs an (H, W, C) input");
    layers_.push_back(LayerSpec::conv2d(in[0], in[1], in[2], kernel, stride, filters, bias));
    return *this;
}

NetworkBuilder& NetworkBuilder::relu() {
    layers_.push_back(LayerSpec::relu(current()));
    return *this;
}

NetworkBuilder& NetworkBuilder::softmax() {
    layers_.push_back(LayerSpec::softmax(shape_product(current())));
    return *this;
}

// ---------------------------------------------------------------------------
// GradientSet

GradientSet GradientSet::zeros_like(const Network& net) {
    GradientSet g;
    g.layers.reserve(net.layer_count());
    for (const auto& p : net.params()) {
        g.layers.push_back({Tensor::zeros_like(p.weight), Tensor::zeros_like(p.bias)});
    }
    return g;
}

bool GradientSet::all_finite() const {
    return std::all_of(layers.begin(), layers.end(), [](const LayerParams& p) {
        return p.weight.all_finite() && p.bias.all_finite();
    });
}

void GradientSet::add_scaled(const GradientSet& other, double scale) {
    if (other.layers.size() != layers.size()) throw std::invalid_argument("gradient sets differ in layer count");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto add = [scale](Tensor& dst, const Tensor& src) {
            if (dst.size() != src.size()) throw std::invalid_argument("gradient tensor size mismatch");
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
        };
        add(layers[l].weight, other.layers[l].weight);
        add(layers[l].bias, other.layers[l].bias);
    }
}

void GradientSet::scale(double factor) {
    for (auto& p : layers) {
        for (double& v : p.weight.values()) v *= factor;
        for (double& v : p.bias.values()) v *= factor;
    }
}

std::size_t GradientSet::size() const {
    std::size_t n = 0;
    for (const auto& p : layers) n += p.weight.size() + p.bias.size();
    return n;
}

// ---------------------------------------------------------------------------
// Forward / backward kernels

namespace {

std::vector<std::size_t> batched(std::size_t batch, const std::vector<std::size_t>& shape) {
    std::vector<std::size_t> out{batch};
    out.insert(out.end(), shape.begin(), shape.end());
    return out;
}

// Patch matrix for one sample: rows are output positions, columns follow the
// (ky, kx, c) order of the weight tensor.
void im2col(const LayerSpec& s, std::span<const double> x, std::vector<double>& cols) {
    const std::size_t width = s.in_shape[1], channels = s.in_shape[2];
    const std::size_t ho = s.out_shape[0], wo = s.out_shape[1];
    const std::size_t k = s.kernel, patch = k * k * channels;
    cols.assign(ho * wo * patch, 0.0);
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            double* dst = cols.data() + (oy * wo + ox) * patch;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::size_t iy = oy * s.stride + ky;
                const double* src = x.data() + (iy * width + ox * s.stride) * channels;
                std::copy(src, src + k * channels, dst + ky * k * channels);
            }
        }
    }
}

void col2im_add(const LayerSpec& s, const std::vector<double>& cols, std::span<double> dx) {
    const std::size_t width = s.in_shape[1], channels = s.in_shape[2];
    const std::size_t ho = s.out_shape[0], wo = s.out_shape[1];
    const std::size_t k = s.kernel, patch = k * k * channels;
    for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
            const double* src = cols.data() + (oy * wo + ox) * patch;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const std::size_t iy = oy * s.stride + ky;
                double* dst = dx.data() + (iy * width + ox * s.stride) * channels;
                for (std::size_t j = 0; j < k * channels; ++j) dst[j] += src[ky * k * channels + j];
            }
        }
    }
}

Tensor dense_forward(const LayerSpec& s, const LayerParams& p, const Tensor& x) {
    const std::size_t batch = x.dim(0), in = s.in_size(), out = s.filters;
    Tensor y(batched(batch, s.out_shape));
    const double* w = p.weight.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const double* xb = x.data().data() + b * in;
        double* yb = y.data().data() + b * out;
        for (std::size_t o = 0; o < out; ++o) {
            double acc = s.has_bias ? p.bias[o] : 0.0;
            const double* wo = w + o * in;
            for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xb[i];
            yb[o] = acc;
        }
    }
    return y;
}

Tensor conv_forward(const LayerSpec& s, const LayerParams& p, const Tensor& x) {
    const std::size_t batch = x.dim(0), in = s.in_size();
    const std::size_t positions = s.out_shape[0] * s.out_shape[1];
    const std::size_t filters = s.filters, patch = s.filter_fan_in();
    Tensor y(batched(batch, s.out_shape));
    std::vector<double> cols;
    const double* w = p.weight.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        im2col(s, x.data().subspan(b * in, in), cols);
        double* yb = y.data().data() + b * positions * filters;
        for (std::size_t q = 0; q < positions; ++q) {
            const double* col = cols.data() + q * patch;
            for (std::size_t f = 0; f < filters; ++f) {
                double acc = s.has_bias ? p.bias[f] : 0.0;
                const double* wf = w + f * patch;
                for (std::size_t j = 0; j < patch; ++j) acc += wf[j] * col[j];
                yb[q * filters + f] = acc;
            }
        }
    }
    return y;
}

Tensor relu_forward(const LayerSpec& s, const Tensor& x) {
    Tensor y(batched(x.dim(0), s.out_shape));
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

Tensor softmax_forward(const LayerSpec& s, const Tensor& x) {
    const std::size_t batch = x.dim(0), n = s.in_size();
    Tensor y(batched(batch, s.out_shape));
    for (std::size_t b = 0; b < batch; ++b) {
        auto xb = x.data().subspan(b * n, n);
        auto yb = y.data().subspan(b * n, n);
        const double mx = *std::max_element(xb.begin(), xb.end());
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += (yb[i] = std::exp(xb[i] - mx));
        for (std::size_t i = 0; i < n; ++i) yb[i] /= sum;
    }
    return y;
}

}  // namespace

ForwardResult forward(const Network& net, const Tensor& batch) {
    const auto& in_shape = net.input_shape();
    if (batch.rank() < 1 || batch.dim(0) == 0 || batch.row_size() != shape_product(in_shape)) {
        throw NetworkError(0, fmt::format("batch shape {} does not match input {}",
                                          shape_string(batch.shape()), shape_string(in_shape)));
    }
    const std::size_t n = batch.dim(0);
    ForwardResult result;
    result.record.input = batch.reshaped(batched(n, in_shape));
    result.record.outputs.reserve(net.layer_count());
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        const LayerSpec& s = net.layer(i);
        const Tensor& x = i == 0 ? result.record.input : result.record.outputs[i - 1];
        switch (s.kind) {
            case LayerKind::dense: result.record.outputs.push_back(dense_forward(s, net.params(i), x)); break;
            case LayerKind::conv2d: result.record.outputs.push_back(conv_forward(s, net.params(i), x)); break;
            case LayerKind::relu: result.record.outputs.push_back(relu_forward(s, x)); break;
            case LayerKind::softmax: result.record.outputs.push_back(softmax_forward(s, x)); break;
        }
    }
    result.record.fingerprint = net.fingerprint();
    result.logits = result.record.outputs.back().reshaped({n, net.output_size()});
    return result;
}

GradientSet backward(const Network& net, const ActivationRecord& record, const Tensor& loss_grad,
                     std::span<const Tensor> output_grads) {
    const std::size_t layers = net.layer_count();
    if (record.outputs.size() != layers || record.fingerprint != net.fingerprint()) {
        throw NetworkError(layers - 1, "activation record does not belong to this network state");
    }
    const std::size_t batch = record.batch_size();
    if (loss_grad.size() != batch * net.output_size()) {
        throw NetworkError(layers - 1, fmt::format("loss gradient shape {} does not match logits ({}, {})",
                                                   shape_string(loss_grad.shape()), batch,
                                                   net.output_size()));
    }
    if (!output_grads.empty() && output_grads.size() != layers) {
        throw NetworkError(0, "output gradient list must have one entry per layer");
    }

    GradientSet grads = GradientSet::zeros_like(net);
    Tensor upstream = loss_grad.reshaped(record.outputs.back().shape());

    for (std::size_t i = layers; i-- > 0;) {
        const LayerSpec& s = net.layer(i);
        if (!output_grads.empty() && !output_grads[i].empty()) {
            if (output_grads[i].size() != upstream.size()) {
                throw NetworkError(i, "extra output gradient has the wrong size");
            }
            for (std::size_t j = 0; j < upstream.size(); ++j) upstream[j] += output_grads[i][j];
        }
        const Tensor& x = i == 0 ? record.input : record.outputs[i - 1];
        const bool need_input_grad = i > 0;
        Tensor dx;
        if (need_input_grad) dx = Tensor(x.shape());

        switch (s.kind) {
            case LayerKind::dense: {
                const std::size_t in = s.in_size(), out = s.filters;
                const LayerParams& p = net.params(i);
                LayerParams& g = grads.layers[i];
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* xb = x.data().data() + b * in;
                    const double* gb = upstream.data().data() + b * out;
                    for (std::size_t o = 0; o < out; ++o) {
                        const double go = gb[o];
                        if (s.has_bias) g.bias[o] += go;
                        double* gw = g.weight.data().data() + o * in;
                        for (std::size_t k = 0; k < in; ++k) gw[k] += go * xb[k];
                        if (need_input_grad) {
                            const double* w = p.weight.data().data() + o * in;
                            double* dxb = dx.data().data() + b * in;
                            for (std::size_t k = 0; k < in; ++k) dxb[k] += go * w[k];
                        }
                    }
                }
                break;
            }
            case LayerKind::conv2d: {
                const std::size_t in = s.in_size();
                const std::size_t positions = s.out_shape[0] * s.out_shape[1];
                const std::size_t filters = s.filters, patch = s.filter_fan_in();
                const LayerParams& p = net.params(i);
                LayerParams& g = grads.layers[i];
                std::vector<double> cols, dcols;
                for (std::size_t b = 0; b < batch; ++b) {
                    im2col(s, x.data().subspan(b * in, in), cols);
                    if (need_input_grad) dcols.assign(cols.size(), 0.0);
                    const double* gb = upstream.data().data() + b * positions * filters;
                    for (std::size_t q = 0; q < positions; ++q) {
                        const double* col = cols.data() + q * patch;
                        for (std::size_t f = 0; f < filters; ++f) {
                            const double go = gb[q * filters + f];
                            if (s.has_bias) g.bias[f] += go;
                            double* gw = g.weight.data().data() + f * patch;
                            for (std::size_t j = 0; j < patch; ++j) gw[j] += go * col[j];
                            if (need_input_grad) {
                                const double* w = p.weight.data().data() + f * patch;
                                double* dcol = dcols.data() + q * patch;
                                for (std::size_t j = 0; j < patch; ++j) dcol[j] += go * w[j];
                            }
                        }
                    }
                    if (need_input_grad) col2im_add(s, dcols, dx.data().subspan(b * in, in));
                }
                break;
            }
            case LayerKind::relu:
                if (need_input_grad) {
                    for (std::size_t j = 0; j < x.size(); ++j) dx[j] = x[j] > 0.0 ? upstream[j] : 0.0;
                }
                break;
            case LayerKind::softmax:
                if (need_input_grad) {
                    const std::size_t n = s.in_size();
                    const Tensor& y = record.outputs[i];
                    for (std::size_t b = 0; b < batch; ++b) {
                        double dot = 0.0;
                        for (std::size_t k = 0; k < n; ++k) dot += upstream[b * n + k] * y[b * n + k];
                        for (std::size_t k = 0; k < n; ++k) {
                            dx[b * n + k] = y[b * n + k] * (upstream[b * n + k] - dot);
                        }
                    }
                }
                break;
        }
        if (need_input_grad) upstream = std::move(dx);
    }
    return grads;
}

double check_gradients(const Network& net, const LossFunction& loss_fn, const Tensor& batch,
                       double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be positive");
    GradientSet analytic = GradientSet::zeros_like(net);
    const double base = loss_fn(net, batch, &analytic);
    if (!std::isfinite(base)) throw std::runtime_error("loss is not finite");
    const double floor = 1e-5 * std::max(1.0, std::abs(base));

    Network probe = net;
    double worst = 0.0;
    auto visit = [&](Tensor& param, const Tensor& grad) {
        for (std::size_t j = 0; j < param.size(); ++j) {
            const double saved = param[j];
            param[j] = saved + eps;
            const double plus = loss_fn(probe, batch, nullptr);
            param[j] = saved - eps;
            const double minus = loss_fn(probe, batch, nullptr);
            param[j] = saved;
            if (!std::isfinite(plus) || !std::isfinite(minus)) {
                throw std::runtime_error("loss became non-finite under perturbation");
            }
            const double numeric = (plus - minus) / (2.0 * eps);
            const double err = std::abs(grad[j] - numeric) / std::max(std::abs(numeric), floor);
            worst = std::max(worst, err);
        }
    };
    for (std::size_t l = 0; l < probe.layer_count(); ++l) {
        visit(probe.params(l).weight, analytic.layers[l].weight);
        visit(probe.params(l).bias, analytic.layers[l].bias);
    }
    return worst;
}

}  // namespace gnak
