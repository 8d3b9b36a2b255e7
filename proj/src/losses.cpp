#include "gnak/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace gnak {

void LossWeights::validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!ok(alpha_intra) || !ok(beta_inter) || !ok(gamma_triplet)) {
        throw std::invalid_argument("loss weights must be finite and non-negative");
    }
    if (!std::isfinite(margin) || margin <= 0.0) throw std::invalid_argument("margin must be positive");
}

DistanceKind parse_distance_kind(const std::string& name) {
    if (name == "squared-euclidean" || name == "euclidean") return DistanceKind::squared_euclidean;
    if (name == "total-variation" || name == "tv") return DistanceKind::total_variation;
    throw std::invalid_argument(fmt::format("unknown distance '{}'", name));
}

std::string to_string(DistanceKind kind) {
    return kind == DistanceKind::squared_euclidean ? "squared-euclidean" : "total-variation";
}

MetricKind parse_metric_kind(const std::string& name) {
    if (name == "auto") return MetricKind::automatic;
    if (name == "triplet") return MetricKind::triplet;
    if (name == "margin") return MetricKind::margin;
    throw std::invalid_argument(fmt::format("unknown metric loss '{}'", name));
}

std::string to_string(MetricKind kind) {
    switch (kind) {
        case MetricKind::automatic: return "auto";
        case MetricKind::triplet: return "triplet";
        case MetricKind::margin: return "margin";
    }
    return "auto";
}

double embedding_distance(std::span<const double> a, std::span<const double> b, DistanceKind kind) {
    double d = 0.0;
    if (kind == DistanceKind::squared_euclidean) {
        for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    } else {
        for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    }
    return d;
}

namespace {

void check_labels(const Tensor& x, std::span<const std::size_t> labels) {
    if (x.rank() < 1 || x.dim(0) != labels.size()) {
        throw std::invalid_argument(fmt::format("{} labels for a batch of shape {}", labels.size(),
                                                shape_string(x.shape())));
    }
}

// d(x_i, x_j) / d x_i, accumulated with weight `w` into `out`.
void add_distance_grad(std::span<const double> xi, std::span<const double> xj, DistanceKind kind,
                       double w, std::span<double> out) {
    for (std::size_t d = 0; d < xi.size(); ++d) {
        const double diff = xi[d] - xj[d];
        if (kind == DistanceKind::squared_euclidean) {
            out[d] += w * 2.0 * diff;
        } else if (diff != 0.0) {
            out[d] += w * (diff > 0.0 ? 1.0 : -1.0);
        }
    }
}

// Turns pair coefficients c(i, j) on d(x_i, x_j) into embedding gradients.
Tensor pair_coefficients_to_grad(const Tensor& x, const std::vector<double>& coeff, DistanceKind kind) {
    const std::size_t n = x.dim(0);
    Tensor grad(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double c = coeff[i * n + j] + coeff[j * n + i];
            if (c == 0.0 || i == j) continue;
            add_distance_grad(x.row(i), x.row(j), kind, c, grad.row(i));
        }
    }
    return grad;
}

std::vector<double> pair_distances(const Tensor& x, DistanceKind kind) {
    const std::size_t n = x.dim(0);
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            dist[i * n + j] = dist[j * n + i] = embedding_distance(x.row(i), x.row(j), kind);
        }
    }
    return dist;
}

bool has_same_class_pair(std::span<const std::size_t> labels) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            if (labels[i] == labels[j]) return true;
        }
    }
    return false;
}

}  // namespace

LossValue cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    check_labels(logits, labels);
    const std::size_t n = logits.dim(0), classes = logits.row_size();
    LossValue out{0.0, Tensor(logits.shape())};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t b = 0; b < n; ++b) {
        if (labels[b] >= classes) {
            throw std::invalid_argument(fmt::format("label {} out of range for {} classes", labels[b], classes));
        }
        auto z = logits.row(b);
        auto g = out.grad.row(b);
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c] - mx);
        const double log_sum = mx + std::log(sum);
        out.loss += (log_sum - z[labels[b]]) * inv_n;
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(z[c] - log_sum);
            g[c] = (p - (c == labels[b] ? 1.0 : 0.0)) * inv_n;
        }
    }
    return out;
}

LossValue triplet_loss(const Tensor& embeddings, std::span<const std::size_t> labels,
                       const LossWeights& w) {
    check_labels(embeddings, labels);
    const std::size_t n = embeddings.dim(0);
    const auto dist = pair_distances(embeddings, w.distance);
    std::vector<double> coeff(n * n, 0.0);
    double loss = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            for (std::size_t q = 0; q < n; ++q) {
                if (labels[q] == labels[a]) continue;
                const double h = dist[a * n + p] - dist[a * n + q] + w.margin;
                if (h <= 0.0) continue;
                loss += h;
                coeff[a * n + p] += 1.0;
                coeff[a * n + q] -= 1.0;
            }
        }
    }
    return {loss, pair_coefficients_to_grad(embeddings, coeff, w.distance)};
}

LossValue margin_loss(const Tensor& embeddings, std::span<const std::size_t> labels,
                      const LossWeights& w) {
    check_labels(embeddings, labels);
    const std::size_t n = embeddings.dim(0);
    const auto dist = pair_distances(embeddings, w.distance);
    std::vector<double> coeff(n * n, 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = i + 1; k < n; ++k) {
            if (labels[i] == labels[k]) continue;
            const double h = w.margin - dist[i * n + k];
            if (h <= 0.0) continue;
            loss += h;
            coeff[i * n + k] -= 1.0;
        }
    }
    return {loss, pair_coefficients_to_grad(embeddings, coeff, w.distance)};
}

LossValue metric_loss(const Tensor& embeddings, std::span<const std::size_t> labels,
                      const LossWeights& w) {
    switch (w.metric) {
        case MetricKind::triplet: return triplet_loss(embeddings, labels, w);
        case MetricKind::margin: return margin_loss(embeddings, labels, w);
        case MetricKind::automatic:
            return has_same_class_pair(labels) ? triplet_loss(embeddings, labels, w)
                                               : margin_loss(embeddings, labels, w);
    }
    return triplet_loss(embeddings, labels, w);
}

double intra_group_loss(const Tensor& profiles, const LayerGroups& groups, Tensor* grad) {
    const std::size_t batch = profiles.dim(1);
    double loss = 0.0;
    for (const auto& members : groups.members) {
        for (std::size_t x = 0; x < members.size(); ++x) {
            for (std::size_t y = x + 1; y < members.size(); ++y) {
                auto ai = profiles.row(members[x]);
                auto aj = profiles.row(members[y]);
                double sq = 0.0;
                for (std::size_t b = 0; b < batch; ++b) sq += (ai[b] - aj[b]) * (ai[b] - aj[b]);
                const double norm = std::sqrt(sq);
                loss += norm;
                if (grad == nullptr || norm == 0.0) continue;
                auto gi = grad->row(members[x]);
                auto gj = grad->row(members[y]);
                for (std::size_t b = 0; b < batch; ++b) {
                    const double g = (ai[b] - aj[b]) / norm;
                    gi[b] += g;
                    gj[b] -= g;
                }
            }
        }
    }
    return loss;
}

double inter_group_loss(const Tensor& profiles, const LayerGroups& groups, Tensor* grad) {
    const std::size_t batch = profiles.dim(1);
    double loss = 0.0;
    for (std::size_t p = 0; p < groups.members.size(); ++p) {
        for (std::size_t q = p + 1; q < groups.members.size(); ++q) {
            for (auto i : groups.members[p]) {
                for (auto j : groups.members[q]) {
                    auto ai = profiles.row(i);
                    auto aj = profiles.row(j);
                    double c = 0.0;
                    for (std::size_t b = 0; b < batch; ++b) c += ai[b] * aj[b];
                    loss += c * c;
                    if (grad == nullptr) continue;
                    auto gi = grad->row(i);
                    auto gj = grad->row(j);
                    for (std::size_t b = 0; b < batch; ++b) {
                        gi[b] += 2.0 * c * aj[b];
                        gj[b] += 2.0 * c * ai[b];
                    }
                }
            }
        }
    }
    return loss;
}

namespace {

template <typename Fn>
ActivationLoss group_loss_on_record(const Network& net, const ActivationRecord& record,
                                    const GroupAssignment& assignment, Fn fn) {
    ActivationLoss out;
    out.activation_grads.resize(record.outputs.size());
    for (const auto& groups : assignment.layers) {
        if (groups.layer >= net.layer_count() || net.layer(groups.layer).filters != groups.filter_count) {
            throw std::invalid_argument(fmt::format("assignment for layer {} does not match the network",
                                                    groups.layer));
        }
        const Tensor profiles = profile_matrix(net, record, groups.layer);
        Tensor grad(profiles.shape());
        out.loss += fn(profiles, groups, &grad);
        const std::size_t slot = net.activation_slot(groups.layer);
        Tensor act_grad = profile_grad_to_activation(net, record, groups.layer, grad);
        if (out.activation_grads[slot].empty()) {
            out.activation_grads[slot] = std::move(act_grad);
        } else {
            for (std::size_t i = 0; i < act_grad.size(); ++i) out.activation_grads[slot][i] += act_grad[i];
        }
    }
    return out;
}

}  // namespace

ActivationLoss intra_group_loss(const Network& net, const ActivationRecord& record,
                                const GroupAssignment& assignment) {
    return group_loss_on_record(net, record, assignment,
                                [](const Tensor& m, const LayerGroups& g, Tensor* grad) {
                                    return intra_group_loss(m, g, grad);
                                });
}

ActivationLoss inter_group_loss(const Network& net, const ActivationRecord& record,
                                const GroupAssignment& assignment) {
    return group_loss_on_record(net, record, assignment,
                                [](const Tensor& m, const LayerGroups& g, Tensor* grad) {
                                    return inter_group_loss(m, g, grad);
                                });
}

double total_loss(const LossParts& parts, const LossWeights& w) {
    return parts.class_loss + w.alpha_intra * parts.intra + w.beta_inter * parts.inter +
           w.gamma_triplet * parts.triplet;
}

}  // namespace gnak
