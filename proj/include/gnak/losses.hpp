#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gnak/clustering.hpp"
#include "gnak/network.hpp"

namespace gnak {

enum class DistanceKind { squared_euclidean, total_variation };

/// Which hinge loss serves the metric term. `automatic` uses the triplet
/// loss when the batch has a same-class pair and the margin loss otherwise
/// (the one-shot case, where no triplet exists).
enum class MetricKind { automatic, triplet, margin };

/// Coefficients of L = L_class + alpha * L_intra + beta * L_inter + gamma * L_metric.
struct LossWeights {
    double alpha_intra = 0.1;
    double beta_inter = 0.01;
    double gamma_triplet = 1.0;
    double margin = 1.0;
    DistanceKind distance = DistanceKind::squared_euclidean;
    MetricKind metric = MetricKind::automatic;

    /// Throws std::invalid_argument on negative or non-finite coefficients
    /// or a non-positive margin.
    void validate() const;
};

DistanceKind parse_distance_kind(const std::string& name);
std::string to_string(DistanceKind kind);
MetricKind parse_metric_kind(const std::string& name);
std::string to_string(MetricKind kind);

struct LossValue {
    double loss = 0.0;
    Tensor grad;  // same shape as the input the loss was taken over
};

double embedding_distance(std::span<const double> a, std::span<const double> b, DistanceKind kind);

/// Mean softmax cross-entropy over the batch; gradient w.r.t. logits.
LossValue cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Sum over every (anchor, positive, negative) with anchor != positive of the
/// same class and negative of another class:
///   [d(a, p) - d(a, n) + margin]_+
LossValue triplet_loss(const Tensor& embeddings, std::span<const std::size_t> labels,
                       const LossWeights& w);

/// Sum over unordered cross-class pairs of [margin - d(i, k)]_+.
LossValue margin_loss(const Tensor& embeddings, std::span<const std::size_t> labels,
                      const LossWeights& w);

/// Dispatches on w.metric (see MetricKind).
LossValue metric_loss(const Tensor& embeddings, std::span<const std::size_t> labels,
                      const LossWeights& w);

// Group losses on a (N_f, B) profile matrix; `grad`, if set, receives the
// gradient w.r.t. the profiles (accumulated).

/// Sum over unordered pairs inside each group of ||A_i - A_j||_2.
double intra_group_loss(const Tensor& profiles, const LayerGroups& groups, Tensor* grad);

/// Sum over distinct group pairs p < q of ||M_p^T M_q||_F^2.
double inter_group_loss(const Tensor& profiles, const LayerGroups& groups, Tensor* grad);

/// Group loss summed over every layer of an assignment, with gradients
/// expressed on the record's activation tensors (one slot per record output,
/// empty where untouched).
struct ActivationLoss {
    double loss = 0.0;
    std::vector<Tensor> activation_grads;
};

ActivationLoss intra_group_loss(const Network& net, const ActivationRecord& record,
                                const GroupAssignment& assignment);
ActivationLoss inter_group_loss(const Network& net, const ActivationRecord& record,
                                const GroupAssignment& assignment);

struct LossParts {
    double class_loss = 0.0;
    double intra = 0.0;
    double inter = 0.0;
    double triplet = 0.0;
};

double total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace gnak
