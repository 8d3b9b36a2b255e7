#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "gnak/clustering.hpp"
#include "gnak/dataset.hpp"
#include "gnak/losses.hpp"
#include "gnak/network.hpp"

namespace gnak {

/// Step decay: `initial` before `decay_step`, `decayed` from then on.
struct LearningRateSchedule {
    double initial = 0.01;
    double decayed = 0.001;
    std::size_t decay_step = 1000;

    double at(std::size_t iteration) const { return iteration < decay_step ? initial : decayed; }
};

/// Where the metric loss reads its embedding f(x).
enum class EmbeddingSource { penultimate, logits };

struct FineTuneConfig {
    LearningRateSchedule schedule;
    std::size_t iterations = 2000;
    LossWeights weights;
    EmbeddingSource embedding = EmbeddingSource::penultimate;
    /// Number of leading clusterable layers that keep their groups; unset
    /// means every layer in the assignment.
    std::optional<std::size_t> cluster_prefix;

    void validate() const;
};

struct LossTraceRow {
    std::size_t iteration = 0;
    LossParts parts;
    double total = 0.0;
    double lr = 0.0;

    friend bool operator==(const LossTraceRow& a, const LossTraceRow& b) {
        return a.iteration == b.iteration && a.parts.class_loss == b.parts.class_loss &&
               a.parts.intra == b.parts.intra && a.parts.inter == b.parts.inter &&
               a.parts.triplet == b.parts.triplet && a.total == b.total && a.lr == b.lr;
    }
};

struct FineTuneResult {
    Network network;
    std::vector<LossTraceRow> trace;
    double accuracy = 0.0;  // on the validation data
};

/// A fine-tuning run whose loss or gradient stopped being finite.
class FineTuneDiverged : public std::runtime_error {
public:
    explicit FineTuneDiverged(std::size_t iteration);
    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

/// Scale applied to each loss component when forming the objective.
struct ComponentScales {
    double class_loss = 1.0;
    double intra = 0.0;
    double inter = 0.0;
    double metric = 0.0;

    static ComponentScales from(const LossWeights& w) {
        return {1.0, w.alpha_intra, w.beta_inter, w.gamma_triplet};
    }
};

struct ObjectiveResult {
    LossParts parts;
    double total = 0.0;
    GradientSet grads;  // empty unless requested
};

/// One forward/backward evaluation of the hybrid objective on a batch.
/// Components with zero scale are still reported in `parts` but add nothing
/// to the gradient.
ObjectiveResult evaluate_objective(const Network& net, const Tensor& batch,
                                   std::span<const std::size_t> labels,
                                   const GroupAssignment& assignment, const LossWeights& weights,
                                   const ComponentScales& scales, EmbeddingSource embedding,
                                   bool with_grads);

/// Keeps only the first `prefix` clusterable layers of the assignment.
GroupAssignment restrict_assignment(const Network& net, const GroupAssignment& assignment,
                                    std::size_t prefix);

/// Replaces each member filter's gradient (weights and bias together) by the
/// mean over its group. The mean is computed once and copied to every
/// member. Layers outside the assignment pass through.
GradientSet average_group_gradients(const GradientSet& grads, const GroupAssignment& assignment);

/// W <- W - lr * dW for every parameter. Throws std::runtime_error on
/// non-finite gradients.
void sgd_step(Network& net, const GradientSet& grads, double lr);

// Shared-delta updates. Filters in groups of two or more live on a fixed
// binary lattice (multiples of 2^-40) and receive lattice-rounded deltas, so
// every float operation on them is exact and the differences between group
// members never drift. Other parameters take the plain SGD step.
inline constexpr int kGroupLatticeExponent = 40;
double snap_to_group_lattice(double value);
void snap_grouped_parameters(Network& net, const GroupAssignment& assignment);
void grouped_sgd_step(Network& net, const GradientSet& averaged, const GroupAssignment& assignment,
                      double lr);

/// Grouped fine-tuning: forward, hybrid loss, backward, group averaging,
/// shared-delta update, for cfg.iterations steps on the full k-shot batch.
/// Accuracy is measured on `validation`.
FineTuneResult fine_tune(const Network& net, const GroupAssignment& assignment,
                         const Dataset& kshot, const Dataset& validation, const FineTuneConfig& cfg);

/// Reference cross-entropy-only SGD loop with no grouping machinery.
FineTuneResult plain_fine_tune(const Network& net, const Dataset& kshot, const Dataset& validation,
                               const FineTuneConfig& cfg);

/// Fraction of samples whose argmax logit equals the label.
double evaluate(const Network& net, const Dataset& dataset);

void write_loss_trace_csv(std::ostream& out, std::span<const LossTraceRow> trace);

}  // namespace gnak
