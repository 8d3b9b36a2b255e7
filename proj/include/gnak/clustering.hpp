#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnak/network.hpp"

namespace gnak {

/// Activations of one filter across the clustering batch. Dense layers use
/// the post-activation value per sample, conv layers the spatial mean of the
/// filter's map per sample.
struct ActivationProfile {
    std::size_t layer = 0;
    std::size_t filter = 0;
    std::vector<double> values;
};

/// (N_f, B) matrix of profiles for parameterized layer `layer`, read from an
/// existing forward record.
Tensor profile_matrix(const Network& net, const ActivationRecord& record, std::size_t layer);

/// Pushes a (N_f, B) gradient on the profile matrix back onto the layer's
/// activation tensor (undoing the spatial mean for conv layers).
Tensor profile_grad_to_activation(const Network& net, const ActivationRecord& record,
                                  std::size_t layer, const Tensor& profile_grad);

std::vector<ActivationProfile> extract_activation_profiles(const Network& net,
                                                           const Tensor& clustering_batch,
                                                           std::size_t layer);

/// Per-profile zero mean, unit variance (constant profiles become zero).
void standardize_profiles(std::vector<std::vector<double>>& profiles);

struct KMeansResult {
    std::vector<std::size_t> assignment;  // point -> cluster, clusters numbered by first member
    double sse = 0.0;
    std::size_t restart = 0;              // index of the winning restart
    std::vector<double> sse_trace;        // SSE after each Lloyd iteration of that restart
};

/// One k-means++ seeded Lloyd run.
KMeansResult kmeans_single(std::span<const std::vector<double>> points, std::size_t k, Rng& rng,
                           std::size_t max_iterations = 100);

/// Best of `restarts` runs by SSE (ties keep the lowest restart index).
/// Throws std::invalid_argument when k is 0 or exceeds the number of points.
KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k,
                    std::size_t restarts, std::uint64_t seed, std::size_t max_iterations = 100);

double clustering_sse(std::span<const std::vector<double>> points,
                      std::span<const std::size_t> assignment);

/// Partition of one layer's filters.
struct LayerGroups {
    std::size_t layer = 0;
    std::size_t filter_count = 0;
    std::vector<std::size_t> group_of;             // filter -> group id
    std::vector<std::vector<std::size_t>> members; // group id -> sorted filters

    std::size_t group_count() const { return members.size(); }
    static LayerGroups from_labels(std::size_t layer, std::span<const std::size_t> labels);
    static LayerGroups singletons(std::size_t layer, std::size_t filter_count);

    friend bool operator==(const LayerGroups&, const LayerGroups&) = default;
};

/// Groups for the clustered layers of a network. Layers without an entry
/// are not grouped.
struct GroupAssignment {
    std::vector<LayerGroups> layers;

    const LayerGroups* find(std::size_t layer) const;
    /// Disjoint, exhaustive, non-empty groups with 1 <= n <= N_f everywhere.
    bool is_partition() const;

    static GroupAssignment singletons(const Network& net);

    friend bool operator==(const GroupAssignment&, const GroupAssignment&) = default;
};

/// A requested group count the layer cannot hold.
class InvalidGroupCount : public std::invalid_argument {
public:
    InvalidGroupCount(std::size_t layer, std::size_t count, std::size_t filters);
    std::size_t layer() const noexcept { return layer_; }

private:
    std::size_t layer_;
};

struct ClusteringOptions {
    std::size_t restarts = 10;
    std::size_t max_iterations = 100;
    bool standardize = false;
    std::uint64_t seed = 0;
};

/// Clusters every clusterable layer. `counts` has one entry per entry of
/// Network::clusterable_layers(); a count equal to N_f yields singletons.
GroupAssignment build_group_assignment(const Network& net, std::span<const std::size_t> counts,
                                       const Tensor& clustering_batch,
                                       const ClusteringOptions& options = {});

// Text form:
//   gnak-groups 1
//   layer <index> filters <N_f> groups <n>
//   group <id> <member> <member> ...
//   ...
std::string serialize_assignment(const GroupAssignment& assignment);
GroupAssignment parse_assignment(const std::string& text);

}  // namespace gnak
