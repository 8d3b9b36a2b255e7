#include "gnak/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

namespace gnak {

// ---------------------------------------------------------------------------
// Profiles

Tensor profile_matrix(const Network& net, const ActivationRecord& record, std::size_t layer) {
    const LayerSpec& s = net.layer(layer);
    const std::size_t slot = net.activation_slot(layer);
    const Tensor& act = record.outputs.at(slot);
    const std::size_t batch = record.batch_size();
    const std::size_t filters = s.filters;
    // Dense and conv activations both keep the filter index innermost.
    const std::size_t positions = act.row_size() / filters;
    Tensor profiles({filters, batch});
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = act.row(b);
        for (std::size_t f = 0; f < filters; ++f) {
            double acc = 0.0;
            for (std::size_t q = 0; q < positions; ++q) acc += row[q * filters + f];
            profiles[f * batch + b] = acc / static_cast<double>(positions);
        }
    }
    return profiles;
}

Tensor profile_grad_to_activation(const Network& net, const ActivationRecord& record,
                                  std::size_t layer, const Tensor& profile_grad) {
    const LayerSpec& s = net.layer(layer);
    const Tensor& act = record.outputs.at(net.activation_slot(layer));
    const std::size_t batch = record.batch_size();
    const std::size_t filters = s.filters;
    const std::size_t positions = act.row_size() / filters;
    Tensor grad(act.shape());
    const double scale = 1.0 / static_cast<double>(positions);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = grad.row(b);
        for (std::size_t f = 0; f < filters; ++f) {
            const double g = profile_grad[f * batch + b] * scale;
            for (std::size_t q = 0; q < positions; ++q) row[q * filters + f] = g;
        }
    }
    return grad;
}

std::vector<ActivationProfile> extract_activation_profiles(const Network& net,
                                                           const Tensor& clustering_batch,
                                                           std::size_t layer) {
    if (layer >= net.layer_count() || !net.layer(layer).parameterized()) {
        throw NetworkError(layer, "layer has no filter activations to profile");
    }
    if (clustering_batch.rank() == 0 || clustering_batch.dim(0) == 0) {
        throw std::invalid_argument("clustering batch is empty");
    }
    const ForwardResult fw = forward(net, clustering_batch);
    const Tensor m = profile_matrix(net, fw.record, layer);
    const std::size_t batch = m.dim(1);
    std::vector<ActivationProfile> out;
    out.reserve(m.dim(0));
    for (std::size_t f = 0; f < m.dim(0); ++f) {
        auto row = m.row(f);
        out.push_back({layer, f, std::vector<double>(row.begin(), row.begin() + batch)});
    }
    return out;
}

void standardize_profiles(std::vector<std::vector<double>>& profiles) {
    for (auto& p : profiles) {
        if (p.empty()) continue;
        const double n = static_cast<double>(p.size());
        const double mean = std::accumulate(p.begin(), p.end(), 0.0) / n;
        double var = 0.0;
        for (double v : p) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / n);
        for (double& v : p) v = sd > 0.0 ? (v - mean) / sd : 0.0;
    }
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

// Relabels clusters so ids follow the order of each cluster's lowest member.
std::vector<std::size_t> canonical_labels(std::span<const std::size_t> labels) {
    std::vector<std::size_t> map(labels.size() + 1, std::numeric_limits<std::size_t>::max());
    std::vector<std::size_t> out(labels.size());
    std::size_t next = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= map.size()) map.resize(labels[i] + 1, std::numeric_limits<std::size_t>::max());
        if (map[labels[i]] == std::numeric_limits<std::size_t>::max()) map[labels[i]] = next++;
        out[i] = map[labels[i]];
    }
    return out;
}

std::vector<std::vector<double>> plus_plus_seeds(std::span<const std::vector<double>> points,
                                                 std::size_t k, Rng& rng) {
    const std::size_t n = points.size();
    std::vector<std::vector<double>> centers;
    std::vector<bool> chosen(n, false);
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    centers.push_back(points[first]);
    chosen[first] = true;
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], centers[0]);
    while (centers.size() < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t pick = n;
        if (total > 0.0) {
            double r = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (std::size_t i = 0; i < n; ++i) {
                if (d2[i] <= 0.0) continue;
                pick = i;
                r -= d2[i];
                if (r < 0.0) break;
            }
        } else {
            // Every remaining point coincides with a center.
            for (std::size_t i = 0; i < n; ++i) {
                if (!chosen[i]) {
                    pick = i;
                    break;
                }
            }
        }
        chosen[pick] = true;
        centers.push_back(points[pick]);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], centers.back()));
    }
    return centers;
}

void recompute_centers(std::span<const std::vector<double>> points,
                       const std::vector<std::size_t>& labels,
                       std::vector<std::vector<double>>& centers) {
    const std::size_t dim = points[0].size();
    std::vector<std::size_t> counts(centers.size(), 0);
    for (auto& c : centers) std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        ++counts[labels[i]];
        for (std::size_t d = 0; d < dim; ++d) centers[labels[i]][d] += points[i][d];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
        for (double& v : centers[c]) v /= static_cast<double>(counts[c]);
    }
}

// Moves the point farthest from its own centroid into each empty cluster,
// drawing only from clusters with at least two members.
void repair_empty_clusters(std::span<const std::vector<double>> points,
                           std::vector<std::size_t>& labels,
                           std::vector<std::vector<double>>& centers) {
    const std::size_t k = centers.size();
    for (;;) {
        std::vector<std::size_t> counts(k, 0);
        for (auto l : labels) ++counts[l];
        const auto empty = std::find(counts.begin(), counts.end(), 0);
        if (empty == counts.end()) return;
        {
            const std::size_t dim = points[0].size();
            std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
            for (std::size_t i = 0; i < points.size(); ++i) {
                for (std::size_t d = 0; d < dim; ++d) sums[labels[i]][d] += points[i][d];
            }
            for (std::size_t c = 0; c < k; ++c) {
                if (counts[c] == 0) continue;
                for (std::size_t d = 0; d < dim; ++d) centers[c][d] = sums[c][d] / static_cast<double>(counts[c]);
            }
        }
        std::size_t far = points.size();
        double best = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (counts[labels[i]] < 2) continue;
            const double d = sq_dist(points[i], centers[labels[i]]);
            if (d > best) {
                best = d;
                far = i;
            }
        }
        const std::size_t target = static_cast<std::size_t>(empty - counts.begin());
        labels[far] = target;
        centers[target] = points[far];
    }
}

}  // namespace

double clustering_sse(std::span<const std::vector<double>> points,
                      std::span<const std::size_t> assignment) {
    if (points.empty()) return 0.0;
    const std::size_t k = *std::max_element(assignment.begin(), assignment.end()) + 1;
    std::vector<std::vector<double>> centers(k, std::vector<double>(points[0].size(), 0.0));
    std::vector<std::size_t> labels(assignment.begin(), assignment.end());
    recompute_centers(points, labels, centers);
    double sse = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) sse += sq_dist(points[i], centers[labels[i]]);
    return sse;
}

KMeansResult kmeans_single(std::span<const std::vector<double>> points, std::size_t k, Rng& rng,
                           std::size_t max_iterations) {
    const std::size_t n = points.size();
    if (k == 0 || k > n) {
        throw std::invalid_argument(fmt::format("cannot form {} clusters from {} points", k, n));
    }
    auto centers = plus_plus_seeds(points, k, rng);
    std::vector<std::size_t> labels(n, std::numeric_limits<std::size_t>::max());
    KMeansResult result;
    for (std::size_t iter = 0; iter < std::max<std::size_t>(1, max_iterations); ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = sq_dist(points[i], centers[c]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (labels[i] != best) {
                labels[i] = best;
                changed = true;
            }
        }
        repair_empty_clusters(points, labels, centers);
        recompute_centers(points, labels, centers);
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) sse += sq_dist(points[i], centers[labels[i]]);
        result.sse_trace.push_back(sse);
        if (!changed) break;
    }
    result.sse = result.sse_trace.back();
    result.assignment = canonical_labels(labels);
    return result;
}

KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k,
                    std::size_t restarts, std::uint64_t seed, std::size_t max_iterations) {
    if (restarts == 0) throw std::invalid_argument("k-means needs at least one restart");
    if (k == 0 || k > points.size()) {
        throw std::invalid_argument(fmt::format("cannot form {} clusters from {} points", k, points.size()));
    }
    const std::size_t dim = points[0].size();
    for (const auto& p : points) {
        if (p.size() != dim) throw std::invalid_argument("profiles differ in length");
    }
    KMeansResult best;
    for (std::size_t r = 0; r < restarts; ++r) {
        Rng rng = make_rng(seed, "kmeans", r);
        KMeansResult run = kmeans_single(points, k, rng, max_iterations);
        run.restart = r;
        if (r == 0 || run.sse < best.sse) best = std::move(run);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Group assignments

LayerGroups LayerGroups::from_labels(std::size_t layer, std::span<const std::size_t> labels) {
    LayerGroups g;
    g.layer = layer;
    g.filter_count = labels.size();
    g.group_of = canonical_labels(labels);
    const std::size_t groups =
        labels.empty() ? 0 : *std::max_element(g.group_of.begin(), g.group_of.end()) + 1;
    g.members.assign(groups, {});
    for (std::size_t f = 0; f < labels.size(); ++f) g.members[g.group_of[f]].push_back(f);
    return g;
}

LayerGroups LayerGroups::singletons(std::size_t layer, std::size_t filter_count) {
    std::vector<std::size_t> labels(filter_count);
    std::iota(labels.begin(), labels.end(), std::size_t{0});
    return from_labels(layer, labels);
}

const LayerGroups* GroupAssignment::find(std::size_t layer) const {
    for (const auto& g : layers) {
        if (g.layer == layer) return &g;
    }
    return nullptr;
}

bool GroupAssignment::is_partition() const {
    for (const auto& g : layers) {
        if (g.group_count() < 1 || g.group_count() > g.filter_count) return false;
        if (g.group_of.size() != g.filter_count) return false;
        std::vector<int> seen(g.filter_count, 0);
        for (std::size_t id = 0; id < g.members.size(); ++id) {
            if (g.members[id].empty()) return false;
            for (auto f : g.members[id]) {
                if (f >= g.filter_count || seen[f]++ != 0 || g.group_of[f] != id) return false;
            }
        }
        if (std::find(seen.begin(), seen.end(), 0) != seen.end()) return false;
    }
    return true;
}

GroupAssignment GroupAssignment::singletons(const Network& net) {
    GroupAssignment a;
    for (auto l : net.clusterable_layers()) a.layers.push_back(LayerGroups::singletons(l, net.layer(l).filters));
    return a;
}

InvalidGroupCount::InvalidGroupCount(std::size_t layer, std::size_t count, std::size_t filters)
    : std::invalid_argument(
          fmt::format("layer {}: {} groups is impossible with {} filters", layer, count, filters)),
      layer_(layer) {}

GroupAssignment build_group_assignment(const Network& net, std::span<const std::size_t> counts,
                                       const Tensor& clustering_batch,
                                       const ClusteringOptions& options) {
    const auto layers = net.clusterable_layers();
    if (counts.size() != layers.size()) {
        throw std::invalid_argument(fmt::format("expected {} group counts, got {}", layers.size(),
                                                counts.size()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::size_t nf = net.layer(layers[i]).filters;
        if (counts[i] < 1 || counts[i] > nf) throw InvalidGroupCount(layers[i], counts[i], nf);
    }

    GroupAssignment out;
    ForwardResult fw;
    bool have_forward = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::size_t layer = layers[i];
        const std::size_t nf = net.layer(layer).filters;
        if (counts[i] == nf) {
            out.layers.push_back(LayerGroups::singletons(layer, nf));
            continue;
        }
        if (counts[i] == 1) {
            out.layers.push_back(LayerGroups::from_labels(layer, std::vector<std::size_t>(nf, 0)));
            continue;
        }
        if (!have_forward) {
            fw = forward(net, clustering_batch);
            have_forward = true;
        }
        const Tensor m = profile_matrix(net, fw.record, layer);
        std::vector<std::vector<double>> points;
        for (std::size_t f = 0; f < nf; ++f) {
            auto row = m.row(f);
            points.emplace_back(row.begin(), row.end());
        }
        if (options.standardize) standardize_profiles(points);
        const auto result = kmeans(points, counts[i], options.restarts,
                                   derive_seed(options.seed, "layer", layer), options.max_iterations);
        out.layers.push_back(LayerGroups::from_labels(layer, result.assignment));
    }
    return out;
}

std::string serialize_assignment(const GroupAssignment& assignment) {
    std::string out = "gnak-groups 1\n";
    for (const auto& g : assignment.layers) {
        out += fmt::format("layer {} filters {} groups {}\n", g.layer, g.filter_count, g.group_count());
        for (std::size_t id = 0; id < g.members.size(); ++id) {
            out += fmt::format("group {}", id);
            for (auto f : g.members[id]) out += fmt::format(" {}", f);
            out += '\n';
        }
    }
    return out;
}

GroupAssignment parse_assignment(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& why) {
        return std::runtime_error(fmt::format("group file line {}: {}", line_no, why));
    };
    if (!std::getline(in, line) || line != "gnak-groups 1") {
        line_no = 1;
        throw fail("expected header 'gnak-groups 1'");
    }
    ++line_no;
    GroupAssignment out;
    std::size_t expected_groups = 0;
    std::vector<std::size_t> labels;
    std::vector<bool> assigned;
    auto finish = [&]() {
        if (out.layers.empty()) return;
        auto& g = out.layers.back();
        if (g.members.size() != expected_groups) throw fail("group count does not match layer header");
        if (std::find(assigned.begin(), assigned.end(), false) != assigned.end()) {
            throw fail(fmt::format("layer {} leaves filters unassigned", g.layer));
        }
        g = LayerGroups::from_labels(g.layer, labels);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string key;
        fields >> key;
        if (key == "layer") {
            finish();
            LayerGroups g;
            std::string k1, k2;
            if (!(fields >> g.layer >> k1 >> g.filter_count >> k2 >> expected_groups) ||
                k1 != "filters" || k2 != "groups") {
                throw fail("malformed layer line");
            }
            labels.assign(g.filter_count, 0);
            assigned.assign(g.filter_count, false);
            out.layers.push_back(std::move(g));
        } else if (key == "group") {
            if (out.layers.empty()) throw fail("group before any layer");
            auto& g = out.layers.back();
            std::size_t id = 0;
            if (!(fields >> id) || id != g.members.size()) throw fail("group ids must be consecutive");
            std::vector<std::size_t> members;
            std::size_t f = 0;
            while (fields >> f) {
                if (f >= g.filter_count || assigned[f]) throw fail(fmt::format("bad member {}", f));
                assigned[f] = true;
                labels[f] = id;
                members.push_back(f);
            }
            if (members.empty()) throw fail("empty group");
            g.members.push_back(std::move(members));
        } else {
            throw fail(fmt::format("unknown key '{}'", key));
        }
    }
    finish();
    return out;
}

}  // namespace gnak
