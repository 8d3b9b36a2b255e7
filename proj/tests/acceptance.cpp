// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria. Pass criterion numbers as arguments to run a
// subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gnak/checkpoint.hpp"
#include "gnak/clustering.hpp"
#include "gnak/controller.hpp"
#include "gnak/dataset.hpp"
#include "gnak/experiment.hpp"
#include "gnak/losses.hpp"
#include "gnak/network.hpp"
#include "gnak/trainer.hpp"
#include "oracles.hpp"

using namespace gnak;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / fmt::format("gnak_acceptance_{}", name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_text(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream s;
    s << f.rdbuf();
    return s.str();
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

struct GradCase {
    Network net;
    Tensor batch;
    std::vector<std::size_t> labels;
    GroupAssignment groups;
};

GradCase random_case(std::uint64_t seed, std::size_t batch, std::size_t classes) {
    Rng rng = make_rng(seed, "grad-case");
    GradCase c;
    std::vector<std::size_t> in_shape;
    if (seed % 2 == 0) {
        in_shape = {5};
        c.net = NetworkBuilder(in_shape).dense(6).relu().dense(5).relu().dense(classes).build();
    } else {
        in_shape = {5, 5, 2};
        c.net = NetworkBuilder(in_shape).conv2d(3, 1, 4).relu().dense(5).relu().dense(classes).build();
    }
    c.net.initialize(rng);
    std::normal_distribution<double> bias(0.0, 0.3);
    for (auto& p : c.net.params())
        for (double& b : p.bias.values()) b = bias(rng);
    std::vector<std::size_t> shape{batch};
    shape.insert(shape.end(), in_shape.begin(), in_shape.end());
    c.batch = Tensor(shape);
    std::normal_distribution<double> x(0.0, 1.0);
    for (double& v : c.batch.values()) v = x(rng);
    for (std::size_t b = 0; b < batch; ++b) c.labels.push_back(b % classes);
    for (auto l : c.net.clusterable_layers()) {
        std::vector<std::size_t> lab(c.net.layer(l).filters);
        for (std::size_t f = 0; f < lab.size(); ++f) lab[f] = f % 2;
        c.groups.layers.push_back(LayerGroups::from_labels(l, lab));
    }
    return c;
}

// Largest gap between consecutive positive hinge breakpoints; the margin sits
// in its middle so that every hinge is at least half the gap from its kink.
std::pair<double, double> margin_between(std::vector<double> breakpoints) {
    std::sort(breakpoints.begin(), breakpoints.end());
    std::vector<double> pts{0.0};
    for (double b : breakpoints)
        if (b > 0.0) pts.push_back(b);
    double best_gap = 0.0, margin = 1.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        const double gap = pts[i] - pts[i - 1];
        if (gap > best_gap) {
            best_gap = gap;
            margin = 0.5 * (pts[i] + pts[i - 1]);
        }
    }
    return {margin, 0.5 * best_gap};
}

Tensor penultimate(const Network& net, const Tensor& batch) {
    const auto fw = forward(net, batch);
    const Tensor& e = fw.record.outputs[net.head_index() - 1];
    return e.reshaped({e.dim(0), e.row_size()});
}

Verdict criterion_gradients() {
    const auto t0 = Clock::now();
    const double kink = 1e-4;
    const std::vector<std::string> names{"cross-entropy", "triplet", "margin", "intra", "inter", "total"};
    std::map<std::string, double> worst;
    std::map<std::string, std::size_t> nets;
    for (const auto& n : names) worst[n] = 0.0;

    for (const auto& name : names) {
        std::uint64_t seed = 0;
        while (nets[name] < 20 && seed < 500) {
            const bool one_shot = name == "margin";
            GradCase c = random_case(seed++ * 7919 + name.size(), one_shot ? 3 : 6, 3);
            const auto fw = forward(c.net, c.batch);
            if (oracle::min_relu_margin(c.net, fw.record) < kink) continue;

            LossWeights w;
            w.alpha_intra = 0.3;
            w.beta_inter = 0.05;
            w.gamma_triplet = 0.7;
            ComponentScales scales{0.0, 0.0, 0.0, 0.0};
            const Tensor emb = penultimate(c.net, c.batch);
            const std::size_t bsz = c.labels.size();
            if (name == "triplet" || name == "total") {
                w.metric = MetricKind::triplet;
                std::vector<double> bp;
                for (std::size_t a = 0; a < bsz; ++a)
                    for (std::size_t p = 0; p < bsz; ++p)
                        for (std::size_t q = 0; q < bsz; ++q)
                            if (a != p && c.labels[a] == c.labels[p] && c.labels[q] != c.labels[a])
                                bp.push_back(oracle::sq_dist(emb.row(a), emb.row(q)) -
                                             oracle::sq_dist(emb.row(a), emb.row(p)));
                const auto [m, dist] = margin_between(bp);
                if (dist < kink) continue;
                w.margin = m;
            } else if (name == "margin") {
                w.metric = MetricKind::margin;
                std::vector<double> bp;
                for (std::size_t a = 0; a < bsz; ++a)
                    for (std::size_t b = a + 1; b < bsz; ++b)
                        if (c.labels[a] != c.labels[b]) bp.push_back(oracle::sq_dist(emb.row(a), emb.row(b)));
                const auto [m, dist] = margin_between(bp);
                if (dist < kink) continue;
                w.margin = m;
            }
            if (name == "intra" || name == "total") {
                bool near_kink = false;
                for (const auto& g : c.groups.layers) {
                    const Tensor prof = profile_matrix(c.net, fw.record, g.layer);
                    for (const auto& mem : g.members)
                        for (std::size_t i = 0; i < mem.size(); ++i)
                            for (std::size_t j = i + 1; j < mem.size(); ++j)
                                if (std::sqrt(oracle::sq_dist(prof.row(mem[i]), prof.row(mem[j]))) < 1e-3)
                                    near_kink = true;
                }
                if (near_kink) continue;
            }
            if (name == "cross-entropy") scales.class_loss = 1.0;
            if (name == "triplet" || name == "margin") scales.metric = 1.0;
            if (name == "intra") scales.intra = 1.0;
            if (name == "inter") scales.inter = 1.0;
            if (name == "total") scales = ComponentScales::from(w);

            LossFunction fn = [&](const Network& net, const Tensor& batch, GradientSet* grads) {
                auto r = evaluate_objective(net, batch, c.labels, c.groups, w, scales,
                                            EmbeddingSource::penultimate, grads != nullptr);
                if (grads) *grads = std::move(r.grads);
                return r.total;
            };
            // The hinge and norm kinks were cleared above; a component that is
            // identically zero at this point says nothing about its gradient.
            if (fn(c.net, c.batch, nullptr) == 0.0) continue;
            worst[name] = std::max(worst[name], check_gradients(c.net, fn, c.batch, 1e-5));
            ++nets[name];
        }
    }
    bool pass = seconds_since(t0) < 60.0;
    std::string detail;
    for (const auto& n : names) {
        pass = pass && nets[n] == 20 && worst[n] < 1e-4;
        detail += fmt::format("{}={:.2e}/{} ", n, worst[n], nets[n]);
    }
    detail += fmt::format("time={:.1f}s", seconds_since(t0));
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// shared pieces for the fine-tuning criteria

struct SmallTransfer {
    TransferTask task;
    Network net;
    KShotSplit kshot;
    HeldoutSplit heldout;
    Tensor clustering_batch;
};

SmallTransfer small_transfer(std::uint64_t seed, std::size_t k) {
    SmallTransfer s;
    s.task = make_synthetic_transfer_task(seed);
    Rng init = make_rng(seed, "init");
    s.net = build_architecture("conv-small", s.task.source.sample_shape(), s.task.source.classes, init);
    PretrainConfig pc;
    pc.iterations = 300;
    s.net = pretrain(std::move(s.net), s.task.source, pc, seed);
    Rng head = make_rng(seed, "head");
    s.net.replace_head(s.task.target.classes, head);
    s.kshot = sample_kshot(s.task.target, k, derive_seed(seed, "sampling"));
    s.heldout = split_validation(s.kshot.heldout, 0.2, derive_seed(seed, "validation"));
    s.clustering_batch = take_per_class(s.task.source, 20).images;
    return s;
}

// ---------------------------------------------------------------------------
// 2. shared-delta invariant

Verdict criterion_shared_delta() {
    const auto t0 = Clock::now();
    SmallTransfer s = small_transfer(11, 5);
    ClusteringOptions co;
    co.seed = 11;
    const auto counts = resolve_group_counts("quarter", s.net);
    const GroupAssignment groups = build_group_assignment(s.net, counts, s.clustering_batch, co);

    FineTuneConfig cfg;
    cfg.iterations = 500;
    cfg.schedule = {0.01, 0.001, 250};
    cfg.weights.alpha_intra = 1e-3;
    cfg.weights.beta_inter = 1e-8;
    cfg.weights.gamma_triplet = 1e-3;
    Network start = s.net;
    snap_grouped_parameters(start, groups);
    const FineTuneResult res = fine_tune(s.net, groups, s.kshot.kshot, s.heldout.validation, cfg);

    std::size_t pairs = 0, mismatches = 0, moved = 0;
    auto same_bits = [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; };
    for (const auto& g : groups.layers) {
        const auto& p0 = start.params(g.layer);
        const auto& p1 = res.network.params(g.layer);
        const std::size_t fan = p0.weight.row_size();
        for (const auto& mem : g.members)
            for (std::size_t a = 0; a < mem.size(); ++a)
                for (std::size_t b = a + 1; b < mem.size(); ++b) {
                    for (std::size_t j = 0; j <= fan; ++j) {
                        const bool is_bias = j == fan;
                        if (is_bias && p0.bias.empty()) continue;
                        const double x0 = is_bias ? p0.bias[mem[a]] : p0.weight.row(mem[a])[j];
                        const double y0 = is_bias ? p0.bias[mem[b]] : p0.weight.row(mem[b])[j];
                        const double x1 = is_bias ? p1.bias[mem[a]] : p1.weight.row(mem[a])[j];
                        const double y1 = is_bias ? p1.bias[mem[b]] : p1.weight.row(mem[b])[j];
                        ++pairs;
                        if (!same_bits(x1 - y1, x0 - y0)) ++mismatches;
                        if (x1 != x0) ++moved;
                    }
                }
    }
    const double t = seconds_since(t0);
    const bool pass = mismatches == 0 && pairs > 0 && moved > 0 && res.trace.size() == 500 && t < 60.0;
    return {pass, fmt::format("{} member pairs x coordinates checked, {} mismatches, {} moved, time={:.1f}s", pairs,
                              mismatches, moved, t)};
}

// ---------------------------------------------------------------------------
// 3. baseline reduction

Verdict criterion_baseline_reduction() {
    SmallTransfer s = small_transfer(23, 5);
    FineTuneConfig cfg;
    cfg.iterations = 300;
    cfg.schedule = {0.05, 0.005, 150};
    cfg.weights.alpha_intra = cfg.weights.beta_inter = cfg.weights.gamma_triplet = 0.0;
    const auto grouped = fine_tune(s.net, GroupAssignment::singletons(s.net), s.kshot.kshot, s.heldout.validation, cfg);
    const auto plain = plain_fine_tune(s.net, s.kshot.kshot, s.heldout.validation, cfg);
    std::ostringstream a, b;
    write_loss_trace_csv(a, grouped.trace);
    write_loss_trace_csv(b, plain.trace);
    const bool trace_eq = grouped.trace == plain.trace && a.str() == b.str();
    const bool net_eq = grouped.network == plain.network;
    return {trace_eq && net_eq && grouped.trace.size() == 300,
            fmt::format("{} trace rows, traces {}, parameters {}", grouped.trace.size(),
                        trace_eq ? "identical" : "differ", net_eq ? "identical" : "differ")};
}

// ---------------------------------------------------------------------------
// 4. k-means against brute force

Verdict criterion_kmeans() {
    std::size_t separated_ok = 0, separated_total = 0, random_ok = 0, random_total = 0;
    Rng rng = make_rng(4, "kmeans-oracle");
    std::uniform_int_distribution<std::size_t> kdist(1, 3);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_int_distribution<std::size_t> dims(1, 4);

    while (separated_total < 200) {
        const std::size_t k = kdist(rng);
        std::uniform_int_distribution<std::size_t> ndist(std::max<std::size_t>(k, 2), 8);
        const std::size_t n = ndist(rng), d = dims(rng);
        // Centers far apart, points within a small radius of their center.
        std::vector<std::vector<double>> centers(k, std::vector<double>(d));
        for (auto& c : centers)
            for (auto& v : c) v = 20.0 * unit(rng);
        oracle::Points pts(n, std::vector<double>(d));
        std::vector<std::size_t> truth(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = i < k ? i : std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
            for (std::size_t j = 0; j < d; ++j) pts[i][j] = centers[truth[i]][j] + unit(rng);
        }
        // separation ratio: closest pair of cluster points across clusters over
        // the widest within-cluster pair
        double between = INFINITY, within = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dd = std::sqrt(oracle::sq_dist(pts[i], pts[j]));
                if (truth[i] == truth[j])
                    within = std::max(within, dd);
                else
                    between = std::min(between, dd);
            }
        if (k > 1 && within > 0.0 && between / within < 4.0) continue;
        ++separated_total;
        const auto best = oracle::brute_force_kmeans(pts, k);
        const auto km = kmeans(pts, k, 10, derive_seed(4, "instance", separated_total));
        if (oracle::canonical(km.assignment) == best.labels) ++separated_ok;
    }
    for (; random_total < 200; ++random_total) {
        const std::size_t k = kdist(rng);
        std::uniform_int_distribution<std::size_t> ndist(std::max<std::size_t>(k, 2), 8);
        const std::size_t n = ndist(rng), d = dims(rng);
        oracle::Points pts(n, std::vector<double>(d));
        for (auto& p : pts)
            for (auto& v : p) v = unit(rng);
        const auto best = oracle::brute_force_kmeans(pts, k);
        const auto km = kmeans(pts, k, 10, derive_seed(4, "random", random_total));
        const double sse = oracle::partition_sse(pts, km.assignment);
        if (sse <= 1.05 * best.sse + 1e-12) ++random_ok;
    }
    const bool pass = separated_ok == separated_total && random_ok * 100 >= 95 * random_total;
    return {pass, fmt::format("separated {}/{} exact, unstructured {}/{} within 5%", separated_ok, separated_total,
                              random_ok, random_total)};
}

// ---------------------------------------------------------------------------
// 5. REINFORCE estimate against the enumerated gradient

struct ReinforceCheck {
    std::size_t sequences = 0, coords = 0;
    double p_target = 0.0, worst = 0.0;
};

// Reward concentrated on one sequence. The policy is first moved by exact
// gradient ascent until that sequence is likely enough for 100 000 samples to
// resolve every coordinate to 2%.
ReinforceCheck reinforce_check(const ActionSpace& space, const std::vector<std::size_t>& target,
                               std::uint64_t seed) {
    Rng init = make_rng(seed, "policy");
    PolicyNetwork policy(space.size(), 6, init, 0.3);
    const auto seqs = oracle::all_sequences(space.size(), space.horizon());
    std::vector<double> rewards(seqs.size(), 0.0);
    for (std::size_t s = 0; s < seqs.size(); ++s)
        if (seqs[s] == target) rewards[s] = 1.0;
    for (int step = 0; step < 200 && std::exp(policy.log_probability(space, target)) < 0.3; ++step) {
        auto g = oracle::exact_policy_gradient(policy, space, seqs, rewards);
        auto theta = policy.params().flatten();
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += 2.0 * g[i];
        policy.params().unflatten(theta);
    }

    ReinforceCheck out;
    out.sequences = seqs.size();
    out.p_target = std::exp(policy.log_probability(space, target));
    const auto exact = oracle::exact_policy_gradient(policy, space, seqs, rewards);
    Rng rng = make_rng(seed, "episodes");
    std::vector<Episode> episodes(100000);
    for (auto& e : episodes) {
        e = sample_action_sequence(policy, space, rng);
        e.reward = rewards[std::find(seqs.begin(), seqs.end(), e.actions) - seqs.begin()];
        e.has_reward = true;
    }
    const auto estimate = policy_gradient_estimate(policy, space, episodes).flatten();
    for (std::size_t i = 0; i < exact.size(); ++i) {
        if (std::abs(exact[i]) < 1e-9 && std::abs(estimate[i]) < 1e-9) continue;
        out.worst = std::max(out.worst, std::abs(estimate[i] - exact[i]) / std::abs(exact[i]));
        ++out.coords;
    }
    return out;
}

Verdict criterion_reinforce() {
    const auto t0 = Clock::now();
    // Three actions {1, 2, 4} groups per layer; two layers give 9 sequences,
    // three layers 27.
    const auto two = reinforce_check(ActionSpace::powers_of_two({4, 4}), {2, 0}, 5);
    const auto three = reinforce_check(ActionSpace::powers_of_two({4, 4, 4}), {2, 0, 1}, 5);
    std::string detail;
    for (const auto* c : {&two, &three})
        detail += fmt::format("{} sequences: P(target)={:.3f}, {} coordinates, worst relative error {:.4f}; ",
                              c->sequences, c->p_target, c->coords, c->worst);
    detail += fmt::format("time={:.1f}s", seconds_since(t0));
    return {two.worst < 0.02 && three.worst < 0.02, detail};
}

// ---------------------------------------------------------------------------
// 6. controller convergence

class TargetSequenceEnv : public SearchEnvironment {
public:
    TargetSequenceEnv(std::vector<std::size_t> filters, std::vector<std::size_t> target)
        : filters_(std::move(filters)), target_(std::move(target)) {}
    std::vector<std::size_t> filter_counts() const override { return filters_; }
    double accuracy(std::span<const std::size_t> counts) override {
        double hit = 0.0;
        for (std::size_t i = 0; i < counts.size(); ++i) hit += counts[i] == target_[i] ? 1.0 : 0.0;
        return hit / static_cast<double>(counts.size());
    }

private:
    std::vector<std::size_t> filters_, target_;
};

Verdict criterion_controller() {
    const auto t0 = Clock::now();
    const std::vector<std::size_t> filters{8, 8, 8}, target{2, 8, 1};
    std::string detail;
    bool pass = true;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        TargetSequenceEnv env(filters, target);
        SearchConfig cfg;
        cfg.budget = 2000;
        cfg.episodes_per_update = 5;
        cfg.policy_lr = 0.5;
        cfg.init_scale = 0.5;
        cfg.baseline = true;
        cfg.seed = seed;
        const auto res = search(env, cfg);
        const ActionSpace space = ActionSpace::powers_of_two(filters);
        std::vector<std::size_t> actions;
        for (auto c : target) actions.push_back(space.action_for_count(c));
        const double p = std::exp(res.policy.log_probability(space, actions));
        pass = pass && p >= 0.9 && res.best_reward == 1.0;
        detail += fmt::format("seed{}={:.3f} ", seed, p);
    }
    const double t = seconds_since(t0);
    detail += fmt::format("time={:.1f}s", t);
    return {pass && t < 120.0, detail};
}

// ---------------------------------------------------------------------------
// 7 and 8. desk-scale tables

Settings settings_from(const std::string& config, const fs::path& out) {
    Settings s = default_settings();
    merge_config_file(s, fs::path(GNAK_SOURCE_DIR) / "configs" / config);
    set_setting(s, "out", out.string());
    set_setting(s, "threads", "1");
    return s;
}

const MetricsRow* find_aggregate(const ExperimentOutput& out, const std::string& method, std::size_t k,
                                 const std::string& layers) {
    for (const auto& r : out.rows)
        if (r.kind == "aggregate" && r.method == method && r.k == k && r.cluster_layers == layers) return &r;
    return nullptr;
}

Verdict criterion_kshot_sweep() {
    const auto t0 = Clock::now();
    const auto cfg = ExperimentConfig::from_settings(settings_from("kshot_sweep.ini", scratch_dir("kshot_sweep")));
    const auto out = run_experiment(cfg);
    bool pass = cfg.runs == 10;
    std::string detail;
    for (std::size_t k : {1, 5, 10}) {
        const auto* plain = find_aggregate(out, "plain", k, "all");
        const auto* gna = find_aggregate(out, "gna-none", k, "all");
        if (!plain || !gna) return {false, fmt::format("missing aggregate rows for k={}", k)};
        const bool mean_ok = gna->accuracy >= plain->accuracy;
        const bool std_ok = k == 1 || gna->std_dev <= plain->std_dev;
        pass = pass && mean_ok && std_ok && plain->runs == 10 && gna->runs == 10;
        detail += fmt::format("k={}: mean {:.4f} vs {:.4f}, std {:.4f} vs {:.4f}; ", k, gna->accuracy, plain->accuracy,
                              gna->std_dev, plain->std_dev);
    }
    const double t = seconds_since(t0);
    detail += fmt::format("(grouped vs plain) time={:.1f}s", t);
    return {pass && t < 600.0, detail};
}

Verdict criterion_layer_prefixes() {
    const auto t0 = Clock::now();
    const auto cfg = ExperimentConfig::from_settings(settings_from("layer_prefixes.ini", scratch_dir("layer_prefixes")));
    const auto out = run_experiment(cfg);
    Rng probe_rng(0);
    const Network probe = build_architecture(cfg.architecture, {10, 10, 1}, 5, probe_rng);
    const std::size_t layers = probe.clusterable_layers().size();
    std::vector<const MetricsRow*> aggs;
    for (const auto& r : out.rows)
        if (r.kind == "aggregate") aggs.push_back(&r);
    std::vector<std::string> settings;
    for (const auto* r : aggs) settings.push_back(r->cluster_layers);
    const std::vector<std::string> expected{"1", "3", "5", "7", "all"};
    const MetricsRow* all = nullptr;
    double best = -1.0;
    for (const auto* r : aggs) {
        if (r->cluster_layers == "all")
            all = r;
        else
            best = std::max(best, r->accuracy);
    }
    const bool shape_ok = settings == expected && layers >= 8 && all;
    const bool trend_ok = all && all->accuracy >= best - all->std_dev;
    std::string detail = fmt::format("{} clusterable layers, settings [{}]", layers, fmt::join(settings, ","));
    for (const auto* r : aggs) detail += fmt::format(" {}:{:.4f}", r->cluster_layers, r->accuracy);
    if (all) detail += fmt::format(", best prefix {:.4f}, all {:.4f} +- {:.4f}", best, all->accuracy, all->std_dev);
    detail += fmt::format(", time={:.1f}s", seconds_since(t0));
    return {shape_ok && trend_ok, detail};
}

// ---------------------------------------------------------------------------
// 9. reward rule

class CountingEnv : public SearchEnvironment {
public:
    std::vector<std::size_t> filter_counts() const override { return {4, 8}; }
    double accuracy(std::span<const std::size_t> counts) override {
        ++calls;
        return 0.1 * static_cast<double>(counts[0]) + 0.05 * static_cast<double>(counts[1]) / 8.0;
    }
    std::size_t calls = 0;
};

Verdict criterion_reward_rule() {
    // Mock environment: every sequence over the shared action space.
    CountingEnv mock;
    const ActionSpace mspace = ActionSpace::powers_of_two(mock.filter_counts());
    std::size_t invalid = 0, valid = 0;
    bool ok = true;
    for (const auto& seq : oracle::all_sequences(mspace.size(), mspace.horizon())) {
        const std::size_t before = mock.calls;
        const double r = compute_reward(seq, mspace, mock);
        const bool is_valid = mspace.valid(0, seq[0]) && mspace.valid(1, seq[1]);
        if (is_valid) {
            ++valid;
            ok = ok && r >= 0.0 && r <= 1.0 && mock.calls == before + 1;
        } else {
            ++invalid;
            ok = ok && r == -1.0 && mock.calls == before;
        }
    }

    // Real environment: no training step for impossible sizes.
    SmallTransfer s = small_transfer(9, 3);
    FineTuneConfig cfg;
    cfg.iterations = 30;
    cfg.weights.alpha_intra = cfg.weights.beta_inter = cfg.weights.gamma_triplet = 0.0;
    FineTuneEnvironment env(s.net, s.clustering_batch, s.kshot.kshot, s.heldout.validation, cfg, {});
    const ActionSpace space = ActionSpace::powers_of_two(env.filter_counts());
    std::size_t real_invalid = 0, real_valid = 0;
    Rng rng = make_rng(9, "reward-rule");
    std::uniform_int_distribution<std::size_t> pick(0, space.size() - 1);
    for (int i = 0; i < 24; ++i) {
        std::vector<std::size_t> seq(space.horizon());
        for (auto& a : seq) a = pick(rng);
        bool is_valid = true;
        for (std::size_t t = 0; t < seq.size(); ++t) is_valid = is_valid && space.valid(t, seq[t]);
        if (!is_valid && real_invalid >= 12) continue;
        const std::size_t steps = env.training_steps();
        const double r = compute_reward(seq, space, env);
        if (is_valid) {
            ++real_valid;
            ok = ok && r >= 0.0 && r <= 1.0 && env.training_steps() >= steps;
        } else {
            ++real_invalid;
            ok = ok && r == -1.0 && env.training_steps() == steps;
        }
    }
    return {ok && invalid > 0 && valid > 0 && real_invalid > 0 && real_valid > 0,
            fmt::format("mock {} invalid / {} valid, fine-tune env {} invalid / {} valid", invalid, valid,
                        real_invalid, real_valid)};
}

// ---------------------------------------------------------------------------
// 10. determinism and formats

Verdict criterion_formats() {
    std::vector<std::string> problems;
    // identical configs, byte-identical CSVs
    Settings s = default_settings();
    for (const auto& [k, v] : std::map<std::string, std::string>{{"task", "ablation-k"},
                                                                 {"runs", "2"},
                                                                 {"k-values", "1,3"},
                                                                 {"groups", "quarter"},
                                                                 {"iterations", "40"},
                                                                 {"pretrain-iterations", "100"},
                                                                 {"source-per-class", "60"},
                                                                 {"target-per-class", "40"}})
        set_setting(s, k, v);
    std::vector<std::string> metrics, traces;
    for (int i = 0; i < 2; ++i) {
        const auto dir = scratch_dir(fmt::format("determinism{}", i));
        set_setting(s, "out", dir.string());
        run_experiment(ExperimentConfig::from_settings(s));
        metrics.push_back(read_text(dir / "metrics.csv"));
        traces.push_back(read_text(dir / "loss_trace.csv"));
    }
    if (metrics[0] != metrics[1] || metrics[0].empty()) problems.push_back("metrics.csv differs");
    if (traces[0] != traces[1] || traces[0].empty()) problems.push_back("loss_trace.csv differs");

    // checkpoint round trip; stored precision is float32
    Rng rng = make_rng(10, "checkpoint");
    Network net = NetworkBuilder({6, 6, 1}).conv2d(3, 1, 3).relu().dense(4).relu().dense(2).build();
    net.initialize(rng);
    for (auto& p : net.params()) {
        for (double& v : p.weight.values()) v = static_cast<float>(v);
        for (double& v : p.bias.values()) v = static_cast<float>(v + 0.25);
    }
    const auto ckpt = scratch_dir("checkpoint") / "net.gnak";
    save_checkpoint(net, ckpt);
    if (!(load_checkpoint(ckpt) == net)) problems.push_back("checkpoint round trip");

    // IDX fixture: three 2x2 images
    const std::vector<std::uint8_t> img{0x00, 0x00, 0x08, 0x03, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2,
                                        0,    51,   102,  255,  1, 2, 3, 4, 10, 20, 30, 40};
    const std::vector<std::uint8_t> lab{0x00, 0x00, 0x08, 0x01, 0, 0, 0, 3, 1, 0, 1};
    const auto dir = scratch_dir("idx");
    write_file_bytes(dir / "img.idx", img);
    write_file_bytes(dir / "lab.idx", lab);
    const Dataset ds = load_idx_dataset(dir / "img.idx", dir / "lab.idx");
    const std::vector<std::size_t> shape{3, 2, 2, 1};
    if (ds.images.shape() != shape || ds.labels != std::vector<std::size_t>{1, 0, 1} ||
        ds.images[1] != 51.0 / 255.0 || ds.images[3] != 1.0)
        problems.push_back("IDX fixture");

    std::string detail = problems.empty() ? "CSV bytes identical across runs, checkpoint bit-exact, IDX (3,2,2,1)"
                                          : fmt::format("problems: {}", fmt::join(problems, "; "));
    return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"gradient correctness", criterion_gradients},
        {"shared-delta invariant", criterion_shared_delta},
        {"baseline reduction", criterion_baseline_reduction},
        {"k-means oracle equivalence", criterion_kmeans},
        {"REINFORCE exactness", criterion_reinforce},
        {"controller convergence", criterion_controller},
        {"k-shot sweep trend", criterion_kshot_sweep},
        {"layer ablation mechanics", criterion_layer_prefixes},
        {"reward rule conformance", criterion_reward_rule},
        {"determinism and formats", criterion_formats},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(i + 1)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, fmt::format("exception: {}", e.what())};
        }
        if (!v.pass) ++failed;
        std::cout << fmt::format("[{}] criterion {}: {} ({})", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first,
                                 v.detail)
                  << std::endl;
    }
    return failed;
}
