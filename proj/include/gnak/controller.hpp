#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "gnak/clustering.hpp"
#include "gnak/dataset.hpp"
#include "gnak/random.hpp"
#include "gnak/trainer.hpp"

namespace gnak {

/// Candidate group counts shared by every layer. Action index a means
/// `counts[a]` groups; it is valid at step l only if counts[a] <= N_f(l).
struct ActionSpace {
    std::vector<std::size_t> counts;         // ascending
    std::vector<std::size_t> filter_counts;  // N_f per clusterable layer

    /// {1, 2, 4, ...} up to each layer's N_f, plus N_f itself.
    static ActionSpace powers_of_two(std::vector<std::size_t> filter_counts);

    std::size_t size() const noexcept { return counts.size(); }
    std::size_t horizon() const noexcept { return filter_counts.size(); }
    std::size_t max_filters() const;
    bool valid(std::size_t step, std::size_t action) const;
    std::size_t action_for_count(std::size_t count) const;
    std::vector<std::size_t> to_counts(std::span<const std::size_t> actions) const;
};

/// Controller input at one step: normalized filter count, then a one-hot of
/// the previous action (all zeros at the first step). Length N_a + 1.
std::vector<double> encode_policy_input(std::size_t filter_count, std::optional<std::size_t> prev_action,
                                        const ActionSpace& space);

/// LSTM weights plus the fully connected output layer. Gate blocks in the
/// 4H rows are ordered input, forget, cell, output.
struct PolicyParams {
    Tensor w_input;   // (4H, N_a + 1)
    Tensor w_hidden;  // (4H, H)
    Tensor bias;      // (4H)
    Tensor w_out;     // (N_a, H)
    Tensor b_out;     // (N_a)

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> values);
    PolicyParams zeros_like() const;
    void add_scaled(const PolicyParams& other, double scale);

    friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

class PolicyNetwork {
public:
    PolicyNetwork() = default;
    /// Uniform(-init_scale, init_scale) weights, zero biases.
    PolicyNetwork(std::size_t actions, std::size_t hidden, Rng& rng, double init_scale = 0.1);

    std::size_t actions() const noexcept { return actions_; }
    std::size_t hidden() const noexcept { return hidden_; }
    std::size_t input_size() const noexcept { return actions_ + 1; }

    PolicyParams& params() noexcept { return params_; }
    const PolicyParams& params() const noexcept { return params_; }

    /// Per-step action distributions when the given actions are fed back
    /// (hidden state starts at zero).
    std::vector<std::vector<double>> step_probabilities(const ActionSpace& space,
                                                        std::span<const std::size_t> actions) const;
    double log_probability(const ActionSpace& space, std::span<const std::size_t> actions) const;
    /// Gradient of sum_t log P(a_t | a_{t-1..1}) by backpropagation through time.
    PolicyParams log_probability_gradient(const ActionSpace& space,
                                          std::span<const std::size_t> actions) const;

    friend bool operator==(const PolicyNetwork&, const PolicyNetwork&) = default;

private:
    std::size_t actions_ = 0;
    std::size_t hidden_ = 0;
    PolicyParams params_;
};

struct Episode {
    std::vector<std::size_t> actions;
    std::vector<double> log_probs;
    double reward = 0.0;
    bool has_reward = false;
};

Episode sample_action_sequence(const PolicyNetwork& policy, const ActionSpace& space, Rng& rng);

/// Something that turns per-layer group counts into a validation accuracy.
/// Implementations must be safe to call from several threads when used with
/// SearchConfig::threads > 1.
class SearchEnvironment {
public:
    virtual ~SearchEnvironment() = default;
    virtual std::vector<std::size_t> filter_counts() const = 0;
    /// Accuracy in [0, 1] for valid counts. May throw FineTuneDiverged.
    virtual double accuracy(std::span<const std::size_t> counts) = 0;
};

/// -1 when any action asks for more groups than its layer has filters (no
/// training happens), otherwise the environment's accuracy; a diverged
/// fine-tune scores 0.
double compute_reward(std::span<const std::size_t> actions, const ActionSpace& space,
                      SearchEnvironment& env);

/// Exponential moving average of rewards, subtracted from R_k when enabled.
struct RewardBaseline {
    bool enabled = false;
    double decay = 0.9;
    double value = 0.0;
    bool primed = false;

    double current() const { return enabled && primed ? value : 0.0; }
    void observe(double mean_reward);
};

/// (1/m) sum_k (R_k - b) sum_t grad log P(a_t | a_{t-1..1}).
PolicyParams policy_gradient_estimate(const PolicyNetwork& policy, const ActionSpace& space,
                                      std::span<const Episode> episodes, double baseline = 0.0);

/// Gradient ascent on the estimate above; updates the baseline afterwards.
void reinforce_update(PolicyNetwork& policy, const ActionSpace& space,
                      std::span<const Episode> episodes, double lr, RewardBaseline* baseline = nullptr);

struct SearchConfig {
    std::size_t budget = 100;            // total episodes
    std::size_t episodes_per_update = 5; // m
    double policy_lr = 0.005;
    std::size_t hidden = 32;
    double init_scale = 0.1;
    bool baseline = false;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct SearchHistoryRow {
    std::size_t episode = 0;
    double reward = 0.0;
    std::vector<std::size_t> counts;
    double best_reward = 0.0;
};

struct SearchResult {
    std::vector<std::size_t> best_counts;
    std::vector<std::size_t> best_actions;
    double best_reward = -1.0;
    std::vector<SearchHistoryRow> history;
    PolicyNetwork policy;
};

SearchResult search(SearchEnvironment& env, const SearchConfig& cfg);
/// Continues from an existing policy.
SearchResult search(SearchEnvironment& env, const SearchConfig& cfg, PolicyNetwork policy);

void write_search_history_csv(std::ostream& out, std::span<const SearchHistoryRow> history);

/// Layer sweep from the ungrouped network: try 2 groups, keep doubling while
/// accuracy strictly improves, otherwise restore the previous count and move on.
std::vector<std::size_t> greedy_search(SearchEnvironment& env);

/// Coordinate search from 2 groups everywhere: per layer, evaluate doubling
/// and halving and take the better one if it beats the incumbent; stop after
/// a sweep with no improvement.
std::vector<std::size_t> manual_search(SearchEnvironment& env);

/// Environment backed by real clustering and fine-tuning.
class FineTuneEnvironment : public SearchEnvironment {
public:
    FineTuneEnvironment(Network pretrained, Tensor clustering_batch, Dataset finetune_data,
                        Dataset validation, FineTuneConfig config, ClusteringOptions clustering);

    std::vector<std::size_t> filter_counts() const override;
    double accuracy(std::span<const std::size_t> counts) override;

    std::size_t evaluations() const;
    std::size_t training_steps() const;

private:
    Network pretrained_;
    Tensor clustering_batch_;
    Dataset finetune_data_;
    Dataset validation_;
    FineTuneConfig config_;
    ClusteringOptions clustering_;
    mutable std::mutex mutex_;
    std::map<std::vector<std::size_t>, double> cache_;
    std::size_t evaluations_ = 0;
    std::size_t training_steps_ = 0;
};

void save_policy(const PolicyNetwork& policy, const std::filesystem::path& path);
PolicyNetwork load_policy(const std::filesystem::path& path);

}  // namespace gnak
