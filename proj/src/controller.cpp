#include "gnak/controller.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <set>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "gnak/checkpoint.hpp"

namespace gnak {

// ---------------------------------------------------------------------------
// Action space

ActionSpace ActionSpace::powers_of_two(std::vector<std::size_t> filter_counts) {
    if (filter_counts.empty()) throw std::invalid_argument("action space needs at least one layer");
    std::set<std::size_t> all;
    for (auto nf : filter_counts) {
        if (nf == 0) throw std::invalid_argument("layer with zero filters");
        for (std::size_t c = 1; c <= nf; c *= 2) all.insert(c);
        all.insert(nf);
    }
    return {{all.begin(), all.end()}, std::move(filter_counts)};
}

std::size_t ActionSpace::max_filters() const {
    return *std::max_element(filter_counts.begin(), filter_counts.end());
}

bool ActionSpace::valid(std::size_t step, std::size_t action) const {
    return action < counts.size() && counts[action] <= filter_counts.at(step);
}

std::size_t ActionSpace::action_for_count(std::size_t count) const {
    const auto it = std::find(counts.begin(), counts.end(), count);
    if (it == counts.end()) throw std::invalid_argument(fmt::format("{} is not a candidate group count", count));
    return static_cast<std::size_t>(it - counts.begin());
}

std::vector<std::size_t> ActionSpace::to_counts(std::span<const std::size_t> actions) const {
    std::vector<std::size_t> out;
    for (auto a : actions) out.push_back(counts.at(a));
    return out;
}

std::vector<double> encode_policy_input(std::size_t filter_count, std::optional<std::size_t> prev_action,
                                        const ActionSpace& space) {
    std::vector<double> x(space.size() + 1, 0.0);
    x[0] = static_cast<double>(filter_count) / static_cast<double>(space.max_filters());
    if (prev_action) x.at(*prev_action + 1) = 1.0;
    return x;
}

// ---------------------------------------------------------------------------
// Policy parameters

std::vector<Tensor*> PolicyParams::tensors() { return {&w_input, &w_hidden, &bias, &w_out, &b_out}; }

std::vector<const Tensor*> PolicyParams::tensors() const {
    return {&w_input, &w_hidden, &bias, &w_out, &b_out};
}

std::vector<double> PolicyParams::flatten() const {
    std::vector<double> out;
    for (const Tensor* t : tensors()) out.insert(out.end(), t->values().begin(), t->values().end());
    return out;
}

void PolicyParams::unflatten(std::span<const double> values) {
    std::size_t pos = 0;
    for (Tensor* t : tensors()) {
        if (pos + t->size() > values.size()) throw std::invalid_argument("parameter vector too short");
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), t->size(), t->values().begin());
        pos += t->size();
    }
    if (pos != values.size()) throw std::invalid_argument("parameter vector too long");
}

PolicyParams PolicyParams::zeros_like() const {
    return {Tensor::zeros_like(w_input), Tensor::zeros_like(w_hidden), Tensor::zeros_like(bias),
            Tensor::zeros_like(w_out), Tensor::zeros_like(b_out)};
}

void PolicyParams::add_scaled(const PolicyParams& other, double scale) {
    auto dst = tensors();
    auto src = other.tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
        for (std::size_t i = 0; i < dst[t]->size(); ++i) (*dst[t])[i] += scale * (*src[t])[i];
    }
}

// ---------------------------------------------------------------------------
// LSTM policy

PolicyNetwork::PolicyNetwork(std::size_t actions, std::size_t hidden, Rng& rng, double init_scale)
    : actions_(actions), hidden_(hidden) {
    if (actions == 0 || hidden == 0) throw std::invalid_argument("policy needs actions and hidden units");
    const std::size_t in = actions + 1;
    params_.w_input = Tensor({4 * hidden, in});
    params_.w_hidden = Tensor({4 * hidden, hidden});
    params_.bias = Tensor({4 * hidden});
    params_.w_out = Tensor({actions, hidden});
    params_.b_out = Tensor({actions});
    std::uniform_real_distribution<double> u(-init_scale, init_scale);
    for (Tensor* t : {&params_.w_input, &params_.w_hidden, &params_.w_out}) {
        for (double& v : t->values()) v = u(rng);
    }
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct StepState {
    std::vector<double> x, h_prev, c_prev;
    std::vector<double> i, f, g, o, c, tanh_c, h;
    std::vector<double> probs;
};

// Runs the LSTM over the horizon, feeding `actions` back as previous actions.
// When `rng` is given, actions are sampled instead and written to `actions`.
std::vector<StepState> unroll(const PolicyNetwork& policy, const ActionSpace& space,
                              std::vector<std::size_t>& actions, Rng* rng) {
    const std::size_t H = policy.hidden(), A = policy.actions(), I = policy.input_size();
    const PolicyParams& p = policy.params();
    if (A != space.size()) throw std::invalid_argument("policy width does not match the action space");
    const std::size_t T = space.horizon();
    if (!rng && actions.size() != T) {
        throw std::invalid_argument(fmt::format("expected {} actions, got {}", T, actions.size()));
    }
    if (rng) actions.assign(T, 0);
    std::vector<StepState> steps(T);
    std::vector<double> h(H, 0.0), c(H, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        StepState& s = steps[t];
        s.x = encode_policy_input(space.filter_counts[t],
                                  t == 0 ? std::nullopt : std::optional<std::size_t>(actions[t - 1]), space);
        s.h_prev = h;
        s.c_prev = c;
        std::vector<double> z(4 * H);
        for (std::size_t r = 0; r < 4 * H; ++r) {
            double acc = p.bias[r];
            for (std::size_t k = 0; k < I; ++k) acc += p.w_input[r * I + k] * s.x[k];
            for (std::size_t k = 0; k < H; ++k) acc += p.w_hidden[r * H + k] * h[k];
            z[r] = acc;
        }
        s.i.resize(H); s.f.resize(H); s.g.resize(H); s.o.resize(H);
        s.c.resize(H); s.tanh_c.resize(H); s.h.resize(H);
        for (std::size_t k = 0; k < H; ++k) {
            s.i[k] = sigmoid(z[k]);
            s.f[k] = sigmoid(z[H + k]);
            s.g[k] = std::tanh(z[2 * H + k]);
            s.o[k] = sigmoid(z[3 * H + k]);
            s.c[k] = s.f[k] * c[k] + s.i[k] * s.g[k];
            s.tanh_c[k] = std::tanh(s.c[k]);
            s.h[k] = s.o[k] * s.tanh_c[k];
        }
        std::vector<double> logits(A);
        for (std::size_t a = 0; a < A; ++a) {
            double acc = p.b_out[a];
            for (std::size_t k = 0; k < H; ++k) acc += p.w_out[a * H + k] * s.h[k];
            logits[a] = acc;
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        s.probs.resize(A);
        double sum = 0.0;
        for (std::size_t a = 0; a < A; ++a) sum += (s.probs[a] = std::exp(logits[a] - mx));
        for (double& q : s.probs) q /= sum;
        if (rng) {
            std::discrete_distribution<std::size_t> pick(s.probs.begin(), s.probs.end());
            actions[t] = pick(*rng);
        } else if (actions[t] >= A) {
            throw std::invalid_argument(fmt::format("action {} outside the action space", actions[t]));
        }
        h = s.h;
        c = s.c;
    }
    return steps;
}

}  // namespace

std::vector<std::vector<double>> PolicyNetwork::step_probabilities(const ActionSpace& space,
                                                                   std::span<const std::size_t> actions) const {
    std::vector<std::size_t> a(actions.begin(), actions.end());
    std::vector<std::vector<double>> out;
    for (auto& s : unroll(*this, space, a, nullptr)) out.push_back(std::move(s.probs));
    return out;
}

double PolicyNetwork::log_probability(const ActionSpace& space, std::span<const std::size_t> actions) const {
    const auto probs = step_probabilities(space, actions);
    double lp = 0.0;
    for (std::size_t t = 0; t < probs.size(); ++t) lp += std::log(probs[t][actions[t]]);
    return lp;
}

PolicyParams PolicyNetwork::log_probability_gradient(const ActionSpace& space,
                                                     std::span<const std::size_t> actions) const {
    std::vector<std::size_t> a(actions.begin(), actions.end());
    const auto steps = unroll(*this, space, a, nullptr);
    const std::size_t H = hidden_, A = actions_, I = input_size();
    const PolicyParams& p = params_;
    PolicyParams grad = p.zeros_like();
    std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0);
    for (std::size_t t = steps.size(); t-- > 0;) {
        const StepState& s = steps[t];
        std::vector<double> dlogits(A);
        for (std::size_t k = 0; k < A; ++k) dlogits[k] = (k == a[t] ? 1.0 : 0.0) - s.probs[k];
        std::vector<double> dh = dh_next;
        for (std::size_t k = 0; k < A; ++k) {
            grad.b_out[k] += dlogits[k];
            for (std::size_t j = 0; j < H; ++j) {
                grad.w_out[k * H + j] += dlogits[k] * s.h[j];
                dh[j] += p.w_out[k * H + j] * dlogits[k];
            }
        }
        std::vector<double> dz(4 * H);
        std::vector<double> dc_prev(H);
        for (std::size_t k = 0; k < H; ++k) {
            const double d_o = dh[k] * s.tanh_c[k];
            const double dc = dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
            const double d_i = dc * s.g[k];
            const double d_g = dc * s.i[k];
            const double d_f = dc * s.c_prev[k];
            dc_prev[k] = dc * s.f[k];
            dz[k] = d_i * s.i[k] * (1.0 - s.i[k]);
            dz[H + k] = d_f * s.f[k] * (1.0 - s.f[k]);
            dz[2 * H + k] = d_g * (1.0 - s.g[k] * s.g[k]);
            dz[3 * H + k] = d_o * s.o[k] * (1.0 - s.o[k]);
        }
        std::vector<double> dh_prev(H, 0.0);
        for (std::size_t r = 0; r < 4 * H; ++r) {
            grad.bias[r] += dz[r];
            for (std::size_t k = 0; k < I; ++k) grad.w_input[r * I + k] += dz[r] * s.x[k];
            for (std::size_t k = 0; k < H; ++k) {
                grad.w_hidden[r * H + k] += dz[r] * s.h_prev[k];
                dh_prev[k] += p.w_hidden[r * H + k] * dz[r];
            }
        }
        dh_next = std::move(dh_prev);
        dc_next = std::move(dc_prev);
    }
    return grad;
}

Episode sample_action_sequence(const PolicyNetwork& policy, const ActionSpace& space, Rng& rng) {
    Episode ep;
    const auto steps = unroll(policy, space, ep.actions, &rng);
    for (std::size_t t = 0; t < steps.size(); ++t) ep.log_probs.push_back(std::log(steps[t].probs[ep.actions[t]]));
    return ep;
}

// ---------------------------------------------------------------------------
// Rewards and REINFORCE

double compute_reward(std::span<const std::size_t> actions, const ActionSpace& space,
                      SearchEnvironment& env) {
    if (actions.size() != space.horizon()) throw std::invalid_argument("action sequence length != horizon");
    for (std::size_t t = 0; t < actions.size(); ++t) {
        if (!space.valid(t, actions[t])) return -1.0;
    }
    const auto counts = space.to_counts(actions);
    try {
        return env.accuracy(counts);
    } catch (const FineTuneDiverged& e) {
        fmt::print(stderr, "warning: reward 0 for counts [{}]: {}\n", fmt::join(counts, " "), e.what());
        return 0.0;
    }
}

void RewardBaseline::observe(double mean_reward) {
    if (!enabled) return;
    value = primed ? decay * value + (1.0 - decay) * mean_reward : mean_reward;
    primed = true;
}

PolicyParams policy_gradient_estimate(const PolicyNetwork& policy, const ActionSpace& space,
                                      std::span<const Episode> episodes, double baseline) {
    if (episodes.empty()) throw std::invalid_argument("REINFORCE needs at least one episode");
    PolicyParams grad = policy.params().zeros_like();
    const double inv_m = 1.0 / static_cast<double>(episodes.size());
    for (const auto& ep : episodes) {
        if (!ep.has_reward) throw std::invalid_argument("episode has no reward");
        const double weight = (ep.reward - baseline) * inv_m;
        if (weight == 0.0) continue;
        grad.add_scaled(policy.log_probability_gradient(space, ep.actions), weight);
    }
    return grad;
}

void reinforce_update(PolicyNetwork& policy, const ActionSpace& space, std::span<const Episode> episodes,
                      double lr, RewardBaseline* baseline) {
    const double b = baseline ? baseline->current() : 0.0;
    const PolicyParams grad = policy_gradient_estimate(policy, space, episodes, b);
    policy.params().add_scaled(grad, lr);
    if (baseline) {
        double mean = 0.0;
        for (const auto& ep : episodes) mean += ep.reward;
        baseline->observe(mean / static_cast<double>(episodes.size()));
    }
}

// ---------------------------------------------------------------------------
// Search

SearchResult search(SearchEnvironment& env, const SearchConfig& cfg) {
    const ActionSpace space = ActionSpace::powers_of_two(env.filter_counts());
    Rng init = make_rng(cfg.seed, "policy");
    return search(env, cfg, PolicyNetwork(space.size(), cfg.hidden, init, cfg.init_scale));
}

SearchResult search(SearchEnvironment& env, const SearchConfig& cfg, PolicyNetwork policy) {
    if (cfg.episodes_per_update < 1 || cfg.budget < cfg.episodes_per_update) {
        throw std::invalid_argument("search needs budget >= episodes per update >= 1");
    }
    const ActionSpace space = ActionSpace::powers_of_two(env.filter_counts());
    Rng rng = make_rng(cfg.seed, "episodes");
    RewardBaseline baseline;
    baseline.enabled = cfg.baseline;

    SearchResult result;
    std::size_t done = 0;
    while (done < cfg.budget) {
        const std::size_t m = std::min(cfg.episodes_per_update, cfg.budget - done);
        std::vector<Episode> batch;
        for (std::size_t k = 0; k < m; ++k) batch.push_back(sample_action_sequence(policy, space, rng));

        if (cfg.threads > 1) {
            std::vector<std::future<double>> pending;
            for (std::size_t k = 0; k < m; ++k) {
                pending.push_back(std::async(std::launch::async, [&, k] {
                    return compute_reward(batch[k].actions, space, env);
                }));
            }
            for (std::size_t k = 0; k < m; ++k) batch[k].reward = pending[k].get();
        } else {
            for (auto& ep : batch) ep.reward = compute_reward(ep.actions, space, env);
        }

        for (auto& ep : batch) {
            ep.has_reward = true;
            if (result.history.empty() || ep.reward > result.best_reward) {
                result.best_reward = ep.reward;
                result.best_actions = ep.actions;
            }
            result.history.push_back({done++, ep.reward, space.to_counts(ep.actions), result.best_reward});
        }
        reinforce_update(policy, space, batch, cfg.policy_lr, &baseline);
    }
    result.best_counts = space.to_counts(result.best_actions);
    result.policy = std::move(policy);
    return result;
}

void write_search_history_csv(std::ostream& out, std::span<const SearchHistoryRow> history) {
    const std::size_t layers = history.empty() ? 0 : history.front().counts.size();
    out << "episode,reward";
    for (std::size_t l = 0; l < layers; ++l) out << ",action_" << (l + 1);
    out << ",best_reward\n";
    for (const auto& row : history) {
        fmt::print(out, "{},{}", row.episode, row.reward);
        for (auto c : row.counts) fmt::print(out, ",{}", c);
        fmt::print(out, ",{}\n", row.best_reward);
    }
}

std::vector<std::size_t> greedy_search(SearchEnvironment& env) {
    const auto nf = env.filter_counts();
    std::vector<std::size_t> state = nf;
    double best = env.accuracy(state);
    for (std::size_t l = 0; l < state.size(); ++l) {
        for (std::size_t candidate = 2; candidate < nf[l]; candidate *= 2) {
            const std::size_t previous = state[l];
            state[l] = candidate;
            const double acc = env.accuracy(state);
            if (acc > best) {
                best = acc;
                continue;
            }
            state[l] = previous;
            break;
        }
    }
    return state;
}

std::vector<std::size_t> manual_search(SearchEnvironment& env) {
    const auto nf = env.filter_counts();
    std::vector<std::size_t> state(nf.size());
    for (std::size_t l = 0; l < nf.size(); ++l) state[l] = std::min<std::size_t>(2, nf[l]);
    std::map<std::vector<std::size_t>, double> seen;
    auto score = [&](const std::vector<std::size_t>& s) {
        auto it = seen.find(s);
        if (it != seen.end()) return it->second;
        const double acc = env.accuracy(s);
        seen.emplace(s, acc);
        return acc;
    };
    double best = score(state);
    for (bool improved = true; improved;) {
        improved = false;
        for (std::size_t l = 0; l < state.size(); ++l) {
            std::optional<std::size_t> pick;
            double pick_acc = best;
            for (std::size_t candidate : {state[l] * 2, state[l] / 2}) {
                if (candidate < 1 || candidate > nf[l]) continue;
                auto trial = state;
                trial[l] = candidate;
                const double acc = score(trial);
                if (acc > pick_acc) {
                    pick_acc = acc;
                    pick = candidate;
                }
            }
            if (pick) {
                state[l] = *pick;
                best = pick_acc;
                improved = true;
            }
        }
    }
    return state;
}

// ---------------------------------------------------------------------------
// Fine-tuning environment

FineTuneEnvironment::FineTuneEnvironment(Network pretrained, Tensor clustering_batch,
                                         Dataset finetune_data, Dataset validation,
                                         FineTuneConfig config, ClusteringOptions clustering)
    : pretrained_(std::move(pretrained)),
      clustering_batch_(std::move(clustering_batch)),
      finetune_data_(std::move(finetune_data)),
      validation_(std::move(validation)),
      config_(std::move(config)),
      clustering_(clustering) {}

std::vector<std::size_t> FineTuneEnvironment::filter_counts() const {
    std::vector<std::size_t> out;
    for (auto l : pretrained_.clusterable_layers()) out.push_back(pretrained_.layer(l).filters);
    return out;
}

double FineTuneEnvironment::accuracy(std::span<const std::size_t> counts) {
    const std::vector<std::size_t> key(counts.begin(), counts.end());
    {
        std::lock_guard lock(mutex_);
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    const GroupAssignment assignment =
        build_group_assignment(pretrained_, key, clustering_batch_, clustering_);
    const FineTuneResult run = fine_tune(pretrained_, assignment, finetune_data_, validation_, config_);
    std::lock_guard lock(mutex_);
    ++evaluations_;
    training_steps_ += run.trace.size();
    cache_.emplace(key, run.accuracy);
    return run.accuracy;
}

std::size_t FineTuneEnvironment::evaluations() const {
    std::lock_guard lock(mutex_);
    return evaluations_;
}

std::size_t FineTuneEnvironment::training_steps() const {
    std::lock_guard lock(mutex_);
    return training_steps_;
}

// ---------------------------------------------------------------------------
// Policy checkpoints

void save_policy(const PolicyNetwork& policy, const std::filesystem::path& path) {
    CheckpointData data;
    data.layers.push_back({kLstmKindCode, {static_cast<std::uint32_t>(policy.input_size()),
                                           static_cast<std::uint32_t>(policy.hidden())}});
    data.layers.push_back({static_cast<std::uint32_t>(LayerKind::dense),
                           {static_cast<std::uint32_t>(policy.hidden()),
                            static_cast<std::uint32_t>(policy.actions()), 1u}});
    for (const Tensor* t : policy.params().tensors()) data.tensors.push_back(*t);
    write_file_bytes(path, encode_checkpoint(data));
}

PolicyNetwork load_policy(const std::filesystem::path& path) {
    const CheckpointData data = decode_checkpoint(read_file_bytes(path));
    if (data.layers.size() != 2 || data.layers[0].kind != kLstmKindCode || data.layers[0].dims.size() != 2 ||
        data.tensors.size() != 5) {
        throw CheckpointError("checkpoint does not hold an LSTM policy");
    }
    const std::size_t in = data.layers[0].dims[0], hidden = data.layers[0].dims[1];
    Rng unused(0);
    PolicyNetwork policy(in - 1, hidden, unused, 0.0);
    auto dst = policy.params().tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
        if (data.tensors[t].shape() != dst[t]->shape()) throw CheckpointError("policy tensor shape mismatch");
        *dst[t] = data.tensors[t];
    }
    return policy;
}

}  // namespace gnak
