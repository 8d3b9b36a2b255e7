#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gnak/clustering.hpp"
#include "gnak/controller.hpp"
#include "gnak/dataset.hpp"
#include "gnak/trainer.hpp"

namespace gnak {

enum class TaskKind { transfer, domain_adapt_toy, ablation_k, ablation_layers };
enum class SearchMethod { none, manual, greedy, rl };

TaskKind parse_task_kind(const std::string& name);
std::string to_string(TaskKind kind);
SearchMethod parse_search_method(const std::string& name);
std::string to_string(SearchMethod method);

/// One configuration key: INI section, name (also the CLI flag name),
/// default value and help text.
struct ConfigKey {
    std::string section;
    std::string name;
    std::string default_value;
    std::string help;
};

/// Every key the experiment config understands.
std::span<const ConfigKey> config_keys();

/// Raw key -> value map. Values start at their defaults, then the config
/// file, then command-line overrides.
using Settings = std::map<std::string, std::string>;

Settings default_settings();
/// INI text with [sections]; unknown keys and keys in the wrong section are
/// rejected.
void merge_config_text(Settings& settings, const std::string& ini_text);
void merge_config_file(Settings& settings, const std::filesystem::path& path);
void set_setting(Settings& settings, const std::string& key, const std::string& value);

struct PretrainConfig {
    std::size_t iterations = 1500;
    std::size_t batch = 32;
    double lr = 0.05;
};

struct SearchSettings {
    SearchConfig rl;
    /// Data the search environment fine-tunes on: "target" uses the k-shot
    /// samples, "source" k samples per source class with the pretrained head.
    std::string data = "target";
    std::size_t iterations = 200;  // fine-tune steps per environment evaluation
};

struct ExperimentConfig {
    TaskKind task = TaskKind::transfer;
    std::uint64_t seed = 1;
    std::size_t runs = 10;
    std::size_t k = 5;
    std::vector<std::size_t> k_values{1, 5, 10};
    SearchMethod method = SearchMethod::none;
    std::string groups = "singleton";
    std::vector<std::optional<std::size_t>> cluster_prefixes{std::nullopt};
    std::string architecture = "conv-small";
    std::string label;
    std::filesystem::path out = "out";
    std::filesystem::path pretrained;

    std::filesystem::path source_images, source_labels, target_images, target_labels;
    SyntheticTaskOptions synthetic;
    std::size_t clustering_per_class = 20;
    double validation_fraction = 0.2;

    PretrainConfig pretrain;
    FineTuneConfig finetune;
    ClusteringOptions clustering;
    SearchSettings search;
    std::size_t threads = 1;

    static ExperimentConfig from_settings(const Settings& settings);
};

/// Architecture presets. conv-small: two conv layers and one hidden dense
/// layer; mlp-deep: eight hidden dense layers.
Network build_architecture(const std::string& name, const std::vector<std::size_t>& input_shape,
                           std::size_t classes, Rng& rng);

/// Source-domain pretraining with minibatch SGD on cross-entropy.
Network pretrain(Network net, const Dataset& source, const PretrainConfig& cfg, std::uint64_t seed);

/// Source and target datasets for a config (synthetic or IDX).
TransferTask load_task(const ExperimentConfig& cfg);

/// Loads cfg.pretrained when it exists, otherwise pretrains on the source data.
Network obtain_pretrained(const ExperimentConfig& cfg, const TransferTask& task);

/// Group counts for a `groups` spec: "singleton", "single", "half",
/// "quarter", "frac:<x>" (rounded to a power of two) or a comma list.
std::vector<std::size_t> resolve_group_counts(const std::string& spec, const Network& net);

struct MetricsRow {
    std::string kind;  // "run" or "aggregate"
    std::string run_id;
    std::uint64_t seed = 0;
    std::string method;
    std::size_t k = 0;
    std::string cluster_layers;
    double accuracy = 0.0;            // test accuracy, or mean for aggregates
    double validation_accuracy = 0.0; // or mean for aggregates
    double std_dev = 0.0;             // aggregates: sample std of accuracy over runs
    std::size_t runs = 1;
    std::string status = "ok";
    std::string counts;
};

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows);

/// Mean and sample standard deviation of the ok run rows.
MetricsRow aggregate_rows(std::span<const MetricsRow> runs);

/// Everything one seeded run produced.
struct RunOutcome {
    MetricsRow row;
    std::vector<LossTraceRow> trace;
    std::optional<SearchResult> search;
    std::optional<Network> network;
    GroupAssignment assignment;
    std::vector<std::size_t> kshot_indices, validation_indices, test_indices;
    std::vector<std::string> log;  // "stage status" lines, in execution order
};

struct RunSpec {
    std::size_t index = 0;
    std::size_t k = 5;
    std::string method_label;
    std::string groups;
    SearchMethod method = SearchMethod::none;
    std::optional<std::size_t> cluster_prefix;
    LossWeights weights;
    bool keep_network = false;
};

/// k-shot sampling, optional search, clustering, fine-tuning and test
/// evaluation for one seed. Stage failures land in row.status.
RunOutcome execute_run(const ExperimentConfig& cfg, const TransferTask& task, const Network& pretrained,
                       const RunSpec& spec);

struct ExperimentOutput {
    std::vector<MetricsRow> rows;  // run rows followed by aggregates, per setting
    std::vector<RunOutcome> outcomes;
};

/// Runs the configured task end to end and writes metrics.csv (plus
/// loss_trace.csv, search_history.csv and checkpoints where they apply)
/// into cfg.out. All randomness derives from cfg.seed.
ExperimentOutput run_experiment(const ExperimentConfig& cfg);

/// Parallel run cap from GNAK_THREADS (default 1).
std::size_t threads_from_environment();

}  // namespace gnak
