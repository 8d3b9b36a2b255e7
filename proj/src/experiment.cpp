#include "gnak/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "gnak/checkpoint.hpp"

namespace gnak {

TaskKind parse_task_kind(const std::string& name) {
    if (name == "transfer") return TaskKind::transfer;
    if (name == "domain-adapt-toy") return TaskKind::domain_adapt_toy;
    if (name == "ablation-k") return TaskKind::ablation_k;
    if (name == "ablation-layers") return TaskKind::ablation_layers;
    throw std::invalid_argument(fmt::format("unknown task '{}'", name));
}

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::transfer: return "transfer";
        case TaskKind::domain_adapt_toy: return "domain-adapt-toy";
        case TaskKind::ablation_k: return "ablation-k";
        case TaskKind::ablation_layers: return "ablation-layers";
    }
    return "transfer";
}

SearchMethod parse_search_method(const std::string& name) {
    if (name == "none") return SearchMethod::none;
    if (name == "manual") return SearchMethod::manual;
    if (name == "greedy") return SearchMethod::greedy;
    if (name == "rl") return SearchMethod::rl;
    throw std::invalid_argument(fmt::format("unknown search method '{}'", name));
}

std::string to_string(SearchMethod method) {
    switch (method) {
        case SearchMethod::none: return "none";
        case SearchMethod::manual: return "manual";
        case SearchMethod::greedy: return "greedy";
        case SearchMethod::rl: return "rl";
    }
    return "none";
}

namespace {

const std::vector<ConfigKey> kKeys = {
    {"experiment", "task", "transfer", "transfer | domain-adapt-toy | ablation-k | ablation-layers"},
    {"experiment", "seed", "1", "root seed for every random stream"},
    {"experiment", "runs", "10", "seeded repetitions per setting"},
    {"experiment", "k", "5", "samples per target class"},
    {"experiment", "k-values", "1,5,10", "k sweep for ablation-k"},
    {"experiment", "method", "none", "group-count search: none | manual | greedy | rl"},
    {"experiment", "groups", "singleton",
     "group counts when method=none: singleton | single | half | quarter | frac:<x> | n | n1,n2,..."},
    {"experiment", "cluster-layers", "all", "clustered-layer prefix, or a list such as 1,3,5,7,all"},
    {"experiment", "architecture", "conv-small", "conv-small | mlp-deep"},
    {"experiment", "label", "", "method label written to metrics.csv"},
    {"experiment", "out", "out", "output directory"},
    {"experiment", "pretrained", "", "pretrained checkpoint; pretrains from scratch when empty or missing"},
    {"experiment", "threads", "0", "parallel runs; 0 reads GNAK_THREADS"},
    {"data", "source-images", "", "IDX images for the source domain (synthetic task when empty)"},
    {"data", "source-labels", "", "IDX labels for the source domain"},
    {"data", "target-images", "", "IDX images for the target domain"},
    {"data", "target-labels", "", "IDX labels for the target domain"},
    {"data", "image-size", "10", "synthetic image side length"},
    {"data", "source-classes", "5", "synthetic source classes"},
    {"data", "target-classes", "5", "synthetic target classes"},
    {"data", "source-per-class", "200", "synthetic source samples per class"},
    {"data", "target-per-class", "120", "synthetic target samples per class"},
    {"data", "pixel-noise", "0.12", "synthetic pixel noise"},
    {"data", "clustering-per-class", "20", "source images per class in the clustering batch"},
    {"data", "validation-fraction", "0.2", "share of held-out target data used for validation accuracy"},
    {"pretrain", "pretrain-iterations", "1500", "source SGD steps"},
    {"pretrain", "pretrain-batch", "32", "source minibatch size"},
    {"pretrain", "pretrain-lr", "0.05", "source learning rate"},
    {"finetune", "iterations", "2000", "fine-tuning steps"},
    {"finetune", "lr", "0.01", "initial fine-tuning learning rate"},
    {"finetune", "lr-decayed", "0.001", "learning rate after the decay step"},
    {"finetune", "lr-decay-step", "1000", "iteration where the learning rate drops"},
    {"finetune", "embedding", "penultimate", "metric-loss embedding: penultimate | logits"},
    {"loss", "alpha", "0.1", "intra-group loss weight"},
    {"loss", "beta", "0.01", "inter-group loss weight"},
    {"loss", "gamma", "1.0", "metric loss weight"},
    {"loss", "margin", "1.0", "hinge margin"},
    {"loss", "distance", "squared-euclidean", "squared-euclidean | total-variation"},
    {"loss", "metric", "auto", "auto | triplet | margin"},
    {"cluster", "restarts", "10", "k-means restarts"},
    {"cluster", "max-iterations", "100", "Lloyd iterations per restart"},
    {"cluster", "standardize", "off", "z-score profiles before clustering"},
    {"search", "budget", "100", "controller episodes"},
    {"search", "episodes-per-update", "5", "episodes per policy update"},
    {"search", "policy-lr", "0.005", "controller learning rate"},
    {"search", "hidden", "32", "controller LSTM width"},
    {"search", "init-scale", "0.1", "controller weight init range"},
    {"search", "baseline", "off", "moving-average reward baseline: on | off"},
    {"search", "search-iterations", "200", "fine-tuning steps per evaluated count vector"},
    {"search", "search-data", "target", "data fine-tuned inside the search: target | source"},
};

const ConfigKey* find_key(const std::string& name) {
    for (const auto& key : kKeys)
        if (key.name == name) return &key;
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) parts.push_back(item);
    }
    return parts;
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        x = std::stoull(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size())
        throw std::invalid_argument(fmt::format("{}: expected a non-negative integer, got '{}'", key, v));
    return static_cast<std::size_t>(x);
}

double to_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != v.size() || !std::isfinite(x))
        throw std::invalid_argument(fmt::format("{}: expected a number, got '{}'", key, v));
    return x;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument(fmt::format("{}: expected on or off, got '{}'", key, v));
}

std::string prefix_label(const std::optional<std::size_t>& prefix) {
    return prefix ? std::to_string(*prefix) : std::string("all");
}

std::string join_counts(const std::vector<std::size_t>& counts) { return fmt::format("{}", fmt::join(counts, ";")); }

}  // namespace

std::span<const ConfigKey> config_keys() { return kKeys; }

Settings default_settings() {
    Settings s;
    for (const auto& key : kKeys) s[key.name] = key.default_value;
    return s;
}

void set_setting(Settings& settings, const std::string& key, const std::string& value) {
    if (!find_key(key)) throw std::invalid_argument(fmt::format("unknown config key '{}'", key));
    settings[key] = trim(value);
}

void merge_config_text(Settings& settings, const std::string& ini_text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(ini_text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw std::invalid_argument(fmt::format("config line {}: {}", e.line(), e.message()));
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) {
            set_setting(settings, section, body.data());
            continue;
        }
        for (const auto& [name, value] : body) {
            const ConfigKey* key = find_key(name);
            if (!key) throw std::invalid_argument(fmt::format("unknown config key '{}' in [{}]", name, section));
            if (key->section != section)
                throw std::invalid_argument(
                    fmt::format("config key '{}' belongs in [{}], not [{}]", name, key->section, section));
            settings[name] = trim(value.data());
        }
    }
}

void merge_config_file(Settings& settings, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open config '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    merge_config_text(settings, buf.str());
}

ExperimentConfig ExperimentConfig::from_settings(const Settings& settings) {
    Settings s = default_settings();
    for (const auto& [k, v] : settings) set_setting(s, k, v);
    const auto sz = [&](const char* k) { return to_size(k, s.at(k)); };
    const auto dbl = [&](const char* k) { return to_double(k, s.at(k)); };

    ExperimentConfig c;
    c.task = parse_task_kind(s.at("task"));
    c.seed = static_cast<std::uint64_t>(sz("seed"));
    c.runs = sz("runs");
    c.k = sz("k");
    c.k_values.clear();
    for (const auto& v : split_list(s.at("k-values"))) c.k_values.push_back(to_size("k-values", v));
    c.method = parse_search_method(s.at("method"));
    c.groups = s.at("groups");
    c.cluster_prefixes.clear();
    for (const auto& v : split_list(s.at("cluster-layers"))) {
        if (v == "all")
            c.cluster_prefixes.push_back(std::nullopt);
        else
            c.cluster_prefixes.push_back(to_size("cluster-layers", v));
    }
    c.architecture = s.at("architecture");
    c.label = s.at("label");
    c.out = s.at("out");
    c.pretrained = s.at("pretrained");
    c.threads = sz("threads");
    if (c.threads == 0) c.threads = threads_from_environment();

    c.source_images = s.at("source-images");
    c.source_labels = s.at("source-labels");
    c.target_images = s.at("target-images");
    c.target_labels = s.at("target-labels");
    c.synthetic.height = c.synthetic.width = sz("image-size");
    c.synthetic.source_classes = sz("source-classes");
    c.synthetic.target_classes = sz("target-classes");
    c.synthetic.source_per_class = sz("source-per-class");
    c.synthetic.target_per_class = sz("target-per-class");
    c.synthetic.pixel_noise = dbl("pixel-noise");
    c.clustering_per_class = sz("clustering-per-class");
    c.validation_fraction = dbl("validation-fraction");

    c.pretrain.iterations = sz("pretrain-iterations");
    c.pretrain.batch = sz("pretrain-batch");
    c.pretrain.lr = dbl("pretrain-lr");

    c.finetune.iterations = sz("iterations");
    c.finetune.schedule.initial = dbl("lr");
    c.finetune.schedule.decayed = dbl("lr-decayed");
    c.finetune.schedule.decay_step = sz("lr-decay-step");
    const auto& emb = s.at("embedding");
    if (emb == "penultimate")
        c.finetune.embedding = EmbeddingSource::penultimate;
    else if (emb == "logits")
        c.finetune.embedding = EmbeddingSource::logits;
    else
        throw std::invalid_argument(fmt::format("embedding: unknown source '{}'", emb));
    c.finetune.weights.alpha_intra = dbl("alpha");
    c.finetune.weights.beta_inter = dbl("beta");
    c.finetune.weights.gamma_triplet = dbl("gamma");
    c.finetune.weights.margin = dbl("margin");
    c.finetune.weights.distance = parse_distance_kind(s.at("distance"));
    c.finetune.weights.metric = parse_metric_kind(s.at("metric"));

    c.clustering.restarts = sz("restarts");
    c.clustering.max_iterations = sz("max-iterations");
    c.clustering.standardize = to_bool("standardize", s.at("standardize"));
    c.clustering.seed = c.seed;

    c.search.rl.budget = sz("budget");
    c.search.rl.episodes_per_update = sz("episodes-per-update");
    c.search.rl.policy_lr = dbl("policy-lr");
    c.search.rl.hidden = sz("hidden");
    c.search.rl.init_scale = dbl("init-scale");
    c.search.rl.baseline = to_bool("baseline", s.at("baseline"));
    c.search.rl.seed = c.seed;
    c.search.iterations = sz("search-iterations");
    c.search.data = s.at("search-data");
    if (c.search.data != "target" && c.search.data != "source")
        throw std::invalid_argument(fmt::format("search-data: expected target or source, got '{}'", c.search.data));

    if (c.k == 0) throw std::invalid_argument("k must be at least 1");
    if (c.runs == 0) throw std::invalid_argument("runs must be at least 1");
    for (auto k : c.k_values)
        if (k == 0) throw std::invalid_argument("k-values must all be at least 1");
    if (c.k_values.empty()) throw std::invalid_argument("k-values is empty");
    if (c.cluster_prefixes.empty()) throw std::invalid_argument("cluster-layers is empty");
    if (!(c.validation_fraction > 0.0 && c.validation_fraction < 1.0))
        throw std::invalid_argument("validation-fraction must be in (0, 1)");
    if (c.pretrain.batch == 0) throw std::invalid_argument("pretrain-batch must be at least 1");
    if (c.clustering.restarts == 0) throw std::invalid_argument("restarts must be at least 1");
    if (c.search.rl.episodes_per_update == 0) throw std::invalid_argument("episodes-per-update must be at least 1");
    c.finetune.validate();
    for (const auto* p : {&c.source_images, &c.source_labels, &c.target_images, &c.target_labels})
        if (!p->empty() && !std::filesystem::exists(*p))
            throw std::invalid_argument(fmt::format("data file '{}' does not exist", p->string()));
    const bool any_idx = !c.source_images.empty() || !c.source_labels.empty() || !c.target_images.empty() ||
                         !c.target_labels.empty();
    const bool all_idx = !c.source_images.empty() && !c.source_labels.empty() && !c.target_images.empty() &&
                         !c.target_labels.empty();
    if (any_idx && !all_idx) throw std::invalid_argument("IDX input needs all four data files");
    return c;
}

Network build_architecture(const std::string& name, const std::vector<std::size_t>& input_shape,
                           std::size_t classes, Rng& rng) {
    NetworkBuilder b(input_shape);
    if (name == "conv-small") {
        if (input_shape.size() != 3) throw std::invalid_argument("conv-small needs (H, W, C) inputs");
        b.conv2d(3, 1, 8).relu().conv2d(3, 2, 16).relu().dense(32).relu().dense(classes);
    } else if (name == "mlp-deep") {
        for (int i = 0; i < 8; ++i) b.dense(24).relu();
        b.dense(classes);
    } else if (name == "mlp-small") {
        b.dense(32).relu().dense(classes);
    } else {
        throw std::invalid_argument(fmt::format("unknown architecture '{}'", name));
    }
    Network net = b.build();
    net.initialize(rng);
    return net;
}

Network pretrain(Network net, const Dataset& source, const PretrainConfig& cfg, std::uint64_t seed) {
    source.validate();
    if (source.size() == 0) throw std::invalid_argument("empty source dataset");
    Rng rng = make_rng(seed, "pretrain");
    std::vector<std::size_t> order(source.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    const std::size_t batch = std::min(cfg.batch, source.size());
    std::vector<std::size_t> idx(batch);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        for (auto& i : idx) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            i = order[cursor++];
        }
        const Dataset mb = source.subset(idx);
        const auto fwd = forward(net, mb.images);
        const auto ce = cross_entropy(fwd.logits, mb.labels);
        const auto grads = backward(net, fwd.record, ce.grad);
        sgd_step(net, grads, cfg.lr);
    }
    return net;
}

TransferTask load_task(const ExperimentConfig& cfg) {
    if (cfg.source_images.empty()) return make_synthetic_transfer_task(derive_seed(cfg.seed, "data"), cfg.synthetic);
    TransferTask t{load_idx_dataset(cfg.source_images, cfg.source_labels),
                   load_idx_dataset(cfg.target_images, cfg.target_labels)};
    return t;
}

Network obtain_pretrained(const ExperimentConfig& cfg, const TransferTask& task) {
    if (!cfg.pretrained.empty() && std::filesystem::exists(cfg.pretrained)) {
        Network net = load_checkpoint(cfg.pretrained);
        if (shape_product(net.input_shape()) != shape_product(task.source.sample_shape()))
            throw std::invalid_argument(fmt::format("checkpoint input shape {} does not match the data {}",
                                                    shape_string(net.input_shape()),
                                                    shape_string(task.source.sample_shape())));
        return net;
    }
    Rng init = make_rng(cfg.seed, "init");
    Network net = build_architecture(cfg.architecture, task.source.sample_shape(), task.source.classes, init);
    return pretrain(std::move(net), task.source, cfg.pretrain, cfg.seed);
}

std::vector<std::size_t> resolve_group_counts(const std::string& spec, const Network& net) {
    const auto layers = net.clusterable_layers();
    std::vector<std::size_t> counts;
    const auto per_layer = [&](auto fn) {
        for (auto l : layers) counts.push_back(std::clamp<std::size_t>(fn(net.layer(l).filters), 1, net.layer(l).filters));
    };
    const auto pow2_near = [](double x) {
        if (x <= 1.0) return std::size_t{1};
        return static_cast<std::size_t>(std::exp2(std::round(std::log2(x))));
    };
    if (spec == "singleton") {
        per_layer([](std::size_t n) { return n; });
    } else if (spec == "single") {
        per_layer([](std::size_t) { return std::size_t{1}; });
    } else if (spec == "half") {
        per_layer([](std::size_t n) { return n / 2; });
    } else if (spec == "quarter") {
        per_layer([](std::size_t n) { return n / 4; });
    } else if (spec.rfind("frac:", 0) == 0) {
        const double f = to_double("groups", spec.substr(5));
        if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("groups: fraction must be in (0, 1]");
        per_layer([&](std::size_t n) { return pow2_near(f * static_cast<double>(n)); });
    } else {
        const auto parts = split_list(spec);
        if (parts.size() == 1) {
            const auto n = to_size("groups", parts[0]);
            per_layer([&](std::size_t) { return n; });
        } else {
            if (parts.size() != layers.size())
                throw std::invalid_argument(
                    fmt::format("groups: {} counts for {} clusterable layers", parts.size(), layers.size()));
            for (const auto& p : parts) counts.push_back(to_size("groups", p));
        }
    }
    return counts;
}

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
    out << "kind,run_id,seed,method,k,cluster_layers,accuracy,validation_accuracy,std,runs,status,counts\n";
    for (const auto& r : rows)
        out << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", r.kind, r.run_id, r.seed, r.method, r.k,
                           r.cluster_layers, r.accuracy, r.validation_accuracy, r.std_dev, r.runs, r.status,
                           r.counts);
}

MetricsRow aggregate_rows(std::span<const MetricsRow> runs) {
    MetricsRow agg;
    agg.kind = "aggregate";
    if (runs.empty()) {
        agg.runs = 0;
        agg.status = "failed";
        return agg;
    }
    agg.run_id = "mean";
    agg.seed = runs.front().seed;
    agg.method = runs.front().method;
    agg.k = runs.front().k;
    agg.cluster_layers = runs.front().cluster_layers;
    std::vector<double> acc, val;
    for (const auto& r : runs)
        if (r.status == "ok") {
            acc.push_back(r.accuracy);
            val.push_back(r.validation_accuracy);
        }
    agg.runs = acc.size();
    if (acc.empty()) {
        agg.status = "failed";
        return agg;
    }
    agg.status = acc.size() == runs.size() ? "ok" : "partial";
    const double n = static_cast<double>(acc.size());
    agg.accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
    agg.validation_accuracy = std::accumulate(val.begin(), val.end(), 0.0) / n;
    if (acc.size() > 1) {
        double ss = 0.0;
        for (double a : acc) ss += (a - agg.accuracy) * (a - agg.accuracy);
        agg.std_dev = std::sqrt(ss / (n - 1.0));
    }
    return agg;
}

RunOutcome execute_run(const ExperimentConfig& cfg, const TransferTask& task, const Network& pretrained,
                       const RunSpec& spec) {
    RunOutcome out;
    const std::uint64_t run_seed = derive_seed(cfg.seed, "run", spec.index);
    auto& row = out.row;
    row.kind = "run";
    row.run_id = fmt::format("r{:03}", spec.index);
    row.seed = run_seed;
    row.method = spec.method_label;
    row.k = spec.k;
    row.cluster_layers = prefix_label(spec.cluster_prefix);

    std::string stage = "sample";
    const auto done = [&](const std::string& detail = {}) {
        out.log.push_back(detail.empty() ? fmt::format("{} ok", stage) : fmt::format("{} ok {}", stage, detail));
    };
    try {
        const KShotSplit ks = sample_kshot(task.target, spec.k, derive_seed(run_seed, "sampling"));
        const HeldoutSplit hs = split_validation(ks.heldout, cfg.validation_fraction, derive_seed(run_seed, "validation"));
        out.kshot_indices = ks.kshot_indices;
        for (auto i : hs.validation_indices) out.validation_indices.push_back(ks.heldout_indices[i]);
        for (auto i : hs.test_indices) out.test_indices.push_back(ks.heldout_indices[i]);
        done(fmt::format("kshot={} validation={} test={}", ks.kshot.size(), hs.validation.size(), hs.test.size()));

        stage = "head";
        Network net = pretrained;
        Rng head_rng = make_rng(run_seed, "head");
        net.replace_head(task.target.classes, head_rng);
        done();

        const Tensor clustering_batch = take_per_class(task.source, cfg.clustering_per_class).images;
        ClusteringOptions copts = cfg.clustering;
        copts.seed = derive_seed(run_seed, "kmeans");

        FineTuneConfig ft = cfg.finetune;
        ft.weights = spec.weights;
        ft.cluster_prefix = spec.cluster_prefix;

        std::vector<std::size_t> counts;
        if (spec.method == SearchMethod::none) {
            stage = "groups";
            counts = resolve_group_counts(spec.groups, net);
        } else {
            stage = "search";
            FineTuneConfig search_ft = ft;
            search_ft.iterations = cfg.search.iterations;
            search_ft.schedule.decay_step = std::min(search_ft.schedule.decay_step, cfg.search.iterations);
            std::optional<FineTuneEnvironment> env_storage;
            if (cfg.search.data == "source") {
                const KShotSplit src = sample_kshot(task.source, spec.k, derive_seed(run_seed, "search-sampling"));
                const HeldoutSplit src_val =
                    split_validation(src.heldout, cfg.validation_fraction, derive_seed(run_seed, "search-validation"));
                env_storage.emplace(pretrained, clustering_batch, src.kshot, src_val.validation, search_ft, copts);
            } else {
                env_storage.emplace(net, clustering_batch, ks.kshot, hs.validation, search_ft, copts);
            }
            FineTuneEnvironment& env = *env_storage;
            if (spec.method == SearchMethod::rl) {
                SearchConfig sc = cfg.search.rl;
                sc.seed = derive_seed(run_seed, "search");
                sc.threads = 1;
                out.search = gnak::search(env, sc);
                counts = out.search->best_counts;
            } else if (spec.method == SearchMethod::greedy) {
                counts = greedy_search(env);
            } else {
                counts = manual_search(env);
            }
            done(fmt::format("evaluations={}", env.evaluations()));
        }
        row.counts = join_counts(counts);
        if (spec.method == SearchMethod::none) done(row.counts);

        stage = "cluster";
        out.assignment = build_group_assignment(net, counts, clustering_batch, copts);
        done();

        stage = "finetune";
        FineTuneResult res = fine_tune(net, out.assignment, ks.kshot, hs.validation, ft);
        out.trace = std::move(res.trace);
        row.validation_accuracy = res.accuracy;
        done();

        stage = "evaluate";
        row.accuracy = evaluate(res.network, hs.test);
        if (spec.keep_network) out.network = std::move(res.network);
        done();
    } catch (const std::exception& e) {
        row.status = fmt::format("failed:{}", stage);
        out.log.push_back(fmt::format("{} failed {}", stage, e.what()));
    }
    return out;
}

std::size_t threads_from_environment() {
    const char* v = std::getenv("GNAK_THREADS");
    if (!v || !*v) return 1;
    try {
        const auto n = to_size("GNAK_THREADS", v);
        return std::max<std::size_t>(n, 1);
    } catch (const std::exception&) {
        return 1;
    }
}

namespace {

struct Setting {
    std::size_t k;
    std::string label;
    std::string groups;
    SearchMethod method;
    std::optional<std::size_t> prefix;
    LossWeights weights;
};

std::vector<Setting> expand_settings(const ExperimentConfig& cfg) {
    const std::string label = cfg.label.empty() ? (cfg.method == SearchMethod::none && cfg.groups == "singleton"
                                                       ? std::string("plain")
                                                       : fmt::format("gna-{}", to_string(cfg.method)))
                                                : cfg.label;
    std::vector<Setting> out;
    switch (cfg.task) {
        case TaskKind::transfer:
        case TaskKind::domain_adapt_toy:
            out.push_back({cfg.k, label, cfg.groups, cfg.method, cfg.cluster_prefixes.front(), cfg.finetune.weights});
            break;
        case TaskKind::ablation_k: {
            LossWeights plain = cfg.finetune.weights;
            plain.alpha_intra = plain.beta_inter = plain.gamma_triplet = 0.0;
            for (auto k : cfg.k_values) {
                out.push_back({k, "plain", "singleton", SearchMethod::none, std::nullopt, plain});
                out.push_back({k, label, cfg.groups, cfg.method, cfg.cluster_prefixes.front(), cfg.finetune.weights});
            }
            break;
        }
        case TaskKind::ablation_layers: {
            auto prefixes = cfg.cluster_prefixes;
            if (prefixes.size() == 1 && !prefixes.front()) prefixes = {1, 3, 5, 7, std::nullopt};
            for (const auto& p : prefixes)
                out.push_back({cfg.k, label, cfg.groups, cfg.method, p, cfg.finetune.weights});
            break;
        }
    }
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
    f << text;
}

}  // namespace

ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.out);
    std::ostringstream log;
    log << fmt::format("task={} seed={} runs={}\n", to_string(cfg.task), cfg.seed, cfg.runs);

    TransferTask task;
    Network pretrained;
    try {
        task = load_task(cfg);
        log << fmt::format("data ok source={} target={}\n", task.source.size(), task.target.size());
        pretrained = obtain_pretrained(cfg, task);
        save_checkpoint(pretrained, cfg.out / "pretrained.gnak");
        log << fmt::format("pretrain ok source_accuracy={}\n", evaluate(pretrained, task.source));
    } catch (const std::exception& e) {
        log << fmt::format("setup failed {}\n", e.what());
        write_text(cfg.out / "run.log", log.str());
        throw;
    }

    const auto settings = expand_settings(cfg);
    std::vector<RunSpec> specs;
    for (const auto& s : settings)
        for (std::size_t r = 0; r < cfg.runs; ++r) {
            RunSpec spec;
            spec.index = r;
            spec.k = s.k;
            spec.method_label = s.label;
            spec.groups = s.groups;
            spec.method = s.method;
            spec.cluster_prefix = s.prefix;
            spec.weights = s.weights;
            spec.keep_network = specs.empty();
            specs.push_back(std::move(spec));
        }

    ExperimentOutput result;
    result.outcomes.resize(specs.size());
    const std::size_t threads = std::max<std::size_t>(cfg.threads, 1);
    for (std::size_t start = 0; start < specs.size(); start += threads) {
        const std::size_t end = std::min(specs.size(), start + threads);
        if (threads == 1) {
            result.outcomes[start] = execute_run(cfg, task, pretrained, specs[start]);
            continue;
        }
        std::vector<std::future<RunOutcome>> futures;
        for (std::size_t i = start; i < end; ++i)
            futures.push_back(std::async(std::launch::async, [&, i] { return execute_run(cfg, task, pretrained, specs[i]); }));
        for (std::size_t i = start; i < end; ++i) result.outcomes[i] = futures[i - start].get();
    }

    for (std::size_t s = 0; s < settings.size(); ++s) {
        std::vector<MetricsRow> runs;
        for (std::size_t r = 0; r < cfg.runs; ++r) {
            const auto& o = result.outcomes[s * cfg.runs + r];
            runs.push_back(o.row);
            for (const auto& line : o.log)
                log << fmt::format("{} k={} method={} layers={} {}\n", o.row.run_id, o.row.k, o.row.method,
                                   o.row.cluster_layers, line);
        }
        result.rows.insert(result.rows.end(), runs.begin(), runs.end());
        result.rows.push_back(aggregate_rows(runs));
    }

    std::ostringstream metrics;
    write_metrics_csv(metrics, result.rows);
    write_text(cfg.out / "metrics.csv", metrics.str());

    const auto& first = result.outcomes.front();
    if (!first.trace.empty()) {
        std::ostringstream trace;
        write_loss_trace_csv(trace, first.trace);
        write_text(cfg.out / "loss_trace.csv", trace.str());
    }
    for (const auto& o : result.outcomes)
        if (o.search) {
            std::ostringstream hist;
            write_search_history_csv(hist, o.search->history);
            write_text(cfg.out / "search_history.csv", hist.str());
            save_policy(o.search->policy, cfg.out / "policy.gnak");
            break;
        }
    if (first.network) {
        save_checkpoint(*first.network, cfg.out / "finetuned.gnak");
        write_text(cfg.out / "groups.txt", serialize_assignment(first.assignment));
    }
    write_text(cfg.out / "run.log", log.str());
    return result;
}

}  // namespace gnak
