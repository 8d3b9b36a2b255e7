// gnak: command-line front end for pretraining, grouping, fine-tuning,
// group-count search and the ablation sweeps.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "gnak/checkpoint.hpp"
#include "gnak/experiment.hpp"

namespace {

struct Command {
    CLI::App* app = nullptr;
    std::string config;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    gnak::Settings presets;
};

void add_config_flags(Command& cmd) {
    cmd.app->add_option("--config", cmd.config, "INI config file")->check(CLI::ExistingFile);
    for (const auto& key : gnak::config_keys()) {
        auto& slot = cmd.values[key.name];
        std::string help = key.help;
        if (!key.default_value.empty()) help += fmt::format(" [default: {}]", key.default_value);
        cmd.options[key.name] = cmd.app->add_option("--" + key.name, slot, help)->group(key.section);
    }
}

gnak::ExperimentConfig resolve(const Command& cmd) {
    gnak::Settings s = gnak::default_settings();
    for (const auto& [k, v] : cmd.presets) gnak::set_setting(s, k, v);
    if (!cmd.config.empty()) gnak::merge_config_file(s, cmd.config);
    for (const auto& [name, opt] : cmd.options)
        if (opt->count() > 0) gnak::set_setting(s, name, cmd.values.at(name));
    return gnak::ExperimentConfig::from_settings(s);
}

void print_aggregates(const gnak::ExperimentOutput& out) {
    for (const auto& r : out.rows)
        if (r.kind == "aggregate")
            fmt::print("{:<12} k={:<3} layers={:<4} accuracy={:.4f} std={:.4f} runs={} {}\n", r.method, r.k,
                       r.cluster_layers, r.accuracy, r.std_dev, r.runs, r.status);
}

int run_pretrain(const Command& cmd) {
    const auto cfg = resolve(cmd);
    std::filesystem::create_directories(cfg.out);
    const auto task = gnak::load_task(cfg);
    const auto net = gnak::obtain_pretrained(cfg, task);
    const auto path = cfg.out / "pretrained.gnak";
    gnak::save_checkpoint(net, path);
    fmt::print("source accuracy {:.4f}, checkpoint {}\n", gnak::evaluate(net, task.source), path.string());
    return 0;
}

int run_cluster(const Command& cmd) {
    const auto cfg = resolve(cmd);
    std::filesystem::create_directories(cfg.out);
    const auto task = gnak::load_task(cfg);
    const auto net = gnak::obtain_pretrained(cfg, task);
    const auto counts = gnak::resolve_group_counts(cfg.groups, net);
    auto opts = cfg.clustering;
    opts.seed = gnak::derive_seed(cfg.seed, "kmeans");
    const auto batch = gnak::take_per_class(task.source, cfg.clustering_per_class).images;
    const auto assignment = gnak::build_group_assignment(net, counts, batch, opts);
    const auto path = cfg.out / "groups.txt";
    std::ofstream(path) << gnak::serialize_assignment(assignment);
    for (const auto& g : assignment.layers)
        fmt::print("layer {}: {} filters -> {} groups\n", g.layer, g.filter_count, g.group_count());
    fmt::print("groups written to {}\n", path.string());
    return 0;
}

int run_experiment_command(const Command& cmd) {
    const auto cfg = resolve(cmd);
    const auto out = gnak::run_experiment(cfg);
    print_aggregates(out);
    fmt::print("metrics written to {}\n", (cfg.out / "metrics.csv").string());
    return 0;
}

int run_eval(const Command& cmd, const std::string& checkpoint, const std::string& domain) {
    const auto cfg = resolve(cmd);
    const auto task = gnak::load_task(cfg);
    const auto net = gnak::load_checkpoint(checkpoint);
    const auto& data = domain == "source" ? task.source : task.target;
    if (net.output_size() != data.classes)
        throw std::invalid_argument(
            fmt::format("checkpoint has {} outputs but the {} data has {} classes", net.output_size(), domain,
                        data.classes));
    fmt::print("{} accuracy {:.4f} on {} samples\n", domain, gnak::evaluate(net, data), data.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grouped-neuron few-shot fine-tuning"};
    app.require_subcommand(1);

    std::vector<std::unique_ptr<Command>> commands;
    const auto make = [&](const std::string& name, const std::string& desc, gnak::Settings presets) {
        auto cmd = std::make_unique<Command>();
        cmd->app = app.add_subcommand(name, desc);
        cmd->presets = std::move(presets);
        add_config_flags(*cmd);
        commands.push_back(std::move(cmd));
        return commands.back().get();
    };

    Command* pretrain = make("pretrain", "train the source network and write pretrained.gnak", {});
    Command* cluster = make("cluster", "group filters of the pretrained network and write groups.txt",
                            {{"groups", "quarter"}});
    Command* finetune = make("finetune", "k-shot fine-tuning with fixed group counts", {{"task", "transfer"}});
    Command* search = make("search", "search per-layer group counts, then fine-tune",
                           {{"task", "transfer"}, {"method", "rl"}});
    Command* ablate_k = make("ablate-k", "plain vs grouped fine-tuning over the k sweep",
                             {{"task", "ablation-k"}, {"groups", "quarter"}});
    Command* ablate_layers =
        make("ablate-layers", "grouped fine-tuning over clustered-layer prefixes",
             {{"task", "ablation-layers"}, {"architecture", "mlp-deep"}, {"cluster-layers", "1,3,5,7,all"},
              {"groups", "quarter"}});
    Command* eval = make("eval", "accuracy of a checkpoint on the source or target data", {});
    std::string checkpoint, domain = "target";
    eval->app->add_option("--checkpoint", checkpoint, "GNAK checkpoint")->required()->check(CLI::ExistingFile);
    eval->app->add_option("--domain", domain, "source or target")->check(CLI::IsMember({"source", "target"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->app->parsed()) return run_pretrain(*pretrain);
        if (cluster->app->parsed()) return run_cluster(*cluster);
        if (eval->app->parsed()) return run_eval(*eval, checkpoint, domain);
        for (Command* c : {finetune, search, ablate_k, ablate_layers})
            if (c->app->parsed()) return run_experiment_command(*c);
    } catch (const std::exception& e) {
        std::cerr << "gnak: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
