#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "gnak/checkpoint.hpp"
#include "gnak/experiment.hpp"

using namespace gnak;

namespace fs = std::filesystem;

namespace {

SyntheticTaskOptions tiny_task() {
    SyntheticTaskOptions o;
    o.source_per_class = 40;
    o.target_per_class = 40;
    return o;
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("gnak_unit_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("config defaults and precedence") {
    Settings s = default_settings();
    CHECK(s.at("k") == "5");
    merge_config_text(s, "[experiment]\nk = 10\n[finetune]\nlr = 0.2\n");
    CHECK(s.at("k") == "10");
    set_setting(s, "k", "1");
    const auto cfg = ExperimentConfig::from_settings(s);
    CHECK(cfg.k == 1);
    CHECK(cfg.finetune.schedule.initial == 0.2);
    CHECK(cfg.validation_fraction == 0.2);

    Settings c;
    c["cluster-layers"] = "1,3,all";
    const auto cl = ExperimentConfig::from_settings(c).cluster_prefixes;
    REQUIRE(cl.size() == 3);
    CHECK(cl[0] == std::optional<std::size_t>{1});
    CHECK_FALSE(cl[2].has_value());
}

TEST_CASE("config errors") {
    Settings s = default_settings();
    CHECK_THROWS_WITH(merge_config_text(s, "[experiment]\nbogus = 1\n"), doctest::Contains("unknown config key"));
    CHECK_THROWS_WITH(merge_config_text(s, "[loss]\nk = 1\n"), doctest::Contains("belongs in [experiment]"));
    CHECK_THROWS(set_setting(s, "nope", "1"));
    s["k"] = "five";
    CHECK_THROWS(ExperimentConfig::from_settings(s));
    Settings t;
    t["task"] = "classify";
    CHECK_THROWS(ExperimentConfig::from_settings(t));
    CHECK_THROWS(merge_config_file(s, "/nonexistent/gnak.ini"));
}

TEST_CASE("every key has a section and help") {
    std::set<std::string> names;
    for (const auto& k : config_keys()) {
        CHECK_FALSE(k.section.empty());
        CHECK_FALSE(k.help.empty());
        CHECK(names.insert(k.name).second);
    }
}

TEST_CASE("task and method names round trip") {
    for (auto t : {TaskKind::transfer, TaskKind::domain_adapt_toy, TaskKind::ablation_k, TaskKind::ablation_layers})
        CHECK(parse_task_kind(to_string(t)) == t);
    for (auto m : {SearchMethod::none, SearchMethod::manual, SearchMethod::greedy, SearchMethod::rl})
        CHECK(parse_search_method(to_string(m)) == m);
}

TEST_CASE("IDX parsing") {
    const std::vector<std::size_t> dims{2, 3};
    const std::vector<std::uint8_t> payload{0, 1, 2, 3, 4, 255};
    const auto bytes = encode_idx_u8(dims, payload);
    const Tensor t = parse_idx(bytes);
    CHECK(t.shape() == dims);
    CHECK(t[5] == 255.0);

    auto bad = bytes;
    bad[0] = 1;
    CHECK_THROWS_WITH_AS(parse_idx(bad), doctest::Contains("bad magic"), IdxError);
    CHECK_THROWS_WITH_AS(parse_idx(std::vector<std::uint8_t>{0, 0}), doctest::Contains("truncated header"), IdxError);
    auto shortp = bytes;
    shortp.pop_back();
    CHECK_THROWS_AS(parse_idx(shortp), IdxError);
    auto badtype = bytes;
    badtype[2] = 0x42;
    CHECK_THROWS_AS(parse_idx(badtype), IdxError);
}

TEST_CASE("IDX dataset count mismatch") {
    const auto dir = scratch("idx");
    const std::vector<std::size_t> idims{3, 2, 2}, ldims{2};
    write_file_bytes(dir / "img", encode_idx_u8(idims, std::vector<std::uint8_t>(12, 7)));
    write_file_bytes(dir / "lab", encode_idx_u8(ldims, std::vector<std::uint8_t>{0, 1}));
    CHECK_THROWS_WITH(load_idx_dataset(dir / "img", dir / "lab"), doctest::Contains("image count 3 does not match label count 2"));
    fs::remove_all(dir);
}

TEST_CASE("synthetic task is deterministic and class-disjoint") {
    const auto a = make_synthetic_transfer_task(3, tiny_task());
    const auto b = make_synthetic_transfer_task(3, tiny_task());
    const auto c = make_synthetic_transfer_task(4, tiny_task());
    CHECK(a.source.images == b.source.images);
    CHECK(a.target.labels == b.target.labels);
    CHECK_FALSE(a.target.images == c.target.images);
    for (auto s : a.source.class_ids)
        CHECK(std::find(a.target.class_ids.begin(), a.target.class_ids.end(), s) == a.target.class_ids.end());
    CHECK_NOTHROW(a.source.validate());
    CHECK_NOTHROW(a.target.validate());
    CHECK(a.target.size() == 5 * 40);
}

TEST_CASE("k-shot sampling sizes and hygiene") {
    auto opts = tiny_task();
    opts.target_per_class = 30;
    const auto task = make_synthetic_transfer_task(1, opts);
    for (std::size_t k : {1, 5, 10, 15, 20, 25}) {
        const auto ks = sample_kshot(task.target, k, 7);
        CHECK(ks.kshot.size() == k * task.target.classes);
        std::vector<std::size_t> per(task.target.classes, 0);
        for (auto l : ks.kshot.labels) ++per[l];
        for (auto n : per) CHECK(n == k);
        std::set<std::size_t> seen(ks.kshot_indices.begin(), ks.kshot_indices.end());
        for (auto i : ks.heldout_indices) CHECK(seen.insert(i).second);
        CHECK(seen.size() == task.target.size());

        const auto hs = split_validation(ks.heldout, 0.2, 8);
        std::set<std::size_t> v(hs.validation_indices.begin(), hs.validation_indices.end());
        for (auto i : hs.test_indices) CHECK(v.count(i) == 0);
        CHECK(hs.validation.size() + hs.test.size() == ks.heldout.size());
    }
    CHECK(sample_kshot(task.target, 5, 7).kshot_indices == sample_kshot(task.target, 5, 7).kshot_indices);
    CHECK_THROWS(sample_kshot(task.target, 0, 1));
    CHECK_THROWS_WITH(sample_kshot(task.target, 31, 1), doctest::Contains("fewer than k = 31"));
    CHECK_THROWS(split_validation(task.target, 1.0, 1));
}

TEST_CASE("aggregates recompute from run rows") {
    std::vector<MetricsRow> rows(4);
    const std::vector<double> acc{0.5, 0.75, 0.6, 0.9};
    for (std::size_t i = 0; i < 4; ++i) {
        rows[i].kind = "run";
        rows[i].accuracy = acc[i];
        rows[i].validation_accuracy = acc[i] / 2;
    }
    const auto agg = aggregate_rows(rows);
    double mean = 0.0;
    for (double a : acc) mean += a / 4.0;
    double ss = 0.0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    CHECK(std::abs(agg.accuracy - mean) < 1e-12);
    CHECK(std::abs(agg.std_dev - std::sqrt(ss / 3.0)) < 1e-12);
    CHECK(agg.runs == 4);
    CHECK(agg.status == "ok");

    rows[1].status = "failed:finetune";
    const auto partial = aggregate_rows(rows);
    CHECK(partial.runs == 3);
    CHECK(partial.status == "partial");
    CHECK(std::abs(partial.accuracy - (0.5 + 0.6 + 0.9) / 3.0) < 1e-12);
}

TEST_CASE("metrics csv header") {
    std::ostringstream out;
    write_metrics_csv(out, std::vector<MetricsRow>{});
    CHECK(out.str() == "kind,run_id,seed,method,k,cluster_layers,accuracy,validation_accuracy,std,runs,status,counts\n");
}

TEST_CASE("group count specs") {
    Rng rng(1);
    const Network net = build_architecture("conv-small", {10, 10, 1}, 5, rng);
    const auto layers = net.clusterable_layers();
    REQUIRE(layers.size() == 3);
    const std::vector<std::size_t> nf{8, 16, 32};
    CHECK(resolve_group_counts("singleton", net) == nf);
    CHECK(resolve_group_counts("single", net) == std::vector<std::size_t>{1, 1, 1});
    CHECK(resolve_group_counts("half", net) == std::vector<std::size_t>{4, 8, 16});
    CHECK(resolve_group_counts("quarter", net) == std::vector<std::size_t>{2, 4, 8});
    CHECK(resolve_group_counts("frac:0.3", net) == std::vector<std::size_t>{2, 4, 8});
    CHECK(resolve_group_counts("3", net) == std::vector<std::size_t>{3, 3, 3});
    CHECK(resolve_group_counts("1,2,3", net) == std::vector<std::size_t>{1, 2, 3});
    CHECK_THROWS(resolve_group_counts("1,2", net));
    CHECK_THROWS(resolve_group_counts("frac:2", net));
}

TEST_CASE("architectures") {
    Rng rng(2);
    const Network deep = build_architecture("mlp-deep", {10, 10, 1}, 4, rng);
    CHECK(deep.clusterable_layers().size() == 8);
    CHECK(deep.output_size() == 4);
    CHECK_THROWS(build_architecture("resnet", {10, 10, 1}, 4, rng));
}

TEST_CASE("a failing stage is reported in the status") {
    Settings s;
    s["groups"] = "64,2,2";  // the first conv layer has 8 filters
    s["pretrain-iterations"] = "5";
    s["iterations"] = "5";
    s["source-per-class"] = "30";
    s["target-per-class"] = "30";
    const auto cfg = ExperimentConfig::from_settings(s);
    const auto task = load_task(cfg);
    Rng rng = make_rng(cfg.seed, "init");
    const Network net = build_architecture(cfg.architecture, task.source.sample_shape(), task.source.classes, rng);
    RunSpec spec;
    spec.groups = "64,2,2";
    spec.method_label = "gna-none";
    const auto out = execute_run(cfg, task, net, spec);
    CHECK(out.row.status == "failed:cluster");
    CHECK(out.log.back().rfind("cluster failed", 0) == 0);

    spec.groups = "2";
    const auto ok = execute_run(cfg, task, net, spec);
    CHECK(ok.row.status == "ok");
    CHECK(ok.trace.size() == 5);
    CHECK(ok.row.run_id == "r000");
    CHECK(ok.row.counts == "2;2;2");
}
