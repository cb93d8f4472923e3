// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Acceptance suite: every criterion prints one PASS/FAIL line; the binary
// exits nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mega/oracle.hpp"
#include "mega/runconfig.hpp"
#include "mega/runner.hpp"

using namespace mega;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    int id;
    std::string title;
    double time_limit_s;
    std::function<void(std::ostringstream&)> body; // throws on failure
};

int g_failures = 0;

void run_criterion(const Criterion& c)
{
    std::ostringstream detail;
    std::string failure;
    auto t0 = std::chrono::steady_clock::now();
    try {
        c.body(detail);
    } catch (const std::exception& e) {
        failure = e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (failure.empty() && secs > c.time_limit_s) {
        std::ostringstream os;
        os << "runtime " << secs << "s exceeds limit " << c.time_limit_s << "s";
        failure = os.str();
    }
    bool pass = failure.empty();
    if (!pass) ++g_failures;
    std::printf("[%s] criterion %d: %s (%.1fs)%s%s\n", pass ? "PASS" : "FAIL", c.id,
                c.title.c_str(), secs, detail.str().empty() ? "" : " | ", detail.str().c_str());
    if (!pass) std::printf("       reason: %s\n", failure.c_str());
    std::fflush(stdout);
}

void require(bool cond, const std::string& msg)
{
    if (!cond) throw error(msg);
}

// ---------------------------------------------------------------------------
// The synthetic benchmark used by criteria 5 and 6. The episode shape is
// fixed by the criteria; the remaining hyper-parameters were calibrated once
// on the first oracle run and are frozen here, together with the thresholds.
// ---------------------------------------------------------------------------

nlohmann::json benchmark_config(const std::string& out_dir)
{
    nlohmann::json doc;
    doc["dataset"]["sbm"] = {{"classes", 12},          {"nodes_per_class", 80},
                             {"intra_edge_prob", 0.1}, {"inter_edge_prob", 0.005},
                             {"feature_dim", 12},      {"feature_noise", 0.8},
                             {"seed", 2025}};
    doc["split"] = {{"N", 2},   {"K", 3},           {"R", 20},
                    {"base_classes", 6},            {"meta_query_cap", 25},
                    {"novel_tasks", 3}};
    doc["train"] = {{"meta_epochs", 150}, {"inc_finetune_steps", 10}, {"inner_lr", 0.1}};
    doc["seeds"] = {1, 2, 3, 4, 5};
    doc["out_dir"] = out_dir;
    doc["jobs"] = 5;
    return doc;
}

fs::path scratch_dir(const std::string& name)
{
    fs::path p = fs::temp_directory_path() / ("mega_acceptance_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// ---------------------------------------------------------------------------

void criterion_meta_gradient(std::ostringstream& detail)
{
    double worst = 0;
    for (int64_t m : {int64_t(1), int64_t(2)}) {
        double err = oracle::meta_gradient_fd_error(31, m, /*kdsir=*/true);
        worst = std::max(worst, err);
        require(err < 1e-4, "m=" + std::to_string(m) + ": max relative error " +
                                std::to_string(err) + " >= 1e-4");
    }
    detail << "max rel err " << worst;
}

void criterion_maml_reduction(std::ostringstream& detail)
{
    auto f = oracle::detail::tiny_fixture(77, 1);
    f.scfg.N = 4; // one pseudo-task: p = 1
    f.cfg.flags.use_kd = false;
    f.cfg.flags.use_sir = false;
    f.cfg.flags.meta_gcl = false;
    f.cfg.dropout = 0.0;
    f.cfg.weight_decay = 5e-4;

    SeenClassMask mask(f.ds.num_classes);
    mask.reveal(f.stream.base.classes);
    VisibleWorld world = f.ws->world(mask, Visibility::FullGraph);
    Rng plan_rng(9);
    EpochPlan plan = make_epoch_plan(f.stream.base, f.scfg, plan_rng);
    require(plan.episode.sequence.size() == 1, "expected a single pseudo-task");

    ParamSet theta = oracle::detail::jittered(
        init_params(f.ds.num_features(), f.ds.num_classes, 10, f.cfg.widths), 11);
    AdamState adam = AdamState::like(theta);
    KdSirPlugin plugin;
    EpochResult res =
        mctf_epoch(theta, plan, f.cfg, world, mask, adam, ForwardMode::eval(), plugin);
    std::vector<Tensor> ref = oracle::reference_maml_step(
        theta, plan.episode.sequence[0], *world.adj, world.features, mask, f.cfg.inner_lr,
        f.cfg.outer_lr, f.cfg.inner_steps, f.cfg.weight_decay);

    double worst = 0;
    for (size_t i = 0; i < ref.size(); ++i) {
        const Tensor& a = res.theta.values[i].payload();
        for (int64_t k = 0; k < a.numel(); ++k)
            worst = std::max(worst, std::abs(a.data()[static_cast<size_t>(k)] -
                                             ref[i].data()[static_cast<size_t>(k)]));
    }
    require(worst < 1e-8, "max absolute deviation " + std::to_string(worst) + " >= 1e-8");
    detail << "max abs dev " << worst;
}

void criterion_loss_units(std::ostringstream& detail)
{
    // KD zero case.
    {
        Tensor t(Shape{4, 3});
        Rng rng(1);
        for (double& v : t.data()) v = rng.uniform(-1, 1);
        SeenClassMask mask(3);
        mask.reveal({0, 1, 2});
        double z =
            kd_from_logits(ad::make_const(t), ad::make_const(t), {0, 2}, mask).payload().item();
        require(z == 0.0, "kd zero case is not exact");
    }
    // KD one-shift case: every entry differs by 1, loss is exactly 1.
    {
        Tensor t(Shape{4, 3});
        Rng rng(2);
        for (double& v : t.data()) v = rng.uniform(-1, 1);
        Tensor s = t;
        for (double& v : s.data()) v += 1.0;
        SeenClassMask mask(3);
        mask.reveal({0, 1, 2});
        double v = kd_from_logits(ad::make_const(t), ad::make_const(s), {0, 1, 2, 3}, mask)
                       .payload()
                       .item();
        require(std::abs(v - 1.0) < 1e-12, "kd one-shift case deviates from 1");
    }
    // Masked CE ln(c) uniform case.
    for (int64_t c : {2, 3, 7}) {
        Tensor logits(Shape{2, c});
        SeenClassMask mask(c);
        std::vector<int64_t> all;
        for (int64_t k = 0; k < c; ++k) all.push_back(k);
        mask.reveal(all);
        double v =
            masked_cross_entropy(ad::make_const(logits), {0, c - 1}, mask).payload().item();
        require(std::abs(v - std::log(static_cast<double>(c))) < 1e-12,
                "uniform CE deviates from ln(c) at c=" + std::to_string(c));
    }
    // Empty-buffer terms are exact zeros.
    {
        SbmConfig sbm;
        sbm.classes = 2;
        sbm.nodes_per_class = 3;
        sbm.intra_edge_prob = 0.9;
        sbm.inter_edge_prob = 0.1;
        sbm.feature_dim = 2;
        sbm.seed = 3;
        GraphDataset ds = generate_sbm(sbm);
        Workspace ws = Workspace::make(ds);
        SeenClassMask mask(2);
        mask.reveal({0, 1});
        ParamSet theta = init_params(2, 2, 4, GcnWidths{2, 2});
        ReplayBuffer empty;
        double sir =
            sir_loss(theta, empty, *ws.full_adj, ws.full_features, mask).payload().item();
        require(sir == 0.0, "empty-buffer SIR term is not exactly zero");
        double kd = kd_from_logits(ad::make_const(Tensor(Shape{6, 2})),
                                   ad::make_const(Tensor(Shape{6, 2})), {}, mask)
                        .payload()
                        .item();
        require(kd == 0.0, "empty-row KD term is not exactly zero");
    }
    detail << "all exact";
}

void criterion_protocol_invariants(std::ostringstream& detail)
{
    Rng meta_rng(909090);
    int64_t stream_checks = 0, episode_checks = 0;
    while (stream_checks < 1000) {
        SbmConfig sbm;
        sbm.classes = 4 + meta_rng.below(6);         // 4..9
        sbm.nodes_per_class = 6 + meta_rng.below(7); // 6..12
        sbm.intra_edge_prob = 0.6;
        sbm.inter_edge_prob = 0.05;
        sbm.feature_dim = sbm.classes;
        sbm.feature_noise = 0.3;
        sbm.seed = meta_rng.next_u64();
        GraphDataset ds = generate_sbm(sbm);

        SplitConfig cfg;
        cfg.N = 2 + meta_rng.below(2); // 2..3
        cfg.K = 1 + meta_rng.below(2);
        cfg.R = 1 + meta_rng.below(3);
        while (cfg.K + cfg.R > sbm.nodes_per_class - 1) cfg.R = std::max<int64_t>(1, cfg.R - 1);
        cfg.base_class_count = std::max<int64_t>(cfg.N, 2 + meta_rng.below(sbm.classes - 2));
        cfg.meta_query_cap = 1 + meta_rng.below(3);
        cfg.seed = meta_rng.next_u64();

        TaskStream stream = build_task_stream(ds, cfg);
        ++stream_checks;

        // Stream invariants: disjoint class sets; support/query disjoint per
        // task; novel support sizes exactly N*K.
        std::set<int64_t> classes_seen;
        auto check_task = [&](const TaskSpec& t, bool base) {
            std::set<int64_t> nodes;
            for (int64_t c : t.classes)
                require(classes_seen.insert(c).second, "class reused across tasks");
            int64_t support_total = 0;
            for (auto& [c, v] : t.support) {
                support_total += static_cast<int64_t>(v.size());
                for (int64_t n : v) require(nodes.insert(n).second, "node reused inside a task");
            }
            for (auto& [c, v] : t.query) {
                require(static_cast<int64_t>(v.size()) == cfg.R, "query size is not R");
                for (int64_t n : v) require(nodes.insert(n).second, "support/query overlap");
            }
            if (!base) require(support_total == cfg.N * cfg.K, "novel support size is not N*K");
        };
        check_task(stream.base, true);
        for (auto& t : stream.novel) check_task(t, false);

        // Episode invariants: pairwise-disjoint pseudo-task classes whose
        // union is the base label space; disjoint support/query; buffer
        // single-instance under per-task updates.
        Rng ep_rng(meta_rng.next_u64());
        MetaEpisode ep = sample_meta_episode(stream.base, cfg, ep_rng);
        ++episode_checks;
        std::set<int64_t> union_classes;
        ReplayBuffer bm;
        bm.scope = ReplayBuffer::Scope::MetaEpoch;
        for (auto& t : ep.sequence) {
            std::set<int64_t> nodes;
            for (int64_t c : t.classes)
                require(union_classes.insert(c).second, "pseudo-task classes overlap");
            for (auto& [c, v] : t.support) {
                require(static_cast<int64_t>(v.size()) == cfg.K, "pseudo-task support is not K");
                for (int64_t n : v) require(nodes.insert(n).second, "episode node reuse");
            }
            for (auto& [c, v] : t.query)
                for (int64_t n : v)
                    require(nodes.insert(n).second, "episode support/query overlap");
            update_buffer(bm, t, ep_rng);
        }
        require(union_classes == std::set<int64_t>(stream.base.classes.begin(),
                                                   stream.base.classes.end()),
                "episode union is not the base label space");
        require(bm.size() == static_cast<int64_t>(stream.base.classes.size()),
                "buffer is not single-instance per class");
    }

    // Epoch-clearing invariant under real epochs.
    for (int trial = 0; trial < 100; ++trial) {
        auto f = oracle::detail::tiny_fixture(5000 + static_cast<uint64_t>(trial), 1);
        SeenClassMask mask(f.ds.num_classes);
        mask.reveal(f.stream.base.classes);
        VisibleWorld world = f.ws->world(mask, Visibility::FullGraph);
        Rng plan_rng(static_cast<uint64_t>(trial));
        EpochPlan plan = make_epoch_plan(f.stream.base, f.scfg, plan_rng);
        ParamSet theta = init_params(f.ds.num_features(), f.ds.num_classes,
                                     static_cast<uint64_t>(trial), f.cfg.widths);
        AdamState adam = AdamState::like(theta);
        KdSirPlugin plugin;
        ReplayBuffer bm;
        mctf_epoch(theta, plan, f.cfg, world, mask, adam, ForwardMode::eval(), plugin, nullptr,
                   &bm);
        require(bm.empty(), "meta buffer not empty after an epoch");
    }
    detail << stream_checks << " streams, " << episode_checks
           << " episodes, 100 epochs, zero violations";
}

void criterion_forgetting_ordering(std::ostringstream& detail)
{
    nlohmann::json doc = benchmark_config(scratch_dir("bench").string());
    std::map<std::string, AggregateReport> by_method;
    GraphDataset ds;
    bool have = false;
    for (std::string method : {"finetune", "maml", "mctf", "mega"}) {
        nlohmann::json d = doc;
        d["method"] = method;
        RunConfig cfg = parse_run_config(d);
        if (!have) {
            ds = obtain_dataset(cfg);
            have = true;
        }
        std::ostringstream log;
        by_method[method] = execute_run(cfg, log, &ds).aggregate_report;
    }
    double ft = by_method.at("finetune").overall_mean.back();
    double maml = by_method.at("maml").overall_mean.back();
    double mctf = by_method.at("mctf").overall_mean.back();
    double mega = by_method.at("mega").overall_mean.back();
    const AggregateReport& ftrep = by_method.at("finetune");
    double drop = ftrep.per_task_mean.front()[0] - ftrep.per_task_mean.back()[0];

    detail << "finetune " << ft << " < maml " << maml << " < mctf " << mctf << " < mega " << mega
           << "; finetune base drop " << drop;

    require(ft < maml, "ordering violated: finetune >= maml");
    require(maml < mctf, "ordering violated: maml >= mctf");
    require(mctf < mega, "ordering violated: mctf >= mega");
    require(mega - ft >= 0.10, "mega does not exceed finetune by 10 accuracy points");
    require(drop >= 0.30, "finetune base-task accuracy drop is below 30 points");
}

void criterion_ablation_semantics(std::ostringstream& detail)
{
    nlohmann::json doc = benchmark_config(scratch_dir("ablate").string());
    RunConfig base = parse_run_config(doc);
    std::ostringstream log;
    std::vector<AblationRow> rows = execute_ablation(base, {}, log);
    require(rows.size() == 8, "expected 8 ablation variants");

    std::map<std::string, const AblationRow*> by_name;
    for (auto& r : rows) by_name[r.name] = &r;
    for (auto& v : ablation_variants()) {
        const AblationRow* r = by_name.at(v.name);
        if (!v.kd) require(r->kd_terms == 0, "variant " + v.name + " executed KD terms");
        if (!v.sir) require(r->sir_terms == 0, "variant " + v.name + " executed SIR terms");
        if (!v.mctf)
            require(r->higher_order_gradient_calls == 0,
                    "variant " + v.name + " invoked second-order machinery");
    }
    double g = by_name.at("g")->agg.overall_mean.back();
    double a = by_name.at("a")->agg.overall_mean.back();
    double f = by_name.at("f")->agg.overall_mean.back();
    detail << "g " << g << " >= a " << a << ", g >= f " << f;
    require(g >= a, "variant g below variant a");
    require(g >= f, "variant g below variant f");
}

void criterion_complexity_scaling(std::ostringstream& detail)
{
    std::vector<double> xs, ys;
    for (int64_t p = 1; p <= 4; ++p)
        for (int64_t m = 1; m <= 3; ++m) {
            SbmConfig sbm;
            sbm.classes = 2 * p;
            sbm.nodes_per_class = 4;
            sbm.intra_edge_prob = 0.8;
            sbm.inter_edge_prob = 0.1;
            sbm.feature_dim = 2 * p;
            sbm.feature_noise = 0.3;
            sbm.seed = 100 + static_cast<uint64_t>(p);
            GraphDataset ds = generate_sbm(sbm);
            Workspace ws = Workspace::make(ds);
            SplitConfig scfg;
            scfg.N = 2;
            scfg.K = 1;
            scfg.R = 1;
            scfg.base_class_count = 2 * p;
            scfg.meta_query_cap = 1;
            scfg.seed = 5;
            TaskStream stream = build_task_stream(ds, scfg);
            TrainConfig cfg;
            cfg.widths = GcnWidths{4, 3};
            cfg.inner_steps = m;
            cfg.dropout = 0.0;
            SeenClassMask mask(ds.num_classes);
            mask.reveal(stream.base.classes);
            VisibleWorld world = ws.world(mask, Visibility::FullGraph);
            Rng plan_rng(static_cast<uint64_t>(p * 10 + m));
            EpochPlan plan = make_epoch_plan(stream.base, scfg, plan_rng);
            ParamSet theta = init_params(ds.num_features(), ds.num_classes, 3, cfg.widths);
            AdamState adam = AdamState::like(theta);
            KdSirPlugin plugin;
            ad::reset_peak();
            int64_t baseline = ad::stats().live;
            mctf_epoch(theta, plan, cfg, world, mask, adam, ForwardMode::eval(), plugin);
            ys.push_back(static_cast<double>(ad::stats().peak - baseline));
            xs.push_back(static_cast<double>(p * m));
        }
    double n = static_cast<double>(xs.size()), sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    double b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    double a = (sy - b * sx) / n;
    double ss_res = 0, ss_tot = 0, ymean = sy / n;
    for (size_t i = 0; i < xs.size(); ++i) {
        double fit = a + b * xs[i];
        ss_res += (ys[i] - fit) * (ys[i] - fit);
        ss_tot += (ys[i] - ymean) * (ys[i] - ymean);
    }
    double r2 = 1.0 - ss_res / ss_tot;
    detail << "R^2 " << r2 << " over p in 1..4, m in 1..3";
    require(r2 >= 0.95, "affine fit R^2 " + std::to_string(r2) + " below 0.95");
}

void criterion_stream_shape(std::ostringstream& detail)
{
    // 77-class dataset, 50-class base, 3-way novel tasks: exactly 9 of them.
    SbmConfig sbm;
    sbm.classes = 77;
    sbm.nodes_per_class = 7;
    sbm.intra_edge_prob = 0.5;
    sbm.inter_edge_prob = 0.01;
    sbm.feature_dim = 77;
    sbm.feature_noise = 0.2;
    sbm.seed = 5;
    GraphDataset ds = generate_sbm(sbm);
    SplitConfig cfg;
    cfg.N = 3;
    cfg.K = 3;
    cfg.R = 2;
    cfg.base_class_count = 50;
    cfg.seed = 7;
    TaskStream stream = build_task_stream(ds, cfg);
    require(stream.novel.size() == 9,
            "expected 9 novel tasks, got " + std::to_string(stream.novel.size()));
    std::set<int64_t> eval_classes;
    for (auto& t : stream.novel) eval_classes.insert(t.classes.begin(), t.classes.end());
    require(eval_classes.size() == 27, "evaluation class count is not 27");
    detail << "9 novel tasks, 27 evaluation classes";
}

void criterion_determinism(std::ostringstream& detail)
{
    fs::path out = scratch_dir("determinism");
    nlohmann::json doc;
    doc["dataset"]["sbm"] = {{"classes", 6},           {"nodes_per_class", 8},
                             {"intra_edge_prob", 0.6}, {"inter_edge_prob", 0.05},
                             {"feature_dim", 6},       {"feature_noise", 0.4},
                             {"seed", 99}};
    doc["split"] = {{"N", 2},   {"K", 2},          {"R", 2},
                    {"base_classes", 2},           {"meta_query_cap", 3},
                    {"novel_tasks", 2}};
    doc["train"] = {{"meta_epochs", 3}, {"inc_finetune_steps", 2}, {"hidden1", 4}, {"hidden2", 3}};
    doc["out_dir"] = out.string();
    doc["seeds"] = {1, 2};
    RunConfig cfg = parse_run_config(doc);
    std::ostringstream log;
    require(cmd_run(cfg, log) == 0, "first run failed");
    fs::path dir = out / config_hash(cfg.echo);
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    std::string r1 = slurp(dir / "1" / "report.json");
    std::string r2 = slurp(dir / "2" / "report.json");
    std::string agg = slurp(dir / "aggregate.json");
    require(!r1.empty() && !r2.empty(), "missing reports");
    require(cmd_run(cfg, log) == 0, "second run failed");
    require(slurp(dir / "1" / "report.json") == r1, "seed-1 report differs between runs");
    require(slurp(dir / "2" / "report.json") == r2, "seed-2 report differs between runs");
    require(slurp(dir / "aggregate.json") == agg, "aggregate differs between runs");
    detail << "byte-identical reports";
}

} // namespace

int main()
{
    std::vector<Criterion> criteria{
        {1,
         "meta-gradient matches central finite differences (12-node fixture, p=2, m in {1,2}, "
         "KD+SIR on, rel err < 1e-4)",
         30.0, criterion_meta_gradient},
        {2, "p=1 epoch with KD/SIR off equals the independent MAML reference step (abs 1e-8)",
         5.0, criterion_maml_reduction},
        {3, "loss-term unit suite exact to 1e-12", 5.0, criterion_loss_units},
        {4, "1000 randomized stream/episode generations satisfy all protocol invariants", 60.0,
         criterion_protocol_invariants},
        {5,
         "forgetting-mitigation ordering finetune < maml < mctf < mega on the synthetic "
         "benchmark",
         900.0, criterion_forgetting_ordering},
        {6,
         "8-variant ablation semantics and ordering (g >= a, g >= f; disabled components never "
         "run)",
         900.0, criterion_ablation_semantics},
        {7, "peak graph-node count is affine in p*m (R^2 >= 0.95)", 60.0,
         criterion_complexity_scaling},
        {8, "50-base/27-eval stream shape yields exactly 9 novel 3-way tasks", 30.0,
         criterion_stream_shape},
        {9, "identical config and seed reproduce byte-identical reports", 120.0,
         criterion_determinism},
    };
    for (auto& c : criteria) run_criterion(c);
    if (g_failures) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all %zu criteria passed\n", criteria.size());
    return 0;
}
