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

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mega/eval.hpp"
#include "mega/oracle.hpp"
#include "mega/runconfig.hpp"
#include "mega/trainer.hpp"

namespace mega {

namespace detail {

// Write-to-temp then rename: a failed run leaves no partial output.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content)
{
    namespace fs = std::filesystem;
    fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw error("cannot write " + tmp.string());
        f << content;
    }
    fs::rename(tmp, path);
}

} // namespace detail

struct SeedRunResult {
    StageReport report;
    TrainCounters counters;
    std::vector<Tensor> meta_params; // meta-trained initialization, checkpoint payloads
    GcnWidths widths;
    int64_t nfeat = 0, nclass = 0;
    int64_t higher_order_gradient_calls = 0;
    int64_t peak_graph_nodes = 0;
};

// One full pipeline run: stream, meta-training, incremental stage.
inline SeedRunResult run_single_seed(const GraphDataset& ds, const RunConfig& cfg, uint64_t seed,
                                     LossPlugin* plugin = nullptr)
{
    SeedRunResult out;
    SplitConfig scfg = cfg.split;
    scfg.seed = seed;
    TrainConfig tcfg = cfg.train;
    tcfg.seed = seed;

    int64_t ho_before = ad::stats().higher_order_gradient_calls;
    ad::reset_peak();

    Workspace ws = Workspace::make(ds);
    TaskStream stream = build_task_stream(ws.ds, scfg);
    MetaTrainResult meta = meta_train(ws, stream, scfg, tcfg, &out.counters, plugin);
    out.meta_params = meta.theta.payloads();
    out.widths = meta.theta.widths;
    out.nfeat = meta.theta.nfeat;
    out.nclass = meta.theta.nclass;
    out.report = incremental_stage(meta.theta, stream, tcfg, ws, &out.counters, plugin);
    out.report.meta_loss_curve = std::move(meta.loss_curve);
    out.report.seed = seed;
    out.higher_order_gradient_calls = ad::stats().higher_order_gradient_calls - ho_before;
    out.peak_graph_nodes = ad::stats().peak;
    return out;
}

inline nlohmann::json report_to_json(const SeedRunResult& res, const nlohmann::json& config_echo)
{
    nlohmann::json stages = nlohmann::json::array();
    for (auto& row : res.report.rows)
        stages.push_back({{"stage", row.stage},
                          {"seen_classes", row.seen_classes},
                          {"buffer_size", row.buffer_size},
                          {"overall", row.overall},
                          {"per_task", row.per_task_acc}});
    return nlohmann::json{{"schema_version", 1},
                          {"seed", res.report.seed},
                          {"config", config_echo},
                          {"stages", stages},
                          {"accuracy_matrix", matrix_to_json(res.report.matrix())},
                          {"meta_loss_curve", res.report.meta_loss_curve},
                          {"inc_loss_curves", res.report.inc_loss_curves},
                          {"counters",
                           {{"kd_terms", res.counters.loss.kd_terms},
                            {"sir_terms", res.counters.loss.sir_terms},
                            {"meta_epochs_run", res.counters.meta_epochs_run},
                            {"higher_order_gradient_calls", res.higher_order_gradient_calls},
                            {"peak_graph_nodes", res.peak_graph_nodes}}}};
}

inline GraphDataset obtain_dataset(const RunConfig& cfg)
{
    if (cfg.use_sbm) return generate_sbm(cfg.sbm);
    if (!std::filesystem::exists(cfg.dataset_path))
        throw error("dataset not found: " + cfg.dataset_path);
    return load_dataset(cfg.dataset_path);
}

struct RunOutput {
    std::filesystem::path dir; // <out>/<config-hash>
    std::vector<SeedRunResult> seed_results;
    AggregateReport aggregate_report;
};

// Runs every seed (optionally in parallel workers), writes per-seed reports
// and the aggregate. Deterministic per (config, seed).
inline RunOutput execute_run(const RunConfig& cfg, std::ostream& log,
                             const GraphDataset* dataset = nullptr)
{
    namespace fs = std::filesystem;
    GraphDataset ds = dataset ? *dataset : obtain_dataset(cfg);

    RunOutput out;
    out.dir = fs::path(cfg.out_dir) / config_hash(cfg.echo);
    out.seed_results.resize(cfg.seeds.size());

    std::atomic<size_t> next{0};
    std::mutex err_mutex;
    std::vector<std::string> errors;
    auto worker = [&] {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= cfg.seeds.size()) return;
            try {
                out.seed_results[i] = run_single_seed(ds, cfg, cfg.seeds[i]);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(err_mutex);
                errors.push_back("seed " + std::to_string(cfg.seeds[i]) + ": " + e.what());
            }
        }
    };
    size_t nworkers = std::min<size_t>(static_cast<size_t>(cfg.jobs), cfg.seeds.size());
    if (nworkers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (size_t w = 0; w < nworkers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (!errors.empty()) {
        std::string all;
        for (auto& e : errors) all += e + "; ";
        throw error("run failed: " + all);
    }

    std::vector<AccuracyMatrix> matrices;
    for (size_t i = 0; i < cfg.seeds.size(); ++i) {
        const auto& res = out.seed_results[i];
        fs::path seed_dir = out.dir / std::to_string(cfg.seeds[i]);
        detail::write_file_atomic(seed_dir / "report.json",
                                  report_to_json(res, cfg.echo).dump(2) + "\n");
        detail::write_file_atomic(
            seed_dir / "meta_params.json",
            checkpoint_json(res.nfeat, res.nclass, res.widths, res.meta_params).dump(2) + "\n");
        matrices.push_back(res.report.matrix());
        log << "seed " << cfg.seeds[i] << ": final overall "
            << res.report.rows.back().overall << "\n";
    }
    out.aggregate_report = aggregate(matrices);
    detail::write_file_atomic(out.dir / "config.json", cfg.echo.dump(2) + "\n");
    detail::write_file_atomic(out.dir / "aggregate.json",
                              aggregate_to_json(out.aggregate_report).dump(2) + "\n");
    detail::write_file_atomic(out.dir / "aggregate.csv", aggregate_to_csv(out.aggregate_report));
    detail::write_file_atomic(out.dir / "plot_overall.txt",
                              plot_data_series(out.aggregate_report.overall_mean));
    return out;
}

inline int cmd_run(const RunConfig& cfg, std::ostream& log)
{
    RunOutput out = execute_run(cfg, log);
    log << "wrote " << (out.dir / "aggregate.json").string() << "\n";
    return 0;
}

// The eight flag combinations of {meta stage, replay term, distillation term}.
struct AblationVariant {
    std::string name;
    bool mctf, sir, kd;
};

inline const std::vector<AblationVariant>& ablation_variants()
{
    static const std::vector<AblationVariant> v{
        {"baseline", false, false, false}, {"a", true, false, false},
        {"b", false, true, false},         {"c", false, false, true},
        {"d", true, true, false},          {"e", true, false, true},
        {"f", false, true, true},          {"g", true, true, true},
    };
    return v;
}

struct AblationRow {
    std::string name;
    AggregateReport agg;
    int64_t kd_terms = 0;
    int64_t sir_terms = 0;
    int64_t higher_order_gradient_calls = 0;
};

inline std::vector<AblationRow> execute_ablation(const RunConfig& base,
                                                 const std::vector<std::string>& names,
                                                 std::ostream& log,
                                                 const GraphDataset* dataset = nullptr)
{
    namespace fs = std::filesystem;
    GraphDataset ds = dataset ? *dataset : obtain_dataset(base);
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        if (!names.empty() && std::find(names.begin(), names.end(), v.name) == names.end())
            continue;
        RunConfig cfg = base;
        cfg.method.clear();
        cfg.train.flags.use_mctf = v.mctf;
        cfg.train.flags.use_sir = v.sir;
        cfg.train.flags.use_kd = v.kd;
        cfg.train.flags.meta_gcl = true;
        cfg.train.flags.meta_mode = MetaMode::Mctf;
        cfg.echo["method"] = "";
        cfg.echo["train"]["use_mctf"] = v.mctf;
        cfg.echo["train"]["use_sir"] = v.sir;
        cfg.echo["train"]["use_kd"] = v.kd;
        cfg.echo["train"]["meta_gcl"] = true;
        cfg.echo["train"]["meta_mode"] = "mctf";
        cfg.out_dir = (fs::path(base.out_dir) / config_hash(base.echo) / ("variant_" + v.name)).string();

        log << "variant " << v.name << " (mctf=" << v.mctf << " sir=" << v.sir << " kd=" << v.kd
            << ")\n";
        RunOutput out = execute_run(cfg, log, &ds);
        AblationRow row;
        row.name = v.name;
        row.agg = out.aggregate_report;
        for (auto& r : out.seed_results) {
            row.kd_terms += r.counters.loss.kd_terms;
            row.sir_terms += r.counters.loss.sir_terms;
            row.higher_order_gradient_calls += r.higher_order_gradient_calls;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline int cmd_ablate(const RunConfig& base, const std::vector<std::string>& names,
                      std::ostream& log)
{
    namespace fs = std::filesystem;
    std::vector<AblationRow> rows = execute_ablation(base, names, log);
    fs::path dir = fs::path(base.out_dir) / config_hash(base.echo);

    nlohmann::json table = nlohmann::json::array();
    std::ostringstream csv;
    csv << "variant,mctf,sir,kd,final_overall_mean,final_overall_std\n";
    for (auto& row : rows) {
        const AblationVariant* v = nullptr;
        for (auto& av : ablation_variants())
            if (av.name == row.name) v = &av;
        table.push_back({{"variant", row.name},
                         {"mctf", v->mctf},
                         {"sir", v->sir},
                         {"kd", v->kd},
                         {"overall_mean", row.agg.overall_mean},
                         {"overall_std", row.agg.overall_std},
                         {"kd_terms", row.kd_terms},
                         {"sir_terms", row.sir_terms},
                         {"higher_order_gradient_calls", row.higher_order_gradient_calls}});
        csv << row.name << ',' << v->mctf << ',' << v->sir << ',' << v->kd << ','
            << row.agg.overall_mean.back() << ',' << row.agg.overall_std.back() << "\n";
        detail::write_file_atomic(dir / ("plot_" + row.name + ".txt"),
                                  plot_data_series(row.agg.overall_mean));
    }
    detail::write_file_atomic(dir / "ablation.json", table.dump(2) + "\n");
    detail::write_file_atomic(dir / "ablation.csv", csv.str());
    log << "wrote " << (dir / "ablation.json").string() << "\n";
    return 0;
}

inline int cmd_check_grad(std::ostream& log)
{
    std::vector<oracle::CheckResult> results = oracle::run_gradient_checks();
    bool all_pass = true;
    for (auto& r : results) {
        log << "check " << std::left << std::setw(26) << r.name << " max err " << std::scientific
            << std::setprecision(3) << r.max_err << " (tol " << r.tolerance << ") "
            << (r.pass ? "PASS" : "FAIL") << "\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

inline int cmd_gen_sbm(const SbmConfig& sbm, const std::string& out_dir, std::ostream& log)
{
    GraphDataset ds = generate_sbm(sbm);
    save_dataset(ds, out_dir);
    log << "wrote sbm dataset: " << ds.num_nodes << " nodes, " << ds.edges.size() << " edges, "
        << ds.num_classes << " classes -> " << out_dir << "\n";
    return 0;
}

inline int cmd_show_report(const std::string& path, std::ostream& log)
{
    std::ifstream f(path);
    if (!f) throw error("cannot open report: " + path);
    nlohmann::json j;
    f >> j;
    auto print_row = [&](const std::string& stage, double overall, const std::vector<double>& per) {
        log << std::left << std::setw(8) << stage << std::fixed << std::setprecision(4) << overall;
        for (double p : per) log << "  " << p;
        log << "\n";
    };
    if (j.contains("stages")) {
        log << "seed " << j.at("seed").get<uint64_t>() << "\n";
        log << std::left << std::setw(8) << "stage" << "overall  per-task...\n";
        for (auto& s : j.at("stages"))
            print_row(s.at("stage").get<std::string>(), s.at("overall").get<double>(),
                      s.at("per_task").get<std::vector<double>>());
    } else if (j.contains("overall_mean")) {
        AggregateReport r = aggregate_from_json(j);
        log << "aggregate over " << r.num_runs << " runs\n";
        log << std::left << std::setw(8) << "stage" << "overall  per-task...\n";
        for (size_t i = 0; i < r.overall_mean.size(); ++i)
            print_row(stage_name(static_cast<int64_t>(i)), r.overall_mean[i], r.per_task_mean[i]);
    } else {
        throw error("unrecognized report format: " + path);
    }
    return 0;
}

} // namespace mega
