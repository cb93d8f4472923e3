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

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mega/runconfig.hpp"
#include "mega/runner.hpp"

namespace {

nlohmann::json load_config_document(const std::string& config_path,
                                    const std::vector<std::string>& sets)
{
    nlohmann::json doc = nlohmann::json::object();
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        if (!f) throw mega::error("cannot open config: " + config_path);
        try {
            f >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw mega::error("config parse error in " + config_path + ": " + e.what());
        }
    }
    mega::apply_set_overrides(doc, sets);
    return doc;
}

mega::RunConfig build_run_config(const std::string& config_path,
                                 const std::vector<std::string>& sets,
                                 const std::vector<uint64_t>& seeds, const std::string& out_dir,
                                 int64_t jobs)
{
    nlohmann::json doc = load_config_document(config_path, sets);
    if (!seeds.empty()) doc["seeds"] = seeds;
    if (!out_dir.empty()) doc["out_dir"] = out_dir;
    if (jobs > 0) doc["jobs"] = jobs;
    return mega::parse_run_config(doc);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Meta graph continual learning for few-shot class-incremental "
                 "node classification"};
    app.require_subcommand(1);

    std::string config_path, out_dir, report_path, sbm_out;
    std::vector<std::string> sets;
    std::vector<uint64_t> seeds;
    std::vector<std::string> variants;
    int64_t jobs = 0;
    mega::SbmConfig sbm;

    auto* run = app.add_subcommand("run", "Full pipeline: stream, meta-training, incremental "
                                          "stage, reports");
    run->add_option("--config", config_path, "JSON config file");
    run->add_option("--set", sets, "Override config keys, e.g. --set train.meta_epochs=50");
    run->add_option("--seeds", seeds, "Comma-separated seed list")->delimiter(',');
    run->add_option("--out", out_dir, "Output root (default $MEGA_OUT_ROOT or ./runs)");
    run->add_option("--jobs", jobs, "Parallel seed workers");

    auto* ablate = app.add_subcommand("ablate", "Run the 8-variant component ablation sweep");
    ablate->add_option("--config", config_path, "JSON config file");
    ablate->add_option("--set", sets, "Override config keys");
    ablate->add_option("--seeds", seeds, "Comma-separated seed list")->delimiter(',');
    ablate->add_option("--out", out_dir, "Output root");
    ablate->add_option("--jobs", jobs, "Parallel seed workers");
    ablate->add_option("--variants", variants, "Subset of variants (baseline,a..g)")
        ->delimiter(',');

    auto* check = app.add_subcommand("check-grad", "Finite-difference gradient check suite");

    auto* gen = app.add_subcommand("gen-sbm", "Generate and export a stochastic block model "
                                              "dataset");
    gen->add_option("--classes", sbm.classes, "Number of classes")->required();
    gen->add_option("--nodes-per-class", sbm.nodes_per_class, "Nodes per class")->required();
    gen->add_option("--intra", sbm.intra_edge_prob, "Intra-class edge probability")->required();
    gen->add_option("--inter", sbm.inter_edge_prob, "Inter-class edge probability")->required();
    gen->add_option("--feature-dim", sbm.feature_dim, "Feature dimension")->required();
    gen->add_option("--noise", sbm.feature_noise, "Feature noise standard deviation");
    gen->add_option("--seed", sbm.seed, "Generator seed");
    gen->add_option("--out", sbm_out, "Output directory")->required();

    auto* show = app.add_subcommand("show-report", "Pretty-print a report.json or "
                                                   "aggregate.json");
    show->add_option("path", report_path, "Report file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed())
            return mega::cmd_run(build_run_config(config_path, sets, seeds, out_dir, jobs),
                                 std::cout);
        if (ablate->parsed())
            return mega::cmd_ablate(build_run_config(config_path, sets, seeds, out_dir, jobs),
                                    variants, std::cout);
        if (check->parsed()) return mega::cmd_check_grad(std::cout);
        if (gen->parsed()) return mega::cmd_gen_sbm(sbm, sbm_out, std::cout);
        if (show->parsed()) return mega::cmd_show_report(report_path, std::cout);
    } catch (const mega::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
