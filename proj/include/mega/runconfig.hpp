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

#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include <json.hpp>

#include "mega/episodes.hpp"
#include "mega/graphdata.hpp"
#include "mega/trainer.hpp"

namespace mega {

struct RunConfig {
    std::string dataset_path; // exclusive with sbm
    bool use_sbm = false;
    SbmConfig sbm;
    SplitConfig split;
    TrainConfig train;
    std::string method; // optional preset: finetune | maml | mctf | mega
    std::string out_dir;
    std::vector<uint64_t> seeds;
    int64_t jobs = 1;
    nlohmann::json echo; // fully merged config document
};

inline nlohmann::json default_config_json()
{
    return nlohmann::json{
        {"dataset", nlohmann::json::object()},
        {"split",
         {{"N", 3},
          {"K", 3},
          {"R", 100},
          {"base_classes", 0},
          {"meta_query_cap", 25},
          {"novel_tasks", -1}}},
        {"train",
         {{"inner_lr", 0.005},
          {"outer_lr", 0.005},
          {"weight_decay", 5e-4},
          {"inner_steps", 1},
          {"meta_epochs", 300},
          {"inc_finetune_steps", 5},
          {"dropout", 0.5},
          {"use_mctf", true},
          {"use_kd", true},
          {"use_sir", true},
          {"meta_gcl", true},
          {"meta_mode", "mctf"},
          {"outer_ce_on_union", false},
          {"seed_buffer_with_base", true},
          {"visibility", "transductive"},
          {"hidden1", 32},
          {"hidden2", 16},
          {"divergence_guard", 1e6}}},
        {"method", ""},
        {"out_dir", ""},
        {"seeds", {1}},
        {"jobs", 1}};
}

namespace detail {

inline void merge_into(nlohmann::json& base, const nlohmann::json& over)
{
    for (auto& [k, v] : over.items()) {
        if (v.is_object() && base.contains(k) && base[k].is_object())
            merge_into(base[k], v);
        else
            base[k] = v;
    }
}

} // namespace detail

// `--set a.b.c=value` overrides; the value is parsed as JSON when possible,
// otherwise taken as a string.
inline void apply_set_overrides(nlohmann::json& doc, const std::vector<std::string>& sets)
{
    for (const std::string& s : sets) {
        size_t eq = s.find('=');
        if (eq == std::string::npos) throw error("--set expects key=value, got '" + s + "'");
        std::string key = s.substr(0, eq);
        std::string val = s.substr(eq + 1);
        nlohmann::json parsed = nlohmann::json::parse(val, nullptr, false);
        if (parsed.is_discarded()) parsed = val;

        nlohmann::json* cur = &doc;
        size_t pos = 0;
        while (true) {
            size_t dot = key.find('.', pos);
            std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
            if (part.empty()) throw error("--set: empty key segment in '" + key + "'");
            if (dot == std::string::npos) {
                (*cur)[part] = parsed;
                break;
            }
            cur = &(*cur)[part];
            pos = dot + 1;
        }
    }
}

// Experiment identity: FNV-1a of the canonical document with execution-only
// fields removed.
inline std::string config_hash(const nlohmann::json& doc)
{
    nlohmann::json canon = doc;
    canon.erase("out_dir");
    canon.erase("jobs");
    std::string s = canon.dump();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void apply_method_preset(TrainFlags& f, const std::string& method)
{
    if (method.empty()) return;
    if (method == "finetune") {
        f.use_mctf = false;
        f.use_kd = false;
        f.use_sir = false;
    } else if (method == "maml") {
        f.use_mctf = true;
        f.meta_mode = MetaMode::Maml;
        f.meta_gcl = false;
        f.use_kd = true;
        f.use_sir = true;
    } else if (method == "mctf") {
        // Bare chained meta-training retains past tasks through the
        // cumulative query CE; the KD-on-past-queries decomposition is what
        // the full method replaces it with.
        f.use_mctf = true;
        f.meta_mode = MetaMode::Mctf;
        f.meta_gcl = false;
        f.outer_ce_on_union = true;
        f.use_kd = true;
        f.use_sir = true;
    } else if (method == "mega") {
        f.use_mctf = true;
        f.meta_mode = MetaMode::Mctf;
        f.meta_gcl = true;
        f.use_kd = true;
        f.use_sir = true;
    } else {
        throw error("unknown method preset '" + method + "' (finetune|maml|mctf|mega)");
    }
}

inline RunConfig parse_run_config(const nlohmann::json& user)
{
    nlohmann::json doc = default_config_json();
    detail::merge_into(doc, user);

    RunConfig cfg;
    cfg.echo = doc;

    const auto& dsj = doc.at("dataset");
    if (dsj.contains("path") && dsj.contains("sbm"))
        throw error("config: dataset must have either 'path' or 'sbm', not both");
    if (dsj.contains("path")) {
        cfg.dataset_path = dsj.at("path").get<std::string>();
    } else if (dsj.contains("sbm")) {
        cfg.use_sbm = true;
        const auto& sj = dsj.at("sbm");
        cfg.sbm.classes = sj.at("classes").get<int64_t>();
        cfg.sbm.nodes_per_class = sj.at("nodes_per_class").get<int64_t>();
        cfg.sbm.intra_edge_prob = sj.at("intra_edge_prob").get<double>();
        cfg.sbm.inter_edge_prob = sj.at("inter_edge_prob").get<double>();
        cfg.sbm.feature_dim = sj.at("feature_dim").get<int64_t>();
        cfg.sbm.feature_noise = sj.value("feature_noise", 0.0);
        cfg.sbm.seed = sj.value("seed", 0);
    } else {
        throw error("config: dataset requires 'path' or 'sbm'");
    }

    const auto& sj = doc.at("split");
    cfg.split.N = sj.at("N").get<int64_t>();
    cfg.split.K = sj.at("K").get<int64_t>();
    cfg.split.R = sj.at("R").get<int64_t>();
    cfg.split.base_class_count = sj.at("base_classes").get<int64_t>();
    cfg.split.meta_query_cap = sj.at("meta_query_cap").get<int64_t>();
    cfg.split.novel_tasks = sj.at("novel_tasks").get<int64_t>();

    const auto& tj = doc.at("train");
    cfg.train.inner_lr = tj.at("inner_lr").get<double>();
    cfg.train.outer_lr = tj.at("outer_lr").get<double>();
    cfg.train.weight_decay = tj.at("weight_decay").get<double>();
    cfg.train.inner_steps = tj.at("inner_steps").get<int64_t>();
    cfg.train.meta_epochs = tj.at("meta_epochs").get<int64_t>();
    cfg.train.inc_finetune_steps = tj.at("inc_finetune_steps").get<int64_t>();
    cfg.train.dropout = tj.at("dropout").get<double>();
    cfg.train.flags.use_mctf = tj.at("use_mctf").get<bool>();
    cfg.train.flags.use_kd = tj.at("use_kd").get<bool>();
    cfg.train.flags.use_sir = tj.at("use_sir").get<bool>();
    cfg.train.flags.meta_gcl = tj.at("meta_gcl").get<bool>();
    cfg.train.flags.outer_ce_on_union = tj.at("outer_ce_on_union").get<bool>();
    cfg.train.flags.seed_buffer_with_base = tj.at("seed_buffer_with_base").get<bool>();
    std::string mode = tj.at("meta_mode").get<std::string>();
    if (mode == "mctf")
        cfg.train.flags.meta_mode = MetaMode::Mctf;
    else if (mode == "maml")
        cfg.train.flags.meta_mode = MetaMode::Maml;
    else
        throw error("config: meta_mode must be 'mctf' or 'maml'");
    std::string vis = tj.at("visibility").get<std::string>();
    if (vis == "transductive" || vis == "full-graph")
        cfg.train.visibility = Visibility::FullGraph;
    else if (vis == "induced" || vis == "induced-subgraph")
        cfg.train.visibility = Visibility::InducedSubgraph;
    else
        throw error("config: visibility must be 'transductive' or 'induced'");
    cfg.train.widths.hidden1 = tj.at("hidden1").get<int64_t>();
    cfg.train.widths.hidden2 = tj.at("hidden2").get<int64_t>();
    cfg.train.divergence_guard = tj.at("divergence_guard").get<double>();

    cfg.method = doc.at("method").get<std::string>();
    apply_method_preset(cfg.train.flags, cfg.method);

    cfg.out_dir = doc.at("out_dir").get<std::string>();
    if (cfg.out_dir.empty()) {
        const char* env = std::getenv("MEGA_OUT_ROOT");
        cfg.out_dir = env ? env : "runs";
    }
    cfg.seeds = doc.at("seeds").get<std::vector<uint64_t>>();
    if (cfg.seeds.empty()) throw error("config: seeds must be non-empty");
    cfg.jobs = doc.at("jobs").get<int64_t>();
    if (cfg.jobs < 1) cfg.jobs = 1;
    cfg.train.validate();
    return cfg;
}

} // namespace mega
