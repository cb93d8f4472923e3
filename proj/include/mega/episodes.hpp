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

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mega/graphdata.hpp"
#include "mega/rng.hpp"

namespace mega {

// N classes, K support nodes and R query nodes per class for novel tasks.
// base_class_count classes form the base task, whose support is every
// non-query node of each base class.
struct SplitConfig {
    int64_t N = 3;
    int64_t K = 3;
    int64_t R = 100;
    int64_t base_class_count = 0;
    uint64_t seed = 0;
    int64_t meta_query_cap = 25; // per-class query size inside meta episodes
    int64_t novel_tasks = -1;    // -1: as many as the label space allows

    void validate() const
    {
        if (N < 2) throw error("split: N must be >= 2");
        if (K < 1 || R < 1) throw error("split: K and R must be >= 1");
        if (base_class_count < 1) throw error("split: base_class_count must be >= 1");
    }
};

struct TaskSpec {
    std::vector<int64_t> classes;
    std::map<int64_t, std::vector<int64_t>> support; // class -> node indices
    std::map<int64_t, std::vector<int64_t>> query;

    std::vector<int64_t> support_nodes() const { return flatten(support); }
    std::vector<int64_t> query_nodes() const { return flatten(query); }

    static std::vector<int64_t> flatten(const std::map<int64_t, std::vector<int64_t>>& m)
    {
        std::vector<int64_t> out;
        for (auto& [c, v] : m) out.insert(out.end(), v.begin(), v.end());
        return out;
    }
};

struct TaskStream {
    TaskSpec base;
    std::vector<TaskSpec> novel;
    int64_t N = 0, K = 0, R = 0;
    int64_t total_classes = 0;
};

// Ordered pseudo-task partition of the base label space.
struct MetaEpisode {
    std::vector<TaskSpec> sequence;
};

namespace detail {

inline void check_class_sizes(const GraphDataset& ds, int64_t need, const char* what)
{
    for (int64_t c = 0; c < ds.num_classes; ++c) {
        int64_t n = static_cast<int64_t>(ds.nodes_of_class(c).size());
        if (n < need)
            throw error(std::string(what) + ": class " + std::to_string(c) + " has " +
                        std::to_string(n) + " nodes, needs >= " + std::to_string(need));
    }
}

} // namespace detail

// Classes are assigned to the base task first (in shuffled order), then to
// consecutive N-class novel tasks. Per-class node lists are shuffled and
// split K support / R query for novel tasks, all-but-R support / R query for
// the base task. Deterministic per cfg.seed.
inline TaskStream build_task_stream(const GraphDataset& ds, const SplitConfig& cfg)
{
    cfg.validate();
    detail::check_class_sizes(ds, cfg.K + cfg.R, "task stream");
    if (cfg.base_class_count > ds.num_classes)
        throw error("task stream: base_class_count exceeds the number of classes");
    int64_t fit = (ds.num_classes - cfg.base_class_count) / cfg.N;
    int64_t novel_count = cfg.novel_tasks < 0 ? fit : cfg.novel_tasks;
    if (novel_count > fit)
        throw error("task stream: not enough classes for the requested stream length (" +
                    std::to_string(cfg.novel_tasks) + " novel tasks of " + std::to_string(cfg.N) +
                    " classes after a " + std::to_string(cfg.base_class_count) + "-class base)");

    Rng rng(cfg.seed);
    std::vector<int64_t> classes(static_cast<size_t>(ds.num_classes));
    for (int64_t c = 0; c < ds.num_classes; ++c) classes[static_cast<size_t>(c)] = c;
    rng.shuffle(classes);

    TaskStream stream;
    stream.N = cfg.N;
    stream.K = cfg.K;
    stream.R = cfg.R;
    stream.total_classes = ds.num_classes;

    auto split_class = [&](int64_t c, bool base) {
        std::vector<int64_t> nodes = ds.nodes_of_class(c);
        rng.shuffle(nodes);
        std::vector<int64_t> support, query;
        if (base) {
            query.assign(nodes.begin(), nodes.begin() + cfg.R);
            support.assign(nodes.begin() + cfg.R, nodes.end());
        } else {
            support.assign(nodes.begin(), nodes.begin() + cfg.K);
            query.assign(nodes.begin() + cfg.K, nodes.begin() + cfg.K + cfg.R);
        }
        return std::make_pair(std::move(support), std::move(query));
    };

    for (int64_t i = 0; i < cfg.base_class_count; ++i) {
        int64_t c = classes[static_cast<size_t>(i)];
        stream.base.classes.push_back(c);
        auto [s, q] = split_class(c, true);
        stream.base.support[c] = std::move(s);
        stream.base.query[c] = std::move(q);
    }
    for (int64_t t = 0; t < novel_count; ++t) {
        TaskSpec task;
        for (int64_t j = 0; j < cfg.N; ++j) {
            int64_t c = classes[static_cast<size_t>(cfg.base_class_count + t * cfg.N + j)];
            task.classes.push_back(c);
            auto [s, q] = split_class(c, false);
            task.support[c] = std::move(s);
            task.query[c] = std::move(q);
        }
        stream.novel.push_back(std::move(task));
    }
    return stream;
}

// Shuffles the base classes and chunks them into pseudo-tasks of N classes;
// the final chunk may be smaller so that the union is exactly the base label
// space. Each class contributes K support nodes and up to meta_query_cap
// query nodes, disjoint, drawn from the base support pool.
inline MetaEpisode sample_meta_episode(const TaskSpec& base, const SplitConfig& cfg, Rng& rng)
{
    if (static_cast<int64_t>(base.classes.size()) < cfg.N)
        throw error("meta episode: N exceeds the number of base classes");

    std::vector<int64_t> classes = base.classes;
    rng.shuffle(classes);

    MetaEpisode ep;
    for (size_t off = 0; off < classes.size(); off += static_cast<size_t>(cfg.N)) {
        TaskSpec task;
        size_t end = std::min(classes.size(), off + static_cast<size_t>(cfg.N));
        for (size_t i = off; i < end; ++i) {
            int64_t c = classes[i];
            auto it = base.support.find(c);
            if (it == base.support.end()) throw error("meta episode: class without support pool");
            std::vector<int64_t> pool = it->second;
            if (static_cast<int64_t>(pool.size()) < cfg.K + 1)
                throw error("meta episode: class " + std::to_string(c) +
                            " support pool too small for K support plus one query node");
            rng.shuffle(pool);
            task.classes.push_back(c);
            task.support[c].assign(pool.begin(), pool.begin() + cfg.K);
            int64_t q = std::min<int64_t>(cfg.meta_query_cap, static_cast<int64_t>(pool.size()) - cfg.K);
            task.query[c].assign(pool.begin() + cfg.K, pool.begin() + cfg.K + q);
        }
        ep.sequence.push_back(std::move(task));
    }
    return ep;
}

// ---------------------------------------------------------------------------
// JSON archive so a run's splits can be replayed bit-exactly.
// ---------------------------------------------------------------------------

inline nlohmann::json task_to_json(const TaskSpec& t)
{
    nlohmann::json j;
    j["classes"] = t.classes;
    nlohmann::json s = nlohmann::json::object(), q = nlohmann::json::object();
    for (auto& [c, v] : t.support) s[std::to_string(c)] = v;
    for (auto& [c, v] : t.query) q[std::to_string(c)] = v;
    j["support"] = std::move(s);
    j["query"] = std::move(q);
    return j;
}

inline TaskSpec task_from_json(const nlohmann::json& j)
{
    TaskSpec t;
    t.classes = j.at("classes").get<std::vector<int64_t>>();
    for (auto& [k, v] : j.at("support").items())
        t.support[std::stoll(k)] = v.get<std::vector<int64_t>>();
    for (auto& [k, v] : j.at("query").items())
        t.query[std::stoll(k)] = v.get<std::vector<int64_t>>();
    return t;
}

inline nlohmann::json stream_to_json(const TaskStream& s)
{
    nlohmann::json j;
    j["N"] = s.N;
    j["K"] = s.K;
    j["R"] = s.R;
    j["total_classes"] = s.total_classes;
    j["base"] = task_to_json(s.base);
    nlohmann::json novel = nlohmann::json::array();
    for (auto& t : s.novel) novel.push_back(task_to_json(t));
    j["novel"] = std::move(novel);
    return j;
}

inline TaskStream stream_from_json(const nlohmann::json& j)
{
    TaskStream s;
    s.N = j.at("N").get<int64_t>();
    s.K = j.at("K").get<int64_t>();
    s.R = j.at("R").get<int64_t>();
    s.total_classes = j.at("total_classes").get<int64_t>();
    s.base = task_from_json(j.at("base"));
    for (auto& t : j.at("novel")) s.novel.push_back(task_from_json(t));
    return s;
}

} // namespace mega
