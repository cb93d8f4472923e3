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
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mega/rng.hpp"
#include "mega/sparse.hpp"
#include "mega/tensor.hpp"

namespace mega {

using Edge = std::pair<int64_t, int64_t>;

// Fixed undirected graph with node features and integer labels. Edges are
// stored once in (min, max) form, no self-loops.
struct GraphDataset {
    int64_t num_nodes = 0;
    Tensor features; // [num_nodes x num_features]
    std::vector<int64_t> labels;
    std::vector<Edge> edges;
    int64_t num_classes = 0;

    int64_t num_features() const { return features.cols(); }

    void validate() const
    {
        if (features.rank() != 2 || features.rows() != num_nodes)
            throw error("dataset: feature row count does not match num_nodes");
        if (static_cast<int64_t>(labels.size()) != num_nodes)
            throw error("dataset: label count does not match num_nodes");
        std::vector<char> seen(static_cast<size_t>(num_classes), 0);
        for (int64_t y : labels) {
            if (y < 0 || y >= num_classes)
                throw error("dataset: label " + std::to_string(y) + " out of range [0, " +
                            std::to_string(num_classes) + ")");
            seen[static_cast<size_t>(y)] = 1;
        }
        for (int64_t c = 0; c < num_classes; ++c)
            if (!seen[static_cast<size_t>(c)])
                throw error("dataset: class " + std::to_string(c) + " has no nodes");
        for (auto& [u, v] : edges) {
            if (u < 0 || u >= num_nodes || v < 0 || v >= num_nodes)
                throw error("dataset: edge endpoint out of range: " + std::to_string(u) + "," +
                            std::to_string(v));
            if (u == v) throw error("dataset: self-loop stored: " + std::to_string(u));
            if (u > v) throw error("dataset: edge not in canonical (min,max) form");
        }
        features.require_finite("dataset features");
    }

    std::vector<int64_t> nodes_of_class(int64_t c) const
    {
        std::vector<int64_t> out;
        for (int64_t i = 0; i < num_nodes; ++i)
            if (labels[static_cast<size_t>(i)] == c) out.push_back(i);
        return out;
    }
};

inline std::vector<Edge> canonical_edges(const std::vector<Edge>& raw)
{
    std::set<Edge> s;
    for (auto [u, v] : raw) {
        if (u == v) throw error("self-loop in edge list: " + std::to_string(u));
        s.emplace(std::min(u, v), std::max(u, v));
    }
    return {s.begin(), s.end()};
}

// Symmetric normalized adjacency with self-loops: D^(-1/2) (A + I) D^(-1/2),
// D the degree matrix of A + I.
struct NormAdj {
    int64_t dim = 0;
    SpOperator op;

    double at(int64_t i, int64_t j) const { return op.fwd->at(i, j); }
};

inline NormAdj normalize_adjacency(const std::vector<Edge>& edges, int64_t num_nodes)
{
    std::vector<std::vector<int64_t>> nbrs(static_cast<size_t>(num_nodes));
    for (auto [u, v] : edges) {
        if (u < 0 || u >= num_nodes || v < 0 || v >= num_nodes)
            throw error("normalize_adjacency: endpoint out of range");
        if (u == v) continue; // self-loops come from the +I term only
        nbrs[static_cast<size_t>(u)].push_back(v);
        nbrs[static_cast<size_t>(v)].push_back(u);
    }
    std::vector<double> dinv(static_cast<size_t>(num_nodes));
    for (int64_t i = 0; i < num_nodes; ++i) {
        auto& v = nbrs[static_cast<size_t>(i)];
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        dinv[static_cast<size_t>(i)] = 1.0 / std::sqrt(static_cast<double>(v.size()) + 1.0);
    }
    std::vector<std::tuple<int64_t, int64_t, double>> trip;
    for (int64_t i = 0; i < num_nodes; ++i) {
        auto& v = nbrs[static_cast<size_t>(i)];
        size_t k = 0;
        bool diag_done = false;
        auto push_diag = [&] {
            trip.emplace_back(i, i, dinv[static_cast<size_t>(i)] * dinv[static_cast<size_t>(i)]);
            diag_done = true;
        };
        for (; k < v.size(); ++k) {
            int64_t j = v[k];
            if (!diag_done && j > i) push_diag();
            trip.emplace_back(i, j, dinv[static_cast<size_t>(i)] * dinv[static_cast<size_t>(j)]);
        }
        if (!diag_done) push_diag();
    }
    NormAdj a;
    a.dim = num_nodes;
    a.op = SpOperator(CsrMatrix::from_triplets(num_nodes, num_nodes, std::move(trip)));
    return a;
}

// ---------------------------------------------------------------------------
// Dataset directory format (plain text, UTF-8):
//   meta.json      {"num_nodes": n, "num_features": f, "num_classes": c}
//   features.csv   n rows of f comma-separated decimals
//   labels.csv     n rows, one integer each
//   edges.csv      one "u,v" pair per line, 0-indexed
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, const std::string& where)
{
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw error("malformed number '" + s + "' in " + where);
    }
}

inline int64_t parse_int(const std::string& s, const std::string& where)
{
    try {
        size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw error("malformed integer '" + s + "' in " + where);
    }
}

inline std::ifstream open_or_throw(const std::filesystem::path& p)
{
    std::ifstream f(p);
    if (!f) throw error("missing file: " + p.string());
    return f;
}

} // namespace detail

inline GraphDataset load_dataset(const std::string& dir)
{
    namespace fs = std::filesystem;
    fs::path root(dir);
    if (!fs::exists(root)) throw error("dataset not found: " + dir);

    auto meta_f = detail::open_or_throw(root / "meta.json");
    nlohmann::json meta;
    try {
        meta_f >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw error("malformed meta.json: " + std::string(e.what()));
    }
    GraphDataset ds;
    ds.num_nodes = meta.at("num_nodes").get<int64_t>();
    int64_t nfeat = meta.at("num_features").get<int64_t>();
    ds.num_classes = meta.at("num_classes").get<int64_t>();

    {
        auto f = detail::open_or_throw(root / "features.csv");
        std::vector<double> data;
        data.reserve(static_cast<size_t>(ds.num_nodes * nfeat));
        std::string line;
        int64_t row = 0;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto cells = detail::split_csv_line(line);
            if (static_cast<int64_t>(cells.size()) != nfeat)
                throw error("features.csv row " + std::to_string(row) + ": expected " +
                            std::to_string(nfeat) + " columns, got " + std::to_string(cells.size()));
            for (auto& c : cells)
                data.push_back(detail::parse_double(c, "features.csv row " + std::to_string(row)));
            ++row;
        }
        if (row != ds.num_nodes)
            throw error("features.csv has " + std::to_string(row) + " rows, meta says " +
                        std::to_string(ds.num_nodes));
        ds.features = Tensor(Shape{ds.num_nodes, nfeat}, std::move(data));
    }
    {
        auto f = detail::open_or_throw(root / "labels.csv");
        std::string line;
        int64_t row = 0;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            ds.labels.push_back(detail::parse_int(line, "labels.csv row " + std::to_string(row)));
            ++row;
        }
        if (row != ds.num_nodes)
            throw error("labels.csv has " + std::to_string(row) + " rows, meta says " +
                        std::to_string(ds.num_nodes));
    }
    {
        auto f = detail::open_or_throw(root / "edges.csv");
        std::string line;
        int64_t row = 0;
        std::vector<Edge> raw;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto cells = detail::split_csv_line(line);
            if (cells.size() != 2)
                throw error("edges.csv line " + std::to_string(row) + ": expected 'u,v'");
            int64_t u = detail::parse_int(cells[0], "edges.csv line " + std::to_string(row));
            int64_t v = detail::parse_int(cells[1], "edges.csv line " + std::to_string(row));
            if (u < 0 || u >= ds.num_nodes || v < 0 || v >= ds.num_nodes)
                throw error("edges.csv line " + std::to_string(row) + ": endpoint out of range: " +
                            std::to_string(u) + "," + std::to_string(v));
            raw.emplace_back(u, v);
            ++row;
        }
        ds.edges = canonical_edges(raw);
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const GraphDataset& ds, const std::string& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        nlohmann::json meta{{"num_nodes", ds.num_nodes},
                            {"num_features", ds.num_features()},
                            {"num_classes", ds.num_classes}};
        std::ofstream f(fs::path(dir) / "meta.json");
        f << meta.dump(2) << '\n';
    }
    {
        std::ofstream f(fs::path(dir) / "features.csv");
        f.precision(17);
        for (int64_t i = 0; i < ds.num_nodes; ++i) {
            for (int64_t j = 0; j < ds.num_features(); ++j) {
                if (j) f << ',';
                f << ds.features(i, j);
            }
            f << '\n';
        }
    }
    {
        std::ofstream f(fs::path(dir) / "labels.csv");
        for (int64_t y : ds.labels) f << y << '\n';
    }
    {
        std::ofstream f(fs::path(dir) / "edges.csv");
        for (auto [u, v] : ds.edges) f << u << ',' << v << '\n';
    }
}

// Stochastic block model generator: block-wise labels, independent edge coins,
// features = one-hot class mean plus Gaussian noise. Deterministic per seed.
struct SbmConfig {
    int64_t classes = 0;
    int64_t nodes_per_class = 0;
    double intra_edge_prob = 0.0;
    double inter_edge_prob = 0.0;
    int64_t feature_dim = 0;
    double feature_noise = 0.0;
    uint64_t seed = 0;

    void validate() const
    {
        if (classes <= 0 || nodes_per_class <= 0)
            throw error("sbm: classes and nodes_per_class must be positive");
        if (feature_dim <= 0) throw error("sbm: feature_dim must be positive");
        auto prob_ok = [](double q) { return q >= 0.0 && q <= 1.0; };
        if (!prob_ok(intra_edge_prob) || !prob_ok(inter_edge_prob))
            throw error("sbm: edge probabilities must be in [0, 1]");
        if (!(intra_edge_prob > inter_edge_prob))
            throw error("sbm: intra_edge_prob must exceed inter_edge_prob");
        if (feature_noise < 0.0) throw error("sbm: feature_noise must be non-negative");
    }
};

inline GraphDataset generate_sbm(const SbmConfig& cfg)
{
    cfg.validate();
    Rng rng(cfg.seed);
    GraphDataset ds;
    ds.num_classes = cfg.classes;
    ds.num_nodes = cfg.classes * cfg.nodes_per_class;
    ds.labels.resize(static_cast<size_t>(ds.num_nodes));
    for (int64_t i = 0; i < ds.num_nodes; ++i)
        ds.labels[static_cast<size_t>(i)] = i / cfg.nodes_per_class;

    for (int64_t u = 0; u < ds.num_nodes; ++u)
        for (int64_t v = u + 1; v < ds.num_nodes; ++v) {
            double prob = ds.labels[static_cast<size_t>(u)] == ds.labels[static_cast<size_t>(v)]
                              ? cfg.intra_edge_prob
                              : cfg.inter_edge_prob;
            if (rng.uniform() < prob) ds.edges.emplace_back(u, v);
        }

    ds.features = Tensor(Shape{ds.num_nodes, cfg.feature_dim});
    for (int64_t i = 0; i < ds.num_nodes; ++i) {
        int64_t hot = ds.labels[static_cast<size_t>(i)] % cfg.feature_dim;
        for (int64_t j = 0; j < cfg.feature_dim; ++j)
            ds.features(i, j) = (j == hot ? 1.0 : 0.0) + cfg.feature_noise * rng.normal();
    }
    ds.validate();
    return ds;
}

} // namespace mega
