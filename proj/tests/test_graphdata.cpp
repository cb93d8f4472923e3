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

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "mega/graphdata.hpp"
#include "mega/oracle.hpp"
#include "mega/trainer.hpp"

using namespace mega;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name)
{
    fs::path p = fs::temp_directory_path() / ("mega_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

GraphDataset tiny_fixture_dataset()
{
    GraphDataset ds;
    ds.num_nodes = 4;
    ds.num_classes = 2;
    ds.labels = {0, 0, 1, 1};
    ds.features = Tensor(Shape{4, 2}, {1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9});
    ds.edges = {{0, 1}, {1, 2}, {2, 3}};
    ds.validate();
    return ds;
}

} // namespace

TEST_CASE("normalize_adjacency closed forms", "[graphdata]")
{
    SECTION("isolated node gets a unit self-loop")
    {
        NormAdj a = normalize_adjacency({}, 1);
        REQUIRE(a.at(0, 0) == Catch::Approx(1.0));
    }
    SECTION("two connected nodes")
    {
        NormAdj a = normalize_adjacency({{0, 1}}, 2);
        for (int64_t i = 0; i < 2; ++i)
            for (int64_t j = 0; j < 2; ++j) REQUIRE(a.at(i, j) == Catch::Approx(0.5));
    }
    SECTION("path graph matches the dense oracle entrywise")
    {
        std::vector<Edge> edges{{0, 1}, {1, 2}};
        NormAdj a = normalize_adjacency(edges, 3);
        Tensor dense = oracle::dense_normalized_adjacency(edges, 3);
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j)
                REQUIRE(a.at(i, j) == Catch::Approx(dense(i, j)).margin(1e-12));
    }
}

TEST_CASE("normalized adjacency equals the dense formula on random graphs", "[graphdata][oracle]")
{
    Rng rng(2024);
    for (int trial = 0; trial < 25; ++trial) {
        int64_t n = 2 + rng.below(49); // up to 50 nodes
        std::vector<Edge> edges;
        for (int64_t u = 0; u < n; ++u)
            for (int64_t v = u + 1; v < n; ++v)
                if (rng.uniform() < 0.15) edges.emplace_back(u, v);
        NormAdj a = normalize_adjacency(edges, n);
        Tensor dense = oracle::dense_normalized_adjacency(edges, n);
        double worst = 0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j)
                worst = std::max(worst, std::abs(a.at(i, j) - dense(i, j)));
        REQUIRE(worst < 1e-12);

        // Symmetry and entry bounds.
        for (int64_t i = 0; i < n; ++i) {
            REQUIRE(a.at(i, i) > 0.0);
            for (int64_t j = 0; j < n; ++j) {
                REQUIRE(std::abs(a.at(i, j) - a.at(j, i)) < 1e-12);
                REQUIRE(a.at(i, j) <= 1.0);
            }
        }
    }
}

TEST_CASE("endpoint out of range is rejected", "[graphdata]")
{
    REQUIRE_THROWS_AS(normalize_adjacency({{0, 99}}, 4), error);
}

TEST_CASE("dataset round trip through the directory format", "[graphdata]")
{
    fs::path dir = temp_dir("roundtrip");
    GraphDataset ds = tiny_fixture_dataset();
    save_dataset(ds, dir.string());
    GraphDataset back = load_dataset(dir.string());
    REQUIRE(back.num_nodes == 4);
    REQUIRE(back.num_classes == 2);
    REQUIRE(back.labels == ds.labels);
    REQUIRE(back.features == ds.features);
    REQUIRE(back.edges == ds.edges);

    // Serialize again: identical files.
    fs::path dir2 = temp_dir("roundtrip2");
    save_dataset(back, dir2.string());
    for (const char* name : {"meta.json", "features.csv", "labels.csv", "edges.csv"}) {
        std::ifstream f1(dir / name), f2(dir2 / name);
        std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        REQUIRE(s1 == s2);
    }
}

TEST_CASE("loader error surfaces", "[graphdata]")
{
    fs::path dir = temp_dir("loader_errors");
    GraphDataset ds = tiny_fixture_dataset();
    save_dataset(ds, dir.string());

    SECTION("missing file")
    {
        fs::remove(dir / "labels.csv");
        REQUIRE_THROWS_WITH(load_dataset(dir.string()),
                            Catch::Matchers::ContainsSubstring("missing file"));
    }
    SECTION("edge endpoint out of range")
    {
        std::ofstream f(dir / "edges.csv");
        f << "0,99\n";
        f.close();
        REQUIRE_THROWS_WITH(load_dataset(dir.string()),
                            Catch::Matchers::ContainsSubstring("out of range"));
    }
    SECTION("malformed edge line")
    {
        std::ofstream f(dir / "edges.csv");
        f << "0;1\n";
        f.close();
        REQUIRE_THROWS_AS(load_dataset(dir.string()), error);
    }
    SECTION("label out of range")
    {
        std::ofstream f(dir / "labels.csv");
        f << "0\n0\n1\n7\n";
        f.close();
        REQUIRE_THROWS_WITH(load_dataset(dir.string()),
                            Catch::Matchers::ContainsSubstring("out of range"));
    }
    SECTION("feature row count mismatch")
    {
        std::ofstream f(dir / "features.csv");
        f << "1.0,0.0\n0.9,0.1\n";
        f.close();
        REQUIRE_THROWS_AS(load_dataset(dir.string()), error);
    }
    SECTION("duplicate undirected edges collapse to one")
    {
        std::ofstream f(dir / "edges.csv");
        f << "0,1\n1,0\n0,1\n2,3\n1,2\n";
        f.close();
        GraphDataset back = load_dataset(dir.string());
        REQUIRE(back.edges == std::vector<Edge>{{0, 1}, {1, 2}, {2, 3}});
    }
}

TEST_CASE("sbm generator contracts", "[graphdata]")
{
    SECTION("degenerate probabilities give disjoint cliques")
    {
        SbmConfig cfg;
        cfg.classes = 2;
        cfg.nodes_per_class = 3;
        cfg.intra_edge_prob = 1.0;
        cfg.inter_edge_prob = 0.0;
        cfg.feature_dim = 2;
        cfg.seed = 5;
        GraphDataset ds = generate_sbm(cfg);
        std::set<Edge> got(ds.edges.begin(), ds.edges.end());
        std::set<Edge> want{{0, 1}, {0, 2}, {1, 2}, {3, 4}, {3, 5}, {4, 5}};
        REQUIRE(got == want);
    }
    SECTION("fixed seed reproduces the dataset exactly")
    {
        SbmConfig cfg;
        cfg.classes = 3;
        cfg.nodes_per_class = 10;
        cfg.intra_edge_prob = 0.4;
        cfg.inter_edge_prob = 0.05;
        cfg.feature_dim = 3;
        cfg.feature_noise = 0.3;
        cfg.seed = 77;
        GraphDataset a = generate_sbm(cfg);
        GraphDataset b = generate_sbm(cfg);
        REQUIRE(a.edges == b.edges);
        REQUIRE(a.features == b.features);
    }
    SECTION("class sizes are exactly nodes_per_class")
    {
        SbmConfig cfg;
        cfg.classes = 4;
        cfg.nodes_per_class = 7;
        cfg.intra_edge_prob = 0.5;
        cfg.inter_edge_prob = 0.1;
        cfg.feature_dim = 4;
        cfg.seed = 9;
        GraphDataset ds = generate_sbm(cfg);
        for (int64_t c = 0; c < 4; ++c)
            REQUIRE(static_cast<int64_t>(ds.nodes_of_class(c).size()) == 7);
    }
    SECTION("invalid configs are rejected")
    {
        SbmConfig cfg;
        cfg.classes = 0;
        cfg.nodes_per_class = 3;
        cfg.intra_edge_prob = 0.5;
        cfg.inter_edge_prob = 0.1;
        cfg.feature_dim = 2;
        REQUIRE_THROWS_AS(generate_sbm(cfg), error);
        cfg.classes = 2;
        cfg.intra_edge_prob = 0.05;
        REQUIRE_THROWS_AS(generate_sbm(cfg), error); // intra must exceed inter
    }
}

TEST_CASE("the reference SBM configuration is learnable by a GCN", "[graphdata][oracle]")
{
    // 6 classes x 80 nodes, edge probabilities 0.1 / 0.005, feature noise 0.5:
    // plain training on 60% of nodes must clear 90% test accuracy.
    SbmConfig sbm;
    sbm.classes = 6;
    sbm.nodes_per_class = 80;
    sbm.intra_edge_prob = 0.1;
    sbm.inter_edge_prob = 0.005;
    sbm.feature_dim = 6;
    sbm.feature_noise = 0.5;
    sbm.seed = 7;
    GraphDataset ds = generate_sbm(sbm);
    Workspace ws = Workspace::make(ds);

    Rng rng(1);
    std::vector<int64_t> order(static_cast<size_t>(ds.num_nodes));
    for (int64_t i = 0; i < ds.num_nodes; ++i) order[static_cast<size_t>(i)] = i;
    rng.shuffle(order);
    int64_t ntrain = ds.num_nodes * 6 / 10;
    std::vector<int64_t> train(order.begin(), order.begin() + ntrain);
    std::vector<int64_t> test(order.begin() + ntrain, order.end());

    SeenClassMask mask(6);
    mask.reveal({0, 1, 2, 3, 4, 5});
    ParamSet theta = init_params(6, 6, 2);
    AdamState adam = AdamState::like(theta);
    Rng drop(3);
    for (int e = 0; e < 100; ++e) {
        ForwardMode mode = ForwardMode::train(drop, 0.5);
        ad::DiffValue logits = gcn_forward(theta, *ws.full_adj, ws.full_features, mode);
        ad::DiffValue loss =
            masked_cross_entropy(ad::row_select(logits, train), labels_of(ds, train), mask);
        auto g = ad::gradient(loss, theta.values, false);
        std::vector<Tensor> gt;
        for (auto& gg : g) gt.push_back(gg.payload());
        theta = adam_step(adam, theta, gt, 0.005, 5e-4);
    }
    double acc =
        evaluate_accuracy(theta, *ws.full_adj, ws.full_features, test, labels_of(ds, test), mask);
    INFO("test accuracy " << acc);
    REQUIRE(acc > 0.90);
}
