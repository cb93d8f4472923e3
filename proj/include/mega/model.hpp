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

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mega/autodiff.hpp"
#include "mega/graphdata.hpp"
#include "mega/rng.hpp"

namespace mega {

struct GcnWidths {
    int64_t hidden1 = 32;
    int64_t hidden2 = 16;
};

// The six trainable tensors of the two-hidden-layer GCN, each a DiffValue.
// After a differentiable update the entries are interior graph values rather
// than leaves; deep_copy()/detached() rebuild leaves from the payloads.
class ParamSet {
public:
    static constexpr std::array<const char*, 6> names{"W1", "b1", "W2", "b2", "W3", "b3"};

    std::vector<ad::DiffValue> values; // order: W1, b1, W2, b2, W3, b3
    int64_t nfeat = 0;
    int64_t nclass = 0;
    GcnWidths widths;

    const ad::DiffValue& w1() const { return values[0]; }
    const ad::DiffValue& b1() const { return values[1]; }
    const ad::DiffValue& w2() const { return values[2]; }
    const ad::DiffValue& b2() const { return values[3]; }
    const ad::DiffValue& w3() const { return values[4]; }
    const ad::DiffValue& b3() const { return values[5]; }

    std::vector<Tensor> payloads() const
    {
        std::vector<Tensor> out;
        out.reserve(values.size());
        for (auto& v : values) out.push_back(v.payload());
        return out;
    }

    ParamSet with_values(std::vector<ad::DiffValue> vals) const
    {
        ParamSet p = *this;
        if (vals.size() != values.size()) throw error("param set: wrong value count");
        p.values = std::move(vals);
        return p;
    }

    // Independent parameter leaves with equal payloads.
    ParamSet deep_copy() const
    {
        ParamSet p = *this;
        p.values.clear();
        for (auto& v : values) p.values.push_back(ad::make_param(v.payload()));
        return p;
    }

    // Constant leaves with equal payloads; gradients do not flow through.
    ParamSet detached() const
    {
        ParamSet p = *this;
        p.values.clear();
        for (auto& v : values) p.values.push_back(ad::make_const(v.payload()));
        return p;
    }

    ParamSet from_payloads(const std::vector<Tensor>& ts) const
    {
        ParamSet p = *this;
        if (ts.size() != values.size()) throw error("param set: wrong tensor count");
        p.values.clear();
        for (size_t i = 0; i < ts.size(); ++i) {
            if (!(ts[i].shape() == values[i].shape()))
                throw error(std::string("param set: shape mismatch for ") + names[i]);
            p.values.push_back(ad::make_param(ts[i]));
        }
        return p;
    }
};

// Glorot-uniform weights, zero biases. Deterministic per seed.
inline ParamSet init_params(int64_t nfeat, int64_t nclass, uint64_t seed, GcnWidths widths = {})
{
    if (nfeat < 1 || nclass < 1) throw error("init_params: nfeat and nclass must be >= 1");
    Rng rng(seed);
    auto glorot = [&](int64_t fan_in, int64_t fan_out) {
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor w(Shape{fan_in, fan_out});
        for (double& v : w.data()) v = rng.uniform(-bound, bound);
        return w;
    };
    ParamSet p;
    p.nfeat = nfeat;
    p.nclass = nclass;
    p.widths = widths;
    p.values.push_back(ad::make_param(glorot(nfeat, widths.hidden1)));
    p.values.push_back(ad::make_param(Tensor::zeros(Shape{widths.hidden1})));
    p.values.push_back(ad::make_param(glorot(widths.hidden1, widths.hidden2)));
    p.values.push_back(ad::make_param(Tensor::zeros(Shape{widths.hidden2})));
    p.values.push_back(ad::make_param(glorot(widths.hidden2, nclass)));
    p.values.push_back(ad::make_param(Tensor::zeros(Shape{nclass})));
    return p;
}

// Eval applies no dropout. Train draws masks from the rng, or uses the given
// fixed masks so a stochastic forward can be replayed exactly.
struct ForwardMode {
    enum class Kind { Eval, Train };
    Kind kind = Kind::Eval;
    Rng* rng = nullptr;
    double dropout_rate = 0.0;
    const Tensor* fixed_mask1 = nullptr;
    const Tensor* fixed_mask2 = nullptr;

    static ForwardMode eval() { return {}; }
    static ForwardMode train(Rng& rng, double rate)
    {
        ForwardMode m;
        m.kind = Kind::Train;
        m.rng = &rng;
        m.dropout_rate = rate;
        return m;
    }
    static ForwardMode train_fixed(const Tensor& m1, const Tensor& m2)
    {
        ForwardMode m;
        m.kind = Kind::Train;
        m.fixed_mask1 = &m1;
        m.fixed_mask2 = &m2;
        return m;
    }
};

// H1 = relu(A.(X W1) + b1), dropout; H2 = relu(A.(H1 W2) + b2), dropout;
// logits = A.(H2 W3) + b3. All three layers propagate through A.
inline ad::DiffValue gcn_forward(const ParamSet& params, const NormAdj& adj,
                                 const ad::DiffValue& features, const ForwardMode& mode)
{
    using namespace ad;
    int64_t n = adj.dim;
    if (features.rank() != 2 || features.payload().rows() != n)
        throw error("gcn_forward: feature rows do not match adjacency dimension");

    bool train = mode.kind == ForwardMode::Kind::Train;
    auto maybe_dropout = [&](const DiffValue& h, const Tensor* fixed) {
        if (!train) return h;
        if (fixed) return dropout(h, *fixed);
        if (mode.dropout_rate == 0.0) return h;
        return dropout(h, dropout_mask(h.shape(), mode.dropout_rate, *mode.rng));
    };

    DiffValue h1 = relu(add(spmm(adj.op, matmul(features, params.w1())), broadcast_rowvec(params.b1(), n)));
    h1 = maybe_dropout(h1, mode.fixed_mask1);
    DiffValue h2 = relu(add(spmm(adj.op, matmul(h1, params.w2())), broadcast_rowvec(params.b2(), n)));
    h2 = maybe_dropout(h2, mode.fixed_mask2);
    return add(spmm(adj.op, matmul(h2, params.w3())), broadcast_rowvec(params.b3(), n));
}

// Checkpoint file: JSON list of named tensors. nlohmann prints doubles with a
// shortest round-trip representation, so save/load is bit-exact at 64-bit.
inline nlohmann::json checkpoint_json(int64_t nfeat, int64_t nclass, GcnWidths widths,
                                      const std::vector<Tensor>& payloads)
{
    if (payloads.size() != ParamSet::names.size()) throw error("checkpoint: wrong tensor count");
    nlohmann::json j;
    j["schema_version"] = 1;
    j["nfeat"] = nfeat;
    j["nclass"] = nclass;
    j["hidden1"] = widths.hidden1;
    j["hidden2"] = widths.hidden2;
    nlohmann::json tensors = nlohmann::json::array();
    for (size_t i = 0; i < payloads.size(); ++i)
        tensors.push_back({{"name", ParamSet::names[i]},
                           {"shape", payloads[i].shape()},
                           {"data", payloads[i].data()}});
    j["tensors"] = std::move(tensors);
    return j;
}

inline void save_checkpoint(const ParamSet& params, const std::string& path)
{
    nlohmann::json j = checkpoint_json(params.nfeat, params.nclass, params.widths,
                                       params.payloads());
    std::ofstream f(path);
    if (!f) throw error("cannot open checkpoint for writing: " + path);
    f << j.dump(2) << '\n';
}

inline ParamSet load_checkpoint(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw error("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw error("malformed checkpoint: " + std::string(e.what()));
    }
    ParamSet p;
    p.nfeat = j.at("nfeat").get<int64_t>();
    p.nclass = j.at("nclass").get<int64_t>();
    p.widths.hidden1 = j.at("hidden1").get<int64_t>();
    p.widths.hidden2 = j.at("hidden2").get<int64_t>();
    auto& tensors = j.at("tensors");
    if (tensors.size() != ParamSet::names.size()) throw error("checkpoint: wrong tensor count");
    for (size_t i = 0; i < tensors.size(); ++i) {
        auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != ParamSet::names[i])
            throw error("checkpoint: unexpected tensor order");
        Shape shape = tj.at("shape").get<Shape>();
        std::vector<double> data = tj.at("data").get<std::vector<double>>();
        p.values.push_back(ad::make_param(Tensor(std::move(shape), std::move(data))));
    }
    return p;
}

} // namespace mega
