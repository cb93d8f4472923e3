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

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mega/losses.hpp"
#include "mega/model.hpp"

namespace mega {

// Eval-mode logits as plain data, for prediction.
inline Tensor eval_logits(const ParamSet& params, const NormAdj& adj,
                          const ad::DiffValue& features)
{
    return gcn_forward(params, adj, features, ForwardMode::eval()).payload();
}

// Argmax over visible-class logits; ties break to the lowest class id.
inline std::vector<int64_t> predict_from_logits(const Tensor& logits,
                                                const std::vector<int64_t>& rows,
                                                const SeenClassMask& mask)
{
    std::vector<int64_t> visible = mask.visible();
    if (visible.empty()) throw error("predict: no visible classes");
    std::vector<int64_t> out;
    out.reserve(rows.size());
    for (int64_t r : rows) {
        int64_t best = visible[0];
        double best_v = logits(r, visible[0]);
        for (size_t k = 1; k < visible.size(); ++k) {
            double v = logits(r, visible[k]);
            if (v > best_v) {
                best_v = v;
                best = visible[k];
            }
        }
        out.push_back(best);
    }
    return out;
}

inline double evaluate_accuracy(const ParamSet& params, const NormAdj& adj,
                                const ad::DiffValue& features,
                                const std::vector<int64_t>& query_rows,
                                const std::vector<int64_t>& labels, const SeenClassMask& mask)
{
    if (query_rows.empty()) throw error("evaluate_accuracy: empty query set");
    if (query_rows.size() != labels.size())
        throw error("evaluate_accuracy: row/label count mismatch");
    for (int64_t y : labels)
        if (!mask.is_seen(y)) throw error("evaluate_accuracy: label not visible");
    Tensor logits = eval_logits(params, adj, features);
    std::vector<int64_t> pred = predict_from_logits(logits, query_rows, mask);
    int64_t correct = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

// Row i holds the overall accuracy after stage i plus one per-task accuracy
// for each of the i+1 visible tasks' query sets.
struct AccuracyMatrix {
    std::vector<std::vector<double>> per_task;
    std::vector<double> overall;

    int64_t stages() const { return static_cast<int64_t>(overall.size()); }

    void validate() const
    {
        if (per_task.size() != overall.size()) throw error("accuracy matrix: ragged rows");
        for (size_t i = 0; i < per_task.size(); ++i) {
            if (per_task[i].size() != i + 1)
                throw error("accuracy matrix: row " + std::to_string(i) + " has " +
                            std::to_string(per_task[i].size()) + " entries, expected " +
                            std::to_string(i + 1));
            for (double v : per_task[i])
                if (!(v >= 0.0 && v <= 1.0)) throw error("accuracy matrix: value out of [0,1]");
        }
    }
};

// Entrywise mean and population standard deviation over seeds.
struct AggregateReport {
    int64_t num_runs = 0;
    std::vector<std::vector<double>> per_task_mean, per_task_std;
    std::vector<double> overall_mean, overall_std;
};

inline AggregateReport aggregate(const std::vector<AccuracyMatrix>& runs)
{
    if (runs.empty()) throw error("aggregate: no runs");
    for (auto& r : runs) {
        r.validate();
        if (r.stages() != runs[0].stages()) throw error("aggregate: run shape mismatch");
    }
    int64_t S = runs[0].stages();
    double n = static_cast<double>(runs.size());
    AggregateReport rep;
    rep.num_runs = static_cast<int64_t>(runs.size());
    auto mean_std = [&](auto getter) {
        double m = 0;
        for (auto& r : runs) m += getter(r);
        m /= n;
        double var = 0;
        for (auto& r : runs) {
            double d = getter(r) - m;
            var += d * d;
        }
        return std::make_pair(m, std::sqrt(var / n));
    };
    for (int64_t i = 0; i < S; ++i) {
        auto [om, os] = mean_std([&](const AccuracyMatrix& r) { return r.overall[static_cast<size_t>(i)]; });
        rep.overall_mean.push_back(om);
        rep.overall_std.push_back(os);
        std::vector<double> tm, ts;
        for (int64_t t = 0; t <= i; ++t) {
            auto [m, s] = mean_std(
                [&](const AccuracyMatrix& r) { return r.per_task[static_cast<size_t>(i)][static_cast<size_t>(t)]; });
            tm.push_back(m);
            ts.push_back(s);
        }
        rep.per_task_mean.push_back(std::move(tm));
        rep.per_task_std.push_back(std::move(ts));
    }
    return rep;
}

inline nlohmann::json matrix_to_json(const AccuracyMatrix& m)
{
    return {{"overall", m.overall}, {"per_task", m.per_task}};
}

inline AccuracyMatrix matrix_from_json(const nlohmann::json& j)
{
    AccuracyMatrix m;
    m.overall = j.at("overall").get<std::vector<double>>();
    m.per_task = j.at("per_task").get<std::vector<std::vector<double>>>();
    m.validate();
    return m;
}

inline nlohmann::json aggregate_to_json(const AggregateReport& r)
{
    return {{"schema_version", 1},
            {"num_runs", r.num_runs},
            {"overall_mean", r.overall_mean},
            {"overall_std", r.overall_std},
            {"per_task_mean", r.per_task_mean},
            {"per_task_std", r.per_task_std}};
}

inline AggregateReport aggregate_from_json(const nlohmann::json& j)
{
    AggregateReport r;
    r.num_runs = j.at("num_runs").get<int64_t>();
    r.overall_mean = j.at("overall_mean").get<std::vector<double>>();
    r.overall_std = j.at("overall_std").get<std::vector<double>>();
    r.per_task_mean = j.at("per_task_mean").get<std::vector<std::vector<double>>>();
    r.per_task_std = j.at("per_task_std").get<std::vector<std::vector<double>>>();
    return r;
}

inline std::string stage_name(int64_t i) { return i == 0 ? "base" : "task" + std::to_string(i); }

// One row per stage, mean+-std cells, tasks as columns.
inline std::string aggregate_to_csv(const AggregateReport& r)
{
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    int64_t S = static_cast<int64_t>(r.overall_mean.size());
    os << "stage,overall";
    for (int64_t t = 0; t < S; ++t) os << ',' << stage_name(t);
    os << '\n';
    auto cell = [&](double m, double s) {
        std::ostringstream c;
        c.precision(4);
        c << std::fixed << m << "+-" << s;
        return c.str();
    };
    for (int64_t i = 0; i < S; ++i) {
        os << stage_name(i) << ',' << cell(r.overall_mean[static_cast<size_t>(i)], r.overall_std[static_cast<size_t>(i)]);
        for (int64_t t = 0; t < S; ++t) {
            os << ',';
            if (t <= i)
                os << cell(r.per_task_mean[static_cast<size_t>(i)][static_cast<size_t>(t)],
                           r.per_task_std[static_cast<size_t>(i)][static_cast<size_t>(t)]);
        }
        os << '\n';
    }
    return os.str();
}

// Plain two-column text: stage index, accuracy.
inline std::string plot_data_series(const std::vector<double>& ys)
{
    std::ostringstream os;
    os.precision(17);
    for (size_t i = 0; i < ys.size(); ++i) os << i << ' ' << ys[i] << '\n';
    return os.str();
}

} // namespace mega
