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
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mega/autodiff.hpp"
#include "mega/episodes.hpp"
#include "mega/eval.hpp"
#include "mega/graphdata.hpp"
#include "mega/losses.hpp"
#include "mega/model.hpp"

namespace mega {

enum class MetaMode { Mctf, Maml };
enum class Visibility { FullGraph, InducedSubgraph };

struct TrainFlags {
    bool use_mctf = true; // meta-training stage exists at all
    bool use_kd = true;
    bool use_sir = true;
    bool meta_gcl = true; // KD/SIR terms also appear in the meta phases
    MetaMode meta_mode = MetaMode::Mctf;
    bool outer_ce_on_union = false; // CE over the cumulative query union
    bool seed_buffer_with_base = true;
};

struct TrainConfig {
    double inner_lr = 0.005;
    double outer_lr = 0.005;
    double weight_decay = 5e-4;
    int64_t inner_steps = 1;
    int64_t meta_epochs = 300;
    int64_t inc_finetune_steps = 5;
    double dropout = 0.5;
    TrainFlags flags;
    Visibility visibility = Visibility::FullGraph;
    uint64_t seed = 0;
    GcnWidths widths;
    double divergence_guard = 1e6;

    void validate() const
    {
        if (!(inner_lr > 0) || !(outer_lr > 0)) throw error("train: learning rates must be > 0");
        if (inner_steps < 1) throw error("train: inner_steps must be >= 1");
        if (meta_epochs < 0 || inc_finetune_steps < 0) throw error("train: negative step count");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw error("train: dropout must be in [0, 1)");
        if (weight_decay < 0) throw error("train: negative weight decay");
    }
};

struct TrainCounters {
    LossCounters loss;
    int64_t meta_epochs_run = 0;
};

struct AdamState {
    std::vector<Tensor> m, v;
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState like(const ParamSet& p)
    {
        AdamState s;
        for (auto& t : p.values) {
            s.m.push_back(Tensor::zeros(t.shape()));
            s.v.push_back(Tensor::zeros(t.shape()));
        }
        return s;
    }
};

// Classic Adam with L2 decay folded into the gradient before the moment
// updates, bias-corrected. Returns fresh parameter leaves.
inline ParamSet adam_step(AdamState& st, const ParamSet& theta, const std::vector<Tensor>& grads,
                          double lr, double weight_decay)
{
    if (grads.size() != theta.values.size()) throw error("adam_step: gradient count mismatch");
    ++st.step;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    std::vector<Tensor> out;
    out.reserve(grads.size());
    for (size_t i = 0; i < grads.size(); ++i) {
        const Tensor& th = theta.values[i].payload();
        if (!grads[i].same_shape(th)) throw error("adam_step: gradient shape mismatch");
        Tensor nt = th;
        for (int64_t k = 0; k < th.numel(); ++k) {
            size_t ks = static_cast<size_t>(k);
            double g = grads[i].data()[ks] + weight_decay * th.data()[ks];
            double& m = st.m[i].data()[ks];
            double& v = st.v[i].data()[ks];
            m = st.beta1 * m + (1.0 - st.beta1) * g;
            v = st.beta2 * v + (1.0 - st.beta2) * g * g;
            double mhat = m / bc1;
            double vhat = v / bc2;
            nt.data()[ks] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
        out.push_back(std::move(nt));
    }
    return theta.from_payloads(out);
}

// One inner update theta - alpha * grad(loss), with the gradient kept in the
// graph so a later outer gradient differentiates through the step.
inline ParamSet sgd_step_differentiable(const ParamSet& theta, const ad::DiffValue& loss,
                                        double alpha)
{
    std::vector<ad::DiffValue> grads = ad::gradient(loss, theta.values, /*higher_order=*/true);
    std::vector<ad::DiffValue> updated;
    updated.reserve(grads.size());
    for (size_t i = 0; i < grads.size(); ++i)
        updated.push_back(ad::sub(theta.values[i], ad::smul(grads[i], alpha)));
    return theta.with_values(std::move(updated));
}

// The visible slice of the graph for one stage. Under full-graph visibility
// every node is a row of the forward pass and only labels are restricted;
// under induced visibility the forward runs on the subgraph of visible-class
// nodes with a re-normalized adjacency.
struct VisibleWorld {
    std::shared_ptr<const NormAdj> adj;
    ad::DiffValue features;
    std::vector<int64_t> row_of; // global node -> row, -1 when invisible
    int64_t rows = 0;

    std::vector<int64_t> map_rows(const std::vector<int64_t>& nodes) const
    {
        std::vector<int64_t> out;
        out.reserve(nodes.size());
        for (int64_t n : nodes) {
            if (n < 0 || n >= static_cast<int64_t>(row_of.size()) || row_of[static_cast<size_t>(n)] < 0)
                throw error("visible world: node " + std::to_string(n) + " is not visible");
            out.push_back(row_of[static_cast<size_t>(n)]);
        }
        return out;
    }
};

// Immutable per-run view of a dataset: normalized adjacency and features
// prepared once, plus visibility slicing.
struct Workspace {
    GraphDataset ds;
    std::shared_ptr<const NormAdj> full_adj;
    ad::DiffValue full_features;

    static Workspace make(GraphDataset dataset)
    {
        dataset.validate();
        Workspace ws;
        ws.full_adj =
            std::make_shared<NormAdj>(normalize_adjacency(dataset.edges, dataset.num_nodes));
        ws.full_features = ad::make_const(dataset.features);
        ws.ds = std::move(dataset);
        return ws;
    }

    VisibleWorld world(const SeenClassMask& mask, Visibility vis) const
    {
        VisibleWorld w;
        if (vis == Visibility::FullGraph) {
            w.adj = full_adj;
            w.features = full_features;
            w.rows = ds.num_nodes;
            w.row_of.resize(static_cast<size_t>(ds.num_nodes));
            for (int64_t i = 0; i < ds.num_nodes; ++i) w.row_of[static_cast<size_t>(i)] = i;
            return w;
        }
        std::vector<int64_t> nodes;
        w.row_of.assign(static_cast<size_t>(ds.num_nodes), -1);
        for (int64_t i = 0; i < ds.num_nodes; ++i)
            if (mask.is_seen(ds.labels[static_cast<size_t>(i)])) {
                w.row_of[static_cast<size_t>(i)] = static_cast<int64_t>(nodes.size());
                nodes.push_back(i);
            }
        w.rows = static_cast<int64_t>(nodes.size());
        std::vector<Edge> sub_edges;
        for (auto [u, v] : ds.edges) {
            int64_t ru = w.row_of[static_cast<size_t>(u)];
            int64_t rv = w.row_of[static_cast<size_t>(v)];
            if (ru >= 0 && rv >= 0) sub_edges.emplace_back(ru, rv);
        }
        w.adj = std::make_shared<NormAdj>(normalize_adjacency(sub_edges, w.rows));
        Tensor f(Shape{w.rows, ds.num_features()});
        for (size_t r = 0; r < nodes.size(); ++r)
            for (int64_t j = 0; j < ds.num_features(); ++j)
                f(static_cast<int64_t>(r), j) = ds.features(nodes[r], j);
        w.features = ad::make_const(std::move(f));
        return w;
    }
};

inline std::vector<int64_t> labels_of(const GraphDataset& ds, const std::vector<int64_t>& nodes)
{
    std::vector<int64_t> out;
    out.reserve(nodes.size());
    for (int64_t n : nodes) out.push_back(ds.labels[static_cast<size_t>(n)]);
    return out;
}

// Adds one uniformly chosen support node per task class.
inline void update_buffer(ReplayBuffer& buf, const TaskSpec& task, Rng& rng)
{
    for (auto& [c, nodes] : task.support) {
        if (nodes.empty()) throw error("update_buffer: class " + std::to_string(c) + " has empty support");
        buf.insert(c, rng.pick(nodes), /*allow_overwrite=*/buf.scope == ReplayBuffer::Scope::MetaEpoch);
    }
}

// A meta epoch with all random choices pre-drawn, so the summed outer
// objective is a deterministic function of theta (what the finite-difference
// oracle needs).
struct EpochPlan {
    MetaEpisode episode;
    std::vector<std::map<int64_t, int64_t>> buffer_picks; // per task: class -> node
};

inline EpochPlan make_epoch_plan(const TaskSpec& base, const SplitConfig& scfg, Rng& rng)
{
    EpochPlan plan;
    plan.episode = sample_meta_episode(base, scfg, rng);
    for (auto& task : plan.episode.sequence) {
        std::map<int64_t, int64_t> picks;
        for (auto& [c, nodes] : task.support) picks[c] = rng.pick(nodes);
        plan.buffer_picks.push_back(std::move(picks));
    }
    return plan;
}

// Value-freeze hooks for the finite-difference oracle: the implemented
// gradient treats distillation teachers as constants (they are detached), so
// the oracle must evaluate the objective with the teacher payloads pinned to
// their base-point values.
struct MetaObjectiveHooks {
    const std::vector<ParamSet>* frozen_teachers = nullptr;
    std::vector<ParamSet>* capture_teachers = nullptr;
};

namespace detail {

inline LossState meta_loss_state(const ParamSet& params, const ParamSet* teacher,
                                 const VisibleWorld& world, const SeenClassMask& mask,
                                 const TrainConfig& cfg, const ForwardMode& mode,
                                 const ReplayBuffer& bm, int64_t stage, TrainCounters* counters)
{
    LossState st;
    st.params = &params;
    st.teacher = teacher;
    st.adj = world.adj.get();
    st.features = world.features;
    st.mask = &mask;
    st.mode = mode;
    st.buffer_rows = world.map_rows(bm.nodes());
    st.buffer_labels = bm.labels();
    st.stage_index = stage;
    st.use_kd = cfg.flags.use_kd && cfg.flags.meta_gcl;
    st.use_sir = cfg.flags.use_sir && cfg.flags.meta_gcl;
    st.counters = counters ? &counters->loss : nullptr;
    return st;
}

} // namespace detail

// Repeated differentiable inner updates on the pseudo-task support, teacher
// pinned to the task-start parameters.
inline ParamSet inner_loop_adapt(const ParamSet& theta_start, const TaskSpec& task,
                                 const ReplayBuffer& bm, const ParamSet& teacher,
                                 LossPlugin& plugin, const VisibleWorld& world,
                                 const SeenClassMask& mask, const TrainConfig& cfg,
                                 const ForwardMode& mode, TrainCounters* counters)
{
    ParamSet cur = theta_start;
    auto support = task.support_nodes();
    for (int64_t j = 0; j < cfg.inner_steps; ++j) {
        LossState st = detail::meta_loss_state(cur, &teacher, world, mask, cfg, mode, bm, 0, counters);
        st.batch_rows = world.map_rows(support);
        st.batch_labels.clear();
        for (auto& [c, nodes] : task.support)
            st.batch_labels.insert(st.batch_labels.end(), nodes.size(), c);
        st.kd_rows = st.buffer_rows;
        ad::DiffValue loss = inner_loss(st, plugin);
        cur = sgd_step_differentiable(cur, loss, cfg.inner_lr);
    }
    return cur;
}

// The summed outer objective of one meta epoch. Under MCTF the parameter
// chain runs through the whole pseudo-task sequence; under plain MAML every
// task adapts from theta and the buffer plays no role in the outer loss.
inline ad::DiffValue mctf_outer_objective(const ParamSet& theta, const EpochPlan& plan,
                                          const TrainConfig& cfg, const VisibleWorld& world,
                                          const SeenClassMask& mask, const ForwardMode& mode,
                                          LossPlugin& plugin, ReplayBuffer& bm,
                                          TrainCounters* counters,
                                          const MetaObjectiveHooks& hooks = {})
{
    const bool chain = cfg.flags.meta_mode == MetaMode::Mctf;
    ParamSet cur = theta;
    ad::DiffValue total;
    std::vector<int64_t> past_query_nodes;
    std::vector<int64_t> past_query_labels;

    for (size_t i = 0; i < plan.episode.sequence.size(); ++i) {
        const TaskSpec& task = plan.episode.sequence[i];
        const ParamSet& task_start = chain ? cur : theta;
        ParamSet teacher = hooks.frozen_teachers ? (*hooks.frozen_teachers)[i]
                                                 : task_start.detached();
        if (hooks.capture_teachers) hooks.capture_teachers->push_back(teacher);

        ParamSet adapted = inner_loop_adapt(task_start, task, bm, teacher, plugin, world, mask,
                                            cfg, mode, counters);

        LossState st = detail::meta_loss_state(adapted, &teacher, world, mask, cfg, mode, bm,
                                               static_cast<int64_t>(i), counters);
        std::vector<int64_t> ce_nodes = task.query_nodes();
        std::vector<int64_t> ce_labels;
        for (auto& [c, nodes] : task.query) ce_labels.insert(ce_labels.end(), nodes.size(), c);
        if (cfg.flags.outer_ce_on_union) {
            std::vector<int64_t> all_nodes = past_query_nodes;
            all_nodes.insert(all_nodes.end(), ce_nodes.begin(), ce_nodes.end());
            std::vector<int64_t> all_labels = past_query_labels;
            all_labels.insert(all_labels.end(), ce_labels.begin(), ce_labels.end());
            st.batch_rows = world.map_rows(all_nodes);
            st.batch_labels = std::move(all_labels);
        } else {
            st.batch_rows = world.map_rows(ce_nodes);
            st.batch_labels = ce_labels;
        }
        st.kd_rows = world.map_rows(past_query_nodes);
        ad::DiffValue lo = outer_loss(st, plugin);
        total = total.defined() ? ad::add(total, lo) : lo;

        for (auto& [c, n] : plan.buffer_picks[i]) bm.insert(c, n, /*allow_overwrite=*/true);
        past_query_nodes.insert(past_query_nodes.end(), ce_nodes.begin(), ce_nodes.end());
        past_query_labels.insert(past_query_labels.end(), ce_labels.begin(), ce_labels.end());
        if (chain) cur = adapted;
    }
    return total;
}

struct EpochResult {
    ParamSet theta;
    double outer_loss_value = 0;
};

// One epoch: sample-free (the plan carries all random choices), chain the
// inner loops, differentiate the summed outer losses with respect to the
// pre-episode parameters, apply one Adam step. The meta buffer is empty at
// both epoch boundaries.
inline EpochResult mctf_epoch(const ParamSet& theta, const EpochPlan& plan, const TrainConfig& cfg,
                              const VisibleWorld& world, const SeenClassMask& mask,
                              AdamState& adam, const ForwardMode& mode, LossPlugin& plugin,
                              TrainCounters* counters = nullptr, ReplayBuffer* meta_buffer = nullptr)
{
    ReplayBuffer local;
    ReplayBuffer& bm = meta_buffer ? *meta_buffer : local;
    bm.scope = ReplayBuffer::Scope::MetaEpoch;
    bm.clear();

    ad::DiffValue obj = mctf_outer_objective(theta, plan, cfg, world, mask, mode, plugin, bm, counters);
    double value = obj.payload().item();
    if (!(value <= cfg.divergence_guard))
        throw error("divergence guard: outer loss " + std::to_string(value) + " exceeds " +
                    std::to_string(cfg.divergence_guard));

    std::vector<ad::DiffValue> grads;
    try {
        grads = ad::gradient(obj, theta.values, /*higher_order=*/false);
    } catch (const error& e) {
        throw error("outer gradient aborted the epoch: " + std::string(e.what()));
    }
    std::vector<Tensor> gt;
    gt.reserve(grads.size());
    for (auto& g : grads) gt.push_back(g.payload());

    EpochResult res;
    res.theta = adam_step(adam, theta, gt, cfg.outer_lr, cfg.weight_decay);
    res.outer_loss_value = value;
    bm.clear();
    if (counters) ++counters->meta_epochs_run;
    return res;
}

struct MetaTrainResult {
    ParamSet theta;
    std::vector<double> loss_curve;
};

// With use_mctf off this degrades to plain Adam training on the base support
// cross-entropy; no second-order machinery runs on that path.
inline MetaTrainResult meta_train(const Workspace& ws, const TaskStream& stream,
                                  const SplitConfig& scfg, const TrainConfig& cfg,
                                  TrainCounters* counters = nullptr, LossPlugin* plugin = nullptr)
{
    cfg.validate();
    KdSirPlugin default_plugin;
    if (!plugin) plugin = &default_plugin;

    SeenClassMask mask(stream.total_classes);
    mask.reveal(stream.base.classes);
    VisibleWorld world = ws.world(mask, cfg.visibility);

    MetaTrainResult res;
    res.theta = init_params(ws.ds.num_features(), stream.total_classes,
                            Rng::derive(cfg.seed, 0x1217), cfg.widths);
    Rng plan_rng(Rng::derive(cfg.seed, 0x9e1a));
    Rng dropout_rng(Rng::derive(cfg.seed, 0x5bd1));
    AdamState adam = AdamState::like(res.theta);

    if (!cfg.flags.use_mctf) {
        std::vector<int64_t> rows = world.map_rows(stream.base.support_nodes());
        std::vector<int64_t> labels;
        for (auto& [c, nodes] : stream.base.support) labels.insert(labels.end(), nodes.size(), c);
        for (int64_t e = 0; e < cfg.meta_epochs; ++e) {
            ForwardMode mode = cfg.dropout > 0 ? ForwardMode::train(dropout_rng, cfg.dropout)
                                               : ForwardMode::eval();
            ad::DiffValue logits = gcn_forward(res.theta, *world.adj, world.features, mode);
            ad::DiffValue loss = masked_cross_entropy(ad::row_select(logits, rows), labels, mask);
            double v = loss.payload().item();
            if (!(v <= cfg.divergence_guard)) throw error("divergence guard: base loss " + std::to_string(v));
            auto grads = ad::gradient(loss, res.theta.values, false);
            std::vector<Tensor> gt;
            for (auto& g : grads) gt.push_back(g.payload());
            res.theta = adam_step(adam, res.theta, gt, cfg.outer_lr, cfg.weight_decay);
            res.loss_curve.push_back(v);
        }
        return res;
    }

    for (int64_t e = 0; e < cfg.meta_epochs; ++e) {
        EpochPlan plan = make_epoch_plan(stream.base, scfg, plan_rng);
        ForwardMode mode = cfg.dropout > 0 ? ForwardMode::train(dropout_rng, cfg.dropout)
                                           : ForwardMode::eval();
        EpochResult er = mctf_epoch(res.theta, plan, cfg, world, mask, adam, mode, *plugin, counters);
        res.theta = er.theta;
        res.loss_curve.push_back(er.outer_loss_value);
    }
    return res;
}

struct StageRow {
    std::string stage;
    std::vector<double> per_task_acc;
    double overall = 0;
    int64_t seen_classes = 0;
    int64_t buffer_size = 0;
};

struct StageReport {
    uint64_t seed = 0;
    std::vector<StageRow> rows;
    std::vector<double> meta_loss_curve;
    std::vector<std::vector<double>> inc_loss_curves;

    AccuracyMatrix matrix() const
    {
        AccuracyMatrix m;
        for (auto& r : rows) {
            m.per_task.push_back(r.per_task_acc);
            m.overall.push_back(r.overall);
        }
        m.validate();
        return m;
    }
};

// Fine-tunes through the novel tasks with only the current support set and
// the replay buffer visible, evaluating on the cumulative query union after
// each task. Teachers are deep snapshots taken before each task's updates.
inline StageReport incremental_stage(const ParamSet& theta_star, const TaskStream& stream,
                                     const TrainConfig& cfg, const Workspace& ws,
                                     TrainCounters* counters = nullptr,
                                     LossPlugin* plugin = nullptr)
{
    cfg.validate();
    KdSirPlugin default_plugin;
    if (!plugin) plugin = &default_plugin;

    SeenClassMask mask(stream.total_classes);
    mask.reveal(stream.base.classes);
    Rng buffer_rng(Rng::derive(cfg.seed, 0xb0f));
    Rng dropout_rng(Rng::derive(cfg.seed, 0xd20));

    ParamSet theta = theta_star.deep_copy();
    ReplayBuffer buffer;
    buffer.scope = ReplayBuffer::Scope::IncrementalStage;
    if (cfg.flags.seed_buffer_with_base) update_buffer(buffer, stream.base, buffer_rng);

    StageReport rep;
    rep.seed = cfg.seed;

    auto eval_row = [&](int64_t upto) {
        VisibleWorld world = ws.world(mask, cfg.visibility);
        Tensor logits = eval_logits(theta, *world.adj, world.features);
        StageRow row;
        row.stage = stage_name(upto);
        row.seen_classes = mask.visible_count();
        row.buffer_size = buffer.size();
        int64_t correct = 0, total = 0;
        for (int64_t t = 0; t <= upto; ++t) {
            const TaskSpec& task = t == 0 ? stream.base : stream.novel[static_cast<size_t>(t - 1)];
            std::vector<int64_t> nodes = task.query_nodes();
            std::vector<int64_t> pred = predict_from_logits(logits, world.map_rows(nodes), mask);
            std::vector<int64_t> lab = labels_of(ws.ds, nodes);
            int64_t ok = 0;
            for (size_t k = 0; k < pred.size(); ++k)
                if (pred[k] == lab[k]) ++ok;
            row.per_task_acc.push_back(static_cast<double>(ok) / static_cast<double>(pred.size()));
            correct += ok;
            total += static_cast<int64_t>(pred.size());
        }
        row.overall = static_cast<double>(correct) / static_cast<double>(total);
        rep.rows.push_back(std::move(row));
    };

    eval_row(0);

    for (size_t i = 0; i < stream.novel.size(); ++i) {
        const TaskSpec& task = stream.novel[i];
        ParamSet teacher = theta.detached();
        mask.reveal(task.classes);
        VisibleWorld world = ws.world(mask, cfg.visibility);

        std::vector<int64_t> support = task.support_nodes();
        std::vector<int64_t> support_labels;
        for (auto& [c, nodes] : task.support)
            support_labels.insert(support_labels.end(), nodes.size(), c);

        AdamState adam = AdamState::like(theta);
        std::vector<double> curve;
        for (int64_t s = 0; s < cfg.inc_finetune_steps; ++s) {
            LossState st;
            st.params = &theta;
            st.teacher = &teacher;
            st.adj = world.adj.get();
            st.features = world.features;
            st.mask = &mask;
            st.mode = cfg.dropout > 0 ? ForwardMode::train(dropout_rng, cfg.dropout)
                                      : ForwardMode::eval();
            st.batch_rows = world.map_rows(support);
            st.batch_labels = support_labels;
            st.buffer_rows = world.map_rows(buffer.nodes());
            st.buffer_labels = buffer.labels();
            st.kd_rows = st.buffer_rows;
            st.stage_index = static_cast<int64_t>(i) + 1;
            st.use_kd = cfg.flags.use_kd;
            st.use_sir = cfg.flags.use_sir;
            st.counters = counters ? &counters->loss : nullptr;

            ad::DiffValue loss = incremental_loss(st, *plugin);
            double v = loss.payload().item();
            if (!(v <= cfg.divergence_guard))
                throw error("divergence guard: incremental loss " + std::to_string(v));
            curve.push_back(v);
            auto grads = ad::gradient(loss, theta.values, false);
            std::vector<Tensor> gt;
            for (auto& g : grads) gt.push_back(g.payload());
            theta = adam_step(adam, theta, gt, cfg.outer_lr, cfg.weight_decay);
        }
        rep.inc_loss_curves.push_back(std::move(curve));
        update_buffer(buffer, task, buffer_rng);
        eval_row(static_cast<int64_t>(i) + 1);
    }
    return rep;
}

} // namespace mega
