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
#include <functional>
#include <string>
#include <vector>

#include "mega/autodiff.hpp"
#include "mega/episodes.hpp"
#include "mega/losses.hpp"
#include "mega/model.hpp"
#include "mega/trainer.hpp"

// Independent brute-force verifiers. Nothing here calls the trainer's
// differentiable inner-loop path; these evaluators exist to check it.

namespace mega::oracle {

struct FdSpec {
    double eps = 1e-5;
    double tolerance = 1e-6;
    double denom_floor = 1e-3; // relative-error denominator floor
};

inline double rel_err(double a, double b, double floor)
{
    double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

using Objective = std::function<double(const std::vector<Tensor>&)>;

// Central differences per coordinate: (f(x+eps e) - f(x-eps e)) / (2 eps).
inline std::vector<Tensor> finite_diff_gradient(const Objective& objective,
                                                const std::vector<Tensor>& theta0,
                                                const FdSpec& spec = {})
{
    if (!(spec.eps > 0)) throw error("finite differences: eps must be > 0");
    double base1 = objective(theta0);
    double base2 = objective(theta0);
    if (base1 != base2)
        throw error("finite differences: objective is not deterministic (" +
                    std::to_string(base1) + " vs " + std::to_string(base2) + ")");

    std::vector<Tensor> grad;
    grad.reserve(theta0.size());
    std::vector<Tensor> theta = theta0;
    for (size_t t = 0; t < theta.size(); ++t) {
        Tensor g(theta[t].shape());
        for (int64_t k = 0; k < theta[t].numel(); ++k) {
            size_t ks = static_cast<size_t>(k);
            double orig = theta[t].data()[ks];
            theta[t].data()[ks] = orig + spec.eps;
            double fp = objective(theta);
            theta[t].data()[ks] = orig - spec.eps;
            double fm = objective(theta);
            theta[t].data()[ks] = orig;
            g.data()[ks] = (fp - fm) / (2.0 * spec.eps);
        }
        grad.push_back(std::move(g));
    }
    return grad;
}

inline double max_rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor)
{
    if (a.size() != b.size()) throw error("max_rel_err: tensor count mismatch");
    double worst = 0;
    for (size_t t = 0; t < a.size(); ++t) {
        if (!a[t].same_shape(b[t])) throw error("max_rel_err: shape mismatch");
        for (int64_t k = 0; k < a[t].numel(); ++k)
            worst = std::max(worst, rel_err(a[t].data()[static_cast<size_t>(k)],
                                            b[t].data()[static_cast<size_t>(k)], floor));
    }
    return worst;
}

// Straightforward single-task second-order meta step: m inner updates on the
// support cross-entropy, query cross-entropy gradient back through the chain,
// then one first-step Adam update with L2 decay. Shares no code with the
// trainer's inner loop on purpose.
inline std::vector<Tensor> reference_maml_step(const ParamSet& theta, const TaskSpec& task,
                                               const NormAdj& adj, const ad::DiffValue& features,
                                               const SeenClassMask& mask, double alpha, double beta,
                                               int64_t m, double weight_decay)
{
    ParamSet leaves = theta.deep_copy();
    ParamSet cur = leaves;

    std::vector<int64_t> support = task.support_nodes();
    std::vector<int64_t> support_labels;
    for (auto& [c, nodes] : task.support) support_labels.insert(support_labels.end(), nodes.size(), c);
    std::vector<int64_t> query = task.query_nodes();
    std::vector<int64_t> query_labels;
    for (auto& [c, nodes] : task.query) query_labels.insert(query_labels.end(), nodes.size(), c);

    for (int64_t j = 0; j < m; ++j) {
        ad::DiffValue logits = gcn_forward(cur, adj, features, ForwardMode::eval());
        ad::DiffValue loss = masked_cross_entropy(ad::row_select(logits, support), support_labels, mask);
        std::vector<ad::DiffValue> g = ad::gradient(loss, cur.values, /*higher_order=*/true);
        std::vector<ad::DiffValue> next;
        for (size_t i = 0; i < g.size(); ++i)
            next.push_back(ad::sub(cur.values[i], ad::smul(g[i], alpha)));
        cur = cur.with_values(std::move(next));
    }

    ad::DiffValue qlogits = gcn_forward(cur, adj, features, ForwardMode::eval());
    ad::DiffValue qloss = masked_cross_entropy(ad::row_select(qlogits, query), query_labels, mask);
    std::vector<ad::DiffValue> outer = ad::gradient(qloss, leaves.values, /*higher_order=*/false);

    // First Adam step from zero moments: m_hat = g, v_hat = g^2.
    const double eps = 1e-8;
    std::vector<Tensor> out;
    for (size_t i = 0; i < outer.size(); ++i) {
        Tensor t = leaves.values[i].payload();
        const Tensor& g = outer[i].payload();
        for (int64_t k = 0; k < t.numel(); ++k) {
            size_t ks = static_cast<size_t>(k);
            double gd = g.data()[ks] + weight_decay * t.data()[ks];
            t.data()[ks] -= beta * gd / (std::sqrt(gd * gd) + eps);
        }
        out.push_back(std::move(t));
    }
    return out;
}

// Dense recomputation of the normalized adjacency, entry by entry.
inline Tensor dense_normalized_adjacency(const std::vector<Edge>& edges, int64_t n)
{
    Tensor a(Shape{n, n});
    for (auto [u, v] : edges) {
        if (u == v) continue;
        a(u, v) = 1.0;
        a(v, u) = 1.0;
    }
    for (int64_t i = 0; i < n; ++i) a(i, i) = 1.0;
    std::vector<double> dinv(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double d = 0;
        for (int64_t j = 0; j < n; ++j) d += a(i, j);
        dinv[static_cast<size_t>(i)] = 1.0 / std::sqrt(d);
    }
    Tensor out(Shape{n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (a(i, j) != 0.0) out(i, j) = dinv[static_cast<size_t>(i)] * a(i, j) * dinv[static_cast<size_t>(j)];
    return out;
}

// ---------------------------------------------------------------------------
// Gradient-check suite used by the `check-grad` command and the tests.
// ---------------------------------------------------------------------------

struct CheckResult {
    std::string name;
    double max_err = 0;
    double tolerance = 0;
    bool pass = false;
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Finite differences need a point where every relu is strictly off its kink.
// Zero-initialized biases put whole preactivation rows exactly at zero, so
// the check fixtures evaluate at a jittered parameter point instead.
inline ParamSet jittered(const ParamSet& p, uint64_t seed, double amp = 0.2)
{
    Rng rng(seed);
    std::vector<Tensor> ts = p.payloads();
    for (auto& t : ts)
        for (double& v : t.data()) v += rng.uniform(-amp, amp);
    return p.from_payloads(ts);
}

struct TinyFixture {
    GraphDataset ds;
    TaskStream stream;
    SplitConfig scfg;
    TrainConfig cfg;
    std::shared_ptr<Workspace> ws;
};

// 12-node fixture with small widths; N = 2 gives p = classes / 2 pseudo-tasks.
inline TinyFixture tiny_fixture(uint64_t seed, int64_t inner_steps, int64_t classes = 4,
                                int64_t nodes_per_class = 3)
{
    TinyFixture f;
    SbmConfig sbm;
    sbm.classes = classes;
    sbm.nodes_per_class = nodes_per_class;
    sbm.intra_edge_prob = 0.9;
    sbm.inter_edge_prob = 0.2;
    sbm.feature_dim = classes;
    sbm.feature_noise = 0.3;
    sbm.seed = seed;
    f.ds = generate_sbm(sbm);
    f.scfg.N = 2;
    f.scfg.K = 1;
    f.scfg.R = 1;
    f.scfg.base_class_count = classes;
    f.scfg.meta_query_cap = 1;
    f.scfg.seed = seed;
    f.stream = build_task_stream(f.ds, f.scfg);
    f.cfg.widths = GcnWidths{3, 2};
    f.cfg.inner_steps = inner_steps;
    f.cfg.inner_lr = 0.05;
    f.cfg.outer_lr = 0.005;
    f.cfg.dropout = 0.0;
    f.cfg.seed = seed;
    f.ws = std::make_shared<Workspace>(Workspace::make(f.ds));
    return f;
}

} // namespace detail

// Max relative error between the implemented meta-gradient of the summed
// outer objective and central finite differences, on a tiny instance.
// Distillation teachers are value-frozen at the base point, matching the
// detached-teacher semantics of the implemented gradient.
inline double meta_gradient_fd_error(uint64_t seed, int64_t inner_steps, bool kdsir,
                                     const FdSpec& spec = {}, int64_t classes = 4,
                                     int64_t nodes_per_class = 3)
{
    detail::TinyFixture f = detail::tiny_fixture(seed, inner_steps, classes, nodes_per_class);
    f.cfg.flags.use_kd = kdsir;
    f.cfg.flags.use_sir = kdsir;
    f.cfg.flags.meta_gcl = kdsir;

    SeenClassMask mask(f.ds.num_classes);
    mask.reveal(f.stream.base.classes);
    VisibleWorld world = f.ws->world(mask, Visibility::FullGraph);
    Rng plan_rng(Rng::derive(seed, 0x21));
    EpochPlan plan = make_epoch_plan(f.stream.base, f.scfg, plan_rng);

    ParamSet theta = detail::jittered(init_params(f.ds.num_features(), f.ds.num_classes,
                                                  Rng::derive(seed, 0x33), f.cfg.widths),
                                      Rng::derive(seed, 0x55));
    KdSirPlugin plugin;

    // To exercise KD/SIR with a non-empty buffer from the first pseudo-task,
    // pre-seed the meta buffer with one node per base class.
    auto preseed = [&](ReplayBuffer& bm) {
        if (!kdsir) return;
        Rng r(Rng::derive(seed, 0x44));
        bm.scope = ReplayBuffer::Scope::MetaEpoch;
        update_buffer(bm, f.stream.base, r);
    };

    std::vector<ParamSet> teachers;
    ReplayBuffer bm0;
    preseed(bm0);
    MetaObjectiveHooks capture;
    capture.capture_teachers = &teachers;
    ad::DiffValue obj = mctf_outer_objective(theta, plan, f.cfg, world, mask, ForwardMode::eval(),
                                             plugin, bm0, nullptr, capture);
    std::vector<ad::DiffValue> grads = ad::gradient(obj, theta.values, false);
    std::vector<Tensor> gt;
    for (auto& g : grads) gt.push_back(g.payload());

    MetaObjectiveHooks frozen;
    frozen.frozen_teachers = &teachers;
    Objective objective = [&](const std::vector<Tensor>& ts) {
        ParamSet th = theta.from_payloads(ts);
        ReplayBuffer bm;
        preseed(bm);
        ad::DiffValue o = mctf_outer_objective(th, plan, f.cfg, world, mask, ForwardMode::eval(),
                                               plugin, bm, nullptr, frozen);
        return o.payload().item();
    };
    std::vector<Tensor> fd = finite_diff_gradient(objective, theta.payloads(), spec);
    return max_rel_err(gt, fd, spec.denom_floor);
}

inline std::vector<CheckResult> run_gradient_checks()
{
    std::vector<CheckResult> results;
    auto record = [&](std::string name, double err, double tol) {
        results.push_back({std::move(name), err, tol, err < tol});
    };

    // Every catalog primitive composed into a scalar and checked against
    // central differences.
    {
        Rng rng(7151);
        FdSpec spec;
        double worst = 0;
        auto check = [&](const std::function<ad::DiffValue(const std::vector<ad::DiffValue>&)>& build,
                         std::vector<Tensor> inputs) {
            std::vector<ad::DiffValue> leaves;
            for (auto& t : inputs) leaves.push_back(ad::make_param(t));
            ad::DiffValue obj = build(leaves);
            std::vector<ad::DiffValue> g = ad::gradient(obj, leaves, false);
            std::vector<Tensor> gt;
            for (auto& gg : g) gt.push_back(gg.payload());
            Objective fn = [&](const std::vector<Tensor>& ts) {
                std::vector<ad::DiffValue> l;
                for (auto& t : ts) l.push_back(ad::make_param(t));
                return build(l).payload().item();
            };
            std::vector<Tensor> fd = finite_diff_gradient(fn, inputs, spec);
            worst = std::max(worst, max_rel_err(gt, fd, spec.denom_floor));
        };
        using V = std::vector<ad::DiffValue>;
        using namespace ad;
        Tensor a = detail::random_tensor({3, 4}, rng);
        Tensor b = detail::random_tensor({3, 4}, rng);
        Tensor c = detail::random_tensor({4, 2}, rng);
        Tensor r1 = detail::random_tensor({4}, rng);
        Tensor c1 = detail::random_tensor({3}, rng);
        check([](const V& v) { return sum(square(add(v[0], v[1]))); }, {a, b});
        check([](const V& v) { return sum(square(sub(v[0], v[1]))); }, {a, b});
        check([](const V& v) { return sum(mul(v[0], v[1])); }, {a, b});
        check([](const V& v) { return smul(sum(v[0]), 2.5); }, {a});
        check([](const V& v) { return sum(square(matmul(v[0], v[1]))); }, {a, c});
        check([](const V& v) { return sum(square(transpose(v[0]))); }, {a});
        check([](const V& v) { return sum(relu(v[0])); }, {a});
        check([](const V& v) { return sum(expv(v[0])); }, {a});
        check([](const V& v) { return mean(square(v[0])); }, {a});
        check([](const V& v) { return sum(square(rowwise_sum(v[0]))); }, {a});
        check([](const V& v) { return sum(square(colwise_sum(v[0]))); }, {a});
        check([](const V& v) { return sum(square(broadcast_rowvec(v[0], 3))); }, {r1});
        check([](const V& v) { return sum(square(broadcast_colvec(v[0], 4))); }, {c1});
        check([](const V& v) { return sum(square(broadcast_scalar(mean(v[0]), {2, 2}))); }, {a});
        check([](const V& v) { return sum(square(logsumexp_rows(v[0]))); }, {a});
        check([](const V& v) { return sum(square(concat_rows(v[0], v[1]))); }, {a, b});
        check([](const V& v) { return sum(square(row_select(v[0], {2, 0, 2}))); }, {a});
        check([](const V& v) { return sum(square(row_scatter(v[0], {4, 1, 4}, 6))); }, {a});
        {
            CsrMatrix sp = CsrMatrix::from_triplets(
                3, 3, {{0, 0, 0.5}, {0, 1, 0.3}, {1, 1, 1.0}, {2, 0, 0.2}, {2, 2, 0.7}});
            SpOperator op(std::move(sp));
            check([op](const V& v) { return sum(square(spmm(op, v[0]))); }, {a});
        }
        record("primitive_fd", worst, 1e-6);
    }

    // f = 0.5 theta' A theta with symmetric A: differentiating grad . v must
    // reproduce A v.
    {
        Rng rng(512);
        int64_t n = 5;
        Tensor amat(Shape{n, n});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j <= i; ++j) {
                double v = rng.uniform(-1, 1);
                amat(i, j) = v;
                amat(j, i) = v;
            }
        Tensor x0 = detail::random_tensor({n}, rng);
        Tensor vvec = detail::random_tensor({n}, rng);
        ad::DiffValue xm = ad::make_param(Tensor(Shape{n, 1}, x0.data()));
        ad::DiffValue am = ad::make_const(amat);
        ad::DiffValue f = ad::smul(ad::sum(ad::mul(xm, ad::matmul(am, xm))), 0.5);
        std::vector<ad::DiffValue> g = ad::gradient(f, {xm}, true);
        ad::DiffValue gv = ad::sum(ad::mul(g[0], ad::make_const(Tensor(Shape{n, 1}, vvec.data()))));
        std::vector<ad::DiffValue> hv = ad::gradient(gv, {xm}, false);
        double worst = 0;
        for (int64_t i = 0; i < n; ++i) {
            double expect = 0;
            for (int64_t j = 0; j < n; ++j) expect += amat(i, j) * vvec(j);
            worst = std::max(worst, std::abs(hv[0].payload()(i, 0) - expect));
        }
        record("second_order_quadratic", worst, 1e-10);
    }

    // GCN forward: gradient of summed logits vs finite differences.
    {
        FdSpec spec;
        SbmConfig sbm;
        sbm.classes = 3;
        sbm.nodes_per_class = 4;
        sbm.intra_edge_prob = 0.8;
        sbm.inter_edge_prob = 0.2;
        sbm.feature_dim = 3;
        sbm.feature_noise = 0.4;
        sbm.seed = 99;
        GraphDataset ds = generate_sbm(sbm);
        Workspace ws = Workspace::make(ds);
        ParamSet theta = detail::jittered(init_params(3, 3, 4242, GcnWidths{4, 3}), 616);
        ad::DiffValue logits = gcn_forward(theta, *ws.full_adj, ws.full_features, ForwardMode::eval());
        std::vector<ad::DiffValue> g = ad::gradient(ad::sum(logits), theta.values, false);
        std::vector<Tensor> gt;
        for (auto& gg : g) gt.push_back(gg.payload());
        Objective fn = [&](const std::vector<Tensor>& ts) {
            ParamSet th = theta.from_payloads(ts);
            return ad::sum(gcn_forward(th, *ws.full_adj, ws.full_features, ForwardMode::eval()))
                .payload()
                .item();
        };
        std::vector<Tensor> fd = finite_diff_gradient(fn, theta.payloads(), spec);
        record("model_gradient_fd", max_rel_err(gt, fd, spec.denom_floor), 1e-6);

        // Composed loss: masked CE plus KD plus replay CE against a fixed teacher.
        SeenClassMask mask(3);
        mask.reveal({0, 1, 2});
        ParamSet teacher = detail::jittered(init_params(3, 3, 777, GcnWidths{4, 3}), 99).detached();
        std::vector<int64_t> rows{0, 4, 8, 10};
        std::vector<int64_t> lab = labels_of(ds, rows);
        auto loss_of = [&](const ParamSet& th) {
            ad::DiffValue lg = gcn_forward(th, *ws.full_adj, ws.full_features, ForwardMode::eval());
            ad::DiffValue ce = masked_cross_entropy(ad::row_select(lg, rows), lab, mask);
            ad::DiffValue tlg = gcn_forward(teacher, *ws.full_adj, ws.full_features, ForwardMode::eval());
            ad::DiffValue kd = kd_from_logits(tlg, lg, {1, 5, 9}, mask);
            ad::DiffValue sir = sir_from_logits(lg, {2, 6}, labels_of(ds, {2, 6}), mask);
            return ad::add(ce, ad::add(kd, sir));
        };
        std::vector<ad::DiffValue> lg = ad::gradient(loss_of(theta), theta.values, false);
        std::vector<Tensor> lgt;
        for (auto& gg : lg) lgt.push_back(gg.payload());
        Objective lfn = [&](const std::vector<Tensor>& ts) {
            return loss_of(theta.from_payloads(ts)).payload().item();
        };
        std::vector<Tensor> lfd = finite_diff_gradient(lfn, theta.payloads(), spec);
        record("composed_loss_fd", max_rel_err(lgt, lfd, spec.denom_floor), 1e-5);
    }

    {
        FdSpec spec;
        spec.denom_floor = 1e-3;
        record("meta_gradient_fd", meta_gradient_fd_error(31, 1, true, spec), 1e-4);
    }

    return results;
}

} // namespace mega::oracle
