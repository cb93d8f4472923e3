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
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mega/rng.hpp"
#include "mega/sparse.hpp"
#include "mega/tensor.hpp"

// Reverse-mode automatic differentiation over dense tensors.
//
// The backward pass does not accumulate numbers: it emits new graph nodes
// built from the same primitive set, so the result of gradient() is itself a
// differentiable value. A gradient step can therefore be unrolled and
// differentiated again, which is how second-order updates are computed here
// without forming Hessians.

namespace mega::ad {

enum class Op : uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Transpose,
    SpMM,
    RowSelect,
    RowScatter,
    Relu,
    Exp,
    Square,
    Sum,
    Mean,
    RowwiseSum,
    ColwiseSum,
    BroadcastRowVec,
    BroadcastColVec,
    BroadcastScalar,
    LogSumExpRows,
    ConcatRows,
};

inline const char* op_name(Op op)
{
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::ScalarMul: return "scalar_mul";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::SpMM: return "spmm";
    case Op::RowSelect: return "row_select";
    case Op::RowScatter: return "row_scatter";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::RowwiseSum: return "rowwise_sum";
    case Op::ColwiseSum: return "colwise_sum";
    case Op::BroadcastRowVec: return "broadcast_rowvec";
    case Op::BroadcastColVec: return "broadcast_colvec";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::LogSumExpRows: return "logsumexp_rows";
    case Op::ConcatRows: return "concat_rows";
    }
    return "?";
}

// Per-thread graph accounting. A training run owns one logical thread, so
// these counters are exact per run and safe under parallel seeds.
struct NodeStats {
    int64_t live = 0;
    int64_t peak = 0;
    int64_t created = 0;
    int64_t higher_order_gradient_calls = 0;
};

inline NodeStats& stats()
{
    thread_local NodeStats s;
    return s;
}

inline void reset_peak()
{
    stats().peak = stats().live;
    stats().created = 0;
}

namespace testing {
// Fault-injection knob for the gradient-check harness: scales the relu
// backward mask. 1.0 in normal operation.
inline double& relu_backward_scale()
{
    thread_local double s = 1.0;
    return s;
}
} // namespace testing

class Node;
using NodePtr = std::shared_ptr<Node>;

class Node : public std::enable_shared_from_this<Node> {
public:
    Tensor value;
    Op op = Op::Leaf;
    bool param = false; // Leaf only: trainable parameter vs constant
    std::vector<NodePtr> parents;

    // Op-specific payload.
    double scalar = 0.0;             // ScalarMul
    SpOperator sp;                   // SpMM
    std::vector<int64_t> index;      // RowSelect / RowScatter
    int64_t extent = 0;              // RowScatter output rows; Broadcast* extent
    Shape target_shape;              // BroadcastScalar

    Node()
    {
        auto& s = stats();
        ++s.live;
        ++s.created;
        if (s.live > s.peak) s.peak = s.live;
    }
    ~Node() { --stats().live; }

    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;
};

// Handle to a node in the computation graph. Copies share the node.
class DiffValue {
public:
    DiffValue() = default;
    explicit DiffValue(NodePtr n) : n_(std::move(n)) {}

    bool defined() const { return static_cast<bool>(n_); }
    Node* node() const { return n_.get(); }
    const NodePtr& ptr() const { return n_; }

    const Tensor& payload() const { return req().value; }
    const Shape& shape() const { return req().value.shape(); }
    int64_t rank() const { return req().value.rank(); }
    Op op() const { return req().op; }
    bool is_leaf() const { return req().op == Op::Leaf; }
    bool is_param() const { return req().op == Op::Leaf && req().param; }

private:
    const Node& req() const
    {
        if (!n_) throw error("use of undefined DiffValue");
        return *n_;
    }
    NodePtr n_;
};

namespace detail {

inline NodePtr new_node(Tensor value, Op op, std::vector<NodePtr> parents)
{
    value.require_finite(op_name(op));
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    n->parents = std::move(parents);
    return n;
}

inline const Tensor& p(const DiffValue& v, const char* op)
{
    if (!v.defined()) throw error(std::string(op) + ": undefined operand");
    return v.payload();
}

} // namespace detail

inline DiffValue make_param(Tensor t)
{
    t.require_finite("leaf");
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->param = true;
    return DiffValue(std::move(n));
}

inline DiffValue make_const(Tensor t)
{
    t.require_finite("leaf");
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    return DiffValue(std::move(n));
}

inline DiffValue scalar_const(double v) { return make_const(Tensor::scalar(v)); }

// Same payload, constant-leaf provenance: gradients do not flow through.
inline DiffValue detach(const DiffValue& v) { return make_const(detail::p(v, "detach")); }

inline DiffValue add(const DiffValue& a, const DiffValue& b)
{
    const Tensor& ta = detail::p(a, "add");
    const Tensor& tb = detail::p(b, "add");
    if (!ta.same_shape(tb))
        throw error("add: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out.data()[static_cast<size_t>(i)] = ta.data()[static_cast<size_t>(i)] + tb.data()[static_cast<size_t>(i)];
    return DiffValue(detail::new_node(std::move(out), Op::Add, {a.ptr(), b.ptr()}));
}

inline DiffValue sub(const DiffValue& a, const DiffValue& b)
{
    const Tensor& ta = detail::p(a, "sub");
    const Tensor& tb = detail::p(b, "sub");
    if (!ta.same_shape(tb))
        throw error("sub: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out.data()[static_cast<size_t>(i)] = ta.data()[static_cast<size_t>(i)] - tb.data()[static_cast<size_t>(i)];
    return DiffValue(detail::new_node(std::move(out), Op::Sub, {a.ptr(), b.ptr()}));
}

inline DiffValue mul(const DiffValue& a, const DiffValue& b)
{
    const Tensor& ta = detail::p(a, "mul");
    const Tensor& tb = detail::p(b, "mul");
    if (!ta.same_shape(tb))
        throw error("mul: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out.data()[static_cast<size_t>(i)] = ta.data()[static_cast<size_t>(i)] * tb.data()[static_cast<size_t>(i)];
    return DiffValue(detail::new_node(std::move(out), Op::Mul, {a.ptr(), b.ptr()}));
}

inline DiffValue smul(const DiffValue& a, double s)
{
    const Tensor& ta = detail::p(a, "scalar_mul");
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out.data()[static_cast<size_t>(i)] = s * ta.data()[static_cast<size_t>(i)];
    auto n = detail::new_node(std::move(out), Op::ScalarMul, {a.ptr()});
    n->scalar = s;
    return DiffValue(std::move(n));
}

inline DiffValue matmul(const DiffValue& a, const DiffValue& b)
{
    const Tensor& ta = detail::p(a, "matmul");
    const Tensor& tb = detail::p(b, "matmul");
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
        throw error("matmul: incompatible shapes " + shape_str(ta.shape()) + " vs " +
                    shape_str(tb.shape()));
    int64_t n = ta.rows(), k = ta.cols(), m = tb.cols();
    Tensor out(Shape{n, m});
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = &ta.data()[static_cast<size_t>(i * k)];
        double* orow = &out.data()[static_cast<size_t>(i * m)];
        for (int64_t kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = &tb.data()[static_cast<size_t>(kk * m)];
            for (int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return DiffValue(detail::new_node(std::move(out), Op::MatMul, {a.ptr(), b.ptr()}));
}

inline DiffValue transpose(const DiffValue& a)
{
    const Tensor& ta = detail::p(a, "transpose");
    if (ta.rank() != 2) throw error("transpose: rank-2 operand required");
    Tensor out(Shape{ta.cols(), ta.rows()});
    for (int64_t i = 0; i < ta.rows(); ++i)
        for (int64_t j = 0; j < ta.cols(); ++j) out(j, i) = ta(i, j);
    return DiffValue(detail::new_node(std::move(out), Op::Transpose, {a.ptr()}));
}

// Sparse-dense product with a constant sparse side; gradients flow only into
// the dense operand.
inline DiffValue spmm(const SpOperator& op, const DiffValue& x)
{
    if (!op.fwd) throw error("spmm: empty sparse operator");
    Tensor out = op.fwd->multiply(detail::p(x, "spmm"));
    auto n = detail::new_node(std::move(out), Op::SpMM, {x.ptr()});
    n->sp = op;
    return DiffValue(std::move(n));
}

inline DiffValue row_select(const DiffValue& x, std::vector<int64_t> rows)
{
    const Tensor& tx = detail::p(x, "row_select");
    if (tx.rank() != 2) throw error("row_select: rank-2 operand required");
    int64_t c = tx.cols();
    Tensor out(Shape{static_cast<int64_t>(rows.size()), c});
    for (size_t r = 0; r < rows.size(); ++r) {
        int64_t src = rows[r];
        if (src < 0 || src >= tx.rows()) throw error("row_select: index out of range");
        std::copy_n(&tx.data()[static_cast<size_t>(src * c)], c, &out.data()[r * static_cast<size_t>(c)]);
    }
    auto n = detail::new_node(std::move(out), Op::RowSelect, {x.ptr()});
    n->extent = tx.rows();
    n->index = std::move(rows);
    return DiffValue(std::move(n));
}

// Scatter-add rows of x into a zero matrix with out_rows rows. Duplicate
// indices accumulate.
inline DiffValue row_scatter(const DiffValue& x, std::vector<int64_t> rows, int64_t out_rows)
{
    const Tensor& tx = detail::p(x, "row_scatter");
    if (tx.rank() != 2) throw error("row_scatter: rank-2 operand required");
    if (static_cast<int64_t>(rows.size()) != tx.rows())
        throw error("row_scatter: index count does not match rows");
    int64_t c = tx.cols();
    Tensor out(Shape{out_rows, c});
    for (size_t r = 0; r < rows.size(); ++r) {
        int64_t dst = rows[r];
        if (dst < 0 || dst >= out_rows) throw error("row_scatter: index out of range");
        for (int64_t j = 0; j < c; ++j)
            out(dst, j) += tx(static_cast<int64_t>(r), j);
    }
    auto n = detail::new_node(std::move(out), Op::RowScatter, {x.ptr()});
    n->extent = out_rows;
    n->index = std::move(rows);
    return DiffValue(std::move(n));
}

inline DiffValue relu(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "relu");
    Tensor out(tx.shape());
    for (int64_t i = 0; i < tx.numel(); ++i) {
        double v = tx.data()[static_cast<size_t>(i)];
        out.data()[static_cast<size_t>(i)] = v > 0.0 ? v : 0.0;
    }
    return DiffValue(detail::new_node(std::move(out), Op::Relu, {x.ptr()}));
}

inline DiffValue expv(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "exp");
    Tensor out(tx.shape());
    for (int64_t i = 0; i < tx.numel(); ++i)
        out.data()[static_cast<size_t>(i)] = std::exp(tx.data()[static_cast<size_t>(i)]);
    return DiffValue(detail::new_node(std::move(out), Op::Exp, {x.ptr()}));
}

inline DiffValue square(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "square");
    Tensor out(tx.shape());
    for (int64_t i = 0; i < tx.numel(); ++i) {
        double v = tx.data()[static_cast<size_t>(i)];
        out.data()[static_cast<size_t>(i)] = v * v;
    }
    return DiffValue(detail::new_node(std::move(out), Op::Square, {x.ptr()}));
}

inline DiffValue sum(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "sum");
    double acc = 0;
    for (double v : tx.data()) acc += v;
    return DiffValue(detail::new_node(Tensor::scalar(acc), Op::Sum, {x.ptr()}));
}

inline DiffValue mean(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "mean");
    if (tx.numel() == 0) throw error("mean of empty tensor");
    double acc = 0;
    for (double v : tx.data()) acc += v;
    return DiffValue(
        detail::new_node(Tensor::scalar(acc / static_cast<double>(tx.numel())), Op::Mean, {x.ptr()}));
}

inline DiffValue rowwise_sum(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "rowwise_sum");
    if (tx.rank() != 2) throw error("rowwise_sum: rank-2 operand required");
    Tensor out(Shape{tx.rows()});
    for (int64_t i = 0; i < tx.rows(); ++i) {
        double acc = 0;
        for (int64_t j = 0; j < tx.cols(); ++j) acc += tx(i, j);
        out(i) = acc;
    }
    return DiffValue(detail::new_node(std::move(out), Op::RowwiseSum, {x.ptr()}));
}

inline DiffValue colwise_sum(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "colwise_sum");
    if (tx.rank() != 2) throw error("colwise_sum: rank-2 operand required");
    Tensor out(Shape{tx.cols()});
    for (int64_t i = 0; i < tx.rows(); ++i)
        for (int64_t j = 0; j < tx.cols(); ++j) out(j) += tx(i, j);
    return DiffValue(detail::new_node(std::move(out), Op::ColwiseSum, {x.ptr()}));
}

// [c] -> [n x c]: the vector becomes every row.
inline DiffValue broadcast_rowvec(const DiffValue& v, int64_t n)
{
    const Tensor& tv = detail::p(v, "broadcast_rowvec");
    if (tv.rank() != 1) throw error("broadcast_rowvec: rank-1 operand required");
    int64_t c = tv.size();
    Tensor out(Shape{n, c});
    for (int64_t i = 0; i < n; ++i)
        std::copy_n(tv.data().data(), c, &out.data()[static_cast<size_t>(i * c)]);
    auto node = detail::new_node(std::move(out), Op::BroadcastRowVec, {v.ptr()});
    node->extent = n;
    return DiffValue(std::move(node));
}

// [n] -> [n x c]: the vector becomes every column.
inline DiffValue broadcast_colvec(const DiffValue& v, int64_t c)
{
    const Tensor& tv = detail::p(v, "broadcast_colvec");
    if (tv.rank() != 1) throw error("broadcast_colvec: rank-1 operand required");
    int64_t n = tv.size();
    Tensor out(Shape{n, c});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) out(i, j) = tv(i);
    auto node = detail::new_node(std::move(out), Op::BroadcastColVec, {v.ptr()});
    node->extent = c;
    return DiffValue(std::move(node));
}

inline DiffValue broadcast_scalar(const DiffValue& s, Shape shape)
{
    const Tensor& ts = detail::p(s, "broadcast_scalar");
    if (ts.numel() != 1) throw error("broadcast_scalar: scalar operand required");
    Tensor out = Tensor::full(shape, ts.data()[0]);
    auto node = detail::new_node(std::move(out), Op::BroadcastScalar, {s.ptr()});
    node->target_shape = std::move(shape);
    return DiffValue(std::move(node));
}

// Per-row log(sum(exp)), computed with the max shift: [n x c] -> [n].
inline DiffValue logsumexp_rows(const DiffValue& x)
{
    const Tensor& tx = detail::p(x, "logsumexp_rows");
    if (tx.rank() != 2) throw error("logsumexp_rows: rank-2 operand required");
    if (tx.cols() == 0) throw error("logsumexp_rows: zero columns");
    Tensor out(Shape{tx.rows()});
    for (int64_t i = 0; i < tx.rows(); ++i) {
        double mx = tx(i, 0);
        for (int64_t j = 1; j < tx.cols(); ++j) mx = std::max(mx, tx(i, j));
        double acc = 0;
        for (int64_t j = 0; j < tx.cols(); ++j) acc += std::exp(tx(i, j) - mx);
        out(i) = mx + std::log(acc);
    }
    return DiffValue(detail::new_node(std::move(out), Op::LogSumExpRows, {x.ptr()}));
}

inline DiffValue concat_rows(const DiffValue& a, const DiffValue& b)
{
    const Tensor& ta = detail::p(a, "concat_rows");
    const Tensor& tb = detail::p(b, "concat_rows");
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols())
        throw error("concat_rows: incompatible shapes " + shape_str(ta.shape()) + " vs " +
                    shape_str(tb.shape()));
    Tensor out(Shape{ta.rows() + tb.rows(), ta.cols()});
    std::copy(ta.data().begin(), ta.data().end(), out.data().begin());
    std::copy(tb.data().begin(), tb.data().end(), out.data().begin() + ta.data().size());
    return DiffValue(detail::new_node(std::move(out), Op::ConcatRows, {a.ptr(), b.ptr()}));
}

// Inverted-scale dropout mask: entries are 0 with probability rate, else
// 1/(1-rate). The mask is plain data; applying it is an elementwise multiply
// by a constant, so the same stochastic forward is exactly reproducible.
inline Tensor dropout_mask(const Shape& shape, double rate, Rng& rng)
{
    if (!(rate >= 0.0 && rate < 1.0)) throw error("dropout rate must be in [0, 1)");
    Tensor m(shape);
    double keep = 1.0 / (1.0 - rate);
    for (double& v : m.data()) v = rng.uniform() < rate ? 0.0 : keep;
    return m;
}

inline DiffValue dropout(const DiffValue& x, const Tensor& mask)
{
    if (!detail::p(x, "dropout").same_shape(mask)) throw error("dropout: mask shape mismatch");
    return mul(x, make_const(mask));
}

namespace detail {

// Nodes that can reach a requested leaf-or-interior target, in
// parents-before-consumers order.
struct ActiveGraph {
    std::vector<Node*> order;
    std::unordered_set<const Node*> active;
};

inline ActiveGraph active_subgraph(Node* root, const std::unordered_set<const Node*>& targets)
{
    ActiveGraph g;
    std::unordered_map<const Node*, uint8_t> state; // 1 = on stack, 2 = done
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    state[root] = 1;
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* pn = n->parents[idx].get();
            ++idx;
            auto it = state.find(pn);
            if (it == state.end()) {
                state[pn] = 1;
                stack.emplace_back(pn, 0);
            }
            continue;
        }
        bool act = targets.count(n) > 0;
        if (!act)
            for (auto& pp : n->parents)
                if (g.active.count(pp.get())) {
                    act = true;
                    break;
                }
        if (act) {
            g.active.insert(n);
            g.order.push_back(n);
        }
        state[n] = 2;
        stack.pop_back();
    }
    return g;
}

inline void accumulate(std::unordered_map<const Node*, DiffValue>& adj, const Node* target,
                       const DiffValue& contribution)
{
    auto it = adj.find(target);
    if (it == adj.end())
        adj.emplace(target, contribution);
    else
        it->second = add(it->second, contribution);
}

inline std::vector<int64_t> iota_index(int64_t begin, int64_t end)
{
    std::vector<int64_t> v(static_cast<size_t>(end - begin));
    for (int64_t i = begin; i < end; ++i) v[static_cast<size_t>(i - begin)] = i;
    return v;
}

// Emits the derivative of one node into its parents' adjoints. Every rule is
// expressed with catalog primitives, which keeps the backward result
// differentiable in turn.
inline void backward_rule(Node* n, const DiffValue& u,
                          std::unordered_map<const Node*, DiffValue>& adj,
                          const std::unordered_set<const Node*>& active)
{
    auto want = [&](size_t i) { return active.count(n->parents[i].get()) > 0; };
    auto parent = [&](size_t i) { return DiffValue(n->parents[i]); };
    auto self = [&]() { return DiffValue(n->shared_from_this()); };

    switch (n->op) {
    case Op::Leaf:
        break;
    case Op::Add:
        if (want(0)) accumulate(adj, n->parents[0].get(), u);
        if (want(1)) accumulate(adj, n->parents[1].get(), u);
        break;
    case Op::Sub:
        if (want(0)) accumulate(adj, n->parents[0].get(), u);
        if (want(1)) accumulate(adj, n->parents[1].get(), smul(u, -1.0));
        break;
    case Op::Mul:
        if (want(0)) accumulate(adj, n->parents[0].get(), mul(u, parent(1)));
        if (want(1)) accumulate(adj, n->parents[1].get(), mul(u, parent(0)));
        break;
    case Op::ScalarMul:
        if (want(0)) accumulate(adj, n->parents[0].get(), smul(u, n->scalar));
        break;
    case Op::MatMul:
        if (want(0)) accumulate(adj, n->parents[0].get(), matmul(u, transpose(parent(1))));
        if (want(1)) accumulate(adj, n->parents[1].get(), matmul(transpose(parent(0)), u));
        break;
    case Op::Transpose:
        if (want(0)) accumulate(adj, n->parents[0].get(), transpose(u));
        break;
    case Op::SpMM:
        if (want(0)) {
            SpOperator t;
            t.fwd = n->sp.bwd;
            t.bwd = n->sp.fwd;
            accumulate(adj, n->parents[0].get(), spmm(t, u));
        }
        break;
    case Op::RowSelect:
        if (want(0)) accumulate(adj, n->parents[0].get(), row_scatter(u, n->index, n->extent));
        break;
    case Op::RowScatter:
        if (want(0)) accumulate(adj, n->parents[0].get(), row_select(u, n->index));
        break;
    case Op::Relu:
        if (want(0)) {
            const Tensor& x = n->parents[0]->value;
            Tensor mask(x.shape());
            double scale = testing::relu_backward_scale();
            for (int64_t i = 0; i < x.numel(); ++i)
                mask.data()[static_cast<size_t>(i)] = x.data()[static_cast<size_t>(i)] > 0.0 ? scale : 0.0;
            accumulate(adj, n->parents[0].get(), mul(u, make_const(std::move(mask))));
        }
        break;
    case Op::Exp:
        if (want(0)) accumulate(adj, n->parents[0].get(), mul(u, self()));
        break;
    case Op::Square:
        if (want(0)) accumulate(adj, n->parents[0].get(), mul(u, smul(parent(0), 2.0)));
        break;
    case Op::Sum:
        if (want(0)) accumulate(adj, n->parents[0].get(), broadcast_scalar(u, n->parents[0]->value.shape()));
        break;
    case Op::Mean:
        if (want(0)) {
            double inv = 1.0 / static_cast<double>(n->parents[0]->value.numel());
            accumulate(adj, n->parents[0].get(),
                       broadcast_scalar(smul(u, inv), n->parents[0]->value.shape()));
        }
        break;
    case Op::RowwiseSum:
        if (want(0))
            accumulate(adj, n->parents[0].get(), broadcast_colvec(u, n->parents[0]->value.cols()));
        break;
    case Op::ColwiseSum:
        if (want(0))
            accumulate(adj, n->parents[0].get(), broadcast_rowvec(u, n->parents[0]->value.rows()));
        break;
    case Op::BroadcastRowVec:
        if (want(0)) accumulate(adj, n->parents[0].get(), colwise_sum(u));
        break;
    case Op::BroadcastColVec:
        if (want(0)) accumulate(adj, n->parents[0].get(), rowwise_sum(u));
        break;
    case Op::BroadcastScalar:
        if (want(0)) accumulate(adj, n->parents[0].get(), sum(u));
        break;
    case Op::LogSumExpRows:
        if (want(0)) {
            // d/dx = u_i * softmax(x)_ij, softmax written with catalog ops so
            // it stays differentiable.
            DiffValue x = parent(0);
            int64_t c = n->parents[0]->value.cols();
            DiffValue softmax = expv(sub(x, broadcast_colvec(self(), c)));
            accumulate(adj, n->parents[0].get(), mul(broadcast_colvec(u, c), softmax));
        }
        break;
    case Op::ConcatRows:
        if (want(0)) {
            int64_t n0 = n->parents[0]->value.rows();
            accumulate(adj, n->parents[0].get(), row_select(u, iota_index(0, n0)));
        }
        if (want(1)) {
            int64_t n0 = n->parents[0]->value.rows();
            int64_t n1 = n->parents[1]->value.rows();
            accumulate(adj, n->parents[1].get(), row_select(u, iota_index(n0, n0 + n1)));
        }
        break;
    }
}

} // namespace detail

// d objective / d wrt, by reverse traversal of the provenance graph.
// wrt entries may be leaves or interior values; entries the objective does
// not depend on get a zero gradient. With higher_order set, the returned
// values carry full provenance and can be differentiated again; without it
// they are constant leaves.
inline std::vector<DiffValue> gradient(const DiffValue& objective,
                                       const std::vector<DiffValue>& wrt, bool higher_order)
{
    if (!objective.defined()) throw error("gradient: undefined objective");
    if (objective.rank() != 0)
        throw error("gradient: objective must be scalar, got shape " +
                    shape_str(objective.shape()));
    if (higher_order) ++stats().higher_order_gradient_calls;

    std::unordered_set<const Node*> targets;
    for (const DiffValue& w : wrt) {
        if (!w.defined()) throw error("gradient: undefined wrt entry");
        targets.insert(w.node());
    }

    detail::ActiveGraph g = detail::active_subgraph(objective.node(), targets);

    std::unordered_map<const Node*, DiffValue> adj;
    if (g.active.count(objective.node())) {
        adj.emplace(objective.node(), scalar_const(1.0));
        for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
            Node* n = *it;
            auto a = adj.find(n);
            if (a == adj.end()) continue;
            DiffValue u = a->second;
            try {
                detail::backward_rule(n, u, adj, g.active);
            } catch (const error& e) {
                throw error(std::string("backward of ") + op_name(n->op) + ": " + e.what());
            }
        }
    }

    std::vector<DiffValue> out;
    out.reserve(wrt.size());
    for (const DiffValue& w : wrt) {
        auto it = adj.find(w.node());
        DiffValue gv = it != adj.end() ? it->second : make_const(Tensor::zeros(w.shape()));
        out.push_back(higher_order ? gv : detach(gv));
    }
    return out;
}

} // namespace mega::ad
