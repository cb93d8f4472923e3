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
#include <string>
#include <vector>

#include "mega/autodiff.hpp"
#include "mega/model.hpp"

namespace mega {

// Classes encountered so far. Grows monotonically over the task stream.
class SeenClassMask {
public:
    SeenClassMask() = default;
    explicit SeenClassMask(int64_t total_classes) : seen_(static_cast<size_t>(total_classes), 0) {}

    int64_t total() const { return static_cast<int64_t>(seen_.size()); }
    bool is_seen(int64_t c) const
    {
        return c >= 0 && c < total() && seen_[static_cast<size_t>(c)] != 0;
    }
    int64_t visible_count() const
    {
        int64_t n = 0;
        for (uint8_t s : seen_) n += s;
        return n;
    }
    void reveal(const std::vector<int64_t>& classes)
    {
        for (int64_t c : classes) {
            if (c < 0 || c >= total()) throw error("mask: class out of range");
            seen_[static_cast<size_t>(c)] = 1;
        }
    }
    // Visible class ids, ascending.
    std::vector<int64_t> visible() const
    {
        std::vector<int64_t> out;
        for (int64_t c = 0; c < total(); ++c)
            if (seen_[static_cast<size_t>(c)]) out.push_back(c);
        return out;
    }
    // Column of class c among visible classes, -1 if hidden.
    int64_t position_of(int64_t c) const
    {
        if (!is_seen(c)) return -1;
        int64_t pos = 0;
        for (int64_t k = 0; k < c; ++k) pos += seen_[static_cast<size_t>(k)];
        return pos;
    }

private:
    std::vector<uint8_t> seen_;
};

// One stored node per seen class.
struct ReplayBuffer {
    enum class Scope { MetaEpoch, IncrementalStage };
    Scope scope = Scope::MetaEpoch;
    std::map<int64_t, int64_t> node_of_class; // class -> node index; label == class

    bool empty() const { return node_of_class.empty(); }
    int64_t size() const { return static_cast<int64_t>(node_of_class.size()); }
    void clear() { node_of_class.clear(); }
    bool contains(int64_t c) const { return node_of_class.count(c) > 0; }

    void insert(int64_t cls, int64_t node, bool allow_overwrite)
    {
        if (!allow_overwrite && contains(cls))
            throw error("replay buffer: class " + std::to_string(cls) + " already stored");
        node_of_class[cls] = node;
    }

    std::vector<int64_t> nodes() const
    {
        std::vector<int64_t> out;
        for (auto& [c, n] : node_of_class) out.push_back(n);
        return out;
    }
    std::vector<int64_t> labels() const
    {
        std::vector<int64_t> out;
        for (auto& [c, n] : node_of_class) out.push_back(c);
        return out;
    }
};

struct LossCounters {
    int64_t kd_terms = 0;
    int64_t sir_terms = 0;
};

namespace detail {

// [C x V] constant selector of the visible columns, ascending class order.
inline ad::DiffValue visible_selector(const SeenClassMask& mask)
{
    int64_t C = mask.total();
    int64_t V = mask.visible_count();
    if (V == 0) throw error("loss: no visible classes");
    Tensor m(Shape{C, V});
    for (int64_t c = 0; c < C; ++c) {
        int64_t pos = mask.position_of(c);
        if (pos >= 0) m(c, pos) = 1.0;
    }
    return ad::make_const(std::move(m));
}

} // namespace detail

// Mean over rows of -log softmax restricted to the visible classes; logits of
// hidden classes are excluded from the normalizer.
inline ad::DiffValue masked_cross_entropy(const ad::DiffValue& logits,
                                          const std::vector<int64_t>& labels,
                                          const SeenClassMask& mask)
{
    using namespace ad;
    if (labels.empty()) throw error("masked_cross_entropy: empty batch");
    const Tensor& t = logits.payload();
    if (t.rank() != 2 || t.rows() != static_cast<int64_t>(labels.size()))
        throw error("masked_cross_entropy: logits rows do not match label count");
    if (t.cols() != mask.total())
        throw error("masked_cross_entropy: logits columns do not match class count");

    int64_t b = static_cast<int64_t>(labels.size());
    int64_t V = mask.visible_count();
    Tensor onehot(Shape{b, V});
    for (int64_t i = 0; i < b; ++i) {
        int64_t pos = mask.position_of(labels[static_cast<size_t>(i)]);
        if (pos < 0)
            throw error("masked_cross_entropy: label " +
                        std::to_string(labels[static_cast<size_t>(i)]) + " is not visible");
        onehot(i, pos) = 1.0;
    }
    DiffValue sel = matmul(logits, mega::detail::visible_selector(mask));
    DiffValue picked = sum(mul(sel, make_const(std::move(onehot))));
    return smul(sub(sum(logsumexp_rows(sel)), picked), 1.0 / static_cast<double>(b));
}

// Squared output difference between a frozen teacher and the student on the
// selected rows, averaged over rows and visible columns. Teacher forward is
// detached and dropout-free.
inline ad::DiffValue kd_from_logits(const ad::DiffValue& teacher_logits,
                                    const ad::DiffValue& student_logits,
                                    const std::vector<int64_t>& rows, const SeenClassMask& mask)
{
    using namespace ad;
    if (rows.empty()) return scalar_const(0.0);
    DiffValue selector = mega::detail::visible_selector(mask);
    DiffValue t_sel = matmul(row_select(teacher_logits, rows), selector);
    DiffValue s_sel = matmul(row_select(student_logits, rows), selector);
    double denom = static_cast<double>(rows.size()) * static_cast<double>(mask.visible_count());
    return smul(sum(square(sub(t_sel, s_sel))), 1.0 / denom);
}

inline ad::DiffValue kd_loss(const ParamSet& teacher, const ParamSet& student,
                             const std::vector<int64_t>& node_indices, const NormAdj& adj,
                             const ad::DiffValue& features, const SeenClassMask& mask)
{
    ad::DiffValue t_logits = gcn_forward(teacher.detached(), adj, features, ForwardMode::eval());
    ad::DiffValue s_logits = gcn_forward(student, adj, features, ForwardMode::eval());
    return kd_from_logits(t_logits, s_logits, node_indices, mask);
}

inline ad::DiffValue sir_from_logits(const ad::DiffValue& student_logits,
                                     const std::vector<int64_t>& rows,
                                     const std::vector<int64_t>& labels,
                                     const SeenClassMask& mask)
{
    if (rows.empty()) return ad::scalar_const(0.0);
    for (int64_t c : labels)
        if (!mask.is_seen(c))
            throw error("sir loss: buffered class " + std::to_string(c) +
                        " is not visible (protocol violation)");
    return masked_cross_entropy(ad::row_select(student_logits, rows), labels, mask);
}

inline ad::DiffValue sir_loss(const ParamSet& params, const ReplayBuffer& buffer,
                              const NormAdj& adj, const ad::DiffValue& features,
                              const SeenClassMask& mask)
{
    if (buffer.empty()) return ad::scalar_const(0.0);
    ad::DiffValue logits = gcn_forward(params, adj, features, ForwardMode::eval());
    return sir_from_logits(logits, buffer.nodes(), buffer.labels(), mask);
}

// Everything a phase loss needs: current/teacher parameters, buffer contents,
// the visible graph, and the stage index. Row indices are in the coordinates
// of the forward pass (identical to node indices under full-graph
// visibility). student_logits is filled by the phase loss before the plugin
// hook runs, so all terms share one stochastic forward.
struct LossState {
    const ParamSet* params = nullptr;
    const ParamSet* teacher = nullptr; // detached; null when no teacher exists
    const NormAdj* adj = nullptr;
    ad::DiffValue features;
    const SeenClassMask* mask = nullptr;
    ForwardMode mode;

    std::vector<int64_t> batch_rows; // CE term rows (support or query)
    std::vector<int64_t> batch_labels;
    std::vector<int64_t> buffer_rows; // replay buffer rows
    std::vector<int64_t> buffer_labels;
    std::vector<int64_t> kd_rows; // distillation rows for this phase

    int64_t stage_index = 0;
    bool use_kd = true;
    bool use_sir = true;
    LossCounters* counters = nullptr;

    ad::DiffValue student_logits;
};

// Continual-learning loss contract: one hook per training phase, each
// returning a finite scalar term added to that phase's CE loss. Exact zero is
// the empty-buffer case. Alternative continual-learning methods implement the
// same three hooks.
class LossPlugin {
public:
    virtual ~LossPlugin() = default;
    virtual ad::DiffValue inner_term(const LossState& st) = 0;
    virtual ad::DiffValue outer_term(const LossState& st) = 0;
    virtual ad::DiffValue incremental_term(const LossState& st) = 0;
    virtual const char* name() const = 0;
};

// Default plugin: knowledge distillation plus single-instance replay.
class KdSirPlugin final : public LossPlugin {
public:
    const char* name() const override { return "kdsir"; }

    ad::DiffValue inner_term(const LossState& st) override
    {
        return add_terms(kd_term(st, st.buffer_rows), sir_term(st));
    }
    ad::DiffValue outer_term(const LossState& st) override
    {
        // The outer phase sees no support set, so there is no replay term.
        return add_terms(kd_term(st, st.kd_rows), ad::DiffValue());
    }
    ad::DiffValue incremental_term(const LossState& st) override
    {
        return add_terms(kd_term(st, st.buffer_rows), sir_term(st));
    }

private:
    static ad::DiffValue kd_term(const LossState& st, const std::vector<int64_t>& rows)
    {
        if (!st.use_kd || rows.empty() || st.teacher == nullptr) return {};
        if (st.counters) ++st.counters->kd_terms;
        ad::DiffValue t_logits = gcn_forward(*st.teacher, *st.adj, st.features, ForwardMode::eval());
        return kd_from_logits(t_logits, st.student_logits, rows, *st.mask);
    }
    static ad::DiffValue sir_term(const LossState& st)
    {
        if (!st.use_sir || st.buffer_rows.empty()) return {};
        if (st.counters) ++st.counters->sir_terms;
        return sir_from_logits(st.student_logits, st.buffer_rows, st.buffer_labels, *st.mask);
    }
    static ad::DiffValue add_terms(const ad::DiffValue& a, const ad::DiffValue& b)
    {
        if (a.defined() && b.defined()) return ad::add(a, b);
        if (a.defined()) return a;
        if (b.defined()) return b;
        return ad::scalar_const(0.0);
    }
};

namespace detail {

inline ad::DiffValue phase_ce(LossState& st, const char* phase)
{
    if (st.batch_rows.empty()) throw error(std::string(phase) + " loss: empty batch");
    st.student_logits = gcn_forward(*st.params, *st.adj, st.features, st.mode);
    return masked_cross_entropy(ad::row_select(st.student_logits, st.batch_rows), st.batch_labels,
                                *st.mask);
}

} // namespace detail

// CE on the pseudo-task support plus the plugin's distill/replay terms.
inline ad::DiffValue inner_loss(LossState& st, LossPlugin& plugin)
{
    ad::DiffValue ce = detail::phase_ce(st, "inner");
    return ad::add(ce, plugin.inner_term(st));
}

// CE on the current pseudo-task query plus distillation over past queries.
inline ad::DiffValue outer_loss(LossState& st, LossPlugin& plugin)
{
    ad::DiffValue ce = detail::phase_ce(st, "outer");
    return ad::add(ce, plugin.outer_term(st));
}

// CE on the novel support plus the plugin's terms against the frozen
// previous-task teacher.
inline ad::DiffValue incremental_loss(LossState& st, LossPlugin& plugin)
{
    ad::DiffValue ce = detail::phase_ce(st, "incremental");
    return ad::add(ce, plugin.incremental_term(st));
}

} // namespace mega
