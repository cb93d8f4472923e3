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
#include <memory>
#include <vector>

#include "mega/tensor.hpp"

namespace mega {

// Compressed-row sparse matrix. Column indices are sorted within each row.
struct CsrMatrix {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<int64_t> row_ptr; // size rows + 1
    std::vector<int64_t> col;
    std::vector<double> val;

    static CsrMatrix from_triplets(int64_t rows, int64_t cols,
                                   std::vector<std::tuple<int64_t, int64_t, double>> trip)
    {
        CsrMatrix m;
        m.rows = rows;
        m.cols = cols;
        std::vector<int64_t> count(static_cast<size_t>(rows) + 1, 0);
        for (auto& [i, j, v] : trip) {
            if (i < 0 || i >= rows || j < 0 || j >= cols)
                throw error("sparse triplet out of range");
            (void)v;
            ++count[static_cast<size_t>(i) + 1];
        }
        m.row_ptr.assign(static_cast<size_t>(rows) + 1, 0);
        for (int64_t i = 0; i < rows; ++i)
            m.row_ptr[static_cast<size_t>(i) + 1] = m.row_ptr[static_cast<size_t>(i)] + count[static_cast<size_t>(i) + 1];
        m.col.resize(trip.size());
        m.val.resize(trip.size());
        std::vector<int64_t> cursor(m.row_ptr.begin(), m.row_ptr.end() - 1);
        // Triplets are expected sorted by (row, col); builders below guarantee it.
        for (auto& [i, j, v] : trip) {
            int64_t k = cursor[static_cast<size_t>(i)]++;
            m.col[static_cast<size_t>(k)] = j;
            m.val[static_cast<size_t>(k)] = v;
        }
        return m;
    }

    int64_t nnz() const { return static_cast<int64_t>(val.size()); }

    double at(int64_t i, int64_t j) const
    {
        for (int64_t k = row_ptr[static_cast<size_t>(i)]; k < row_ptr[static_cast<size_t>(i) + 1]; ++k)
            if (col[static_cast<size_t>(k)] == j) return val[static_cast<size_t>(k)];
        return 0.0;
    }

    // y = this * x, x dense [cols x k] (or rank-1 [cols]).
    Tensor multiply(const Tensor& x) const
    {
        if (x.rank() == 2) {
            if (x.rows() != cols) throw error("spmm: inner dimension mismatch");
            int64_t k = x.cols();
            Tensor y(Shape{rows, k});
            for (int64_t i = 0; i < rows; ++i) {
                double* yrow = &y.data()[static_cast<size_t>(i * k)];
                for (int64_t p = row_ptr[static_cast<size_t>(i)]; p < row_ptr[static_cast<size_t>(i) + 1]; ++p) {
                    double a = val[static_cast<size_t>(p)];
                    const double* xrow = &x.data()[static_cast<size_t>(col[static_cast<size_t>(p)] * k)];
                    for (int64_t q = 0; q < k; ++q) yrow[q] += a * xrow[q];
                }
            }
            return y;
        }
        if (x.rank() == 1) {
            if (x.size() != cols) throw error("spmv: dimension mismatch");
            Tensor y(Shape{rows});
            for (int64_t i = 0; i < rows; ++i) {
                double acc = 0;
                for (int64_t p = row_ptr[static_cast<size_t>(i)]; p < row_ptr[static_cast<size_t>(i) + 1]; ++p)
                    acc += val[static_cast<size_t>(p)] * x(col[static_cast<size_t>(p)]);
                y(i) = acc;
            }
            return y;
        }
        throw error("sparse multiply expects rank-1 or rank-2 dense operand");
    }

    CsrMatrix transposed() const
    {
        std::vector<std::tuple<int64_t, int64_t, double>> trip;
        trip.reserve(val.size());
        // Gather per target row to keep triplets sorted.
        std::vector<std::vector<std::pair<int64_t, double>>> by_row(static_cast<size_t>(cols));
        for (int64_t i = 0; i < rows; ++i)
            for (int64_t p = row_ptr[static_cast<size_t>(i)]; p < row_ptr[static_cast<size_t>(i) + 1]; ++p)
                by_row[static_cast<size_t>(col[static_cast<size_t>(p)])].emplace_back(i, val[static_cast<size_t>(p)]);
        for (int64_t j = 0; j < cols; ++j)
            for (auto& [i, v] : by_row[static_cast<size_t>(j)]) trip.emplace_back(j, i, v);
        return from_triplets(cols, rows, std::move(trip));
    }
};

// A constant sparse operator together with its transpose, ready for use on
// both sides of a backward pass.
struct SpOperator {
    std::shared_ptr<const CsrMatrix> fwd;
    std::shared_ptr<const CsrMatrix> bwd; // transpose of fwd

    SpOperator() = default;
    explicit SpOperator(CsrMatrix m)
    {
        auto f = std::make_shared<CsrMatrix>(std::move(m));
        bwd = std::make_shared<CsrMatrix>(f->transposed());
        fwd = std::move(f);
    }
};

} // namespace mega
