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
#include <stdexcept>
#include <string>
#include <vector>

namespace mega {

class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s)
{
    int64_t n = 1;
    for (int64_t e : s) {
        if (e < 0) throw error("negative extent in shape");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense 64-bit tensor, row-major. Rank 0 is a scalar (one element).
class Tensor {
public:
    Tensor() : shape_{}, data_(1, 0.0) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data))
    {
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw error("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0)
    {
    }

    static Tensor scalar(double v)
    {
        Tensor t;
        t.data_[0] = v;
        return t;
    }
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v)
    {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    // Rank-2 accessors.
    int64_t rows() const
    {
        require_rank(2, "rows()");
        return shape_[0];
    }
    int64_t cols() const
    {
        require_rank(2, "cols()");
        return shape_[1];
    }
    // Rank-1 length.
    int64_t size() const
    {
        require_rank(1, "size()");
        return shape_[0];
    }

    double& operator()(int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator()(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& operator()(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
    double operator()(int64_t i, int64_t j) const
    {
        return data_[static_cast<size_t>(i * shape_[1] + j)];
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    double item() const
    {
        if (numel() != 1)
            throw error("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool is_finite() const
    {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void require_finite(const char* context) const
    {
        if (!is_finite())
            throw error(std::string("non-finite value in ") + context + ", shape " +
                        shape_str(shape_));
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    void require_rank(int64_t r, const char* what) const
    {
        if (rank() != r)
            throw error(std::string(what) + " on tensor of shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

} // namespace mega
