#pragma once

// Dense row-major float matrix plus the handful of kernels the decoder needs.
// Storage is float; every reduction accumulates in double.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace imccd {

template <typename T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() { return data_; }
    std::span<const T> flat() const { return data_; }

    void append_row(std::span<const T> values) {
        if (rows_ == 0 && cols_ == 0) cols_ = values.size();
        if (values.size() != cols_) throw std::invalid_argument("BasicMatrix::append_row width mismatch");
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;
using BinaryMatrix = BasicMatrix<std::uint8_t>;

double dot(std::span<const float> a, std::span<const float> b);

// out = x * W  (x: 1 x in, W: in x out)
void matvec(std::span<const float> x, const Matrix& w, std::span<float> out);

// Numerically stable softmax over `logits`; entries equal to -inf get weight 0.
std::vector<double> softmax(std::span<const double> logits);

void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out);

float gelu(float x);

bool all_finite(std::span<const float> values);
bool all_finite(std::span<const double> values);

// Deterministic random source with platform-independent uniform/normal draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    std::uint64_t next_u64();
    double uniform();  // [0, 1)
    double normal();   // standard normal, Box-Muller
    std::size_t below(std::size_t bound);

private:
    std::uint64_t state_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream seed from a base seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace imccd
