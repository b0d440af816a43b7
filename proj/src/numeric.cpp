#include "imccd/numeric.hpp"

#include "imccd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace imccd {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::input: return "input";
        case ErrorKind::config: return "config";
        case ErrorKind::format: return "format";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::internal: return "internal";
        case ErrorKind::usage: return "usage";
        case ErrorKind::data: return "data";
    }
    return "unknown";
}

double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
    return acc;
}

void matvec(std::span<const float> x, const Matrix& w, std::span<float> out) {
    std::vector<double> acc(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto wr = w.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) acc[j] += xi * double(wr[j]);
    }
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] = float(acc[j]);
}

std::vector<double> softmax(std::span<const double> logits) {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    double mx = neg_inf;
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> out(logits.size(), 0.0);
    if (mx == neg_inf) return out;
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (logits[i] == neg_inf) continue;
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
    double ss = 0.0;
    for (float v : x) ss += double(v) * double(v);
    const double inv = 1.0 / std::sqrt(ss / double(x.size()) + 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = float(double(x[i]) * inv * double(gain[i]));
}

float gelu(float x) {
    const double v = x;
    return float(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
}

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
}

// xoshiro256**
std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t bound) {
    if (bound == 0) throw InternalError("Rng::below with zero bound");
    return std::size_t(uniform() * double(bound)) % bound;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t s = base ^ (stream * 0xd1b54a32d192ed03ULL);
    splitmix64(s);
    return splitmix64(s);
}

}  // namespace imccd
