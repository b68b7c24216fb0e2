#include "unlearn/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

namespace unlearn {

size_t shape_size(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, real fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

void Tensor::fill(real v) {
    for (real& x : data_) x = v;
}

void Tensor::add_scaled(const Tensor& o, real s) {
    if (!same_shape(o)) {
        throw ShapeError("add_scaled shape mismatch " + shape_str(shape_) + " vs " +
                         shape_str(o.shape_));
    }
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
}

real Tensor::dot(const Tensor& o) const {
    if (!same_shape(o)) {
        throw ShapeError("dot shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
    }
    real acc = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) acc += data_[i] * o.data_[i];
    return acc;
}

real Tensor::l2_norm() const {
    real acc = 0.0;
    for (real x : data_) acc += x * x;
    return std::sqrt(acc);
}

real Tensor::max_abs() const {
    real m = 0.0;
    for (real x : data_) m = std::max(m, std::fabs(x));
    return m;
}

bool Tensor::all_finite() const {
    for (real x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
    if (shape_size(new_shape) != data_.size()) {
        throw ShapeError("reshape from " + shape_str(shape_) + " to " + shape_str(new_shape));
    }
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
}

// --------------------------------- Rng -------------------------------------

static inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t Rng::next_u64() { return splitmix64(state_); }

real Rng::uniform() {
    // 53-bit mantissa in [0, 1)
    return static_cast<real>(next_u64() >> 11) * 0x1.0p-53;
}

real Rng::uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

real Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 bounded away from zero so log stays finite.
    real u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    real u2 = uniform();
    real r = std::sqrt(-2.0 * std::log(u1));
    real a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

int Rng::uniform_int(int n) {
    // Rejection-free modulo is fine here: n is tiny relative to 2^64.
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
}

uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t index) {
    uint64_t h = fnv1a64(&root, sizeof(root));
    h = fnv1a64(label.data(), label.size(), h);
    h = fnv1a64(&index, sizeof(index), h);
    return h;
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv1a64_str(std::string_view s, uint64_t seed) { return fnv1a64(s.data(), s.size(), seed); }

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace unlearn
