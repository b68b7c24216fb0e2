#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "unlearn/errors.hpp"

namespace unlearn {

using real = double;

// ---------------------------------------------------------------------------
// Tensor: dense row-major double tensor with a small-int shape. All model
// parameters, images and activations use this one type; layout is NCHW for
// image batches and (rows, cols) for matrices.
// ---------------------------------------------------------------------------
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, real fill);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(real v) { return Tensor({1}, v); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    real& operator[](size_t i) { return data_[i]; }
    real operator[](size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(real v);
    void add_scaled(const Tensor& o, real s);  // this += s * o
    real dot(const Tensor& o) const;
    real l2_norm() const;
    real max_abs() const;
    bool all_finite() const;

    // Reshape view (same element count); returns a copy with the new shape.
    Tensor reshaped(std::vector<int> new_shape) const;

    std::vector<real>& raw() { return data_; }
    const std::vector<real>& raw() const { return data_; }

private:
    std::vector<int> shape_;
    std::vector<real> data_;
};

size_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Rng: deterministic random stream (splitmix64 core). All randomness in the
// project flows through this type so runs are bitwise reproducible across
// platforms; std::random distributions are avoided on purpose.
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    real uniform();                 // [0, 1)
    real uniform(real lo, real hi);
    real normal();                  // standard normal, Box-Muller
    int uniform_int(int n);         // [0, n)
    bool bernoulli(real p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    real spare_ = 0.0;
};

// Deterministic child-seed derivation: hash of (root, label, index). Stages
// and per-example streams fork from the single run seed through this.
uint64_t derive_seed(uint64_t root, std::string_view label, uint64_t index = 0);

// FNV-1a 64-bit content hashing; used for fingerprints and artifact hashes.
uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 1469598103934665603ull);
uint64_t fnv1a64_str(std::string_view s, uint64_t seed = 1469598103934665603ull);
std::string hex64(uint64_t v);

}  // namespace unlearn
