#include "cablab/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cablab {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) {
            throw std::invalid_argument("tensor shape has non-positive dimension " + std::to_string(d));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel(shape)), fill);
}

Tensor Tensor::from(Shape s, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(s);
    if (numel(t.shape) != static_cast<std::int64_t>(values.size())) {
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(t.shape));
    }
    t.data = std::move(values);
    return t;
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), 0.0f);
    }
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0f);
}

void check_finite(const std::vector<float>& v, const std::string& what) {
    for (float x : v) {
        if (!std::isfinite(x)) {
            throw std::runtime_error("non-finite value in " + what);
        }
    }
}

void check_finite(const Tensor& t, const std::string& what) {
    check_finite(t.data, what);
}

float Rng::uniform(float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    return d(gen_);
}

int Rng::uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(gen_);
}

std::uint64_t Rng::draw_seed() {
    return gen_();
}

void Rng::fill_uniform(Tensor& t, float lo, float hi) {
    fill_uniform(t.data, lo, hi);
}

void Rng::fill_uniform(std::vector<float>& v, float lo, float hi) {
    std::uniform_real_distribution<float> d(lo, hi);
    for (auto& x : v) {
        x = d(gen_);
    }
}

std::vector<int> Rng::permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    // Fisher-Yates with the shared generator; std::shuffle is not seed-stable
    // across standard library implementations.
    for (int i = n - 1; i > 0; --i) {
        const int j = uniform_int(0, i);
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

}  // namespace cablab
