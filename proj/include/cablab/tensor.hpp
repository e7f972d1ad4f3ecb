#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace cablab {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense FP32 n-dimensional array in row-major order, with an optional
// gradient buffer of identical shape.
struct Tensor {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until ensure_grad()

    Tensor() = default;
    explicit Tensor(Shape s, float fill = 0.0f);
    static Tensor from(Shape s, std::vector<float> values);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    bool has_grad() const { return !grad.empty(); }
    void ensure_grad();
    void zero_grad();

    float& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
};

// Throws if the tensor contains NaN/Inf. `what` names the op boundary.
void check_finite(const Tensor& t, const std::string& what);
void check_finite(const std::vector<float>& v, const std::string& what);

// Single seeded generator threaded explicitly through every stochastic
// operation (init, shuffling, SA search, range sampling, reconstruction
// restarts) so experiments replay exactly.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    float uniform(float lo, float hi);
    int uniform_int(int lo, int hi);  // inclusive bounds
    std::uint64_t draw_seed();
    void fill_uniform(Tensor& t, float lo, float hi);
    void fill_uniform(std::vector<float>& v, float lo, float hi);
    std::vector<int> permutation(int n);

    std::mt19937_64& raw() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace cablab
