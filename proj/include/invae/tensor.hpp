#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace invae {

class Rng;

// Dense row-major tensor of 64-bit floats. Values are plain data; shape
// extents multiply to the value count. Public operations reject non-finite
// results: NaN/Inf is an error state, not a value.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, double fill = 0.0);
    Tensor(std::vector<std::size_t> s, std::vector<double> v);

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor vector(std::vector<double> v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t i) { return values[i]; }
    double at(std::size_t i) const { return values[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    double item() const; // requires size() == 1

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    void check_finite(const std::string& context) const;

    std::string shape_str() const;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

// C = A (r x k) * B (k x c). Eigen-backed kernel.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// Fill with uniform values in [-bound, bound].
void fill_uniform(Tensor& t, Rng& rng, double bound);

// Named tensors with per-name frozen flags. Iteration follows insertion
// order. Frozen parameters must come out of any optimizer step bitwise
// unchanged.
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor value;
        bool frozen = false;
    };

    void add(const std::string& name, Tensor value);
    bool contains(const std::string& name) const;

    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;

    void set_frozen(const std::string& name, bool frozen);
    bool is_frozen(const std::string& name) const;

    // Freeze/unfreeze every parameter whose name starts with the prefix.
    void set_frozen_prefix(const std::string& prefix, bool frozen);

    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

    std::size_t count() const { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Entry& entry(std::size_t i) { return entries_[i]; }

  private:
    std::vector<Entry> entries_;
    std::size_t index_of(const std::string& name) const;
};

} // namespace invae
