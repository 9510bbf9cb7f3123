#include "invae/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "invae/rng.hpp"

namespace invae {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        n *= e;
    }
    return n;
}

Tensor::Tensor(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), values(shape_product(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != shape_product(shape)) {
        throw std::invalid_argument("Tensor: value count does not match shape " + shape_str());
    }
}

Tensor Tensor::vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) {
        throw std::logic_error("Tensor::rows: not a matrix, shape " + shape_str());
    }
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) {
        throw std::logic_error("Tensor::cols: not a matrix, shape " + shape_str());
    }
    return shape[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

double Tensor::item() const {
    if (size() != 1) {
        throw std::logic_error("Tensor::item: size " + std::to_string(size()) + " != 1");
    }
    return values[0];
}

bool Tensor::all_finite() const {
    for (double v : values) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

void Tensor::check_finite(const std::string& context) const {
    if (!all_finite()) {
        throw std::runtime_error("non-finite values in " + context);
    }
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

using MatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " x " + b.shape_str());
    }
    Tensor out({a.rows(), b.cols()});
    MatMap ma(a.values.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    MatMap mb(b.values.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    MutMatMap mo(out.values.data(), static_cast<Eigen::Index>(out.rows()), static_cast<Eigen::Index>(out.cols()));
    mo.noalias() = ma * mb;
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values[i] += b.values[i];
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values[i] -= b.values[i];
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values[i] *= b.values[i];
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (double& v : out.values) {
        v *= c;
    }
    return out;
}

void fill_uniform(Tensor& t, Rng& rng, double bound) {
    for (double& v : t.values) {
        v = rng.uniform(-bound, bound);
    }
}

void ParamStore::add(const std::string& name, Tensor value) {
    if (contains(name)) {
        throw std::invalid_argument("ParamStore: duplicate name '" + name + "'");
    }
    entries_.push_back({name, std::move(value), false});
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) {
            return true;
        }
    }
    return false;
}

std::size_t ParamStore::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) {
            return i;
        }
    }
    throw std::out_of_range("ParamStore: unknown name '" + name + "'");
}

Tensor& ParamStore::get(const std::string& name) { return entries_[index_of(name)].value; }
const Tensor& ParamStore::get(const std::string& name) const { return entries_[index_of(name)].value; }

void ParamStore::set_frozen(const std::string& name, bool frozen) { entries_[index_of(name)].frozen = frozen; }
bool ParamStore::is_frozen(const std::string& name) const { return entries_[index_of(name)].frozen; }

void ParamStore::set_frozen_prefix(const std::string& prefix, bool frozen) {
    for (auto& e : entries_) {
        if (e.name.rfind(prefix, 0) == 0) {
            e.frozen = frozen;
        }
    }
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) {
        out.push_back(e.name);
    }
    return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
        if (e.name.rfind(prefix, 0) == 0) {
            out.push_back(e.name);
        }
    }
    return out;
}

} // namespace invae
