#include "invae/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "invae/special.hpp"

namespace invae {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using MutMatMap = Eigen::Map<RowMat>;

MatMap map_of(const Tensor& t) {
    return MatMap(t.values.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MutMatMap map_of(Tensor& t) {
    return MutMatMap(t.values.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

double unary_eval(Unary kind, double x) {
    switch (kind) {
    case Unary::Relu:
        return x > 0.0 ? x : 0.0;
    case Unary::Step:
        return x > 0.0 ? 1.0 : 0.0;
    case Unary::Zero:
        return 0.0;
    case Unary::Tanh:
        return std::tanh(x);
    case Unary::TanhD: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
    }
    case Unary::TanhD2: {
        const double t = std::tanh(x);
        return -2.0 * t * (1.0 - t * t);
    }
    case Unary::TanhD3: {
        const double t = std::tanh(x);
        return -2.0 * (1.0 - t * t) * (1.0 - 3.0 * t * t);
    }
    case Unary::Softplus:
        return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
    case Unary::Sigmoid:
        return stable_sigmoid(x);
    case Unary::SigmoidD: {
        const double s = stable_sigmoid(x);
        return s * (1.0 - s);
    }
    case Unary::SigmoidD2: {
        const double s = stable_sigmoid(x);
        return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
    case Unary::Exp:
        return std::exp(x);
    case Unary::Identity:
        return x;
    }
    throw std::logic_error("unary_eval: unknown kind");
}

Unary unary_deriv(Unary kind) {
    switch (kind) {
    case Unary::Relu:
        return Unary::Step;
    case Unary::Step:
        return Unary::Zero;
    case Unary::Zero:
        return Unary::Zero;
    case Unary::Tanh:
        return Unary::TanhD;
    case Unary::TanhD:
        return Unary::TanhD2;
    case Unary::TanhD2:
        return Unary::TanhD3;
    case Unary::Softplus:
        return Unary::Sigmoid;
    case Unary::Sigmoid:
        return Unary::SigmoidD;
    case Unary::SigmoidD:
        return Unary::SigmoidD2;
    case Unary::Exp:
        return Unary::Exp;
    default:
        throw std::logic_error("unary_deriv: derivative kind not available at this order");
    }
}

Graph::Var Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Graph::Var Graph::input(Tensor v) {
    Node n;
    n.op = Op::Input;
    n.value = std::move(v);
    n.needs_grad = false;
    return push(std::move(n));
}

Graph::Var Graph::param(const std::string& name) {
    if (store_ == nullptr) {
        throw std::logic_error("Graph::param: no parameter store attached");
    }
    auto it = param_cache_.find(name);
    if (it != param_cache_.end()) {
        return it->second;
    }
    Node n;
    n.op = Op::Param;
    n.pname = name;
    n.value = store_->get(name); // throws on unknown name
    // Frozen parameters enter the tape as constants: no gradient is
    // computed for them, which realizes the per-loss update scopes.
    n.needs_grad = !store_->is_frozen(name);
    Var v = push(std::move(n));
    param_cache_[name] = v;
    return v;
}

Graph::Var Graph::add(Var a, Var b) {
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.value = invae::add(value(a), value(b));
    n.needs_grad = needs(a) || needs(b);
    return push(std::move(n));
}

Graph::Var Graph::sub(Var a, Var b) {
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    n.value = invae::sub(value(a), value(b));
    n.needs_grad = needs(a) || needs(b);
    return push(std::move(n));
}

Graph::Var Graph::mul(Var a, Var b) {
    Node n;
    n.op = Op::Mul;
    n.a = a;
    n.b = b;
    n.value = invae::mul(value(a), value(b));
    n.needs_grad = needs(a) || needs(b);
    return push(std::move(n));
}

Graph::Var Graph::affine(Var a, double k, double c) {
    Node n;
    n.op = Op::Affine;
    n.a = a;
    n.k = k;
    n.k2 = c;
    n.value = value(a);
    for (double& x : n.value.values) {
        x = k * x + c;
    }
    n.needs_grad = needs(a);
    return push(std::move(n));
}

Graph::Var Graph::matmul(Var a, Var b) {
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.value = invae::matmul(value(a), value(b));
    n.needs_grad = needs(a) || needs(b);
    return push(std::move(n));
}

Graph::Var Graph::add_rowvec(Var m, Var v) {
    const Tensor& tm = value(m);
    const Tensor& tv = value(v);
    if (tv.rank() != 1 || tm.cols() != tv.shape[0]) {
        throw std::invalid_argument("add_rowvec: shape mismatch");
    }
    Node n;
    n.op = Op::AddRowVec;
    n.a = m;
    n.b = v;
    n.value = tm;
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            n.value.at(r, c) += tv.at(c);
        }
    }
    n.needs_grad = needs(m) || needs(v);
    return push(std::move(n));
}

Graph::Var Graph::mul_rowvec(Var m, Var v) {
    const Tensor& tm = value(m);
    const Tensor& tv = value(v);
    if (tv.rank() != 1 || tm.cols() != tv.shape[0]) {
        throw std::invalid_argument("mul_rowvec: shape mismatch");
    }
    Node n;
    n.op = Op::MulRowVec;
    n.a = m;
    n.b = v;
    n.value = tm;
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            n.value.at(r, c) *= tv.at(c);
        }
    }
    n.needs_grad = needs(m) || needs(v);
    return push(std::move(n));
}

Graph::Var Graph::mul_colvec(Var m, Var v) {
    const Tensor& tm = value(m);
    const Tensor& tv = value(v);
    if (tv.rank() != 1 || tm.rows() != tv.shape[0]) {
        throw std::invalid_argument("mul_colvec: shape mismatch");
    }
    Node n;
    n.op = Op::MulColVec;
    n.a = m;
    n.b = v;
    n.value = tm;
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            n.value.at(r, c) *= tv.at(r);
        }
    }
    n.needs_grad = needs(m) || needs(v);
    return push(std::move(n));
}

Graph::Var Graph::unary(Unary kind, Var a) {
    Node n;
    n.op = Op::UnaryOp;
    n.a = a;
    n.kind = kind;
    n.value = value(a);
    for (double& x : n.value.values) {
        x = unary_eval(kind, x);
    }
    n.needs_grad = needs(a);
    return push(std::move(n));
}

Graph::Var Graph::softmax_rows(Var m) {
    const Tensor& tm = value(m);
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = m;
    n.value = tm;
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        double mx = -1e300;
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            mx = std::max(mx, tm.at(r, c));
        }
        double s = 0.0;
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            double e = std::exp(tm.at(r, c) - mx);
            n.value.at(r, c) = e;
            s += e;
        }
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            n.value.at(r, c) /= s;
        }
    }
    n.needs_grad = needs(m);
    return push(std::move(n));
}

Graph::Var Graph::row_sum(Var m) {
    const Tensor& tm = value(m);
    Node n;
    n.op = Op::RowSum;
    n.a = m;
    n.value = Tensor({tm.rows()});
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            s += tm.at(r, c);
        }
        n.value.at(r) = s;
    }
    n.needs_grad = needs(m);
    return push(std::move(n));
}

Graph::Var Graph::sum(Var a) {
    const Tensor& ta = value(a);
    double s = 0.0;
    for (double x : ta.values) {
        s += x;
    }
    Node n;
    n.op = Op::Sum;
    n.a = a;
    n.value = Tensor::scalar(s);
    n.needs_grad = needs(a);
    return push(std::move(n));
}

Graph::Var Graph::mean(Var a) {
    const Tensor& ta = value(a);
    if (ta.size() == 0) {
        throw std::invalid_argument("mean: empty tensor");
    }
    double s = 0.0;
    for (double x : ta.values) {
        s += x;
    }
    Node n;
    n.op = Op::Mean;
    n.a = a;
    n.value = Tensor::scalar(s / static_cast<double>(ta.size()));
    n.needs_grad = needs(a);
    return push(std::move(n));
}

Graph::Var Graph::logsumexp_rows(Var m) {
    const Tensor& tm = value(m);
    Node n;
    n.op = Op::LogSumExpRows;
    n.a = m;
    n.value = Tensor({tm.rows()});
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        double mx = -1e300;
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            mx = std::max(mx, tm.at(r, c));
        }
        double s = 0.0;
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            s += std::exp(tm.at(r, c) - mx);
        }
        n.value.at(r) = mx + std::log(s);
    }
    n.needs_grad = needs(m);
    return push(std::move(n));
}

Graph::Var Graph::concat_cols(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows()) {
        throw std::invalid_argument("concat_cols: shape mismatch");
    }
    Node n;
    n.op = Op::ConcatCols;
    n.a = a;
    n.b = b;
    n.value = Tensor({ta.rows(), ta.cols() + tb.cols()});
    for (std::size_t r = 0; r < ta.rows(); ++r) {
        for (std::size_t c = 0; c < ta.cols(); ++c) {
            n.value.at(r, c) = ta.at(r, c);
        }
        for (std::size_t c = 0; c < tb.cols(); ++c) {
            n.value.at(r, ta.cols() + c) = tb.at(r, c);
        }
    }
    n.i0 = ta.cols();
    n.needs_grad = needs(a) || needs(b);
    return push(std::move(n));
}

Graph::Var Graph::slice_cols(Var a, std::size_t from, std::size_t to) {
    const Tensor& ta = value(a);
    if (ta.rank() != 2 || from > to || to > ta.cols()) {
        throw std::invalid_argument("slice_cols: invalid range");
    }
    Node n;
    n.op = Op::SliceCols;
    n.a = a;
    n.i0 = from;
    n.i1 = to;
    n.value = Tensor({ta.rows(), to - from});
    for (std::size_t r = 0; r < ta.rows(); ++r) {
        for (std::size_t c = from; c < to; ++c) {
            n.value.at(r, c - from) = ta.at(r, c);
        }
    }
    n.needs_grad = needs(a);
    return push(std::move(n));
}

Graph::Var Graph::reshape(Var a, std::vector<std::size_t> shape) {
    const Tensor& ta = value(a);
    if (shape_product(shape) != ta.size()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    Node n;
    n.op = Op::Reshape;
    n.a = a;
    n.value = Tensor(std::move(shape), ta.values);
    n.needs_grad = needs(a);
    return push(std::move(n));
}

Graph::Var Graph::gather_rows(Var a, std::vector<std::size_t> rows) {
    const Tensor& ta = value(a);
    if (ta.rank() != 2) {
        throw std::invalid_argument("gather_rows: rank-2 input required");
    }
    Node n;
    n.op = Op::GatherRows;
    n.a = a;
    n.value = Tensor({rows.size(), ta.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= ta.rows()) {
            throw std::out_of_range("gather_rows: index out of range");
        }
        for (std::size_t c = 0; c < ta.cols(); ++c) {
            n.value.at(r, c) = ta.at(rows[r], c);
        }
    }
    n.idx = std::move(rows);
    n.needs_grad = needs(a);
    return push(std::move(n));
}

namespace {

// Per-entry Gaussian log density and partials; v is log variance.
struct GaussTerms {
    static double f(double z, double m, double v) {
        const double r = z - m;
        return -0.91893853320467274178 - 0.5 * v - 0.5 * r * r * std::exp(-v);
    }
    static double fz(double z, double m, double v) { return -(z - m) * std::exp(-v); }
    static double fm(double z, double m, double v) { return (z - m) * std::exp(-v); }
    static double fv(double z, double m, double v) {
        const double r = z - m;
        return -0.5 + 0.5 * r * r * std::exp(-v);
    }
};

} // namespace

Graph::Var Graph::gauss_logpdf_sum(Var z, Var mu, Var lv) {
    const Tensor& tz = value(z);
    const Tensor& tm = value(mu);
    const Tensor& tv = value(lv);
    if (!tz.same_shape(tm) || !tz.same_shape(tv)) {
        throw std::invalid_argument("gauss_logpdf_sum: shape mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < tz.size(); ++i) {
        s += GaussTerms::f(tz.at(i), tm.at(i), tv.at(i));
    }
    Node n;
    n.op = Op::GaussLogPdfSum;
    n.a = z;
    n.b = mu;
    n.c = lv;
    n.value = Tensor::scalar(s);
    n.needs_grad = needs(z) || needs(mu) || needs(lv);
    return push(std::move(n));
}

Graph::Var Graph::gauss_logpdf_rows(Var z, Var mu, Var lv) {
    const Tensor& tz = value(z);
    const Tensor& tm = value(mu);
    const Tensor& tv = value(lv);
    if (tz.rank() != 2 || !tz.same_shape(tm) || !tz.same_shape(tv)) {
        throw std::invalid_argument("gauss_logpdf_rows: shape mismatch");
    }
    Node n;
    n.op = Op::GaussLogPdfRows;
    n.a = z;
    n.b = mu;
    n.c = lv;
    n.value = Tensor({tz.rows()});
    for (std::size_t r = 0; r < tz.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < tz.cols(); ++c) {
            s += GaussTerms::f(tz.at(r, c), tm.at(r, c), tv.at(r, c));
        }
        n.value.at(r) = s;
    }
    n.needs_grad = needs(z) || needs(mu) || needs(lv);
    return push(std::move(n));
}

Graph::Var Graph::pairwise_gauss_logpdf(Var z, Var mu, Var lv) {
    const Tensor& tz = value(z);
    const Tensor& tm = value(mu);
    const Tensor& tv = value(lv);
    if (tz.rank() != 2 || !tm.same_shape(tv) || tm.rank() != 2 || tz.cols() != tm.cols()) {
        throw std::invalid_argument("pairwise_gauss_logpdf: shape mismatch");
    }
    const std::size_t gi = tz.rows();
    const std::size_t gj = tm.rows();
    const std::size_t d = tz.cols();
    Node n;
    n.op = Op::PairwiseGaussLogPdf;
    n.a = z;
    n.b = mu;
    n.c = lv;
    n.value = Tensor({gi, gj});
    for (std::size_t i = 0; i < gi; ++i) {
        for (std::size_t j = 0; j < gj; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                s += GaussTerms::f(tz.at(i, c), tm.at(j, c), tv.at(j, c));
            }
            n.value.at(i, j) = s;
        }
    }
    n.needs_grad = needs(z) || needs(mu) || needs(lv);
    return push(std::move(n));
}

namespace {

double nb_term(double x, double mu, double theta) {
    if (mu == 0.0) {
        return x == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    }
    return log_gamma(x + theta) - log_gamma(theta) - log_gamma(x + 1.0) +
           theta * (std::log(theta) - std::log(theta + mu)) + x * (std::log(mu) - std::log(theta + mu));
}

} // namespace

Graph::Var Graph::nb_logpmf_sum(Var mu, Var theta, Var x_const) {
    const Tensor& tm = value(mu);
    const Tensor& tt = value(theta);
    const Tensor& tx = value(x_const);
    if (tm.rank() != 2 || !tm.same_shape(tx) || tt.rank() != 1 || tt.shape[0] != tm.cols()) {
        throw std::invalid_argument("nb_logpmf_sum: shape mismatch");
    }
    double s = 0.0;
    for (std::size_t r = 0; r < tm.rows(); ++r) {
        for (std::size_t c = 0; c < tm.cols(); ++c) {
            s += nb_term(tx.at(r, c), tm.at(r, c), tt.at(c));
        }
    }
    Node n;
    n.op = Op::NbLogPmfSum;
    n.a = mu;
    n.b = theta;
    n.c = x_const;
    n.value = Tensor::scalar(s);
    n.needs_grad = needs(mu) || needs(theta);
    return push(std::move(n));
}

std::vector<Tensor> Graph::backward(Var out) const {
    const Node& onode = node(out);
    if (onode.value.size() != 1) {
        throw std::invalid_argument("backward: output must be scalar");
    }
    if (!std::isfinite(onode.value.values[0])) {
        throw std::runtime_error("backward: non-finite objective");
    }
    std::vector<Tensor> cot(nodes_.size());
    auto ensure = [&](Var v) -> Tensor& {
        auto& t = cot[static_cast<std::size_t>(v)];
        if (t.size() == 0 && node(v).value.size() != 0) {
            t = Tensor(node(v).value.shape, 0.0);
        }
        return t;
    };
    ensure(out).values[0] = 1.0;

    for (Var v = out; v >= 0; --v) {
        const Node& n = node(v);
        if (!n.needs_grad) {
            continue;
        }
        const Tensor& c = cot[static_cast<std::size_t>(v)];
        if (c.size() == 0) {
            continue;
        }
        switch (n.op) {
        case Op::Input:
        case Op::Param:
            break;
        case Op::Add: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) ca.values[i] += c.values[i];
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t i = 0; i < c.size(); ++i) cb.values[i] += c.values[i];
            }
            break;
        }
        case Op::Sub: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) ca.values[i] += c.values[i];
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t i = 0; i < c.size(); ++i) cb.values[i] -= c.values[i];
            }
            break;
        }
        case Op::Mul: {
            const Tensor& ta = value(n.a);
            const Tensor& tb = value(n.b);
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) ca.values[i] += c.values[i] * tb.values[i];
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t i = 0; i < c.size(); ++i) cb.values[i] += c.values[i] * ta.values[i];
            }
            break;
        }
        case Op::Affine: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) ca.values[i] += c.values[i] * n.k;
            }
            break;
        }
        case Op::MatMul: {
            const Tensor& ta = value(n.a);
            const Tensor& tb = value(n.b);
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                map_of(ca).noalias() += map_of(c) * map_of(tb).transpose();
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                map_of(cb).noalias() += map_of(ta).transpose() * map_of(c);
            }
            break;
        }
        case Op::AddRowVec: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) ca.values[i] += c.values[i];
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        cb.at(cc) += c.at(r, cc);
                    }
                }
            }
            break;
        }
        case Op::MulRowVec: {
            const Tensor& ta = value(n.a);
            const Tensor& tb = value(n.b);
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        ca.at(r, cc) += c.at(r, cc) * tb.at(cc);
                    }
                }
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        cb.at(cc) += c.at(r, cc) * ta.at(r, cc);
                    }
                }
            }
            break;
        }
        case Op::MulColVec: {
            const Tensor& ta = value(n.a);
            const Tensor& tb = value(n.b);
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        ca.at(r, cc) += c.at(r, cc) * tb.at(r);
                    }
                }
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        cb.at(r) += c.at(r, cc) * ta.at(r, cc);
                    }
                }
            }
            break;
        }
        case Op::UnaryOp: {
            if (needs(n.a)) {
                const Tensor& ta = value(n.a);
                const Unary dk = unary_deriv(n.kind);
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) {
                    ca.values[i] += c.values[i] * unary_eval(dk, ta.values[i]);
                }
            }
            break;
        }
        case Op::SoftmaxRows: {
            if (needs(n.a)) {
                const Tensor& s = n.value;
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < s.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t cc = 0; cc < s.cols(); ++cc) {
                        dot += c.at(r, cc) * s.at(r, cc);
                    }
                    for (std::size_t cc = 0; cc < s.cols(); ++cc) {
                        ca.at(r, cc) += s.at(r, cc) * (c.at(r, cc) - dot);
                    }
                }
            }
            break;
        }
        case Op::RowSum: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < ca.rows(); ++r) {
                    for (std::size_t cc = 0; cc < ca.cols(); ++cc) {
                        ca.at(r, cc) += c.at(r);
                    }
                }
            }
            break;
        }
        case Op::Sum: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (double& x : ca.values) x += c.values[0];
            }
            break;
        }
        case Op::Mean: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                const double w = c.values[0] / static_cast<double>(ca.size());
                for (double& x : ca.values) x += w;
            }
            break;
        }
        case Op::LogSumExpRows: {
            if (needs(n.a)) {
                const Tensor& ta = value(n.a);
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < ta.rows(); ++r) {
                    const double lse = n.value.at(r);
                    for (std::size_t cc = 0; cc < ta.cols(); ++cc) {
                        ca.at(r, cc) += c.at(r) * std::exp(ta.at(r, cc) - lse);
                    }
                }
            }
            break;
        }
        case Op::ConcatCols: {
            const std::size_t ka = n.i0;
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < ka; ++cc) {
                        ca.at(r, cc) += c.at(r, cc);
                    }
                }
            }
            if (needs(n.b)) {
                Tensor& cb = ensure(n.b);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = ka; cc < c.cols(); ++cc) {
                        cb.at(r, cc - ka) += c.at(r, cc);
                    }
                }
            }
            break;
        }
        case Op::SliceCols: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < c.rows(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        ca.at(r, n.i0 + cc) += c.at(r, cc);
                    }
                }
            }
            break;
        }
        case Op::Reshape: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t i = 0; i < c.size(); ++i) ca.values[i] += c.values[i];
            }
            break;
        }
        case Op::GatherRows: {
            if (needs(n.a)) {
                Tensor& ca = ensure(n.a);
                for (std::size_t r = 0; r < n.idx.size(); ++r) {
                    for (std::size_t cc = 0; cc < c.cols(); ++cc) {
                        ca.at(n.idx[r], cc) += c.at(r, cc);
                    }
                }
            }
            break;
        }
        case Op::GaussLogPdfSum:
        case Op::GaussLogPdfRows: {
            const Tensor& tz = value(n.a);
            const Tensor& tm = value(n.b);
            const Tensor& tv = value(n.c);
            const bool rows = n.op == Op::GaussLogPdfRows;
            const std::size_t ncols = rows ? tz.cols() : tz.size();
            auto cot_at = [&](std::size_t i) {
                return rows ? c.at(i / ncols) : c.values[0];
            };
            if (needs(n.a)) {
                Tensor& cz = ensure(n.a);
                for (std::size_t i = 0; i < tz.size(); ++i) {
                    cz.values[i] += cot_at(i) * GaussTerms::fz(tz.values[i], tm.values[i], tv.values[i]);
                }
            }
            if (needs(n.b)) {
                Tensor& cm = ensure(n.b);
                for (std::size_t i = 0; i < tz.size(); ++i) {
                    cm.values[i] += cot_at(i) * GaussTerms::fm(tz.values[i], tm.values[i], tv.values[i]);
                }
            }
            if (needs(n.c)) {
                Tensor& cv = ensure(n.c);
                for (std::size_t i = 0; i < tz.size(); ++i) {
                    cv.values[i] += cot_at(i) * GaussTerms::fv(tz.values[i], tm.values[i], tv.values[i]);
                }
            }
            break;
        }
        case Op::PairwiseGaussLogPdf: {
            const Tensor& tz = value(n.a);
            const Tensor& tm = value(n.b);
            const Tensor& tv = value(n.c);
            const std::size_t gi = tz.rows();
            const std::size_t gj = tm.rows();
            const std::size_t d = tz.cols();
            Tensor* cz = needs(n.a) ? &ensure(n.a) : nullptr;
            Tensor* cm = needs(n.b) ? &ensure(n.b) : nullptr;
            Tensor* cv = needs(n.c) ? &ensure(n.c) : nullptr;
            for (std::size_t i = 0; i < gi; ++i) {
                for (std::size_t j = 0; j < gj; ++j) {
                    const double w = c.at(i, j);
                    if (w == 0.0) {
                        continue;
                    }
                    for (std::size_t cc = 0; cc < d; ++cc) {
                        const double z = tz.at(i, cc), m = tm.at(j, cc), v = tv.at(j, cc);
                        if (cz) cz->at(i, cc) += w * GaussTerms::fz(z, m, v);
                        if (cm) cm->at(j, cc) += w * GaussTerms::fm(z, m, v);
                        if (cv) cv->at(j, cc) += w * GaussTerms::fv(z, m, v);
                    }
                }
            }
            break;
        }
        case Op::NbLogPmfSum: {
            const Tensor& tm = value(n.a);
            const Tensor& tt = value(n.b);
            const Tensor& tx = value(n.c);
            const double w = c.values[0];
            Tensor* cm = needs(n.a) ? &ensure(n.a) : nullptr;
            Tensor* ct = needs(n.b) ? &ensure(n.b) : nullptr;
            for (std::size_t r = 0; r < tm.rows(); ++r) {
                for (std::size_t cc = 0; cc < tm.cols(); ++cc) {
                    const double x = tx.at(r, cc), mu = tm.at(r, cc), th = tt.at(cc);
                    if (cm) {
                        const double dmu = (x > 0.0 ? x / mu : 0.0) - (x + th) / (th + mu);
                        cm->at(r, cc) += w * dmu;
                    }
                    if (ct) {
                        const double dth = digamma(x + th) - digamma(th) + std::log(th / (th + mu)) + 1.0 -
                                           (x + th) / (th + mu);
                        ct->at(cc) += w * dth;
                    }
                }
            }
            break;
        }
        }
    }
    return cot;
}

GradMap Graph::param_gradients(Var out) const {
    std::vector<Tensor> cot = backward(out);
    GradMap grads;
    for (const auto& [name, v] : param_cache_) {
        if (!node(v).needs_grad) {
            continue; // frozen: not part of this loss's update scope
        }
        Tensor& t = cot[static_cast<std::size_t>(v)];
        if (t.size() == 0) {
            t = Tensor(node(v).value.shape, 0.0);
        }
        grads[name] = std::move(t);
    }
    return grads;
}

void Graph::input_hessian_diag(Var out, Var wrt, Tensor* grad, Tensor* hess) const {
    const Node& onode = node(out);
    if (onode.value.size() != 1) {
        throw std::invalid_argument("input_hessian_diag: output must be scalar");
    }
    const Tensor& zt = node(wrt).value;
    const std::size_t dim = zt.size();
    if (grad) *grad = Tensor(zt.shape, 0.0);
    if (hess) *hess = Tensor(zt.shape, 0.0);

    // Dependency mask.
    std::vector<char> dep(nodes_.size(), 0);
    dep[static_cast<std::size_t>(wrt)] = 1;
    for (std::size_t v = 0; v < nodes_.size(); ++v) {
        const Node& n = nodes_[v];
        auto d = [&](int x) { return x >= 0 && dep[static_cast<std::size_t>(x)]; };
        if (d(n.a) || d(n.b) || d(n.c)) {
            dep[v] = 1;
        }
    }

    std::vector<Tensor> d1(nodes_.size()), d2(nodes_.size());
    auto zero_like = [&](Var v) { return Tensor(node(v).value.shape, 0.0); };
    auto t1 = [&](Var v) -> const Tensor& {
        if (d1[static_cast<std::size_t>(v)].size() == 0) d1[static_cast<std::size_t>(v)] = zero_like(v);
        return d1[static_cast<std::size_t>(v)];
    };
    auto t2 = [&](Var v) -> const Tensor& {
        if (d2[static_cast<std::size_t>(v)].size() == 0) d2[static_cast<std::size_t>(v)] = zero_like(v);
        return d2[static_cast<std::size_t>(v)];
    };

    for (std::size_t j = 0; j < dim; ++j) {
        for (auto& t : d1) t = Tensor();
        for (auto& t : d2) t = Tensor();
        d1[static_cast<std::size_t>(wrt)] = Tensor(zt.shape, 0.0);
        d1[static_cast<std::size_t>(wrt)].values[j] = 1.0;

        for (std::size_t v = 0; v <= static_cast<std::size_t>(out); ++v) {
            if (!dep[v] || static_cast<Var>(v) == wrt) {
                continue;
            }
            const Node& n = nodes_[v];
            switch (n.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Add: {
                d1[v] = invae::add(t1(n.a), t1(n.b));
                d2[v] = invae::add(t2(n.a), t2(n.b));
                break;
            }
            case Op::Sub: {
                d1[v] = invae::sub(t1(n.a), t1(n.b));
                d2[v] = invae::sub(t2(n.a), t2(n.b));
                break;
            }
            case Op::Mul: {
                const Tensor &a = value(n.a), &b = value(n.b);
                const Tensor &a1 = t1(n.a), &b1 = t1(n.b), &a2 = t2(n.a), &b2 = t2(n.b);
                Tensor r1(a.shape, 0.0), r2(a.shape, 0.0);
                for (std::size_t i = 0; i < a.size(); ++i) {
                    r1.values[i] = a1.values[i] * b.values[i] + a.values[i] * b1.values[i];
                    r2.values[i] = a2.values[i] * b.values[i] + 2.0 * a1.values[i] * b1.values[i] +
                                   a.values[i] * b2.values[i];
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::Affine: {
                d1[v] = invae::scale(t1(n.a), n.k);
                d2[v] = invae::scale(t2(n.a), n.k);
                break;
            }
            case Op::MatMul: {
                const Tensor &a = value(n.a), &b = value(n.b);
                const Tensor &a1 = t1(n.a), &b1 = t1(n.b), &a2 = t2(n.a), &b2 = t2(n.b);
                d1[v] = invae::add(invae::matmul(a1, b), invae::matmul(a, b1));
                Tensor cross = invae::scale(invae::matmul(a1, b1), 2.0);
                d2[v] = invae::add(invae::add(invae::matmul(a2, b), cross), invae::matmul(a, b2));
                break;
            }
            case Op::AddRowVec: {
                const Tensor &m1 = t1(n.a), &v1 = t1(n.b), &m2 = t2(n.a), &v2 = t2(n.b);
                Tensor r1 = m1, r2 = m2;
                for (std::size_t r = 0; r < r1.rows(); ++r) {
                    for (std::size_t cc = 0; cc < r1.cols(); ++cc) {
                        r1.at(r, cc) += v1.at(cc);
                        r2.at(r, cc) += v2.at(cc);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::MulRowVec:
            case Op::MulColVec: {
                const bool row = n.op == Op::MulRowVec;
                const Tensor &a = value(n.a), &b = value(n.b);
                const Tensor &a1 = t1(n.a), &b1 = t1(n.b), &a2 = t2(n.a), &b2 = t2(n.b);
                Tensor r1(a.shape, 0.0), r2(a.shape, 0.0);
                for (std::size_t r = 0; r < a.rows(); ++r) {
                    for (std::size_t cc = 0; cc < a.cols(); ++cc) {
                        const std::size_t bi = row ? cc : r;
                        r1.at(r, cc) = a1.at(r, cc) * b.at(bi) + a.at(r, cc) * b1.at(bi);
                        r2.at(r, cc) = a2.at(r, cc) * b.at(bi) + 2.0 * a1.at(r, cc) * b1.at(bi) +
                                       a.at(r, cc) * b2.at(bi);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::UnaryOp: {
                const Tensor& x = value(n.a);
                const Tensor &x1 = t1(n.a), &x2 = t2(n.a);
                const Unary dk = unary_deriv(n.kind);
                const Unary dk2 = unary_deriv(dk);
                Tensor r1(x.shape, 0.0), r2(x.shape, 0.0);
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double fp = unary_eval(dk, x.values[i]);
                    const double fpp = unary_eval(dk2, x.values[i]);
                    r1.values[i] = fp * x1.values[i];
                    r2.values[i] = fpp * x1.values[i] * x1.values[i] + fp * x2.values[i];
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::SoftmaxRows: {
                const Tensor& s = n.value;
                const Tensor &x1 = t1(n.a), &x2 = t2(n.a);
                Tensor r1(s.shape, 0.0), r2(s.shape, 0.0);
                for (std::size_t r = 0; r < s.rows(); ++r) {
                    double mu1 = 0.0;
                    for (std::size_t cc = 0; cc < s.cols(); ++cc) {
                        mu1 += s.at(r, cc) * x1.at(r, cc);
                    }
                    for (std::size_t cc = 0; cc < s.cols(); ++cc) {
                        r1.at(r, cc) = s.at(r, cc) * (x1.at(r, cc) - mu1);
                    }
                    double mu2 = 0.0;
                    for (std::size_t cc = 0; cc < s.cols(); ++cc) {
                        mu2 += r1.at(r, cc) * x1.at(r, cc) + s.at(r, cc) * x2.at(r, cc);
                    }
                    for (std::size_t cc = 0; cc < s.cols(); ++cc) {
                        r2.at(r, cc) = r1.at(r, cc) * (x1.at(r, cc) - mu1) +
                                       s.at(r, cc) * (x2.at(r, cc) - mu2);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::RowSum: {
                const Tensor &x1 = t1(n.a), &x2 = t2(n.a);
                Tensor r1({x1.rows()}, 0.0), r2({x1.rows()}, 0.0);
                for (std::size_t r = 0; r < x1.rows(); ++r) {
                    for (std::size_t cc = 0; cc < x1.cols(); ++cc) {
                        r1.at(r) += x1.at(r, cc);
                        r2.at(r) += x2.at(r, cc);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                const Tensor &x1 = t1(n.a), &x2 = t2(n.a);
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t i = 0; i < x1.size(); ++i) {
                    s1 += x1.values[i];
                    s2 += x2.values[i];
                }
                if (n.op == Op::Mean) {
                    s1 /= static_cast<double>(x1.size());
                    s2 /= static_cast<double>(x1.size());
                }
                d1[v] = Tensor::scalar(s1);
                d2[v] = Tensor::scalar(s2);
                break;
            }
            case Op::LogSumExpRows: {
                const Tensor& x = value(n.a);
                const Tensor &x1 = t1(n.a), &x2 = t2(n.a);
                Tensor r1({x.rows()}, 0.0), r2({x.rows()}, 0.0);
                for (std::size_t r = 0; r < x.rows(); ++r) {
                    const double lse = n.value.at(r);
                    double m1 = 0.0, q = 0.0, m2 = 0.0;
                    for (std::size_t cc = 0; cc < x.cols(); ++cc) {
                        const double w = std::exp(x.at(r, cc) - lse);
                        m1 += w * x1.at(r, cc);
                        q += w * x1.at(r, cc) * x1.at(r, cc);
                        m2 += w * x2.at(r, cc);
                    }
                    r1.at(r) = m1;
                    r2.at(r) = m2 + q - m1 * m1;
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::ConcatCols: {
                const Tensor &a1 = t1(n.a), &b1 = t1(n.b), &a2 = t2(n.a), &b2 = t2(n.b);
                Tensor r1(n.value.shape, 0.0), r2(n.value.shape, 0.0);
                for (std::size_t r = 0; r < r1.rows(); ++r) {
                    for (std::size_t cc = 0; cc < n.i0; ++cc) {
                        r1.at(r, cc) = a1.at(r, cc);
                        r2.at(r, cc) = a2.at(r, cc);
                    }
                    for (std::size_t cc = n.i0; cc < r1.cols(); ++cc) {
                        r1.at(r, cc) = b1.at(r, cc - n.i0);
                        r2.at(r, cc) = b2.at(r, cc - n.i0);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::SliceCols: {
                const Tensor &a1 = t1(n.a), &a2 = t2(n.a);
                Tensor r1(n.value.shape, 0.0), r2(n.value.shape, 0.0);
                for (std::size_t r = 0; r < r1.rows(); ++r) {
                    for (std::size_t cc = 0; cc < r1.cols(); ++cc) {
                        r1.at(r, cc) = a1.at(r, n.i0 + cc);
                        r2.at(r, cc) = a2.at(r, n.i0 + cc);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::Reshape: {
                d1[v] = Tensor(n.value.shape, t1(n.a).values);
                d2[v] = Tensor(n.value.shape, t2(n.a).values);
                break;
            }
            case Op::GatherRows: {
                const Tensor &a1 = t1(n.a), &a2 = t2(n.a);
                Tensor r1(n.value.shape, 0.0), r2(n.value.shape, 0.0);
                for (std::size_t rr = 0; rr < n.idx.size(); ++rr) {
                    for (std::size_t cc = 0; cc < r1.cols(); ++cc) {
                        r1.at(rr, cc) = a1.at(n.idx[rr], cc);
                        r2.at(rr, cc) = a2.at(n.idx[rr], cc);
                    }
                }
                d1[v] = std::move(r1);
                d2[v] = std::move(r2);
                break;
            }
            case Op::GaussLogPdfSum: {
                const Tensor &z = value(n.a), &m = value(n.b), &lv = value(n.c);
                const Tensor &z1 = t1(n.a), &m1 = t1(n.b), &v1 = t1(n.c);
                const Tensor &z2 = t2(n.a), &m2 = t2(n.b), &v2 = t2(n.c);
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t i = 0; i < z.size(); ++i) {
                    const double iv = std::exp(-lv.values[i]);
                    const double r = z.values[i] - m.values[i];
                    const double fz = -r * iv, fm = r * iv, fv = -0.5 + 0.5 * r * r * iv;
                    const double fzz = -iv, fmm = -iv, fzm = iv;
                    const double fzv = r * iv, fmv = -r * iv, fvv = -0.5 * r * r * iv;
                    const double dz = z1.values[i], dm = m1.values[i], dv = v1.values[i];
                    s1 += fz * dz + fm * dm + fv * dv;
                    s2 += fzz * dz * dz + fmm * dm * dm + fvv * dv * dv + 2.0 * fzm * dz * dm +
                          2.0 * fzv * dz * dv + 2.0 * fmv * dm * dv + fz * z2.values[i] +
                          fm * m2.values[i] + fv * v2.values[i];
                }
                d1[v] = Tensor::scalar(s1);
                d2[v] = Tensor::scalar(s2);
                break;
            }
            default:
                throw std::logic_error("input_hessian_diag: op not supported in jet propagation");
            }
        }
        if (grad) grad->values[j] = d1[static_cast<std::size_t>(out)].size() ? d1[static_cast<std::size_t>(out)].values[0] : 0.0;
        if (hess) hess->values[j] = d2[static_cast<std::size_t>(out)].size() ? d2[static_cast<std::size_t>(out)].values[0] : 0.0;
    }
}

GradMap grad(ParamStore& store, const std::vector<std::string>& wrt,
             const std::function<Graph::Var(Graph&)>& objective) {
    Graph g(&store);
    Graph::Var out = objective(g);
    GradMap all = g.param_gradients(out);
    GradMap selected;
    for (const auto& name : wrt) {
        auto it = all.find(name);
        if (it != all.end()) {
            selected[name] = it->second;
        } else {
            // Parameter never touched the objective: gradient is zero.
            selected[name] = Tensor(store.get(name).shape, 0.0);
        }
    }
    return selected;
}

Tensor latent_hessian_diag(const std::function<Graph::Var(Graph&, Graph::Var)>& log_density,
                           const Tensor& z, ParamStore* store) {
    Tensor hess;
    latent_grad_hessian_diag(log_density, z, nullptr, &hess, store);
    return hess;
}

void latent_grad_hessian_diag(const std::function<Graph::Var(Graph&, Graph::Var)>& log_density,
                              const Tensor& z, Tensor* grad_out, Tensor* hess_out,
                              ParamStore* store) {
    Graph g(store);
    Graph::Var zvar = g.input(z);
    Graph::Var out = log_density(g, zvar);
    if (!g.value(out).all_finite()) {
        throw std::runtime_error("latent_hessian_diag: non-finite log density");
    }
    g.input_hessian_diag(out, zvar, grad_out, hess_out);
}

} // namespace invae
