#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "invae/tensor.hpp"

namespace invae {

// Elementwise function kinds. Each kind knows its derivative kind, so the
// tape can hold first/second activation derivatives as ordinary nodes and
// still backpropagate through them exactly.
enum class Unary {
    Relu,
    Step,     // relu'
    Zero,     // step' (a.e.)
    Tanh,
    TanhD,    // 1 - tanh^2
    TanhD2,   // -2 t (1 - t^2)
    TanhD3,   // -2 (1 - t^2)(1 - 3 t^2)
    Softplus,
    Sigmoid,  // softplus'
    SigmoidD, // s (1 - s)
    SigmoidD2,// s (1 - s)(1 - 2 s)
    Exp,
    Identity,
};

double unary_eval(Unary kind, double x);
Unary unary_deriv(Unary kind);

using GradMap = std::map<std::string, Tensor>;

// Eager reverse-mode tape over dense tensors. Values are computed at op
// creation; backward() walks the tape once and accumulates cotangents.
// Second derivatives with respect to a chosen input are available through
// forward jet propagation (hessian_diag) over the recorded nodes.
class Graph {
  public:
    using Var = int;

    explicit Graph(ParamStore* store = nullptr) : store_(store) {}

    // Leaves.
    Var input(Tensor v);                 // constant, no gradient
    Var param(const std::string& name);  // differentiable, tied to the store

    // Arithmetic (same-shape unless stated).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var affine(Var a, double k, double c); // k*x + c
    Var matmul(Var a, Var b);
    Var add_rowvec(Var m, Var v); // [r,c] + [c] broadcast over rows
    Var mul_rowvec(Var m, Var v);
    Var mul_colvec(Var m, Var v); // [r,c] * [r] broadcast over columns
    Var unary(Unary kind, Var a);
    Var softmax_rows(Var m);
    Var row_sum(Var m);        // [r,c] -> [r]
    Var sum(Var a);            // -> scalar
    Var mean(Var a);           // -> scalar
    Var logsumexp_rows(Var m); // [r,c] -> [r]
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var a, std::size_t from, std::size_t to); // [from, to)
    Var reshape(Var a, std::vector<std::size_t> shape);
    Var gather_rows(Var a, std::vector<std::size_t> rows);

    // Fused statistical kernels (hand-derived backward).
    // sum over all entries of log N(z; mu, exp(lv)), elementwise triples.
    Var gauss_logpdf_sum(Var z, Var mu, Var lv);
    // per-row sums: [r,c] triples -> [r]
    Var gauss_logpdf_rows(Var z, Var mu, Var lv);
    // entry (i,j) = sum_d log N(z[i,d]; mu[j,d], exp(lv[j,d]))
    Var pairwise_gauss_logpdf(Var z, Var mu, Var lv);
    // sum over all entries of log NB(x; mean mu, inverse dispersion theta),
    // theta is a per-column vector, x a constant count matrix.
    Var nb_logpmf_sum(Var mu, Var theta, Var x_const);

    const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
    std::size_t node_count() const { return nodes_.size(); }

    // Reverse pass from a scalar output. Returns cotangents per node id
    // (empty tensor where no gradient flows).
    std::vector<Tensor> backward(Var out) const;

    // Gradients of a scalar output with respect to all reachable parameters.
    GradMap param_gradients(Var out) const;

    // Per-coordinate first/second derivatives of a scalar output with
    // respect to one input node, by second-order jet propagation.
    void input_hessian_diag(Var out, Var wrt, Tensor* grad, Tensor* hess) const;

    ParamStore* store() { return store_; }

  private:
    enum class Op {
        Input,
        Param,
        Add,
        Sub,
        Mul,
        Affine,
        MatMul,
        AddRowVec,
        MulRowVec,
        MulColVec,
        UnaryOp,
        SoftmaxRows,
        RowSum,
        Sum,
        Mean,
        LogSumExpRows,
        ConcatCols,
        SliceCols,
        Reshape,
        GatherRows,
        GaussLogPdfSum,
        GaussLogPdfRows,
        PairwiseGaussLogPdf,
        NbLogPmfSum,
    };

    struct Node {
        Op op;
        int a = -1, b = -1, c = -1;
        double k = 0.0, k2 = 0.0;
        std::size_t i0 = 0, i1 = 0;
        std::vector<std::size_t> idx;
        Unary kind = Unary::Identity;
        std::string pname;
        Tensor value;
        bool needs_grad = false;
    };

    ParamStore* store_;
    std::vector<Node> nodes_;
    std::map<std::string, Var> param_cache_;

    Var push(Node n);
    const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v)]; }
    bool needs(Var v) const { return v >= 0 && nodes_[static_cast<std::size_t>(v)].needs_grad; }
};

// Builds a scalar objective on a fresh graph over the given store and
// returns exact gradients for the requested parameter names.
GradMap grad(ParamStore& store, const std::vector<std::string>& wrt,
             const std::function<Graph::Var(Graph&)>& objective);

// Per-coordinate second derivatives of a scalar log-density of z.
// The builder receives the graph and the z input var and returns the
// scalar output var; a parameter store may be attached for builders that
// reference named parameters.
Tensor latent_hessian_diag(const std::function<Graph::Var(Graph&, Graph::Var)>& log_density,
                           const Tensor& z, ParamStore* store = nullptr);

// Same, also exposing the gradient.
void latent_grad_hessian_diag(const std::function<Graph::Var(Graph&, Graph::Var)>& log_density,
                              const Tensor& z, Tensor* grad_out, Tensor* hess_out,
                              ParamStore* store = nullptr);

} // namespace invae
