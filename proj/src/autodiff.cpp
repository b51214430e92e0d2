#include "gpn/autodiff.hpp"

#include <cmath>
#include <string>

#include "gpn/kernels.hpp"
#include "gpn/linalg.hpp"

namespace gpn::ad {

namespace {

// lower triangle with halved diagonal, as used by the Cholesky adjoint
MatrixXd phi(const MatrixXd& m) {
    MatrixXd out = m.triangularView<Eigen::Lower>();
    out.diagonal() *= 0.5;
    return out;
}

MatrixXd chol_reverse(const MatrixXd& l, const MatrixXd& g) {
    // Murray-style adjoint: abar = 1/2 (P + P^T) with
    // P = L^{-T} phi(L^T gbar) L^{-1}.
    const MatrixXd m = phi(l.transpose() * g);
    const MatrixXd y = linalg::solve_lower_transposed(l, m);
    const MatrixXd p = linalg::solve_lower_transposed(l, y.transpose()).transpose();
    return 0.5 * (p + p.transpose());
}

void check_same_shape(const Var& a, const Var& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionMismatch(std::string(what) + ": shape mismatch");
}

} // namespace

const MatrixXd& Var::value() const { return tape->value(*this); }

Var Tape::record(std::unique_ptr<Node> node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(MatrixXd v) {
    auto n = std::make_unique<Node>();
    n->value = std::move(v);
    n->needs_grad = false;
    return record(std::move(n));
}

Var Tape::leaf(MatrixXd v) {
    auto n = std::make_unique<Node>();
    n->value = std::move(v);
    n->needs_grad = true;
    return record(std::move(n));
}

MatrixXd Tape::gradient(Var v) const {
    const Node& n = *nodes_[v.index];
    if (n.grad.size() == 0) return MatrixXd::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::accumulate(int index, const MatrixXd& g) {
    Node& n = *nodes_[index];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
        n.grad = g;
    else
        n.grad += g;
}

void Tape::backward(Var root) {
    if (root.value().size() != 1)
        throw DimensionMismatch("backward: root must be a scalar");
    for (auto& n : nodes_) n->grad.resize(0, 0);
    nodes_[root.index]->grad = MatrixXd::Ones(1, 1);
    for (int i = root.index; i >= 0; --i) {
        Node& n = *nodes_[i];
        if (n.needs_grad && n.grad.size() != 0) n.backward(*this);
    }
}

std::size_t Tape::bytes() const {
    std::size_t total = 0;
    for (const auto& n : nodes_)
        total += sizeof(double) * (n->value.size() + n->grad.size());
    return total;
}

// ---- generic node helpers ---------------------------------------------------

namespace {

struct UnaryNode : Node {
    int x;
};

struct BinaryNode : Node {
    int a, b;
};

bool any_needs(Tape& t, std::initializer_list<Var> vars) {
    for (const Var& v : vars)
        if (t.wants_grad(v.index)) return true;
    return false;
}

template <typename NodeT, typename... Args>
Var make_node(Tape& t, MatrixXd value, bool needs, Args&&... args) {
    auto n = std::make_unique<NodeT>(std::forward<Args>(args)...);
    n->value = std::move(value);
    n->needs_grad = needs;
    return t.record(std::move(n));
}

} // namespace

// ---- matmul -----------------------------------------------------------------

namespace {
struct MatmulNode : BinaryNode {
    void backward(Tape& t) override {
        const MatrixXd& av = t.node(a).value;
        const MatrixXd& bv = t.node(b).value;
        if (t.wants_grad(a)) t.accumulate(a, grad * bv.transpose());
        if (t.wants_grad(b)) t.accumulate(b, av.transpose() * grad);
    }
};
} // namespace

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dims differ");
    Tape& t = *a.tape;
    auto v = make_node<MatmulNode>(t, a.value() * b.value(), any_needs(t, {a, b}));
    auto& n = static_cast<MatmulNode&>(t.node(v.index));
    n.a = a.index;
    n.b = b.index;
    return v;
}

// ---- add / sub / cwise ------------------------------------------------------

namespace {
struct AddNode : BinaryNode {
    void backward(Tape& t) override {
        t.accumulate(a, grad);
        t.accumulate(b, grad);
    }
};
struct SubNode : BinaryNode {
    void backward(Tape& t) override {
        t.accumulate(a, grad);
        t.accumulate(b, -grad);
    }
};
struct CwiseMulNode : BinaryNode {
    void backward(Tape& t) override {
        if (t.wants_grad(a))
            t.accumulate(a, grad.cwiseProduct(t.node(b).value));
        if (t.wants_grad(b))
            t.accumulate(b, grad.cwiseProduct(t.node(a).value));
    }
};
} // namespace

Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Tape& t = *a.tape;
    auto v = make_node<AddNode>(t, a.value() + b.value(), any_needs(t, {a, b}));
    auto& n = static_cast<AddNode&>(t.node(v.index));
    n.a = a.index;
    n.b = b.index;
    return v;
}

Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Tape& t = *a.tape;
    auto v = make_node<SubNode>(t, a.value() - b.value(), any_needs(t, {a, b}));
    auto& n = static_cast<SubNode&>(t.node(v.index));
    n.a = a.index;
    n.b = b.index;
    return v;
}

Var cwise_mul(Var a, Var b) {
    check_same_shape(a, b, "cwise_mul");
    Tape& t = *a.tape;
    auto v = make_node<CwiseMulNode>(t, a.value().cwiseProduct(b.value()),
                                     any_needs(t, {a, b}));
    auto& n = static_cast<CwiseMulNode&>(t.node(v.index));
    n.a = a.index;
    n.b = b.index;
    return v;
}

// ---- elementwise unaries ----------------------------------------------------

namespace {
struct AffineNode : UnaryNode {
    double a = 1.0;
    void backward(Tape& t) override { t.accumulate(x, a * grad); }
};
struct ExpNode : UnaryNode {
    void backward(Tape& t) override {
        t.accumulate(x, grad.cwiseProduct(value));
    }
};
struct LogNode : UnaryNode {
    void backward(Tape& t) override {
        t.accumulate(x, grad.cwiseQuotient(t.node(x).value));
    }
};
struct SqrtNode : UnaryNode {
    void backward(Tape& t) override {
        t.accumulate(x, (0.5 * grad.array() / value.array()).matrix());
    }
};
struct SquareNode : UnaryNode {
    void backward(Tape& t) override {
        t.accumulate(x, (2.0 * grad.array() * t.node(x).value.array()).matrix());
    }
};
struct InvNode : UnaryNode {
    void backward(Tape& t) override {
        t.accumulate(x, (-grad.array() * value.array().square()).matrix());
    }
};
struct SoftplusNode : UnaryNode {
    void backward(Tape& t) override {
        const auto xv = t.node(x).value.array();
        // logistic(x), computed stably
        Eigen::ArrayXXd sig =
            (xv > 0.0).select(1.0 / (1.0 + (-xv).exp()), xv.exp() / (1.0 + xv.exp()));
        t.accumulate(x, (grad.array() * sig).matrix());
    }
};
struct LogisticNode : UnaryNode {
    void backward(Tape& t) override {
        const auto y = value.array();
        t.accumulate(x, (grad.array() * y * (1.0 - y)).matrix());
    }
};
struct ClampNonnegNode : UnaryNode {
    void backward(Tape& t) override {
        const auto mask = (t.node(x).value.array() > 0.0).cast<double>();
        t.accumulate(x, (grad.array() * mask).matrix());
    }
};
} // namespace

Var affine(Var x, double a, double b) {
    Tape& t = *x.tape;
    auto v = make_node<AffineNode>(t, (a * x.value().array() + b).matrix(),
                                   t.wants_grad(x.index));
    auto& n = static_cast<AffineNode&>(t.node(v.index));
    n.x = x.index;
    n.a = a;
    return v;
}

namespace {
template <typename NodeT, typename F>
Var unary(Var x, F&& f) {
    Tape& t = *x.tape;
    auto v = make_node<NodeT>(t, f(x.value()), t.wants_grad(x.index));
    static_cast<NodeT&>(t.node(v.index)).x = x.index;
    return v;
}
} // namespace

Var cwise_exp(Var x) {
    return unary<ExpNode>(x, [](const MatrixXd& m) { return m.array().exp().matrix().eval(); });
}
Var cwise_log(Var x) {
    return unary<LogNode>(x, [](const MatrixXd& m) { return m.array().log().matrix().eval(); });
}
Var cwise_sqrt(Var x) {
    return unary<SqrtNode>(x, [](const MatrixXd& m) { return m.array().sqrt().matrix().eval(); });
}
Var cwise_square(Var x) {
    return unary<SquareNode>(x, [](const MatrixXd& m) { return m.array().square().matrix().eval(); });
}
Var cwise_inv(Var x) {
    return unary<InvNode>(x, [](const MatrixXd& m) { return m.array().inverse().matrix().eval(); });
}
Var softplus(Var x) {
    return unary<SoftplusNode>(x, [](const MatrixXd& m) {
        // log(1 + e^x) without overflow
        Eigen::ArrayXXd a = m.array();
        return MatrixXd((a > 0.0).select(a + (1.0 + (-a).exp()).log(),
                                         (1.0 + a.exp()).log()));
    });
}
Var logistic(Var x) {
    return unary<LogisticNode>(x, [](const MatrixXd& m) {
        Eigen::ArrayXXd a = m.array();
        return MatrixXd((a > 0.0).select(1.0 / (1.0 + (-a).exp()),
                                         a.exp() / (1.0 + a.exp())));
    });
}

Var clamp_nonneg(Var x, double soft_floor, double hard_floor) {
    const double lo = x.value().minCoeff();
    if (lo < -hard_floor)
        throw NonFiniteGradient("clamp_nonneg: variance fell below -" +
                                std::to_string(hard_floor));
    return unary<ClampNonnegNode>(x, [](const MatrixXd& m) {
        return MatrixXd(m.cwiseMax(0.0));
    });
}

// ---- structure ops ----------------------------------------------------------

namespace {
struct TransposeNode : UnaryNode {
    void backward(Tape& t) override { t.accumulate(x, grad.transpose()); }
};
struct SumNode : UnaryNode {
    void backward(Tape& t) override {
        const MatrixXd& xv = t.node(x).value;
        t.accumulate(x, MatrixXd::Constant(xv.rows(), xv.cols(), grad(0, 0)));
    }
};
struct RowwiseSumNode : UnaryNode {
    void backward(Tape& t) override {
        const MatrixXd& xv = t.node(x).value;
        t.accumulate(x, grad.replicate(1, xv.cols()));
    }
};
struct ColwiseSumNode : UnaryNode {
    void backward(Tape& t) override {
        const MatrixXd& xv = t.node(x).value;
        t.accumulate(x, grad.replicate(xv.rows(), 1));
    }
};
struct BlockNode : UnaryNode {
    int i, j;
    void backward(Tape& t) override {
        const MatrixXd& xv = t.node(x).value;
        MatrixXd g = MatrixXd::Zero(xv.rows(), xv.cols());
        g.block(i, j, grad.rows(), grad.cols()) = grad;
        t.accumulate(x, g);
    }
};
struct ReshapeNode : UnaryNode {
    void backward(Tape& t) override {
        const MatrixXd& xv = t.node(x).value;
        t.accumulate(x, grad.reshaped(xv.rows(), xv.cols()));
    }
};
struct HstackNode : Node {
    std::vector<int> xs;
    std::vector<int> widths;
    void backward(Tape& t) override {
        int off = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            t.accumulate(xs[k], grad.middleCols(off, widths[k]));
            off += widths[k];
        }
    }
};
struct ScatterColsNode : Node {
    std::vector<std::pair<int, int>> cols; // (column index, node index)
    void backward(Tape& t) override {
        for (auto [j, idx] : cols) t.accumulate(idx, grad.col(j));
    }
};
struct DiagPartNode : UnaryNode {
    void backward(Tape& t) override {
        const MatrixXd& xv = t.node(x).value;
        MatrixXd g = MatrixXd::Zero(xv.rows(), xv.cols());
        g.diagonal() = grad.col(0);
        t.accumulate(x, g);
    }
};
struct AddDiagNode : BinaryNode {
    void backward(Tape& t) override {
        t.accumulate(a, grad);
        if (t.wants_grad(b)) t.accumulate(b, grad.diagonal());
    }
};
struct BroadcastColNode : UnaryNode {
    void backward(Tape& t) override { t.accumulate(x, grad.rowwise().sum()); }
};
struct MulScalarNode : BinaryNode {
    void backward(Tape& t) override {
        const double s = t.node(b).value(0, 0);
        if (t.wants_grad(a)) t.accumulate(a, s * grad);
        if (t.wants_grad(b)) {
            MatrixXd g(1, 1);
            g(0, 0) = grad.cwiseProduct(t.node(a).value).sum();
            t.accumulate(b, g);
        }
    }
};
struct AddScalarNode : BinaryNode {
    void backward(Tape& t) override {
        t.accumulate(a, grad);
        if (t.wants_grad(b)) {
            MatrixXd g(1, 1);
            g(0, 0) = grad.sum();
            t.accumulate(b, g);
        }
    }
};
struct AddToColNode : BinaryNode {
    int j;
    void backward(Tape& t) override {
        t.accumulate(a, grad);
        if (t.wants_grad(b)) t.accumulate(b, grad.col(j));
    }
};
} // namespace

Var transpose(Var x) {
    return unary<TransposeNode>(x, [](const MatrixXd& m) { return MatrixXd(m.transpose()); });
}
Var sum(Var x) {
    Tape& t = *x.tape;
    MatrixXd v(1, 1);
    v(0, 0) = x.value().sum();
    auto out = make_node<SumNode>(t, std::move(v), t.wants_grad(x.index));
    static_cast<SumNode&>(t.node(out.index)).x = x.index;
    return out;
}
Var rowwise_sum(Var x) {
    return unary<RowwiseSumNode>(x, [](const MatrixXd& m) { return MatrixXd(m.rowwise().sum()); });
}
Var colwise_sum(Var x) {
    return unary<ColwiseSumNode>(x, [](const MatrixXd& m) { return MatrixXd(m.colwise().sum()); });
}
Var block(Var x, int i, int j, int rows, int cols) {
    Tape& t = *x.tape;
    auto out = make_node<BlockNode>(t, MatrixXd(x.value().block(i, j, rows, cols)),
                                    t.wants_grad(x.index));
    auto& n = static_cast<BlockNode&>(t.node(out.index));
    n.x = x.index;
    n.i = i;
    n.j = j;
    return out;
}
Var reshape(Var x, int rows, int cols) {
    if (x.rows() * x.cols() != rows * cols)
        throw DimensionMismatch("reshape: element count changed");
    return unary<ReshapeNode>(x, [&](const MatrixXd& m) {
        return MatrixXd(m.reshaped(rows, cols));
    });
}
Var hstack(const std::vector<Var>& cols) {
    if (cols.empty()) throw DimensionMismatch("hstack: no inputs");
    Tape& t = *cols.front().tape;
    Eigen::Index rows = cols.front().rows();
    Eigen::Index width = 0;
    bool needs = false;
    for (const Var& c : cols) {
        if (c.rows() != rows) throw DimensionMismatch("hstack: row mismatch");
        width += c.cols();
        needs = needs || t.wants_grad(c.index);
    }
    MatrixXd v(rows, width);
    Eigen::Index off = 0;
    for (const Var& c : cols) {
        v.middleCols(off, c.cols()) = c.value();
        off += c.cols();
    }
    auto out = make_node<HstackNode>(t, std::move(v), needs);
    auto& n = static_cast<HstackNode&>(t.node(out.index));
    for (const Var& c : cols) {
        n.xs.push_back(c.index);
        n.widths.push_back(static_cast<int>(c.cols()));
    }
    return out;
}
Var scatter_cols(const std::vector<std::pair<int, Var>>& cols, int rows,
                 int total_cols) {
    if (cols.empty()) throw DimensionMismatch("scatter_cols: no inputs");
    Tape& t = *cols.front().second.tape;
    MatrixXd v = MatrixXd::Zero(rows, total_cols);
    bool needs = false;
    for (const auto& [j, c] : cols) {
        v.col(j) = c.value();
        needs = needs || t.wants_grad(c.index);
    }
    auto out = make_node<ScatterColsNode>(t, std::move(v), needs);
    auto& n = static_cast<ScatterColsNode&>(t.node(out.index));
    for (const auto& [j, c] : cols) n.cols.emplace_back(j, c.index);
    return out;
}
Var diag_part(Var x) {
    return unary<DiagPartNode>(x, [](const MatrixXd& m) { return MatrixXd(m.diagonal()); });
}
Var add_diag(Var a, Var v) {
    Tape& t = *a.tape;
    MatrixXd out = a.value();
    out.diagonal() += v.value().col(0);
    auto res = make_node<AddDiagNode>(t, std::move(out), any_needs(t, {a, v}));
    auto& n = static_cast<AddDiagNode&>(t.node(res.index));
    n.a = a.index;
    n.b = v.index;
    return res;
}
Var broadcast_col(Var col, int ncols) {
    return unary<BroadcastColNode>(col, [&](const MatrixXd& m) {
        return MatrixXd(m.replicate(1, ncols));
    });
}
Var mul_scalar(Var a, Var s) {
    Tape& t = *a.tape;
    auto out = make_node<MulScalarNode>(t, MatrixXd(a.value() * s.value()(0, 0)),
                                        any_needs(t, {a, s}));
    auto& n = static_cast<MulScalarNode&>(t.node(out.index));
    n.a = a.index;
    n.b = s.index;
    return out;
}
Var add_scalar(Var a, Var s) {
    Tape& t = *a.tape;
    auto out = make_node<AddScalarNode>(
        t, MatrixXd((a.value().array() + s.value()(0, 0)).matrix()),
        any_needs(t, {a, s}));
    auto& n = static_cast<AddScalarNode&>(t.node(out.index));
    n.a = a.index;
    n.b = s.index;
    return out;
}
Var add_to_col(Var a, Var col, int j) {
    if (col.cols() != 1 || col.rows() != a.rows())
        throw DimensionMismatch("add_to_col: column shape mismatch");
    Tape& t = *a.tape;
    MatrixXd v = a.value();
    v.col(j) += col.value().col(0);
    auto out = make_node<AddToColNode>(t, std::move(v), any_needs(t, {a, col}));
    auto& n = static_cast<AddToColNode&>(t.node(out.index));
    n.a = a.index;
    n.b = col.index;
    n.j = j;
    return out;
}

// ---- log-softmax ------------------------------------------------------------

namespace {
struct LogSoftmaxNode : UnaryNode {
    void backward(Tape& t) override {
        const Eigen::ArrayXXd p = value.array().exp();
        const Eigen::VectorXd rowsum = grad.rowwise().sum();
        MatrixXd g = grad - (p.colwise() * rowsum.array()).matrix();
        t.accumulate(x, g);
    }
};
} // namespace

Var log_softmax_rows(Var x) {
    return unary<LogSoftmaxNode>(x, [](const MatrixXd& m) {
        MatrixXd out(m.rows(), m.cols());
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double mx = m.row(i).maxCoeff();
            const Eigen::ArrayXd shifted = m.row(i).array() - mx;
            const double lse = std::log(shifted.exp().sum());
            out.row(i) = (shifted - lse).matrix();
        }
        return out;
    });
}

// ---- Cholesky and triangular solves ------------------------------------------

namespace {
struct CholeskyNode : UnaryNode {
    void backward(Tape& t) override { t.accumulate(x, chol_reverse(value, grad)); }
};
struct TriSolveLowerNode : BinaryNode {
    // value = L^{-1} B
    void backward(Tape& t) override {
        const MatrixXd& l = t.node(a).value;
        const MatrixXd gb = linalg::solve_lower_transposed(l, grad);
        if (t.wants_grad(a)) {
            MatrixXd gl = -(gb * value.transpose());
            t.accumulate(a, MatrixXd(gl.triangularView<Eigen::Lower>()));
        }
        t.accumulate(b, gb);
    }
};
struct TriSolveLowerTransposedNode : BinaryNode {
    // value = L^{-T} B
    void backward(Tape& t) override {
        const MatrixXd& l = t.node(a).value;
        const MatrixXd gb = linalg::solve_lower(l, grad);
        if (t.wants_grad(a)) {
            MatrixXd gl = -(value * gb.transpose());
            t.accumulate(a, MatrixXd(gl.triangularView<Eigen::Lower>()));
        }
        t.accumulate(b, gb);
    }
};
} // namespace

Var cholesky(Var a, double jitter0) {
    Tape& t = *a.tape;
    const auto fac = linalg::jittered_cholesky(linalg::symmetrize(a.value()), jitter0);
    auto out = make_node<CholeskyNode>(t, fac.factor.lower, t.wants_grad(a.index));
    static_cast<CholeskyNode&>(t.node(out.index)).x = a.index;
    return out;
}

Var tri_solve_lower(Var l, Var b) {
    Tape& t = *l.tape;
    auto out = make_node<TriSolveLowerNode>(
        t, linalg::solve_lower(l.value(), b.value()), any_needs(t, {l, b}));
    auto& n = static_cast<TriSolveLowerNode&>(t.node(out.index));
    n.a = l.index;
    n.b = b.index;
    return out;
}

Var tri_solve_lower_transposed(Var l, Var b) {
    Tape& t = *l.tape;
    auto out = make_node<TriSolveLowerTransposedNode>(
        t, linalg::solve_lower_transposed(l.value(), b.value()), any_needs(t, {l, b}));
    auto& n = static_cast<TriSolveLowerTransposedNode&>(t.node(out.index));
    n.a = l.index;
    n.b = b.index;
    return out;
}

// ---- SE gram ------------------------------------------------------------------

namespace {
struct SeGramNode : Node {
    int v, lam;
    void backward(Tape& t) override {
        const Eigen::VectorXd vv = t.node(v).value.col(0);
        const double l = t.node(lam).value(0, 0);
        const Eigen::Index r = vv.size();
        VectorXd gv = VectorXd::Zero(r);
        double gl = 0.0;
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < r; ++j) {
                const double d = vv[i] - vv[j];
                const double k = value(i, j);
                const double g = grad(i, j);
                gv[i] += g * k * (-d / (l * l));
                gv[j] += g * k * (d / (l * l));
                gl += g * k * d * d / (l * l * l);
            }
        if (t.wants_grad(v)) t.accumulate(v, gv);
        if (t.wants_grad(lam)) {
            MatrixXd m(1, 1);
            m(0, 0) = gl;
            t.accumulate(lam, m);
        }
    }
};
} // namespace

Var se_gram(Var v, Var lambda) {
    Tape& t = *v.tape;
    const Eigen::VectorXd vv = v.value().col(0);
    const double l = lambda.value()(0, 0);
    // same arithmetic as kernels::kernel_matrix so that plain-path and
    // tape-path gram matrices agree bit for bit
    MatrixXd k = kernels::kernel_matrix(vv, vv, l);
    auto out = make_node<SeGramNode>(t, std::move(k), any_needs(t, {v, lambda}));
    auto& n = static_cast<SeGramNode&>(t.node(out.index));
    n.v = v.index;
    n.lam = lambda.index;
    return out;
}

// ---- psi ------------------------------------------------------------------------

namespace {
struct PsiNode : Node {
    int mu, var, v, lam;
    void backward(Tape& t) override {
        const Eigen::ArrayXd muv = t.node(mu).value.col(0).array();
        const Eigen::ArrayXd varv = t.node(var).value.col(0).array();
        const Eigen::ArrayXd vv = t.node(v).value.col(0).array();
        const double l = t.node(lam).value(0, 0);
        const double l2 = l * l;
        const Eigen::Index s = muv.size();
        const Eigen::Index r = vv.size();
        const Eigen::ArrayXd e = l2 + varv;

        VectorXd gmu = VectorXd::Zero(s), gvar = VectorXd::Zero(s);
        VectorXd gv = VectorXd::Zero(r);
        double gl = 0.0;
        for (Eigen::Index i = 0; i < s; ++i) {
            const double ei = e[i];
            for (Eigen::Index j = 0; j < r; ++j) {
                const double q = muv[i] - vv[j];
                const double gp = grad(i, j) * value(i, j);
                gmu[i] += gp * (-q / ei);
                gv[j] += gp * (q / ei);
                gvar[i] += gp * (-0.5 / ei + 0.5 * q * q / (ei * ei));
                gl += gp * (1.0 / l - l / ei + l * q * q / (ei * ei));
            }
        }
        if (t.wants_grad(mu)) t.accumulate(mu, gmu);
        if (t.wants_grad(var)) t.accumulate(var, gvar);
        if (t.wants_grad(v)) t.accumulate(v, gv);
        if (t.wants_grad(lam)) {
            MatrixXd m(1, 1);
            m(0, 0) = gl;
            t.accumulate(lam, m);
        }
    }
};
} // namespace

Var psi_op(Var mu, Var var, Var v, Var lambda) {
    Tape& t = *mu.tape;
    const Eigen::ArrayXd muv = mu.value().col(0).array();
    const Eigen::ArrayXd varv = var.value().col(0).array();
    const Eigen::ArrayXd vv = v.value().col(0).array();
    const double l = lambda.value()(0, 0);
    const double l2 = l * l;
    const Eigen::Index s = muv.size();
    const Eigen::Index r = vv.size();

    const Eigen::ArrayXd e = l2 + varv;
    const Eigen::ArrayXd amp = (l2 / e).sqrt();
    const Eigen::ArrayXd half_inv_e = 0.5 / e;
    MatrixXd q = muv.matrix() * Eigen::RowVectorXd::Ones(r) -
                 Eigen::VectorXd::Ones(s) * vv.matrix().transpose();
    MatrixXd out =
        ((q.array().square().colwise() * (-half_inv_e)).exp().colwise() * amp)
            .matrix();
    auto res = make_node<PsiNode>(t, std::move(out),
                                  any_needs(t, {mu, var, v, lambda}));
    auto& n = static_cast<PsiNode&>(t.node(res.index));
    n.mu = mu.index;
    n.var = var.index;
    n.v = v.index;
    n.lam = lambda.index;
    return res;
}

// ---- omega ------------------------------------------------------------------------

namespace {
struct OmegaNode : Node {
    int mu, var, v, lam;
    void backward(Tape& t) override {
        const Eigen::ArrayXd muv = t.node(mu).value.col(0).array();
        const Eigen::ArrayXd varv = t.node(var).value.col(0).array();
        const Eigen::ArrayXd vv = t.node(v).value.col(0).array();
        const double l = t.node(lam).value(0, 0);
        const double l2 = l * l;
        const Eigen::Index s = muv.size();
        const Eigen::Index r = vv.size();

        VectorXd gmu = VectorXd::Zero(s), gvar = VectorXd::Zero(s);
        VectorXd gv = VectorXd::Zero(r);
        double gl = 0.0;
        for (Eigen::Index i = 0; i < s; ++i) {
            const double c = l2 + 2.0 * varv[i];
            for (Eigen::Index a = 0; a < r; ++a)
                for (Eigen::Index b = 0; b < r; ++b) {
                    const double g = grad(i, a + b * r);
                    if (g == 0.0) continue;
                    const double w = value(i, a + b * r);
                    const double mid = muv[i] - 0.5 * (vv[a] + vv[b]);
                    const double diff = vv[a] - vv[b];
                    const double gw = g * w;
                    gmu[i] += gw * (-2.0 * mid / c);
                    gvar[i] += gw * (-1.0 / c + 2.0 * mid * mid / (c * c));
                    gv[a] += gw * (mid / c - diff / (2.0 * l2));
                    gv[b] += gw * (mid / c + diff / (2.0 * l2));
                    gl += gw * (1.0 / l - l / c + 2.0 * l * mid * mid / (c * c) +
                                diff * diff / (2.0 * l2 * l));
                }
        }
        if (t.wants_grad(mu)) t.accumulate(mu, gmu);
        if (t.wants_grad(var)) t.accumulate(var, gvar);
        if (t.wants_grad(v)) t.accumulate(v, gv);
        if (t.wants_grad(lam)) {
            MatrixXd m(1, 1);
            m(0, 0) = gl;
            t.accumulate(lam, m);
        }
    }
};
} // namespace

Var omega_flat(Var mu, Var var, Var v, Var lambda) {
    Tape& t = *mu.tape;
    const Eigen::ArrayXd muv = mu.value().col(0).array();
    const Eigen::ArrayXd varv = var.value().col(0).array();
    const Eigen::ArrayXd vv = v.value().col(0).array();
    const double l = lambda.value()(0, 0);
    const double l2 = l * l;
    const Eigen::Index s = muv.size();
    const Eigen::Index r = vv.size();

    MatrixXd out(s, r * r);
    Eigen::ArrayXd c = l2 + 2.0 * varv;
    Eigen::ArrayXd amp = (l2 / c).sqrt();
    for (Eigen::Index a = 0; a < r; ++a)
        for (Eigen::Index b = a; b < r; ++b) {
            const double m = 0.5 * (vv[a] + vv[b]);
            const double diff = vv[a] - vv[b];
            const double dterm = diff * diff / (4.0 * l2);
            Eigen::ArrayXd col =
                amp * (-(muv - m).square() / c - dterm).exp();
            out.col(a + b * r) = col;
            if (a != b) out.col(b + a * r) = col;
        }
    auto res = make_node<OmegaNode>(t, std::move(out),
                                    any_needs(t, {mu, var, v, lambda}));
    auto& n = static_cast<OmegaNode&>(t.node(res.index));
    n.mu = mu.index;
    n.var = var.index;
    n.v = v.index;
    n.lam = lambda.index;
    return res;
}

// ---- cross-unit expectation ----------------------------------------------------

namespace {
struct CrossNode : Node {
    int mu_a, mu_b, var_a, var_b, cov, va, vb, la, lb;
    void backward(Tape& t) override {
        const Eigen::ArrayXd mua = t.node(mu_a).value.col(0).array();
        const Eigen::ArrayXd mub = t.node(mu_b).value.col(0).array();
        const Eigen::ArrayXd vaa = t.node(var_a).value.col(0).array();
        const Eigen::ArrayXd vbb = t.node(var_b).value.col(0).array();
        const Eigen::ArrayXd cv = t.node(cov).value.col(0).array();
        const Eigen::ArrayXd vav = t.node(va).value.col(0).array();
        const Eigen::ArrayXd vbv = t.node(vb).value.col(0).array();
        const double lav = t.node(la).value(0, 0);
        const double lbv = t.node(lb).value(0, 0);
        const Eigen::Index s = mua.size();
        const Eigen::Index ra = vav.size();
        const Eigen::Index rb = vbv.size();

        VectorXd gmua = VectorXd::Zero(s), gmub = VectorXd::Zero(s);
        VectorXd gvara = VectorXd::Zero(s), gvarb = VectorXd::Zero(s);
        VectorXd gcov = VectorXd::Zero(s);
        VectorXd gva = VectorXd::Zero(ra), gvb = VectorXd::Zero(rb);
        double gla = 0.0, glb = 0.0;
        for (Eigen::Index i = 0; i < s; ++i) {
            const double ea = lav * lav + vaa[i];
            const double eb = lbv * lbv + vbb[i];
            const double c = cv[i];
            double det = ea * eb - c * c;
            const bool floored = det < 1e-12;
            if (floored) det = 1e-12;
            for (Eigen::Index p = 0; p < ra; ++p) {
                const double da = vav[p] - mua[i];
                for (Eigen::Index q = 0; q < rb; ++q) {
                    const double g = grad(i, p + q * ra);
                    if (g == 0.0) continue;
                    const double db = vbv[q] - mub[i];
                    const double w = value(i, p + q * ra);
                    const double gw = g * w;
                    const double quad =
                        eb * da * da + ea * db * db - 2.0 * c * da * db;
                    const double dda = -(eb * da - c * db) / det;
                    gmua[i] += gw * -dda;
                    gva[p] += gw * dda;
                    const double ddb = -(ea * db - c * da) / det;
                    gmub[i] += gw * -ddb;
                    gvb[q] += gw * ddb;
                    double dea = 0.0, deb = 0.0, dc = 0.0;
                    if (!floored) {
                        dea = -eb / (2.0 * det) - db * db / (2.0 * det) +
                              quad * eb / (2.0 * det * det);
                        deb = -ea / (2.0 * det) - da * da / (2.0 * det) +
                              quad * ea / (2.0 * det * det);
                        dc = c / det + da * db / det - quad * c / (det * det);
                    } else {
                        dea = -db * db / (2.0 * det);
                        deb = -da * da / (2.0 * det);
                        dc = da * db / det;
                    }
                    gvara[i] += gw * dea;
                    gvarb[i] += gw * deb;
                    gcov[i] += gw * dc;
                    gla += gw * (1.0 / lav + 2.0 * lav * dea);
                    glb += gw * (1.0 / lbv + 2.0 * lbv * deb);
                }
            }
        }
        if (t.wants_grad(mu_a)) t.accumulate(mu_a, gmua);
        if (t.wants_grad(mu_b)) t.accumulate(mu_b, gmub);
        if (t.wants_grad(var_a)) t.accumulate(var_a, gvara);
        if (t.wants_grad(var_b)) t.accumulate(var_b, gvarb);
        if (t.wants_grad(cov)) t.accumulate(cov, gcov);
        if (t.wants_grad(va)) t.accumulate(va, gva);
        if (t.wants_grad(vb)) t.accumulate(vb, gvb);
        if (t.wants_grad(la)) {
            MatrixXd m(1, 1);
            m(0, 0) = gla;
            t.accumulate(la, m);
        }
        if (t.wants_grad(lb)) {
            MatrixXd m(1, 1);
            m(0, 0) = glb;
            t.accumulate(lb, m);
        }
    }
};
} // namespace

Var cross_flat(Var mu_a, Var mu_b, Var var_a, Var var_b, Var cov, Var va,
               Var vb, Var la, Var lb) {
    Tape& t = *mu_a.tape;
    const Eigen::ArrayXd mua = mu_a.value().col(0).array();
    const Eigen::ArrayXd mub = mu_b.value().col(0).array();
    const Eigen::ArrayXd vaa = var_a.value().col(0).array();
    const Eigen::ArrayXd vbb = var_b.value().col(0).array();
    const Eigen::ArrayXd cv = cov.value().col(0).array();
    const Eigen::ArrayXd vav = va.value().col(0).array();
    const Eigen::ArrayXd vbv = vb.value().col(0).array();
    const double lav = la.value()(0, 0);
    const double lbv = lb.value()(0, 0);
    const Eigen::Index s = mua.size();
    const Eigen::Index ra = vav.size();
    const Eigen::Index rb = vbv.size();

    MatrixXd out(s, ra * rb);
    for (Eigen::Index i = 0; i < s; ++i) {
        const double ea = lav * lav + vaa[i];
        const double eb = lbv * lbv + vbb[i];
        const double c = cv[i];
        double det = ea * eb - c * c;
        if (det < 1e-12) det = 1e-12;
        const double amp = lav * lbv / std::sqrt(det);
        const double inv2det = 1.0 / (2.0 * det);
        for (Eigen::Index p = 0; p < ra; ++p) {
            const double da = vav[p] - mua[i];
            for (Eigen::Index q = 0; q < rb; ++q) {
                const double db = vbv[q] - mub[i];
                const double quad =
                    eb * da * da + ea * db * db - 2.0 * c * da * db;
                out(i, p + q * ra) = amp * std::exp(-quad * inv2det);
            }
        }
    }
    auto res = make_node<CrossNode>(
        t, std::move(out),
        any_needs(t, {mu_a, mu_b, var_a, var_b, cov, va, vb, la, lb}));
    auto& n = static_cast<CrossNode&>(t.node(res.index));
    n.mu_a = mu_a.index;
    n.mu_b = mu_b.index;
    n.var_a = var_a.index;
    n.var_b = var_b.index;
    n.cov = cov.index;
    n.va = va.index;
    n.vb = vb.index;
    n.la = la.index;
    n.lb = lb.index;
    return res;
}

// ---- per-sample congruence and Cholesky ---------------------------------------

namespace {
struct QuadCongruenceNode : BinaryNode {
    void backward(Tape& t) override {
        const MatrixXd& cf = t.node(a).value;
        const MatrixXd& w = t.node(b).value;
        const Eigen::Index s = cf.rows();
        const Eigen::Index p = w.rows();
        const Eigen::Index nn = w.cols();
        MatrixXd gcf = MatrixXd::Zero(s, p * p);
        MatrixXd gw = MatrixXd::Zero(p, nn);
        for (Eigen::Index i = 0; i < s; ++i) {
            const MatrixXd c = cf.row(i).reshaped(p, p);
            const MatrixXd g = grad.row(i).reshaped(nn, nn);
            if (t.wants_grad(a)) {
                MatrixXd gc = w * g * w.transpose();
                gcf.row(i) = gc.reshaped(1, p * p);
            }
            if (t.wants_grad(b))
                gw += c.transpose() * w * g + c * w * g.transpose();
        }
        if (t.wants_grad(a)) t.accumulate(a, gcf);
        if (t.wants_grad(b)) t.accumulate(b, gw);
    }
};
struct CholRowsNode : UnaryNode {
    int dim;
    double jitter0;
    void backward(Tape& t) override {
        const Eigen::Index s = value.rows();
        MatrixXd g = MatrixXd::Zero(s, dim * dim);
        for (Eigen::Index i = 0; i < s; ++i) {
            const MatrixXd l = value.row(i).reshaped(dim, dim);
            const MatrixXd gl = grad.row(i).reshaped(dim, dim);
            const MatrixXd ga = chol_reverse(l, gl);
            g.row(i) = ga.reshaped(1, dim * dim);
        }
        t.accumulate(x, g);
    }
};
struct ExtractColRowsNode : UnaryNode {
    int j, dim;
    void backward(Tape& t) override {
        const MatrixXd& lf = t.node(x).value;
        MatrixXd g = MatrixXd::Zero(lf.rows(), lf.cols());
        g.middleCols(static_cast<Eigen::Index>(j) * dim, dim) = grad;
        t.accumulate(x, g);
    }
};
} // namespace

Var quad_congruence(Var cov_flat, Var w) {
    Tape& t = *cov_flat.tape;
    const MatrixXd& cf = cov_flat.value();
    const MatrixXd& wv = w.value();
    const Eigen::Index s = cf.rows();
    const Eigen::Index p = wv.rows();
    const Eigen::Index nn = wv.cols();
    if (cf.cols() != p * p)
        throw DimensionMismatch("quad_congruence: flat width != rows(w)^2");
    MatrixXd out(s, nn * nn);
    for (Eigen::Index i = 0; i < s; ++i) {
        const MatrixXd c = cf.row(i).reshaped(p, p);
        MatrixXd o = wv.transpose() * c * wv;
        out.row(i) = o.reshaped(1, nn * nn);
    }
    auto res = make_node<QuadCongruenceNode>(t, std::move(out),
                                             any_needs(t, {cov_flat, w}));
    auto& n = static_cast<QuadCongruenceNode&>(t.node(res.index));
    n.a = cov_flat.index;
    n.b = w.index;
    return res;
}

Var chol_rows(Var cov_flat, int dim, double jitter0) {
    Tape& t = *cov_flat.tape;
    const MatrixXd& cf = cov_flat.value();
    const Eigen::Index s = cf.rows();
    if (cf.cols() != static_cast<Eigen::Index>(dim) * dim)
        throw DimensionMismatch("chol_rows: flat width != dim^2");
    MatrixXd out(s, cf.cols());
    for (Eigen::Index i = 0; i < s; ++i) {
        const MatrixXd c = linalg::symmetrize(cf.row(i).reshaped(dim, dim));
        const auto fac = linalg::jittered_cholesky(c, jitter0);
        out.row(i) = fac.factor.lower.reshaped(1, cf.cols());
    }
    auto res = make_node<CholRowsNode>(t, std::move(out),
                                       t.wants_grad(cov_flat.index));
    auto& n = static_cast<CholRowsNode&>(t.node(res.index));
    n.x = cov_flat.index;
    n.dim = dim;
    n.jitter0 = jitter0;
    return res;
}

Var extract_col_rows(Var l_flat, int j, int dim) {
    Tape& t = *l_flat.tape;
    const MatrixXd& lf = l_flat.value();
    MatrixXd out = lf.middleCols(static_cast<Eigen::Index>(j) * dim, dim);
    auto res = make_node<ExtractColRowsNode>(t, std::move(out),
                                             t.wants_grad(l_flat.index));
    auto& n = static_cast<ExtractColRowsNode&>(t.node(res.index));
    n.x = l_flat.index;
    n.j = j;
    n.dim = dim;
    return res;
}

namespace {
double stable_logistic(double x) {
    return x > 0.0 ? 1.0 / (1.0 + std::exp(-x))
                   : std::exp(x) / (1.0 + std::exp(x));
}
double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

struct LowerFromPackedNode : UnaryNode {
    int dim;
    bool diagonal_only;
    void backward(Tape& t) override {
        const Eigen::VectorXd packed = t.node(x).value.col(0);
        VectorXd g;
        if (diagonal_only) {
            g = VectorXd::Zero(dim);
            for (int j = 0; j < dim; ++j)
                g[j] = grad(j, j) * stable_logistic(packed[j]);
        } else {
            g = VectorXd::Zero(packed.size());
            int k = 0;
            for (int j = 0; j < dim; ++j) {
                g[k] = grad(j, j) * stable_logistic(packed[k]);
                ++k;
                for (int i = j + 1; i < dim; ++i) g[k++] = grad(i, j);
            }
        }
        t.accumulate(x, g);
    }
};
} // namespace

Var lower_from_packed(Var packed, int dim, bool diagonal_only) {
    Tape& t = *packed.tape;
    const Eigen::VectorXd p = packed.value().col(0);
    const Eigen::Index expected =
        diagonal_only ? dim : dim * (dim + 1) / 2;
    if (p.size() != expected)
        throw DimensionMismatch("lower_from_packed: packed length mismatch");
    MatrixXd l = MatrixXd::Zero(dim, dim);
    if (diagonal_only) {
        for (int j = 0; j < dim; ++j) l(j, j) = stable_softplus(p[j]);
    } else {
        int k = 0;
        for (int j = 0; j < dim; ++j) {
            l(j, j) = stable_softplus(p[k++]);
            for (int i = j + 1; i < dim; ++i) l(i, j) = p[k++];
        }
    }
    auto res = make_node<LowerFromPackedNode>(t, std::move(l),
                                              t.wants_grad(packed.index));
    auto& n = static_cast<LowerFromPackedNode&>(t.node(res.index));
    n.x = packed.index;
    n.dim = dim;
    n.diagonal_only = diagonal_only;
    return res;
}

} // namespace gpn::ad
