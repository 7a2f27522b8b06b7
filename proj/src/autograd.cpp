#include "expresscount/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "expresscount/errors.hpp"

namespace expresscount::ad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

CMapR cmat(const Tensor& t) { return CMapR(t.data.data(), t.shape[0], t.shape[1]); }
MapR mat(Tensor& t) { return MapR(t.data.data(), t.shape[0], t.shape[1]); }
CVecMap cvec(const Tensor& t) { return CVecMap(t.data.data(), static_cast<Eigen::Index>(t.size())); }
VecMap vec(Tensor& t) { return VecMap(t.data.data(), static_cast<Eigen::Index>(t.size())); }

void expect_2d(const Tensor& t, const char* op) {
    XC_EXPECT(t.rank() == 2, std::string(op) + ": expected 2-D operand, got " + shape_str(t.shape));
}

void expect_same_tape(Var a, Var b) {
    XC_EXPECT(a.tape != nullptr && a.tape == b.tape, "operands recorded on different tapes");
}

// Applies f elementwise and records df(x, y) as the local derivative.
template <class F, class DF>
Var unary(Var a, F f, DF df) {
    const Tensor& x = a.value();
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
    return a.tape->push(std::move(y), {a}, [a, df](Tape& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const Tensor& x = t.value(a.id);
        const Tensor& yv = t.value(self);
        const Tensor& g = t.grad_mut(self);
        Tensor& gx = t.grad_mut(a.id);
        for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += g.data[i] * df(x.data[i], yv.data[i]);
    });
}

double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

} // namespace

// --- Var / Tape -----------------------------------------------------------

const Tensor& Var::value() const {
    XC_EXPECT(valid(), "use of an empty Var");
    return tape->value(id);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = grad_enabled_;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const ParamStore& store, const std::string& name) {
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.external = &store.get(name);
    n.requires_grad = grad_enabled_ && !store.is_frozen(name);
    n.param_name = name;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(name, id);
    return {this, id};
}

const Tensor& Tape::value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.owned;
}

Tensor& Tape::grad_mut(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor(value(id).shape);
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    static const Tensor empty;
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.grad.data.empty() ? empty : n.grad;
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::push(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    if (grad_enabled_) {
        for (const Var& v : inputs) {
            XC_EXPECT(v.tape == this, "operand recorded on a different tape");
            if (requires_grad(v.id)) {
                n.requires_grad = true;
                break;
            }
        }
        if (n.requires_grad) n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
    XC_EXPECT(root.tape == this, "backward root belongs to another tape");
    XC_EXPECT(value(root.id).size() == 1, "backward root must be a scalar, got " + shape_str(value(root.id).shape));
    if (!requires_grad(root.id)) return;
    grad_mut(root.id).data[0] += 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || !n.backward || n.grad.data.empty()) continue;
        n.backward(*this, id);
    }
}

void Tape::accumulate_param_grads(GradStore& grads) const {
    for (const auto& [name, id] : param_nodes_) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.data.empty()) continue;
        auto [it, inserted] = grads.try_emplace(name, n.grad);
        if (!inserted) vec(it->second) += cvec(n.grad);
    }
}

// --- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
    expect_same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    expect_2d(x, "matmul");
    expect_2d(y, "matmul");
    XC_EXPECT(x.cols() == y.rows(), "matmul: inner dimensions differ " + shape_str(x.shape) + " x " + shape_str(y.shape));
    Tensor out({x.rows(), y.cols()});
    if (x.size() && y.size()) mat(out).noalias() = cmat(x) * cmat(y);
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) mat(t.grad_mut(a.id)).noalias() += cmat(g) * cmat(t.value(b.id)).transpose();
        if (t.requires_grad(b.id)) mat(t.grad_mut(b.id)).noalias() += cmat(t.value(a.id)).transpose() * cmat(g);
    });
}

Var matmul_nt(Var a, Var b) {
    expect_same_tape(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    expect_2d(x, "matmul_nt");
    expect_2d(y, "matmul_nt");
    XC_EXPECT(x.cols() == y.cols(), "matmul_nt: inner dimensions differ");
    Tensor out({x.rows(), y.rows()});
    if (x.size() && y.size()) mat(out).noalias() = cmat(x) * cmat(y).transpose();
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) mat(t.grad_mut(a.id)).noalias() += cmat(g) * cmat(t.value(b.id));
        if (t.requires_grad(b.id)) mat(t.grad_mut(b.id)).noalias() += cmat(g).transpose() * cmat(t.value(a.id));
    });
}

Var transpose(Var a) {
    return a.tape->push(a.value().transposed(), {a}, [a](Tape& t, int self) {
        if (!t.requires_grad(a.id)) return;
        mat(t.grad_mut(a.id)) += cmat(t.grad_mut(self)).transpose();
    });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

// --- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
    expect_same_tape(a, b);
    XC_EXPECT(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    vec(out) += cvec(b.value());
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)) += cvec(g);
        if (t.requires_grad(b.id)) vec(t.grad_mut(b.id)) += cvec(g);
    });
}

Var sub(Var a, Var b) {
    expect_same_tape(a, b);
    XC_EXPECT(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    vec(out) -= cvec(b.value());
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)) += cvec(g);
        if (t.requires_grad(b.id)) vec(t.grad_mut(b.id)) -= cvec(g);
    });
}

Var mul(Var a, Var b) {
    expect_same_tape(a, b);
    XC_EXPECT(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    vec(out).array() *= cvec(b.value()).array();
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)).array() += cvec(g).array() * cvec(t.value(b.id)).array();
        if (t.requires_grad(b.id)) vec(t.grad_mut(b.id)).array() += cvec(g).array() * cvec(t.value(a.id)).array();
    });
}

Var scale(Var a, double s) {
    Tensor out = a.value();
    vec(out) *= s;
    return a.tape->push(std::move(out), {a}, [a, s](Tape& t, int self) {
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)) += s * cvec(t.grad_mut(self));
    });
}

Var scale_by(Var a, Var s) {
    expect_same_tape(a, s);
    XC_EXPECT(s.value().size() == 1, "scale_by: scale must have one element");
    Tensor out = a.value();
    vec(out) *= s.value().data[0];
    return a.tape->push(std::move(out), {a, s}, [a, s](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)) += t.value(s.id).data[0] * cvec(g);
        if (t.requires_grad(s.id)) t.grad_mut(s.id).data[0] += cvec(g).dot(cvec(t.value(a.id)));
    });
}

Var add_row(Var a, Var row) {
    expect_same_tape(a, row);
    const Tensor& x = a.value();
    expect_2d(x, "add_row");
    XC_EXPECT(static_cast<int>(row.value().size()) == x.cols(), "add_row: row length mismatch");
    Tensor out = x;
    if (x.size()) mat(out).rowwise() += cvec(row.value()).transpose();
    return a.tape->push(std::move(out), {a, row}, [a, row](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)) += cvec(g);
        if (t.requires_grad(row.id) && g.size()) vec(t.grad_mut(row.id)) += cmat(g).colwise().sum().transpose();
    });
}

Var mul_row(Var a, Var row) {
    expect_same_tape(a, row);
    const Tensor& x = a.value();
    expect_2d(x, "mul_row");
    XC_EXPECT(static_cast<int>(row.value().size()) == x.cols(), "mul_row: row length mismatch");
    Tensor out = x;
    mat(out).array().rowwise() *= cvec(row.value()).transpose().array();
    return a.tape->push(std::move(out), {a, row}, [a, row](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id))
            mat(t.grad_mut(a.id)).array() += cmat(g).array().rowwise() * cvec(t.value(row.id)).transpose().array();
        if (t.requires_grad(row.id))
            vec(t.grad_mut(row.id)) +=
                (cmat(g).array() * cmat(t.value(a.id)).array()).colwise().sum().transpose().matrix();
    });
}

Var mul_col(Var a, Var col) {
    expect_same_tape(a, col);
    const Tensor& x = a.value();
    expect_2d(x, "mul_col");
    XC_EXPECT(static_cast<int>(col.value().size()) == x.rows(), "mul_col: column length mismatch");
    Tensor out = x;
    mat(out).array().colwise() *= cvec(col.value()).array();
    return a.tape->push(std::move(out), {a, col}, [a, col](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        if (t.requires_grad(a.id))
            mat(t.grad_mut(a.id)).array() += cmat(g).array().colwise() * cvec(t.value(col.id)).array();
        if (t.requires_grad(col.id))
            vec(t.grad_mut(col.id)) += (cmat(g).array() * cmat(t.value(a.id)).array()).rowwise().sum().matrix();
    });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
        [](double x, double) {
            const double u = k * (x + c * x * x * x);
            const double th = std::tanh(u);
            const double du = k * (1.0 + 3.0 * c * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

Var sigmoid(Var a) {
    return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
    return unary(a, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
}

Var abs(Var a) {
    return unary(a, [](double x) { return std::abs(x); },
                 [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var add_scalar(Var a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

// --- reductions & reshaping -----------------------------------------------

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    return a.tape->push(Tensor::scalar(s), {a}, [a](Tape& t, int self) {
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)).array() += t.grad_mut(self).data[0];
    });
}

Var mean(Var a) {
    const auto n = static_cast<double>(a.value().size());
    XC_EXPECT(n > 0, "mean of an empty tensor");
    return scale(sum(a), 1.0 / n);
}

Var reshape(Var a, std::vector<int> shape) {
    XC_EXPECT(shape_numel(shape) == a.value().size(),
              "reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    Tensor out(std::move(shape), a.value().data);
    return a.tape->push(std::move(out), {a}, [a](Tape& t, int self) {
        if (t.requires_grad(a.id)) vec(t.grad_mut(a.id)) += cvec(t.grad_mut(self));
    });
}

Var concat_rows(std::span<const Var> parts) {
    XC_EXPECT(!parts.empty(), "concat_rows: nothing to concatenate");
    const int cols = parts[0].value().cols();
    int rows = 0;
    for (const Var& p : parts) {
        expect_2d(p.value(), "concat_rows");
        XC_EXPECT(p.value().cols() == cols, "concat_rows: column mismatch " + shape_str(p.shape()));
        rows += p.value().rows();
    }
    Tensor out({rows, cols});
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.value().size();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    Tape* tape = parts[0].tape;
    return tape->push(std::move(out), parts, [inputs](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        std::size_t off = 0;
        for (const Var& p : inputs) {
            const std::size_t n = t.value(p.id).size();
            if (t.requires_grad(p.id) && n) {
                Tensor& gp = t.grad_mut(p.id);
                for (std::size_t i = 0; i < n; ++i) gp.data[i] += g.data[off + i];
            }
            off += n;
        }
    });
}

Var slice_rows(Var a, int begin, int count) {
    const Tensor& x = a.value();
    expect_2d(x, "slice_rows");
    XC_EXPECT(begin >= 0 && count >= 0 && begin + count <= x.rows(), "slice_rows: range out of bounds");
    const std::size_t off = static_cast<std::size_t>(begin) * x.cols();
    Tensor out({count, x.cols()});
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(off), out.size(), out.data.begin());
    return a.tape->push(std::move(out), {a}, [a, off](Tape& t, int self) {
        if (!t.requires_grad(a.id)) return;
        const Tensor& g = t.grad_mut(self);
        Tensor& ga = t.grad_mut(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[off + i] += g.data[i];
    });
}

Var gather_rows(Var table, std::span<const int> ids) {
    const Tensor& tab = table.value();
    expect_2d(tab, "gather_rows");
    const int d = tab.cols();
    Tensor out({static_cast<int>(ids.size()), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        XC_EXPECT(ids[r] >= 0 && ids[r] < tab.rows(), "gather_rows: id " + std::to_string(ids[r]) + " out of range");
        std::copy_n(tab.data.begin() + static_cast<std::ptrdiff_t>(ids[r]) * d, d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(r) * d);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return table.tape->push(std::move(out), {table}, [table, idx, d](Tape& t, int self) {
        if (!t.requires_grad(table.id)) return;
        const Tensor& g = t.grad_mut(self);
        Tensor& gt = t.grad_mut(table.id);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < d; ++c) gt.data[static_cast<std::size_t>(idx[r]) * d + c] += g.data[r * d + c];
    });
}

Var stop_gradient(Var a) { return a.tape->constant(a.value()); }

// --- neural network blocks ------------------------------------------------

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& in = x.value();
    expect_2d(in, "layer_norm");
    const int n = in.rows();
    const int d = in.cols();
    XC_EXPECT(static_cast<int>(gamma.value().size()) == d && static_cast<int>(beta.value().size()) == d,
              "layer_norm: affine parameter width mismatch");
    Tensor xhat({n, d});
    Tensor inv_std({n});
    Tensor out({n, d});
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;
    for (int r = 0; r < n; ++r) {
        double mu = 0.0;
        for (int c = 0; c < d; ++c) mu += in.at(r, c);
        mu /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) var += (in.at(r, c) - mu) * (in.at(r, c) - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std.data[static_cast<std::size_t>(r)] = is;
        for (int c = 0; c < d; ++c) {
            const double h = (in.at(r, c) - mu) * is;
            xhat.at(r, c) = h;
            out.at(r, c) = h * gv[static_cast<std::size_t>(c)] + bv[static_cast<std::size_t>(c)];
        }
    }
    return x.tape->push(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
        const Tensor& g = t.grad_mut(self);
        const int n = xhat.rows();
        const int d = xhat.cols();
        if (t.requires_grad(gamma.id)) {
            Tensor& gg = t.grad_mut(gamma.id);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gg.data[static_cast<std::size_t>(c)] += g.at(r, c) * xhat.at(r, c);
        }
        if (t.requires_grad(beta.id)) {
            Tensor& gb = t.grad_mut(beta.id);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c) gb.data[static_cast<std::size_t>(c)] += g.at(r, c);
        }
        if (t.requires_grad(x.id)) {
            const auto& gv = t.value(gamma.id).data;
            Tensor& gx = t.grad_mut(x.id);
            for (int r = 0; r < n; ++r) {
                double s1 = 0.0;
                double s2 = 0.0;
                for (int c = 0; c < d; ++c) {
                    const double gh = g.at(r, c) * gv[static_cast<std::size_t>(c)];
                    s1 += gh;
                    s2 += gh * xhat.at(r, c);
                }
                const double is = inv_std.data[static_cast<std::size_t>(r)];
                for (int c = 0; c < d; ++c) {
                    const double gh = g.at(r, c) * gv[static_cast<std::size_t>(c)];
                    gx.at(r, c) += is * (gh - s1 / d - xhat.at(r, c) * s2 / d);
                }
            }
        }
    });
}

Var multi_head_attention(Var q, Var k, Var v, int n_heads, std::span<const std::uint8_t> key_mask) {
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    const Tensor& V = v.value();
    expect_2d(Q, "attention");
    expect_2d(K, "attention");
    expect_2d(V, "attention");
    const int n = Q.rows();
    const int m = K.rows();
    const int d = Q.cols();
    XC_EXPECT(K.cols() == d && V.cols() == d && V.rows() == m, "attention: q/k/v shape mismatch");
    XC_EXPECT(n_heads > 0 && d % n_heads == 0, "attention: width not divisible by head count");
    XC_EXPECT(static_cast<int>(key_mask.size()) == m, "attention: key mask length mismatch");
    const int dh = d / n_heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<std::uint8_t> maskv(key_mask.begin(), key_mask.end());
    bool any_key = false;
    for (auto b : maskv) any_key = any_key || b;
    XC_EXPECT(any_key, "attention: every key is masked");

    std::vector<MatR> probs(static_cast<std::size_t>(n_heads));
    Tensor out({n, d});
    for (int h = 0; h < n_heads; ++h) {
        auto Qh = cmat(Q).middleCols(h * dh, dh);
        auto Kh = cmat(K).middleCols(h * dh, dh);
        auto Vh = cmat(V).middleCols(h * dh, dh);
        MatR S = (Qh * Kh.transpose()) * inv;
        for (int r = 0; r < n; ++r) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < m; ++c)
                if (maskv[static_cast<std::size_t>(c)]) mx = std::max(mx, S(r, c));
            double z = 0.0;
            for (int c = 0; c < m; ++c) {
                const double e = maskv[static_cast<std::size_t>(c)] ? std::exp(S(r, c) - mx) : 0.0;
                S(r, c) = e;
                z += e;
            }
            S.row(r) /= z;
        }
        mat(out).middleCols(h * dh, dh).noalias() = S * Vh;
        probs[static_cast<std::size_t>(h)] = std::move(S);
    }
    return q.tape->push(std::move(out), {q, k, v},
                        [q, k, v, n_heads, dh, inv, probs = std::move(probs)](Tape& t, int self) {
        const Tensor& G = t.grad_mut(self);
        const bool gq = t.requires_grad(q.id);
        const bool gk = t.requires_grad(k.id);
        const bool gv = t.requires_grad(v.id);
        for (int h = 0; h < n_heads; ++h) {
            const MatR& P = probs[static_cast<std::size_t>(h)];
            auto Gh = cmat(G).middleCols(h * dh, dh);
            if (gv) mat(t.grad_mut(v.id)).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
            if (!gq && !gk) continue;
            MatR dP = Gh * cmat(t.value(v.id)).middleCols(h * dh, dh).transpose();
            Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
            MatR dS = P.array() * (dP.colwise() - rowdot).array();
            if (gq) mat(t.grad_mut(q.id)).middleCols(h * dh, dh).noalias() += inv * dS * cmat(t.value(k.id)).middleCols(h * dh, dh);
            if (gk) mat(t.grad_mut(k.id)).middleCols(h * dh, dh).noalias() += inv * dS.transpose() * cmat(t.value(q.id)).middleCols(h * dh, dh);
        }
    });
}

namespace {

struct ConvGeom {
    int c, h, w, o, k, stride, pad, ho, wo;
};

// cols[(c*k + ky)*k + kx, oy*wo + ox]
void im2col(const double* x, const ConvGeom& g, double* cols) {
    const int npix = g.ho * g.wo;
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * npix;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    double* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, const ConvGeom& g, double* x) {
    const int npix = g.ho * g.wo;
    for (int c = 0; c < g.c; ++c)
        for (int ky = 0; ky < g.k; ++ky)
            for (int kx = 0; kx < g.k; ++kx) {
                const double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * npix;
                for (int oy = 0; oy < g.ho; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    double* dst = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    const double* src = row + oy * g.wo;
                    for (int ox = 0; ox < g.wo; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                    }
                }
            }
}

} // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    XC_EXPECT(X.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(X.shape));
    XC_EXPECT(W.rank() == 4 && W.dim(2) == W.dim(3), "conv2d: kernel must be [O,C,k,k], got " + shape_str(W.shape));
    XC_EXPECT(W.dim(1) == X.dim(0), "conv2d: channel mismatch " + shape_str(X.shape) + " vs kernel " + shape_str(W.shape));
    XC_EXPECT(static_cast<int>(b.value().size()) == W.dim(0), "conv2d: bias length mismatch");
    ConvGeom g{X.dim(0), X.dim(1), X.dim(2), W.dim(0), W.dim(2), stride, pad, 0, 0};
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    XC_EXPECT(g.ho > 0 && g.wo > 0, "conv2d: output would be empty for input " + shape_str(X.shape));
    const int ckk = g.c * g.k * g.k;
    const int npix = g.ho * g.wo;

    const bool pointwise = g.k == 1 && stride == 1 && pad == 0;
    Tensor cols;
    if (!pointwise) {
        cols = Tensor({ckk, npix});
        im2col(X.data.data(), g, cols.data.data());
    }
    const Tensor& colsref = pointwise ? X : cols;
    Tensor out({g.o, g.ho, g.wo});
    MapR om(out.data.data(), g.o, npix);
    om.noalias() = CMapR(W.data.data(), g.o, ckk) * CMapR(colsref.data.data(), ckk, npix);
    om.colwise() += cvec(b.value());

    return x.tape->push(std::move(out), {x, w, b}, [x, w, b, g, ckk, npix, pointwise, cols = std::move(cols)](Tape& t, int self) {
        const Tensor& G = t.grad_mut(self);
        CMapR gm(G.data.data(), g.o, npix);
        const Tensor& colsref = pointwise ? t.value(x.id) : cols;
        CMapR cm(colsref.data.data(), ckk, npix);
        if (t.requires_grad(w.id)) {
            Tensor& gw = t.grad_mut(w.id);
            MapR(gw.data.data(), g.o, ckk).noalias() += gm * cm.transpose();
        }
        if (t.requires_grad(b.id)) vec(t.grad_mut(b.id)) += gm.rowwise().sum();
        if (t.requires_grad(x.id)) {
            const Tensor& W = t.value(w.id);
            Tensor& gx = t.grad_mut(x.id);
            if (pointwise) {
                MapR(gx.data.data(), ckk, npix).noalias() += CMapR(W.data.data(), g.o, ckk).transpose() * gm;
            } else {
                MatR dcols = CMapR(W.data.data(), g.o, ckk).transpose() * gm;
                col2im(dcols.data(), g, gx.data.data());
            }
        }
    });
}

Var clamp_boxes(Var boxes) {
    const Tensor& B = boxes.value();
    XC_EXPECT(B.rank() == 2 && B.cols() == 4, "clamp_boxes: expected [k,4] boxes, got " + shape_str(B.shape));
    Tensor out = B;
    for (int r = 0; r < B.rows(); ++r) {
        out.at(r, 2) = std::min(B.at(r, 2), 1.0 - B.at(r, 1));
        out.at(r, 3) = std::min(B.at(r, 3), 1.0 - B.at(r, 0));
    }
    // Straight-through gradient.
    return boxes.tape->push(std::move(out), {boxes}, [boxes](Tape& t, int self) {
        if (!t.requires_grad(boxes.id)) return;
        const Tensor& g = t.grad_mut(self);
        Tensor& gb = t.grad_mut(boxes.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
    });
}

} // namespace expresscount::ad
