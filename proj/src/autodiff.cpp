#include "prime/autodiff.hpp"

#include "prime/error.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace prime::ad {

namespace {

Tape& tape_of(Var a) {
    if (a.tape == nullptr) throw ShapeMismatch("variable is not bound to a tape");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw ShapeMismatch("variables live on different tapes");
    return tape_of(a);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
constexpr double kMaskedLogit = -1e9;

} // namespace

// ---------------------------------------------------------------------------
// Var / Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(id); }

double Var::item() const {
    const Tensor& v = value();
    if (v.numel() != 1) throw ShapeMismatch("item() on non-scalar " + v.shape_string());
    return v[0];
}

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw NonFiniteError("constant holds NaN/Inf");
    if (value.rank() != 2) value = value.reshaped({value.rows(), value.cols()});
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var{this, it->second};
    if (!p.value.all_finite()) throw NonFiniteError("parameter holds NaN/Inf");
    Node n;
    n.value = p.value.rank() == 2 ? p.value : p.value.reshaped({p.value.rows(), p.value.cols()});
    n.param = &p;
    n.needs_grad = grad_enabled_ && p.trainable;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size() - 1);
    param_ids_.emplace(&p, id);
    return Var{this, id};
}

Var Tape::push(const char* op, Tensor value, std::vector<int> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NonFiniteError(std::string(op) + " produced NaN/Inf");
    Node n;
    n.value = std::move(value);
    bool needs = false;
    if (grad_enabled_)
        for (int i : inputs) needs = needs || nodes_[static_cast<std::size_t>(i)].needs_grad;
    n.needs_grad = needs;
    if (needs) {
        n.inputs = std::move(inputs);
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor::matrix(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw ShapeMismatch("loss lives on another tape");
    if (backward_done_) throw ShapeMismatch("backward already run on this tape");
    if (value(loss.id).numel() != 1) throw ShapeMismatch("backward needs a scalar loss");
    backward_done_ = true;
    if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return;
    grad(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.backward) {
            n.backward(*this, id);
        } else if (n.param != nullptr) {
            if (!n.grad.all_finite()) throw NonFiniteError("gradient holds NaN/Inf");
            if (n.param->grad.numel() != n.grad.numel()) n.param->zero_grad();
            auto dst = n.param->grad.data();
            auto src = n.grad.data();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        }
    }
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.cols() != B.rows())
        throw ShapeMismatch("matmul " + A.shape_string() + " x " + B.shape_string());
    Tensor out = Tensor::matrix(A.rows(), B.cols());
    out.mat().noalias() = A.mat() * B.mat();
    return t.push("matmul", std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ib = t.input(self, 1);
        const auto g = t.grad(self).mat();
        if (t.needs_grad(ia)) t.grad(ia).mat().noalias() += g * t.value(ib).mat().transpose();
        if (t.needs_grad(ib)) t.grad(ib).mat().noalias() += t.value(ia).mat().transpose() * g;
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.cols() != B.cols())
        throw ShapeMismatch("matmul_nt " + A.shape_string() + " x " + B.shape_string() + "^T");
    Tensor out = Tensor::matrix(A.rows(), B.rows());
    out.mat().noalias() = A.mat() * B.mat().transpose();
    return t.push("matmul_nt", std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ib = t.input(self, 1);
        const auto g = t.grad(self).mat();
        if (t.needs_grad(ia)) t.grad(ia).mat().noalias() += g * t.value(ib).mat();
        if (t.needs_grad(ib)) t.grad(ib).mat().noalias() += g.transpose() * t.value(ia).mat();
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    Tensor out = Tensor::matrix(A.cols(), A.rows());
    out.mat() = A.mat().transpose();
    return t.push("transpose", std::move(out), {a.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0);
        t.grad(ia).mat() += t.grad(self).mat().transpose();
    });
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    out.mat() += b.value().mat();
    return t.push("add", std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ib = t.input(self, 1);
        if (t.needs_grad(ia)) t.grad(ia).mat() += t.grad(self).mat();
        if (t.needs_grad(ib)) t.grad(ib).mat() += t.grad(self).mat();
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    out.mat() -= b.value().mat();
    return t.push("sub", std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ib = t.input(self, 1);
        if (t.needs_grad(ia)) t.grad(ia).mat() += t.grad(self).mat();
        if (t.needs_grad(ib)) t.grad(ib).mat() -= t.grad(self).mat();
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    out.mat().array() *= b.value().mat().array();
    return t.push("mul", std::move(out), {a.id, b.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ib = t.input(self, 1);
        const auto g = t.grad(self).mat().array();
        if (t.needs_grad(ia)) t.grad(ia).mat().array() += g * t.value(ib).mat().array();
        if (t.needs_grad(ib)) t.grad(ib).mat().array() += g * t.value(ia).mat().array();
    });
}

Var scale(Var a, double c) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    out.mat() *= c;
    return t.push("scale", std::move(out), {a.id}, [c](Tape& t, int self) {
        t.grad(t.input(self, 0)).mat() += c * t.grad(self).mat();
    });
}

Var add_scalar(Var a, double c) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    out.mat().array() += c;
    return t.push("add_scalar", std::move(out), {a.id}, [](Tape& t, int self) {
        t.grad(t.input(self, 0)).mat() += t.grad(self).mat();
    });
}

Var add_row(Var a, Var row) {
    Tape& t = tape_of(a, row);
    const Tensor& R = row.value();
    if (R.rows() != 1 || R.cols() != a.value().cols())
        throw ShapeMismatch("add_row " + a.value().shape_string() + " + " + R.shape_string());
    Tensor out = a.value();
    out.mat().rowwise() += R.mat().row(0);
    return t.push("add_row", std::move(out), {a.id, row.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ir = t.input(self, 1);
        if (t.needs_grad(ia)) t.grad(ia).mat() += t.grad(self).mat();
        if (t.needs_grad(ir)) t.grad(ir).mat() += t.grad(self).mat().colwise().sum();
    });
}

Var mul_col(Var a, Var col) {
    Tape& t = tape_of(a, col);
    const Tensor& C = col.value();
    if (C.cols() != 1 || C.rows() != a.value().rows())
        throw ShapeMismatch("mul_col " + a.value().shape_string() + " * " + C.shape_string());
    Tensor out = a.value();
    out.mat().array().colwise() *= C.mat().col(0).array();
    return t.push("mul_col", std::move(out), {a.id, col.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0), ic = t.input(self, 1);
        const auto g = t.grad(self).mat();
        if (t.needs_grad(ia))
            t.grad(ia).mat().array() += g.array().colwise() * t.value(ic).mat().col(0).array();
        if (t.needs_grad(ic))
            t.grad(ic).mat().col(0) += (g.array() * t.value(ia).mat().array()).rowwise().sum().matrix();
    });
}

Var gelu(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (double& x : out.data()) {
        const double u = kGeluC * (x + kGeluA * x * x * x);
        x = 0.5 * x * (1.0 + std::tanh(u));
    }
    return t.push("gelu", std::move(out), {a.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0);
        auto x = t.value(ia).data();
        auto g = t.grad(self).data();
        auto dx = t.grad(ia).data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = x[i];
            const double u = kGeluC * (v + kGeluA * v * v * v);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            dx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
        }
    });
}

Var sigmoid(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (double& x : out.data()) x = stable_sigmoid(x);
    return t.push("sigmoid", std::move(out), {a.id}, [](Tape& t, int self) {
        const auto y = t.value(self).mat().array();
        t.grad(t.input(self, 0)).mat().array() += t.grad(self).mat().array() * y * (1.0 - y);
    });
}

Var log_sigmoid(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (double& x : out.data()) x = -softplus(-x);
    return t.push("log_sigmoid", std::move(out), {a.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0);
        auto x = t.value(ia).data();
        auto g = t.grad(self).data();
        auto dx = t.grad(ia).data();
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * stable_sigmoid(-x[i]);
    });
}

// ---------------------------------------------------------------------------
// row-wise
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_rows_value(const Tensor& x) {
    Tensor out = x;
    const std::size_t n = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double* row = out.data().data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            row[c] = std::exp(row[c] - mx);
            s += row[c];
        }
        for (std::size_t c = 0; c < n; ++c) row[c] /= s;
    }
    return out;
}

} // namespace

Var softmax_rows(Var a) {
    Tape& t = tape_of(a);
    return t.push("softmax_rows", softmax_rows_value(a.value()), {a.id}, [](Tape& t, int self) {
        const auto y = t.value(self).mat().array();
        const auto g = t.grad(self).mat().array();
        const Eigen::ArrayXd dots = (g * y).rowwise().sum();
        t.grad(t.input(self, 0)).mat().array() += y * (g.colwise() - dots);
    });
}

Var log_softmax_rows(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    const std::size_t n = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double* row = out.data().data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += std::exp(row[c] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < n; ++c) row[c] -= lse;
    }
    return t.push("log_softmax_rows", std::move(out), {a.id}, [](Tape& t, int self) {
        const auto sm = t.value(self).mat().array().exp();
        const auto g = t.grad(self).mat().array();
        const Eigen::ArrayXd gs = g.rowwise().sum();
        t.grad(t.input(self, 0)).mat().array() += g - sm.colwise() * gs;
    });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
    Tape& t = tape_of(x, gamma);
    tape_of(x, beta);
    const Tensor& X = x.value();
    const std::size_t n = X.cols();
    if (gamma.value().numel() != n || beta.value().numel() != n)
        throw ShapeMismatch("layer_norm affine params must have " + std::to_string(n) + " entries");
    Tensor xhat = X;
    std::vector<double> inv_std(X.rows());
    for (std::size_t r = 0; r < X.rows(); ++r) {
        double* row = xhat.data().data() + r * n;
        double mean = 0.0;
        for (std::size_t c = 0; c < n; ++c) mean += row[c];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) row[c] = (row[c] - mean) * inv_std[r];
    }
    Tensor out = xhat;
    out.mat().array().rowwise() *= gamma.value().mat().row(0).array();
    out.mat().rowwise() += beta.value().mat().row(0);
    return t.push("layer_norm_rows", std::move(out), {x.id, gamma.id, beta.id},
                  [xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                      const int ix = t.input(self, 0), ig = t.input(self, 1), ib = t.input(self, 2);
                      const auto g = t.grad(self).mat().array();
                      const auto xh = xhat.mat().array();
                      if (t.needs_grad(ig)) t.grad(ig).mat().row(0).array() += (g * xh).colwise().sum();
                      if (t.needs_grad(ib)) t.grad(ib).mat().row(0).array() += g.colwise().sum();
                      if (!t.needs_grad(ix)) return;
                      const Eigen::Array<double, 1, Eigen::Dynamic> gam = t.value(ig).mat().row(0).array();
                      const Eigen::ArrayXXd dxhat = (g.rowwise() * gam).eval();
                      const double n = static_cast<double>(xhat.cols());
                      auto dx = t.grad(ix).mat().array();
                      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                          const double s1 = dxhat.row(r).sum();
                          const double s2 = (dxhat.row(r) * xh.row(r)).sum();
                          dx.row(r) += inv_std[static_cast<std::size_t>(r)] / n *
                                       (n * dxhat.row(r) - s1 - xh.row(r) * s2);
                      }
                  });
}

Var l2_normalize_rows(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    const std::size_t n = out.cols();
    std::vector<double> norms(out.rows());
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double* row = out.data().data() + r * n;
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += row[c] * row[c];
        if (s == 0.0) throw ZeroVector("row " + std::to_string(r) + " has zero norm");
        norms[r] = std::sqrt(s);
        for (std::size_t c = 0; c < n; ++c) row[c] /= norms[r];
    }
    return t.push("l2_normalize_rows", std::move(out), {a.id},
                  [norms = std::move(norms)](Tape& t, int self) {
                      const auto y = t.value(self).mat().array();
                      const auto g = t.grad(self).mat().array();
                      auto dx = t.grad(t.input(self, 0)).mat().array();
                      for (Eigen::Index r = 0; r < y.rows(); ++r) {
                          const double d = (y.row(r) * g.row(r)).sum();
                          dx.row(r) += (g.row(r) - y.row(r) * d) / norms[static_cast<std::size_t>(r)];
                      }
                  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var mean_rows(Var a) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (A.rows() == 0) throw ShapeMismatch("mean_rows of an empty matrix");
    Tensor out = Tensor::matrix(1, A.cols());
    out.mat() = A.mat().colwise().mean();
    return t.push("mean_rows", std::move(out), {a.id}, [](Tape& t, int self) {
        const int ia = t.input(self, 0);
        auto dx = t.grad(ia).mat();
        const double inv = 1.0 / static_cast<double>(dx.rows());
        dx.rowwise() += inv * t.grad(self).mat().row(0);
    });
}

Var sum_all(Var a) {
    Tape& t = tape_of(a);
    return t.push("sum_all", Tensor::scalar(a.value().mat().sum()), {a.id}, [](Tape& t, int self) {
        t.grad(t.input(self, 0)).mat().array() += t.grad(self)[0];
    });
}

Var mean_all(Var a) {
    Tape& t = tape_of(a);
    const double n = static_cast<double>(a.value().numel());
    return t.push("mean_all", Tensor::scalar(a.value().mat().sum() / n), {a.id}, [n](Tape& t, int self) {
        t.grad(t.input(self, 0)).mat().array() += t.grad(self)[0] / n;
    });
}

Var block_mean_cols(Var a, std::size_t blocks) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (blocks == 0 || A.cols() % blocks != 0)
        throw ShapeMismatch("block_mean_cols: " + std::to_string(A.cols()) + " columns not divisible by " +
                            std::to_string(blocks));
    const std::size_t w = A.cols() / blocks;
    Tensor out = Tensor::matrix(A.rows(), w);
    for (std::size_t b = 0; b < blocks; ++b)
        out.mat() += A.mat().middleCols(static_cast<Eigen::Index>(b * w), static_cast<Eigen::Index>(w));
    out.mat() /= static_cast<double>(blocks);
    return t.push("block_mean_cols", std::move(out), {a.id}, [blocks, w](Tape& t, int self) {
        const auto g = t.grad(self).mat();
        auto dx = t.grad(t.input(self, 0)).mat();
        const double inv = 1.0 / static_cast<double>(blocks);
        for (std::size_t b = 0; b < blocks; ++b)
            dx.middleCols(static_cast<Eigen::Index>(b * w), static_cast<Eigen::Index>(w)) += inv * g;
    });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Var reshape(Var a, std::size_t rows, std::size_t cols) {
    Tape& t = tape_of(a);
    Tensor out = a.value().reshaped({rows, cols});
    return t.push("reshape", std::move(out), {a.id}, [](Tape& t, int self) {
        auto src = t.grad(self).data();
        auto dst = t.grad(t.input(self, 0)).data();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
    Tape& t = tape_of(parts[0]);
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
        tape_of(parts[0], p);
        if (p.value().cols() != cols) throw ShapeMismatch("concat_rows column mismatch");
        rows += p.value().rows();
        ids.push_back(p.id);
    }
    Tensor out = Tensor::matrix(rows, cols);
    std::size_t r0 = 0;
    for (const Var& p : parts) {
        const auto n = p.value().rows();
        out.mat().middleRows(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(n)) = p.value().mat();
        r0 += n;
    }
    return t.push("concat_rows", std::move(out), std::move(ids), [](Tape& t, int self) {
        const auto g = t.grad(self).mat();
        Eigen::Index r0 = 0;
        for (std::size_t k = 0;; ++k) {
            if (r0 >= g.rows()) break;
            const int ip = t.input(self, k);
            const auto n = static_cast<Eigen::Index>(t.value(ip).rows());
            if (t.needs_grad(ip)) t.grad(ip).mat() += g.middleRows(r0, n);
            r0 += n;
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
    Tape& t = tape_of(parts[0]);
    const std::size_t rows = parts[0].value().rows();
    std::size_t cols = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
        tape_of(parts[0], p);
        if (p.value().rows() != rows) throw ShapeMismatch("concat_cols row mismatch");
        cols += p.value().cols();
        ids.push_back(p.id);
    }
    Tensor out = Tensor::matrix(rows, cols);
    std::size_t c0 = 0;
    for (const Var& p : parts) {
        const auto n = p.value().cols();
        out.mat().middleCols(static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(n)) = p.value().mat();
        c0 += n;
    }
    return t.push("concat_cols", std::move(out), std::move(ids), [](Tape& t, int self) {
        const auto g = t.grad(self).mat();
        Eigen::Index c0 = 0;
        for (std::size_t k = 0;; ++k) {
            if (c0 >= g.cols()) break;
            const int ip = t.input(self, k);
            const auto n = static_cast<Eigen::Index>(t.value(ip).cols());
            if (t.needs_grad(ip)) t.grad(ip).mat() += g.middleCols(c0, n);
            c0 += n;
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (begin + count > A.rows()) throw ShapeMismatch("slice_rows out of range");
    Tensor out = Tensor::matrix(count, A.cols());
    out.mat() = A.mat().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    return t.push("slice_rows", std::move(out), {a.id}, [begin, count](Tape& t, int self) {
        t.grad(t.input(self, 0))
            .mat()
            .middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
            t.grad(self).mat();
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (begin + count > A.cols()) throw ShapeMismatch("slice_cols out of range");
    Tensor out = Tensor::matrix(A.rows(), count);
    out.mat() = A.mat().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    return t.push("slice_cols", std::move(out), {a.id}, [begin, count](Tape& t, int self) {
        t.grad(t.input(self, 0))
            .mat()
            .middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
            t.grad(self).mat();
    });
}

Var gather_rows(Var a, std::span<const std::size_t> index) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    Tensor out = Tensor::matrix(index.size(), A.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= A.rows()) throw ShapeMismatch("gather_rows index out of range");
        out.mat().row(static_cast<Eigen::Index>(i)) = A.mat().row(static_cast<Eigen::Index>(index[i]));
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return t.push("gather_rows", std::move(out), {a.id}, [idx = std::move(idx)](Tape& t, int self) {
        const auto g = t.grad(self).mat();
        auto dx = t.grad(t.input(self, 0)).mat();
        for (std::size_t i = 0; i < idx.size(); ++i)
            dx.row(static_cast<Eigen::Index>(idx[i])) += g.row(static_cast<Eigen::Index>(i));
    });
}

Var scatter_rows(Var a, std::span<const std::size_t> index, std::size_t n_rows) {
    Tape& t = tape_of(a);
    const Tensor& A = a.value();
    if (index.size() != A.rows()) throw ShapeMismatch("scatter_rows index length mismatch");
    Tensor out = Tensor::matrix(n_rows, A.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= n_rows) throw ShapeMismatch("scatter_rows index out of range");
        out.mat().row(static_cast<Eigen::Index>(index[i])) += A.mat().row(static_cast<Eigen::Index>(i));
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return t.push("scatter_rows", std::move(out), {a.id}, [idx = std::move(idx)](Tape& t, int self) {
        const auto g = t.grad(self).mat();
        auto dx = t.grad(t.input(self, 0)).mat();
        for (std::size_t i = 0; i < idx.size(); ++i)
            dx.row(static_cast<Eigen::Index>(i)) += g.row(static_cast<Eigen::Index>(idx[i]));
    });
}

// ---------------------------------------------------------------------------
// losses / gating
// ---------------------------------------------------------------------------

Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
    Tape& t = tape_of(logits);
    const Tensor& X = logits.value();
    if (targets.size() != X.rows()) throw ShapeMismatch("cross_entropy_rows target count mismatch");
    if (X.rows() == 0) throw EmptyBatch("cross_entropy_rows over zero rows");
    Tensor probs = softmax_rows_value(X);
    const std::size_t n = X.cols();
    double loss = 0.0;
    for (std::size_t r = 0; r < X.rows(); ++r) {
        if (targets[r] >= n) throw ShapeMismatch("cross_entropy_rows target out of range");
        const double* row = X.data().data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += std::exp(row[c] - mx);
        loss += mx + std::log(s) - row[targets[r]];
    }
    loss /= static_cast<double>(X.rows());
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    return t.push("cross_entropy_rows", Tensor::scalar(loss), {logits.id},
                  [probs = std::move(probs), tgt = std::move(tgt)](Tape& t, int self) {
                      const double g = t.grad(self)[0] / static_cast<double>(tgt.size());
                      auto dx = t.grad(t.input(self, 0)).mat();
                      dx += g * probs.mat();
                      for (std::size_t r = 0; r < tgt.size(); ++r)
                          dx(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(tgt[r])) -= g;
                  });
}

Var bce_with_logits(Var logits, std::span<const double> labels) {
    Tape& t = tape_of(logits);
    const Tensor& X = logits.value();
    if (X.cols() != 1 || labels.size() != X.rows()) throw ShapeMismatch("bce_with_logits expects n x 1 logits");
    if (X.rows() == 0) throw EmptyBatch("bce_with_logits over zero rows");
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) loss += softplus(X[i]) - labels[i] * X[i];
    loss /= static_cast<double>(labels.size());
    std::vector<double> y(labels.begin(), labels.end());
    return t.push("bce_with_logits", Tensor::scalar(loss), {logits.id}, [y = std::move(y)](Tape& t, int self) {
        const int ix = t.input(self, 0);
        const double g = t.grad(self)[0] / static_cast<double>(y.size());
        auto x = t.value(ix).data();
        auto dx = t.grad(ix).data();
        for (std::size_t i = 0; i < y.size(); ++i) dx[i] += g * (stable_sigmoid(x[i]) - y[i]);
    });
}

Var renormalize_selected(Var probs, const Tensor& keep) {
    Tape& t = tape_of(probs);
    const Tensor& P = probs.value();
    require_same_shape("renormalize_selected", P, keep);
    Tensor out = Tensor::matrix(P.rows(), P.cols());
    std::vector<double> sums(P.rows());
    for (std::size_t r = 0; r < P.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < P.cols(); ++c) s += P(r, c) * keep(r, c);
        if (s <= 0.0) throw ZeroVector("renormalize_selected: no selected mass in row " + std::to_string(r));
        sums[r] = s;
        for (std::size_t c = 0; c < P.cols(); ++c) out(r, c) = P(r, c) * keep(r, c) / s;
    }
    return t.push("renormalize_selected", std::move(out), {probs.id},
                  [keep, sums = std::move(sums)](Tape& t, int self) {
                      const Tensor& w = t.value(self);
                      const Tensor& g = t.grad(self);
                      Tensor& dp = t.grad(t.input(self, 0));
                      for (std::size_t r = 0; r < w.rows(); ++r) {
                          double gw = 0.0;
                          for (std::size_t c = 0; c < w.cols(); ++c) gw += g(r, c) * w(r, c);
                          for (std::size_t c = 0; c < w.cols(); ++c)
                              dp(r, c) += keep(r, c) * (g(r, c) - gw) / sums[r];
                      }
                  });
}

Var cross_attention(Var q, Var k, Var v, std::size_t n_heads, std::span<const bool> key_mask) {
    Tape& t = tape_of(q, k);
    tape_of(q, v);
    const std::size_t d = q.value().cols();
    const std::size_t n_keys = k.value().rows();
    if (n_heads == 0 || d % n_heads != 0)
        throw ShapeMismatch("model dim " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                            " heads");
    if (k.value().cols() != d || v.value().cols() != d || v.value().rows() != n_keys)
        throw ShapeMismatch("cross_attention q/k/v dims disagree");
    if (!key_mask.empty() && key_mask.size() != n_keys) throw ShapeMismatch("key mask length mismatch");

    bool any_valid = key_mask.empty() ? n_keys > 0 : false;
    bool any_masked = false;
    for (bool b : key_mask) {
        any_valid = any_valid || b;
        any_masked = any_masked || !b;
    }
    if (!any_valid) throw AllKeysMasked("no valid key among " + std::to_string(n_keys));

    std::optional<Var> mask_bias;
    if (any_masked) {
        Tensor bias = Tensor::matrix(q.value().rows(), n_keys);
        for (std::size_t r = 0; r < bias.rows(); ++r)
            for (std::size_t c = 0; c < n_keys; ++c) bias(r, c) = key_mask[c] ? 0.0 : kMaskedLogit;
        mask_bias = t.constant(std::move(bias));
    }

    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Var qh = n_heads == 1 ? q : slice_cols(q, h * dh, dh);
        Var kh = n_heads == 1 ? k : slice_cols(k, h * dh, dh);
        Var vh = n_heads == 1 ? v : slice_cols(v, h * dh, dh);
        Var scores = scale(matmul_nt(qh, kh), inv_sqrt);
        if (mask_bias) scores = add(scores, *mask_bias);
        heads.push_back(matmul(softmax_rows(scores), vh));
    }
    return n_heads == 1 ? heads[0] : concat_cols(heads);
}

} // namespace prime::ad
