#include "cops/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cops::ad {

namespace {

using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

void accumulate(Node& n, const Matrix& g) {
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

Var make(Matrix value, std::vector<NodePtr> parents, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return Var::from_node(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
    }
}

void require_scalar(const Var& s, const char* op) {
    if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument(std::string(op) + ": expected 1x1 operand");
}

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
}

double Var::scalar() const {
    if (rows() != 1 || cols() != 1) throw std::logic_error("Var::scalar on non-1x1 value");
    return node_->value(0, 0);
}

void Var::backward() const {
    if (rows() != 1 || cols() != 1) throw std::logic_error("backward() requires a scalar root");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !seen.contains(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    accumulate(*node_, Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Var detach(const Var& x) { return constant(x.value()); }

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make(a.value() + b.value(), {a.node(), b.node()}, [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make(a.value() - b.value(), {a.node(), b.node()}, [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], -n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    return make(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& n) {
        const Matrix& av = n.parents[0]->value;
        const Matrix& bv = n.parents[1]->value;
        accumulate(*n.parents[0], n.grad.cwiseProduct(bv));
        accumulate(*n.parents[1], n.grad.cwiseProduct(av));
    });
}

Var div(const Var& a, const Var& b) {
    require_same_shape(a, b, "div");
    return make(a.value().cwiseQuotient(b.value()), {a.node(), b.node()}, [](Node& n) {
        const Matrix& bv = n.parents[1]->value;
        accumulate(*n.parents[0], n.grad.cwiseQuotient(bv));
        accumulate(*n.parents[1], -n.grad.cwiseProduct(n.value).cwiseQuotient(bv));
    });
}

Var scale(const Var& a, double s) {
    return make(a.value() * s, {a.node()}, [s](Node& n) { accumulate(*n.parents[0], n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
    return make(a.value().array() + s, {a.node()}, [](Node& n) { accumulate(*n.parents[0], n.grad); });
}

Var one_minus(const Var& a) { return add_scalar(scale(a, -1.0), 1.0); }

Var mul_scalar(const Var& a, const Var& s) {
    require_scalar(s, "mul_scalar");
    return make(a.value() * s.value()(0, 0), {a.node(), s.node()}, [](Node& n) {
        const double sv = n.parents[1]->value(0, 0);
        accumulate(*n.parents[0], n.grad * sv);
        accumulate(*n.parents[1], Matrix::Constant(1, 1, n.grad.cwiseProduct(n.parents[0]->value).sum()));
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: row must be 1 x cols(a)");
    Matrix out = a.value().rowwise() + row.value().row(0);
    return make(std::move(out), {a.node(), row.node()}, [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], n.grad.colwise().sum());
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()) + ")");
    }
    return make(a.value() * b.value(), {a.node(), b.node()}, [](Node& n) {
        if (n.parents[0]->requires_grad) accumulate(*n.parents[0], n.grad * n.parents[1]->value.transpose());
        if (n.parents[1]->requires_grad) accumulate(*n.parents[1], n.parents[0]->value.transpose() * n.grad);
    });
}

Var transpose(const Var& a) {
    return make(a.value().transpose(), {a.node()}, [](Node& n) { accumulate(*n.parents[0], n.grad.transpose()); });
}

Var exp(const Var& a) {
    return make(a.value().array().exp().matrix(), {a.node()},
                [](Node& n) { accumulate(*n.parents[0], n.grad.cwiseProduct(n.value)); });
}

Var log(const Var& a) {
    return make(a.value().array().log().matrix(), {a.node()},
                [](Node& n) { accumulate(*n.parents[0], n.grad.cwiseQuotient(n.parents[0]->value)); });
}

Var pow(const Var& a, double p) {
    return make(a.value().array().pow(p).matrix(), {a.node()}, [p](Node& n) {
        const Matrix d = (p * n.parents[0]->value.array().pow(p - 1.0)).matrix();
        accumulate(*n.parents[0], n.grad.cwiseProduct(d));
    });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Matrix out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return make(std::move(out), {a.node()}, [](Node& n) {
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        Matrix d = n.parents[0]->value.unaryExpr([inv_sqrt_2pi](double x) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
        accumulate(*n.parents[0], n.grad.cwiseProduct(d));
    });
}

Var clamp(const Var& a, double lo, double hi) {
    return make(a.value().cwiseMax(lo).cwiseMin(hi), {a.node()}, [lo, hi](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix g = n.grad;
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            if (x(i) < lo || x(i) > hi) g(i) = 0.0;
        }
        accumulate(*n.parents[0], g);
    });
}

Var softmax_rows(const Var& a) {
    Matrix out = a.value();
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double m = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    return make(std::move(out), {a.node()}, [](Node& n) {
        const Matrix& y = n.value;
        Matrix g(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double dot = n.grad.row(r).dot(y.row(r));
            g.row(r) = y.row(r).cwiseProduct((n.grad.row(r).array() - dot).matrix());
        }
        accumulate(*n.parents[0], g);
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != cols || beta.rows() != 1 || beta.cols() != cols) {
        throw std::invalid_argument("layer_norm_rows: gamma/beta must be 1 x cols");
    }
    Matrix xhat(rows, cols);
    Vector inv_std(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
    }
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    out.rowwise() += beta.value().row(0);
    return make(std::move(out), {x.node(), gamma.node(), beta.node()},
                [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                    const Matrix& dy = n.grad;
                    const RowVector gv = n.parents[1]->value.row(0);
                    if (n.parents[0]->requires_grad) {
                        Matrix dx(dy.rows(), dy.cols());
                        const double c = static_cast<double>(dy.cols());
                        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                            const RowVector dxhat = dy.row(r).cwiseProduct(gv);
                            const double m1 = dxhat.sum() / c;
                            const double m2 = dxhat.dot(xhat.row(r)) / c;
                            dx.row(r) = inv_std(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
                        }
                        accumulate(*n.parents[0], dx);
                    }
                    accumulate(*n.parents[1], dy.cwiseProduct(xhat).colwise().sum());
                    accumulate(*n.parents[2], dy.colwise().sum());
                });
}

Var normalize_rows(const Var& a, double eps, int* clamped) {
    Vector norms(a.rows());
    Matrix out = a.value();
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        double nrm = out.row(r).norm();
        if (nrm < eps) {
            nrm = eps;
            if (clamped) ++*clamped;
        }
        norms(r) = nrm;
        out.row(r) /= nrm;
    }
    return make(std::move(out), {a.node()}, [norms = std::move(norms), eps](Node& n) {
        const Matrix& y = n.value;
        Matrix g(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            if (n.parents[0]->value.row(r).norm() < eps) {
                g.row(r) = n.grad.row(r) / eps;
            } else {
                const double dot = n.grad.row(r).dot(y.row(r));
                g.row(r) = (n.grad.row(r) - dot * y.row(r)) / norms(r);
            }
        }
        accumulate(*n.parents[0], g);
    });
}

Var sum(const Var& a) {
    return make(Matrix::Constant(1, 1, a.value().sum()), {a.node()}, [](Node& n) {
        const Matrix& x = n.parents[0]->value;
        accumulate(*n.parents[0], Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const double count = static_cast<double>(a.value().size());
    return make(Matrix::Constant(1, 1, a.value().mean()), {a.node()}, [count](Node& n) {
        const Matrix& x = n.parents[0]->value;
        accumulate(*n.parents[0], Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0) / count));
    });
}

Var mean_rows(const Var& a) {
    const double count = static_cast<double>(a.rows());
    return make(a.value().colwise().mean(), {a.node()}, [count](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix g = (n.grad / count).replicate(x.rows(), 1);
        accumulate(*n.parents[0], g);
    });
}

Var min_per_row(const Var& a, std::vector<Eigen::Index>* argmin) {
    const Matrix& x = a.value();
    if (x.cols() == 0) throw std::invalid_argument("min_per_row: no columns");
    std::vector<Eigen::Index> idx(static_cast<size_t>(x.rows()));
    Matrix out(x.rows(), 1);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < x.cols(); ++c) {
            if (x(r, c) < x(r, best)) best = c;
        }
        idx[static_cast<size_t>(r)] = best;
        out(r, 0) = x(r, best);
    }
    if (argmin) *argmin = idx;
    return make(std::move(out), {a.node()}, [idx](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) g(r, idx[static_cast<size_t>(r)]) = n.grad(r, 0);
        accumulate(*n.parents[0], g);
    });
}

Var max_all(const Var& a) {
    const Matrix& x = a.value();
    if (x.size() == 0) throw std::invalid_argument("max_all: empty input");
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < x.size(); ++i) {
        if (x(i) > x(best)) best = i;
    }
    return make(Matrix::Constant(1, 1, x(best)), {a.node()}, [best](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g(best) = n.grad(0, 0);
        accumulate(*n.parents[0], g);
    });
}

Var attention(const Var& q, const Var& k, const Var& v, int num_heads, Eigen::Index q_len, Eigen::Index kv_len,
              double scale) {
    const Eigen::Index dim = q.cols();
    if (k.cols() != dim || v.cols() != dim) throw std::invalid_argument("attention: q/k/v widths differ");
    if (num_heads < 1 || dim % num_heads != 0) throw std::invalid_argument("attention: heads must divide width");
    if (q_len < 1 || kv_len < 1 || q.rows() % q_len != 0 || k.rows() % kv_len != 0 || k.rows() != v.rows() ||
        q.rows() / q_len != k.rows() / kv_len) {
        throw std::invalid_argument("attention: sequence lengths inconsistent with operand rows");
    }
    const Eigen::Index seqs = q.rows() / q_len;
    const Eigen::Index hd = dim / num_heads;

    // Cached attention probabilities, one block per (sequence, head).
    std::vector<Matrix> probs(static_cast<size_t>(seqs * num_heads));
    Matrix out(q.rows(), dim);
    for (Eigen::Index s = 0; s < seqs; ++s) {
        for (int h = 0; h < num_heads; ++h) {
            const auto qb = q.value().block(s * q_len, h * hd, q_len, hd);
            const auto kb = k.value().block(s * kv_len, h * hd, kv_len, hd);
            const auto vb = v.value().block(s * kv_len, h * hd, kv_len, hd);
            Matrix a = (qb * kb.transpose()) * scale;
            for (Eigen::Index r = 0; r < a.rows(); ++r) {
                const double m = a.row(r).maxCoeff();
                a.row(r) = (a.row(r).array() - m).exp();
                a.row(r) /= a.row(r).sum();
            }
            out.block(s * q_len, h * hd, q_len, hd) = a * vb;
            probs[static_cast<size_t>(s * num_heads + h)] = std::move(a);
        }
    }
    return make(std::move(out), {q.node(), k.node(), v.node()},
                [probs = std::move(probs), seqs, num_heads, hd, q_len, kv_len, scale](Node& n) {
                    const Matrix& qv = n.parents[0]->value;
                    const Matrix& kv = n.parents[1]->value;
                    const Matrix& vv = n.parents[2]->value;
                    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
                    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
                    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
                    for (Eigen::Index s = 0; s < seqs; ++s) {
                        for (int h = 0; h < num_heads; ++h) {
                            const Matrix& a = probs[static_cast<size_t>(s * num_heads + h)];
                            const auto dout = n.grad.block(s * q_len, h * hd, q_len, hd);
                            const auto qb = qv.block(s * q_len, h * hd, q_len, hd);
                            const auto kb = kv.block(s * kv_len, h * hd, kv_len, hd);
                            const auto vb = vv.block(s * kv_len, h * hd, kv_len, hd);
                            dv.block(s * kv_len, h * hd, kv_len, hd) += a.transpose() * dout;
                            Matrix da = dout * vb.transpose();
                            for (Eigen::Index r = 0; r < da.rows(); ++r) {
                                const double dot = da.row(r).dot(a.row(r));
                                da.row(r) = a.row(r).cwiseProduct((da.row(r).array() - dot).matrix());
                            }
                            dq.block(s * q_len, h * hd, q_len, hd) += (da * kb) * scale;
                            dk.block(s * kv_len, h * hd, kv_len, hd) += (da.transpose() * qb) * scale;
                        }
                    }
                    accumulate(*n.parents[0], dq);
                    accumulate(*n.parents[1], dk);
                    accumulate(*n.parents[2], dv);
                });
}

Var rows(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("rows: slice out of range");
    return make(a.value().middleRows(start, count), {a.node()}, [start, count](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g.middleRows(start, count) = n.grad;
        accumulate(*n.parents[0], g);
    });
}

Var cols(const Var& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("cols: slice out of range");
    return make(a.value().middleCols(start, count), {a.node()}, [start, count](Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g.middleCols(start, count) = n.grad;
        accumulate(*n.parents[0], g);
    });
}

Var vstack(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("vstack: nothing to stack");
    Eigen::Index total = 0;
    const Eigen::Index c = parts.front().cols();
    std::vector<NodePtr> parents;
    for (const auto& p : parts) {
        if (p.cols() != c) throw std::invalid_argument("vstack: column counts differ");
        total += p.rows();
        parents.push_back(p.node());
    }
    Matrix out(total, c);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make(std::move(out), std::move(parents), [](Node& n) {
        Eigen::Index at = 0;
        for (auto& p : n.parents) {
            const Eigen::Index r = p->value.rows();
            if (p->requires_grad) accumulate(*p, n.grad.middleRows(at, r));
            at += r;
        }
    });
}

Var hstack(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("hstack: nothing to stack");
    Eigen::Index total = 0;
    const Eigen::Index r = parts.front().rows();
    std::vector<NodePtr> parents;
    for (const auto& p : parts) {
        if (p.rows() != r) throw std::invalid_argument("hstack: row counts differ");
        total += p.cols();
        parents.push_back(p.node());
    }
    Matrix out(r, total);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return make(std::move(out), std::move(parents), [](Node& n) {
        Eigen::Index at = 0;
        for (auto& p : n.parents) {
            const Eigen::Index c = p->value.cols();
            if (p->requires_grad) accumulate(*p, n.grad.middleCols(at, c));
            at += c;
        }
    });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }

void ParamBinder::set_trainable(const Matrix& m) {
    trainable_.insert(&m);
    leaves_.erase(&m);
}

Var ParamBinder::operator()(const Matrix& m) {
    auto it = leaves_.find(&m);
    if (it != leaves_.end()) return it->second;
    Var leaf(m, trainable_.contains(&m));
    leaves_.emplace(&m, leaf);
    return leaf;
}

Matrix ParamBinder::grad(const Matrix& m) const {
    auto it = leaves_.find(&m);
    if (it == leaves_.end() || it->second.grad().size() == 0) return Matrix::Zero(m.rows(), m.cols());
    return it->second.grad();
}

}  // namespace cops::ad
