#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Var is a handle to a node in a dynamically built graph. Operations on
// Vars whose inputs do not require gradients produce plain constants and
// record nothing, so frozen forward passes cost no more than raw Eigen.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace cops {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace ad {

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

class Var {
public:
    Var() = default;
    explicit Var(Matrix value, bool requires_grad = false);

    const Matrix& value() const { return node_->value; }
    /// Accumulated gradient; empty when the node was not reached by backward().
    const Matrix& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double scalar() const;

    /// Seeds d(this)/d(this) = 1 and propagates. Requires a 1x1 value.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }

    static Var from_node(std::shared_ptr<Node> node);

private:
    std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
Var scalar(double v);
Var detach(const Var& x);

// Elementwise arithmetic; shapes must match exactly.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var one_minus(const Var& a);
/// a (any shape) times s (1x1).
Var mul_scalar(const Var& a, const Var& s);
/// Adds a 1xC row to every row of a (n x C).
Var add_row(const Var& a, const Var& row);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var pow(const Var& a, double p);
Var gelu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Each row divided by max(||row||, eps). Rows clamped this way are counted in *clamped.
Var normalize_rows(const Var& a, double eps = 1e-8, int* clamped = nullptr);

Var sum(const Var& a);
Var mean(const Var& a);
/// 1 x cols mean over rows.
Var mean_rows(const Var& a);

/// Per-row minimum as an n x 1 column; ties resolve to the first column.
Var min_per_row(const Var& a, std::vector<Eigen::Index>* argmin = nullptr);
/// Global maximum as 1x1; ties resolve to the first element in column-major order.
Var max_all(const Var& a);

/// Scaled dot-product attention over a batch of independent sequences.
/// q is (S*q_len) x D, k and v are (S*kv_len) x D; each of the num_heads heads
/// attends within its D/num_heads column block. Passing the same Var for q, k
/// and v is allowed (value-value attention).
Var attention(const Var& q, const Var& k, const Var& v, int num_heads, Eigen::Index q_len, Eigen::Index kv_len,
              double scale);

Var rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var vstack(const std::vector<Var>& parts);
Var hstack(const std::vector<Var>& parts);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);

/// Hands out graph leaves for parameter matrices. Matrices registered as
/// trainable become gradient-tracking leaves; everything else is a constant.
/// One binder per forward/backward pass; leaves are cached by address.
class ParamBinder {
public:
    void set_trainable(const Matrix& m);
    template <typename Range>
    void set_trainable_all(const Range& ms) {
        for (const Matrix* m : ms) set_trainable(*m);
    }
    bool is_trainable(const Matrix& m) const { return trainable_.contains(&m); }

    Var operator()(const Matrix& m);

    /// Gradient accumulated for m, or zeros of m's shape if none reached it.
    Matrix grad(const Matrix& m) const;
    /// Whether m was bound during the forward pass.
    bool reached(const Matrix& m) const { return leaves_.contains(&m); }

private:
    std::unordered_set<const Matrix*> trainable_;
    std::unordered_map<const Matrix*, Var> leaves_;
};

}  // namespace ad
}  // namespace cops
