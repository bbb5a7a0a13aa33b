#include "cops/autodiff.hpp"

#include "test_util.hpp"

#include <doctest.h>

using namespace cops;
using testutil::gradient_rel_error;

namespace {

// Checks d(sum(w . f(x)))/dx against central differences for a random weighting w.
double op_grad_error(const std::function<ad::Var(const ad::Var&)>& f, Matrix x, std::uint64_t seed = 1) {
    Rng rng(seed);
    const Matrix probe = f(ad::constant(x)).value();
    const Matrix w = testutil::randn(probe.rows(), probe.cols(), rng);
    auto loss_of = [&](const Matrix& at) { return (f(ad::constant(at)).value().array() * w.array()).sum(); };

    ad::Var leaf(x, true);
    ad::sum(ad::mul(f(leaf), ad::constant(w))).backward();
    const Matrix analytic = leaf.grad();
    return gradient_rel_error(x, analytic, [&] { return loss_of(x); });
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(3);
    const Matrix x = testutil::randn(3, 4, rng);
    const Matrix pos = testutil::uniform(3, 4, rng, 0.5, 2.0);
    const Matrix other = testutil::randn(3, 4, rng);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::exp(a); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::log(a); }, pos) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::pow(a, 1.7); }, pos) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::gelu(a); }, x) < 1e-7);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::mul(a, ad::constant(other)); }, x) < 1e-7);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::div(ad::constant(other), a); }, pos) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::one_minus(ad::scale(a, 3.0)); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::clamp(a, -0.5, 0.5); }, x) < 1e-6);
}

TEST_CASE("matrix ops match finite differences") {
    Rng rng(4);
    const Matrix x = testutil::randn(3, 4, rng);
    const Matrix b = testutil::randn(4, 2, rng);
    const Matrix row = testutil::randn(1, 4, rng);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::matmul(a, ad::constant(b)); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::transpose(a); }, x) < 1e-7);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::add_row(a, ad::constant(row)); }, x) < 1e-7);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::add_row(ad::constant(x), a); }, row) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::softmax_rows(a); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::normalize_rows(a); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::mean_rows(a); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::min_per_row(a); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::max_all(a); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::rows(a, 1, 2); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::cols(a, 1, 2); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::vstack({a, ad::scale(a, 2.0)}); }, x) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::hstack({a, ad::exp(a)}); }, x) < 1e-7);
    const Matrix gamma = testutil::randn(1, 4, rng), beta = testutil::randn(1, 4, rng);
    CHECK(op_grad_error(
              [&](const ad::Var& a) { return ad::layer_norm_rows(a, ad::constant(gamma), ad::constant(beta)); }, x) <
          1e-6);
}

TEST_CASE("multi-head attention matches finite differences in q, k and v") {
    Rng rng(5);
    const Matrix q = testutil::randn(6, 4, rng), k = testutil::randn(8, 4, rng), v = testutil::randn(8, 4, rng);
    // Two sequences: 3 queries over 4 keys each, two heads.
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::attention(a, ad::constant(k), ad::constant(v), 2, 3, 4, 0.7); },
                        q) < 1e-7);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::attention(ad::constant(q), a, ad::constant(v), 2, 3, 4, 0.7); },
                        k) < 1e-7);
    CHECK(op_grad_error([&](const ad::Var& a) { return ad::attention(ad::constant(q), ad::constant(k), a, 2, 3, 4, 0.7); },
                        v) < 1e-7);
    CHECK(op_grad_error([](const ad::Var& a) { return ad::attention(a, a, a, 2, 4, 4, 0.5); }, k) < 1e-7);
}

TEST_CASE("constants record no graph and binder hands out cached leaves") {
    Matrix w = Matrix::Ones(2, 2);
    Matrix frozen = Matrix::Ones(2, 2);
    ad::ParamBinder bind;
    bind.set_trainable(w);
    ad::Var a = bind(w);
    ad::Var b = bind(w);
    CHECK(a.node() == b.node());
    CHECK(a.requires_grad());
    CHECK_FALSE(bind(frozen).requires_grad());
    CHECK_FALSE(ad::exp(bind(frozen)).requires_grad());

    ad::sum(ad::mul(a, bind(frozen))).backward();
    CHECK(bind.grad(w).isApprox(Matrix::Ones(2, 2)));
    CHECK(bind.grad(frozen).isZero());
    CHECK(bind.reached(w));
    Matrix unused = Matrix::Ones(1, 1);
    CHECK_FALSE(bind.reached(unused));
}

TEST_CASE("detach cuts the gradient path") {
    Matrix w = Matrix::Constant(1, 1, 2.0);
    ad::ParamBinder bind;
    bind.set_trainable(w);
    ad::Var x = bind(w);
    ad::Var y = ad::add(ad::mul(x, x), ad::mul(ad::detach(x), x));
    y.backward();
    // d/dx (x^2 + c x) = 2x + c with c = x held constant.
    CHECK(bind.grad(w)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("shape errors are rejected") {
    CHECK_THROWS_AS(ad::add(ad::constant(Matrix::Zero(2, 2)), ad::constant(Matrix::Zero(2, 3))), std::invalid_argument);
    CHECK_THROWS_AS(ad::matmul(ad::constant(Matrix::Zero(2, 2)), ad::constant(Matrix::Zero(3, 3))), std::invalid_argument);
    CHECK_THROWS(ad::constant(Matrix::Zero(2, 2)).backward());
}
