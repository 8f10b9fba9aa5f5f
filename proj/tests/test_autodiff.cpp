#include "pnet/autodiff.hpp"
#include "pnet/errors.hpp"
#include "pnet/mesh.hpp"
#include "pnet/operators.hpp"
#include "pnet/poisson.hpp"

#include <doctest.h>

#include <random>

using namespace pnet;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, unsigned seed, double scale = 1.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

} // namespace

TEST_CASE("quadratic toy loss")
{
    Parameter a("a", random_matrix(3, 4, 1));
    Parameter b("b", random_matrix(3, 4, 2));
    const Eigen::MatrixXd target = random_matrix(3, 4, 3);
    auto build = [&](Tape& t) {
        const Var x = t.parameter(a), y = t.parameter(b);
        return ad::add(ad::mse(ad::add(x, ad::scale(y, 0.5)), target), ad::scale(ad::sum(ad::sub(x, y)), 0.25));
    };
    const GradCheckReport r = finite_diff_check(build, {&a, &b});
    CHECK(r.max_error < 1e-9);
    CHECK(r.passed);
}

TEST_CASE("independent parameter gets an exactly zero gradient")
{
    Parameter used("used", random_matrix(2, 2, 1));
    Parameter unused("unused", random_matrix(2, 2, 2));
    evaluate_gradients([&](Tape& t) { return ad::sum(ad::relu(t.parameter(used))); }, {&used, &unused});
    CHECK(unused.grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(used.grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("dense layers with relu and softplus")
{
    Parameter w1("w1", random_matrix(5, 3, 4)), b1("b1", random_matrix(1, 5, 5));
    Parameter w2("w2", random_matrix(2, 5, 6)), b2("b2", random_matrix(1, 2, 7));
    const Eigen::MatrixXd x = random_matrix(7, 3, 8);
    auto build = [&](Tape& t) {
        Var h = ad::relu(ad::linear(t.constant(x), t.parameter(w1), t.parameter(b1)));
        h = ad::softplus(ad::linear(h, t.parameter(w2), t.parameter(b2)));
        return ad::cross_entropy(h, {0, 1, 1, 0, 1, 0, 0});
    };
    const GradCheckReport r = finite_diff_check(build, {&w1, &b1, &w2, &b2});
    CHECK(r.p90_error < 1e-5);
    CHECK(r.max_error < 1e-3);
}

TEST_CASE("complex linear layer weights")
{
    Parameter re("re", random_matrix(4, 3, 9)), im("im", random_matrix(4, 3, 10));
    const Eigen::MatrixXd f = random_matrix(2 * 6, 3, 11);
    const Eigen::MatrixXd target = random_matrix(2 * 6, 4, 12);
    auto build = [&](Tape& t) { return ad::mse(ad::complex_linear(t.constant(f), t.parameter(re), t.parameter(im)), target); };
    const GradCheckReport r = finite_diff_check(build, {&re, &im});
    CHECK(r.max_error < 1e-6);
}

TEST_CASE("magnitude gate")
{
    Parameter re("re", random_matrix(4, 3, 13)), im("im", random_matrix(4, 3, 14));
    Parameter bias("bias", random_matrix(1, 4, 15, 0.3));
    const Eigen::MatrixXd f = random_matrix(2 * 10, 3, 16);
    const Eigen::MatrixXd target = random_matrix(2 * 10, 4, 17);
    auto build = [&](Tape& t) {
        const Var g = ad::complex_linear(t.constant(f), t.parameter(re), t.parameter(im));
        return ad::mse(ad::magnitude_gate(g, t.parameter(bias)), target);
    };
    const GradCheckReport r = finite_diff_check(build, {&re, &im, &bias});
    CHECK(r.p90_error < 1e-5);
    CHECK(r.max_error < 1e-3);
}

TEST_CASE("modulation through softplus and phase")
{
    Parameter gamma("gamma", random_matrix(8, 3, 18)), theta("theta", random_matrix(8, 3, 19));
    const Eigen::MatrixXd f = random_matrix(16, 3, 20);
    const Eigen::MatrixXd target = random_matrix(16, 3, 21);
    auto build = [&](Tape& t) {
        return ad::mse(ad::modulate(t.constant(f), t.parameter(gamma), t.parameter(theta), 1e-4), target);
    };
    const GradCheckReport r = finite_diff_check(build, {&gamma, &theta});
    CHECK(r.max_error < 1e-5);
}

TEST_CASE("modulation values")
{
    Tape t;
    const Eigen::MatrixXd f = (Eigen::MatrixXd(2, 1) << 3.0, 4.0).finished();
    const Var zero = ad::modulate(t.constant(f), t.constant(Eigen::MatrixXd::Zero(1, 1)),
                                  t.constant(Eigen::MatrixXd::Zero(1, 1)), 1e-4);
    CHECK((zero.value() - (std::log(2.0) + 1e-4) * f).norm() < 1e-14);

    const Var quarter = ad::modulate(t.constant(f), t.constant(Eigen::MatrixXd::Constant(1, 1, 0.7)),
                                     t.constant(Eigen::MatrixXd::Constant(1, 1, M_PI / 2)), 1e-4);
    const double s = softplus(0.7) + 1e-4;
    CHECK(std::abs(quarter.value()(0, 0) + 4.0 * s) < 1e-12);
    CHECK(std::abs(quarter.value()(1, 0) - 3.0 * s) < 1e-12);

    const Var none = ad::modulate(t.constant(Eigen::MatrixXd::Zero(2, 1)), t.constant(Eigen::MatrixXd::Ones(1, 1)),
                                  t.constant(Eigen::MatrixXd::Ones(1, 1)), 1e-4);
    CHECK(none.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("poisson solve node matches the adjoint")
{
    const DifferentialOperators ops = build_operators(make_icosphere(1));
    const PoissonFactorization fact(ops.laplacian, ops.mass_vertex);
    Parameter rhs("rhs", random_matrix(ops.num_vertices(), 2, 22));
    evaluate_gradients(
        [&](Tape& t) {
            const Var u = ad::poisson_solve(fact, t.parameter(rhs));
            return ad::scale(ad::weighted_squared_error(u, Eigen::MatrixXd::Zero(u.rows(), u.cols()),
                                                        Eigen::VectorXd::Ones(u.rows())),
                             0.5);
        },
        {&rhs});
    const Eigen::MatrixXd expected = fact.adjoint_solve(fact.solve_centered(rhs.value));
    CHECK((rhs.grad - expected).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, expected.cwiseAbs().maxCoeff()));

    const GradCheckReport r = finite_diff_check(
        [&](Tape& t) {
            const Var u = ad::poisson_solve(fact, t.parameter(rhs));
            return ad::sum(ad::sparse_apply(ops.grad, ad::row_scale(u, ops.mass_vertex)));
        },
        {&rhs});
    CHECK(r.p90_error < 1e-5);
}

TEST_CASE("pooling, concat, columns")
{
    Parameter x("x", random_matrix(6, 4, 23));
    const Eigen::VectorXd w = random_matrix(6, 1, 24).cwiseAbs();
    auto build = [&](Tape& t) {
        const Var v = t.parameter(x);
        const Var c = ad::concat_cols({ad::columns(v, 2, 2), v});
        const Var p = ad::weighted_mean_rows(c, w);
        return ad::cross_entropy(p, {3});
    };
    const GradCheckReport r = finite_diff_check(build, {&x});
    CHECK(r.max_error < 1e-6);
}

TEST_CASE("loss values")
{
    Tape t;
    const Var uniform = ad::cross_entropy(t.constant(Eigen::MatrixXd::Zero(2, 5)), {1, 4});
    CHECK(uniform.value()(0, 0) == doctest::Approx(std::log(5.0)).epsilon(1e-14));
    Eigen::MatrixXd sharp = Eigen::MatrixXd::Zero(1, 3);
    sharp(0, 2) = 60.0;
    CHECK(ad::cross_entropy(t.constant(sharp), {2}).value()(0, 0) < 1e-20);
    const Eigen::MatrixXd y = random_matrix(4, 2, 25);
    CHECK(ad::mse(t.constant(y), y).value()(0, 0) == 0.0);
    CHECK_THROWS_AS(ad::cross_entropy(t.constant(sharp), {3}), Error);
}

TEST_CASE("interleave helpers")
{
    const Eigen::MatrixXd m = random_matrix(8, 3, 26);
    CHECK(interleave_rows(even_rows(m), odd_rows(m)) == m);
    CHECK(even_rows(m).row(1) == m.row(2));
}

TEST_CASE("tape rejects a second backward pass")
{
    Parameter p("p", random_matrix(2, 2, 27));
    p.zero_grad();
    Tape t;
    const Var l = ad::sum(t.parameter(p));
    t.backward(l);
    CHECK_THROWS(t.backward(l));
}
