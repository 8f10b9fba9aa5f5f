#include "pnet/errors.hpp"
#include "pnet/mesh.hpp"
#include "pnet/operators.hpp"
#include "pnet/training.hpp"

#include <doctest.h>

#include <Eigen/Geometry>

#include <random>

using namespace pnet;

namespace {

double coeff(const SparseOperator& op, Eigen::Index r, Eigen::Index c)
{
    return op.coeff(r, c);
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, unsigned seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

std::vector<TriMesh> test_meshes()
{
    return {make_unit_square(), make_icosphere(2), make_torus(12, 8), make_box(2), make_cylinder(10, 6, 0.3, 1.0),
            make_grid(5, 4, 1.0, 2.0, true), jitter_vertices(make_icosphere(1), 0.02, 4)};
}

} // namespace

TEST_CASE("frames: axis-aligned triangle")
{
    TriMesh m;
    m.vertices.resize(3, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 0, 1, 0;
    m.faces.resize(1, 3);
    m.faces << 0, 1, 2;
    const TangentFrames f = build_tangent_frames(m);
    CHECK((f.u1.row(0) - Eigen::RowVector3d(1, 0, 0)).norm() < 1e-15);
    CHECK((f.u2.row(0) - Eigen::RowVector3d(0, 1, 0)).norm() < 1e-15);
    CHECK((f.n.row(0) - Eigen::RowVector3d(0, 0, 1)).norm() < 1e-15);

    const DifferentialOperators ops = build_operators(m);
    const Eigen::MatrixXd g = ops.grad * m.vertices.col(0);
    CHECK(std::abs(g(0) - 1.0) < 1e-14);
    CHECK(std::abs(g(1)) < 1e-14);
}

TEST_CASE("frames: orthonormal and rotation-equivariant")
{
    const TriMesh m = make_torus(12, 8);
    const TangentFrames f = build_tangent_frames(m);
    for (Eigen::Index t = 0; t < m.num_faces(); ++t) {
        CHECK(std::abs(f.u1.row(t).norm() - 1) < 1e-12);
        CHECK(std::abs(f.u2.row(t).norm() - 1) < 1e-12);
        CHECK(std::abs(f.u1.row(t).dot(f.u2.row(t))) < 1e-12);
        CHECK((f.u1.row(t).cross(f.u2.row(t)) - f.n.row(t)).norm() < 1e-12);
    }
    const Eigen::Matrix3d r = random_rotation(9);
    const TangentFrames fr = build_tangent_frames(transformed(m, r));
    CHECK((fr.u1 - f.u1 * r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fr.u2 - f.u2 * r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((fr.n - f.n * r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradient: constants and affine fields")
{
    const TriMesh grid = make_grid(4, 3, 2.0, 1.5, true);
    const DifferentialOperators ops = build_operators(grid);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(grid.num_vertices());
    CHECK((ops.grad * ones).cwiseAbs().maxCoeff() < 1e-14);

    const Eigen::VectorXd s = 2 * grid.vertices.col(0) + 3 * grid.vertices.col(1);
    const Eigen::VectorXd g = ops.grad * s;
    // grid frames are not guaranteed axis-aligned, so compare in world space
    for (Eigen::Index t = 0; t < grid.num_faces(); ++t) {
        const Eigen::RowVector3d world = g(2 * t) * ops.frames.u1.row(t) + g(2 * t + 1) * ops.frames.u2.row(t);
        CHECK((world - Eigen::RowVector3d(2, 3, 0)).norm() < 1e-12);
    }
}

TEST_CASE("laplacian: unit square weights")
{
    const DifferentialOperators ops = build_operators(make_unit_square());
    const SparseOperator& L = ops.laplacian;
    CHECK(coeff(L, 0, 1) == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(coeff(L, 1, 2) == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(coeff(L, 2, 3) == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(coeff(L, 0, 3) == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(std::abs(coeff(L, 0, 2)) < 1e-15);
}

TEST_CASE("laplacian: equilateral triangle")
{
    TriMesh m;
    m.vertices.resize(3, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 0.5, std::sqrt(3.0) / 2, 0;
    m.faces.resize(1, 3);
    m.faces << 0, 1, 2;
    const SparseOperator L = build_cotan_laplacian(m);
    const double expected = -1.0 / (2.0 * std::sqrt(3.0));
    CHECK(coeff(L, 0, 1) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(coeff(L, 1, 2) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(coeff(L, 2, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("laplacian: identity with gradient and mass, nullspace, symmetry")
{
    for (const TriMesh& m : test_meshes()) {
        const DifferentialOperators ops = build_operators(m);
        const SparseOperator gtmg = SparseOperator(ops.grad.transpose()) * diagonal_operator(ops.mass_face) * ops.grad;
        CHECK(Eigen::MatrixXd(ops.laplacian - gtmg).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((ops.laplacian * Eigen::VectorXd::Ones(m.num_vertices())).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(Eigen::MatrixXd(ops.laplacian - SparseOperator(ops.laplacian.transpose())).cwiseAbs().maxCoeff() == 0.0);
        CHECK(std::abs(ops.mass_vertex.sum() - ops.face_areas.sum()) < 1e-10);
    }
}

TEST_CASE("mass: unit square lumping and duplication")
{
    const DifferentialOperators ops = build_operators(make_unit_square());
    CHECK(ops.mass_vertex(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(ops.mass_vertex.sum() == doctest::Approx(1.0).epsilon(1e-15));
    for (Eigen::Index t = 0; t < ops.num_faces(); ++t) {
        CHECK(ops.mass_face(2 * t) == ops.face_areas(t));
        CHECK(ops.mass_face(2 * t + 1) == ops.face_areas(t));
    }
    CHECK(Eigen::MatrixXd(ops.face_average).rowwise().sum().isApprox(Eigen::VectorXd::Ones(2)));
}

TEST_CASE("divergence_rhs: identity, zero, closed-surface sum")
{
    const TriMesh m = make_icosphere(2);
    const DifferentialOperators ops = build_operators(m);
    const Eigen::MatrixXd s = random_matrix(m.num_vertices(), 3, 1);
    const Eigen::MatrixXd lhs = divergence_rhs(ops, apply_gradient(ops, s));
    CHECK((lhs - ops.laplacian * s).cwiseAbs().maxCoeff() < 1e-10);

    const FaceVectorField zero(Eigen::MatrixXd::Zero(2 * ops.num_faces(), 2));
    CHECK(divergence_rhs(ops, zero).cwiseAbs().maxCoeff() == 0.0);

    const FaceVectorField f(random_matrix(2 * ops.num_faces(), 4, 2));
    CHECK(divergence_rhs(ops, f).colwise().sum().cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("face field complex conversion")
{
    const FaceVectorField f(random_matrix(10, 3, 3));
    const Eigen::MatrixXcd z = f.to_complex();
    CHECK(z(2, 1) == f.at(2, 1));
    CHECK(FaceVectorField::from_complex(z).stacked == f.stacked);
}

TEST_CASE("intrinsic quantities under rigid motion and scale")
{
    const TriMesh m = jitter_vertices(make_torus(12, 8), 0.01, 2);
    const DifferentialOperators ops = build_operators(m);
    const Eigen::Matrix3d r = random_rotation(4);
    const DifferentialOperators moved = build_operators(transformed(m, r, Eigen::RowVector3d(0.3, -2.0, 1.0)));
    CHECK(Eigen::MatrixXd(moved.laplacian - ops.laplacian).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((moved.mass_vertex - ops.mass_vertex).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((moved.mass_face - ops.mass_face).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((moved.face_areas - ops.face_areas).cwiseAbs().maxCoeff() < 1e-10);

    const Eigen::VectorXd s = random_matrix(m.num_vertices(), 1, 5);
    const Eigen::VectorXd g0 = ops.grad * s, g1 = moved.grad * s;
    for (Eigen::Index t = 0; t < ops.num_faces(); ++t) {
        CHECK(std::abs(std::hypot(g0(2 * t), g0(2 * t + 1)) - std::hypot(g1(2 * t), g1(2 * t + 1))) < 1e-9);
    }

    const double c = 2.5;
    const DifferentialOperators scaled = build_operators(transformed(m, c * Eigen::Matrix3d::Identity()));
    CHECK(Eigen::MatrixXd(scaled.laplacian - ops.laplacian).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((scaled.mass_vertex - c * c * ops.mass_vertex).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("frame rotation multiplies coefficients by a phase")
{
    const TriMesh m = make_icosphere(1);
    const DifferentialOperators ops = build_operators(m);
    Eigen::VectorXd angles = random_matrix(m.num_faces(), 1, 7);
    const DifferentialOperators rot = build_operators(m, rotate_frames(ops.frames, angles));
    const Eigen::VectorXd s = random_matrix(m.num_vertices(), 1, 8);
    const Eigen::MatrixXcd a = apply_gradient(ops, s).to_complex();
    const Eigen::MatrixXcd b = apply_gradient(rot, s).to_complex();
    for (Eigen::Index t = 0; t < m.num_faces(); ++t) {
        CHECK(std::abs(b(t, 0) - a(t, 0) * std::polar(1.0, -angles(t))) < 1e-12);
    }
}

TEST_CASE("degenerate faces are rejected")
{
    TriMesh m;
    m.vertices.resize(3, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 2, 0, 0;
    m.faces.resize(1, 3);
    m.faces << 0, 1, 2;
    CHECK_THROWS_AS(build_operators(m), MeshError);
}

TEST_CASE("mass-weighted mean and centering")
{
    const Eigen::VectorXd w = (Eigen::VectorXd(3) << 1, 2, 3).finished();
    const Eigen::MatrixXd f = (Eigen::MatrixXd(3, 1) << 6, 0, 2).finished();
    CHECK(mass_weighted_mean(w, f)(0) == doctest::Approx(2.0));
    CHECK(std::abs(w.dot(mass_centered(w, f).col(0))) < 1e-14);
}

TEST_CASE("triplets round trip")
{
    const DifferentialOperators ops = build_operators(make_unit_square());
    const auto t = to_triplets(ops.grad);
    CHECK(static_cast<Eigen::Index>(t.size()) == ops.grad.nonZeros());
    SparseOperator r(ops.grad.rows(), ops.grad.cols());
    std::vector<Eigen::Triplet<double>> e;
    for (const Triplet& x : t) e.emplace_back(x.row, x.col, x.value);
    r.setFromTriplets(e.begin(), e.end());
    CHECK(Eigen::MatrixXd(r - ops.grad).cwiseAbs().maxCoeff() == 0.0);
}
