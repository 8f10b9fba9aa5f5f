#include "pnet/operators.hpp"

#include "pnet/errors.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <string>

namespace pnet {

namespace {

using Vec3 = Eigen::Vector3d;

Vec3 corner(const TriMesh& mesh, Eigen::Index face, int k)
{
    return mesh.vertices.row(mesh.faces(face, k)).transpose();
}

[[noreturn]] void throw_degenerate(Eigen::Index face, const char* why)
{
    throw MeshError("degenerate face " + std::to_string(face) + ": " + why);
}

void check_face(const TriMesh& mesh, Eigen::Index t, double eps)
{
    const Vec3 a = corner(mesh, t, 0), b = corner(mesh, t, 1), c = corner(mesh, t, 2);
    if ((b - a).norm() == 0.0 || (c - b).norm() == 0.0 || (a - c).norm() == 0.0) {
        throw_degenerate(t, "zero-length edge");
    }
    if (0.5 * (b - a).cross(c - a).norm() <= eps) throw_degenerate(t, "zero area");
}

} // namespace

Eigen::MatrixXcd FaceVectorField::to_complex() const
{
    Eigen::MatrixXcd z(num_faces(), channels());
    for (Eigen::Index c = 0; c < channels(); ++c) {
        for (Eigen::Index t = 0; t < num_faces(); ++t) z(t, c) = {stacked(2 * t, c), stacked(2 * t + 1, c)};
    }
    return z;
}

FaceVectorField FaceVectorField::from_complex(const Eigen::MatrixXcd& z)
{
    Eigen::MatrixXd s(2 * z.rows(), z.cols());
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
        for (Eigen::Index t = 0; t < z.rows(); ++t) {
            s(2 * t, c) = z(t, c).real();
            s(2 * t + 1, c) = z(t, c).imag();
        }
    }
    return FaceVectorField(std::move(s));
}

TangentFrames build_tangent_frames(const TriMesh& mesh)
{
    const Eigen::Index nf = mesh.num_faces();
    const double eps = area_epsilon(mesh);
    TangentFrames fr;
    fr.u1.resize(nf, 3);
    fr.u2.resize(nf, 3);
    fr.n.resize(nf, 3);
    for (Eigen::Index t = 0; t < nf; ++t) {
        check_face(mesh, t, eps);
        const Vec3 a = corner(mesh, t, 0), b = corner(mesh, t, 1), c = corner(mesh, t, 2);
        const Vec3 u1 = (b - a).normalized();
        const Vec3 n = (b - a).cross(c - a).normalized();
        fr.u1.row(t) = u1.transpose();
        fr.n.row(t) = n.transpose();
        fr.u2.row(t) = n.cross(u1).transpose();
    }
    return fr;
}

TangentFrames rotate_frames(const TangentFrames& frames, const Eigen::VectorXd& angles)
{
    if (angles.size() != frames.u1.rows()) throw DimensionError("one rotation angle per face expected");
    TangentFrames out = frames;
    for (Eigen::Index t = 0; t < angles.size(); ++t) {
        const double c = std::cos(angles[t]), s = std::sin(angles[t]);
        out.u1.row(t) = c * frames.u1.row(t) + s * frames.u2.row(t);
        out.u2.row(t) = -s * frames.u1.row(t) + c * frames.u2.row(t);
    }
    return out;
}

SparseOperator build_gradient(const TriMesh& mesh, const TangentFrames& frames)
{
    const Eigen::Index nf = mesh.num_faces();
    if (frames.u1.rows() != nf) throw DimensionError("frames were built for a different mesh");
    const double eps = area_epsilon(mesh);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(6 * nf));
    for (Eigen::Index t = 0; t < nf; ++t) {
        check_face(mesh, t, eps);
        const Vec3 p[3] = {corner(mesh, t, 0), corner(mesh, t, 1), corner(mesh, t, 2)};
        const Vec3 n = frames.n.row(t).transpose();
        const double twice_area = (p[1] - p[0]).cross(p[2] - p[0]).norm();
        const Vec3 u1 = frames.u1.row(t).transpose(), u2 = frames.u2.row(t).transpose();
        for (int k = 0; k < 3; ++k) {
            // Hat-function gradient: rotate the opposite edge by 90 degrees in-plane.
            const Vec3 opposite = p[(k + 2) % 3] - p[(k + 1) % 3];
            const Vec3 g = n.cross(opposite) / twice_area;
            const int v = mesh.faces(t, k);
            trip.emplace_back(static_cast<int>(2 * t), v, g.dot(u1));
            trip.emplace_back(static_cast<int>(2 * t + 1), v, g.dot(u2));
        }
    }
    SparseOperator grad(2 * nf, mesh.num_vertices());
    grad.setFromTriplets(trip.begin(), trip.end());
    return grad;
}

SparseOperator build_cotan_laplacian(const TriMesh& mesh)
{
    const Eigen::Index nf = mesh.num_faces();
    const double eps = area_epsilon(mesh);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(12 * nf));
    for (Eigen::Index t = 0; t < nf; ++t) {
        check_face(mesh, t, eps);
        for (int k = 0; k < 3; ++k) {
            const int i = mesh.faces(t, (k + 1) % 3), j = mesh.faces(t, (k + 2) % 3);
            const Vec3 o = corner(mesh, t, k);
            const Vec3 e1 = corner(mesh, t, (k + 1) % 3) - o, e2 = corner(mesh, t, (k + 2) % 3) - o;
            const double half_cot = 0.5 * e1.dot(e2) / e1.cross(e2).norm();
            trip.emplace_back(i, j, -half_cot);
            trip.emplace_back(j, i, -half_cot);
            trip.emplace_back(i, i, half_cot);
            trip.emplace_back(j, j, half_cot);
        }
    }
    SparseOperator L(mesh.num_vertices(), mesh.num_vertices());
    L.setFromTriplets(trip.begin(), trip.end());
    return L;
}

MassMatrices build_mass_matrices(const TriMesh& mesh)
{
    MassMatrices m;
    m.face_areas = face_areas(mesh);
    m.mass_vertex = Eigen::VectorXd::Zero(mesh.num_vertices());
    m.mass_face.resize(2 * mesh.num_faces());
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        for (int k = 0; k < 3; ++k) m.mass_vertex[mesh.faces(t, k)] += m.face_areas[t] / 3.0;
        m.mass_face[2 * t] = m.face_areas[t];
        m.mass_face[2 * t + 1] = m.face_areas[t];
    }
    return m;
}

SparseOperator build_face_average(const TriMesh& mesh)
{
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(3 * mesh.num_faces()));
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        for (int k = 0; k < 3; ++k) trip.emplace_back(static_cast<int>(t), mesh.faces(t, k), 1.0 / 3.0);
    }
    SparseOperator A(mesh.num_faces(), mesh.num_vertices());
    A.setFromTriplets(trip.begin(), trip.end());
    return A;
}

DifferentialOperators build_operators(const TriMesh& mesh)
{
    return build_operators(mesh, build_tangent_frames(mesh));
}

DifferentialOperators build_operators(const TriMesh& mesh, const TangentFrames& frames)
{
    DifferentialOperators ops;
    ops.frames = frames;
    ops.grad = build_gradient(mesh, frames);
    ops.laplacian = build_cotan_laplacian(mesh);
    MassMatrices m = build_mass_matrices(mesh);
    ops.mass_vertex = std::move(m.mass_vertex);
    ops.mass_face = std::move(m.mass_face);
    ops.face_areas = std::move(m.face_areas);
    ops.face_average = build_face_average(mesh);
    return ops;
}

VertexScalarField divergence_rhs(const DifferentialOperators& ops, const FaceVectorField& f)
{
    if (f.stacked.rows() != ops.grad.rows()) {
        throw DimensionError("face field has " + std::to_string(f.num_faces()) + " faces, mesh has " +
                             std::to_string(ops.num_faces()));
    }
    return ops.grad.transpose() * (ops.mass_face.asDiagonal() * f.stacked);
}

FaceVectorField apply_gradient(const DifferentialOperators& ops, const VertexScalarField& s)
{
    if (s.rows() != ops.grad.cols()) throw DimensionError("vertex field size does not match mesh");
    return FaceVectorField(ops.grad * s);
}

Eigen::RowVectorXd mass_weighted_mean(const Eigen::VectorXd& mass, const Eigen::MatrixXd& field)
{
    if (field.rows() != mass.size()) throw DimensionError("field rows do not match mass size");
    return (mass.transpose() * field) / mass.sum();
}

Eigen::MatrixXd mass_centered(const Eigen::VectorXd& mass, const Eigen::MatrixXd& field)
{
    return field.rowwise() - mass_weighted_mean(mass, field);
}

std::vector<Triplet> to_triplets(const SparseOperator& op)
{
    Eigen::SparseMatrix<double, Eigen::RowMajor> csr = op;
    std::vector<Triplet> out;
    out.reserve(static_cast<std::size_t>(csr.nonZeros()));
    for (Eigen::Index r = 0; r < csr.outerSize(); ++r) {
        for (decltype(csr)::InnerIterator it(csr, r); it; ++it) out.push_back({it.row(), it.col(), it.value()});
    }
    return out;
}

SparseOperator diagonal_operator(const Eigen::VectorXd& diag)
{
    SparseOperator D(diag.size(), diag.size());
    std::vector<Eigen::Triplet<double>> trip;
    for (Eigen::Index i = 0; i < diag.size(); ++i) trip.emplace_back(static_cast<int>(i), static_cast<int>(i), diag[i]);
    D.setFromTriplets(trip.begin(), trip.end());
    return D;
}

} // namespace pnet
