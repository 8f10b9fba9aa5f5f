#pragma once

#include "pnet/mesh.hpp"

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <complex>
#include <vector>

namespace pnet {

using SparseOperator = Eigen::SparseMatrix<double>;

/// |V| x C real scalar features on vertices.
using VertexScalarField = Eigen::MatrixXd;

/// Per-face orthonormal frames {u1, u2, n}, one row per face.
struct TangentFrames
{
    Eigen::MatrixX3d u1;
    Eigen::MatrixX3d u2;
    Eigen::MatrixX3d n;
};

/// |F| x C tangent vectors stored as interleaved real pairs: row 2t holds the
/// u1 coefficient and row 2t+1 the u2 coefficient of face t. This is exactly
/// the layout produced by multiplying the gradient operator with a vertex field.
struct FaceVectorField
{
    Eigen::MatrixXd stacked;

    FaceVectorField() = default;
    explicit FaceVectorField(Eigen::MatrixXd s) : stacked(std::move(s)) {}

    Eigen::Index num_faces() const { return stacked.rows() / 2; }
    Eigen::Index channels() const { return stacked.cols(); }

    std::complex<double> at(Eigen::Index face, Eigen::Index channel) const
    {
        return {stacked(2 * face, channel), stacked(2 * face + 1, channel)};
    }

    Eigen::MatrixXcd to_complex() const;
    static FaceVectorField from_complex(const Eigen::MatrixXcd& z);
};

struct DifferentialOperators
{
    TangentFrames frames;
    SparseOperator grad;         // 2|F| x |V|
    SparseOperator laplacian;    // |V| x |V|, positive semi-definite
    Eigen::VectorXd mass_vertex; // barycentric lumped areas
    Eigen::VectorXd mass_face;   // 2|F|, face area repeated for both components
    Eigen::VectorXd face_areas;
    SparseOperator face_average; // |F| x |V|, 1/3 per corner

    Eigen::Index num_vertices() const { return laplacian.rows(); }
    Eigen::Index num_faces() const { return face_areas.size(); }
    double total_mass() const { return mass_vertex.sum(); }
};

TangentFrames build_tangent_frames(const TriMesh& mesh);

/// Rotates frame t in its plane by angles[t]; coefficients of a fixed tangent
/// vector in the new frame are multiplied by exp(-i angles[t]).
TangentFrames rotate_frames(const TangentFrames& frames, const Eigen::VectorXd& angles);

SparseOperator build_gradient(const TriMesh& mesh, const TangentFrames& frames);
SparseOperator build_cotan_laplacian(const TriMesh& mesh);

struct MassMatrices
{
    Eigen::VectorXd mass_vertex;
    Eigen::VectorXd mass_face;
    Eigen::VectorXd face_areas;
};

MassMatrices build_mass_matrices(const TriMesh& mesh);
SparseOperator build_face_average(const TriMesh& mesh);

/// Assembles everything for one mesh. Throws MeshError on degenerate faces.
DifferentialOperators build_operators(const TriMesh& mesh);
DifferentialOperators build_operators(const TriMesh& mesh, const TangentFrames& frames);

/// grad^T M_F f, per channel.
VertexScalarField divergence_rhs(const DifferentialOperators& ops, const FaceVectorField& f);

FaceVectorField apply_gradient(const DifferentialOperators& ops, const VertexScalarField& s);

/// Mass-weighted mean of each column.
Eigen::RowVectorXd mass_weighted_mean(const Eigen::VectorXd& mass, const Eigen::MatrixXd& field);
Eigen::MatrixXd mass_centered(const Eigen::VectorXd& mass, const Eigen::MatrixXd& field);

struct Triplet
{
    Eigen::Index row;
    Eigen::Index col;
    double value;
};

std::vector<Triplet> to_triplets(const SparseOperator& op);
SparseOperator diagonal_operator(const Eigen::VectorXd& diag);

} // namespace pnet
