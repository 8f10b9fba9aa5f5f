#pragma once

#include "pnet/operators.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <memory>

namespace pnet {

struct FactorizeOptions
{
    /// Diagonal shift is shift_scale * trace(L) / |V|.
    double shift_scale = 1e-8;
    /// Residual-correction passes against the unshifted Laplacian after each
    /// direct solve. Each pass shrinks the shift-induced bias by a factor of
    /// roughly shift / lambda_2.
    int refinement_steps = 1;
};

/// Shared factorization of the shifted Laplacian used for every Poisson solve
/// on one mesh. Immutable after construction and cheap to copy; concurrent
/// solves are safe.
class PoissonFactorization
{
public:
    PoissonFactorization(const SparseOperator& laplacian, const Eigen::VectorXd& mass_vertex,
                         const FactorizeOptions& options = {});

    /// Solves L u = rhs per column and removes the mass-weighted mean of u.
    VertexScalarField solve_centered(const VertexScalarField& rhs) const;

    /// Transpose of solve_centered: the gradient of a scalar loss with respect
    /// to the rhs, given its gradient with respect to the solution.
    VertexScalarField adjoint_solve(const VertexScalarField& cotangent) const;

    /// Centered Green's function column for source vertex j.
    Eigen::VectorXd greens_column(Eigen::Index j) const;

    Eigen::Index size() const;
    double shift() const;
    double total_mass() const;
    const Eigen::VectorXd& mass_vertex() const;
    int refinement_steps() const;
    /// True when the smallest LDL^T pivot is tiny relative to the largest.
    bool near_singular() const;

    /// Number of factorizations performed in this process.
    static std::size_t factorization_count();

private:
    struct Impl;
    std::shared_ptr<const Impl> impl_;

    Eigen::MatrixXd solve_raw(const Eigen::MatrixXd& rhs) const;
    void check_rhs(const Eigen::MatrixXd& rhs) const;
};

PoissonFactorization factorize(const SparseOperator& laplacian, const Eigen::VectorXd& mass_vertex,
                               double shift_scale = 1e-8);

/// Number of connected pieces in the sparsity graph of a square operator.
std::size_t sparsity_components(const SparseOperator& op);

} // namespace pnet
