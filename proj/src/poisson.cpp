#include "pnet/poisson.hpp"

#include "pnet/errors.hpp"

#include <Eigen/SparseCholesky>

#include <atomic>
#include <string>

namespace pnet {

namespace {

std::atomic<std::size_t> g_factorizations{0};

constexpr double kNearSingularRatio = 1e-12;

} // namespace

struct PoissonFactorization::Impl
{
    SparseOperator laplacian;
    Eigen::SimplicialLDLT<SparseOperator, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt;
    Eigen::VectorXd mass_vertex;
    double total_mass = 0.0;
    double shift = 0.0;
    int refinement_steps = 0;
    bool near_singular = false;
};

std::size_t sparsity_components(const SparseOperator& op)
{
    const Eigen::Index n = op.rows();
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    std::vector<Eigen::Index> stack;
    std::size_t count = 0;
    for (Eigen::Index seed = 0; seed < n; ++seed) {
        if (comp[static_cast<std::size_t>(seed)] >= 0) continue;
        comp[static_cast<std::size_t>(seed)] = static_cast<int>(count);
        stack.push_back(seed);
        while (!stack.empty()) {
            const Eigen::Index v = stack.back();
            stack.pop_back();
            for (SparseOperator::InnerIterator it(op, v); it; ++it) {
                auto& c = comp[static_cast<std::size_t>(it.row())];
                if (c < 0) {
                    c = static_cast<int>(count);
                    stack.push_back(it.row());
                }
            }
        }
        ++count;
    }
    return count;
}

PoissonFactorization::PoissonFactorization(const SparseOperator& laplacian,
                                           const Eigen::VectorXd& mass_vertex,
                                           const FactorizeOptions& options)
{
    const Eigen::Index n = laplacian.rows();
    if (laplacian.cols() != n || mass_vertex.size() != n) {
        throw DimensionError("Laplacian and mass matrix sizes disagree");
    }
    if (n == 0) throw DimensionError("cannot factorize an empty Laplacian");
    if ((mass_vertex.array() <= 0.0).any()) throw FactorizationError("vertex masses must be positive");
    const std::size_t pieces = sparsity_components(laplacian);
    if (pieces > 1) {
        throw MeshError("mesh has " + std::to_string(pieces) +
                        " connected components; the Poisson solve requires exactly one");
    }

    auto impl = std::make_shared<Impl>();
    impl->laplacian = laplacian;
    impl->mass_vertex = mass_vertex;
    impl->total_mass = mass_vertex.sum();
    impl->refinement_steps = options.refinement_steps;
    impl->shift = options.shift_scale * laplacian.diagonal().sum() / static_cast<double>(n);

    SparseOperator shifted = laplacian;
    for (Eigen::Index i = 0; i < n; ++i) shifted.coeffRef(i, i) += impl->shift;
    impl->ldlt.compute(shifted);
    ++g_factorizations;
    if (impl->ldlt.info() != Eigen::Success) {
        throw FactorizationError("sparse LDL^T factorization failed (zero pivot)");
    }
    const Eigen::VectorXd& d = impl->ldlt.vectorD();
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (!(d[i] > 0.0)) {
            throw FactorizationError("matrix is not positive definite: pivot " + std::to_string(i) +
                                     " of the permuted system is " + std::to_string(d[i]) +
                                     " (leading minor of order " + std::to_string(i + 1) + ")");
        }
    }
    impl->near_singular = d.minCoeff() < kNearSingularRatio * d.maxCoeff();
    impl_ = std::move(impl);
}

void PoissonFactorization::check_rhs(const Eigen::MatrixXd& rhs) const
{
    if (rhs.rows() != size()) {
        throw DimensionError("rhs has " + std::to_string(rhs.rows()) + " rows, expected " +
                             std::to_string(size()));
    }
    if (!rhs.allFinite()) throw Error("Poisson rhs contains non-finite values");
}

Eigen::MatrixXd PoissonFactorization::solve_raw(const Eigen::MatrixXd& rhs) const
{
    // constants only shift the solution by a multiple of 1, which centering removes
    Eigen::MatrixXd b = rhs;
    b.rowwise() -= b.colwise().mean();
    Eigen::MatrixXd x = impl_->ldlt.solve(b);
    for (int k = 0; k < impl_->refinement_steps; ++k) {
        const Eigen::MatrixXd residual = b - impl_->laplacian * x;
        x += impl_->ldlt.solve(residual);
    }
    return x;
}

VertexScalarField PoissonFactorization::solve_centered(const VertexScalarField& rhs) const
{
    check_rhs(rhs);
    return mass_centered(impl_->mass_vertex, solve_raw(rhs));
}

VertexScalarField PoissonFactorization::adjoint_solve(const VertexScalarField& cotangent) const
{
    check_rhs(cotangent);
    // solve_centered = P K Q with P = I - 1 m^T / M, Q = I - 1 1^T / n and K
    // symmetric, so the adjoint is Q K P^T.
    const Eigen::RowVectorXd sums = cotangent.colwise().sum();
    const Eigen::MatrixXd projected = cotangent - (impl_->mass_vertex / impl_->total_mass) * sums;
    Eigen::MatrixXd out = solve_raw(projected);
    out.rowwise() -= out.colwise().mean();
    return out;
}

Eigen::VectorXd PoissonFactorization::greens_column(Eigen::Index j) const
{
    if (j < 0 || j >= size()) {
        throw DimensionError("vertex " + std::to_string(j) + " outside [0, " + std::to_string(size()) + ")");
    }
    Eigen::VectorXd rhs = -impl_->mass_vertex / impl_->total_mass;
    rhs[j] += 1.0;
    return solve_centered(rhs);
}

Eigen::Index PoissonFactorization::size() const { return impl_->laplacian.rows(); }
double PoissonFactorization::shift() const { return impl_->shift; }
double PoissonFactorization::total_mass() const { return impl_->total_mass; }
const Eigen::VectorXd& PoissonFactorization::mass_vertex() const { return impl_->mass_vertex; }
int PoissonFactorization::refinement_steps() const { return impl_->refinement_steps; }
bool PoissonFactorization::near_singular() const { return impl_->near_singular; }
std::size_t PoissonFactorization::factorization_count() { return g_factorizations.load(); }

PoissonFactorization factorize(const SparseOperator& laplacian, const Eigen::VectorXd& mass_vertex,
                               double shift_scale)
{
    FactorizeOptions opt;
    opt.shift_scale = shift_scale;
    return PoissonFactorization(laplacian, mass_vertex, opt);
}

} // namespace pnet
