#pragma once

#include "pnet/operators.hpp"
#include "pnet/poisson.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pnet {

/// Trainable real array with a same-shape gradient accumulator.
class Parameter
{
public:
    Parameter() = default;
    Parameter(std::string name, Eigen::MatrixXd value);

    std::string name;
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Eigen::Index size() const { return value.size(); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var
{
public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    int id() const { return id_; }
    const Eigen::MatrixXd& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode record of coarse primitives (whole matrix products, sparse
/// applies, Poisson solves). One tape per example and per thread.
class Tape
{
public:
    using Backward = std::function<void(const Eigen::MatrixXd& out_grad, Tape& tape)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Eigen::MatrixXd value);
    Var parameter(Parameter& p);
    /// Appends a node. `backward` receives d(loss)/d(this node) and must call
    /// accumulate() for each input that requires a gradient.
    Var record(Eigen::MatrixXd value, const std::vector<Var>& inputs, Backward backward);

    bool requires_grad(const Var& v) const;
    void accumulate(const Var& v, const Eigen::MatrixXd& delta);
    const Eigen::MatrixXd& value(const Var& v) const;

    /// Runs the reverse pass from a 1x1 node and adds into Parameter::grad.
    /// Each tape supports exactly one backward pass.
    void backward(const Var& loss);

    /// Folds the on/off pattern of a piecewise-linear activation into a
    /// running hash, so callers can tell when two evaluations straddle a kink.
    void note_activation_pattern(const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& active);
    std::uint64_t activation_signature() const { return signature_; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node
    {
        Eigen::MatrixXd value;
        Eigen::MatrixXd grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    void check_owned(const Var& v) const;

    std::deque<Node> nodes_;
    bool backward_done_ = false;
    std::uint64_t signature_ = 1469598103934665603ULL;
};

namespace ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sum(const Var& a);
/// x (n x in) W^T (in -> out) + bias row (1 x out). `bias` may be an invalid Var.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var relu(const Var& x);
Var softplus(const Var& x);
Var concat_cols(const std::vector<Var>& parts);
Var columns(const Var& x, Eigen::Index start, Eigen::Index count);
/// op * x. The operator must outlive the backward pass.
Var sparse_apply(const SparseOperator& op, const Var& x);
/// diag(weights) * x.
Var row_scale(const Var& x, const Eigen::VectorXd& weights);
/// weights^T x / sum(weights): 1 x C.
Var weighted_mean_rows(const Var& x, const Eigen::VectorXd& weights);
/// Complex matrix product on interleaved face fields: rows (2t, 2t+1) hold
/// (Re, Im) of face t; weight_re/weight_im are C_out x C_in.
Var complex_linear(const Var& f, const Var& weight_re, const Var& weight_im);
/// g * ReLU(|g| + b) / |g| per complex entry; output and gradient are 0 where |g| < 1e-12.
Var magnitude_gate(const Var& g, const Var& bias);
/// (softplus(gamma) + eps) * f * exp(i theta); gamma, theta are |F| x C.
Var modulate(const Var& f, const Var& gamma, const Var& theta, double eps);
/// Centered Poisson solve; backward uses the adjoint solve on the same factorization.
Var poisson_solve(const PoissonFactorization& fact, const Var& rhs);

/// sum_r w_r sum_c (pred - target)^2.
Var weighted_squared_error(const Var& pred, const Eigen::MatrixXd& target, const Eigen::VectorXd& row_weights);
/// Mean squared error over all entries; rows weighted by `row_weights` when non-empty.
Var mse(const Var& pred, const Eigen::MatrixXd& target, const Eigen::VectorXd& row_weights = {});
/// Softmax cross-entropy averaged over rows (weighted when row_weights is non-empty).
Var cross_entropy(const Var& logits, const std::vector<int>& labels, const Eigen::VectorXd& row_weights = {});

} // namespace ad

Eigen::MatrixXd even_rows(const Eigen::MatrixXd& stacked);
Eigen::MatrixXd odd_rows(const Eigen::MatrixXd& stacked);
Eigen::MatrixXd interleave_rows(const Eigen::MatrixXd& even, const Eigen::MatrixXd& odd);

double softplus(double x);
double sigmoid(double x);

struct GradCheckOptions
{
    double step = 1e-5;
    /// Threshold on the 90th percentile of relative errors.
    double tolerance = 1e-5;
    /// Threshold on the largest relative error.
    double max_tolerance = 1e-3;
    /// Denominator floor, relative to the largest analytic gradient entry.
    double floor_ratio = 1e-6;
    /// Skip coordinates whose +h / -h evaluations change an activation pattern.
    bool exclude_kinks = true;
};

struct GradCheckEntry
{
    std::string name;
    std::size_t checked = 0;
    std::size_t excluded = 0;
    double max_error = 0.0;
    double p90_error = 0.0;
};

struct GradCheckReport
{
    std::vector<GradCheckEntry> parameters;
    std::size_t checked = 0;
    std::size_t excluded = 0;
    double max_error = 0.0;
    double p90_error = 0.0;
    double tolerance = 0.0;
    double max_tolerance = 0.0;
    bool passed = false;

    nlohmann::json to_json() const;
};

using LossBuilder = std::function<Var(Tape&)>;

/// Central differences versus the reverse pass for every coordinate of every
/// parameter. `build` must be deterministic and must register the parameters
/// on the tape it receives.
GradCheckReport finite_diff_check(const LossBuilder& build, const std::vector<Parameter*>& params,
                                  const GradCheckOptions& options = {});

/// Runs one forward+backward pass; returns the loss value.
double evaluate_gradients(const LossBuilder& build, const std::vector<Parameter*>& params);

} // namespace pnet
