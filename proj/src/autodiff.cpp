#include "pnet/autodiff.hpp"

#include "pnet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pnet {

namespace {

void require_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
    }
}

constexpr double kMagnitudeGuard = 1e-12;

using BoolArray = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

} // namespace

Parameter::Parameter(std::string n, Eigen::MatrixXd v)
    : name(std::move(n))
    , value(std::move(v))
    , grad(Eigen::MatrixXd::Zero(value.rows(), value.cols()))
{}

const Eigen::MatrixXd& Var::value() const
{
    return tape_->value(*this);
}

void Tape::check_owned(const Var& v) const
{
    if (!v.valid() || &v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
        throw Error("variable does not belong to this tape");
    }
}

Var Tape::constant(Eigen::MatrixXd value)
{
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(Parameter& p)
{
    Node n;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Eigen::MatrixXd value, const std::vector<Var>& inputs, Backward backward)
{
    bool needs = false;
    for (const Var& in : inputs) {
        if (!in.valid()) continue;
        check_owned(in);
        needs = needs || nodes_[static_cast<std::size_t>(in.id())].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

bool Tape::requires_grad(const Var& v) const
{
    return v.valid() && nodes_[static_cast<std::size_t>(v.id())].requires_grad;
}

const Eigen::MatrixXd& Tape::value(const Var& v) const
{
    check_owned(v);
    return nodes_[static_cast<std::size_t>(v.id())].value;
}

void Tape::accumulate(const Var& v, const Eigen::MatrixXd& delta)
{
    if (!requires_grad(v)) return;
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.size() == 0) {
        n.grad = delta;
    } else {
        n.grad += delta;
    }
}

void Tape::backward(const Var& loss)
{
    if (nodes_.empty() || !loss.valid()) throw Error("backward called before any forward pass was recorded");
    check_owned(loss);
    if (backward_done_) throw Error("backward already ran on this tape");
    const Node& root = nodes_[static_cast<std::size_t>(loss.id())];
    if (root.value.size() != 1) {
        throw DimensionError("backward needs a scalar loss, got " + std::to_string(root.value.rows()) + "x" +
                             std::to_string(root.value.cols()));
    }
    backward_done_ = true;
    if (!root.requires_grad) return;
    nodes_[static_cast<std::size_t>(loss.id())].grad = Eigen::MatrixXd::Ones(1, 1);
    for (int id = loss.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) continue;
        if (n.backward) n.backward(n.grad, *this);
        if (n.param) {
            if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols()) {
                n.param->zero_grad();
            }
            n.param->grad += n.grad;
        }
        n.grad.resize(0, 0);
    }
}

void Tape::note_activation_pattern(const BoolArray& active)
{
    std::uint64_t h = signature_;
    for (Eigen::Index i = 0; i < active.size(); ++i) {
        h ^= static_cast<std::uint64_t>(active.data()[i]) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    signature_ = h;
}

double softplus(double x)
{
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x)
{
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Eigen::MatrixXd even_rows(const Eigen::MatrixXd& stacked)
{
    const Eigen::Index n = stacked.rows() / 2;
    Eigen::MatrixXd out(n, stacked.cols());
    for (Eigen::Index c = 0; c < stacked.cols(); ++c) {
        for (Eigen::Index t = 0; t < n; ++t) out(t, c) = stacked(2 * t, c);
    }
    return out;
}

Eigen::MatrixXd odd_rows(const Eigen::MatrixXd& stacked)
{
    const Eigen::Index n = stacked.rows() / 2;
    Eigen::MatrixXd out(n, stacked.cols());
    for (Eigen::Index c = 0; c < stacked.cols(); ++c) {
        for (Eigen::Index t = 0; t < n; ++t) out(t, c) = stacked(2 * t + 1, c);
    }
    return out;
}

Eigen::MatrixXd interleave_rows(const Eigen::MatrixXd& even, const Eigen::MatrixXd& odd)
{
    Eigen::MatrixXd out(2 * even.rows(), even.cols());
    for (Eigen::Index c = 0; c < even.cols(); ++c) {
        for (Eigen::Index t = 0; t < even.rows(); ++t) {
            out(2 * t, c) = even(t, c);
            out(2 * t + 1, c) = odd(t, c);
        }
    }
    return out;
}

namespace ad {

Var add(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "add");
    return a.tape().record(a.value() + b.value(), {a, b}, [a, b](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "sub");
    return a.tape().record(a.value() - b.value(), {a, b}, [a, b](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

Var scale(const Var& a, double s)
{
    return a.tape().record(s * a.value(), {a},
                           [a, s](const Eigen::MatrixXd& g, Tape& t) { t.accumulate(a, s * g); });
}

Var sum(const Var& a)
{
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = a.value().sum();
    return a.tape().record(std::move(v), {a}, [a](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(a, Eigen::MatrixXd::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias)
{
    const Eigen::MatrixXd& X = x.value();
    const Eigen::MatrixXd& W = weight.value();
    if (X.cols() != W.cols()) {
        throw DimensionError("linear: input width " + std::to_string(X.cols()) +
                             " does not match weight columns " + std::to_string(W.cols()));
    }
    Eigen::MatrixXd y = X * W.transpose();
    if (bias.valid()) {
        if (bias.rows() != 1 || bias.cols() != W.rows()) throw DimensionError("linear: bias must be 1 x out");
        y.rowwise() += bias.value().row(0);
    }
    return x.tape().record(std::move(y), {x, weight, bias},
                           [x, weight, bias](const Eigen::MatrixXd& g, Tape& t) {
                               if (t.requires_grad(x)) t.accumulate(x, g * weight.value());
                               if (t.requires_grad(weight)) t.accumulate(weight, g.transpose() * x.value());
                               if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                           });
}

Var relu(const Var& x)
{
    BoolArray active = x.value().array() > 0.0;
    x.tape().note_activation_pattern(active);
    Eigen::MatrixXd y = x.value().cwiseMax(0.0);
    return x.tape().record(std::move(y), {x}, [x, active = std::move(active)](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(x, active.select(g, 0.0).matrix());
    });
}

Var softplus(const Var& x)
{
    Eigen::MatrixXd y = x.value().unaryExpr([](double v) { return pnet::softplus(v); });
    return x.tape().record(std::move(y), {x}, [x](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(x, g.cwiseProduct(x.value().unaryExpr([](double v) { return pnet::sigmoid(v); })));
    });
}

Var concat_cols(const std::vector<Var>& parts)
{
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
        cols += p.cols();
    }
    Eigen::MatrixXd y(rows, cols);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        y.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return parts.front().tape().record(std::move(y), parts, [parts](const Eigen::MatrixXd& g, Tape& t) {
        Eigen::Index offset = 0;
        for (const Var& p : parts) {
            const Eigen::Index c = p.cols();
            if (t.requires_grad(p)) t.accumulate(p, g.middleCols(offset, c));
            offset += c;
        }
    });
}

Var columns(const Var& x, Eigen::Index start, Eigen::Index count)
{
    if (start < 0 || count < 0 || start + count > x.cols()) throw DimensionError("columns: range out of bounds");
    return x.tape().record(x.value().middleCols(start, count), {x},
                           [x, start, count](const Eigen::MatrixXd& g, Tape& t) {
                               Eigen::MatrixXd full = Eigen::MatrixXd::Zero(x.rows(), x.cols());
                               full.middleCols(start, count) = g;
                               t.accumulate(x, full);
                           });
}

Var sparse_apply(const SparseOperator& op, const Var& x)
{
    if (op.cols() != x.rows()) {
        throw DimensionError("sparse_apply: operator has " + std::to_string(op.cols()) + " columns, field has " +
                             std::to_string(x.rows()) + " rows");
    }
    const SparseOperator* ptr = &op;
    return x.tape().record(op * x.value(), {x}, [x, ptr](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(x, ptr->transpose() * g);
    });
}

Var row_scale(const Var& x, const Eigen::VectorXd& weights)
{
    if (weights.size() != x.rows()) throw DimensionError("row_scale: weight count does not match rows");
    return x.tape().record(weights.asDiagonal() * x.value(), {x}, [x, weights](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(x, weights.asDiagonal() * g);
    });
}

Var weighted_mean_rows(const Var& x, const Eigen::VectorXd& weights)
{
    if (weights.size() != x.rows()) throw DimensionError("weighted_mean_rows: weight count does not match rows");
    const double total = weights.sum();
    Eigen::MatrixXd y = (weights.transpose() * x.value()) / total;
    return x.tape().record(std::move(y), {x}, [x, weights, total](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(x, (weights / total) * g.row(0));
    });
}

Var complex_linear(const Var& f, const Var& weight_re, const Var& weight_im)
{
    require_same_shape(weight_re.value(), weight_im.value(), "complex_linear weights");
    if (f.rows() % 2 != 0) throw DimensionError("complex_linear: face field must have an even row count");
    if (f.cols() != weight_re.cols()) {
        throw DimensionError("complex_linear: field has " + std::to_string(f.cols()) + " channels, weight expects " +
                             std::to_string(weight_re.cols()));
    }
    const Eigen::MatrixXd fr = even_rows(f.value()), fi = odd_rows(f.value());
    const Eigen::MatrixXd& wr = weight_re.value();
    const Eigen::MatrixXd& wi = weight_im.value();
    const Eigen::MatrixXd gr = fr * wr.transpose() - fi * wi.transpose();
    const Eigen::MatrixXd gi = fr * wi.transpose() + fi * wr.transpose();
    return f.tape().record(interleave_rows(gr, gi), {f, weight_re, weight_im},
                           [f, weight_re, weight_im](const Eigen::MatrixXd& g, Tape& t) {
                               const Eigen::MatrixXd dr = even_rows(g), di = odd_rows(g);
                               const Eigen::MatrixXd& wr = weight_re.value();
                               const Eigen::MatrixXd& wi = weight_im.value();
                               if (t.requires_grad(f)) t.accumulate(f, interleave_rows(dr * wr + di * wi, -dr * wi + di * wr));
                               if (t.requires_grad(weight_re) || t.requires_grad(weight_im)) {
                                   const Eigen::MatrixXd fr = even_rows(f.value()), fi = odd_rows(f.value());
                                   t.accumulate(weight_re, dr.transpose() * fr + di.transpose() * fi);
                                   t.accumulate(weight_im, -dr.transpose() * fi + di.transpose() * fr);
                               }
                           });
}

Var magnitude_gate(const Var& g, const Var& bias)
{
    const Eigen::MatrixXd& G = g.value();
    if (G.rows() % 2 != 0) throw DimensionError("magnitude_gate: face field must have an even row count");
    if (bias.rows() != 1 || bias.cols() != G.cols()) throw DimensionError("magnitude_gate: bias must be 1 x C");
    const Eigen::Index nf = G.rows() / 2, nc = G.cols();
    const Eigen::RowVectorXd& b = bias.value().row(0);
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(G.rows(), nc);
    BoolArray active(nf, nc);
    for (Eigen::Index c = 0; c < nc; ++c) {
        for (Eigen::Index t = 0; t < nf; ++t) {
            const double re = G(2 * t, c), im = G(2 * t + 1, c);
            const double r = std::hypot(re, im);
            const bool on = r >= kMagnitudeGuard && r + b[c] > 0.0;
            active(t, c) = on;
            if (on) {
                const double s = (r + b[c]) / r;
                y(2 * t, c) = s * re;
                y(2 * t + 1, c) = s * im;
            }
        }
    }
    g.tape().note_activation_pattern(active);
    return g.tape().record(std::move(y), {g, bias}, [g, bias, active = std::move(active)](const Eigen::MatrixXd& dy, Tape& t) {
        const Eigen::MatrixXd& G = g.value();
        const Eigen::RowVectorXd& b = bias.value().row(0);
        const Eigen::Index nf = G.rows() / 2, nc = G.cols();
        Eigen::MatrixXd dg = Eigen::MatrixXd::Zero(G.rows(), nc);
        Eigen::MatrixXd db = Eigen::MatrixXd::Zero(1, nc);
        for (Eigen::Index c = 0; c < nc; ++c) {
            for (Eigen::Index f = 0; f < nf; ++f) {
                if (!active(f, c)) continue;
                const double re = G(2 * f, c), im = G(2 * f + 1, c);
                const double r = std::hypot(re, im);
                const double proj = dy(2 * f, c) * re + dy(2 * f + 1, c) * im;
                // d/dg [g (r + b) / r] = (r + b)/r I - b/r^3 g g^T
                const double s = (r + b[c]) / r, k = -b[c] / (r * r * r);
                dg(2 * f, c) = s * dy(2 * f, c) + k * proj * re;
                dg(2 * f + 1, c) = s * dy(2 * f + 1, c) + k * proj * im;
                db(0, c) += proj / r;
            }
        }
        t.accumulate(g, dg);
        t.accumulate(bias, db);
    });
}

Var modulate(const Var& f, const Var& gamma, const Var& theta, double eps)
{
    const Eigen::MatrixXd& F = f.value();
    require_same_shape(gamma.value(), theta.value(), "modulate gamma/theta");
    if (F.rows() != 2 * gamma.rows() || F.cols() != gamma.cols()) {
        throw DimensionError("modulate: gamma/theta must be |F| x C for the face field");
    }
    const Eigen::Index nf = gamma.rows(), nc = gamma.cols();
    Eigen::MatrixXd y(F.rows(), nc);
    for (Eigen::Index c = 0; c < nc; ++c) {
        for (Eigen::Index t = 0; t < nf; ++t) {
            const double s = pnet::softplus(gamma.value()(t, c)) + eps;
            const double co = std::cos(theta.value()(t, c)), si = std::sin(theta.value()(t, c));
            const double re = F(2 * t, c), im = F(2 * t + 1, c);
            y(2 * t, c) = s * (re * co - im * si);
            y(2 * t + 1, c) = s * (re * si + im * co);
        }
    }
    return f.tape().record(std::move(y), {f, gamma, theta}, [f, gamma, theta, eps](const Eigen::MatrixXd& dy, Tape& t) {
        const Eigen::MatrixXd& F = f.value();
        const Eigen::Index nf = gamma.rows(), nc = gamma.cols();
        Eigen::MatrixXd df(F.rows(), nc), dgamma(nf, nc), dtheta(nf, nc);
        for (Eigen::Index c = 0; c < nc; ++c) {
            for (Eigen::Index k = 0; k < nf; ++k) {
                const double gm = gamma.value()(k, c);
                const double s = pnet::softplus(gm) + eps;
                const double co = std::cos(theta.value()(k, c)), si = std::sin(theta.value()(k, c));
                const double re = F(2 * k, c), im = F(2 * k + 1, c);
                const double dr = dy(2 * k, c), di = dy(2 * k + 1, c);
                const double rot_re = re * co - im * si, rot_im = re * si + im * co;
                df(2 * k, c) = s * (dr * co + di * si);
                df(2 * k + 1, c) = s * (-dr * si + di * co);
                dgamma(k, c) = pnet::sigmoid(gm) * (dr * rot_re + di * rot_im);
                dtheta(k, c) = s * (-dr * rot_im + di * rot_re);
            }
        }
        t.accumulate(f, df);
        t.accumulate(gamma, dgamma);
        t.accumulate(theta, dtheta);
    });
}

Var poisson_solve(const PoissonFactorization& fact, const Var& rhs)
{
    return rhs.tape().record(fact.solve_centered(rhs.value()), {rhs}, [rhs, fact](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(rhs, fact.adjoint_solve(g));
    });
}

Var weighted_squared_error(const Var& pred, const Eigen::MatrixXd& target, const Eigen::VectorXd& row_weights)
{
    require_same_shape(pred.value(), target, "weighted_squared_error");
    if (row_weights.size() != target.rows()) throw DimensionError("weighted_squared_error: one weight per row expected");
    const Eigen::MatrixXd diff = pred.value() - target;
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = (row_weights.asDiagonal() * diff.cwiseAbs2()).sum();
    return pred.tape().record(std::move(v), {pred}, [pred, diff, row_weights](const Eigen::MatrixXd& g, Tape& t) {
        t.accumulate(pred, 2.0 * g(0, 0) * (row_weights.asDiagonal() * diff));
    });
}

Var mse(const Var& pred, const Eigen::MatrixXd& target, const Eigen::VectorXd& row_weights)
{
    require_same_shape(pred.value(), target, "mse");
    const Eigen::VectorXd w = row_weights.size() == 0 ? Eigen::VectorXd::Ones(target.rows()) : row_weights;
    if (w.size() != target.rows()) throw DimensionError("mse: one weight per row expected");
    const double norm = w.sum() * static_cast<double>(target.cols());
    return scale(weighted_squared_error(pred, target, w), 1.0 / norm);
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels, const Eigen::VectorXd& row_weights)
{
    const Eigen::MatrixXd& Z = logits.value();
    if (static_cast<Eigen::Index>(labels.size()) != Z.rows()) throw DimensionError("cross_entropy: one label per row expected");
    const Eigen::VectorXd w = row_weights.size() == 0 ? Eigen::VectorXd::Ones(Z.rows()) : row_weights;
    if (w.size() != Z.rows()) throw DimensionError("cross_entropy: one weight per row expected");
    const double total = w.sum();
    Eigen::MatrixXd prob(Z.rows(), Z.cols());
    double loss = 0.0;
    for (Eigen::Index r = 0; r < Z.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= Z.cols()) {
            throw Error("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(Z.cols()) + ")");
        }
        const double mx = Z.row(r).maxCoeff();
        const Eigen::RowVectorXd e = (Z.row(r).array() - mx).exp().matrix();
        const double z = e.sum();
        prob.row(r) = e / z;
        loss += w[r] * (std::log(z) + mx - Z(r, y));
    }
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = loss / total;
    return logits.tape().record(std::move(v), {logits}, [logits, prob, labels, w, total](const Eigen::MatrixXd& g, Tape& t) {
        Eigen::MatrixXd d = prob;
        for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
        t.accumulate(logits, (g(0, 0) / total) * (w.asDiagonal() * d));
    });
}

} // namespace ad

nlohmann::json GradCheckReport::to_json() const
{
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : parameters) {
        params.push_back({{"name", p.name},
                          {"checked", p.checked},
                          {"excluded", p.excluded},
                          {"maxRelError", p.max_error},
                          {"p90RelError", p.p90_error}});
    }
    return {{"parameters", params},
            {"checked", checked},
            {"excluded", excluded},
            {"maxRelError", max_error},
            {"p90RelError", p90_error},
            {"tolerance", tolerance},
            {"maxTolerance", max_tolerance},
            {"passed", passed}};
}

double evaluate_gradients(const LossBuilder& build, const std::vector<Parameter*>& params)
{
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
    return loss.value()(0, 0);
}

namespace {

double percentile90(std::vector<double> v)
{
    if (v.empty()) return 0.0;
    const auto k = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(v.size()))) - 1;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

} // namespace

GradCheckReport finite_diff_check(const LossBuilder& build, const std::vector<Parameter*>& params,
                                  const GradCheckOptions& options)
{
    evaluate_gradients(build, params);
    std::vector<Eigen::MatrixXd> analytic;
    double largest = 0.0;
    for (Parameter* p : params) {
        analytic.push_back(p->grad);
        if (p->grad.size() > 0) largest = std::max(largest, p->grad.cwiseAbs().maxCoeff());
    }
    const double floor = std::max(options.floor_ratio * largest, 1e-300);

    auto probe = [&](std::uint64_t& signature) {
        Tape tape;
        Var loss = build(tape);
        signature = tape.activation_signature();
        return loss.value()(0, 0);
    };

    GradCheckReport report;
    report.tolerance = options.tolerance;
    report.max_tolerance = options.max_tolerance;
    std::vector<double> all;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        GradCheckEntry entry;
        entry.name = p.name;
        std::vector<double> errs;
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const double saved = p.value.data()[i];
            std::uint64_t sig_plus = 0, sig_minus = 0;
            p.value.data()[i] = saved + options.step;
            const double lp = probe(sig_plus);
            p.value.data()[i] = saved - options.step;
            const double lm = probe(sig_minus);
            p.value.data()[i] = saved;
            if (options.exclude_kinks && sig_plus != sig_minus) {
                ++entry.excluded;
                continue;
            }
            const double numeric = (lp - lm) / (2.0 * options.step);
            const double a = analytic[k].data()[i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            errs.push_back(err);
            entry.max_error = std::max(entry.max_error, err);
        }
        entry.checked = errs.size();
        entry.p90_error = percentile90(errs);
        report.checked += entry.checked;
        report.excluded += entry.excluded;
        report.max_error = std::max(report.max_error, entry.max_error);
        all.insert(all.end(), errs.begin(), errs.end());
        report.parameters.push_back(std::move(entry));
    }
    // Leave the caller's gradients as the analytic ones.
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad = analytic[k];
    report.p90_error = percentile90(all);
    report.passed = report.checked > 0 && report.p90_error < options.tolerance &&
                    report.max_error < options.max_tolerance;
    return report;
}

} // namespace pnet
