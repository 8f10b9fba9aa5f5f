#include "pnet/analysis.hpp"

#include "pnet/errors.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace pnet {

double SpectrumReport::high_frequency_fraction(Eigen::Index first_mode) const
{
    const double total = max_power.sum();
    if (total <= 0.0 || first_mode > k) return 0.0;
    const Eigen::Index start = std::max<Eigen::Index>(first_mode - 1, 0);
    return max_power.tail(k - start).sum() / total;
}

double SpectrumReport::mean_channel_high_frequency_fraction(Eigen::Index first_mode) const
{
    if (first_mode > k) return 0.0;
    const Eigen::Index start = std::max<Eigen::Index>(first_mode - 1, 0);
    double acc = 0.0;
    int used = 0;
    for (Eigen::Index c = 0; c < per_channel_power.cols(); ++c) {
        if (zero_channels[static_cast<std::size_t>(c)]) continue;
        acc += per_channel_power.col(c).tail(k - start).sum();
        ++used;
    }
    return used ? acc / used : 0.0;
}

nlohmann::json SpectrumReport::to_json() const
{
    nlohmann::json per = nlohmann::json::array();
    for (Eigen::Index c = 0; c < per_channel_power.cols(); ++c) {
        per.push_back(std::vector<double>(per_channel_power.col(c).data(), per_channel_power.col(c).data() + k));
    }
    std::vector<int> zeros;
    for (std::size_t c = 0; c < zero_channels.size(); ++c) {
        if (zero_channels[c]) zeros.push_back(static_cast<int>(c));
    }
    return {{"K", k},
            {"channels", per_channel_power.cols()},
            {"meshId", mesh_id},
            {"layerTag", layer_tag},
            {"maxPower", std::vector<double>(max_power.data(), max_power.data() + max_power.size())},
            {"perChannelPower", per},
            {"zeroChannels", zeros}};
}

SpectrumReport power_spectrum(const Eigen::MatrixXd& features, const Eigenbasis& eigen,
                              const Eigen::VectorXd& mass_vertex, std::string mesh_id, std::string layer_tag)
{
    if (features.rows() != eigen.vectors.rows() || mass_vertex.size() != features.rows()) {
        throw DimensionError("features have " + std::to_string(features.rows()) + " rows but the eigenbasis has " +
                             std::to_string(eigen.vectors.rows()));
    }
    if (!features.allFinite()) throw Error("features contain non-finite values");
    SpectrumReport r;
    r.k = eigen.size();
    r.mesh_id = std::move(mesh_id);
    r.layer_tag = std::move(layer_tag);
    r.coefficients = eigen.vectors.transpose() * mass_vertex.asDiagonal() * features;
    r.per_channel_power = r.coefficients.cwiseAbs2();
    r.zero_channels.assign(static_cast<std::size_t>(features.cols()), false);
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
        const double total = r.per_channel_power.col(c).sum();
        if (total > 0.0) {
            r.per_channel_power.col(c) /= total;
        } else {
            r.zero_channels[static_cast<std::size_t>(c)] = true;
        }
    }
    r.max_power = features.cols() > 0 ? Eigen::VectorXd(r.per_channel_power.rowwise().maxCoeff())
                                      : Eigen::VectorXd::Zero(r.k);
    return r;
}

Eigen::MatrixXd truncate_spectrum(const Eigen::MatrixXd& features, const Eigenbasis& eigen,
                                  const Eigen::VectorXd& mass_vertex, Eigen::Index k)
{
    if (k < 0 || k > eigen.size()) throw DimensionError("truncation size outside the eigenbasis");
    const Eigen::MatrixXd coeff = eigen.vectors.leftCols(k).transpose() * mass_vertex.asDiagonal() * features;
    return eigen.vectors.leftCols(k) * coeff;
}

std::string Perturbation::tag() const
{
    std::ostringstream s;
    switch (kind) {
    case Kind::None: return "none";
    case Kind::Subdivide: return "subdivide";
    case Kind::Jitter: s << "jitter(" << amount << ")"; return s.str();
    case Kind::Partial: s << "partial(" << amount << ")"; return s.str();
    case Kind::External: return "external-decimated(" + path + ")";
    }
    return "?";
}

Perturbation Perturbation::parse(const std::string& spec, std::uint64_t seed)
{
    Perturbation p;
    p.seed = seed;
    const auto colon = spec.find(':');
    const std::string name = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    auto number = [&]() {
        try {
            std::size_t used = 0;
            const double v = std::stod(arg, &used);
            if (used != arg.size()) throw std::invalid_argument(arg);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("perturbation '" + spec + "' needs a numeric argument");
        }
    };
    if (name == "none") {
        p.kind = Kind::None;
    } else if (name == "subdivide") {
        p.kind = Kind::Subdivide;
    } else if (name == "jitter") {
        p.kind = Kind::Jitter;
        p.amount = number();
        if (p.amount < 0.0) throw ConfigError("jitter sigma must be >= 0");
    } else if (name == "partial") {
        p.kind = Kind::Partial;
        p.amount = number();
        if (p.amount < 0.0 || p.amount >= 1.0) throw ConfigError("partial fraction must be in [0, 1)");
    } else if (name == "external") {
        p.kind = Kind::External;
        p.path = arg;
        if (p.path.empty()) throw ConfigError("external perturbation needs a mesh path");
    } else {
        throw ConfigError("unknown perturbation '" + spec + "'");
    }
    return p;
}

nlohmann::json RobustnessEntry::to_json() const
{
    nlohmann::json j = {{"perturbation", perturbation}, {"skipped", skipped}};
    if (skipped) {
        j["reason"] = reason;
        return j;
    }
    j["correspondence"] = correspondence;
    j["sharedVertices"] = shared_vertices;
    j["perturbedVertices"] = perturbed_vertices;
    j["relativeL2"] = relative_l2;
    j["agreement"] = agreement ? nlohmann::json(*agreement) : nlohmann::json(nullptr);
    return j;
}

nlohmann::json RobustnessReport::to_json() const
{
    nlohmann::json e = nlohmann::json::array();
    for (const auto& x : entries) e.push_back(x.to_json());
    return {{"meshId", mesh_id}, {"head", head}, {"entries", e}};
}

std::vector<Eigen::Index> nearest_vertices(const Eigen::MatrixXd& query, const Eigen::MatrixXd& reference)
{
    if (reference.rows() == 0) throw DimensionError("nearest-vertex matching needs a non-empty reference");
    std::vector<Eigen::Index> out(static_cast<std::size_t>(query.rows()));
    for (Eigen::Index i = 0; i < query.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        Eigen::Index arg = 0;
        for (Eigen::Index j = 0; j < reference.rows(); ++j) {
            const double d = (reference.row(j) - query.row(i)).squaredNorm();
            if (d < best) {
                best = d;
                arg = j;
            }
        }
        out[static_cast<std::size_t>(i)] = arg;
    }
    return out;
}

namespace {

Eigen::MatrixXd run_network(PoissonNet& net, const MeshContext& ctx, const Eigen::RowVectorXd& condition)
{
    const NetworkConfig& cfg = net.config();
    Eigen::MatrixXd cond(ctx.ops.num_vertices(), 0);
    if (cfg.conditional_width > 0) {
        if (condition.size() != cfg.conditional_width) {
            throw DimensionError("network expects " + std::to_string(cfg.conditional_width) + " condition values");
        }
        cond = broadcast_condition(condition, ctx.ops.num_vertices());
    }
    return net.predict(ctx, network_inputs(cfg, ctx), cond);
}

Eigen::Index argmax_row(const Eigen::MatrixXd& m, Eigen::Index r)
{
    Eigen::Index arg = 0;
    m.row(r).maxCoeff(&arg);
    return arg;
}

} // namespace

RobustnessReport robustness_report(PoissonNet& net, const TriMesh& mesh, const std::vector<Perturbation>& perturbations,
                                   const Eigen::RowVectorXd& condition, std::string mesh_id)
{
    const HeadKind head = net.config().head.kind;
    RobustnessReport report;
    report.mesh_id = std::move(mesh_id);
    report.head = to_string(head);
    const MeshContext base_ctx(mesh);
    const Eigen::MatrixXd base = run_network(net, base_ctx, condition);
    const bool per_vertex = head != HeadKind::Classification;
    const bool labels = head == HeadKind::Classification || head == HeadKind::Segmentation;

    for (const Perturbation& p : perturbations) {
        RobustnessEntry e;
        e.perturbation = p.tag();
        TriMesh pert;
        bool keeps_ids = true;
        switch (p.kind) {
        case Perturbation::Kind::None: pert = mesh; break;
        case Perturbation::Kind::Subdivide: pert = subdivide_midpoint(mesh); break;
        case Perturbation::Kind::Jitter:
            pert = jitter_vertices(mesh, p.amount * bounding_box_diagonal(mesh), p.seed);
            break;
        case Perturbation::Kind::Partial:
            pert = drop_faces(mesh, p.amount, p.seed).mesh;
            keeps_ids = false;
            break;
        case Perturbation::Kind::External:
            pert = p.mesh ? *p.mesh : load_obj(p.path);
            keeps_ids = false;
            break;
        }
        Eigen::MatrixXd out;
        try {
            std::size_t pieces = 0;
            connected_component_ids(pert, &pieces);
            if (pieces != 1) throw MeshError("perturbed mesh has " + std::to_string(pieces) + " connected components");
            const MeshContext ctx(pert);
            out = run_network(net, ctx, condition);
        } catch (const MeshError& err) {
            e.skipped = true;
            e.reason = err.what();
            report.entries.push_back(std::move(e));
            continue;
        }
        e.perturbed_vertices = pert.num_vertices();
        Eigen::MatrixXd lhs, rhs;
        if (!per_vertex) {
            e.correspondence = "global";
            e.shared_vertices = 0;
            lhs = out;
            rhs = base;
        } else if (keeps_ids) {
            e.correspondence = "identity";
            e.shared_vertices = static_cast<std::size_t>(mesh.num_vertices());
            lhs = out.topRows(mesh.num_vertices());
            rhs = base;
        } else {
            e.correspondence = "nearest-vertex";
            const auto nn = nearest_vertices(pert.vertices, mesh.vertices);
            e.shared_vertices = nn.size();
            lhs = out;
            rhs.resize(out.rows(), base.cols());
            for (std::size_t i = 0; i < nn.size(); ++i) rhs.row(static_cast<Eigen::Index>(i)) = base.row(nn[i]);
        }
        const double denom = rhs.norm();
        e.relative_l2 = denom > 0.0 ? (lhs - rhs).norm() / denom : (lhs - rhs).norm();
        if (labels) {
            std::size_t same = 0;
            for (Eigen::Index r = 0; r < lhs.rows(); ++r) same += argmax_row(lhs, r) == argmax_row(rhs, r) ? 1 : 0;
            e.agreement = static_cast<double>(same) / static_cast<double>(lhs.rows());
        }
        report.entries.push_back(std::move(e));
    }
    return report;
}

GradCheckReport network_gradcheck(const TriMesh& mesh, const NetworkGradCheckSetup& setup,
                                  const GradCheckOptions& options)
{
    NetworkConfig cfg;
    cfg.block_count = setup.blocks;
    cfg.width = setup.width;
    cfg.vec_mlp_depth = setup.vec_mlp_depth;
    cfg.conditional_width = setup.conditional_width;
    cfg.head.kind = setup.head;
    cfg.head.outputs = setup.head == HeadKind::Njf ? 3 : 4;
    PoissonNet net(cfg, setup.seed);
    net.perturb(setup.perturb, setup.seed + 1);

    const MeshContext ctx(mesh);
    const Eigen::MatrixXd& x = mesh.vertices;
    Eigen::RowVectorXd condition(setup.conditional_width);
    for (int i = 0; i < setup.conditional_width; ++i) condition[i] = 0.3 - 0.5 * i;
    const Eigen::MatrixXd cond = broadcast_condition(condition, mesh.num_vertices());

    const Eigen::RowVector3d center = x.colwise().mean();
    std::vector<int> labels(static_cast<std::size_t>(mesh.num_vertices()));
    for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) {
        labels[static_cast<std::size_t>(v)] = (x(v, 0) > center[0] ? 1 : 0) + (x(v, 2) > center[2] ? 2 : 0);
    }
    const Eigen::MatrixXd regression = (x * Eigen::Matrix<double, 3, 4>::Ones()).array().sin().matrix();
    const NjfLossTerms njf = make_njf_terms(ctx.ops, x * Eigen::Vector3d(1.1, 0.9, 1.0).asDiagonal());

    LossBuilder build = [&](Tape& tape) {
        Var y = net.forward(tape, ctx, x, cond);
        switch (setup.head) {
        case HeadKind::Classification: return ad::cross_entropy(y, {2});
        case HeadKind::Segmentation: return ad::cross_entropy(y, labels, ctx.ops.mass_vertex);
        case HeadKind::Regression: return ad::mse(y, regression);
        case HeadKind::Njf: return njf_loss(y, njf, ctx.ops.grad);
        }
        throw ConfigError("unhandled head kind");
    };
    return finite_diff_check(build, net.parameters(), options);
}

} // namespace pnet
