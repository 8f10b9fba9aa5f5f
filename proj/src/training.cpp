#include "pnet/training.hpp"

#include "pnet/errors.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

namespace pnet {

namespace {

std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts)
{
    std::vector<std::uint32_t> words;
    for (std::uint64_t p : parts) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return std::mt19937_64(seq);
}

std::uint64_t mix(std::initializer_list<std::uint64_t> parts)
{
    auto rng = seeded(parts);
    return rng();
}

double uniform(std::mt19937_64& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn)
{
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(0, i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(w, i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

TriMesh scaled_anisotropic(const TriMesh& mesh, std::mt19937_64& rng, double lo, double hi)
{
    Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
    for (int a = 0; a < 3; ++a) s(a, a) = uniform(rng, lo, hi);
    return transformed(mesh, s);
}

} // namespace

void AugmentationConfig::validate() const
{
    if (!(scale_lo > 0.0) || !(scale_lo <= scale_hi)) throw ConfigError("augmentation scaleRange needs 0 < lo <= hi");
}

nlohmann::json AugmentationConfig::to_json() const
{
    return {{"rotation", rotation}, {"scaleRange", {scale_lo, scale_hi}}};
}

AugmentationConfig AugmentationConfig::from_json(const nlohmann::json& j)
{
    AugmentationConfig c;
    try {
        c.rotation = j.value("rotation", false);
        if (j.contains("scaleRange")) {
            const auto& r = j.at("scaleRange");
            if (!r.is_array() || r.size() != 2) throw ConfigError("scaleRange must be [lo, hi]");
            c.scale_lo = r[0].get<double>();
            c.scale_hi = r[1].get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid augmentation config: ") + e.what());
    }
    c.validate();
    return c;
}

Eigen::Matrix3d random_rotation(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q;
    do {
        q = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng));
    } while (q.norm() < 1e-12);
    return q.normalized().toRotationMatrix();
}

Eigen::Matrix3d augmentation_transform(const AugmentationConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    auto rng = seeded({seed, 0x61756dULL});
    Eigen::Matrix3d r = cfg.rotation ? random_rotation(rng()) : Eigen::Matrix3d::Identity();
    const double s = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : uniform(rng, cfg.scale_lo, cfg.scale_hi);
    return s * r;
}

TriMesh augment(const TriMesh& mesh, const AugmentationConfig& cfg, std::uint64_t seed)
{
    if (!cfg.enabled()) return mesh;
    return transformed(mesh, augmentation_transform(cfg, seed));
}

NjfLossTerms make_njf_terms(const DifferentialOperators& ops, const Eigen::MatrixXd& target_vertices)
{
    if (target_vertices.rows() != ops.num_vertices() || target_vertices.cols() != 3) {
        throw DimensionError("NJF targets must be |V| x 3");
    }
    NjfLossTerms t;
    t.vertex_weights = ops.mass_vertex;
    t.face_weights = ops.mass_face;
    t.target_vertices = mass_centered(ops.mass_vertex, target_vertices);
    t.target_jacobians = ops.grad * t.target_vertices;
    return t;
}

Var njf_loss(const Var& u, const NjfLossTerms& terms, const SparseOperator& grad)
{
    if (u.rows() != terms.target_vertices.rows() || u.cols() != terms.target_vertices.cols()) {
        throw DimensionError("NJF prediction shape does not match the target");
    }
    Var vertex_term = ad::weighted_squared_error(u, terms.target_vertices, terms.vertex_weights);
    Var jacobian_term =
        ad::weighted_squared_error(ad::sparse_apply(grad, u), terms.target_jacobians, terms.face_weights);
    return ad::add(vertex_term, jacobian_term);
}

double njf_loss_value(const Eigen::MatrixXd& u, const NjfLossTerms& terms, const SparseOperator& grad)
{
    if (u.rows() != terms.target_vertices.rows() || u.cols() != terms.target_vertices.cols()) {
        throw DimensionError("NJF prediction shape does not match the target");
    }
    const Eigen::MatrixXd dv = u - terms.target_vertices;
    const Eigen::MatrixXd dj = grad * u - terms.target_jacobians;
    return terms.vertex_weights.dot(dv.rowwise().squaredNorm()) + terms.face_weights.dot(dj.rowwise().squaredNorm());
}

void Adam::step(const std::vector<Parameter*>& params)
{
    if (m_.empty()) {
        for (Parameter* p : params) {
            m_.push_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (m_.size() != params.size()) throw DimensionError("optimizer state does not match the parameter list");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
        if (m_[k].rows() != p.value.rows() || m_[k].cols() != p.value.cols()) {
            throw DimensionError("optimizer state shape mismatch for '" + p.name + "'");
        }
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * p.grad;
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
        const Eigen::ArrayXXd mhat = m_[k].array() / c1;
        const Eigen::ArrayXXd vhat = v_[k].array() / c2;
        p.value.array() -= cfg_.learning_rate * mhat / (vhat.sqrt() + cfg_.epsilon);
    }
}

void Adam::save(Checkpoint& ckpt, const std::vector<Parameter*>& params) const
{
    ckpt.header["adam"] = {{"step", t_},
                           {"learningRate", cfg_.learning_rate},
                           {"beta1", cfg_.beta1},
                           {"beta2", cfg_.beta2},
                           {"epsilon", cfg_.epsilon}};
    if (m_.empty()) return;
    for (std::size_t k = 0; k < params.size(); ++k) {
        ckpt.blocks.emplace_back("adam.m." + params[k]->name, m_[k]);
        ckpt.blocks.emplace_back("adam.v." + params[k]->name, v_[k]);
    }
}

void Adam::load(const Checkpoint& ckpt, const std::vector<Parameter*>& params)
{
    if (!ckpt.header.contains("adam")) throw Error("checkpoint has no optimizer state");
    const auto& h = ckpt.header.at("adam");
    t_ = h.value("step", 0L);
    cfg_.beta1 = h.value("beta1", cfg_.beta1);
    cfg_.beta2 = h.value("beta2", cfg_.beta2);
    cfg_.epsilon = h.value("epsilon", cfg_.epsilon);
    m_.clear();
    v_.clear();
    if (t_ == 0) return;
    for (Parameter* p : params) {
        const Eigen::MatrixXd* m = ckpt.find("adam.m." + p->name);
        const Eigen::MatrixXd* v = ckpt.find("adam.v." + p->name);
        if (!m || !v) throw Error("checkpoint is missing optimizer moments for '" + p->name + "'");
        m_.push_back(*m);
        v_.push_back(*v);
    }
}

Eigenbasis compute_eigenbasis(const DifferentialOperators& ops, Eigen::Index k)
{
    const Eigen::Index n = ops.num_vertices();
    if (n > kDenseEigenLimit) {
        throw MeshError("mesh has " + std::to_string(n) + " vertices; the dense eigensolver supports at most " +
                        std::to_string(kDenseEigenLimit));
    }
    if (k < 1 || k > n) throw DimensionError("eigenbasis size must be in [1, |V|]");
    const Eigen::VectorXd d = ops.mass_vertex.cwiseSqrt().cwiseInverse();
    Eigen::MatrixXd a = d.asDiagonal() * Eigen::MatrixXd(ops.laplacian) * d.asDiagonal();
    a = 0.5 * (a + a.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(a);
    if (solver.info() != Eigen::Success) throw Error("dense eigensolver failed");
    Eigenbasis out;
    out.values = solver.eigenvalues().head(k);
    out.vectors = d.asDiagonal() * solver.eigenvectors().leftCols(k);
    return out;
}

std::vector<double> hks_times(int count, double lo, double hi)
{
    if (count < 1 || !(lo > 0.0) || !(hi >= lo)) throw ConfigError("invalid HKS time range");
    std::vector<double> t(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const double a = count == 1 ? 0.0 : static_cast<double>(i) / (count - 1);
        t[static_cast<std::size_t>(i)] = std::exp(std::log(lo) + a * (std::log(hi) - std::log(lo)));
    }
    return t;
}

HksTarget compute_hks(const Eigenbasis& eigen, const std::vector<double>& times)
{
    HksTarget h;
    h.times = times;
    h.basis_size = eigen.size();
    const Eigen::Index n = eigen.vectors.rows();
    const Eigen::MatrixXd sq = eigen.vectors.cwiseAbs2();
    h.raw.resize(n, static_cast<Eigen::Index>(times.size()));
    for (std::size_t c = 0; c < times.size(); ++c) {
        const Eigen::VectorXd w = (-eigen.values.cwiseMax(0.0) * times[c]).array().exp().matrix();
        h.raw.col(static_cast<Eigen::Index>(c)) = sq * w;
    }
    h.fields = h.raw;
    for (Eigen::Index c = 0; c < h.fields.cols(); ++c) {
        const double lo = h.fields.col(c).minCoeff(), hi = h.fields.col(c).maxCoeff();
        if (hi > lo) {
            h.fields.col(c) = (h.fields.col(c).array() - lo) / (hi - lo);
        } else {
            h.fields.col(c).setZero();
        }
    }
    return h;
}

Eigen::MatrixXd hks_features(const DifferentialOperators& ops)
{
    return compute_hks(compute_eigenbasis(ops, ops.num_vertices()), hks_times()).fields;
}

std::vector<Example> gen_synthetic_classification(int n_per_class, std::uint64_t seed)
{
    if (n_per_class < 1) throw ConfigError("need at least one example per class");
    std::vector<Example> out;
    for (int i = 0; i < n_per_class; ++i) {
        for (int c = 0; c < 3; ++c) {
            auto rng = seeded({seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i)});
            std::uniform_int_distribution<int> pick(0, 2);
            TriMesh m;
            std::string name;
            if (c == 0) {
                m = make_icosphere(2 + pick(rng) % 2);
                name = "sphere";
            } else if (c == 1) {
                const int level = pick(rng);
                m = make_torus(16 + 4 * level, 8 + 2 * level);
                name = "torus";
            } else {
                m = make_box(4 + 2 * pick(rng));
                name = "box";
            }
            m = scaled_anisotropic(m, rng, 0.7, 1.3);
            m = jitter_vertices(m, 0.005 * bounding_box_diagonal(m), rng());
            m = transformed(m, random_rotation(rng()));
            Example ex;
            ex.id = name + "-" + std::to_string(i);
            ex.mesh = std::move(m);
            ex.label = c;
            out.push_back(std::move(ex));
        }
    }
    return out;
}

std::vector<Example> gen_synthetic_segmentation(int count, std::uint64_t seed)
{
    if (count < 1) throw ConfigError("segmentation dataset needs at least one mesh");
    std::vector<Example> out;
    for (int i = 0; i < count; ++i) {
        auto rng = seeded({seed, 0x736567ULL, static_cast<std::uint64_t>(i)});
        TriMesh m = make_icosphere(2 + static_cast<int>(rng() % 2));
        m = scaled_anisotropic(m, rng, 0.8, 1.2);
        m = jitter_vertices(m, 0.003 * bounding_box_diagonal(m), rng());
        Example ex;
        ex.id = "blob-" + std::to_string(i);
        const double extent = m.vertices.col(0).cwiseAbs().maxCoeff();
        ex.vertex_labels.resize(static_cast<std::size_t>(m.num_vertices()));
        for (Eigen::Index v = 0; v < m.num_vertices(); ++v) {
            const double x = m.vertices(v, 0) / extent;
            ex.vertex_labels[static_cast<std::size_t>(v)] = x < -1.0 / 3.0 ? 0 : (x > 1.0 / 3.0 ? 2 : 1);
        }
        ex.mesh = std::move(m);
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<Example> gen_hks_overfit(int major_segments, int minor_segments)
{
    Example ex;
    ex.id = "torus-" + std::to_string(major_segments) + "x" + std::to_string(minor_segments);
    ex.mesh = make_torus(major_segments, minor_segments);
    ex.target = hks_features(build_operators(ex.mesh));
    return {ex};
}

Eigen::MatrixXd bend_vertices(const Eigen::MatrixXd& vertices, double curvature)
{
    if (std::abs(curvature) < 1e-12) return vertices;
    const double radius = 1.0 / curvature;
    Eigen::MatrixXd out = vertices;
    for (Eigen::Index i = 0; i < vertices.rows(); ++i) {
        const double x = vertices(i, 0), z = vertices(i, 2);
        const double angle = curvature * z;
        out(i, 0) = radius - (radius - x) * std::cos(angle);
        out(i, 2) = (radius - x) * std::sin(angle);
    }
    return out;
}

std::vector<Example> gen_cylinder_bend(int count, std::uint64_t seed)
{
    if (count < 1) throw ConfigError("bend dataset needs at least one pair");
    const TriMesh source = make_cylinder(16, 16, 0.2, 1.0);
    std::vector<Example> out;
    for (int i = 0; i < count; ++i) {
        auto rng = seeded({seed, 0x62656eULL, static_cast<std::uint64_t>(i)});
        const double kappa = uniform(rng, 0.0, 1.5);
        Example ex;
        ex.id = "bend-" + std::to_string(i);
        ex.mesh = source;
        ex.target = bend_vertices(source.vertices, kappa);
        ex.condition = Eigen::RowVectorXd::Constant(1, kappa);
        out.push_back(std::move(ex));
    }
    return out;
}

double nearest_neighbor_accuracy(const std::vector<Example>& examples)
{
    const std::size_t n = examples.size();
    if (n < 2) throw ConfigError("nearest-neighbour baseline needs at least two examples");
    Eigen::MatrixXd feats(static_cast<Eigen::Index>(n), 9);
    for (std::size_t i = 0; i < n; ++i) {
        const DifferentialOperators ops = build_operators(examples[i].mesh);
        const Eigen::Index k = std::min<Eigen::Index>(9, ops.num_vertices());
        const Eigenbasis eb = compute_eigenbasis(ops, k);
        const double area = ops.face_areas.sum();
        feats(static_cast<Eigen::Index>(i), 0) = std::log(area);
        for (Eigen::Index j = 1; j < 9; ++j) {
            feats(static_cast<Eigen::Index>(i), j) = j < k ? eb.values[j] * area : 0.0;
        }
    }
    const Eigen::RowVectorXd mean = feats.colwise().mean();
    Eigen::RowVectorXd sd = ((feats.rowwise() - mean).cwiseAbs2().colwise().sum() / static_cast<double>(n)).cwiseSqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j) {
        if (sd[j] <= 0.0) sd[j] = 1.0;
    }
    const Eigen::MatrixXd z = (feats.rowwise() - mean).array().rowwise() / sd.array();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = i;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double d = (z.row(static_cast<Eigen::Index>(i)) - z.row(static_cast<Eigen::Index>(j))).squaredNorm();
            if (d < best) {
                best = d;
                arg = j;
            }
        }
        if (examples[arg].label == examples[i].label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

nlohmann::json DatasetConfig::to_json() const
{
    return {{"kind", kind}, {"trainCount", train_count}, {"testCount", test_count}, {"seed", seed},
            {"resolution", resolution}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j)
{
    DatasetConfig c;
    try {
        c.kind = j.value("kind", c.kind);
        c.train_count = j.value("trainCount", c.train_count);
        c.test_count = j.value("testCount", c.test_count);
        c.seed = j.value("seed", c.seed);
        c.resolution = j.value("resolution", c.resolution);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid dataset config: ") + e.what());
    }
    if (c.kind != "classification" && c.kind != "segmentation" && c.kind != "hks" && c.kind != "njf") {
        throw ConfigError("unknown dataset kind '" + c.kind + "'");
    }
    if (c.train_count < 1 || c.test_count < 0 || c.resolution < 3) throw ConfigError("invalid dataset sizes");
    return c;
}

Dataset build_dataset(const DatasetConfig& cfg)
{
    Dataset d;
    const std::uint64_t test_seed = mix({cfg.seed, 0x74657374ULL});
    if (cfg.kind == "classification") {
        d.task = "classification";
        d.classes = 3;
        d.class_names = {"sphere", "torus", "box"};
        d.train = gen_synthetic_classification(cfg.train_count, cfg.seed);
        if (cfg.test_count > 0) d.test = gen_synthetic_classification(cfg.test_count, test_seed);
    } else if (cfg.kind == "segmentation") {
        d.task = "segmentation";
        d.classes = 3;
        d.class_names = {"left", "middle", "right"};
        d.train = gen_synthetic_segmentation(cfg.train_count, cfg.seed);
        if (cfg.test_count > 0) d.test = gen_synthetic_segmentation(cfg.test_count, test_seed);
    } else if (cfg.kind == "hks") {
        d.task = "regression";
        d.train = gen_hks_overfit(cfg.resolution, cfg.resolution);
        d.test = d.train;
    } else if (cfg.kind == "njf") {
        d.task = "njf";
        d.train = gen_cylinder_bend(cfg.train_count, cfg.seed);
        if (cfg.test_count > 0) d.test = gen_cylinder_bend(cfg.test_count, test_seed);
    } else {
        throw ConfigError("unknown dataset kind '" + cfg.kind + "'");
    }
    return d;
}

double OptimizerConfig::rate_at(long iteration) const
{
    if (final_learning_rate < 0.0 || iterations <= 1) return learning_rate;
    const double t = std::clamp(static_cast<double>(iteration) / (iterations - 1), 0.0, 1.0);
    return final_learning_rate + 0.5 * (learning_rate - final_learning_rate) * (1.0 + std::cos(M_PI * t));
}

nlohmann::json OptimizerConfig::to_json() const
{
    nlohmann::json j = {{"learningRate", learning_rate}, {"batchSize", batch_size},
                        {"iterations", iterations},      {"seed", seed},
                        {"checkpointEvery", checkpoint_every}, {"evalEvery", eval_every}};
    if (final_learning_rate >= 0.0) j["finalLearningRate"] = final_learning_rate;
    return j;
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j)
{
    OptimizerConfig c;
    try {
        c.learning_rate = j.value("learningRate", c.learning_rate);
        c.final_learning_rate = j.value("finalLearningRate", c.final_learning_rate);
        c.batch_size = j.value("batchSize", c.batch_size);
        c.iterations = j.value("iterations", c.iterations);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpointEvery", c.checkpoint_every);
        c.eval_every = j.value("evalEvery", c.eval_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid optimizer config: ") + e.what());
    }
    if (!(c.learning_rate >= 0.0) || c.batch_size < 1 || c.iterations < 0 || c.checkpoint_every < 0 ||
        c.eval_every < 0) {
        throw ConfigError("invalid optimizer settings");
    }
    return c;
}

void RunConfig::validate() const
{
    network.validate();
    augmentation.validate();
    const HeadKind k = network.head.kind;
    if (dataset.kind == "classification" && (k != HeadKind::Classification || network.head.outputs != 3)) {
        throw ConfigError("classification data needs a 3-class classification head");
    }
    if (dataset.kind == "segmentation" && (k != HeadKind::Segmentation || network.head.outputs != 3)) {
        throw ConfigError("segmentation data needs a 3-class segmentation head");
    }
    if (dataset.kind == "hks" && (k != HeadKind::Regression || network.head.outputs != 16)) {
        throw ConfigError("hks data needs a 16-channel regression head");
    }
    if (dataset.kind == "njf" && (k != HeadKind::Njf || network.conditional_width != 1)) {
        throw ConfigError("njf data needs the njf head and conditionalWidth 1");
    }
    if (dataset.kind != "njf" && network.conditional_width != 0) {
        throw ConfigError("only the njf dataset provides conditional features");
    }
    if (network.input_features == InputFeatures::Custom) throw ConfigError("bundled datasets provide xyz or hks inputs");
}

nlohmann::json RunConfig::to_json() const
{
    return {{"network", network.to_json()},
            {"optimizer", optimizer.to_json()},
            {"dataset", dataset.to_json()},
            {"augmentation", augmentation.to_json()},
            {"outputDir", output_dir}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig r;
    if (j.contains("network")) r.network = NetworkConfig::from_json(j.at("network"));
    if (j.contains("optimizer")) r.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
    if (j.contains("dataset")) r.dataset = DatasetConfig::from_json(j.at("dataset"));
    if (j.contains("augmentation")) r.augmentation = AugmentationConfig::from_json(j.at("augmentation"));
    if (j.contains("outputDir")) {
        if (!j.at("outputDir").is_string()) throw ConfigError("outputDir must be a string");
        r.output_dir = j.at("outputDir").get<std::string>();
    }
    r.validate();
    return r;
}

RunConfig RunConfig::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open run config '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("run config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
}

Eigen::MatrixXd network_inputs(const NetworkConfig& net, const MeshContext& ctx)
{
    switch (net.input_features) {
    case InputFeatures::Xyz: return ctx.mesh.vertices;
    case InputFeatures::Hks: return hks_features(ctx.ops);
    case InputFeatures::Custom: break;
    }
    throw ConfigError("custom input features must be supplied with the example");
}

PreparedExample prepare_example(const Example& ex, const NetworkConfig& net, const AugmentationConfig* aug,
                                std::uint64_t aug_seed)
{
    PreparedExample p;
    p.source = &ex;
    Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
    TriMesh mesh = ex.mesh;
    if (aug && aug->enabled()) {
        linear = augmentation_transform(*aug, aug_seed);
        mesh = transformed(mesh, linear);
    }
    auto ctx = std::make_shared<MeshContext>(std::move(mesh));
    if (net.input_features == InputFeatures::Custom) {
        p.inputs = ex.inputs;
    } else {
        p.inputs = network_inputs(net, *ctx);
    }
    if (net.conditional_width > 0) {
        if (ex.condition.size() != net.conditional_width) {
            throw DimensionError("example '" + ex.id + "' has " + std::to_string(ex.condition.size()) +
                                 " condition values, expected " + std::to_string(net.conditional_width));
        }
        p.cond = broadcast_condition(ex.condition, ctx->ops.num_vertices());
    } else {
        p.cond.resize(ctx->ops.num_vertices(), 0);
    }
    if (net.head.kind == HeadKind::Njf) {
        p.njf = make_njf_terms(ctx->ops, ex.target * linear.transpose());
    }
    p.ctx = std::move(ctx);
    return p;
}

Var example_loss(Tape& tape, PoissonNet& net, const PreparedExample& ex, double* correct, double* total)
{
    const MeshContext& ctx = *ex.ctx;
    Var out = net.forward(tape, ctx, ex.inputs, ex.cond);
    const Example& src = *ex.source;
    switch (net.config().head.kind) {
    case HeadKind::Classification: {
        if (src.label < 0) throw DimensionError("example '" + src.id + "' has no class label");
        if (correct && total) {
            Eigen::Index arg = 0;
            out.value().row(0).maxCoeff(&arg);
            *correct += arg == src.label ? 1.0 : 0.0;
            *total += 1.0;
        }
        return ad::cross_entropy(out, {src.label});
    }
    case HeadKind::Segmentation: {
        if (static_cast<Eigen::Index>(src.vertex_labels.size()) != out.rows()) {
            throw DimensionError("example '" + src.id + "' needs one label per vertex");
        }
        if (correct && total) {
            for (Eigen::Index v = 0; v < out.rows(); ++v) {
                Eigen::Index arg = 0;
                out.value().row(v).maxCoeff(&arg);
                *correct += arg == src.vertex_labels[static_cast<std::size_t>(v)] ? 1.0 : 0.0;
            }
            *total += static_cast<double>(out.rows());
        }
        return ad::cross_entropy(out, src.vertex_labels, ctx.ops.mass_vertex);
    }
    case HeadKind::Regression:
        if (src.target.rows() != out.rows() || src.target.cols() != out.cols()) {
            throw DimensionError("example '" + src.id + "' regression target has the wrong shape");
        }
        return ad::mse(out, src.target);
    case HeadKind::Njf:
        if (!ex.njf) throw DimensionError("example '" + src.id + "' was prepared without NJF targets");
        return njf_loss(out, *ex.njf, ctx.ops.grad);
    }
    throw ConfigError("unhandled head kind");
}

BatchResult accumulate_batch(PoissonNet& net, const std::vector<const PreparedExample*>& batch, int threads)
{
    const std::vector<Parameter*> params = net.parameters();
    const std::size_t n = batch.size();
    if (n == 0) throw ConfigError("empty batch");
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));

    std::vector<PoissonNet> replicas;
    if (workers > 1) replicas.assign(workers, net);
    std::vector<std::vector<Eigen::MatrixXd>> grads(n);
    std::vector<double> losses(n, 0.0), correct(n, 0.0), total(n, 0.0);

    parallel_for(n, static_cast<int>(workers), [&](std::size_t w, std::size_t i) {
        PoissonNet& local = workers > 1 ? replicas[w] : net;
        std::vector<Parameter*> lp = local.parameters();
        for (Parameter* p : lp) p->zero_grad();
        Tape tape;
        Var loss = example_loss(tape, local, *batch[i], &correct[i], &total[i]);
        losses[i] = loss.value()(0, 0);
        tape.backward(loss);
        grads[i].reserve(lp.size());
        for (Parameter* p : lp) grads[i].push_back(p->grad);
    });

    BatchResult r;
    for (Parameter* p : params) p->zero_grad();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < params.size(); ++k) params[k]->grad += grads[i][k];
        r.loss += losses[i];
        r.correct += correct[i];
        r.total += total[i];
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (Parameter* p : params) p->grad *= inv;
    r.loss *= inv;
    return r;
}

EvalResult evaluate(PoissonNet& net, const std::vector<PreparedExample>& examples, int threads)
{
    EvalResult r;
    r.count = examples.size();
    if (examples.empty()) return r;
    std::vector<double> losses(examples.size()), correct(examples.size(), 0.0), total(examples.size(), 0.0);
    // Forward passes only read the parameters, so the network is shared.
    parallel_for(examples.size(), threads, [&](std::size_t, std::size_t i) {
        Tape tape;
        losses[i] = example_loss(tape, net, examples[i], &correct[i], &total[i]).value()(0, 0);
    });
    double c = 0.0, t = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        r.loss += losses[i];
        c += correct[i];
        t += total[i];
    }
    r.loss /= static_cast<double>(examples.size());
    r.has_accuracy = t > 0.0;
    r.accuracy = r.has_accuracy ? c / t : 0.0;
    return r;
}

nlohmann::json MetricRecord::to_json() const
{
    nlohmann::json j = {{"iteration", iteration}, {"loss", loss}};
    j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json(nullptr);
    if (eval_loss) j["evalLoss"] = *eval_loss;
    if (eval_accuracy) j["evalAccuracy"] = *eval_accuracy;
    j["wallTime"] = wall_time;
    return j;
}

Checkpoint make_training_checkpoint(PoissonNet& net, const Adam& adam, long iteration, const RunConfig& run)
{
    Checkpoint ckpt = make_checkpoint(net);
    ckpt.header["iteration"] = iteration;
    ckpt.header["run"] = run.to_json();
    adam.save(ckpt, net.parameters());
    return ckpt;
}

int default_thread_count()
{
    if (const char* env = std::getenv("PNET_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

TrainResult train_loop(const RunConfig& run, const Dataset& data, PoissonNet& net, const TrainOptions& options)
{
    run.validate();
    if (data.train.empty()) throw ConfigError("training set is empty");
    const OptimizerConfig& opt = run.optimizer;
    const std::vector<Parameter*> params = net.parameters();
    Adam adam(AdamConfig{opt.learning_rate});
    long start = 0;
    if (options.resume) {
        const Checkpoint ckpt = read_checkpoint(*options.resume);
        load_parameters(net, ckpt);
        adam.load(ckpt, params);
        adam.set_learning_rate(opt.learning_rate);
        start = ckpt.header.value("iteration", 0L);
    }

    const std::filesystem::path dir(run.output_dir);
    std::filesystem::create_directories(dir);
    std::ofstream metrics(dir / "metrics.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw Error("cannot write metrics to '" + (dir / "metrics.jsonl").string() + "'");

    const bool augmenting = run.augmentation.enabled();
    std::vector<PreparedExample> prepared;
    if (!augmenting) {
        prepared.reserve(data.train.size());
        for (const Example& ex : data.train) prepared.push_back(prepare_example(ex, net.config()));
    }
    std::vector<PreparedExample> eval_set;
    if (opt.eval_every > 0) {
        for (const Example& ex : data.test) eval_set.push_back(prepare_example(ex, net.config()));
    }

    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();
    auto save = [&](long iteration, const std::filesystem::path& path) {
        write_checkpoint(path, make_training_checkpoint(net, adam, iteration, run));
    };
    for (long it = start; it < opt.iterations; ++it) {
        adam.set_learning_rate(opt.rate_at(it));
        auto rng = seeded({opt.seed, static_cast<std::uint64_t>(it)});
        std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
        std::vector<std::size_t> idx(static_cast<std::size_t>(opt.batch_size));
        for (auto& i : idx) i = pick(rng);

        std::vector<PreparedExample> augmented;
        std::vector<const PreparedExample*> batch;
        if (augmenting) {
            augmented.reserve(idx.size());
            for (std::size_t b = 0; b < idx.size(); ++b) {
                augmented.push_back(prepare_example(data.train[idx[b]], net.config(), &run.augmentation,
                                                    mix({opt.seed, static_cast<std::uint64_t>(it), b})));
            }
            for (const auto& p : augmented) batch.push_back(&p);
        } else {
            for (std::size_t i : idx) batch.push_back(&prepared[i]);
        }

        const BatchResult br = accumulate_batch(net, batch, options.threads);
        if (!std::isfinite(br.loss)) {
            nlohmann::json dump = {{"iteration", it + 1}, {"loss", br.loss}};
            for (std::size_t i : idx) dump["examples"].push_back(data.train[i].id);
            for (Parameter* p : params) {
                dump["parameters"].push_back({{"name", p->name},
                                              {"valueFinite", p->value.allFinite()},
                                              {"gradFinite", p->grad.allFinite()},
                                              {"valueNorm", p->value.norm()}});
            }
            std::ofstream(dir / "nonfinite_dump.json") << dump.dump(2) << "\n";
            throw TrainingError("non-finite loss at iteration " + std::to_string(it + 1) + "; diagnostics in '" +
                                (dir / "nonfinite_dump.json").string() + "'");
        }
        adam.step(params);

        MetricRecord rec;
        rec.iteration = it + 1;
        rec.loss = br.loss;
        if (br.total > 0.0) rec.accuracy = br.correct / br.total;
        if (opt.eval_every > 0 && !eval_set.empty() && (it + 1) % opt.eval_every == 0) {
            const EvalResult ev = evaluate(net, eval_set, options.threads);
            rec.eval_loss = ev.loss;
            if (ev.has_accuracy) rec.eval_accuracy = ev.accuracy;
        }
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        metrics << rec.to_json().dump() << "\n";
        metrics.flush();
        result.log.push_back(rec);
        result.final_loss = br.loss;

        if (opt.checkpoint_every > 0 && (it + 1) % opt.checkpoint_every == 0) {
            save(it + 1, dir / ("checkpoint_" + std::to_string(it + 1) + ".pnet"));
        }
        if (options.on_iteration && !options.on_iteration(rec)) {
            result.checkpoint = dir / "final.pnet";
            save(it + 1, result.checkpoint);
            return result;
        }
    }
    result.checkpoint = dir / "final.pnet";
    save(std::max<long>(start, opt.iterations), result.checkpoint);
    return result;
}

} // namespace pnet
