#include "pnet/network.hpp"

#include "pnet/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

namespace pnet {

namespace {

class Initializer
{
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    Eigen::MatrixXd normal(Eigen::Index rows, Eigen::Index cols, double variance)
    {
        std::normal_distribution<double> dist(0.0, std::sqrt(variance));
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
        return m;
    }

    DenseLayer dense(const std::string& name, int in, int out, bool zero = false)
    {
        Eigen::MatrixXd w = zero ? Eigen::MatrixXd::Zero(out, in) : normal(out, in, 1.0 / in);
        return {Parameter(name + ".weight", std::move(w)), Parameter(name + ".bias", Eigen::MatrixXd::Zero(1, out))};
    }

    VectorLinearLayer vector(const std::string& name, int in, int out, bool gated, bool zero = false)
    {
        VectorLinearLayer l;
        l.weight_re = Parameter(name + ".weight_re", zero ? Eigen::MatrixXd::Zero(out, in) : normal(out, in, 1.0 / in));
        l.weight_im = Parameter(name + ".weight_im", zero ? Eigen::MatrixXd::Zero(out, in) : normal(out, in, 1.0 / in));
        l.bias = Parameter(name + ".bias", Eigen::MatrixXd::Zero(1, out));
        l.gated = gated;
        return l;
    }

private:
    std::mt19937_64 rng_;
};

template <typename T>
void put(std::ostream& out, T value)
{
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path)
{
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw Error("truncated checkpoint '" + path + "'");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

constexpr char kMagic[8] = {'P', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};

} // namespace

MeshContext::MeshContext(TriMesh m, const FactorizeOptions& options)
    : MeshContext(m, build_operators(m), options)
{}

MeshContext::MeshContext(TriMesh m, DifferentialOperators o, const FactorizeOptions& options)
    : mesh(std::move(m))
    , ops(std::move(o))
    , divergence(SparseOperator(ops.grad.transpose()) * diagonal_operator(ops.mass_face))
    , fact(ops.laplacian, ops.mass_vertex, options)
{}

std::string to_string(HeadKind kind)
{
    switch (kind) {
    case HeadKind::Classification: return "classification";
    case HeadKind::Segmentation: return "segmentation";
    case HeadKind::Regression: return "regression";
    case HeadKind::Njf: return "njf";
    }
    return "?";
}

std::string to_string(InputFeatures kind)
{
    switch (kind) {
    case InputFeatures::Xyz: return "xyz";
    case InputFeatures::Hks: return "hks";
    case InputFeatures::Custom: return "custom";
    }
    return "?";
}

HeadKind head_kind_from_string(const std::string& s)
{
    if (s == "classification") return HeadKind::Classification;
    if (s == "segmentation") return HeadKind::Segmentation;
    if (s == "regression") return HeadKind::Regression;
    if (s == "njf") return HeadKind::Njf;
    throw ConfigError("unknown head kind '" + s + "'");
}

InputFeatures input_features_from_string(const std::string& s)
{
    if (s == "xyz") return InputFeatures::Xyz;
    if (s == "hks") return InputFeatures::Hks;
    if (s == "custom") return InputFeatures::Custom;
    throw ConfigError("unknown input feature kind '" + s + "'");
}

void NetworkConfig::validate() const
{
    if (block_count < 1) throw ConfigError("blockCount must be >= 1");
    if (width < 1) throw ConfigError("width must be >= 1");
    if (vec_mlp_depth < 1) throw ConfigError("vecMLPDepth must be >= 1");
    if (input_width < 1) throw ConfigError("inputWidth must be >= 1");
    if (conditional_width < 0) throw ConfigError("conditionalWidth must be >= 0");
    if (!(modulation_epsilon > 0.0)) throw ConfigError("modulationEpsilon must be positive");
    if (input_features == InputFeatures::Xyz && input_width != 3) throw ConfigError("xyz inputs have width 3");
    if (input_features == InputFeatures::Hks && input_width != 16) throw ConfigError("hks inputs have width 16");
    if (head.outputs < 1) throw ConfigError("head.outputs must be >= 1");
    if (head.kind == HeadKind::Njf) {
        if (head.outputs != 3) throw ConfigError("the njf head predicts exactly 3 coordinate channels");
        if (head.vec_mlp_depth < 1) throw ConfigError("head.vecMLPDepth must be >= 1");
    }
    if ((head.kind == HeadKind::Classification || head.kind == HeadKind::Segmentation) && head.outputs < 2) {
        throw ConfigError("classification/segmentation heads need at least 2 classes");
    }
}

nlohmann::json NetworkConfig::to_json() const
{
    return {{"blockCount", block_count},
            {"width", width},
            {"vecMLPDepth", vec_mlp_depth},
            {"useModulation", use_modulation},
            {"modulatePerLayer", modulate_per_layer},
            {"inputFeatures", to_string(input_features)},
            {"inputWidth", input_width},
            {"conditionalWidth", conditional_width},
            {"modulationEpsilon", modulation_epsilon},
            {"head", {{"kind", to_string(head.kind)}, {"outputs", head.outputs}, {"vecMLPDepth", head.vec_mlp_depth}}}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j)
{
    NetworkConfig c;
    try {
        c.block_count = j.value("blockCount", c.block_count);
        c.width = j.value("width", c.width);
        c.vec_mlp_depth = j.value("vecMLPDepth", c.vec_mlp_depth);
        c.use_modulation = j.value("useModulation", c.use_modulation);
        c.modulate_per_layer = j.value("modulatePerLayer", c.modulate_per_layer);
        c.input_features = input_features_from_string(j.value("inputFeatures", std::string("xyz")));
        c.input_width = c.input_features == InputFeatures::Xyz ? 3 : c.input_features == InputFeatures::Hks ? 16 : 0;
        c.input_width = j.value("inputWidth", c.input_width);
        c.conditional_width = j.value("conditionalWidth", c.conditional_width);
        c.modulation_epsilon = j.value("modulationEpsilon", c.modulation_epsilon);
        if (j.contains("head")) {
            const auto& h = j.at("head");
            c.head.kind = head_kind_from_string(h.value("kind", std::string("regression")));
            c.head.outputs = h.value("outputs", c.head.kind == HeadKind::Njf ? 3 : 1);
            c.head.vec_mlp_depth = h.value("vecMLPDepth", c.head.vec_mlp_depth);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid network config: ") + e.what());
    }
    c.validate();
    return c;
}

Var DenseLayer::forward(Tape& tape, const Var& x)
{
    return ad::linear(x, tape.parameter(weight), tape.parameter(bias));
}

Var VectorLinearLayer::forward(Tape& tape, const Var& f)
{
    Var g = ad::complex_linear(f, tape.parameter(weight_re), tape.parameter(weight_im));
    return gated ? ad::magnitude_gate(g, tape.parameter(bias)) : g;
}

Var ModulationMLP::forward(Tape& tape, const Var& f, const Var& s_face)
{
    const Eigen::Index c = f.cols();
    Var h = ad::relu(hidden.forward(tape, s_face));
    Var out = output.forward(tape, h);
    return ad::modulate(f, ad::columns(out, 0, c), ad::columns(out, c, c), epsilon);
}

Var VertexMLP::forward(Tape& tape, const Var& x)
{
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(tape, h);
        if (i + 1 < layers.size()) h = ad::relu(h);
    }
    return h;
}

Var vector_linear_forward(Tape& tape, const Var& f, VectorLinearLayer& layer)
{
    return layer.forward(tape, f);
}

Var poisson_block_forward(Tape& tape, const MeshContext& ctx, const Var& s, const Var& cond,
                          PoissonBlockParams& block, const NetworkConfig& config)
{
    if (s.rows() != ctx.ops.num_vertices()) throw DimensionError("block input does not match the mesh");
    Var f = ad::sparse_apply(ctx.ops.grad, s);
    Var s_face;
    if (config.use_modulation) s_face = ad::sparse_apply(ctx.ops.face_average, s);
    if (config.use_modulation && !config.modulate_per_layer) f = block.modulation[0].forward(tape, f, s_face);
    for (std::size_t l = 0; l < block.vector_layers.size(); ++l) {
        if (config.use_modulation && config.modulate_per_layer) f = block.modulation[l].forward(tape, f, s_face);
        f = block.vector_layers[l].forward(tape, f);
    }
    Var u = ad::poisson_solve(ctx.fact, ad::sparse_apply(ctx.divergence, f));
    std::vector<Var> parts{s, u};
    if (cond.valid() && cond.cols() > 0) {
        if (cond.rows() != s.rows()) throw DimensionError("conditional features need one row per vertex");
        parts.push_back(cond);
    }
    return block.vertex_mlp.forward(tape, ad::concat_cols(parts));
}

Var classification_head(Tape& tape, const MeshContext& ctx, const Var& s, HeadParams& head)
{
    return head.linear.forward(tape, ad::weighted_mean_rows(s, ctx.ops.mass_vertex));
}

Var njf_head(Tape& tape, const MeshContext& ctx, const Var& s, HeadParams& head)
{
    Var f = ad::sparse_apply(ctx.ops.grad, s);
    for (auto& layer : head.vector_layers) f = layer.forward(tape, f);
    // Skip connection in the gradient domain: the source shape's own xyz gradients.
    Var jacobians = ad::add(f, tape.constant(ctx.ops.grad * ctx.mesh.vertices));
    return ad::poisson_solve(ctx.fact, ad::sparse_apply(ctx.divergence, jacobians));
}

Eigen::MatrixXd broadcast_condition(const Eigen::RowVectorXd& condition, Eigen::Index vertices)
{
    return condition.replicate(vertices, 1);
}

PoissonNet::PoissonNet(NetworkConfig config, std::uint64_t seed)
    : config_(std::move(config))
{
    config_.validate();
    Initializer init(seed);
    const int c = config_.width;
    lift_ = init.dense("lift", config_.input_width, c);
    blocks_.resize(static_cast<std::size_t>(config_.block_count));
    for (int b = 0; b < config_.block_count; ++b) {
        const std::string prefix = "blocks." + std::to_string(b);
        PoissonBlockParams& blk = blocks_[static_cast<std::size_t>(b)];
        if (config_.use_modulation) {
            const int count = config_.modulate_per_layer ? config_.vec_mlp_depth : 1;
            for (int m = 0; m < count; ++m) {
                const std::string mp = prefix + ".modulation." + std::to_string(m);
                ModulationMLP mod;
                mod.hidden = init.dense(mp + ".hidden", c, c);
                mod.output = init.dense(mp + ".output", c, 2 * c, /*zero=*/true);
                mod.epsilon = config_.modulation_epsilon;
                blk.modulation.push_back(std::move(mod));
            }
        }
        for (int l = 0; l < config_.vec_mlp_depth; ++l) {
            blk.vector_layers.push_back(init.vector(prefix + ".vector." + std::to_string(l), c, c, true));
        }
        const int in = 2 * c + config_.conditional_width;
        blk.vertex_mlp.layers.push_back(init.dense(prefix + ".vertex_mlp.0", in, c));
        blk.vertex_mlp.layers.push_back(init.dense(prefix + ".vertex_mlp.1", c, c));
        blk.vertex_mlp.layers.push_back(init.dense(prefix + ".vertex_mlp.2", c, c));
    }
    if (config_.head.kind == HeadKind::Njf) {
        for (int l = 0; l + 1 < config_.head.vec_mlp_depth; ++l) {
            head_.vector_layers.push_back(init.vector("head.vector." + std::to_string(l), c, c, true));
        }
        // Zero residual at initialisation: the head starts as the identity deformation.
        head_.vector_layers.push_back(
            init.vector("head.vector." + std::to_string(config_.head.vec_mlp_depth - 1), c, 3, false, true));
    } else {
        head_.linear = init.dense("head.linear", c, config_.head.outputs);
    }
}

std::vector<Parameter*> PoissonNet::parameters()
{
    std::vector<Parameter*> out;
    auto dense = [&out](DenseLayer& d) {
        out.push_back(&d.weight);
        out.push_back(&d.bias);
    };
    auto vec = [&out](VectorLinearLayer& v) {
        out.push_back(&v.weight_re);
        out.push_back(&v.weight_im);
        if (v.gated) out.push_back(&v.bias);
    };
    dense(lift_);
    for (auto& b : blocks_) {
        for (auto& m : b.modulation) {
            dense(m.hidden);
            dense(m.output);
        }
        for (auto& v : b.vector_layers) vec(v);
        for (auto& d : b.vertex_mlp.layers) dense(d);
    }
    if (config_.head.kind == HeadKind::Njf) {
        for (auto& v : head_.vector_layers) vec(v);
    } else {
        dense(head_.linear);
    }
    return out;
}

std::size_t PoissonNet::parameter_count() const
{
    std::size_t n = 0;
    for (Parameter* p : const_cast<PoissonNet*>(this)->parameters()) n += static_cast<std::size_t>(p->size());
    return n;
}

Var PoissonNet::forward_features(Tape& tape, const MeshContext& ctx, const Eigen::MatrixXd& inputs,
                                 const Eigen::MatrixXd& cond, std::vector<Var>* block_outputs)
{
    if (inputs.rows() != ctx.ops.num_vertices() || inputs.cols() != config_.input_width) {
        throw DimensionError("inputs must be |V| x " + std::to_string(config_.input_width) + ", got " +
                             std::to_string(inputs.rows()) + " x " + std::to_string(inputs.cols()));
    }
    if (cond.cols() != config_.conditional_width || (cond.size() > 0 && cond.rows() != inputs.rows())) {
        throw DimensionError("conditional features must be |V| x " + std::to_string(config_.conditional_width));
    }
    Var s = lift_.forward(tape, tape.constant(inputs));
    Var c = cond.size() > 0 ? tape.constant(cond) : Var();
    for (auto& block : blocks_) {
        s = poisson_block_forward(tape, ctx, s, c, block, config_);
        if (block_outputs) block_outputs->push_back(s);
    }
    return s;
}

Var PoissonNet::head_forward(Tape& tape, const MeshContext& ctx, const Var& features)
{
    switch (config_.head.kind) {
    case HeadKind::Classification: return classification_head(tape, ctx, features, head_);
    case HeadKind::Njf: return njf_head(tape, ctx, features, head_);
    case HeadKind::Segmentation:
    case HeadKind::Regression: return head_.linear.forward(tape, features);
    }
    throw ConfigError("unhandled head kind");
}

Var PoissonNet::forward(Tape& tape, const MeshContext& ctx, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& cond)
{
    return head_forward(tape, ctx, forward_features(tape, ctx, inputs, cond));
}

Eigen::MatrixXd PoissonNet::predict(const MeshContext& ctx, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& cond)
{
    Tape tape;
    return forward(tape, ctx, inputs, cond).value();
}

Eigen::MatrixXd PoissonNet::features(const MeshContext& ctx, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& cond)
{
    Tape tape;
    return forward_features(tape, ctx, inputs, cond).value();
}

void PoissonNet::perturb(double scale, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, scale);
    for (Parameter* p : parameters()) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += dist(rng);
    }
}

const Eigen::MatrixXd* Checkpoint::find(const std::string& name) const
{
    for (const auto& [n, m] : blocks) {
        if (n == name) return &m;
    }
    return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string header = ckpt.header.dump();
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blocks.size()));
    for (const auto& [name, m] : ckpt.blocks) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, 2);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) put<double>(out, m(r, c));
        }
    }
    if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    const std::string p = path.string();
    if (!in) throw Error("cannot open checkpoint '" + p + "'");
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw Error("'" + p + "' is not a checkpoint (bad magic)");
    }
    const auto version = get<std::uint32_t>(in, p);
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = get<std::uint64_t>(in, p);
    std::string header(header_len, '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) throw Error("truncated checkpoint '" + p + "'");
    Checkpoint ckpt;
    try {
        ckpt.header = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint header is not valid JSON: " + std::string(e.what()));
    }
    const auto count = get<std::uint32_t>(in, p);
    for (std::uint32_t b = 0; b < count; ++b) {
        const auto name_len = get<std::uint32_t>(in, p);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) throw Error("truncated checkpoint '" + p + "'");
        const auto rank = get<std::uint32_t>(in, p);
        std::vector<std::uint64_t> dims(rank);
        for (auto& d : dims) d = get<std::uint64_t>(in, p);
        Eigen::Index rows = 1, cols = 1;
        if (rank == 1) {
            cols = static_cast<Eigen::Index>(dims[0]);
        } else if (rank == 2) {
            rows = static_cast<Eigen::Index>(dims[0]);
            cols = static_cast<Eigen::Index>(dims[1]);
        } else if (rank != 0) {
            throw Error("checkpoint block '" + name + "' has unsupported rank " + std::to_string(rank));
        }
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = get<double>(in, p);
        }
        ckpt.blocks.emplace_back(std::move(name), std::move(m));
    }
    return ckpt;
}

Checkpoint make_checkpoint(PoissonNet& net)
{
    Checkpoint ckpt;
    ckpt.header = {{"network", net.config().to_json()}};
    for (Parameter* p : net.parameters()) ckpt.blocks.emplace_back(p->name, p->value);
    return ckpt;
}

void load_parameters(PoissonNet& net, const Checkpoint& ckpt)
{
    for (Parameter* p : net.parameters()) {
        const Eigen::MatrixXd* m = ckpt.find(p->name);
        if (!m) throw Error("checkpoint is missing parameter '" + p->name + "'");
        if (m->rows() != p->value.rows() || m->cols() != p->value.cols()) {
            throw DimensionError("checkpoint parameter '" + p->name + "' has the wrong shape");
        }
        p->value = *m;
        p->zero_grad();
    }
}

PoissonNet load_network(const Checkpoint& ckpt)
{
    if (!ckpt.header.contains("network")) throw Error("checkpoint header has no network config");
    PoissonNet net(NetworkConfig::from_json(ckpt.header.at("network")), 0);
    load_parameters(net, ckpt);
    return net;
}

} // namespace pnet
