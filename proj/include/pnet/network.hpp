#pragma once

#include "pnet/autodiff.hpp"
#include "pnet/mesh.hpp"
#include "pnet/operators.hpp"
#include "pnet/poisson.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace pnet {

/// Everything a forward pass needs about one mesh: operators, the shared
/// Poisson factorization and the divergence operator grad^T M_F.
struct MeshContext
{
    MeshContext(TriMesh mesh, const FactorizeOptions& options = {});
    MeshContext(TriMesh mesh, DifferentialOperators ops, const FactorizeOptions& options = {});

    TriMesh mesh;
    DifferentialOperators ops;
    SparseOperator divergence;
    PoissonFactorization fact;
};

enum class HeadKind
{
    Classification,
    Segmentation,
    Regression,
    Njf,
};

enum class InputFeatures
{
    Xyz,
    Hks,
    Custom,
};

std::string to_string(HeadKind kind);
std::string to_string(InputFeatures kind);
HeadKind head_kind_from_string(const std::string& s);
InputFeatures input_features_from_string(const std::string& s);

struct HeadConfig
{
    HeadKind kind = HeadKind::Regression;
    /// Classes for classification/segmentation, channels for regression; 3 for NJF.
    int outputs = 1;
    /// Vector-layer count of the NJF head (the last one maps to 3 channels).
    int vec_mlp_depth = 2;
};

struct NetworkConfig
{
    int block_count = 2;
    int width = 128;
    int vec_mlp_depth = 1;
    bool use_modulation = true;
    /// Separate modulation before every vector layer instead of once per block.
    bool modulate_per_layer = false;
    InputFeatures input_features = InputFeatures::Xyz;
    /// Raw input channels; fixed to 3 for xyz and 16 for hks.
    int input_width = 3;
    int conditional_width = 0;
    double modulation_epsilon = 1e-4;
    HeadConfig head;

    void validate() const;
    nlohmann::json to_json() const;
    static NetworkConfig from_json(const nlohmann::json& j);
};

struct DenseLayer
{
    Parameter weight; // out x in
    Parameter bias;   // 1 x out

    Var forward(Tape& tape, const Var& x);
};

/// Complex C_out x C_in weights plus a real magnitude bias.
struct VectorLinearLayer
{
    Parameter weight_re;
    Parameter weight_im;
    Parameter bias;
    bool gated = true;

    Var forward(Tape& tape, const Var& f);
};

struct ModulationMLP
{
    DenseLayer hidden;
    DenseLayer output; // width -> 2 * width, split into (gamma, theta)
    double epsilon = 1e-4;

    /// `s_face` is |F| x C; returns the modulated field.
    Var forward(Tape& tape, const Var& f, const Var& s_face);
};

struct VertexMLP
{
    std::vector<DenseLayer> layers;

    Var forward(Tape& tape, const Var& x);
};

struct PoissonBlockParams
{
    std::vector<ModulationMLP> modulation;
    std::vector<VectorLinearLayer> vector_layers;
    VertexMLP vertex_mlp;
};

struct HeadParams
{
    std::vector<VectorLinearLayer> vector_layers; // NJF only
    DenseLayer linear;                            // classification / segmentation / regression
};

/// Tape-level building blocks, exposed for tests and the gradient checker.
Var vector_linear_forward(Tape& tape, const Var& f, VectorLinearLayer& layer);
Var poisson_block_forward(Tape& tape, const MeshContext& ctx, const Var& s, const Var& cond,
                          PoissonBlockParams& block, const NetworkConfig& config);
Var classification_head(Tape& tape, const MeshContext& ctx, const Var& s, HeadParams& head);
Var njf_head(Tape& tape, const MeshContext& ctx, const Var& s, HeadParams& head);

/// Replicates a global condition row (1 x C_cond) on every vertex.
Eigen::MatrixXd broadcast_condition(const Eigen::RowVectorXd& condition, Eigen::Index vertices);

class PoissonNet
{
public:
    PoissonNet(NetworkConfig config, std::uint64_t seed);

    const NetworkConfig& config() const { return config_; }
    std::vector<Parameter*> parameters();
    std::size_t parameter_count() const;

    /// Lift followed by every block; returns |V| x width features. When
    /// `block_outputs` is given it receives each block's output.
    Var forward_features(Tape& tape, const MeshContext& ctx, const Eigen::MatrixXd& inputs,
                         const Eigen::MatrixXd& cond, std::vector<Var>* block_outputs = nullptr);
    /// Full network including the head.
    Var forward(Tape& tape, const MeshContext& ctx, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& cond);
    Var head_forward(Tape& tape, const MeshContext& ctx, const Var& features);

    Eigen::MatrixXd predict(const MeshContext& ctx, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& cond);
    Eigen::MatrixXd features(const MeshContext& ctx, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& cond);

    /// Adds N(0, scale^2) noise to every parameter; used to move zero-initialised
    /// layers off their special point in tests.
    void perturb(double scale, std::uint64_t seed);

    DenseLayer& lift() { return lift_; }
    std::vector<PoissonBlockParams>& blocks() { return blocks_; }
    HeadParams& head() { return head_; }

private:
    NetworkConfig config_;
    DenseLayer lift_;
    std::vector<PoissonBlockParams> blocks_;
    HeadParams head_;
};

/// Little-endian checkpoint: magic "PNETCKPT", u32 version, u64 header length,
/// header JSON, u32 block count, then per block: u32 name length, name,
/// u32 rank, rank x u64 dims, row-major float64 data.
struct Checkpoint
{
    nlohmann::json header;
    std::vector<std::pair<std::string, Eigen::MatrixXd>> blocks;

    const Eigen::MatrixXd* find(const std::string& name) const;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Network parameters as checkpoint blocks plus {"network": config}.
Checkpoint make_checkpoint(PoissonNet& net);
/// Rebuilds a network from a checkpoint (config from the header).
PoissonNet load_network(const Checkpoint& ckpt);
void load_parameters(PoissonNet& net, const Checkpoint& ckpt);

} // namespace pnet
