#pragma once

#include "pnet/autodiff.hpp"
#include "pnet/errors.hpp"
#include "pnet/network.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pnet {

class TrainingError : public Error
{
public:
    using Error::Error;
};

struct AugmentationConfig
{
    bool rotation = false;
    double scale_lo = 1.0;
    double scale_hi = 1.0;

    bool enabled() const { return rotation || scale_lo != 1.0 || scale_hi != 1.0; }
    void validate() const;
    nlohmann::json to_json() const;
    static AugmentationConfig from_json(const nlohmann::json& j);
};

/// Uniform rotation from a unit quaternion with Gaussian components.
Eigen::Matrix3d random_rotation(std::uint64_t seed);
/// The linear map augment() applies for this seed (rotation then scale).
Eigen::Matrix3d augmentation_transform(const AugmentationConfig& cfg, std::uint64_t seed);
TriMesh augment(const TriMesh& mesh, const AugmentationConfig& cfg, std::uint64_t seed);

struct NjfLossTerms
{
    Eigen::VectorXd vertex_weights;     // massVertex
    Eigen::VectorXd face_weights;       // massFace (area per gradient component)
    Eigen::MatrixXd target_vertices;    // centered, |V| x 3
    Eigen::MatrixXd target_jacobians;   // grad * target_vertices, 2|F| x 3
};

/// Centers the target with the mass-weighted mean and precomputes its gradients.
NjfLossTerms make_njf_terms(const DifferentialOperators& ops, const Eigen::MatrixXd& target_vertices);
/// sum_i m_i |v_i - u_i|^2 + sum_t a_t |J_t - grad u_t|^2
Var njf_loss(const Var& u, const NjfLossTerms& terms, const SparseOperator& grad);
double njf_loss_value(const Eigen::MatrixXd& u, const NjfLossTerms& terms, const SparseOperator& grad);

struct AdamConfig
{
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam
{
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update from Parameter::grad. Moments are keyed by position.
    void step(const std::vector<Parameter*>& params);

    const AdamConfig& config() const { return cfg_; }
    void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
    long steps() const { return t_; }
    const std::vector<Eigen::MatrixXd>& first_moments() const { return m_; }
    const std::vector<Eigen::MatrixXd>& second_moments() const { return v_; }

    void save(Checkpoint& ckpt, const std::vector<Parameter*>& params) const;
    void load(const Checkpoint& ckpt, const std::vector<Parameter*>& params);

private:
    AdamConfig cfg_;
    long t_ = 0;
    std::vector<Eigen::MatrixXd> m_;
    std::vector<Eigen::MatrixXd> v_;
};

struct Eigenbasis
{
    Eigen::VectorXd values;  // ascending
    Eigen::MatrixXd vectors; // |V| x K, M-orthonormal columns

    Eigen::Index size() const { return values.size(); }
};

constexpr Eigen::Index kDenseEigenLimit = 5000;

/// Generalized problem L phi = lambda M phi solved densely.
Eigenbasis compute_eigenbasis(const DifferentialOperators& ops, Eigen::Index k);

std::vector<double> hks_times(int count = 16, double lo = 0.01, double hi = 1.0);

struct HksTarget
{
    std::vector<double> times;
    Eigen::MatrixXd raw;    // |V| x T before normalization
    Eigen::MatrixXd fields; // per-channel min-max normalized
    Eigen::Index basis_size = 0;
};

HksTarget compute_hks(const Eigenbasis& eigen, const std::vector<double>& times);
/// Full-basis HKS of a mesh, normalized.
Eigen::MatrixXd hks_features(const DifferentialOperators& ops);

/// One training or evaluation item. Targets depend on the task.
struct Example
{
    std::string id;
    TriMesh mesh;
    int label = -1;                      // classification
    std::vector<int> vertex_labels;      // segmentation
    Eigen::MatrixXd target;              // regression: |V| x C; njf: |V| x 3 target vertices
    Eigen::RowVectorXd condition;        // broadcast to every vertex
    Eigen::MatrixXd inputs;              // custom input features
};

struct Dataset
{
    std::string task; // classification | segmentation | regression | njf
    int classes = 0;
    std::vector<std::string> class_names;
    std::vector<Example> train;
    std::vector<Example> test;
};

std::vector<Example> gen_synthetic_classification(int n_per_class, std::uint64_t seed);
std::vector<Example> gen_synthetic_segmentation(int count, std::uint64_t seed);
/// Single torus with its normalized HKS as the regression target.
std::vector<Example> gen_hks_overfit(int major_segments = 32, int minor_segments = 32);
/// Straight cylinder to bent cylinder pairs, conditioned on the bend curvature.
std::vector<Example> gen_cylinder_bend(int count, std::uint64_t seed);
Eigen::MatrixXd bend_vertices(const Eigen::MatrixXd& vertices, double curvature);

/// Leave-one-out 1-NN accuracy on z-scored (log area, area * first 8 nonzero eigenvalues).
double nearest_neighbor_accuracy(const std::vector<Example>& examples);

struct DatasetConfig
{
    std::string kind = "classification"; // classification | segmentation | hks | njf
    int train_count = 10;                 // per class for classification
    int test_count = 5;
    std::uint64_t seed = 0;
    int resolution = 32;                  // hks torus resolution

    nlohmann::json to_json() const;
    static DatasetConfig from_json(const nlohmann::json& j);
};

Dataset build_dataset(const DatasetConfig& cfg);

struct OptimizerConfig
{
    double learning_rate = 1e-3;
    /// Cosine decay target reached at the last iteration; negative keeps the rate constant.
    double final_learning_rate = -1.0;
    int batch_size = 16;
    int iterations = 1000;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;
    int eval_every = 0;

    double rate_at(long iteration) const;

    nlohmann::json to_json() const;
    static OptimizerConfig from_json(const nlohmann::json& j);
};

struct RunConfig
{
    NetworkConfig network;
    OptimizerConfig optimizer;
    DatasetConfig dataset;
    AugmentationConfig augmentation;
    std::string output_dir = "run";

    void validate() const;
    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);
};

/// Mesh, operators, factorization and network inputs for one example.
struct PreparedExample
{
    const Example* source = nullptr;
    std::shared_ptr<const MeshContext> ctx;
    Eigen::MatrixXd inputs;
    Eigen::MatrixXd cond;
    std::optional<NjfLossTerms> njf;
};

PreparedExample prepare_example(const Example& ex, const NetworkConfig& net, const AugmentationConfig* aug = nullptr,
                                std::uint64_t aug_seed = 0);
Eigen::MatrixXd network_inputs(const NetworkConfig& net, const MeshContext& ctx);

/// Task loss for one prepared example; `correct`/`total` receive accuracy counts.
Var example_loss(Tape& tape, PoissonNet& net, const PreparedExample& ex, double* correct = nullptr,
                 double* total = nullptr);

struct BatchResult
{
    double loss = 0.0;
    double correct = 0.0;
    double total = 0.0;
};

/// Mean loss over the batch; Parameter::grad receives the mean gradient,
/// reduced in batch order regardless of the thread count.
BatchResult accumulate_batch(PoissonNet& net, const std::vector<const PreparedExample*>& batch, int threads);

struct EvalResult
{
    double loss = 0.0;
    double accuracy = 0.0;
    bool has_accuracy = false;
    std::size_t count = 0;
};

EvalResult evaluate(PoissonNet& net, const std::vector<PreparedExample>& examples, int threads);

struct MetricRecord
{
    long iteration = 0;
    double loss = 0.0;
    std::optional<double> accuracy;
    std::optional<double> eval_loss;
    std::optional<double> eval_accuracy;
    double wall_time = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult
{
    std::vector<MetricRecord> log;
    std::filesystem::path checkpoint;
    double final_loss = 0.0;
};

struct TrainOptions
{
    int threads = 1;
    std::optional<std::filesystem::path> resume;
    /// Optional callback after every iteration; return false to stop early.
    std::function<bool(const MetricRecord&)> on_iteration;
};

/// Runs the optimization described by `run`, appending JSON lines to
/// <output_dir>/metrics.jsonl and writing checkpoints to <output_dir>.
TrainResult train_loop(const RunConfig& run, const Dataset& data, PoissonNet& net, const TrainOptions& options = {});

/// Checkpoint with network, optimizer state and the iteration counter.
Checkpoint make_training_checkpoint(PoissonNet& net, const Adam& adam, long iteration, const RunConfig& run);

/// Worker count from PNET_THREADS, defaulting to the hardware concurrency.
int default_thread_count();

} // namespace pnet
