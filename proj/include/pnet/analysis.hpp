#pragma once

#include "pnet/network.hpp"
#include "pnet/training.hpp"

#include <Eigen/Core>

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pnet {

struct SpectrumReport
{
    Eigen::Index k = 0;
    Eigen::MatrixXd coefficients;       // K x C, phi_k^T M s^c
    Eigen::MatrixXd per_channel_power;  // K x C, each column sums to 1 (zero columns stay zero)
    Eigen::VectorXd max_power;          // channel-wise max
    std::vector<bool> zero_channels;
    std::string mesh_id;
    std::string layer_tag;

    /// Share of the max-power spectrum at modes >= first_mode (1-based).
    double high_frequency_fraction(Eigen::Index first_mode) const;
    /// Per-channel share of power at modes >= first_mode, averaged over nonzero channels.
    double mean_channel_high_frequency_fraction(Eigen::Index first_mode) const;
    nlohmann::json to_json() const;
};

SpectrumReport power_spectrum(const Eigen::MatrixXd& features, const Eigenbasis& eigen,
                              const Eigen::VectorXd& mass_vertex, std::string mesh_id = {}, std::string layer_tag = {});

/// Features with every mode at index >= k (0-based) removed.
Eigen::MatrixXd truncate_spectrum(const Eigen::MatrixXd& features, const Eigenbasis& eigen,
                                  const Eigen::VectorXd& mass_vertex, Eigen::Index k);

struct Perturbation
{
    enum class Kind
    {
        None,
        Subdivide,
        Jitter,  // amount = sigma as a fraction of the bounding-box diagonal
        Partial, // amount = fraction of faces removed
        External,
    };

    Kind kind = Kind::None;
    double amount = 0.0;
    std::uint64_t seed = 0;
    std::string path; // External
    std::optional<TriMesh> mesh;

    std::string tag() const;
    /// "none", "subdivide", "jitter:0.003", "partial:0.1", "external:file.obj"
    static Perturbation parse(const std::string& spec, std::uint64_t seed = 0);
};

struct RobustnessEntry
{
    std::string perturbation;
    bool skipped = false;
    std::string reason;
    std::string correspondence; // identity | nearest-vertex | global
    std::size_t shared_vertices = 0;
    Eigen::Index perturbed_vertices = 0;
    double relative_l2 = 0.0;
    std::optional<double> agreement;

    nlohmann::json to_json() const;
};

struct RobustnessReport
{
    std::string mesh_id;
    std::string head;
    std::vector<RobustnessEntry> entries;

    nlohmann::json to_json() const;
};

/// For every vertex of `query`, the closest vertex of `reference`, ties to the lowest index.
std::vector<Eigen::Index> nearest_vertices(const Eigen::MatrixXd& query, const Eigen::MatrixXd& reference);

RobustnessReport robustness_report(PoissonNet& net, const TriMesh& mesh, const std::vector<Perturbation>& perturbations,
                                   const Eigen::RowVectorXd& condition = {}, std::string mesh_id = {});

struct NetworkGradCheckSetup
{
    HeadKind head = HeadKind::Segmentation;
    int width = 8;
    int blocks = 2;
    int vec_mlp_depth = 2;
    int conditional_width = 0;
    std::uint64_t seed = 1;
    /// Noise added to every parameter so zero-initialised layers carry gradient.
    double perturb = 0.1;
};

/// Finite-difference check of a small network with the given head on `mesh`,
/// using that head's training loss against a fixed synthetic target.
GradCheckReport network_gradcheck(const TriMesh& mesh, const NetworkGradCheckSetup& setup,
                                  const GradCheckOptions& options = {});

} // namespace pnet
