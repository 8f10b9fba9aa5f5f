#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace pnet {

/// Triangle mesh: vertex positions and 0-based vertex-index triples.
struct TriMesh
{
    Eigen::MatrixX3d vertices;
    Eigen::MatrixX3i faces;

    Eigen::Index num_vertices() const { return vertices.rows(); }
    Eigen::Index num_faces() const { return faces.rows(); }
};

struct MeshDiagnostics
{
    std::size_t connected_components = 0;
    std::size_t boundary_edge_count = 0;
    std::size_t non_manifold_edge_count = 0;
    std::vector<Eigen::Index> degenerate_face_ids;
    double min_face_area = 0.0;
};

nlohmann::json to_json(const MeshDiagnostics& diag);

/// Reads an ASCII Wavefront OBJ. Only `v` and `f` records are used; polygons
/// are fan-triangulated and 1-based (or negative relative) indices become
/// 0-based. Throws ParseError with the offending line on malformed input.
TriMesh load_obj(const std::filesystem::path& path);
TriMesh read_obj(std::istream& in, const std::string& source_name = "<stream>");

/// Writes positions at 9 significant digits.
void save_obj(const TriMesh& mesh, const std::filesystem::path& path);
void write_obj(const TriMesh& mesh, std::ostream& out);

/// Throws MeshError if a face index is out of range or a face repeats a vertex.
void check_indices(const TriMesh& mesh);

double face_area(const TriMesh& mesh, Eigen::Index face);
Eigen::VectorXd face_areas(const TriMesh& mesh);
double total_area(const TriMesh& mesh);
double bounding_box_diagonal(const TriMesh& mesh);

/// Faces with area at or below this are reported as degenerate.
double area_epsilon(const TriMesh& mesh);

MeshDiagnostics validate(const TriMesh& mesh);

/// Per-vertex component id (0-based, in order of first appearance).
std::vector<int> connected_component_ids(const TriMesh& mesh, std::size_t* count = nullptr);

/// 1 -> 4 split at edge midpoints. Original vertices keep their ids; new
/// midpoint vertices are appended in first-encounter order of edges.
TriMesh subdivide_midpoint(const TriMesh& mesh);

/// Adds i.i.d. N(0, sigma^2) offsets to every coordinate.
TriMesh jitter_vertices(const TriMesh& mesh, double sigma, std::uint64_t seed);

struct PartialMesh
{
    TriMesh mesh;
    /// old vertex id -> new vertex id, or -1 when the vertex was pruned.
    std::vector<Eigen::Index> vertex_map;
};

/// Removes round(fraction * |F|) uniformly chosen faces and prunes vertices
/// that are no longer referenced.
PartialMesh drop_faces(const TriMesh& mesh, double fraction, std::uint64_t seed);

/// Rigid/affine helpers used by augmentation and the invariance tests.
TriMesh transformed(const TriMesh& mesh, const Eigen::Matrix3d& linear,
                    const Eigen::RowVector3d& translation = Eigen::RowVector3d::Zero());

/// Relabels vertices so that new id perm[i] holds old vertex i; faces are
/// reordered by face_perm the same way (face_perm may be empty for identity).
TriMesh permuted(const TriMesh& mesh, const std::vector<Eigen::Index>& perm,
                 const std::vector<Eigen::Index>& face_perm = {});

/// FNV-1a over the raw vertex and face data.
std::uint64_t mesh_hash(const TriMesh& mesh);

// Procedural shapes, all single-component and closed unless noted.
TriMesh make_icosahedron();
TriMesh make_icosphere(int subdivisions, double radius = 1.0);
TriMesh make_torus(int major_segments, int minor_segments, double major_radius = 1.0,
                   double minor_radius = 0.4);
/// Axis-aligned cube of edge length 1 centred at the origin, each side split into n x n quads.
TriMesh make_box(int n);
/// Open tube along z in [0, length]; has two boundary loops.
TriMesh make_cylinder(int around, int along, double radius, double length);
/// Planar grid over [0, sx] x [0, sy] in the z = 0 plane; alternating diagonals when `alternate`.
TriMesh make_grid(int nx, int ny, double sx = 1.0, double sy = 1.0, bool alternate = false);
/// Two triangles (0,1,2),(0,2,3) over the unit square.
TriMesh make_unit_square();

} // namespace pnet
