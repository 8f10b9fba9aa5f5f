#include "pnet/mesh.hpp"

#include "pnet/errors.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace pnet {

namespace {

std::uint64_t edge_key(int a, int b)
{
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
}

// Parses the vertex part of an OBJ face token ("7", "7/2", "7//3", "-1").
long parse_face_index(const std::string& token, long num_vertices, const std::string& source,
                      std::size_t line)
{
    std::string head = token.substr(0, token.find('/'));
    long idx = 0;
    try {
        std::size_t used = 0;
        idx = std::stol(head, &used);
        if (used != head.size()) throw std::invalid_argument(head);
    } catch (const std::exception&) {
        throw ParseError(source, line, "malformed face index '" + token + "'");
    }
    if (idx == 0) throw ParseError(source, line, "face index 0 is not valid in OBJ");
    long zero_based = idx > 0 ? idx - 1 : num_vertices + idx;
    if (zero_based < 0 || zero_based >= num_vertices) {
        throw ParseError(source, line,
                         "face index " + std::to_string(idx) + " out of range (" +
                             std::to_string(num_vertices) + " vertices defined)");
    }
    return zero_based;
}

class UnionFind
{
public:
    explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t find(std::size_t x)
    {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    void unite(std::size_t a, std::size_t b)
    {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);
    }

private:
    std::vector<std::size_t> parent_;
};

} // namespace

nlohmann::json to_json(const MeshDiagnostics& diag)
{
    return {
        {"connectedComponents", diag.connected_components},
        {"boundaryEdgeCount", diag.boundary_edge_count},
        {"nonManifoldEdgeCount", diag.non_manifold_edge_count},
        {"degenerateFaceIds", diag.degenerate_face_ids},
        {"minFaceArea", diag.min_face_area},
    };
}

TriMesh read_obj(std::istream& in, const std::string& source_name)
{
    std::vector<Eigen::RowVector3d> verts;
    std::vector<Eigen::RowVector3i> tris;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Eigen::RowVector3d p;
            if (!(ls >> p[0] >> p[1] >> p[2])) {
                throw ParseError(source_name, line_no, "vertex record needs three coordinates");
            }
            if (!p.allFinite()) throw ParseError(source_name, line_no, "non-finite vertex coordinate");
            verts.push_back(p);
        } else if (tag == "f") {
            std::vector<long> poly;
            std::string tok;
            while (ls >> tok) {
                poly.push_back(parse_face_index(tok, static_cast<long>(verts.size()), source_name,
                                                line_no));
            }
            if (poly.size() < 3) {
                throw ParseError(source_name, line_no, "face record needs at least three vertices");
            }
            for (std::size_t k = 1; k + 1 < poly.size(); ++k) {
                Eigen::RowVector3i t(static_cast<int>(poly[0]), static_cast<int>(poly[k]),
                                     static_cast<int>(poly[k + 1]));
                if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
                    throw ParseError(source_name, line_no, "face repeats a vertex index");
                }
                tris.push_back(t);
            }
        }
    }
    if (verts.empty() || tris.empty()) {
        throw MeshError(source_name + ": mesh is empty (" + std::to_string(verts.size()) +
                        " vertices, " + std::to_string(tris.size()) + " faces)");
    }
    TriMesh mesh;
    mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
    mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i];
    for (std::size_t i = 0; i < tris.size(); ++i) mesh.faces.row(static_cast<Eigen::Index>(i)) = tris[i];
    return mesh;
}

TriMesh load_obj(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open mesh file '" + path.string() + "'");
    return read_obj(in, path.string());
}

void write_obj(const TriMesh& mesh, std::ostream& out)
{
    out << std::setprecision(9);
    for (Eigen::Index i = 0; i < mesh.num_vertices(); ++i) {
        out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' '
            << mesh.vertices(i, 2) << '\n';
    }
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        out << "f " << mesh.faces(t, 0) + 1 << ' ' << mesh.faces(t, 1) + 1 << ' '
            << mesh.faces(t, 2) + 1 << '\n';
    }
}

void save_obj(const TriMesh& mesh, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) throw Error("cannot write mesh file '" + path.string() + "'");
    write_obj(mesh, out);
}

void check_indices(const TriMesh& mesh)
{
    const Eigen::Index nv = mesh.num_vertices();
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        for (int k = 0; k < 3; ++k) {
            if (mesh.faces(t, k) < 0 || mesh.faces(t, k) >= nv) {
                throw MeshError("face " + std::to_string(t) + " references vertex " +
                                std::to_string(mesh.faces(t, k)) + " outside [0, " +
                                std::to_string(nv) + ")");
            }
        }
        if (mesh.faces(t, 0) == mesh.faces(t, 1) || mesh.faces(t, 1) == mesh.faces(t, 2) ||
            mesh.faces(t, 0) == mesh.faces(t, 2)) {
            throw MeshError("face " + std::to_string(t) + " repeats a vertex index");
        }
    }
}

double face_area(const TriMesh& mesh, Eigen::Index face)
{
    const Eigen::Vector3d a = mesh.vertices.row(mesh.faces(face, 0)).transpose();
    const Eigen::Vector3d b = mesh.vertices.row(mesh.faces(face, 1)).transpose();
    const Eigen::Vector3d c = mesh.vertices.row(mesh.faces(face, 2)).transpose();
    return 0.5 * (b - a).cross(c - a).norm();
}

Eigen::VectorXd face_areas(const TriMesh& mesh)
{
    Eigen::VectorXd areas(mesh.num_faces());
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) areas[t] = face_area(mesh, t);
    return areas;
}

double total_area(const TriMesh& mesh)
{
    return face_areas(mesh).sum();
}

double bounding_box_diagonal(const TriMesh& mesh)
{
    if (mesh.num_vertices() == 0) return 0.0;
    return (mesh.vertices.colwise().maxCoeff() - mesh.vertices.colwise().minCoeff()).norm();
}

double area_epsilon(const TriMesh& mesh)
{
    const double d = bounding_box_diagonal(mesh);
    return 1e-12 * d * d;
}

std::vector<int> connected_component_ids(const TriMesh& mesh, std::size_t* count)
{
    const auto nv = static_cast<std::size_t>(mesh.num_vertices());
    UnionFind uf(nv);
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        uf.unite(static_cast<std::size_t>(mesh.faces(t, 0)), static_cast<std::size_t>(mesh.faces(t, 1)));
        uf.unite(static_cast<std::size_t>(mesh.faces(t, 1)), static_cast<std::size_t>(mesh.faces(t, 2)));
    }
    std::vector<int> ids(nv, -1);
    std::unordered_map<std::size_t, int> root_to_id;
    for (std::size_t v = 0; v < nv; ++v) {
        auto [it, inserted] = root_to_id.try_emplace(uf.find(v), static_cast<int>(root_to_id.size()));
        ids[v] = it->second;
    }
    if (count) *count = root_to_id.size();
    return ids;
}

MeshDiagnostics validate(const TriMesh& mesh)
{
    MeshDiagnostics diag;
    connected_component_ids(mesh, &diag.connected_components);

    std::unordered_map<std::uint64_t, int> edge_faces;
    edge_faces.reserve(static_cast<std::size_t>(3 * mesh.num_faces()));
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        for (int k = 0; k < 3; ++k) ++edge_faces[edge_key(mesh.faces(t, k), mesh.faces(t, (k + 1) % 3))];
    }
    for (const auto& [key, n] : edge_faces) {
        if (n == 1) ++diag.boundary_edge_count;
        if (n > 2) ++diag.non_manifold_edge_count;
    }

    const double eps = area_epsilon(mesh);
    diag.min_face_area = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        const double a = face_area(mesh, t);
        diag.min_face_area = std::min(diag.min_face_area, a);
        if (a <= eps) diag.degenerate_face_ids.push_back(t);
    }
    if (mesh.num_faces() == 0) diag.min_face_area = 0.0;
    return diag;
}

TriMesh subdivide_midpoint(const TriMesh& mesh)
{
    const Eigen::Index nv = mesh.num_vertices();
    const Eigen::Index nf = mesh.num_faces();
    std::unordered_map<std::uint64_t, int> midpoint;
    std::vector<std::pair<int, int>> new_edges;
    auto mid = [&](int a, int b) {
        auto [it, inserted] =
            midpoint.try_emplace(edge_key(a, b), static_cast<int>(nv + static_cast<Eigen::Index>(new_edges.size())));
        if (inserted) new_edges.emplace_back(a, b);
        return it->second;
    };

    TriMesh out;
    out.faces.resize(4 * nf, 3);
    for (Eigen::Index t = 0; t < nf; ++t) {
        const int a = mesh.faces(t, 0), b = mesh.faces(t, 1), c = mesh.faces(t, 2);
        const int ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
        out.faces.row(4 * t + 0) << a, ab, ca;
        out.faces.row(4 * t + 1) << ab, b, bc;
        out.faces.row(4 * t + 2) << ca, bc, c;
        out.faces.row(4 * t + 3) << ab, bc, ca;
    }
    out.vertices.resize(nv + static_cast<Eigen::Index>(new_edges.size()), 3);
    out.vertices.topRows(nv) = mesh.vertices;
    for (std::size_t e = 0; e < new_edges.size(); ++e) {
        out.vertices.row(nv + static_cast<Eigen::Index>(e)) =
            0.5 * (mesh.vertices.row(new_edges[e].first) + mesh.vertices.row(new_edges[e].second));
    }
    return out;
}

TriMesh jitter_vertices(const TriMesh& mesh, double sigma, std::uint64_t seed)
{
    if (sigma < 0.0) throw Error("jitter sigma must be non-negative");
    TriMesh out = mesh;
    if (sigma == 0.0) return out;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index i = 0; i < out.num_vertices(); ++i) {
        for (int k = 0; k < 3; ++k) out.vertices(i, k) += noise(rng);
    }
    return out;
}

PartialMesh drop_faces(const TriMesh& mesh, double fraction, std::uint64_t seed)
{
    if (!(fraction >= 0.0 && fraction < 1.0)) throw Error("drop fraction must lie in [0, 1)");
    const Eigen::Index nf = mesh.num_faces();
    const auto keep = static_cast<Eigen::Index>(std::llround((1.0 - fraction) * static_cast<double>(nf)));
    if (keep <= 0) throw MeshError("drop_faces would remove every face");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(nf));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> kept(static_cast<std::size_t>(nf), 0);
    for (Eigen::Index i = 0; i < keep; ++i) kept[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

    PartialMesh out;
    out.vertex_map.assign(static_cast<std::size_t>(mesh.num_vertices()), -1);
    for (Eigen::Index t = 0; t < nf; ++t) {
        if (!kept[static_cast<std::size_t>(t)]) continue;
        for (int k = 0; k < 3; ++k) out.vertex_map[static_cast<std::size_t>(mesh.faces(t, k))] = 0;
    }
    Eigen::Index next = 0;
    for (auto& m : out.vertex_map) {
        if (m == 0) m = next++;
    }
    out.mesh.vertices.resize(next, 3);
    for (std::size_t v = 0; v < out.vertex_map.size(); ++v) {
        if (out.vertex_map[v] >= 0) out.mesh.vertices.row(out.vertex_map[v]) = mesh.vertices.row(static_cast<Eigen::Index>(v));
    }
    out.mesh.faces.resize(keep, 3);
    Eigen::Index row = 0;
    for (Eigen::Index t = 0; t < nf; ++t) {
        if (!kept[static_cast<std::size_t>(t)]) continue;
        for (int k = 0; k < 3; ++k) {
            out.mesh.faces(row, k) = static_cast<int>(out.vertex_map[static_cast<std::size_t>(mesh.faces(t, k))]);
        }
        ++row;
    }
    return out;
}

TriMesh transformed(const TriMesh& mesh, const Eigen::Matrix3d& linear,
                    const Eigen::RowVector3d& translation)
{
    TriMesh out = mesh;
    out.vertices = (mesh.vertices * linear.transpose()).rowwise() + translation;
    return out;
}

TriMesh permuted(const TriMesh& mesh, const std::vector<Eigen::Index>& perm,
                 const std::vector<Eigen::Index>& face_perm)
{
    if (static_cast<Eigen::Index>(perm.size()) != mesh.num_vertices()) {
        throw DimensionError("vertex permutation has wrong length");
    }
    TriMesh out;
    out.vertices.resize(mesh.num_vertices(), 3);
    for (std::size_t i = 0; i < perm.size(); ++i) out.vertices.row(perm[i]) = mesh.vertices.row(static_cast<Eigen::Index>(i));
    out.faces.resize(mesh.num_faces(), 3);
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        const Eigen::Index dst = face_perm.empty() ? t : face_perm[static_cast<std::size_t>(t)];
        for (int k = 0; k < 3; ++k) out.faces(dst, k) = static_cast<int>(perm[static_cast<std::size_t>(mesh.faces(t, k))]);
    }
    return out;
}

std::uint64_t mesh_hash(const TriMesh& mesh)
{
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (Eigen::Index i = 0; i < mesh.num_vertices(); ++i) {
        for (int k = 0; k < 3; ++k) {
            const double x = mesh.vertices(i, k);
            mix(&x, sizeof x);
        }
    }
    for (Eigen::Index t = 0; t < mesh.num_faces(); ++t) {
        for (int k = 0; k < 3; ++k) {
            const std::int32_t x = mesh.faces(t, k);
            mix(&x, sizeof x);
        }
    }
    return h;
}

TriMesh make_icosahedron()
{
    const double p = (1.0 + std::sqrt(5.0)) / 2.0;
    TriMesh m;
    m.vertices.resize(12, 3);
    m.vertices << -1, p, 0, 1, p, 0, -1, -p, 0, 1, -p, 0, 0, -1, p, 0, 1, p, 0, -1, -p, 0, 1, -p, p, 0,
        -1, p, 0, 1, -p, 0, -1, -p, 0, 1;
    m.vertices.rowwise().normalize();
    m.faces.resize(20, 3);
    m.faces << 0, 11, 5, 0, 5, 1, 0, 1, 7, 0, 7, 10, 0, 10, 11, 1, 5, 9, 5, 11, 4, 11, 10, 2, 10, 7, 6,
        7, 1, 8, 3, 9, 4, 3, 4, 2, 3, 2, 6, 3, 6, 8, 3, 8, 9, 4, 9, 5, 2, 4, 11, 6, 2, 10, 8, 6, 7, 9,
        8, 1;
    return m;
}

TriMesh make_icosphere(int subdivisions, double radius)
{
    TriMesh m = make_icosahedron();
    for (int i = 0; i < subdivisions; ++i) {
        m = subdivide_midpoint(m);
        m.vertices.rowwise().normalize();
    }
    m.vertices *= radius;
    return m;
}

TriMesh make_torus(int major_segments, int minor_segments, double major_radius, double minor_radius)
{
    const int n = major_segments, k = minor_segments;
    TriMesh m;
    m.vertices.resize(n * k, 3);
    m.faces.resize(2 * n * k, 3);
    for (int i = 0; i < n; ++i) {
        const double u = 2.0 * M_PI * i / n;
        for (int j = 0; j < k; ++j) {
            const double v = 2.0 * M_PI * j / k;
            const double r = major_radius + minor_radius * std::cos(v);
            m.vertices.row(i * k + j) << r * std::cos(u), r * std::sin(u), minor_radius * std::sin(v);
        }
    }
    int f = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            const int a = i * k + j, b = ((i + 1) % n) * k + j, c = ((i + 1) % n) * k + (j + 1) % k,
                      d = i * k + (j + 1) % k;
            m.faces.row(f++) << a, b, c;
            m.faces.row(f++) << a, c, d;
        }
    }
    return m;
}

TriMesh make_box(int n)
{
    // Six n x n grids sharing boundary vertices, merged through a position key.
    std::vector<Eigen::RowVector3d> verts;
    std::unordered_map<std::uint64_t, int> lookup;
    auto vertex = [&](const Eigen::Vector3i& g) {
        const std::uint64_t key = (static_cast<std::uint64_t>(g[0]) << 40) | (static_cast<std::uint64_t>(g[1]) << 20) |
                                  static_cast<std::uint64_t>(g[2]);
        auto [it, inserted] = lookup.try_emplace(key, static_cast<int>(verts.size()));
        if (inserted) verts.push_back(g.cast<double>().transpose() / n - Eigen::RowVector3d::Constant(0.5));
        return it->second;
    };
    std::vector<Eigen::RowVector3i> tris;
    for (int axis = 0; axis < 3; ++axis) {
        for (int side = 0; side < 2; ++side) {
            const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    Eigen::Vector3i g[4];
                    const int di[4] = {0, 1, 1, 0}, dj[4] = {0, 0, 1, 1};
                    int id[4];
                    for (int c = 0; c < 4; ++c) {
                        g[c].setZero();
                        g[c][axis] = side * n;
                        g[c][a1] = i + di[c];
                        g[c][a2] = j + dj[c];
                        id[c] = vertex(g[c]);
                    }
                    // (a1, a2, axis) is right-handed, so this winding faces +axis.
                    if (side == 1) {
                        tris.emplace_back(id[0], id[1], id[2]);
                        tris.emplace_back(id[0], id[2], id[3]);
                    } else {
                        tris.emplace_back(id[0], id[2], id[1]);
                        tris.emplace_back(id[0], id[3], id[2]);
                    }
                }
            }
        }
    }
    TriMesh m;
    m.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) m.vertices.row(static_cast<Eigen::Index>(i)) = verts[i];
    m.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
    for (std::size_t i = 0; i < tris.size(); ++i) m.faces.row(static_cast<Eigen::Index>(i)) = tris[i];
    return m;
}

TriMesh make_cylinder(int around, int along, double radius, double length)
{
    TriMesh m;
    m.vertices.resize(around * (along + 1), 3);
    for (int j = 0; j <= along; ++j) {
        for (int i = 0; i < around; ++i) {
            const double a = 2.0 * M_PI * i / around;
            m.vertices.row(j * around + i) << radius * std::cos(a), radius * std::sin(a),
                length * j / along;
        }
    }
    m.faces.resize(2 * around * along, 3);
    int f = 0;
    for (int j = 0; j < along; ++j) {
        for (int i = 0; i < around; ++i) {
            const int a = j * around + i, b = j * around + (i + 1) % around,
                      c = (j + 1) * around + (i + 1) % around, d = (j + 1) * around + i;
            m.faces.row(f++) << a, b, c;
            m.faces.row(f++) << a, c, d;
        }
    }
    return m;
}

TriMesh make_grid(int nx, int ny, double sx, double sy, bool alternate)
{
    TriMesh m;
    m.vertices.resize((nx + 1) * (ny + 1), 3);
    for (int j = 0; j <= ny; ++j) {
        for (int i = 0; i <= nx; ++i) m.vertices.row(j * (nx + 1) + i) << sx * i / nx, sy * j / ny, 0.0;
    }
    m.faces.resize(2 * nx * ny, 3);
    int f = 0;
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            const int a = j * (nx + 1) + i, b = a + 1, c = a + nx + 2, d = a + nx + 1;
            if (alternate && (i + j) % 2 == 1) {
                m.faces.row(f++) << a, b, d;
                m.faces.row(f++) << b, c, d;
            } else {
                m.faces.row(f++) << a, b, c;
                m.faces.row(f++) << a, c, d;
            }
        }
    }
    return m;
}

TriMesh make_unit_square()
{
    TriMesh m;
    m.vertices.resize(4, 3);
    m.vertices << 0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0;
    m.faces.resize(2, 3);
    m.faces << 0, 1, 2, 0, 2, 3;
    return m;
}

} // namespace pnet
