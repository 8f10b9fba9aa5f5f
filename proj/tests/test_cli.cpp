#include "pnet/cli.hpp"
#include "pnet/mesh.hpp"
#include "pnet/operators.hpp"

#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pnet;

namespace {

struct Run
{
    int code;
    std::string out;
    std::string err;
};

Run pnet_cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "pnet");
    std::ostringstream out, err;
    const int code = cli_dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

struct Workspace
{
    std::filesystem::path dir;
    explicit Workspace(const std::string& name)
        : dir(std::filesystem::temp_directory_path() / ("pnet_test_cli_" + name))
    {
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    ~Workspace() { std::filesystem::remove_all(dir); }
    std::string path(const std::string& file) const { return (dir / file).string(); }
};

std::vector<std::vector<std::string>> read_csv(const std::string& path)
{
    std::ifstream in(path);
    std::vector<std::vector<std::string>> rows;
    for (std::string line; std::getline(in, line);) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::string write_run_config(const Workspace& ws, const std::string& out_dir)
{
    const nlohmann::json cfg = {
        {"network",
         {{"blockCount", 1}, {"width", 4}, {"vecMLPDepth", 1}, {"head", {{"kind", "segmentation"}, {"outputs", 3}}}}},
        {"optimizer", {{"learningRate", 0.01}, {"batchSize", 2}, {"iterations", 3}, {"seed", 5}, {"evalEvery", 3}}},
        {"dataset", {{"kind", "segmentation"}, {"trainCount", 2}, {"testCount", 1}, {"seed", 1}}},
        {"outputDir", out_dir},
    };
    const std::string path = ws.path("run.json");
    std::ofstream(path) << cfg.dump(2);
    return path;
}

} // namespace

TEST_CASE("usage errors exit 1")
{
    const Run none = pnet_cli({});
    CHECK(none.code == kExitUsage);
    const Run unknown = pnet_cli({"frobnicate"});
    CHECK(unknown.code == kExitUsage);
    CHECK(unknown.err.find("unknown subcommand") != std::string::npos);
    CHECK(unknown.err.find("validate") != std::string::npos);
    CHECK(pnet_cli({"solve", "--bogus"}).code == kExitUsage);

    const Run missing = pnet_cli({"train", "--config", "/nonexistent/dir/run.json"});
    CHECK(missing.code == kExitUsage);
    CHECK((missing.err + missing.out).find("/nonexistent/dir/run.json") != std::string::npos);
}

TEST_CASE("help for every subcommand")
{
    for (const char* sub : {"ops", "solve", "greens", "gradcheck", "train", "eval", "hks", "spectrum", "robustness",
                            "validate"}) {
        const Run r = pnet_cli({sub, "--help"});
        CHECK(r.code == kExitOk);
        CHECK(!r.out.empty());
    }
}

TEST_CASE("validate and data errors")
{
    const Workspace ws("validate");
    save_obj(make_icosphere(1), ws.path("ico.obj"));
    const Run ok = pnet_cli({"validate", ws.path("ico.obj")});
    CHECK(ok.code == kExitOk);
    const auto j = nlohmann::json::parse(ok.out);
    CHECK(j["connectedComponents"] == 1);
    CHECK(j["boundaryEdgeCount"] == 0);

    std::ofstream(ws.path("bad.obj")) << "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n";
    const Run bad = pnet_cli({"validate", ws.path("bad.obj")});
    CHECK(bad.code == kExitData);
    CHECK(bad.err.find("bad.obj") != std::string::npos);
}

TEST_CASE("ops dumps triplets that rebuild the operators")
{
    const Workspace ws("ops");
    const TriMesh mesh = make_torus(8, 6);
    save_obj(mesh, ws.path("t.obj"));
    const Run r = pnet_cli({"ops", ws.path("t.obj"), "--out-dir", ws.path("ops")});
    REQUIRE(r.code == kExitOk);
    const auto meta = nlohmann::json::parse(std::ifstream(ws.path("ops/ops.json")));
    CHECK(meta["operators"]["grad"]["rows"] == 2 * mesh.num_faces());
    CHECK(meta.contains("meshHash"));

    const DifferentialOperators ops = build_operators(load_obj(ws.path("t.obj")));
    const auto rows = read_csv(ws.path("ops/laplacian.csv"));
    REQUIRE(rows.size() == static_cast<std::size_t>(ops.laplacian.nonZeros()) + 1);
    CHECK(rows[0] == std::vector<std::string>{"row", "col", "value"});
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const double v = std::stod(rows[i][2]);
        CHECK(v == ops.laplacian.coeff(std::stol(rows[i][0]), std::stol(rows[i][1])));
    }
    for (const char* f : {"grad.csv", "mass_vertex.csv", "mass_face.csv", "face_average.csv"}) {
        CHECK(std::filesystem::exists(ws.dir / "ops" / f));
    }
}

TEST_CASE("solve and greens")
{
    const Workspace ws("solve");
    const TriMesh mesh = make_icosphere(1);
    save_obj(mesh, ws.path("m.obj"));
    const DifferentialOperators ops = build_operators(mesh);
    const Eigen::VectorXd s = mesh.vertices.col(0).array().square() + mesh.vertices.col(2).array();
    const Eigen::VectorXd g = ops.grad * s;
    {
        std::ofstream field(ws.path("f.csv"));
        field << "face,channel,re,im\n";
        for (Eigen::Index t = 0; t < ops.num_faces(); ++t) field << t << ",0," << g(2 * t) << "," << g(2 * t + 1) << "\n";
        field.precision(17);
    }
    const Run r = pnet_cli({"solve", ws.path("m.obj"), "--field", ws.path("f.csv"), "--out", ws.path("u.csv")});
    REQUIRE(r.code == kExitOk);
    const auto rows = read_csv(ws.path("u.csv"));
    REQUIRE(rows.size() == static_cast<std::size_t>(mesh.num_vertices()) + 1);
    const Eigen::VectorXd expected = mass_centered(ops.mass_vertex, s);
    double err = 0.0;
    for (std::size_t i = 1; i < rows.size(); ++i) err = std::max(err, std::abs(std::stod(rows[i][2]) - expected(std::stol(rows[i][0]))));
    CHECK(err < 1e-5); // the field file is written at default stream precision

    const Run gr = pnet_cli({"greens", ws.path("m.obj"), "--vertex", "3"});
    REQUIRE(gr.code == kExitOk);
    CHECK(gr.out.rfind("vertex,value\n", 0) == 0);
    CHECK(pnet_cli({"greens", ws.path("m.obj"), "--vertex", "999"}).code == kExitData);

    std::ofstream(ws.path("bad.csv")) << "face,channel,re,im\n0,0,1\n";
    CHECK(pnet_cli({"solve", ws.path("m.obj"), "--field", ws.path("bad.csv")}).code == kExitData);
}

TEST_CASE("hks and spectrum")
{
    const Workspace ws("spectrum");
    save_obj(make_torus(10, 6), ws.path("t.obj"));
    const Run h = pnet_cli({"hks", ws.path("t.obj"), "--out", ws.path("hks.csv")});
    REQUIRE(h.code == kExitOk);
    const auto rows = read_csv(ws.path("hks.csv"));
    CHECK(rows.size() == 61);
    CHECK(rows[0].size() == 17);

    const Run s = pnet_cli({"spectrum", "--mesh", ws.path("t.obj"), "--features", ws.path("hks.csv"), "--k", "256"});
    REQUIRE(s.code == kExitOk);
    const auto j = nlohmann::json::parse(s.out);
    CHECK(j["K"] == 60);
    CHECK(j["channels"] == 16);
    CHECK(j["maxPower"].size() == 60);
}

TEST_CASE("gradcheck")
{
    const Run r = pnet_cli({"gradcheck", "--head", "segmentation", "--width", "3", "--blocks", "1"});
    CHECK(r.code == kExitOk);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["passed"] == true);
    CHECK(pnet_cli({"gradcheck", "--head", "nope"}).code == kExitData);
}

TEST_CASE("train, eval, robustness, spectrum from a checkpoint; repeated runs agree")
{
    const Workspace ws("train");
    const std::string cfg = write_run_config(ws, ws.path("run"));
    const Run a = pnet_cli({"train", "--config", cfg, "--threads", "2"});
    REQUIRE(a.code == kExitOk);
    const auto summary = nlohmann::json::parse(a.out);
    CHECK(summary["iterations"] == 3);
    const std::string ckpt = summary["checkpoint"];
    CHECK(std::filesystem::exists(ckpt));

    auto strip = [](const std::string& path) {
        std::vector<nlohmann::json> lines;
        std::ifstream in(path);
        for (std::string line; std::getline(in, line);) {
            auto j = nlohmann::json::parse(line);
            j.erase("wallTime");
            lines.push_back(j);
        }
        return lines;
    };
    const auto first = strip(ws.path("run/metrics.jsonl"));
    REQUIRE(pnet_cli({"train", "--config", cfg, "--output-dir", ws.path("again"), "--threads", "1"}).code == kExitOk);
    CHECK(strip(ws.path("again/metrics.jsonl")) == first);

    const Run e1 = pnet_cli({"eval", "--checkpoint", ckpt});
    const Run e2 = pnet_cli({"eval", "--checkpoint", ckpt, "--threads", "3"});
    REQUIRE(e1.code == kExitOk);
    CHECK(e1.out == e2.out);
    CHECK(nlohmann::json::parse(e1.out).contains("accuracy"));

    save_obj(make_icosphere(2), ws.path("s.obj"));
    const Run p = pnet_cli({"eval", "--checkpoint", ckpt, "--mesh", ws.path("s.obj"), "--out", ws.path("pred.csv")});
    REQUIRE(p.code == kExitOk);
    CHECK(read_csv(ws.path("pred.csv")).size() == 163);

    const Run rob = pnet_cli({"robustness", "--checkpoint", ckpt, "--mesh", ws.path("s.obj"), "--perturb", "none",
                              "subdivide", "jitter:0.003"});
    REQUIRE(rob.code == kExitOk);
    const auto rj = nlohmann::json::parse(rob.out);
    CHECK(rj["entries"].size() == 3);
    CHECK(rj["entries"][0]["relativeL2"] == 0.0);

    const Run spec = pnet_cli({"spectrum", "--mesh", ws.path("s.obj"), "--checkpoint", ckpt});
    REQUIRE(spec.code == kExitOk);
    CHECK(nlohmann::json::parse(spec.out)["layerTag"] == "block0");

    const Run resumed = pnet_cli({"train", "--config", cfg, "--output-dir", ws.path("resumed"), "--iterations", "4",
                                  "--resume", ckpt});
    CHECK(resumed.code == kExitOk);
}

TEST_CASE("installed binary exit codes")
{
    const std::string bin = PNET_CLI_PATH;
    CHECK(WEXITSTATUS(std::system((bin + " frobnicate >/dev/null 2>&1").c_str())) == kExitUsage);
    CHECK(WEXITSTATUS(std::system((bin + " train --config /nonexistent.json >/dev/null 2>&1").c_str())) == kExitUsage);
    CHECK(WEXITSTATUS(std::system((bin + " validate --help >/dev/null 2>&1").c_str())) == kExitOk);
}
