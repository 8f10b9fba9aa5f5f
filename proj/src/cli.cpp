#include "pnet/cli.hpp"

#include "pnet/analysis.hpp"
#include "pnet/errors.hpp"
#include "pnet/mesh.hpp"
#include "pnet/network.hpp"
#include "pnet/operators.hpp"
#include "pnet/poisson.hpp"
#include "pnet/training.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace pnet {

namespace {

using Table = std::vector<std::vector<double>>;

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

bool parse_double(const std::string& s, double& v)
{
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) return false;
    const char* first = s.data() + b;
    const char* last = s.data() + e + 1;
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    return ec == std::errc() && ptr == last;
}

/// Numeric CSV; a first line with any non-numeric cell is treated as a header.
Table read_csv(const std::filesystem::path& path, std::vector<std::string>* header = nullptr)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    Table rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        std::vector<double> row(cells.size());
        bool numeric = true;
        for (std::size_t i = 0; i < cells.size(); ++i) numeric = numeric && parse_double(cells[i], row[i]);
        if (!numeric) {
            if (rows.empty() && lineno == 1) {
                if (header) *header = cells;
                continue;
            }
            throw ParseError(path.string(), lineno, "non-numeric CSV row");
        }
        if (!rows.empty() && row.size() != rows.front().size()) {
            throw ParseError(path.string(), lineno, "expected " + std::to_string(rows.front().size()) + " columns");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_triplets(const std::filesystem::path& path, const SparseOperator& op)
{
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << "row,col,value\n";
    for (const Triplet& t : to_triplets(op)) out << t.row << "," << t.col << "," << fmt(t.value) << "\n";
}

void write_vertex_table(std::ostream& out, const Eigen::MatrixXd& values, const std::string& prefix)
{
    out << "vertex";
    for (Eigen::Index c = 0; c < values.cols(); ++c) out << "," << prefix << c;
    out << "\n";
    for (Eigen::Index v = 0; v < values.rows(); ++v) {
        out << v;
        for (Eigen::Index c = 0; c < values.cols(); ++c) out << "," << fmt(values(v, c));
        out << "\n";
    }
}

/// Writes to `path`, or to `fallback` when the path is empty.
void emit(const std::string& path, std::ostream& fallback, const std::function<void(std::ostream&)>& writer)
{
    if (path.empty()) {
        writer(fallback);
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    writer(out);
}

std::string hex(std::uint64_t v)
{
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

Eigen::RowVectorXd parse_condition(const std::vector<double>& values)
{
    Eigen::RowVectorXd c(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) c[static_cast<Eigen::Index>(i)] = values[i];
    return c;
}

Eigen::MatrixXd load_features(const std::filesystem::path& path, Eigen::Index vertices)
{
    std::vector<std::string> header;
    const Table t = read_csv(path, &header);
    if (t.empty()) throw Error("feature file '" + path.string() + "' has no rows");
    const bool indexed = !header.empty() && header.front() == "vertex";
    const std::size_t skip = indexed ? 1 : 0;
    if (static_cast<Eigen::Index>(t.size()) != vertices) {
        throw DimensionError("feature file has " + std::to_string(t.size()) + " rows, mesh has " +
                             std::to_string(vertices) + " vertices");
    }
    Eigen::MatrixXd f(vertices, static_cast<Eigen::Index>(t.front().size() - skip));
    for (std::size_t r = 0; r < t.size(); ++r) {
        for (std::size_t c = skip; c < t[r].size(); ++c) {
            f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - skip)) = t[r][c];
        }
    }
    return f;
}

struct Options
{
    std::string mesh;
    std::string out;
    std::string out_dir;
    std::string field;
    std::string config;
    std::string checkpoint;
    std::string resume;
    std::string features;
    std::string split = "test";
    std::string head = "segmentation";
    std::string layer_tag;
    std::vector<std::string> perturb;
    std::vector<double> condition;
    int refine = 1;
    double shift_scale = 1e-8;
    long vertex = 0;
    int k = 0;
    int block = -1;
    int width = 8;
    int blocks = 2;
    int depth = 2;
    int conditional_width = 0;
    int iterations = -1;
    int threads = 0;
    int times = 16;
    double tmin = 0.01;
    double tmax = 1.0;
    bool raw = false;
    long long seed = -1;
    double step = 1e-5;
    double tolerance = 1e-5;
    double max_tolerance = 1e-3;
};

int threads_of(const Options& o)
{
    return o.threads > 0 ? o.threads : default_thread_count();
}

FactorizeOptions factorize_options(const Options& o)
{
    FactorizeOptions f;
    f.refinement_steps = o.refine;
    f.shift_scale = o.shift_scale;
    return f;
}

int cmd_validate(const Options& o, std::ostream& out)
{
    const TriMesh mesh = load_obj(o.mesh);
    out << to_json(validate(mesh)).dump(2) << "\n";
    return kExitOk;
}

int cmd_ops(const Options& o, std::ostream& out)
{
    const TriMesh mesh = load_obj(o.mesh);
    const DifferentialOperators ops = build_operators(mesh);
    const std::filesystem::path dir(o.out_dir);
    std::filesystem::create_directories(dir);
    const std::vector<std::pair<std::string, SparseOperator>> dump = {
        {"grad", ops.grad},
        {"laplacian", ops.laplacian},
        {"mass_vertex", diagonal_operator(ops.mass_vertex)},
        {"mass_face", diagonal_operator(ops.mass_face)},
        {"face_average", ops.face_average},
    };
    nlohmann::json header = {
        {"meshHash", hex(mesh_hash(mesh))},
        {"vertices", mesh.num_vertices()},
        {"faces", mesh.num_faces()},
        {"conventions",
         {{"grad", "rows 2t and 2t+1 hold the u1 and u2 components of face t; u1 = first edge, u2 = n x u1"},
          {"laplacian", "positive semi-definite cotangent Laplacian, off-diagonal -0.5 (cot a + cot b)"},
          {"mass_vertex", "barycentric lumped vertex areas"},
          {"mass_face", "face area repeated for both gradient components"},
          {"face_average", "1/3 per face corner"}}},
    };
    for (const auto& [name, op] : dump) {
        const std::string file = name + ".csv";
        write_triplets(dir / file, op);
        header["operators"][name] = {{"rows", op.rows()}, {"cols", op.cols()}, {"nnz", op.nonZeros()}, {"file", file}};
    }
    std::ofstream(dir / "ops.json") << header.dump(2) << "\n";
    out << header.dump(2) << "\n";
    return kExitOk;
}

int cmd_solve(const Options& o, std::ostream& out)
{
    const TriMesh mesh = load_obj(o.mesh);
    const DifferentialOperators ops = build_operators(mesh);
    const Table t = read_csv(o.field);
    long channels = 0;
    for (const auto& row : t) {
        if (row.size() != 4) throw Error("face field rows must be face,channel,re,im");
        channels = std::max(channels, static_cast<long>(row[1]) + 1);
    }
    if (channels == 0) throw Error("face field '" + o.field + "' is empty");
    FaceVectorField f(Eigen::MatrixXd::Zero(2 * ops.num_faces(), channels));
    for (const auto& row : t) {
        const long face = static_cast<long>(row[0]), ch = static_cast<long>(row[1]);
        if (face < 0 || face >= ops.num_faces() || ch < 0 || row[0] != face || row[1] != ch) {
            throw DimensionError("face field entry (" + fmt(row[0]) + ", " + fmt(row[1]) + ") is out of range");
        }
        f.stacked(2 * face, ch) = row[2];
        f.stacked(2 * face + 1, ch) = row[3];
    }
    const PoissonFactorization fact(ops.laplacian, ops.mass_vertex, factorize_options(o));
    const Eigen::MatrixXd u = fact.solve_centered(divergence_rhs(ops, f));
    emit(o.out, out, [&](std::ostream& s) {
        s << "vertex,channel,value\n";
        for (Eigen::Index v = 0; v < u.rows(); ++v) {
            for (Eigen::Index c = 0; c < u.cols(); ++c) s << v << "," << c << "," << fmt(u(v, c)) << "\n";
        }
    });
    return kExitOk;
}

int cmd_greens(const Options& o, std::ostream& out)
{
    const TriMesh mesh = load_obj(o.mesh);
    const DifferentialOperators ops = build_operators(mesh);
    const PoissonFactorization fact(ops.laplacian, ops.mass_vertex, factorize_options(o));
    const Eigen::VectorXd g = fact.greens_column(o.vertex);
    emit(o.out, out, [&](std::ostream& s) {
        s << "vertex,value\n";
        for (Eigen::Index v = 0; v < g.size(); ++v) s << v << "," << fmt(g[v]) << "\n";
    });
    return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out)
{
    const TriMesh mesh = o.mesh.empty() ? make_torus(12, 8) : load_obj(o.mesh);
    NetworkGradCheckSetup setup;
    setup.head = head_kind_from_string(o.head);
    setup.width = o.width;
    setup.blocks = o.blocks;
    setup.vec_mlp_depth = o.depth;
    setup.conditional_width = o.conditional_width;
    if (o.seed >= 0) setup.seed = static_cast<std::uint64_t>(o.seed);
    GradCheckOptions opts;
    opts.step = o.step;
    opts.tolerance = o.tolerance;
    opts.max_tolerance = o.max_tolerance;
    const GradCheckReport r = network_gradcheck(mesh, setup, opts);
    out << r.to_json().dump(2) << "\n";
    return r.passed ? kExitOk : kExitData;
}

int cmd_train(const Options& o, std::ostream& out)
{
    RunConfig run = RunConfig::load(o.config);
    if (!o.out_dir.empty()) run.output_dir = o.out_dir;
    if (o.iterations >= 0) run.optimizer.iterations = o.iterations;
    if (o.seed >= 0) run.optimizer.seed = static_cast<std::uint64_t>(o.seed);
    const Dataset data = build_dataset(run.dataset);
    nlohmann::json summary;
    if (data.task == "classification" && data.train.size() >= 2) {
        const double baseline = nearest_neighbor_accuracy(data.train);
        summary["baselineAccuracy"] = baseline;
    }
    PoissonNet net(run.network, run.optimizer.seed);
    TrainOptions opts;
    opts.threads = threads_of(o);
    if (!o.resume.empty()) opts.resume = o.resume;
    const TrainResult res = train_loop(run, data, net, opts);
    summary["checkpoint"] = res.checkpoint.string();
    summary["metrics"] = (std::filesystem::path(run.output_dir) / "metrics.jsonl").string();
    summary["iterations"] = res.log.empty() ? 0 : res.log.back().iteration;
    summary["finalLoss"] = res.final_loss;
    summary["parameters"] = net.parameter_count();
    out << summary.dump(2) << "\n";
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out)
{
    const Checkpoint ckpt = read_checkpoint(o.checkpoint);
    PoissonNet net = load_network(ckpt);
    if (!o.mesh.empty()) {
        const MeshContext ctx(load_obj(o.mesh));
        Eigen::MatrixXd cond(ctx.ops.num_vertices(), 0);
        if (net.config().conditional_width > 0) {
            cond = broadcast_condition(parse_condition(o.condition), ctx.ops.num_vertices());
        }
        const Eigen::MatrixXd pred = net.predict(ctx, network_inputs(net.config(), ctx), cond);
        emit(o.out, out, [&](std::ostream& s) { write_vertex_table(s, pred, "out"); });
        return kExitOk;
    }
    RunConfig run = o.config.empty() ? RunConfig::from_json(ckpt.header.value("run", nlohmann::json::object()))
                                     : RunConfig::load(o.config);
    const Dataset data = build_dataset(run.dataset);
    const std::vector<Example>& split = o.split == "train" ? data.train : data.test;
    std::vector<PreparedExample> prepared;
    for (const Example& ex : split) prepared.push_back(prepare_example(ex, net.config()));
    const EvalResult ev = evaluate(net, prepared, threads_of(o));
    nlohmann::json j = {{"split", o.split}, {"count", ev.count}, {"loss", ev.loss}};
    j["accuracy"] = ev.has_accuracy ? nlohmann::json(ev.accuracy) : nlohmann::json(nullptr);
    j["iteration"] = ckpt.header.value("iteration", 0L);
    if (!o.out.empty()) std::ofstream(o.out, std::ios::app) << j.dump() << "\n";
    out << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_hks(const Options& o, std::ostream& out)
{
    const TriMesh mesh = load_obj(o.mesh);
    const DifferentialOperators ops = build_operators(mesh);
    const Eigen::Index k = o.k > 0 ? o.k : ops.num_vertices();
    const HksTarget h = compute_hks(compute_eigenbasis(ops, k), hks_times(o.times, o.tmin, o.tmax));
    emit(o.out, out, [&](std::ostream& s) { write_vertex_table(s, o.raw ? h.raw : h.fields, "hks"); });
    return kExitOk;
}

int cmd_spectrum(const Options& o, std::ostream& out)
{
    const TriMesh mesh = load_obj(o.mesh);
    const MeshContext ctx(mesh);
    Eigen::MatrixXd features;
    std::string tag = o.layer_tag;
    if (!o.features.empty()) {
        features = load_features(o.features, mesh.num_vertices());
    } else if (!o.checkpoint.empty()) {
        PoissonNet net = load_network(read_checkpoint(o.checkpoint));
        Eigen::MatrixXd cond(mesh.num_vertices(), 0);
        if (net.config().conditional_width > 0) {
            cond = broadcast_condition(parse_condition(o.condition), mesh.num_vertices());
        }
        Tape tape;
        std::vector<Var> blocks;
        net.forward_features(tape, ctx, network_inputs(net.config(), ctx), cond, &blocks);
        const int b = o.block < 0 ? static_cast<int>(blocks.size()) - 1 : o.block;
        if (b < 0 || b >= static_cast<int>(blocks.size())) throw ConfigError("--block outside the network");
        features = blocks[static_cast<std::size_t>(b)].value();
        if (tag.empty()) tag = "block" + std::to_string(b);
    } else {
        throw ConfigError("spectrum needs --features or --checkpoint");
    }
    const Eigen::Index k = o.k > 0 ? std::min<Eigen::Index>(o.k, mesh.num_vertices()) : mesh.num_vertices();
    const SpectrumReport r =
        power_spectrum(features, compute_eigenbasis(ctx.ops, k), ctx.ops.mass_vertex, hex(mesh_hash(mesh)), tag);
    out << r.to_json().dump() << "\n";
    return kExitOk;
}

int cmd_robustness(const Options& o, std::ostream& out)
{
    PoissonNet net = load_network(read_checkpoint(o.checkpoint));
    const TriMesh mesh = load_obj(o.mesh);
    const std::uint64_t seed = o.seed >= 0 ? static_cast<std::uint64_t>(o.seed) : 0;
    std::vector<Perturbation> list;
    for (const std::string& p : o.perturb) list.push_back(Perturbation::parse(p, seed));
    if (list.empty()) list.push_back(Perturbation::parse("none"));
    const RobustnessReport r =
        robustness_report(net, mesh, list, parse_condition(o.condition), hex(mesh_hash(mesh)));
    out << r.to_json().dump(2) << "\n";
    return kExitOk;
}

} // namespace

int cli_dispatch(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"PoissonNet geometry-learning toolkit", argv.empty() ? "pnet" : argv.front()};
    app.require_subcommand(1);
    Options o;
    std::function<int(const Options&, std::ostream&)> run;

    auto add = [&](const std::string& name, const std::string& help, int (*fn)(const Options&, std::ostream&)) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->callback([&run, fn] { run = fn; });
        return sub;
    };
    auto threads = [&](CLI::App* sub) {
        sub->add_option("--threads", o.threads, "Worker threads (default: PNET_THREADS or hardware)");
    };
    auto solver = [&](CLI::App* sub) {
        sub->add_option("--refine", o.refine, "Residual refinement steps")->capture_default_str();
        sub->add_option("--shift-scale", o.shift_scale, "Diagonal shift relative to mean(diag L)")->capture_default_str();
    };

    CLI::App* validate_cmd = add("validate", "Print mesh diagnostics as JSON", cmd_validate);
    validate_cmd->add_option("mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);

    CLI::App* ops = add("ops", "Dump operators as row,col,value CSV plus ops.json", cmd_ops);
    ops->add_option("mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);
    ops->add_option("--out-dir", o.out_dir, "Output directory")->required();

    CLI::App* solve = add("solve", "Poisson solve of a face,channel,re,im field", cmd_solve);
    solve->add_option("mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);
    solve->add_option("--field", o.field, "Face field CSV")->required()->check(CLI::ExistingFile);
    solve->add_option("--out", o.out, "Output CSV (default stdout)");
    solver(solve);

    CLI::App* greens = add("greens", "Green's function column as vertex,value CSV", cmd_greens);
    greens->add_option("mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);
    greens->add_option("--vertex", o.vertex, "Source vertex")->required();
    greens->add_option("--out", o.out, "Output CSV (default stdout)");
    solver(greens);

    CLI::App* gc = add("gradcheck", "Finite-difference check of a small network", cmd_gradcheck);
    gc->add_option("--mesh", o.mesh, "OBJ file (default: 96-vertex torus)")->check(CLI::ExistingFile);
    gc->add_option("--head", o.head, "classification | segmentation | regression | njf")->capture_default_str();
    gc->add_option("--width", o.width)->capture_default_str();
    gc->add_option("--blocks", o.blocks)->capture_default_str();
    gc->add_option("--depth", o.depth, "Vector layers per block")->capture_default_str();
    gc->add_option("--conditional-width", o.conditional_width)->capture_default_str();
    gc->add_option("--seed", o.seed);
    gc->add_option("--step", o.step)->capture_default_str();
    gc->add_option("--tolerance", o.tolerance, "Bound on the 90th percentile")->capture_default_str();
    gc->add_option("--max-tolerance", o.max_tolerance, "Bound on the maximum")->capture_default_str();

    CLI::App* train = add("train", "Train from a run config", cmd_train);
    train->add_option("--config", o.config, "Run config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--output-dir", o.out_dir, "Override outputDir");
    train->add_option("--iterations", o.iterations, "Override optimizer.iterations");
    train->add_option("--seed", o.seed, "Override optimizer.seed");
    train->add_option("--resume", o.resume, "Continue from a training checkpoint")->check(CLI::ExistingFile);
    threads(train);

    CLI::App* eval = add("eval", "Evaluate a checkpoint on its dataset or predict on a mesh", cmd_eval);
    eval->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("--config", o.config, "Run config (default: the one stored in the checkpoint)")
        ->check(CLI::ExistingFile);
    eval->add_option("--split", o.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    eval->add_option("--mesh", o.mesh, "Predict per-vertex outputs on this OBJ instead")->check(CLI::ExistingFile);
    eval->add_option("--condition", o.condition, "Condition values for conditional networks")->delimiter(',');
    eval->add_option("--out", o.out, "Prediction CSV, or JSON-lines file to append metrics to");
    threads(eval);

    CLI::App* hks = add("hks", "Heat kernel signatures as CSV", cmd_hks);
    hks->add_option("mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);
    hks->add_option("--k", o.k, "Eigenbasis size (default: all)");
    hks->add_option("--count", o.times, "Number of time samples")->capture_default_str();
    hks->add_option("--tmin", o.tmin)->capture_default_str();
    hks->add_option("--tmax", o.tmax)->capture_default_str();
    hks->add_flag("--raw", o.raw, "Skip the per-channel min-max normalization");
    hks->add_option("--out", o.out, "Output CSV (default stdout)");

    CLI::App* spectrum = add("spectrum", "Power spectrum of vertex features as JSON", cmd_spectrum);
    spectrum->add_option("--mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);
    auto* feat = spectrum->add_option("--features", o.features, "Vertex feature CSV")->check(CLI::ExistingFile);
    spectrum->add_option("--checkpoint", o.checkpoint, "Take features from a network block instead")
        ->check(CLI::ExistingFile)
        ->excludes(feat);
    spectrum->add_option("--block", o.block, "Block index for --checkpoint (default: last)");
    spectrum->add_option("--condition", o.condition)->delimiter(',');
    spectrum->add_option("--k", o.k, "Eigenbasis size (default: all)");
    spectrum->add_option("--layer-tag", o.layer_tag);

    CLI::App* rob = add("robustness", "Output stability under mesh perturbations", cmd_robustness);
    rob->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    rob->add_option("--mesh", o.mesh, "OBJ file")->required()->check(CLI::ExistingFile);
    rob->add_option("--perturb", o.perturb,
                    "none | subdivide | jitter:SIGMA (fraction of bbox diagonal) | partial:FRACTION | external:OBJ")
        ->take_all();
    rob->add_option("--seed", o.seed, "Seed for jitter and partial");
    rob->add_option("--condition", o.condition)->delimiter(',');

    std::vector<std::string> args(argv.size() > 1 ? argv.begin() + 1 : argv.end(), argv.end());
    if (args.empty() || (args.front().rfind('-', 0) != 0 && app.get_subcommand_no_throw(args.front()) == nullptr)) {
        if (!args.empty()) err << "unknown subcommand '" << args.front() << "'\n";
        err << app.help();
        return kExitUsage;
    }
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    try {
        return run(o, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
}

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    return cli_dispatch(std::vector<std::string>(argv, argv + argc), out, err);
}

} // namespace pnet
