#include "pnet/errors.hpp"
#include "pnet/mesh.hpp"
#include "pnet/network.hpp"
#include "pnet/training.hpp"

#include <doctest.h>

#include <Eigen/LU>

#include <filesystem>
#include <fstream>
#include <random>

using namespace pnet;

namespace {

std::filesystem::path scratch(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("pnet_test_training_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

std::vector<std::string> read_lines(const std::filesystem::path& path)
{
    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

nlohmann::json without_time(const std::string& line)
{
    nlohmann::json j = nlohmann::json::parse(line);
    j.erase("wallTime");
    return j;
}

RunConfig segmentation_run(const std::filesystem::path& dir, int iterations)
{
    RunConfig run;
    run.network.block_count = 2;
    run.network.width = 6;
    run.network.vec_mlp_depth = 1;
    run.network.head.kind = HeadKind::Segmentation;
    run.network.head.outputs = 3;
    run.optimizer.learning_rate = 1e-2;
    run.optimizer.batch_size = 3;
    run.optimizer.iterations = iterations;
    run.optimizer.seed = 4;
    run.dataset.kind = "segmentation";
    run.dataset.train_count = 4;
    run.dataset.test_count = 2;
    run.dataset.seed = 2;
    run.output_dir = dir.string();
    return run;
}

} // namespace

TEST_CASE("adam: zero gradient keeps parameters and decays moments")
{
    Parameter p("p", Eigen::MatrixXd::Constant(2, 2, 1.5));
    Adam adam;
    p.grad = Eigen::MatrixXd::Constant(2, 2, 0.3);
    adam.step({&p});
    const Eigen::MatrixXd after_one = p.value;
    const Eigen::MatrixXd m1 = adam.first_moments()[0], v1 = adam.second_moments()[0];
    p.grad.setZero();
    adam.step({&p});
    CHECK((adam.first_moments()[0] - 0.9 * m1).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((adam.second_moments()[0] - 0.999 * v1).cwiseAbs().maxCoeff() < 1e-15);
    // bias-corrected momentum still moves parameters; the raw gradient contributes nothing new
    CHECK(adam.steps() == 2);

    Parameter q("q", Eigen::MatrixXd::Constant(2, 2, 1.5));
    Adam fresh;
    q.grad = Eigen::MatrixXd::Zero(2, 2);
    for (int i = 0; i < 5; ++i) fresh.step({&q});
    CHECK(q.value == Eigen::MatrixXd::Constant(2, 2, 1.5));
    CHECK(after_one(0, 0) < 1.5);
}

TEST_CASE("adam: constant gradient moves by about the learning rate")
{
    Parameter p("p", Eigen::MatrixXd::Zero(1, 3));
    Adam adam(AdamConfig{0.01});
    for (int i = 0; i < 200; ++i) {
        const Eigen::MatrixXd before = p.value;
        p.grad = (Eigen::MatrixXd(1, 3) << 5.0, -0.01, 300.0).finished();
        adam.step({&p});
        const Eigen::MatrixXd step = (p.value - before).cwiseAbs();
        CHECK(step.maxCoeff() <= 0.01 * (1 + 1e-6));
        CHECK(step.minCoeff() >= 0.01 * 0.99);
    }
}

TEST_CASE("adam: quadratic bowl")
{
    const Eigen::MatrixXd center = (Eigen::MatrixXd(2, 2) << 1.0, -2.0, 0.5, 3.0).finished();
    const Eigen::MatrixXd curvature = (Eigen::MatrixXd(2, 2) << 1.0, 10.0, 0.1, 4.0).finished();
    Parameter p("p", Eigen::MatrixXd::Zero(2, 2));
    Adam adam(AdamConfig{0.05});
    int steps = 0;
    for (; steps < 5000 && (p.value - center).cwiseAbs().maxCoeff() >= 1e-6; ++steps) {
        p.grad = curvature.cwiseProduct(p.value - center);
        adam.step({&p});
        adam.set_learning_rate(0.05 * std::pow(0.998, steps));
    }
    CHECK(steps <= 5000);
    CHECK((p.value - center).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("adam: state survives a checkpoint")
{
    Parameter p("p", Eigen::MatrixXd::Ones(2, 3));
    Adam adam;
    p.grad = Eigen::MatrixXd::Constant(2, 3, 0.5);
    adam.step({&p});
    Checkpoint ckpt;
    adam.save(ckpt, {&p});
    Adam restored;
    restored.load(ckpt, {&p});
    CHECK(restored.steps() == adam.steps());
    CHECK(restored.first_moments()[0] == adam.first_moments()[0]);
    CHECK(restored.second_moments()[0] == adam.second_moments()[0]);
    CHECK(ckpt.find("adam.m.p") != nullptr);
}

TEST_CASE("augmentation")
{
    const TriMesh mesh = jitter_vertices(make_torus(12, 8), 0.01, 1);
    const AugmentationConfig none;
    CHECK(!none.enabled());
    CHECK(augment(mesh, none, 3).vertices == mesh.vertices);

    AugmentationConfig rot;
    rot.rotation = true;
    const Eigen::Matrix3d r = augmentation_transform(rot, 5);
    CHECK((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(r.determinant() == doctest::Approx(1.0));
    const DifferentialOperators a = build_operators(mesh), b = build_operators(augment(mesh, rot, 5));
    CHECK(Eigen::MatrixXd(a.laplacian - b.laplacian).cwiseAbs().maxCoeff() < 1e-10);

    AugmentationConfig scale;
    scale.scale_lo = scale.scale_hi = 1.7;
    const DifferentialOperators c = build_operators(augment(mesh, scale, 6));
    CHECK((c.mass_vertex - 1.7 * 1.7 * a.mass_vertex).cwiseAbs().maxCoeff() < 1e-10);

    AugmentationConfig bad;
    bad.scale_lo = 2.0;
    bad.scale_hi = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(AugmentationConfig::from_json(scale.to_json()).to_json() == scale.to_json());
}

TEST_CASE("njf loss: closed forms")
{
    const TriMesh square = make_unit_square();
    const DifferentialOperators ops = build_operators(square);
    const NjfLossTerms terms = make_njf_terms(ops, square.vertices);
    CHECK(njf_loss_value(terms.target_vertices, terms, ops.grad) == doctest::Approx(0.0).epsilon(1e-30));

    // centered corners have |v|^2 = 1/2; lumped masses 1/3, 1/6, 1/3, 1/6; |grad xyz|^2 = 2 per face
    const double vertex_term = 0.5 * (1.0 / 3 + 1.0 / 6 + 1.0 / 3 + 1.0 / 6);
    const double jacobian_term = 0.5 * 2.0 + 0.5 * 2.0;
    CHECK(njf_loss_value(2.0 * terms.target_vertices, terms, ops.grad) ==
          doctest::Approx(vertex_term + jacobian_term).epsilon(1e-14));

    const Eigen::RowVector3d delta(0.2, -0.1, 0.4);
    const Eigen::MatrixXd shifted = terms.target_vertices.rowwise() + delta;
    CHECK(njf_loss_value(shifted, terms, ops.grad) ==
          doctest::Approx(ops.mass_vertex.sum() * delta.squaredNorm()).epsilon(1e-13));

    Tape tape;
    const Var u = tape.constant(2.0 * terms.target_vertices);
    CHECK(njf_loss(u, terms, ops.grad).value()(0, 0) == doctest::Approx(vertex_term + jacobian_term).epsilon(1e-14));
}

TEST_CASE("eigenbasis: sphere spectrum")
{
    const DifferentialOperators ops = build_operators(make_icosphere(3));
    const Eigenbasis e = compute_eigenbasis(ops, 20);
    REQUIRE(e.size() == 20);
    CHECK(std::abs(e.values(0)) < 1e-8);
    const Eigen::VectorXd phi1 = e.vectors.col(0);
    CHECK(phi1.maxCoeff() - phi1.minCoeff() < 1e-8);
    for (Eigen::Index k = 1; k < e.size(); ++k) CHECK(e.values(k) >= e.values(k - 1));
    for (Eigen::Index k = 1; k <= 3; ++k) CHECK(std::abs(e.values(k) - 2.0) < 0.2);
    const Eigen::MatrixXd gram = e.vectors.transpose() * ops.mass_vertex.asDiagonal() * e.vectors;
    CHECK((gram - Eigen::MatrixXd::Identity(20, 20)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("hks: limits, monotonicity, sphere symmetry")
{
    const DifferentialOperators ops = build_operators(make_icosphere(3));
    const Eigenbasis e = compute_eigenbasis(ops, ops.num_vertices());
    const HksTarget late = compute_hks(e, {100.0});
    CHECK((late.raw.array() - 1.0 / ops.mass_vertex.sum()).abs().maxCoeff() < 1e-10);

    const std::vector<double> times = hks_times();
    REQUIRE(times.size() == 16);
    CHECK(times.front() == doctest::Approx(0.01));
    CHECK(times.back() == doctest::Approx(1.0));
    const HksTarget h = compute_hks(e, times);
    for (Eigen::Index c = 1; c < h.raw.cols(); ++c) CHECK((h.raw.col(c).array() < h.raw.col(c - 1).array()).all());
    for (Eigen::Index c = 0; c < h.raw.cols(); ++c) {
        const Eigen::ArrayXd col = h.raw.col(c).array();
        const double mean = col.mean();
        const double sd = std::sqrt((col - mean).square().mean());
        CHECK(sd / mean < 0.05);
    }
    CHECK(h.fields.minCoeff() >= 0.0);
    CHECK(h.fields.maxCoeff() <= 1.0);
}

TEST_CASE("datasets: determinism, validity, separability")
{
    const auto a = gen_synthetic_classification(3, 7);
    const auto b = gen_synthetic_classification(3, 7);
    REQUIRE(a.size() == 9);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].mesh.vertices == b[i].mesh.vertices);
        CHECK(a[i].label == b[i].label);
        const MeshDiagnostics d = validate(a[i].mesh);
        CHECK(d.connected_components == 1);
        CHECK(d.degenerate_face_ids.empty());
    }
    CHECK(nearest_neighbor_accuracy(gen_synthetic_classification(10, 7)) > 0.9);

    for (const Example& ex : gen_synthetic_segmentation(2, 3)) {
        CHECK(validate(ex.mesh).connected_components == 1);
        CHECK(static_cast<Eigen::Index>(ex.vertex_labels.size()) == ex.mesh.num_vertices());
    }
    for (const Example& ex : gen_cylinder_bend(3, 3)) {
        CHECK(validate(ex.mesh).connected_components == 1);
        CHECK(ex.target.rows() == ex.mesh.num_vertices());
        CHECK(ex.condition.size() == 1);
    }
    const Eigen::MatrixXd v = make_cylinder(8, 4, 0.2, 1.0).vertices;
    CHECK(bend_vertices(v, 0.0) == v);
}

TEST_CASE("virtual batch gradient is the mean of per-example gradients")
{
    RunConfig run = segmentation_run(scratch("vbatch"), 1);
    const Dataset data = build_dataset(run.dataset);
    PoissonNet net(run.network, 3);
    net.perturb(0.05, 3);
    std::vector<PreparedExample> prepared;
    for (const Example& ex : data.train) prepared.push_back(prepare_example(ex, run.network));
    std::vector<const PreparedExample*> batch{&prepared[0], &prepared[2], &prepared[1], &prepared[2]};

    const auto params = net.parameters();
    std::vector<Eigen::MatrixXd> mean(params.size());
    double mean_loss = 0.0;
    for (const PreparedExample* ex : batch) {
        mean_loss += evaluate_gradients([&](Tape& t) { return example_loss(t, net, *ex); }, params) / batch.size();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Eigen::MatrixXd g = params[i]->grad / static_cast<double>(batch.size());
            mean[i] = mean[i].size() ? Eigen::MatrixXd(mean[i] + g) : g;
        }
    }
    for (int threads : {1, 3}) {
        const BatchResult r = accumulate_batch(net, batch, threads);
        CHECK(r.loss == doctest::Approx(mean_loss).epsilon(1e-12));
        for (std::size_t i = 0; i < params.size(); ++i) {
            CHECK((params[i]->grad - mean[i]).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, mean[i].cwiseAbs().maxCoeff()));
        }
    }
    const BatchResult one = accumulate_batch(net, batch, 1);
    const std::vector<Eigen::MatrixXd> g1 = [&] {
        std::vector<Eigen::MatrixXd> g;
        for (auto* p : params) g.push_back(p->grad);
        return g;
    }();
    accumulate_batch(net, batch, 4);
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->grad == g1[i]);
    CHECK(one.total > 0);
}

TEST_CASE("training: zero learning rate leaves parameters unchanged")
{
    RunConfig run = segmentation_run(scratch("lr0"), 3);
    run.optimizer.learning_rate = 0.0;
    const Dataset data = build_dataset(run.dataset);
    PoissonNet net(run.network, 1);
    std::vector<Eigen::MatrixXd> before;
    for (auto* p : net.parameters()) before.push_back(p->value);
    train_loop(run, data, net);
    const auto after = net.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i]->value == before[i]);
    std::filesystem::remove_all(run.output_dir);
}

TEST_CASE("training: logs, checkpoints, determinism and resume")
{
    const auto dir_a = scratch("a"), dir_b = scratch("b"), dir_c = scratch("c");
    RunConfig run = segmentation_run(dir_a, 6);
    run.optimizer.checkpoint_every = 3;
    run.optimizer.eval_every = 2;
    const Dataset data = build_dataset(run.dataset);

    PoissonNet a(run.network, run.optimizer.seed);
    TrainOptions one_thread;
    const TrainResult ra = train_loop(run, data, a, one_thread);
    CHECK(ra.log.size() == 6);
    CHECK(std::filesystem::exists(dir_a / "checkpoint_3.pnet"));
    CHECK(std::filesystem::exists(dir_a / "final.pnet"));
    const auto la = read_lines(dir_a / "metrics.jsonl");
    REQUIRE(la.size() == 6);
    const nlohmann::json first = nlohmann::json::parse(la[0]);
    CHECK(first["iteration"] == 1);
    CHECK(first.contains("loss"));
    CHECK(first.contains("accuracy"));
    CHECK(first.contains("wallTime"));
    CHECK(nlohmann::json::parse(la[1]).contains("evalLoss"));

    RunConfig run_b = run;
    run_b.output_dir = dir_b.string();
    PoissonNet b(run.network, run.optimizer.seed);
    TrainOptions threads;
    threads.threads = 3;
    train_loop(run_b, data, b, threads);
    const auto lb = read_lines(dir_b / "metrics.jsonl");
    REQUIRE(lb.size() == la.size());
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(without_time(la[i]) == without_time(lb[i]));

    RunConfig run_c = run;
    run_c.output_dir = dir_c.string();
    run_c.optimizer.checkpoint_every = 0;
    run_c.optimizer.iterations = 3;
    PoissonNet c(run.network, run.optimizer.seed);
    train_loop(run_c, data, c);
    run_c.optimizer.iterations = 6;
    TrainOptions resume;
    resume.resume = dir_a / "checkpoint_3.pnet";
    PoissonNet c2(run.network, 99);
    train_loop(run_c, data, c2, resume);
    const auto lc = read_lines(dir_c / "metrics.jsonl");
    REQUIRE(lc.size() == la.size());
    for (std::size_t i = 0; i < la.size(); ++i) CHECK(without_time(la[i]) == without_time(lc[i]));
    const auto pa = a.parameters(), pc = c2.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pc[i]->value);

    for (const auto& d : {dir_a, dir_b, dir_c}) std::filesystem::remove_all(d);
}

TEST_CASE("training: non-finite loss stops with a dump")
{
    RunConfig run = segmentation_run(scratch("nan"), 2);
    const Dataset data = build_dataset(run.dataset);
    PoissonNet net(run.network, 1);
    net.lift().weight.value(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(train_loop(run, data, net), TrainingError);
    CHECK(std::filesystem::exists(std::filesystem::path(run.output_dir) / "nonfinite_dump.json"));
    std::filesystem::remove_all(run.output_dir);
}

TEST_CASE("run config: parsing and consistency")
{
    RunConfig run = segmentation_run("out", 10);
    run.optimizer.final_learning_rate = 1e-4;
    const RunConfig back = RunConfig::from_json(run.to_json());
    CHECK(back.to_json() == run.to_json());
    CHECK(run.optimizer.rate_at(0) == doctest::Approx(run.optimizer.learning_rate));
    CHECK(run.optimizer.rate_at(9) == doctest::Approx(1e-4));

    RunConfig mismatch = run;
    mismatch.dataset.kind = "njf";
    CHECK_THROWS_AS(mismatch.validate(), ConfigError);
    CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.json"), ConfigError);

    const auto path = std::filesystem::temp_directory_path() / "pnet_test_bad_run.json";
    std::ofstream(path) << "{\"optimizer\": {\"batchSize\": 0}}";
    CHECK_THROWS_AS(RunConfig::load(path), ConfigError);
    std::ofstream(path) << "{not json";
    CHECK_THROWS_AS(RunConfig::load(path), ConfigError);
    std::filesystem::remove(path);
}
