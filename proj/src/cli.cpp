#include "hydronet/cli.hpp"

#include "hydronet/common.hpp"
#include "hydronet/dataset.hpp"
#include "hydronet/eval.hpp"
#include "hydronet/graph.hpp"
#include "hydronet/json_util.hpp"
#include "hydronet/model.hpp"
#include "hydronet/oracle.hpp"
#include "hydronet/scenario.hpp"
#include "hydronet/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace hydronet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string iso_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// User-supplied paths that do not exist are usage errors, not I/O failures.
void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path))
        throw ValidationError(what + " '" + path + "' does not exist");
}

std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

json load_json_file(const std::string& path, const std::string& what) {
    require_file(path, what);
    std::ifstream in(path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ValidationError(what + " '" + path + "' is not valid JSON: " + std::string(e.what()));
    }
    return j;
}

void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot open '" + path + "' for writing");
    out << j.dump(2) << '\n';
    if (!out) throw RuntimeFailure("write failure on '" + path + "'");
}

/// Provenance record written next to every command's outputs. Inputs are
/// hashed so a manifest pins exactly what the command consumed.
struct Manifest {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    std::vector<std::string> outputs;
    std::string started;

    void add_input(const std::string& path) { inputs[path] = hash_file(path); }

    void write(const std::string& out_dir) {
        outputs.push_back("manifest.json");
        json j;
        j["command"] = command;
        j["config"] = config;
        j["seed"] = seed;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["started"] = started;
        j["finished"] = iso_now();
        write_json_file(j, (fs::path(out_dir) / "manifest.json").string());
    }
};

Manifest start_manifest(const std::string& command, std::uint64_t seed) {
    Manifest m;
    m.command = command;
    m.seed = seed;
    m.started = iso_now();
    return m;
}

/// The ablation grid names the dense baseline "nn"; the library calls the
/// same thing fully_connected.
SpatialKind spatial_from_flag(const std::string& s) {
    return s == "nn" ? SpatialKind::fully_connected : spatial_kind_from_string(s);
}

std::string flag_from_spatial(SpatialKind kind) {
    return kind == SpatialKind::fully_connected ? "nn" : "gat";
}

struct GenerateOpts {
    std::string network;
    std::string out;
    std::string config;
    std::uint64_t seed = 0;
    int events = -1;  // -1: keep the config value
    int past = 60, future = 60, stride = 5;
    bool quiet = false;
};

int cmd_generate(const GenerateOpts& opt) {
    Manifest manifest = start_manifest("generate", opt.seed);
    require_file(opt.network, "network file");
    manifest.add_input(opt.network);

    ScenarioConfig sc;
    if (!opt.config.empty()) {
        sc = ScenarioConfig::from_json(load_json_file(opt.config, "scenario config"));
        manifest.add_input(opt.config);
    }
    if (opt.events > 0) sc.num_events = opt.events;

    WindowSpec window;
    window.past = opt.past;
    window.future = opt.future;
    window.stride = opt.stride;

    const DrainageGraph graph = DrainageGraph::from_file(opt.network);
    const EventSet events = generate_events(sc, opt.seed);

    fs::create_directories(opt.out);
    const fs::path out(opt.out);

    std::vector<Trajectory> trajectories;
    trajectories.reserve(events.events.size());
    for (const RainEvent& ev : events.events)
        trajectories.push_back(simulate_event(graph, ev, sc, opt.seed));

    auto build_split = [&](const std::vector<int>& idx) {
        Dataset ds;
        ds.window = window;
        ds.network_hash = graph.content_hash();
        ds.seed = opt.seed;
        for (int i : idx) {
            const std::string& id = events.events[static_cast<std::size_t>(i)].id;
            ds.event_ids.push_back(id);
            auto windows = window_trajectory(graph, trajectories[static_cast<std::size_t>(i)],
                                             window, id);
            ds.samples.insert(ds.samples.end(), windows.begin(), windows.end());
        }
        return ds;
    };

    Dataset train = build_split(events.train);
    Dataset val = build_split(events.val);
    Dataset test = build_split(events.test);
    if (train.samples.empty())
        throw ValidationError("no training samples: every training event is shorter than one "
                              "window (past " + std::to_string(window.past) + " + future " +
                              std::to_string(window.future) + ")");
    const Normalizer norm = fit_normalizer(train.samples);
    train.normalizer = norm;
    val.normalizer = norm;
    test.normalizer = norm;

    write_json_file(graph.to_json(), (out / "network.json").string());
    json scenario;
    scenario["scenario"] = sc.to_json();
    scenario["seed"] = opt.seed;
    scenario["events"] = events.manifest();
    write_json_file(scenario, (out / "scenario.json").string());
    write_dataset(train, (out / "train.bin").string());
    write_dataset(val, (out / "val.bin").string());
    write_dataset(test, (out / "test.bin").string());

    manifest.config = {{"scenario", sc.to_json()},
                       {"window", {{"past", window.past},
                                   {"future", window.future},
                                   {"stride", window.stride}}}};
    manifest.outputs = {"network.json", "scenario.json",
                        "train.bin", "train.bin.json",
                        "val.bin", "val.bin.json",
                        "test.bin", "test.bin.json"};
    manifest.write(opt.out);

    if (!opt.quiet)
        std::cout << "generated " << events.events.size() << " events on "
                  << graph.node_count() << " nodes / " << graph.edge_count() << " edges: "
                  << train.samples.size() << " train / " << val.samples.size() << " val / "
                  << test.samples.size() << " test samples -> " << opt.out << "\n";
    return 0;
}

struct TrainOpts {
    std::string data;
    std::string out;
    std::string config;
    std::string spatial = "gat";
    std::string fusion = "fusion";
    std::string flood = "classification";
    std::uint64_t seed = 0;
    bool seed_given = false;
    int epochs = -1, batch = -1, layers = -1, hidden = -1, heads = -1, interval = -1;
    double lr = -1.0;
    bool lr_given = false;
    bool spatial_given = false, fusion_given = false, flood_given = false;
    bool quiet = false;
};

int cmd_train(const TrainOpts& opt) {
    Manifest manifest = start_manifest("train", opt.seed);
    const fs::path data(opt.data);
    const std::string network_path = (data / "network.json").string();
    const std::string train_path = (data / "train.bin").string();
    const std::string val_path = (data / "val.bin").string();
    require_file(network_path, "network file");
    require_file(train_path, "train dataset");
    require_file(val_path, "validation dataset");
    for (const std::string& p : {network_path, train_path, train_path + ".json",
                                 val_path, val_path + ".json"})
        manifest.add_input(p);

    const DrainageGraph graph = DrainageGraph::from_file(network_path);
    const Dataset train = read_dataset(train_path);
    const Dataset val = read_dataset(val_path);
    for (const Dataset* ds : {&train, &val})
        if (ds->network_hash != graph.content_hash())
            throw ValidationError("dataset was generated for a different network (hash " +
                                  ds->network_hash + " vs " + graph.content_hash() + ")");
    if (val.window.past != train.window.past || val.window.future != train.window.future)
        throw ValidationError("train and validation datasets use different windows");

    ModelConfig mc;
    TrainConfig tc;
    bool file_has_model = false, file_has_train = false;
    if (!opt.config.empty()) {
        const json file = load_json_file(opt.config, "train config");
        reject_unknown_keys(file, {"model", "train"}, "train config file");
        if (file.contains("model")) {
            mc = ModelConfig::from_json(file["model"]);
            file_has_model = true;
        }
        if (file.contains("train")) {
            tc = TrainConfig::from_json(file["train"]);
            file_has_train = true;
        }
        manifest.add_input(opt.config);
    }
    // The dataset window is authoritative for the model's horizon.
    mc.past_steps = train.window.past;
    mc.future_steps = train.window.future;
    if (opt.spatial_given || !file_has_model) mc.spatial_kind = spatial_from_flag(opt.spatial);
    if (opt.fusion_given || !file_has_model) mc.fusion = fusion_kind_from_string(opt.fusion);
    if (opt.flood_given || !file_has_model) mc.flood_method = flood_method_from_string(opt.flood);
    if (opt.layers > 0) mc.spatial_layers = opt.layers;
    if (opt.hidden > 0) mc.hidden_channels = opt.hidden;
    if (opt.heads > 0) mc.attention_heads = opt.heads;
    if (opt.epochs > 0) tc.epochs = opt.epochs;
    if (opt.batch > 0) tc.batch_size = opt.batch;
    if (opt.lr_given) tc.learning_rate = opt.lr;
    if (opt.interval > 0) tc.validation_interval = opt.interval;
    // One --seed fans out to named streams; config-file seeds win only when
    // the flag is absent.
    if (opt.seed_given || !file_has_model) mc.seed = derive_seed(opt.seed, "init");
    if (opt.seed_given || !file_has_train) tc.seed = derive_seed(opt.seed, "train");
    mc.validate();
    tc.validate();

    Model model(mc, graph);
    fs::create_directories(opt.out);
    const TrainResult result = train_model(model, tc, train.samples, val.samples,
                                           train.normalizer, graph.content_hash(), opt.out);
    result.curve.write_csv((fs::path(opt.out) / "curve.csv").string());

    manifest.config = {{"model", mc.to_json()}, {"train", tc.to_json()}};
    manifest.outputs = {"curve.csv", "final.ckpt", "final.ckpt.json"};
    if (!result.best_checkpoint.empty()) {
        manifest.outputs.push_back("best.ckpt");
        manifest.outputs.push_back("best.ckpt.json");
    }
    manifest.write(opt.out);

    if (!opt.quiet) {
        std::cout << "trained " << flag_from_spatial(mc.spatial_kind) << "-"
                  << to_string(mc.fusion) << "/" << to_string(mc.flood_method) << " for "
                  << result.completed_epochs << " epochs";
        if (result.best_epoch > 0)
            std::cout << ", best val loss " << format_double(result.best_val_loss)
                      << " at epoch " << result.best_epoch;
        if (result.diverged) std::cout << " (diverged, rolled back)";
        std::cout << " -> " << opt.out << "\n";
    }
    return result.diverged ? 1 : 0;
}

struct EvaluateOpts {
    std::string checkpoint;
    std::string data;
    std::string out;
    bool quiet = false;
};

int cmd_evaluate(const EvaluateOpts& opt) {
    const fs::path data(opt.data);
    const std::string network_path = (data / "network.json").string();
    const std::string scenario_path = (data / "scenario.json").string();
    const std::string test_meta_path = (data / "test.bin.json").string();
    require_file(opt.checkpoint, "checkpoint");
    require_file(network_path, "network file");
    require_file(scenario_path, "scenario file");
    require_file(test_meta_path, "test dataset sidecar");

    const Checkpoint ckpt = read_checkpoint(opt.checkpoint);
    Manifest manifest = start_manifest("evaluate", ckpt.config.seed);
    for (const std::string& p : {opt.checkpoint, opt.checkpoint + ".json",
                                 network_path, scenario_path, test_meta_path})
        manifest.add_input(p);

    const DrainageGraph graph = DrainageGraph::from_file(network_path);
    if (ckpt.network_hash != graph.content_hash())
        throw ValidationError("checkpoint was trained on a different network (hash " +
                              ckpt.network_hash + " vs " + graph.content_hash() + ")");

    const json scenario = load_json_file(scenario_path, "scenario file");
    reject_unknown_keys(scenario, {"scenario", "seed", "events"}, "scenario file");
    for (const char* key : {"scenario", "seed", "events"})
        if (!scenario.contains(key))
            throw ValidationError("scenario file '" + scenario_path + "' lacks key '" +
                                  std::string(key) + "'");
    const ScenarioConfig sc = ScenarioConfig::from_json(scenario["scenario"]);
    const long raw_seed = json_integer(scenario, "seed", "scenario file");
    if (raw_seed < 0) throw ValidationError("scenario file: seed must be nonnegative");
    const std::uint64_t seed = static_cast<std::uint64_t>(raw_seed);
    const EventSet events = generate_events(sc, seed);
    if (events.manifest() != scenario["events"])
        throw ValidationError("regenerated events do not match '" + scenario_path +
                              "'; the scenario file was edited or mixes seeds");

    const json test_meta = load_json_file(test_meta_path, "test dataset sidecar");
    const int stride = static_cast<int>(json_integer(test_meta, "stride", "test sidecar"));
    if (json_integer(test_meta, "m", "test sidecar") != ckpt.config.past_steps ||
        json_integer(test_meta, "n", "test sidecar") != ckpt.config.future_steps)
        throw ValidationError("checkpoint window (" + std::to_string(ckpt.config.past_steps) +
                              "x" + std::to_string(ckpt.config.future_steps) +
                              ") does not match the test dataset window");

    std::vector<Trajectory> trajectories;
    std::vector<std::string> event_ids;
    for (int i : events.test) {
        const RainEvent& ev = events.events[static_cast<std::size_t>(i)];
        trajectories.push_back(simulate_event(graph, ev, sc, seed));
        event_ids.push_back(ev.id);
    }
    if (trajectories.empty()) throw ValidationError("the event set has no test events");

    Model model(ckpt.config, graph);
    model.set_parameters(ckpt.params);

    fs::create_directories(opt.out);
    const fs::path out(opt.out);
    const RolloutReport report =
        rollout_eval(model_predictor(model), ckpt.config, model.artifacts(), ckpt.normalizer,
                     graph, trajectories, event_ids, stride, (out / "timeseries.csv").string());

    json report_json = report.to_json();
    report_json["manifest"] = "manifest.json";
    write_json_file(report_json, (out / "report.json").string());

    manifest.config = {{"model", ckpt.config.to_json()}, {"stride", stride}};
    manifest.outputs = {"report.json", "timeseries.csv"};
    manifest.write(opt.out);

    if (!opt.quiet) {
        std::cout << "evaluated " << trajectories.size() << " test events, "
                  << report.aggregate.node_steps << " node-steps\n";
        for (const auto& [var, err] : report.aggregate.rmse)
            std::cout << "  rmse " << var << ": " << format_double(err.physical)
                      << " physical, " << format_double(err.normalized) << " normalized\n";
        const FloodMetrics& fm = report.aggregate.flood;
        std::cout << "  flood accuracy " << format_double(fm.accuracy());
        if (fm.precision()) std::cout << ", precision " << format_double(*fm.precision());
        if (fm.recall()) std::cout << ", recall " << format_double(*fm.recall());
        std::cout << " -> " << opt.out << "\n";
    }
    return 0;
}

struct BenchmarkOpts {
    std::string checkpoint;
    std::string network;
    std::string out;
    std::uint64_t seed = 0;
    int repeat = 32;
    bool quiet = false;
};

int cmd_benchmark(const BenchmarkOpts& opt) {
    Manifest manifest = start_manifest("benchmark", opt.seed);
    require_file(opt.checkpoint, "checkpoint");
    require_file(opt.network, "network file");
    manifest.add_input(opt.checkpoint);
    manifest.add_input(opt.network);

    const Checkpoint ckpt = read_checkpoint(opt.checkpoint);
    const DrainageGraph graph = DrainageGraph::from_file(opt.network);
    if (ckpt.network_hash != graph.content_hash())
        throw ValidationError("checkpoint was trained on a different network (hash " +
                              ckpt.network_hash + " vs " + graph.content_hash() + ")");
    if (opt.repeat < 1) throw ValidationError("--repeat must be >= 1");

    // One storm long enough for any window the checkpoint might use.
    ScenarioConfig sc;
    sc.num_events = 1;
    sc.duration_min = sc.duration_max =
        std::max(120, ckpt.config.past_steps + ckpt.config.future_steps);
    const EventSet events = generate_events(sc, opt.seed);
    const Trajectory traj = simulate_event(graph, events.events[0], sc, opt.seed);

    Model model(ckpt.config, graph);
    model.set_parameters(ckpt.params);
    const SpeedReport report = benchmark_speed(model, ckpt.normalizer, graph, traj, opt.repeat);

    if (!opt.out.empty()) {
        fs::create_directories(opt.out);
        json j = report.to_json();
        j["manifest"] = "manifest.json";
        write_json_file(j, (fs::path(opt.out) / "speed.json").string());
        manifest.config = {{"repeat", opt.repeat}, {"horizon", report.horizon}};
        manifest.outputs = {"speed.json"};
        manifest.write(opt.out);
    }

    if (!opt.quiet) {
        std::cout << "horizon " << report.horizon << ": oracle "
                  << format_double(report.oracle_single_s) << " s, surrogate "
                  << format_double(report.surrogate_single_s) << " s ("
                  << format_double(report.single_speedup()) << "x); batch of " << report.repeat
                  << ": oracle " << format_double(report.oracle_batch_s) << " s, surrogate "
                  << format_double(report.surrogate_batch_s) << " s ("
                  << format_double(report.batch_speedup()) << "x)\n";
    }
    return 0;
}

struct GradcheckOpts {
    std::string spatial;
    std::string fusion;
    std::string flood = "classification";
    std::string out;
    std::string fault_tensor;
    std::uint64_t seed = 0;
    bool quiet = false;
};

/// Fixed 4-node/3-edge chain for gradient verification; small enough that a
/// full check of all four grid variants stays well under a minute.
DrainageGraph gradcheck_graph() {
    auto node = [](const char* id, NodeKind kind, double invert, double depth, double storage,
                   double catchment) {
        NodeSpec n;
        n.id = id;
        n.kind = kind;
        n.invert_elevation = invert;
        n.max_depth = depth;
        n.storage_area = storage;
        n.catchment_area = catchment;
        return n;
    };
    auto edge = [](const char* id, const char* from, const char* to, double length,
                   double capacity, double conveyance, bool controllable) {
        EdgeSpec e;
        e.id = id;
        e.from = from;
        e.to = to;
        e.length = length;
        e.capacity = capacity;
        e.conveyance_coeff = conveyance;
        e.controllable = controllable;
        return e;
    };
    std::vector<NodeSpec> nodes = {
        node("g0", NodeKind::outfall, 0.0, 0.0, 0.0, 0.0),
        node("g1", NodeKind::junction, 0.5, 2.0, 8.0, 900.0),
        node("g2", NodeKind::junction, 1.1, 1.8, 6.0, 1100.0),
        node("g3", NodeKind::junction, 1.6, 2.2, 7.0, 1300.0),
    };
    std::vector<EdgeSpec> edges = {
        edge("b1", "g1", "g0", 300.0, 5.0, 3.0, true),
        edge("b2", "g2", "g1", 250.0, 3.0, 2.2, false),
        edge("b3", "g3", "g2", 280.0, 2.5, 2.0, false),
    };
    return DrainageGraph(std::move(nodes), std::move(edges));
}

struct GradcheckResult {
    std::string variant;
    double max_rel = 0.0;
    std::string worst_tensor;
    bool pass = false;
};

GradcheckResult gradcheck_variant(const DrainageGraph& graph, SpatialKind sk, FusionKind fk,
                                  FloodMethod fm, std::uint64_t seed,
                                  const std::string& fault_tensor) {
    ModelConfig cfg;
    cfg.past_steps = 4;
    cfg.future_steps = 4;
    cfg.spatial_kind = sk;
    cfg.fusion = fk;
    cfg.flood_method = fm;
    cfg.spatial_layers = 2;
    cfg.hidden_channels = 8;
    cfg.attention_heads = 2;
    cfg.temporal_kernel = 2;
    cfg.temporal_dilations = {1, 2};
    cfg.delta = 1000.0;
    cfg.seed = derive_seed(seed, "init");

    Rng rng(derive_seed(seed, "forcing"));
    std::vector<BoundaryForcing> forcing;
    for (int t = 0; t < 12; ++t) {
        BoundaryForcing f;
        f.runoff = Eigen::VectorXd::Zero(graph.node_count());
        f.control = Eigen::VectorXd::Ones(graph.edge_count());
        for (int i = 0; i < graph.node_count(); ++i)
            if (!graph.is_outfall(i)) f.runoff[i] = rng.uniform(0.0, 6.0);
        for (int j = 0; j < graph.edge_count(); ++j)
            if (graph.edge(j).controllable) f.control[j] = rng.uniform(0.5, 1.0);
        forcing.push_back(std::move(f));
    }
    const Trajectory traj = simulate(graph, initial_state(graph), forcing, OracleConfig{});
    WindowSpec window;
    window.past = 4;
    window.future = 4;
    window.stride = 2;
    const std::vector<Sample> samples = window_trajectory(graph, traj, window, "grad");
    const Normalizer norm = fit_normalizer(samples);

    Model model(cfg, graph);
    // Zero-initialized heads would hide most of the backward pass; check at a
    // random point instead.
    for (int i = 0; i < model.params().count(); ++i) {
        Rng draw(derive_seed(seed, model.params().name(i)));
        Eigen::MatrixXd& t = model.params().tensor(i);
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = draw.uniform(-0.5, 0.5);
    }
    std::vector<const Sample*> ptrs = {&samples[0], &samples[1]};
    const Batch batch = make_batch(ptrs, norm, cfg, model.artifacts());

    LossBreakdown loss;
    std::vector<Eigen::MatrixXd> grads = model.gradients(batch, loss);
    if (!fault_tensor.empty()) {
        if (!model.params().contains(fault_tensor))
            throw ValidationError("no parameter tensor named '" + fault_tensor + "'");
        grads[static_cast<std::size_t>(model.params().index(fault_tensor))](0, 0) += 1.0;
    }

    GradcheckResult result;
    result.variant = flag_from_spatial(sk) + "-" + to_string(fk) + "/" + to_string(fm);
    const double h = 1e-5;
    Rng pick(derive_seed(seed, "entries"));
    for (int i = 0; i < model.params().count(); ++i) {
        Eigen::MatrixXd& t = model.params().tensor(i);
        const int entries = std::min<int>(3, static_cast<int>(t.size()));
        for (int e = 0; e < entries; ++e) {
            const Eigen::Index flat =
                static_cast<Eigen::Index>(pick.uniform_int(0, static_cast<int>(t.size()) - 1));
            const double saved = t.data()[flat];
            t.data()[flat] = saved + h;
            const double up = model.evaluate_loss(batch).total;
            t.data()[flat] = saved - h;
            const double dn = model.evaluate_loss(batch).total;
            t.data()[flat] = saved;
            const double fd = (up - dn) / (2.0 * h);
            const double ad = grads[static_cast<std::size_t>(i)].data()[flat];
            const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            if (rel > result.max_rel) {
                result.max_rel = rel;
                result.worst_tensor = model.params().name(i);
            }
        }
        // The injected fault perturbs entry (0, 0); make sure it is compared.
        if (!fault_tensor.empty() && model.params().name(i) == fault_tensor) {
            const double saved = t.data()[0];
            t.data()[0] = saved + h;
            const double up = model.evaluate_loss(batch).total;
            t.data()[0] = saved - h;
            const double dn = model.evaluate_loss(batch).total;
            t.data()[0] = saved;
            const double fd = (up - dn) / (2.0 * h);
            const double ad = grads[static_cast<std::size_t>(i)](0, 0);
            const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            if (rel > result.max_rel) {
                result.max_rel = rel;
                result.worst_tensor = model.params().name(i);
            }
        }
    }
    result.pass = result.max_rel < 1e-4;
    return result;
}

int cmd_gradcheck(const GradcheckOpts& opt) {
    Manifest manifest = start_manifest("gradcheck", opt.seed);
    const DrainageGraph graph = gradcheck_graph();
    const FloodMethod fm = flood_method_from_string(opt.flood);

    std::vector<std::pair<SpatialKind, FusionKind>> variants;
    if (!opt.spatial.empty() || !opt.fusion.empty()) {
        const SpatialKind sk = spatial_from_flag(opt.spatial.empty() ? "gat" : opt.spatial);
        const FusionKind fk =
            fusion_kind_from_string(opt.fusion.empty() ? "fusion" : opt.fusion);
        variants.emplace_back(sk, fk);
    } else {
        for (SpatialKind sk : {SpatialKind::fully_connected, SpatialKind::gat})
            for (FusionKind fk : {FusionKind::individual, FusionKind::fusion})
                variants.emplace_back(sk, fk);
    }

    bool all_pass = true;
    json lines = json::array();
    for (const auto& [sk, fk] : variants) {
        const GradcheckResult r =
            gradcheck_variant(graph, sk, fk, fm, opt.seed, opt.fault_tensor);
        all_pass = all_pass && r.pass;
        lines.push_back({{"variant", r.variant},
                         {"max_rel", r.max_rel},
                         {"worst_tensor", r.worst_tensor},
                         {"pass", r.pass}});
        if (!opt.quiet)
            std::cout << "gradcheck " << r.variant << ": " << (r.pass ? "PASS" : "FAIL")
                      << " (max rel " << format_double(r.max_rel) << " at " << r.worst_tensor
                      << ")\n";
    }

    if (!opt.out.empty()) {
        fs::create_directories(opt.out);
        json j;
        j["variants"] = lines;
        j["pass"] = all_pass;
        j["manifest"] = "manifest.json";
        write_json_file(j, (fs::path(opt.out) / "gradcheck.json").string());
        manifest.config = {{"flood", opt.flood},
                           {"fault_tensor", opt.fault_tensor}};
        manifest.outputs = {"gradcheck.json"};
        manifest.write(opt.out);
    }

    if (!all_pass) {
        std::cerr << "error: analytic gradients disagree with finite differences\n";
        return 1;
    }
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"drainage-network flow surrogate: data generation, training, evaluation"};
    app.require_subcommand(1);

    GenerateOpts gen;
    CLI::App* g = app.add_subcommand(
        "generate", "Simulate storm events and write windowed train/val/test datasets");
    g->add_option("--network", gen.network, "network JSON file")->required();
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_option("--seed", gen.seed, "seed for events, controls, and splits");
    g->add_option("--config", gen.config, "scenario config JSON (flags override it)");
    g->add_option("--events", gen.events, "number of storm events");
    g->add_option("--past", gen.past, "observed steps per window");
    g->add_option("--future", gen.future, "predicted steps per window");
    g->add_option("--stride", gen.stride, "steps between window anchors");
    g->add_flag("--quiet", gen.quiet, "suppress progress output");

    TrainOpts tr;
    CLI::App* t = app.add_subcommand("train", "Train a surrogate on a generated dataset");
    t->add_option("--data", tr.data, "dataset directory from generate")->required();
    t->add_option("--out", tr.out, "output directory")->required();
    t->add_option("--spatial", tr.spatial, "spatial block: nn or gat")
        ->check(CLI::IsMember({"nn", "gat"}));
    t->add_option("--fusion", tr.fusion, "edge-to-node flow coupling")
        ->check(CLI::IsMember({"individual", "fusion"}));
    t->add_option("--flood", tr.flood, "flooding output method")
        ->check(CLI::IsMember({"balance", "classification"}));
    t->add_option("--config", tr.config,
                  "JSON file with full \"model\" and/or \"train\" objects (flags override)");
    t->add_option("--seed", tr.seed, "seed fanned out to init and shuffle streams");
    t->add_option("--epochs", tr.epochs, "training epochs");
    t->add_option("--batch", tr.batch, "minibatch size");
    t->add_option("--lr", tr.lr, "Adam learning rate");
    t->add_option("--val-interval", tr.interval, "epochs between validation passes");
    t->add_option("--layers", tr.layers, "spatial layers per block");
    t->add_option("--hidden", tr.hidden, "hidden channels");
    t->add_option("--heads", tr.heads, "attention heads");
    t->add_flag("--quiet", tr.quiet, "suppress progress output");

    EvaluateOpts ev;
    CLI::App* e = app.add_subcommand(
        "evaluate", "Score a checkpoint on the test events of a generated dataset");
    e->add_option("--checkpoint", ev.checkpoint, "trained checkpoint file")->required();
    e->add_option("--data", ev.data, "dataset directory from generate")->required();
    e->add_option("--out", ev.out, "output directory")->required();
    e->add_flag("--quiet", ev.quiet, "suppress progress output");

    BenchmarkOpts bm;
    CLI::App* b = app.add_subcommand(
        "benchmark", "Time surrogate prediction against the routing oracle");
    b->add_option("--checkpoint", bm.checkpoint, "trained checkpoint file")->required();
    b->add_option("--network", bm.network, "network JSON file")->required();
    b->add_option("--repeat", bm.repeat, "batch size for the batched comparison");
    b->add_option("--seed", bm.seed, "seed for the benchmark storm");
    b->add_option("--out", bm.out, "optional output directory for speed.json");
    b->add_flag("--quiet", bm.quiet, "suppress result output");

    GradcheckOpts gc;
    CLI::App* c = app.add_subcommand(
        "gradcheck", "Verify analytic gradients against finite differences");
    c->add_option("--spatial", gc.spatial, "check one spatial block: nn or gat")
        ->check(CLI::IsMember({"nn", "gat"}));
    c->add_option("--fusion", gc.fusion, "check one coupling: individual or fusion")
        ->check(CLI::IsMember({"individual", "fusion"}));
    c->add_option("--flood", gc.flood, "flooding output method")
        ->check(CLI::IsMember({"balance", "classification"}));
    c->add_option("--seed", gc.seed, "seed for parameters, forcing, and probed entries");
    c->add_option("--out", gc.out, "optional output directory for gradcheck.json");
    c->add_option("--inject-gradient-fault", gc.fault_tensor,
                  "testing hook: corrupt this tensor's analytic gradient");
    c->add_flag("--quiet", gc.quiet, "suppress per-variant output");

    std::function<int()> run;
    g->callback([&] { run = [&] { return cmd_generate(gen); }; });
    t->callback([&] {
        tr.seed_given = t->count("--seed") > 0;
        tr.lr_given = t->count("--lr") > 0;
        tr.spatial_given = t->count("--spatial") > 0;
        tr.fusion_given = t->count("--fusion") > 0;
        tr.flood_given = t->count("--flood") > 0;
        run = [&] { return cmd_train(tr); };
    });
    e->callback([&] { run = [&] { return cmd_evaluate(ev); }; });
    b->callback([&] { run = [&] { return cmd_benchmark(bm); }; });
    c->callback([&] { run = [&] { return cmd_gradcheck(gc); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        return run();
    } catch (const ValidationError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const RuntimeFailure& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
}

}  // namespace hydronet
