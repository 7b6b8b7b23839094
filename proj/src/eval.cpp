#include "hydronet/eval.hpp"

#include "hydronet/common.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

namespace hydronet {

double rmse(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& predicted) {
    if (truth.rows() != predicted.rows() || truth.cols() != predicted.cols())
        throw ValidationError("rmse: shape mismatch");
    if (truth.size() == 0) throw ValidationError("rmse: empty input");
    return std::sqrt((truth - predicted).squaredNorm() /
                     static_cast<double>(truth.size()));
}

double FloodMetrics::accuracy() const {
    if (total() == 0) throw ValidationError("flood metrics: no counts");
    return static_cast<double>(tp + tn) / static_cast<double>(total());
}

std::optional<double> FloodMetrics::precision() const {
    if (tp + fp == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fp);
}

std::optional<double> FloodMetrics::recall() const {
    if (tp + fn == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

nlohmann::json FloodMetrics::to_json() const {
    nlohmann::json j;
    j["tp"] = tp;
    j["fp"] = fp;
    j["tn"] = tn;
    j["fn"] = fn;
    j["accuracy"] = accuracy();
    const auto p = precision();
    const auto r = recall();
    j["precision"] = p ? nlohmann::json(*p) : nlohmann::json(nullptr);
    j["recall"] = r ? nlohmann::json(*r) : nlohmann::json(nullptr);
    return j;
}

FloodMetrics flood_metrics(const Eigen::MatrixXd& labels,
                           const Eigen::MatrixXd& flooding) {
    if (labels.rows() != flooding.rows() || labels.cols() != flooding.cols())
        throw ValidationError("flood metrics: shape mismatch");
    FloodMetrics fm;
    for (Eigen::Index i = 0; i < labels.size(); ++i) {
        const bool actual = labels.data()[i] != 0.0;
        const bool predicted = flooding.data()[i] > 0.0;
        if (actual && predicted) ++fm.tp;
        else if (!actual && predicted) ++fm.fp;
        else if (actual) ++fm.fn;
        else ++fm.tn;
    }
    return fm;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["rmse"] = nlohmann::json::object();
    for (const auto& [name, err] : rmse) {
        j["rmse"][name] = {{"normalized", err.normalized}, {"physical", err.physical}};
    }
    j["flood"] = flood.to_json();
    j["node_steps"] = node_steps;
    return j;
}

nlohmann::json RolloutReport::to_json() const {
    nlohmann::json j;
    j["aggregate"] = aggregate.to_json();
    j["events"] = nlohmann::json::array();
    for (const EventReport& e : events) {
        j["events"].push_back({{"event_id", e.event_id},
                               {"anchors", e.anchors},
                               {"report", e.report.to_json()}});
    }
    return j;
}

Predictor model_predictor(const Model& model) {
    return [&model](const Batch& batch) { return model.predict(batch); };
}

Prediction persistence_baseline(const Batch& batch, const ModelConfig& config,
                                const GraphArtifacts& art) {
    const int m = config.past_steps;
    const int n = config.future_steps;
    const int nn = art.n_nodes;
    const int nc = art.n_edges;
    const int b = batch.size;

    Prediction pred;
    pred.node_states.resize(static_cast<Eigen::Index>(b) * n * nn, 3);
    pred.edge_states.resize(static_cast<Eigen::Index>(b) * n * nc, 2);
    for (int s = 0; s < b; ++s) {
        const auto last_nodes = batch.past_nodes.middleRows((s * m + m - 1) * nn, nn);
        const auto last_edges = batch.past_edges.middleRows((s * m + m - 1) * nc, nc);
        for (int t = 0; t < n; ++t) {
            pred.node_states.middleRows((s * n + t) * nn, nn) = last_nodes;
            pred.edge_states.middleRows((s * n + t) * nc, nc) = last_edges;
        }
    }
    pred.flooding = flood_balance(pred.node_states.col(1), batch.future_node_forcing,
                                  pred.node_states.col(2));
    return pred;
}

Predictor persistence_predictor(const ModelConfig& config, const GraphArtifacts& art) {
    return [config, &art](const Batch& batch) {
        return persistence_baseline(batch, config, art);
    };
}

namespace {

/// Pooled squared errors of one variable; aggregate RMSE takes the root of
/// the pooled mean, never a mean of per-event roots.
struct ErrorAccum {
    double sq_norm = 0.0;
    double sq_phys = 0.0;
    std::int64_t count = 0;

    void merge(const ErrorAccum& other) {
        sq_norm += other.sq_norm;
        sq_phys += other.sq_phys;
        count += other.count;
    }

    VariableError finish() const {
        VariableError err;
        if (count > 0) {
            err.normalized = std::sqrt(sq_norm / static_cast<double>(count));
            err.physical = std::sqrt(sq_phys / static_cast<double>(count));
        }
        return err;
    }
};

struct Accumulators {
    std::map<std::string, ErrorAccum> vars;
    FloodMetrics flood;
    std::int64_t node_steps = 0;

    void merge(const Accumulators& other) {
        for (const auto& [name, acc] : other.vars) vars[name].merge(acc);
        flood.tp += other.flood.tp;
        flood.fp += other.flood.fp;
        flood.tn += other.flood.tn;
        flood.fn += other.flood.fn;
        node_steps += other.node_steps;
    }

    MetricReport finish() const {
        MetricReport report;
        for (const auto& [name, acc] : vars) report.rmse[name] = acc.finish();
        report.flood = flood;
        report.node_steps = node_steps;
        return report;
    }
};

void accumulate_column(Accumulators& acc, const std::string& name,
                       const Eigen::MatrixXd& truth, const Eigen::MatrixXd& pred,
                       const Normalizer& norm, Normalizer::Kind kind) {
    ErrorAccum& a = acc.vars[name];
    for (Eigen::Index i = 0; i < truth.rows(); ++i) {
        const double dn = truth(i, 0) - pred(i, 0);
        const double dp = norm.denormalize(kind, truth(i, 0)) -
                          norm.denormalize(kind, pred(i, 0));
        a.sq_norm += dn * dn;
        a.sq_phys += dp * dp;
        a.count += 1;
    }
}

void score_batch(Accumulators& acc, const Batch& batch, const Prediction& pred,
                 const Normalizer& norm) {
    using K = Normalizer::Kind;
    accumulate_column(acc, "h_v", batch.target_nodes.col(0), pred.node_states.col(0),
                      norm, K::depth_node);
    accumulate_column(acc, "q_in", batch.target_nodes.col(1), pred.node_states.col(1),
                      norm, K::flow);
    accumulate_column(acc, "q_out", batch.target_nodes.col(2), pred.node_states.col(2),
                      norm, K::flow);
    accumulate_column(acc, "h_e", batch.target_edges.col(0), pred.edge_states.col(0),
                      norm, K::depth_edge);
    accumulate_column(acc, "q", batch.target_edges.col(1), pred.edge_states.col(1),
                      norm, K::flow);
    accumulate_column(acc, "q_w", batch.target_flood, pred.flooding, norm, K::flow);

    for (Eigen::Index i = 0; i < batch.flood_label.rows(); ++i) {
        const bool actual = batch.flood_label(i, 0) != 0.0;
        const bool predicted = norm.denormalize(K::flow, pred.flooding(i, 0)) > 0.0;
        if (actual && predicted) ++acc.flood.tp;
        else if (!actual && predicted) ++acc.flood.fp;
        else if (actual) ++acc.flood.fn;
        else ++acc.flood.tn;
    }
    acc.node_steps += batch.flood_label.rows();
}

/// Last-horizon-step rows for one sample of a scored batch.
void write_timeseries_rows(std::ofstream& out, const DrainageGraph& graph,
                           const Batch& batch, const Prediction& pred,
                           const Normalizer& norm, int sample, int anchor_t,
                           const ModelConfig& config) {
    using K = Normalizer::Kind;
    const int n = config.future_steps;
    const int nn = graph.node_count();
    const int nc = graph.edge_count();
    const int node_base = (sample * n + n - 1) * nn;
    const int edge_base = (sample * n + n - 1) * nc;
    auto row = [&](const std::string& id, const char* var, K kind, double t, double p) {
        out << anchor_t << ',' << id << ',' << var << ','
            << format_double(norm.denormalize(kind, t)) << ','
            << format_double(norm.denormalize(kind, p)) << '\n';
    };
    for (int i = 0; i < nn; ++i) {
        const std::string& id = graph.node(i).id;
        row(id, "h_v", K::depth_node, batch.target_nodes(node_base + i, 0),
            pred.node_states(node_base + i, 0));
        row(id, "q_in", K::flow, batch.target_nodes(node_base + i, 1),
            pred.node_states(node_base + i, 1));
        row(id, "q_out", K::flow, batch.target_nodes(node_base + i, 2),
            pred.node_states(node_base + i, 2));
        row(id, "q_w", K::flow, batch.target_flood(node_base + i, 0),
            pred.flooding(node_base + i, 0));
    }
    for (int j = 0; j < nc; ++j) {
        const std::string& id = graph.edge(j).id;
        row(id, "h_e", K::depth_edge, batch.target_edges(edge_base + j, 0),
            pred.edge_states(edge_base + j, 0));
        row(id, "q", K::flow, batch.target_edges(edge_base + j, 1),
            pred.edge_states(edge_base + j, 1));
    }
}

}  // namespace

RolloutReport rollout_eval(const Predictor& predict, const ModelConfig& config,
                           const GraphArtifacts& art, const Normalizer& norm,
                           const DrainageGraph& graph,
                           const std::vector<Trajectory>& trajectories,
                           const std::vector<std::string>& event_ids, int stride,
                           const std::string& timeseries_csv) {
    if (trajectories.size() != event_ids.size())
        throw ValidationError("rollout: one event id per trajectory required");
    if (trajectories.empty()) throw ValidationError("rollout: no trajectories");
    if (stride < 1) throw ValidationError("rollout: stride must be >= 1");

    WindowSpec spec;
    spec.past = config.past_steps;
    spec.future = config.future_steps;
    spec.stride = stride;

    std::ofstream csv;
    if (!timeseries_csv.empty()) {
        csv.open(timeseries_csv);
        if (!csv) throw RuntimeFailure("cannot write timeseries to " + timeseries_csv);
        csv << "anchor_t,element_id,var,true,pred\n";
    }

    constexpr int kChunk = 16;  // bounds forward-pass memory
    RolloutReport result;
    Accumulators total;
    for (std::size_t e = 0; e < trajectories.size(); ++e) {
        const std::vector<Sample> samples =
            window_trajectory(graph, trajectories[e], spec, event_ids[e]);
        if (samples.empty())
            throw ValidationError("rollout: trajectory " + event_ids[e] +
                                  " is too short for one prediction window");
        Accumulators event_acc;
        for (std::size_t first = 0; first < samples.size(); first += kChunk) {
            const std::size_t last = std::min(samples.size(), first + kChunk);
            std::vector<const Sample*> ptrs;
            for (std::size_t i = first; i < last; ++i) ptrs.push_back(&samples[i]);
            const Batch batch = make_batch(ptrs, norm, config, art);
            const Prediction pred = predict(batch);
            score_batch(event_acc, batch, pred, norm);
            if (csv.is_open()) {
                for (std::size_t i = first; i < last; ++i) {
                    write_timeseries_rows(csv, graph, batch, pred, norm,
                                          static_cast<int>(i - first),
                                          samples[i].anchor + config.future_steps,
                                          config);
                }
            }
        }
        EventReport er;
        er.event_id = event_ids[e];
        er.anchors = static_cast<int>(samples.size());
        er.report = event_acc.finish();
        result.events.push_back(std::move(er));
        total.merge(event_acc);
    }
    if (csv.is_open() && !csv) throw RuntimeFailure("failed writing " + timeseries_csv);
    result.aggregate = total.finish();
    return result;
}

nlohmann::json SpeedReport::to_json() const {
    nlohmann::json j;
    j["oracle_single_s"] = oracle_single_s;
    j["surrogate_single_s"] = surrogate_single_s;
    j["oracle_batch_s"] = oracle_batch_s;
    j["surrogate_batch_s"] = surrogate_batch_s;
    j["repeat"] = repeat;
    j["horizon"] = horizon;
    j["single_speedup"] = single_speedup();
    j["batch_speedup"] = batch_speedup();
    return j;
}

namespace {

/// Seconds per call: repeats the body until the measured span reaches 10 ms
/// so the monotonic clock's resolution cannot dominate, then divides.
template <typename Fn>
double seconds_per_call(Fn&& body) {
    using clock = std::chrono::steady_clock;
    for (int reps = 1;; reps *= 2) {
        const auto begin = clock::now();
        for (int i = 0; i < reps; ++i) body();
        const double span = std::chrono::duration<double>(clock::now() - begin).count();
        if (span >= 0.01 || reps >= (1 << 20))
            return span / static_cast<double>(reps);
    }
}

template <typename Fn>
double median_seconds(Fn&& body, int repetitions) {
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(repetitions));
    for (int i = 0; i < repetitions; ++i) times.push_back(seconds_per_call(body));
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

}  // namespace

SpeedReport benchmark_speed(const Model& model, const Normalizer& norm,
                            const DrainageGraph& graph, const Trajectory& traj,
                            int repeat, int repetitions) {
    if (repeat < 1) throw ValidationError("benchmark: repeat must be >= 1");
    if (repetitions < 1) throw ValidationError("benchmark: repetitions must be >= 1");

    const ModelConfig& config = model.config();
    WindowSpec spec;
    spec.past = config.past_steps;
    spec.future = config.future_steps;
    spec.stride = 1;
    const std::vector<Sample> samples = window_trajectory(graph, traj, spec, "bench");
    if (samples.empty())
        throw ValidationError("benchmark: trajectory too short for one window");

    const Batch single = make_batch({&samples[0]}, norm, config, model.artifacts());
    std::vector<const Sample*> tiled;
    for (int i = 0; i < repeat; ++i)
        tiled.push_back(&samples[static_cast<std::size_t>(i) % samples.size()]);
    const Batch batch = make_batch(tiled, norm, config, model.artifacts());

    // The oracle predicts the same horizon: starting at the anchor state it
    // routes the future forcing slice.
    const int anchor = samples[0].anchor;
    const HydraulicState& start = traj.states[static_cast<std::size_t>(anchor)];
    std::vector<BoundaryForcing> slice(
        traj.forcing.begin() + anchor + 1,
        traj.forcing.begin() + anchor + 1 + config.future_steps);

    SpeedReport report;
    report.repeat = repeat;
    report.horizon = config.future_steps;

    auto oracle_once = [&]() { simulate(graph, start, slice, OracleConfig{}); };
    auto surrogate_once = [&]() { model.predict(single); };
    oracle_once();     // warmup
    surrogate_once();  // warmup
    report.oracle_single_s = median_seconds(oracle_once, repetitions);
    report.surrogate_single_s = median_seconds(surrogate_once, repetitions);

    {
        using clock = std::chrono::steady_clock;
        const auto begin = clock::now();
        for (int i = 0; i < repeat; ++i) oracle_once();
        report.oracle_batch_s =
            std::chrono::duration<double>(clock::now() - begin).count();
    }
    {
        model.predict(batch);  // warmup at this batch size
        using clock = std::chrono::steady_clock;
        const auto begin = clock::now();
        model.predict(batch);
        report.surrogate_batch_s =
            std::chrono::duration<double>(clock::now() - begin).count();
    }
    return report;
}

}  // namespace hydronet
