#pragma once

#include "hydronet/dataset.hpp"
#include "hydronet/model.hpp"
#include "hydronet/oracle.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace hydronet {

/// Root mean squared error over all entries: sqrt(sum sq diff / count).
double rmse(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& predicted);

/// Confusion counts over node-steps. A step counts as flooding when its
/// spill rate is strictly positive.
struct FloodMetrics {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    double accuracy() const;
    /// Absent when the denominator is zero (no predicted / no actual
    /// flooding); "absent" is not 0: it must not skew aggregated tables.
    std::optional<double> precision() const;
    std::optional<double> recall() const;

    nlohmann::json to_json() const;
};

/// labels: 0/1 ground truth; flooding: predicted spill rates, flooded where
/// strictly positive. Shapes must match.
FloodMetrics flood_metrics(const Eigen::MatrixXd& labels,
                           const Eigen::MatrixXd& flooding);

/// RMSE of one variable in normalized units and in physical units.
struct VariableError {
    double normalized = 0.0;
    double physical = 0.0;
};

/// Per-variable errors plus flooding classification quality.
struct MetricReport {
    std::map<std::string, VariableError> rmse;  // h_v, q_in, q_out, h_e, q, q_w
    FloodMetrics flood;
    std::int64_t node_steps = 0;  // evaluated node-step count; equals flood.total()

    nlohmann::json to_json() const;
};

struct EventReport {
    std::string event_id;
    int anchors = 0;
    MetricReport report;
};

/// Aggregate pools squared errors over all events before taking the root;
/// it is not a mean of per-event RMSE values.
struct RolloutReport {
    MetricReport aggregate;
    std::vector<EventReport> events;

    nlohmann::json to_json() const;
};

using Predictor = std::function<Prediction(const Batch&)>;

Predictor model_predictor(const Model& model);

/// Repeats the last observed state over the horizon; flooding follows the
/// balance rule applied to the repeated flows and the future runoff.
Prediction persistence_baseline(const Batch& batch, const ModelConfig& config,
                                const GraphArtifacts& art);

Predictor persistence_predictor(const ModelConfig& config, const GraphArtifacts& art);

/// Slides a prediction window over each trajectory at the given stride and
/// scores every full horizon. When `timeseries_csv` is nonempty, writes
/// "anchor_t,element_id,var,true,pred" rows holding the last step of each
/// horizon in physical units; anchor_t is the trajectory index of that step.
/// Events are written in input order, one contiguous block each; pass a
/// single trajectory for a per-event plotting file.
/// Throws ValidationError when a trajectory is too short for one window.
RolloutReport rollout_eval(const Predictor& predict, const ModelConfig& config,
                           const GraphArtifacts& art, const Normalizer& norm,
                           const DrainageGraph& graph,
                           const std::vector<Trajectory>& trajectories,
                           const std::vector<std::string>& event_ids, int stride,
                           const std::string& timeseries_csv = "");

/// Wall-clock comparison of the surrogate against the routing oracle on the
/// same horizon. Timed with a monotonic clock after one untimed warmup each;
/// single-run figures are medians of `repetitions` measurements, each
/// repeated internally until it spans at least ~10 ms. The batch figures run
/// `repeat` predictions as one batched forward versus `repeat` sequential
/// oracle simulations.
struct SpeedReport {
    double oracle_single_s = 0.0;
    double surrogate_single_s = 0.0;
    double oracle_batch_s = 0.0;
    double surrogate_batch_s = 0.0;
    int repeat = 32;
    int horizon = 0;

    double single_speedup() const { return oracle_single_s / surrogate_single_s; }
    double batch_speedup() const { return oracle_batch_s / surrogate_batch_s; }

    nlohmann::json to_json() const;
};

SpeedReport benchmark_speed(const Model& model, const Normalizer& norm,
                            const DrainageGraph& graph, const Trajectory& traj,
                            int repeat = 32, int repetitions = 5);

}  // namespace hydronet
