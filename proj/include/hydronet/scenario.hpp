#pragma once

#include "hydronet/graph.hpp"
#include "hydronet/oracle.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace hydronet {

/// Triangular design storm: intensity rises linearly from zero to the peak
/// and falls linearly back to zero at the end of the storm.
struct StormShape {
    int duration = 0;            // rainy steps
    int peak_step = 0;           // step of maximum intensity, in (0, duration)
    double peak_intensity = 0.0; // mm/min
};

/// Intensity series of length duration + tail_steps; the tail is dry weather
/// so the network can drain inside the event window.
std::vector<double> hyetograph(const StormShape& shape, int tail_steps);

/// Linear-reservoir rainfall-runoff transform.
struct RunoffParams {
    double coefficient = 0.8;    // fraction of rain that becomes runoff
    double time_constant = 10.0; // reservoir decay constant, min
    double base_flow = 0.0;      // dry-weather inflow per junction, m^3/min
};

/// Per-node runoff series for one intensity series: each junction holds a
/// reservoir state s with s' = alpha*s + (1-alpha)*c*A*i (alpha = exp(-dt/k)),
/// reported as r = s + base_flow. The (1-alpha) injection conserves volume:
/// total released runoff never exceeds c*A*(total rain) + base_flow*T.
/// Intensity is mm/min, catchment area m^2, so c*A*i carries a 1e-3 factor
/// to produce m^3/min.
Eigen::MatrixXd runoff_series(const DrainageGraph& graph,
                              const std::vector<double>& intensity,
                              const RunoffParams& params, double dt = 1.0);

struct ScenarioConfig {
    int num_events = 20;
    int duration_min = 60, duration_max = 120;      // rainy steps
    double peak_fraction_min = 0.2, peak_fraction_max = 0.5;
    double peak_intensity_min = 0.5, peak_intensity_max = 2.0;  // mm/min
    int tail_steps = 60;
    RunoffParams runoff;
    double train_fraction = 0.7, val_fraction = 0.15;  // remainder is test
    // Controllable edges get piecewise-constant random settings so the
    // control channel carries information; plain edges stay at 1.
    double control_min = 0.6;
    int control_period = 30;  // steps between control changes

    nlohmann::json to_json() const;
    static ScenarioConfig from_json(const nlohmann::json& j);
};

struct RainEvent {
    std::string id;
    StormShape shape;
    std::vector<double> intensity;
};

struct EventSet {
    std::uint64_t seed = 0;
    std::vector<RainEvent> events;
    std::vector<int> train, val, test;  // indices into events

    nlohmann::json manifest() const;
};

/// Randomized storm collection with a seeded disjoint train/val/test split
/// covering every event.
EventSet generate_events(const ScenarioConfig& config, std::uint64_t seed);

/// Full boundary forcing for one event: runoff from the intensity series plus
/// a deterministic control schedule drawn from (seed, event id).
std::vector<BoundaryForcing> event_forcing(const DrainageGraph& graph,
                                           const RainEvent& event,
                                           const ScenarioConfig& config,
                                           std::uint64_t seed);

/// Oracle trajectory for one event starting from a dry network.
Trajectory simulate_event(const DrainageGraph& graph, const RainEvent& event,
                          const ScenarioConfig& config, std::uint64_t seed,
                          const OracleConfig& oracle = {});

/// Event CSV: header "t,intensity", one row per step.
void write_event_csv(const RainEvent& event, const std::string& path);
RainEvent read_event_csv(const std::string& id, const std::string& path);

}  // namespace hydronet
