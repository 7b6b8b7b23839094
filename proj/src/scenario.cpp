#include "hydronet/scenario.hpp"

#include "hydronet/common.hpp"
#include "hydronet/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hydronet {

using nlohmann::json;

std::vector<double> hyetograph(const StormShape& shape, int tail_steps) {
    if (shape.duration < 2) throw ValidationError("storm duration must be >= 2 steps");
    if (shape.peak_step <= 0 || shape.peak_step >= shape.duration)
        throw ValidationError("storm peak must fall strictly inside the duration");
    if (!(shape.peak_intensity > 0.0)) throw ValidationError("peak intensity must be > 0");
    if (tail_steps < 0) throw ValidationError("tail steps must be >= 0");

    std::vector<double> intensity(shape.duration + tail_steps, 0.0);
    for (int t = 0; t < shape.duration; ++t) {
        if (t <= shape.peak_step)
            intensity[t] = shape.peak_intensity * t / shape.peak_step;
        else
            intensity[t] = shape.peak_intensity * (shape.duration - t) /
                           (shape.duration - shape.peak_step);
    }
    return intensity;
}

Eigen::MatrixXd runoff_series(const DrainageGraph& graph,
                              const std::vector<double>& intensity,
                              const RunoffParams& params, double dt) {
    if (!(params.time_constant > 0.0)) throw ValidationError("runoff time constant must be > 0");
    if (params.coefficient < 0.0 || params.coefficient > 1.0)
        throw ValidationError("runoff coefficient must be in [0, 1]");
    if (params.base_flow < 0.0) throw ValidationError("base flow must be >= 0");

    const int n = graph.node_count();
    const int steps = static_cast<int>(intensity.size());
    const double alpha = std::exp(-dt / params.time_constant);
    // mm/min over m^2 -> m^3/min
    const double unit = 1e-3;

    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, steps);
    for (int i = 0; i < n; ++i) {
        if (graph.is_outfall(i)) continue;
        const double gain = (1.0 - alpha) * params.coefficient *
                            graph.node(i).catchment_area * unit;
        double s = 0.0;
        for (int t = 0; t < steps; ++t) {
            s = alpha * s + gain * intensity[t];
            r(i, t) = s + params.base_flow;
        }
    }
    return r;
}

json ScenarioConfig::to_json() const {
    json j;
    j["num_events"] = num_events;
    j["duration_range"] = {duration_min, duration_max};
    j["peak_fraction_range"] = {peak_fraction_min, peak_fraction_max};
    j["peak_intensity_range"] = {peak_intensity_min, peak_intensity_max};
    j["tail_steps"] = tail_steps;
    j["runoff"] = {{"coefficient", runoff.coefficient},
                   {"time_constant", runoff.time_constant},
                   {"base_flow", runoff.base_flow}};
    j["train_fraction"] = train_fraction;
    j["val_fraction"] = val_fraction;
    j["control_min"] = control_min;
    j["control_period"] = control_period;
    return j;
}

namespace {

std::pair<double, double> json_range(const json& j, const std::string& key,
                                     const std::string& where) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2)
        throw ValidationError("key '" + key + "' in " + where +
                              " must be a [min, max] array");
    double lo = j[key][0].get<double>(), hi = j[key][1].get<double>();
    if (lo > hi) throw ValidationError("key '" + key + "' in " + where + " has min > max");
    return {lo, hi};
}

}  // namespace

ScenarioConfig ScenarioConfig::from_json(const json& j) {
    const std::string where = "scenario config";
    reject_unknown_keys(j, {"num_events", "duration_range", "peak_fraction_range",
                            "peak_intensity_range", "tail_steps", "runoff",
                            "train_fraction", "val_fraction", "control_min",
                            "control_period"}, where);
    ScenarioConfig c;
    if (j.contains("num_events")) c.num_events = static_cast<int>(json_integer(j, "num_events", where));
    if (j.contains("duration_range"))
        std::tie(c.duration_min, c.duration_max) = [&] {
            auto [lo, hi] = json_range(j, "duration_range", where);
            return std::pair<int, int>{static_cast<int>(lo), static_cast<int>(hi)};
        }();
    if (j.contains("peak_fraction_range"))
        std::tie(c.peak_fraction_min, c.peak_fraction_max) = json_range(j, "peak_fraction_range", where);
    if (j.contains("peak_intensity_range"))
        std::tie(c.peak_intensity_min, c.peak_intensity_max) = json_range(j, "peak_intensity_range", where);
    if (j.contains("tail_steps")) c.tail_steps = static_cast<int>(json_integer(j, "tail_steps", where));
    if (j.contains("runoff")) {
        const auto& r = j["runoff"];
        reject_unknown_keys(r, {"coefficient", "time_constant", "base_flow"}, "runoff config");
        if (r.contains("coefficient")) c.runoff.coefficient = json_number(r, "coefficient", where);
        if (r.contains("time_constant")) c.runoff.time_constant = json_number(r, "time_constant", where);
        if (r.contains("base_flow")) c.runoff.base_flow = json_number(r, "base_flow", where);
    }
    if (j.contains("train_fraction")) c.train_fraction = json_number(j, "train_fraction", where);
    if (j.contains("val_fraction")) c.val_fraction = json_number(j, "val_fraction", where);
    if (j.contains("control_min")) c.control_min = json_number(j, "control_min", where);
    if (j.contains("control_period")) c.control_period = static_cast<int>(json_integer(j, "control_period", where));

    if (c.num_events < 1) throw ValidationError("num_events must be >= 1");
    if (c.duration_min < 2) throw ValidationError("duration_range minimum must be >= 2");
    if (c.train_fraction < 0.0 || c.val_fraction < 0.0 ||
        c.train_fraction + c.val_fraction > 1.0)
        throw ValidationError("split fractions must be >= 0 and sum to <= 1");
    if (c.control_min < 0.0 || c.control_min > 1.0)
        throw ValidationError("control_min must be in [0, 1]");
    if (c.control_period < 1) throw ValidationError("control_period must be >= 1");
    return c;
}

json EventSet::manifest() const {
    json j;
    j["seed"] = seed;
    auto ids = [&](const std::vector<int>& idx) {
        json arr = json::array();
        for (int i : idx) arr.push_back(events[i].id);
        return arr;
    };
    j["splits"] = {{"train", ids(train)}, {"val", ids(val)}, {"test", ids(test)}};
    return j;
}

EventSet generate_events(const ScenarioConfig& config, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "events"));
    EventSet set;
    set.seed = seed;
    for (int k = 0; k < config.num_events; ++k) {
        StormShape shape;
        shape.duration = static_cast<int>(rng.uniform_int(config.duration_min, config.duration_max));
        const double frac = rng.uniform(config.peak_fraction_min, config.peak_fraction_max);
        shape.peak_step = std::clamp(static_cast<int>(std::lround(frac * shape.duration)),
                                     1, shape.duration - 1);
        shape.peak_intensity = rng.uniform(config.peak_intensity_min, config.peak_intensity_max);

        RainEvent ev;
        char buf[24];
        std::snprintf(buf, sizeof(buf), "event-%03d", k);
        ev.id = buf;
        ev.shape = shape;
        ev.intensity = hyetograph(shape, config.tail_steps);
        set.events.push_back(std::move(ev));
    }

    // Seeded Fisher-Yates, then contiguous slices; sorted for stable manifests.
    std::vector<int> order(config.num_events);
    for (int i = 0; i < config.num_events; ++i) order[i] = i;
    for (int i = config.num_events - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, i)]);

    const int n_train = static_cast<int>(std::lround(config.train_fraction * config.num_events));
    const int n_val = static_cast<int>(std::lround(config.val_fraction * config.num_events));
    for (int i = 0; i < config.num_events; ++i) {
        if (i < n_train) set.train.push_back(order[i]);
        else if (i < n_train + n_val) set.val.push_back(order[i]);
        else set.test.push_back(order[i]);
    }
    std::sort(set.train.begin(), set.train.end());
    std::sort(set.val.begin(), set.val.end());
    std::sort(set.test.begin(), set.test.end());
    return set;
}

std::vector<BoundaryForcing> event_forcing(const DrainageGraph& graph,
                                           const RainEvent& event,
                                           const ScenarioConfig& config,
                                           std::uint64_t seed) {
    const int steps = static_cast<int>(event.intensity.size());
    const Eigen::MatrixXd runoff = runoff_series(graph, event.intensity, config.runoff);

    // One stream per event: control schedules do not depend on how many other
    // events exist or in what order they are realized.
    Rng rng(derive_seed(seed, "control:" + event.id));
    Eigen::MatrixXd control = Eigen::MatrixXd::Ones(graph.edge_count(), steps);
    for (int j = 0; j < graph.edge_count(); ++j) {
        if (!graph.edge(j).controllable) continue;
        double setting = 1.0;
        for (int t = 0; t < steps; ++t) {
            if (t % config.control_period == 0) setting = rng.uniform(config.control_min, 1.0);
            control(j, t) = setting;
        }
    }

    std::vector<BoundaryForcing> forcing(steps);
    for (int t = 0; t < steps; ++t) {
        forcing[t].runoff = runoff.col(t);
        forcing[t].control = control.col(t);
    }
    return forcing;
}

Trajectory simulate_event(const DrainageGraph& graph, const RainEvent& event,
                          const ScenarioConfig& config, std::uint64_t seed,
                          const OracleConfig& oracle) {
    return simulate(graph, initial_state(graph),
                    event_forcing(graph, event, config, seed), oracle);
}

void write_event_csv(const RainEvent& event, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot open '" + path + "' for writing");
    out << "t,intensity\n";
    for (std::size_t t = 0; t < event.intensity.size(); ++t)
        out << t << ',' << format_double(event.intensity[t]) << '\n';
    if (!out) throw RuntimeFailure("write failure on '" + path + "'");
}

RainEvent read_event_csv(const std::string& id, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot open event file '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "t,intensity")
        throw ValidationError("event file '" + path + "' must start with 't,intensity'");

    RainEvent ev;
    ev.id = id;
    int expected_t = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string t_str, value_str;
        if (!std::getline(row, t_str, ',') || !std::getline(row, value_str))
            throw ValidationError("malformed row in event file '" + path + "'");
        if (std::stoi(t_str) != expected_t)
            throw ValidationError("non-contiguous steps in event file '" + path + "'");
        ev.intensity.push_back(std::stod(value_str));
        ++expected_t;
    }
    if (ev.intensity.empty())
        throw ValidationError("event file '" + path + "' has no rows");

    // Shape summary recovered from the series; simulation only needs the series.
    int peak = 0, last_wet = 0;
    for (int t = 0; t < static_cast<int>(ev.intensity.size()); ++t) {
        if (ev.intensity[t] > ev.intensity[peak]) peak = t;
        if (ev.intensity[t] > 0.0) last_wet = t;
    }
    ev.shape.duration = last_wet + 1;
    ev.shape.peak_step = peak;
    ev.shape.peak_intensity = ev.intensity[peak];
    return ev;
}

}  // namespace hydronet
