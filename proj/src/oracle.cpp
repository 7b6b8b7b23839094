#include "hydronet/oracle.hpp"

#include "hydronet/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace hydronet {

namespace {

void check_state(const DrainageGraph& graph, const HydraulicState& s) {
    const int n = graph.node_count(), c = graph.edge_count();
    if (s.node_depth.size() != n || s.node_inflow.size() != n ||
        s.node_outflow.size() != n || s.flooding.size() != n ||
        s.edge_depth.size() != c || s.edge_flow.size() != c)
        throw ValidationError("hydraulic state dimensions do not match the network");
    if (!s.node_depth.allFinite() || !s.node_inflow.allFinite() ||
        !s.node_outflow.allFinite() || !s.flooding.allFinite() ||
        !s.edge_depth.allFinite() || !s.edge_flow.allFinite())
        throw RuntimeFailure("non-finite value in hydraulic state (corrupted state)");
}

void check_forcing(const DrainageGraph& graph, const BoundaryForcing& f) {
    if (f.runoff.size() != graph.node_count() || f.control.size() != graph.edge_count())
        throw ValidationError("forcing dimensions do not match the network");
    if (!f.runoff.allFinite() || !f.control.allFinite())
        throw RuntimeFailure("non-finite value in boundary forcing (corrupted state)");
    if ((f.runoff.array() < 0.0).any())
        throw ValidationError("runoff must be non-negative");
    for (int i = 0; i < graph.node_count(); ++i)
        if (graph.is_outfall(i) && f.runoff[i] != 0.0)
            throw ValidationError("runoff routed to outfall '" + graph.node(i).id +
                                  "' would bypass the volume balance");
    for (int j = 0; j < graph.edge_count(); ++j) {
        double a = f.control[j];
        if (a < 0.0 || a > 1.0)
            throw ValidationError("control setting out of [0, 1] on edge '" +
                                  graph.edge(j).id + "'");
        if (!graph.edge(j).controllable && a != 1.0)
            throw ValidationError("control setting != 1 on non-controllable edge '" +
                                  graph.edge(j).id + "'");
    }
}

}  // namespace

HydraulicState initial_state(const DrainageGraph& graph) {
    HydraulicState s;
    s.t = 0;
    s.node_depth = Eigen::VectorXd::Zero(graph.node_count());
    s.node_inflow = Eigen::VectorXd::Zero(graph.node_count());
    s.node_outflow = Eigen::VectorXd::Zero(graph.node_count());
    s.flooding = Eigen::VectorXd::Zero(graph.node_count());
    s.edge_depth = Eigen::VectorXd::Zero(graph.edge_count());
    s.edge_flow = Eigen::VectorXd::Zero(graph.edge_count());
    return s;
}

HydraulicState step(const DrainageGraph& graph, const HydraulicState& state,
                    const BoundaryForcing& forcing, const OracleConfig& config) {
    check_state(graph, state);
    check_forcing(graph, forcing);
    if (config.substeps < 1 || config.max_iterations < 1 || !(config.dt > 0.0))
        throw ValidationError("oracle config must have positive dt, substeps, iterations");

    const int n = graph.node_count(), c = graph.edge_count();
    const double dt_sub = config.dt / config.substeps;

    // Working volume per node; outfalls hold no storage.
    Eigen::VectorXd vol = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i)
        if (!graph.is_outfall(i)) vol[i] = state.node_depth[i] * graph.node(i).storage_area;

    Eigen::VectorXd q = Eigen::VectorXd::Zero(c);        // current flow iterate
    Eigen::VectorXd q_new = Eigen::VectorXd::Zero(c);
    Eigen::VectorXd head = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd q_sum = Eigen::VectorXd::Zero(c);    // step-mean accumulators

    auto compute_heads = [&](const Eigen::VectorXd& volumes) {
        for (int i = 0; i < n; ++i) {
            if (graph.is_outfall(i))
                head[i] = graph.node(i).invert_elevation;
            else
                head[i] = graph.node(i).invert_elevation +
                          std::max(volumes[i], 0.0) / graph.node(i).storage_area;
        }
    };

    // Caps outgoing flow at each junction to the water actually on hand this
    // sub-interval (stored volume plus its own runoff). Keeps storage
    // non-negative regardless of what neighbors do.
    auto limit_to_availability = [&](Eigen::VectorXd& flows) {
        for (int i = 0; i < n; ++i) {
            if (graph.is_outfall(i) || graph.out_edges(i).empty()) continue;
            double out = 0.0;
            for (int j : graph.out_edges(i)) out += flows[j];
            const double avail = vol[i] / dt_sub + forcing.runoff[i];
            if (out > avail && out > 0.0) {
                const double s = avail / out;
                for (int j : graph.out_edges(i)) flows[j] *= s;
            }
        }
    };

    Eigen::VectorXd vol_end(n);
    for (int sub = 0; sub < config.substeps; ++sub) {
        // Fixed point: flows and end-of-subinterval heads must agree. Plain
        // Picard converges in a step or two when capacities or availability
        // pin the flows; damping kicks in only if the update oscillates
        // (sqrt head law near zero head difference).
        double prev_delta = std::numeric_limits<double>::infinity();
        double relax = 1.0;
        for (int it = 0; it < config.max_iterations; ++it) {
            vol_end = vol;
            for (int j = 0; j < c; ++j) {
                if (!graph.is_outfall(graph.edge_from(j))) vol_end[graph.edge_from(j)] -= q[j] * dt_sub;
                if (!graph.is_outfall(graph.edge_to(j))) vol_end[graph.edge_to(j)] += q[j] * dt_sub;
            }
            for (int i = 0; i < n; ++i)
                if (!graph.is_outfall(i)) vol_end[i] += forcing.runoff[i] * dt_sub;
            compute_heads(vol_end);

            for (int j = 0; j < c; ++j) {
                const auto& e = graph.edge(j);
                const double dh = head[graph.edge_from(j)] - head[graph.edge_to(j)];
                q_new[j] = forcing.control[j] *
                           std::min(e.capacity, e.conveyance_coeff * std::sqrt(std::max(dh, 0.0)));
            }
            limit_to_availability(q_new);

            const double delta = (q_new - q).cwiseAbs().maxCoeff();
            if (delta >= prev_delta) relax = 0.5;  // sticky once unstable
            q += relax * (q_new - q);
            if (delta < config.tolerance) break;
            prev_delta = delta;
        }
        // The damped iterate can sit slightly above the availability bound;
        // one exact pass restores it before the volumes are committed.
        limit_to_availability(q);

        for (int i = 0; i < n; ++i) {
            if (graph.is_outfall(i)) continue;
            double net = forcing.runoff[i];
            for (int j : graph.in_edges(i)) net += q[j];
            for (int j : graph.out_edges(i)) net -= q[j];
            vol[i] += net * dt_sub;
        }
        q_sum += q;
    }

    HydraulicState next = initial_state(graph);
    next.t = state.t + 1;
    next.edge_flow = q_sum / config.substeps;

    for (int j = 0; j < c; ++j) {
        next.node_outflow[graph.edge_from(j)] += next.edge_flow[j];
        next.node_inflow[graph.edge_to(j)] += next.edge_flow[j];
    }

    // Surcharge is resolved at the reporting boundary: volume above capacity
    // spills as flooding and the node is pinned exactly at max depth, so a
    // flooding node always reports h_v == max_depth.
    for (int i = 0; i < n; ++i) {
        if (graph.is_outfall(i)) {
            next.node_outflow[i] = 0.0;
            continue;
        }
        const double area = graph.node(i).storage_area;
        const double vmax = area * graph.node(i).max_depth;
        if (vol[i] > vmax) {
            next.flooding[i] = (vol[i] - vmax) / config.dt;
            next.node_depth[i] = graph.node(i).max_depth;
        } else {
            next.node_depth[i] = std::max(vol[i], 0.0) / area;
        }
    }

    for (int j = 0; j < c; ++j) {
        const double mean_depth =
            0.5 * (next.node_depth[graph.edge_from(j)] + next.node_depth[graph.edge_to(j)]);
        next.edge_depth[j] = std::clamp(mean_depth, 0.0, 1.0);
    }
    return next;
}

Trajectory simulate(const DrainageGraph& graph, const HydraulicState& initial,
                    const std::vector<BoundaryForcing>& forcing,
                    const OracleConfig& config) {
    Trajectory traj;
    traj.initial = initial;
    traj.dt = config.dt;
    traj.forcing = forcing;
    traj.states.reserve(forcing.size());
    HydraulicState current = initial;
    for (const auto& f : forcing) {
        current = step(graph, current, f, config);
        traj.states.push_back(current);
    }
    return traj;
}

double mass_balance_residual(const DrainageGraph& graph, const Trajectory& traj) {
    if (traj.states.size() != traj.forcing.size())
        throw ValidationError("trajectory states and forcing lengths differ");
    const int n = graph.node_count();

    // Per-step closures are summed in absolute value: the total telescopes to
    // the whole-trajectory balance for a consistent trajectory, and tampering
    // with any single intermediate state cannot cancel out.
    double runoff_volume = 0.0, error = 0.0;
    const HydraulicState* prev = &traj.initial;
    for (int t = 0; t < traj.length(); ++t) {
        const auto& s = traj.states[t];
        double storage_change = 0.0, discharge = 0.0;
        for (int i = 0; i < n; ++i) {
            if (graph.is_outfall(i))
                discharge += s.node_inflow[i] * traj.dt;
            else
                storage_change += (s.node_depth[i] - prev->node_depth[i]) *
                                  graph.node(i).storage_area;
        }
        const double runoff = traj.forcing[t].runoff.sum() * traj.dt;
        const double flooded = s.flooding.sum() * traj.dt;
        error += std::abs(storage_change - (runoff - discharge - flooded));
        runoff_volume += runoff;
        prev = &s;
    }
    return error / std::max(runoff_volume, 1e-12);
}

void write_trajectory_csv(const DrainageGraph& graph, const Trajectory& traj,
                          const std::string& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure("cannot open '" + path + "' for writing");
    out << "t,element_id,var,value\n";
    for (int t = 0; t < traj.length(); ++t) {
        const auto& s = traj.states[t];
        const auto& f = traj.forcing[t];
        for (int i = 0; i < graph.node_count(); ++i) {
            const auto& id = graph.node(i).id;
            out << t << ',' << id << ",h_v," << format_double(s.node_depth[i]) << '\n';
            out << t << ',' << id << ",Q_in," << format_double(s.node_inflow[i]) << '\n';
            out << t << ',' << id << ",Q_out," << format_double(s.node_outflow[i]) << '\n';
            out << t << ',' << id << ",Q_w," << format_double(s.flooding[i]) << '\n';
            out << t << ',' << id << ",r," << format_double(f.runoff[i]) << '\n';
        }
        for (int j = 0; j < graph.edge_count(); ++j) {
            const auto& id = graph.edge(j).id;
            out << t << ',' << id << ",h_e," << format_double(s.edge_depth[j]) << '\n';
            out << t << ',' << id << ",Q," << format_double(s.edge_flow[j]) << '\n';
            out << t << ',' << id << ",a," << format_double(f.control[j]) << '\n';
        }
    }
    if (!out) throw RuntimeFailure("write failure on '" + path + "'");
}

}  // namespace hydronet
