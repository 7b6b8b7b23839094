#pragma once

#include "hydronet/graph.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace hydronet {

/// Reported system state at the end of a routing step. Flows are step-mean
/// rates in m^3/min, depths in m.
struct HydraulicState {
    int t = 0;
    Eigen::VectorXd node_depth;    // h_v, 0 at outfalls, <= max_depth at junctions
    Eigen::VectorXd node_inflow;   // Q_in, sum of incoming conduit flows
    Eigen::VectorXd node_outflow;  // Q_out, sum of outgoing conduit flows
    Eigen::VectorXd flooding;      // Q_w, surcharge spill rate, >= 0
    Eigen::VectorXd edge_depth;    // h_e, clamped mean of endpoint depths
    Eigen::VectorXd edge_flow;     // Q, >= 0, never against edge direction
};

/// Boundary input for one routing step: lateral runoff inflow per node and
/// orifice settings per edge (a = 1 everywhere an edge is not controllable).
struct BoundaryForcing {
    Eigen::VectorXd runoff;   // r, m^3/min, >= 0
    Eigen::VectorXd control;  // a in [0, 1]
};

/// Aligned record of a simulation: states[k] is the state after applying
/// forcing[k] to the previous state (initial for k = 0).
struct Trajectory {
    HydraulicState initial;
    std::vector<HydraulicState> states;
    std::vector<BoundaryForcing> forcing;
    double dt = 1.0;  // min per step

    int length() const { return static_cast<int>(states.size()); }
};

/// Routing scheme controls. The defaults are what every pipeline stage uses;
/// tests override them to probe convergence behavior.
struct OracleConfig {
    double dt = 1.0;          // reporting interval, min
    int substeps = 60;        // internal solver intervals per step
    int max_iterations = 12;  // fixed-point iterations per substep
    double tolerance = 1e-10; // flow convergence threshold, m^3/min
};

/// Dry network: all depths, flows and spills zero.
HydraulicState initial_state(const DrainageGraph& graph);

/// Advances one reporting interval. Head-driven capacity-limited flows are
/// resolved by damped fixed-point iteration on 1/substeps sub-intervals;
/// storage can never go negative and surcharge above max depth spills as
/// flooding. Throws RuntimeFailure on non-finite state or forcing (corrupted
/// inputs), ValidationError on forcing that breaks its contract.
HydraulicState step(const DrainageGraph& graph, const HydraulicState& state,
                    const BoundaryForcing& forcing, const OracleConfig& config = {});

/// Repeated step over a forcing series; trajectory length equals the series
/// length.
Trajectory simulate(const DrainageGraph& graph, const HydraulicState& initial,
                    const std::vector<BoundaryForcing>& forcing,
                    const OracleConfig& config = {});

/// Relative closure error of the volume balance over a whole trajectory:
/// |storage change - (runoff in - outfall discharge - flooded volume)|
/// normalized by total inflow volume. Near machine precision for untampered
/// trajectories.
double mass_balance_residual(const DrainageGraph& graph, const Trajectory& traj);

/// Trajectory CSV: header "t,element_id,var,value", time-major, nodes before
/// edges in network order, node vars h_v,Q_in,Q_out,Q_w,r then edge vars
/// h_e,Q,a.
void write_trajectory_csv(const DrainageGraph& graph, const Trajectory& traj,
                          const std::string& path);

}  // namespace hydronet
