#pragma once

#include "hydronet/common.hpp"
#include "hydronet/graph.hpp"
#include "hydronet/oracle.hpp"

#include <string>
#include <vector>

namespace hydronet::testutil {

inline const std::string kDataDir = HYDRONET_DATA_DIR;

/// Random connected network: a random tree oriented toward the outfall root
/// plus a few extra forward edges (flow graph stays acyclic). Deterministic
/// in the seed.
inline DrainageGraph random_graph(std::uint64_t seed, int n_nodes, int n_extra) {
    Rng rng(seed);
    std::vector<NodeSpec> nodes;
    for (int i = 0; i < n_nodes; ++i) {
        NodeSpec n;
        n.id = "n" + std::to_string(i);
        n.kind = i == 0 ? NodeKind::outfall : NodeKind::junction;
        n.invert_elevation = i == 0 ? 0.0 : 0.5 * i + rng.uniform();
        n.max_depth = i == 0 ? 0.0 : 2.0 + rng.uniform();
        n.storage_area = i == 0 ? 0.0 : 5.0 + 10.0 * rng.uniform();
        n.catchment_area = i == 0 ? 0.0 : 500.0 + 1000.0 * rng.uniform();
        nodes.push_back(std::move(n));
    }
    std::vector<EdgeSpec> edges;
    auto add_edge = [&](int from, int to) {
        EdgeSpec e;
        e.id = "c" + std::to_string(edges.size());
        e.from = "n" + std::to_string(from);
        e.to = "n" + std::to_string(to);
        e.length = 100.0 + 900.0 * rng.uniform();
        e.capacity = 2.0 + 8.0 * rng.uniform();
        e.conveyance_coeff = 1.0 + 4.0 * rng.uniform();
        e.controllable = rng.uniform() < 0.3;
        edges.push_back(std::move(e));
    };
    for (int i = 1; i < n_nodes; ++i)
        add_edge(i, static_cast<int>(rng.uniform_int(0, i - 1)));  // toward lower index
    for (int k = 0; k < n_extra; ++k) {
        int a = static_cast<int>(rng.uniform_int(1, n_nodes - 1));
        int b = static_cast<int>(rng.uniform_int(0, a - 1));
        add_edge(a, b);
    }
    return DrainageGraph(std::move(nodes), std::move(edges));
}

/// Valid random forcing: non-negative runoff at junctions, zero at outfalls,
/// control settings in [lo, 1] on controllable edges, 1 elsewhere.
inline BoundaryForcing random_forcing(const DrainageGraph& g, Rng& rng,
                                      double max_runoff, double control_lo = 0.5) {
    BoundaryForcing f;
    f.runoff = Eigen::VectorXd::Zero(g.node_count());
    f.control = Eigen::VectorXd::Ones(g.edge_count());
    for (int i = 0; i < g.node_count(); ++i)
        if (!g.is_outfall(i)) f.runoff[i] = max_runoff * rng.uniform();
    for (int j = 0; j < g.edge_count(); ++j)
        if (g.edge(j).controllable) f.control[j] = rng.uniform(control_lo, 1.0);
    return f;
}

inline std::vector<BoundaryForcing> forcing_series(const DrainageGraph& g, Rng& rng,
                                                   int steps, double max_runoff,
                                                   double control_lo = 0.5) {
    std::vector<BoundaryForcing> out;
    out.reserve(steps);
    for (int t = 0; t < steps; ++t) out.push_back(random_forcing(g, rng, max_runoff, control_lo));
    return out;
}

}  // namespace hydronet::testutil
