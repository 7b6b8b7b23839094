#pragma once

#include "hydronet/graph.hpp"
#include "hydronet/oracle.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace hydronet {

/// Sliding-window extraction: a sample anchored at step t sees the past
/// `past` states/forcings ending at t and must predict the next `future`
/// states given the future forcing.
struct WindowSpec {
    int past = 60;
    int future = 60;
    int stride = 5;
};

/// One training/evaluation window. Values are rounded to float32 once, here,
/// so written datasets round-trip bit-exactly. Row layout of every matrix is
/// step-major: row = local_step * elements + element_index.
struct Sample {
    std::string event_id;
    int anchor = 0;  // trajectory index of the last observed state

    Eigen::MatrixXf past_nodes;          // (past*N) x 3: h_v, Q_in, Q_out
    Eigen::MatrixXf past_edges;          // (past*C) x 2: h_e, Q
    Eigen::MatrixXf past_node_forcing;   // (past*N) x 1: r
    Eigen::MatrixXf past_edge_forcing;   // (past*C) x 1: a
    Eigen::MatrixXf future_node_forcing; // (future*N) x 1: r
    Eigen::MatrixXf future_edge_forcing; // (future*C) x 1: a
    Eigen::MatrixXf target_nodes;        // (future*N) x 3: h_v, Q_in, Q_out
    Eigen::MatrixXf target_edges;        // (future*C) x 2: h_e, Q
    Eigen::MatrixXf target_flood;        // (future*N) x 1: Q_w
    Eigen::MatrixXf flood_label;         // (future*N) x 1: 1 where Q_w > 0
};

/// All windows of a trajectory at the given stride. Anchors run from
/// past-1 to length-1-future; a too-short trajectory yields no samples.
std::vector<Sample> window_trajectory(const DrainageGraph& graph, const Trajectory& traj,
                                      const WindowSpec& spec, const std::string& event_id);

/// Min-max scaling to [0, 1] per variable kind. All flow-like variables
/// (Q_in, Q_out, Q, Q_w, r) share one pooled range with the minimum pinned
/// at zero, which keeps flow conservation and the flood balance exactly
/// linear in normalized space. Depths keep their own ranges; control
/// settings already live in [0, 1] and pass through.
struct Normalizer {
    double h_v_min = 0.0, h_v_max = 0.0;
    double h_e_min = 0.0, h_e_max = 0.0;
    double flow_max = 0.0;  // flow_min is 0 by construction

    enum class Kind { depth_node, depth_edge, flow, control };

    double normalize(Kind kind, double value) const;
    double denormalize(Kind kind, double value) const;

    nlohmann::json to_json() const;
    static Normalizer from_json(const nlohmann::json& j);
};

/// Fits ranges over every occurrence of each variable kind in the given
/// samples (train split only; callers must not pass validation or test data).
Normalizer fit_normalizer(const std::vector<Sample>& samples);

/// A windowed dataset file plus its provenance.
struct Dataset {
    WindowSpec window;
    std::string network_hash;
    std::uint64_t seed = 0;
    std::vector<std::string> event_ids;
    Normalizer normalizer;
    std::vector<Sample> samples;
};

/// Binary container at `path` plus a JSON sidecar at `path + ".json"` holding
/// window parameters, provenance, the normalizer and an FNV-1a checksum of
/// the binary payload.
void write_dataset(const Dataset& dataset, const std::string& path);

/// Reads a container and verifies its checksum against the sidecar; a
/// mismatch means corruption and is rejected.
Dataset read_dataset(const std::string& path);

}  // namespace hydronet
