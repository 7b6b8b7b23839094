#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <string>
#include <vector>

namespace hydronet {

enum class NodeKind { junction, outfall };

std::string to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& s);

/// A manhole/storage node. Outfalls are terminal: fixed free-discharge
/// boundary, zero storage, no outgoing edges.
struct NodeSpec {
    std::string id;
    NodeKind kind = NodeKind::junction;
    double invert_elevation = 0.0;  // m, datum for hydraulic head
    double max_depth = 0.0;         // m, depth at which the node surcharges
    double storage_area = 0.0;      // m^2, plan area converting volume to depth
    double catchment_area = 0.0;    // m^2, drainage area feeding this node
};

/// A conduit between two nodes. Flow direction is from -> to; the solver
/// never routes water against it.
struct EdgeSpec {
    std::string id;
    std::string from;
    std::string to;
    double length = 0.0;            // m
    double capacity = 0.0;          // m^3/min, hard upper bound on flow
    double conveyance_coeff = 0.0;  // m^3/min per sqrt(m) of head difference
    bool controllable = false;      // true if an orifice setting a in [0,1] applies
};

/// Validated drainage network. Construction runs the full invariant check and
/// throws ValidationError naming the violated invariant and offending element.
class DrainageGraph {
public:
    DrainageGraph(std::vector<NodeSpec> nodes, std::vector<EdgeSpec> edges);

    static DrainageGraph from_json(const nlohmann::json& j);
    static DrainageGraph from_file(const std::string& path);

    int node_count() const { return static_cast<int>(nodes_.size()); }
    int edge_count() const { return static_cast<int>(edges_.size()); }

    const std::vector<NodeSpec>& nodes() const { return nodes_; }
    const std::vector<EdgeSpec>& edges() const { return edges_; }
    const NodeSpec& node(int i) const { return nodes_[i]; }
    const EdgeSpec& edge(int j) const { return edges_[j]; }

    int node_index(const std::string& id) const;
    int edge_index(const std::string& id) const;
    bool has_node(const std::string& id) const;
    bool has_edge(const std::string& id) const;

    int edge_from(int j) const { return edge_from_[j]; }
    int edge_to(int j) const { return edge_to_[j]; }
    const std::vector<int>& out_edges(int i) const { return out_edges_[i]; }
    const std::vector<int>& in_edges(int i) const { return in_edges_[i]; }
    bool is_outfall(int i) const { return nodes_[i].kind == NodeKind::outfall; }

    /// Signed node-edge incidence: +1 where the edge leaves the node, -1 where
    /// it enters, 0 otherwise. Shape node_count x edge_count.
    Eigen::MatrixXd incidence() const;

    /// Canonical JSON form: same schema the loader accepts, field order fixed,
    /// floats formatted to round-trip. Equal graphs serialize identically.
    nlohmann::json to_json() const;

    /// FNV-1a hash of the canonical serialization; identifies the network in
    /// dataset and checkpoint manifests.
    std::string content_hash() const;

private:
    std::vector<NodeSpec> nodes_;
    std::vector<EdgeSpec> edges_;
    std::vector<int> edge_from_, edge_to_;
    std::vector<std::vector<int>> out_edges_, in_edges_;
};

/// All-pairs undirected shortest-path distance along edge lengths.
/// Entry (i, j) is +inf when no path exists, 0 on the diagonal.
Eigen::MatrixXd node_distances(const DrainageGraph& graph);

/// Shortest-path distance between two elements of the same kind (two node ids
/// or two edge ids). Edge-edge distance is the minimum over endpoint pairs,
/// zero when the edges share an endpoint.
double element_distance(const DrainageGraph& graph, const std::string& a,
                        const std::string& b);

/// Distance-thresholded neighborhoods used by the attention layers.
struct Adjacency {
    Eigen::MatrixXd node;  // N x N, 1 where node distance <= delta
    Eigen::MatrixXd edge;  // C x C, 1 where edge distance <= delta
    double delta = 0.0;
};

/// Builds both adjacency matrices for threshold delta (> 0). Diagonals are
/// all ones: every element is its own neighbor.
Adjacency threshold_adjacency(const DrainageGraph& graph, double delta);

}  // namespace hydronet
