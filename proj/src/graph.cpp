#include "hydronet/graph.hpp"

#include "hydronet/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <unordered_map>
#include <unordered_set>

namespace hydronet {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& invariant, const std::string& element,
                       const std::string& detail) {
    throw ValidationError("network invariant '" + invariant + "' violated at '" +
                          element + "': " + detail);
}

void reject_unknown_keys(const json& obj, const std::vector<std::string>& allowed,
                         const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ValidationError("unknown key '" + key + "' in " + where);
    }
}

double require_number(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key))
        throw ValidationError("missing key '" + key + "' in " + where);
    if (!obj[key].is_number())
        throw ValidationError("key '" + key + "' in " + where + " must be a number");
    return obj[key].get<double>();
}

std::string require_string(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key))
        throw ValidationError("missing key '" + key + "' in " + where);
    if (!obj[key].is_string())
        throw ValidationError("key '" + key + "' in " + where + " must be a string");
    return obj[key].get<std::string>();
}

void check_finite(double v, const std::string& field, const std::string& element) {
    if (!std::isfinite(v)) fail("finite_values", element, field + " is not finite");
}

}  // namespace

std::string to_string(NodeKind kind) {
    return kind == NodeKind::junction ? "junction" : "outfall";
}

NodeKind node_kind_from_string(const std::string& s) {
    if (s == "junction") return NodeKind::junction;
    if (s == "outfall") return NodeKind::outfall;
    throw ValidationError("node kind must be 'junction' or 'outfall', got '" + s + "'");
}

DrainageGraph::DrainageGraph(std::vector<NodeSpec> nodes, std::vector<EdgeSpec> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
    if (nodes_.empty()) fail("nonempty_network", "<network>", "no nodes");

    std::unordered_map<std::string, int> node_ids;
    for (int i = 0; i < node_count(); ++i) {
        const auto& n = nodes_[i];
        if (n.id.empty()) fail("nonempty_id", "<node " + std::to_string(i) + ">", "empty id");
        if (!node_ids.emplace(n.id, i).second) fail("unique_ids", n.id, "duplicate node id");
        check_finite(n.invert_elevation, "invert_elevation", n.id);
        check_finite(n.max_depth, "max_depth", n.id);
        check_finite(n.storage_area, "storage_area", n.id);
        check_finite(n.catchment_area, "catchment_area", n.id);
        if (n.catchment_area < 0.0) fail("nonnegative_catchment", n.id, "catchment_area < 0");
        if (n.kind == NodeKind::junction) {
            if (n.max_depth <= 0.0) fail("positive_max_depth", n.id, "max_depth must be > 0");
            if (n.storage_area <= 0.0) fail("positive_storage_area", n.id, "storage_area must be > 0");
        }
    }

    std::unordered_set<std::string> edge_ids;
    edge_from_.resize(edge_count());
    edge_to_.resize(edge_count());
    out_edges_.resize(node_count());
    in_edges_.resize(node_count());
    for (int j = 0; j < edge_count(); ++j) {
        const auto& e = edges_[j];
        if (e.id.empty()) fail("nonempty_id", "<edge " + std::to_string(j) + ">", "empty id");
        if (!edge_ids.insert(e.id).second) fail("unique_ids", e.id, "duplicate edge id");
        if (node_ids.count(e.id)) fail("unique_ids", e.id, "edge id collides with a node id");
        auto from_it = node_ids.find(e.from);
        auto to_it = node_ids.find(e.to);
        if (from_it == node_ids.end()) fail("edge_endpoints_exist", e.id, "unknown node '" + e.from + "'");
        if (to_it == node_ids.end()) fail("edge_endpoints_exist", e.id, "unknown node '" + e.to + "'");
        if (e.from == e.to) fail("no_self_loops", e.id, "from and to are the same node");
        check_finite(e.length, "length", e.id);
        check_finite(e.capacity, "capacity", e.id);
        check_finite(e.conveyance_coeff, "conveyance_coeff", e.id);
        if (e.length <= 0.0) fail("positive_length", e.id, "length must be > 0");
        if (e.capacity <= 0.0) fail("positive_capacity", e.id, "capacity must be > 0");
        if (e.conveyance_coeff <= 0.0) fail("positive_conveyance", e.id, "conveyance_coeff must be > 0");
        edge_from_[j] = from_it->second;
        edge_to_[j] = to_it->second;
        out_edges_[from_it->second].push_back(j);
        in_edges_[to_it->second].push_back(j);
    }

    int outfalls = 0;
    for (int i = 0; i < node_count(); ++i) {
        if (!is_outfall(i)) continue;
        ++outfalls;
        if (!out_edges_[i].empty())
            fail("outfalls_terminal", nodes_[i].id, "outfall has an outgoing edge");
    }
    if (outfalls == 0) fail("has_outfall", "<network>", "no outfall node");

    // Undirected connectivity: every element must be reachable, otherwise the
    // distance-based neighborhoods degenerate.
    if (node_count() > 1) {
        std::vector<char> seen(node_count(), 0);
        std::vector<int> stack{0};
        seen[0] = 1;
        while (!stack.empty()) {
            int i = stack.back();
            stack.pop_back();
            for (int j : out_edges_[i])
                if (!seen[edge_to_[j]]) { seen[edge_to_[j]] = 1; stack.push_back(edge_to_[j]); }
            for (int j : in_edges_[i])
                if (!seen[edge_from_[j]]) { seen[edge_from_[j]] = 1; stack.push_back(edge_from_[j]); }
        }
        for (int i = 0; i < node_count(); ++i)
            if (!seen[i]) fail("connected", nodes_[i].id, "node unreachable from '" + nodes_[0].id + "'");
    }
}

DrainageGraph DrainageGraph::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("network file must contain a JSON object");
    reject_unknown_keys(j, {"nodes", "edges"}, "network object");
    if (!j.contains("nodes") || !j["nodes"].is_array())
        throw ValidationError("network object must contain a 'nodes' array");
    if (!j.contains("edges") || !j["edges"].is_array())
        throw ValidationError("network object must contain an 'edges' array");

    std::vector<NodeSpec> nodes;
    for (const auto& nj : j["nodes"]) {
        if (!nj.is_object()) throw ValidationError("node entries must be objects");
        const std::string where = "node '" + nj.value("id", std::string("<unnamed>")) + "'";
        reject_unknown_keys(nj, {"id", "kind", "invert_elevation", "max_depth",
                                 "storage_area", "catchment_area"}, where);
        NodeSpec n;
        n.id = require_string(nj, "id", where);
        n.kind = node_kind_from_string(require_string(nj, "kind", where));
        n.invert_elevation = require_number(nj, "invert_elevation", where);
        n.max_depth = require_number(nj, "max_depth", where);
        n.storage_area = require_number(nj, "storage_area", where);
        n.catchment_area = require_number(nj, "catchment_area", where);
        nodes.push_back(std::move(n));
    }

    std::vector<EdgeSpec> edges;
    for (const auto& ej : j["edges"]) {
        if (!ej.is_object()) throw ValidationError("edge entries must be objects");
        const std::string where = "edge '" + ej.value("id", std::string("<unnamed>")) + "'";
        reject_unknown_keys(ej, {"id", "from", "to", "length", "capacity",
                                 "conveyance_coeff", "controllable"}, where);
        EdgeSpec e;
        e.id = require_string(ej, "id", where);
        e.from = require_string(ej, "from", where);
        e.to = require_string(ej, "to", where);
        e.length = require_number(ej, "length", where);
        e.capacity = require_number(ej, "capacity", where);
        e.conveyance_coeff = require_number(ej, "conveyance_coeff", where);
        if (!ej.contains("controllable") || !ej["controllable"].is_boolean())
            throw ValidationError("key 'controllable' in " + where + " must be a boolean");
        e.controllable = ej["controllable"].get<bool>();
        edges.push_back(std::move(e));
    }

    return DrainageGraph(std::move(nodes), std::move(edges));
}

DrainageGraph DrainageGraph::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeFailure("cannot open network file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("network file '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
}

int DrainageGraph::node_index(const std::string& id) const {
    for (int i = 0; i < node_count(); ++i)
        if (nodes_[i].id == id) return i;
    throw ValidationError("unknown node id '" + id + "'");
}

int DrainageGraph::edge_index(const std::string& id) const {
    for (int j = 0; j < edge_count(); ++j)
        if (edges_[j].id == id) return j;
    throw ValidationError("unknown edge id '" + id + "'");
}

bool DrainageGraph::has_node(const std::string& id) const {
    return std::any_of(nodes_.begin(), nodes_.end(),
                       [&](const NodeSpec& n) { return n.id == id; });
}

bool DrainageGraph::has_edge(const std::string& id) const {
    return std::any_of(edges_.begin(), edges_.end(),
                       [&](const EdgeSpec& e) { return e.id == id; });
}

Eigen::MatrixXd DrainageGraph::incidence() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(node_count(), edge_count());
    for (int j = 0; j < edge_count(); ++j) {
        m(edge_from_[j], j) = 1.0;
        m(edge_to_[j], j) = -1.0;
    }
    return m;
}

nlohmann::json DrainageGraph::to_json() const {
    json j;
    j["nodes"] = json::array();
    for (const auto& n : nodes_) {
        json nj;
        nj["id"] = n.id;
        nj["kind"] = to_string(n.kind);
        nj["invert_elevation"] = n.invert_elevation;
        nj["max_depth"] = n.max_depth;
        nj["storage_area"] = n.storage_area;
        nj["catchment_area"] = n.catchment_area;
        j["nodes"].push_back(std::move(nj));
    }
    j["edges"] = json::array();
    for (const auto& e : edges_) {
        json ej;
        ej["id"] = e.id;
        ej["from"] = e.from;
        ej["to"] = e.to;
        ej["length"] = e.length;
        ej["capacity"] = e.capacity;
        ej["conveyance_coeff"] = e.conveyance_coeff;
        ej["controllable"] = e.controllable;
        j["edges"].push_back(std::move(ej));
    }
    return j;
}

std::string DrainageGraph::content_hash() const {
    // nlohmann sorts object keys on dump, and numbers serialize via shortest
    // round-trip formatting, so equal graphs hash equally.
    return to_hex(fnv1a64(to_json().dump()));
}

Eigen::MatrixXd node_distances(const DrainageGraph& graph) {
    const int n = graph.node_count();
    const double inf = std::numeric_limits<double>::infinity();
    Eigen::MatrixXd dist = Eigen::MatrixXd::Constant(n, n, inf);

    // Undirected adjacency list; edge direction is irrelevant for proximity.
    std::vector<std::vector<std::pair<int, double>>> adj(n);
    for (int j = 0; j < graph.edge_count(); ++j) {
        int a = graph.edge_from(j), b = graph.edge_to(j);
        double w = graph.edge(j).length;
        adj[a].emplace_back(b, w);
        adj[b].emplace_back(a, w);
    }

    using Item = std::pair<double, int>;
    for (int src = 0; src < n; ++src) {
        std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
        dist(src, src) = 0.0;
        pq.emplace(0.0, src);
        while (!pq.empty()) {
            auto [d, u] = pq.top();
            pq.pop();
            if (d > dist(src, u)) continue;
            for (auto [v, w] : adj[u]) {
                if (d + w < dist(src, v)) {
                    dist(src, v) = d + w;
                    pq.emplace(d + w, v);
                }
            }
        }
    }
    return dist;
}

namespace {

double edge_pair_distance(const DrainageGraph& graph, const Eigen::MatrixXd& nd,
                          int a, int b) {
    const int ua = graph.edge_from(a), va = graph.edge_to(a);
    const int ub = graph.edge_from(b), vb = graph.edge_to(b);
    return std::min(std::min(nd(ua, ub), nd(ua, vb)), std::min(nd(va, ub), nd(va, vb)));
}

}  // namespace

double element_distance(const DrainageGraph& graph, const std::string& a,
                        const std::string& b) {
    const bool a_node = graph.has_node(a), b_node = graph.has_node(b);
    const bool a_edge = graph.has_edge(a), b_edge = graph.has_edge(b);
    if ((!a_node && !a_edge) || (!b_node && !b_edge))
        throw ValidationError("element_distance: unknown element id '" +
                              (a_node || a_edge ? b : a) + "'");
    if (a_node != b_node)
        throw ValidationError("element_distance: '" + a + "' and '" + b +
                              "' are not elements of the same kind");
    const Eigen::MatrixXd nd = node_distances(graph);
    if (a_node) return nd(graph.node_index(a), graph.node_index(b));
    return edge_pair_distance(graph, nd, graph.edge_index(a), graph.edge_index(b));
}

Adjacency threshold_adjacency(const DrainageGraph& graph, double delta) {
    if (!(delta > 0.0)) throw ValidationError("adjacency threshold delta must be > 0");
    const int c = graph.edge_count();
    const Eigen::MatrixXd nd = node_distances(graph);

    Adjacency adj;
    adj.delta = delta;
    adj.node = (nd.array() <= delta).cast<double>();
    adj.edge = Eigen::MatrixXd::Zero(c, c);
    for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b)
            adj.edge(a, b) = edge_pair_distance(graph, nd, a, b) <= delta ? 1.0 : 0.0;
    return adj;
}

}  // namespace hydronet
