#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hydronet/common.hpp"
#include "hydronet/graph.hpp"

#include "helpers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

using namespace hydronet;
using hydronet::testutil::kDataDir;
using hydronet::testutil::random_graph;
using nlohmann::json;

namespace {

json chain_json() {
    return json::parse(R"({
      "nodes": [
        {"id": "v1", "kind": "junction", "invert_elevation": 2.0, "max_depth": 3.0, "storage_area": 10.0, "catchment_area": 1200.0},
        {"id": "v2", "kind": "junction", "invert_elevation": 1.0, "max_depth": 3.0, "storage_area": 10.0, "catchment_area": 800.0},
        {"id": "v3", "kind": "outfall", "invert_elevation": 0.0, "max_depth": 0.0, "storage_area": 0.0, "catchment_area": 0.0}
      ],
      "edges": [
        {"id": "e1", "from": "v1", "to": "v2", "length": 600.0, "capacity": 6.0, "conveyance_coeff": 4.0, "controllable": false},
        {"id": "e2", "from": "v2", "to": "v3", "length": 600.0, "capacity": 6.0, "conveyance_coeff": 4.0, "controllable": true}
      ]
    })");
}

/// Independent all-pairs check: Floyd-Warshall on the undirected length graph.
Eigen::MatrixXd floyd_warshall(const DrainageGraph& g) {
    const int n = g.node_count();
    const double inf = std::numeric_limits<double>::infinity();
    Eigen::MatrixXd d = Eigen::MatrixXd::Constant(n, n, inf);
    for (int i = 0; i < n; ++i) d(i, i) = 0.0;
    for (int j = 0; j < g.edge_count(); ++j) {
        int a = g.edge_from(j), b = g.edge_to(j);
        d(a, b) = std::min(d(a, b), g.edge(j).length);
        d(b, a) = std::min(d(b, a), g.edge(j).length);
    }
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                d(i, j) = std::min(d(i, j), d(i, k) + d(k, j));
    return d;
}

}  // namespace

TEST_CASE("chain distances and neighborhoods") {
    auto g = DrainageGraph::from_json(chain_json());
    CHECK(g.node_count() == 3);
    CHECK(g.edge_count() == 2);

    CHECK(element_distance(g, "v1", "v2") == doctest::Approx(600.0));
    CHECK(element_distance(g, "v2", "v3") == doctest::Approx(600.0));
    CHECK(element_distance(g, "v1", "v3") == doctest::Approx(1200.0));
    CHECK(element_distance(g, "v1", "v1") == 0.0);

    // Adjacent edges share v2, so their distance is zero.
    CHECK(element_distance(g, "e1", "e2") == 0.0);

    auto adj = threshold_adjacency(g, 1000.0);
    CHECK(adj.node(0, 1) == 1.0);
    CHECK(adj.node(1, 2) == 1.0);
    CHECK(adj.node(0, 2) == 0.0);  // 1200 m exceeds the 1000 m threshold
    for (int i = 0; i < 3; ++i) CHECK(adj.node(i, i) == 1.0);
    CHECK(adj.edge(0, 1) == 1.0);
    CHECK(adj.edge.diagonal().minCoeff() == 1.0);
}

TEST_CASE("distances match Floyd-Warshall on random networks") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        auto g = random_graph(seed, 12, 4);
        auto fast = node_distances(g);
        auto slow = floyd_warshall(g);
        CHECK((fast - slow).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("distance is a metric and adjacency behaves") {
    auto g = random_graph(77, 10, 3);
    auto d = node_distances(g);
    const int n = g.node_count();
    for (int i = 0; i < n; ++i) {
        CHECK(d(i, i) == 0.0);
        for (int j = 0; j < n; ++j) {
            CHECK(d(i, j) == doctest::Approx(d(j, i)));
            for (int k = 0; k < n; ++k)
                CHECK(d(i, j) <= d(i, k) + d(k, j) + 1e-9);
        }
    }

    auto small = threshold_adjacency(g, 300.0);
    auto large = threshold_adjacency(g, 1500.0);
    CHECK((small.node - small.node.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((small.edge - small.edge.transpose()).cwiseAbs().maxCoeff() == 0.0);
    // Growing delta can only add neighbors.
    CHECK(((large.node - small.node).array() >= 0.0).all());
    CHECK(((large.edge - small.edge).array() >= 0.0).all());
    CHECK(small.node.diagonal().minCoeff() == 1.0);
    CHECK(small.edge.diagonal().minCoeff() == 1.0);
}

TEST_CASE("edge-edge distance uses closest endpoints") {
    auto g = DrainageGraph::from_json(chain_json());
    // e1 spans v1-v2, e2 spans v2-v3: shared endpoint.
    CHECK(element_distance(g, "e1", "e2") == 0.0);
    CHECK(element_distance(g, "e1", "e1") == 0.0);

    // A longer chain where the edges do not touch.
    json j = chain_json();
    j["nodes"].push_back({{"id", "v4"}, {"kind", "junction"}, {"invert_elevation", 3.0},
                          {"max_depth", 3.0}, {"storage_area", 10.0}, {"catchment_area", 100.0}});
    j["edges"].push_back({{"id", "e3"}, {"from", "v4"}, {"to", "v1"}, {"length", 250.0},
                          {"capacity", 5.0}, {"conveyance_coeff", 3.0}, {"controllable", false}});
    auto g4 = DrainageGraph::from_json(j);
    // e3 spans v4-v1, e2 spans v2-v3: closest endpoints are v1 and v2.
    CHECK(element_distance(g4, "e3", "e2") == doctest::Approx(600.0));
}

TEST_CASE("incidence matrix structure") {
    auto g = random_graph(5, 9, 3);
    auto m = g.incidence();
    REQUIRE(m.rows() == g.node_count());
    REQUIRE(m.cols() == g.edge_count());
    for (int j = 0; j < g.edge_count(); ++j) {
        CHECK(m.col(j).sum() == 0.0);  // one +1, one -1 per conduit
        CHECK(m.col(j).cwiseAbs().sum() == 2.0);
        CHECK(m(g.edge_from(j), j) == 1.0);
        CHECK(m(g.edge_to(j), j) == -1.0);
    }
}

TEST_CASE("loads the chain fixture from disk") {
    auto g = DrainageGraph::from_file(kDataDir + "/toy_chain.json");
    CHECK(g.node_count() == 3);
    CHECK(g.edge(1).controllable);
    CHECK(g.node(g.node_index("v3")).kind == NodeKind::outfall);
}

TEST_CASE("loads the branched and city-scale fixtures from disk") {
    auto toy = DrainageGraph::from_file(kDataDir + "/toy15.json");
    CHECK(toy.node_count() == 15);
    CHECK(toy.edge_count() == 16);
    CHECK(toy.is_outfall(toy.node_index("out")));

    auto city = DrainageGraph::from_file(kDataDir + "/city105.json");
    CHECK(city.node_count() == 105);
    CHECK(city.edge_count() == 131);
}

TEST_CASE("round-trip and content hash") {
    auto g = DrainageGraph::from_json(chain_json());
    auto g2 = DrainageGraph::from_json(g.to_json());
    CHECK(g.to_json().dump() == g2.to_json().dump());
    CHECK(g.content_hash() == g2.content_hash());

    json altered = chain_json();
    altered["edges"][0]["length"] = 601.0;
    auto g3 = DrainageGraph::from_json(altered);
    CHECK(g.content_hash() != g3.content_hash());
}

TEST_CASE("validation rejects malformed networks") {
    auto expect_reject = [](json j, const std::string& needle) {
        try {
            DrainageGraph::from_json(j);
            FAIL_CHECK("expected rejection mentioning '" << needle << "'");
        } catch (const ValidationError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };

    json dup = chain_json();
    dup["nodes"][1]["id"] = "v1";
    expect_reject(dup, "unique_ids");

    json ghost = chain_json();
    ghost["edges"][0]["to"] = "nowhere";
    expect_reject(ghost, "edge_endpoints_exist");

    json self_loop = chain_json();
    self_loop["edges"][0]["to"] = "v1";
    expect_reject(self_loop, "no_self_loops");

    json bad_len = chain_json();
    bad_len["edges"][0]["length"] = -5.0;
    expect_reject(bad_len, "positive_length");

    json no_outfall = chain_json();
    no_outfall["nodes"][2]["kind"] = "junction";
    no_outfall["nodes"][2]["max_depth"] = 2.0;
    no_outfall["nodes"][2]["storage_area"] = 5.0;
    expect_reject(no_outfall, "has_outfall");

    json zero_storage = chain_json();
    zero_storage["nodes"][0]["storage_area"] = 0.0;
    expect_reject(zero_storage, "positive_storage_area");

    json outfall_out = chain_json();
    outfall_out["edges"][1]["from"] = "v3";
    outfall_out["edges"][1]["to"] = "v2";
    expect_reject(outfall_out, "outfalls_terminal");

    json unknown_key = chain_json();
    unknown_key["nodes"][0]["color"] = "blue";
    expect_reject(unknown_key, "unknown key 'color'");

    json extra_top = chain_json();
    extra_top["comment"] = "hello";
    expect_reject(extra_top, "unknown key 'comment'");

    json bad_kind = chain_json();
    bad_kind["nodes"][0]["kind"] = "reservoir";
    expect_reject(bad_kind, "junction");

    json disconnected = chain_json();
    disconnected["nodes"].push_back({{"id", "island"}, {"kind", "junction"},
                                     {"invert_elevation", 0.0}, {"max_depth", 1.0},
                                     {"storage_area", 1.0}, {"catchment_area", 0.0}});
    expect_reject(disconnected, "connected");

    json edge_node_clash = chain_json();
    edge_node_clash["edges"][0]["id"] = "v2";
    expect_reject(edge_node_clash, "unique_ids");
}

TEST_CASE("element distance rejects mixed or unknown ids") {
    auto g = DrainageGraph::from_json(chain_json());
    CHECK_THROWS_AS(element_distance(g, "v1", "e1"), ValidationError);
    CHECK_THROWS_AS(element_distance(g, "v1", "zz"), ValidationError);
}

TEST_CASE("deterministic rng streams") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    CHECK(derive_seed(42, "events") == derive_seed(42, "events"));
    CHECK(derive_seed(42, "events") != derive_seed(42, "init"));
    CHECK(derive_seed(42, "events") != derive_seed(43, "events"));

    Rng c(7);
    for (int i = 0; i < 1000; ++i) {
        double u = c.uniform(2.0, 5.0);
        CHECK(u >= 2.0);
        CHECK(u < 5.0);
    }
}
