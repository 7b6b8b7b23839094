#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hydronet/dataset.hpp"
#include "hydronet/scenario.hpp"

#include "helpers.hpp"

#include <cstdio>
#include <fstream>

using namespace hydronet;
using namespace hydronet::testutil;

namespace {

Trajectory chain_trajectory(const DrainageGraph& g, int steps, double peak) {
    StormShape shape;
    shape.duration = std::max(4, steps / 2);
    shape.peak_step = shape.duration / 2;
    shape.peak_intensity = peak;
    auto intensity = hyetograph(shape, steps - shape.duration);
    RunoffParams params;
    params.base_flow = 0.05;
    auto runoff = runoff_series(g, intensity, params);
    std::vector<BoundaryForcing> forcing(steps);
    for (int t = 0; t < steps; ++t) {
        forcing[t].runoff = runoff.col(t);
        forcing[t].control = Eigen::VectorXd::Ones(g.edge_count());
    }
    return simulate(g, initial_state(g), forcing);
}

}  // namespace

TEST_CASE("window count follows the anchor arithmetic") {
    auto g = DrainageGraph::from_file(kDataDir + "/toy_chain.json");
    auto traj = chain_trajectory(g, 10, 1.0);

    WindowSpec w{3, 2, 1};
    auto samples = window_trajectory(g, traj, w, "ev");
    CHECK(samples.size() == 6);  // anchors 2..7
    CHECK(samples.front().anchor == 2);
    CHECK(samples.back().anchor == 7);

    w.stride = 2;
    CHECK(window_trajectory(g, traj, w, "ev").size() == 3);  // anchors 2, 4, 6
    w.stride = 5;
    CHECK(window_trajectory(g, traj, w, "ev").size() == 2);  // anchors 2, 7

    WindowSpec too_long{8, 8, 1};
    CHECK(window_trajectory(g, traj, too_long, "ev").empty());
}

TEST_CASE("windows align with the trajectory") {
    auto g = DrainageGraph::from_file(kDataDir + "/toy_chain.json");
    auto traj = chain_trajectory(g, 12, 1.5);
    WindowSpec w{4, 3, 1};
    auto samples = window_trajectory(g, traj, w, "ev");
    REQUIRE(!samples.empty());

    const int n = g.node_count(), c = g.edge_count();
    for (const auto& s : samples) {
        // Last past step is the anchor state; first target is anchor + 1.
        for (int i = 0; i < n; ++i) {
            CHECK(s.past_nodes((w.past - 1) * n + i, 0) ==
                  static_cast<float>(traj.states[s.anchor].node_depth[i]));
            CHECK(s.target_nodes(i, 1) ==
                  static_cast<float>(traj.states[s.anchor + 1].node_inflow[i]));
            CHECK(s.past_node_forcing(i, 0) ==
                  static_cast<float>(traj.forcing[s.anchor - w.past + 1].runoff[i]));
            CHECK(s.future_node_forcing((w.future - 1) * n + i, 0) ==
                  static_cast<float>(traj.forcing[s.anchor + w.future].runoff[i]));
        }
        for (int j = 0; j < c; ++j)
            CHECK(s.target_edges((w.future - 1) * c + j, 1) ==
                  static_cast<float>(traj.states[s.anchor + w.future].edge_flow[j]));
    }
}

TEST_CASE("flood labels match positive spill targets exactly") {
    auto g = random_graph(17, 8, 2);
    Rng rng(derive_seed(17, "storm"));
    auto forcing = forcing_series(g, rng, 80, 30.0);  // floods hard
    auto traj = simulate(g, initial_state(g), forcing);
    auto samples = window_trajectory(g, traj, {10, 10, 3}, "storm");
    REQUIRE(!samples.empty());

    int positives = 0;
    for (const auto& s : samples) {
        for (Eigen::Index r = 0; r < s.flood_label.rows(); ++r) {
            CHECK(s.flood_label(r, 0) == (s.target_flood(r, 0) > 0.0f ? 1.0f : 0.0f));
            if (s.flood_label(r, 0) == 1.0f) ++positives;
        }
    }
    CHECK(positives > 0);
}

TEST_CASE("normalizer pools flow variables with a zero minimum") {
    auto g = DrainageGraph::from_file(kDataDir + "/toy_chain.json");
    auto traj = chain_trajectory(g, 40, 2.0);
    auto samples = window_trajectory(g, traj, {6, 4, 2}, "ev");
    auto norm = fit_normalizer(samples);

    float flow_hi = 0.0f;
    float h_v_hi = 0.0f;
    for (const auto& s : samples) {
        flow_hi = std::max({flow_hi, s.past_nodes.col(1).maxCoeff(), s.past_nodes.col(2).maxCoeff(),
                            s.target_nodes.col(1).maxCoeff(), s.target_nodes.col(2).maxCoeff(),
                            s.past_edges.col(1).maxCoeff(), s.target_edges.col(1).maxCoeff(),
                            s.past_node_forcing.maxCoeff(), s.future_node_forcing.maxCoeff(),
                            s.target_flood.maxCoeff()});
        h_v_hi = std::max({h_v_hi, s.past_nodes.col(0).maxCoeff(), s.target_nodes.col(0).maxCoeff()});
    }
    CHECK(norm.flow_max == doctest::Approx(flow_hi).epsilon(1e-12));
    CHECK(norm.h_v_max == doctest::Approx(h_v_hi).epsilon(1e-12));

    using K = Normalizer::Kind;
    // Pinned zero minimum keeps the flow map linear: sums of flows normalize
    // to sums of normalized flows.
    const double qa = 0.3 * norm.flow_max, qb = 0.5 * norm.flow_max;
    CHECK(norm.normalize(K::flow, qa + qb) ==
          doctest::Approx(norm.normalize(K::flow, qa) + norm.normalize(K::flow, qb)).epsilon(1e-14));

    CHECK(norm.normalize(K::flow, 0.0) == 0.0);
    CHECK(norm.normalize(K::flow, norm.flow_max) == 1.0);
    CHECK(norm.normalize(K::flow, 2.0 * norm.flow_max) == 1.0);  // clamped
    CHECK(norm.denormalize(K::flow, norm.normalize(K::flow, qa)) == doctest::Approx(qa).epsilon(1e-12));
    CHECK(norm.normalize(K::control, 0.73) == 0.73);

    // Round-trip through JSON.
    auto norm2 = Normalizer::from_json(norm.to_json());
    CHECK(norm2.flow_max == norm.flow_max);
    CHECK(norm2.h_v_min == norm.h_v_min);
    CHECK(norm2.h_e_max == norm.h_e_max);
}

TEST_CASE("degenerate ranges normalize to zero") {
    Normalizer n;  // all ranges empty
    using K = Normalizer::Kind;
    CHECK(n.normalize(K::depth_node, 5.0) == 0.0);
    CHECK(n.normalize(K::flow, 3.0) == 0.0);
    CHECK(n.denormalize(K::depth_node, 0.7) == n.h_v_min);
    CHECK_THROWS_AS(fit_normalizer({}), ValidationError);
}

TEST_CASE("dataset container round-trips bit-exactly") {
    auto g = random_graph(23, 7, 2);
    Rng rng(derive_seed(23, "data"));
    auto traj = simulate(g, initial_state(g), forcing_series(g, rng, 50, 4.0));
    Dataset ds;
    ds.window = {8, 6, 4};
    ds.network_hash = g.content_hash();
    ds.seed = 23;
    ds.event_ids = {"event-000"};
    ds.samples = window_trajectory(g, traj, ds.window, "event-000");
    REQUIRE(!ds.samples.empty());
    ds.normalizer = fit_normalizer(ds.samples);

    const std::string path = "ds_test.hnd";
    write_dataset(ds, path);
    auto back = read_dataset(path);

    CHECK(back.window.past == 8);
    CHECK(back.window.stride == 4);
    CHECK(back.network_hash == ds.network_hash);
    CHECK(back.normalizer.flow_max == ds.normalizer.flow_max);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t k = 0; k < ds.samples.size(); ++k) {
        CHECK(back.samples[k].event_id == ds.samples[k].event_id);
        CHECK(back.samples[k].anchor == ds.samples[k].anchor);
        CHECK(back.samples[k].past_nodes == ds.samples[k].past_nodes);
        CHECK(back.samples[k].target_edges == ds.samples[k].target_edges);
        CHECK(back.samples[k].flood_label == ds.samples[k].flood_label);
    }

    // Writing the reread dataset reproduces the file byte for byte.
    const std::string path2 = "ds_test2.hnd";
    write_dataset(back, path2);
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(path) == slurp(path2));

    // Corruption is caught by the checksum.
    std::string bytes = slurp(path);
    bytes[bytes.size() / 2] ^= 0x40;
    std::ofstream(path, std::ios::binary).write(bytes.data(), bytes.size());
    CHECK_THROWS_AS(read_dataset(path), ValidationError);

    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
    std::remove(path2.c_str());
    std::remove((path2 + ".json").c_str());
}
