#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "hydronet/common.hpp"
#include "hydronet/dataset.hpp"
#include "hydronet/model.hpp"
#include "hydronet/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

using namespace hydronet;

namespace {

struct ModelData {
    DrainageGraph graph;
    std::vector<Sample> samples;
    Normalizer norm;
};

ModelData make_data(std::uint64_t seed, int n_nodes, int n_extra, int past, int future,
                    double max_runoff = 8.0) {
    DrainageGraph graph = testutil::random_graph(seed, n_nodes, n_extra);
    Rng rng(derive_seed(seed, "forcing"));
    const int steps = past + future + 6;
    auto forcing = testutil::forcing_series(graph, rng, steps, max_runoff);
    Trajectory traj = simulate(graph, initial_state(graph), forcing, OracleConfig{});
    WindowSpec spec;
    spec.past = past;
    spec.future = future;
    spec.stride = 2;
    std::vector<Sample> samples = window_trajectory(graph, traj, spec, "ev");
    Normalizer norm = fit_normalizer(samples);
    return ModelData{std::move(graph), std::move(samples), norm};
}

ModelConfig small_config(SpatialKind sk, FusionKind fk, FloodMethod fm) {
    ModelConfig cfg;
    cfg.past_steps = 4;
    cfg.future_steps = 3;
    cfg.spatial_kind = sk;
    cfg.fusion = fk;
    cfg.flood_method = fm;
    cfg.spatial_layers = 2;
    cfg.hidden_channels = 4;
    cfg.attention_heads = 2;
    cfg.temporal_kernel = 2;
    cfg.temporal_dilations = {1, 2};
    cfg.delta = 1000.0;
    cfg.seed = 7;
    return cfg;
}

Batch to_batch(const ModelData& data, const ModelConfig& cfg, const GraphArtifacts& art,
               int count) {
    std::vector<const Sample*> ptrs;
    const int have = static_cast<int>(data.samples.size());
    REQUIRE(have >= count);
    for (int i = 0; i < count; ++i) ptrs.push_back(&data.samples[static_cast<std::size_t>(i)]);
    return make_batch(ptrs, data.norm, cfg, art);
}

void randomize_params(ParameterSet& ps, std::uint64_t seed, double scale) {
    for (int i = 0; i < ps.count(); ++i) {
        Rng rng(derive_seed(seed, ps.name(i)));
        Eigen::MatrixXd& t = ps.tensor(i);
        for (Eigen::Index r = 0; r < t.rows(); ++r) {
            for (Eigen::Index c = 0; c < t.cols(); ++c) {
                t(r, c) = rng.uniform(-scale, scale);
            }
        }
    }
}

}  // namespace

TEST_CASE("model config validates invariants and round-trips through json") {
    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::fusion, FloodMethod::balance);
    cfg.validate();
    CHECK(cfg.receptive_field() == 4);  // 1 + (2-1) * (1+2)

    ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());

    SUBCASE("receptive field must cover the past window") {
        ModelConfig bad = cfg;
        bad.past_steps = 5;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("dilations must strictly increase") {
        ModelConfig bad = cfg;
        bad.temporal_dilations = {1, 2, 2};
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("hidden channels must split across heads") {
        ModelConfig bad = cfg;
        bad.hidden_channels = 5;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("counts must be positive") {
        ModelConfig bad = cfg;
        bad.spatial_layers = 0;
        CHECK_THROWS_AS(bad.validate(), ValidationError);
    }
    SUBCASE("unknown json keys are rejected") {
        nlohmann::json j = cfg.to_json();
        j["extra"] = 1;
        CHECK_THROWS_AS(ModelConfig::from_json(j), ValidationError);
    }
}

TEST_CASE("parameter initialization is seeded and structured") {
    ModelData data = make_data(11, 5, 1, 4, 3);

    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::fusion, FloodMethod::classification);
    Model a(cfg, data.graph);
    Model b(cfg, data.graph);
    ModelConfig other = cfg;
    other.seed = 8;
    Model c(other, data.graph);

    bool any_diff = false;
    for (int i = 0; i < a.params().count(); ++i) {
        CHECK(a.params().name(i) == b.params().name(i));
        CHECK(a.params().tensor(i) == b.params().tensor(i));
        if (a.params().tensor(i) != c.params().tensor(i)) any_diff = true;
    }
    CHECK(any_diff);

    for (int i = 0; i < a.params().count(); ++i) {
        const std::string& name = a.params().name(i);
        const Eigen::MatrixXd& t = a.params().tensor(i);
        const bool bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
        if (bias || name.rfind("head.", 0) == 0) {
            CHECK(t.cwiseAbs().maxCoeff() == 0.0);
        } else {
            CHECK(t.cwiseAbs().maxCoeff() > 0.0);
            const double bound = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
            CHECK(t.cwiseAbs().maxCoeff() <= bound);
        }
    }

    SUBCASE("flattened variant exposes the 3N+2C state width plus forcing") {
        ModelConfig flat = small_config(SpatialKind::fully_connected, FusionKind::individual,
                                        FloodMethod::balance);
        Model fm(flat, data.graph);
        const int nn = static_cast<int>(data.graph.node_count());
        const int nc = static_cast<int>(data.graph.edge_count());
        CHECK(fm.params().tensor("past.spatial.0.w").rows() == 3 * nn + 2 * nc + nn + nc);
        CHECK(fm.params().tensor("future.spatial.0.w").rows() == nn + nc);
        CHECK(fm.params().tensor("head.node.w").cols() == 3 * nn);
    }
}

TEST_CASE("zero-initialized heads predict persistence of the last observed state") {
    ModelData data = make_data(21, 5, 1, 4, 3);
    const int nn = static_cast<int>(data.graph.node_count());
    const int nc = static_cast<int>(data.graph.edge_count());
    const int m = 4;
    const int n = 3;

    for (SpatialKind sk : {SpatialKind::fully_connected, SpatialKind::gat}) {
        for (FusionKind fk : {FusionKind::individual, FusionKind::fusion}) {
            CAPTURE(to_string(sk));
            CAPTURE(to_string(fk));
            ModelConfig cfg = small_config(sk, fk, FloodMethod::balance);
            Model model(cfg, data.graph);
            Batch batch = to_batch(data, cfg, model.artifacts(), 2);
            Prediction pred = model.predict(batch);

            for (int s = 0; s < 2; ++s) {
                // Normalized last observed rows of this sample.
                const Eigen::MatrixXd last_nodes =
                    batch.past_nodes.middleRows((s * m + (m - 1)) * nn, nn);
                const Eigen::MatrixXd last_edges =
                    batch.past_edges.middleRows((s * m + (m - 1)) * nc, nc);
                for (int t = 0; t < n; ++t) {
                    const Eigen::MatrixXd got_nodes =
                        pred.node_states.middleRows((s * n + t) * nn, nn);
                    const Eigen::MatrixXd got_edges =
                        pred.edge_states.middleRows((s * n + t) * nc, nc);
                    CHECK((got_edges - last_edges).cwiseAbs().maxCoeff() == 0.0);
                    CHECK((got_nodes.col(0) - last_nodes.col(0)).cwiseAbs().maxCoeff() == 0.0);
                    if (fk == FusionKind::individual) {
                        CHECK((got_nodes - last_nodes).cwiseAbs().maxCoeff() == 0.0);
                    } else {
                        // Flows come from summed edge flows; the observed
                        // inflow matches them up to float32 rounding of the
                        // stored samples.
                        CHECK((got_nodes.rightCols(2) - last_nodes.rightCols(2))
                                  .cwiseAbs().maxCoeff() < 1e-5);
                    }
                }
            }
        }
    }
}

TEST_CASE("fusion constraint ties node flows to summed edge flows exactly") {
    ModelData data = make_data(31, 6, 2, 4, 3);
    const int nn = static_cast<int>(data.graph.node_count());
    const int nc = static_cast<int>(data.graph.edge_count());
    const int n = 3;

    for (SpatialKind sk : {SpatialKind::gat, SpatialKind::fully_connected}) {
        CAPTURE(to_string(sk));
        ModelConfig cfg = small_config(sk, FusionKind::fusion, FloodMethod::balance);
        Model model(cfg, data.graph);
        for (std::uint64_t draw = 0; draw < 5; ++draw) {
            randomize_params(model.params(), 100 + draw, 0.5);
            Batch batch = to_batch(data, cfg, model.artifacts(), 2);
            Prediction pred = model.predict(batch);
            for (int row = 0; row < 2 * n; ++row) {
                for (int i = 0; i < nn; ++i) {
                    double in_sum = 0.0;
                    double out_sum = 0.0;
                    // Independent sums straight from the edge list.
                    for (int j = 0; j < nc; ++j) {
                        const double q = pred.edge_states(row * nc + j, 1);
                        if (data.graph.edge_to(j) == i) in_sum += q;
                        if (data.graph.edge_from(j) == i) out_sum += q;
                    }
                    CHECK(std::abs(pred.node_states(row * nn + i, 1) - in_sum) < 1e-12);
                    CHECK(std::abs(pred.node_states(row * nn + i, 2) - out_sum) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("flood balance and classification gate") {
    SUBCASE("pinned balance values") {
        Eigen::MatrixXd q_in(2, 1), runoff(2, 1), q_out(2, 1);
        q_in << 5.0, 5.0;
        runoff << 1.0, 1.0;
        q_out << 4.0, 7.0;
        const Eigen::MatrixXd w = flood_balance(q_in, runoff, q_out);
        CHECK(w(0, 0) == 2.0);
        CHECK(w(1, 0) == 0.0);
    }

    SUBCASE("gate zeroes at probability <= 0.5") {
        Eigen::MatrixXd balance(3, 1), prob(3, 1);
        balance << 2.0, 3.0, 4.0;
        prob << 0.4, 0.5, 0.51;
        const Eigen::MatrixXd w = apply_flood_gate(balance, prob);
        CHECK(w(0, 0) == 0.0);
        CHECK(w(1, 0) == 0.0);
        CHECK(w(2, 0) == 4.0);
    }

    SUBCASE("model flooding is nonnegative and respects the gate") {
        ModelData data = make_data(41, 5, 1, 4, 3, 20.0);
        ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::fusion,
                                       FloodMethod::classification);
        Model model(cfg, data.graph);
        randomize_params(model.params(), 404, 0.8);
        Batch batch = to_batch(data, cfg, model.artifacts(), 2);
        Prediction pred = model.predict(batch);
        REQUIRE(pred.flood_prob.size() == pred.flooding.size());
        const Eigen::MatrixXd balance = flood_balance(pred.node_states.col(1),
                                                      batch.future_node_forcing,
                                                      pred.node_states.col(2));
        bool gated = false;
        for (Eigen::Index i = 0; i < pred.flooding.rows(); ++i) {
            CHECK(pred.flooding(i, 0) >= 0.0);
            CHECK(pred.flood_prob(i, 0) > 0.0);
            CHECK(pred.flood_prob(i, 0) < 1.0);
            if (pred.flood_prob(i, 0) <= 0.5) {
                CHECK(pred.flooding(i, 0) == 0.0);
                gated = true;
            } else {
                CHECK(pred.flooding(i, 0) == balance(i, 0));
            }
        }
        (void)gated;

        SUBCASE("balance method reports the raw balance") {
            ModelConfig bcfg = small_config(SpatialKind::gat, FusionKind::fusion,
                                            FloodMethod::balance);
            Model bmodel(bcfg, data.graph);
            randomize_params(bmodel.params(), 404, 0.8);
            Prediction bpred = bmodel.predict(batch);
            const Eigen::MatrixXd want = flood_balance(bpred.node_states.col(1),
                                                       batch.future_node_forcing,
                                                       bpred.node_states.col(2));
            CHECK((bpred.flooding - want).cwiseAbs().maxCoeff() == 0.0);
            CHECK(bpred.flood_prob.size() == 0);
        }
    }
}

TEST_CASE("gat predictions are equivariant under element relabeling") {
    const std::uint64_t seed = 51;
    DrainageGraph g1 = testutil::random_graph(seed, 6, 2);
    const int nn = static_cast<int>(g1.node_count());
    const int nc = static_cast<int>(g1.edge_count());

    // Permuted copy: node k of g2 is node sigma[k] of g1, edge k is tau[k].
    std::vector<int> sigma(static_cast<std::size_t>(nn));
    std::iota(sigma.begin(), sigma.end(), 0);
    std::vector<int> tau(static_cast<std::size_t>(nc));
    std::iota(tau.begin(), tau.end(), 0);
    Rng prng(999);
    for (int i = nn - 1; i > 0; --i)
        std::swap(sigma[static_cast<std::size_t>(i)],
                  sigma[static_cast<std::size_t>(prng.uniform_int(0, i))]);
    for (int i = nc - 1; i > 0; --i)
        std::swap(tau[static_cast<std::size_t>(i)],
                  tau[static_cast<std::size_t>(prng.uniform_int(0, i))]);

    nlohmann::json j1 = g1.to_json();
    nlohmann::json j2 = j1;
    for (int k = 0; k < nn; ++k) j2["nodes"][static_cast<std::size_t>(k)] =
        j1["nodes"][static_cast<std::size_t>(sigma[static_cast<std::size_t>(k)])];
    for (int k = 0; k < nc; ++k) j2["edges"][static_cast<std::size_t>(k)] =
        j1["edges"][static_cast<std::size_t>(tau[static_cast<std::size_t>(k)])];
    DrainageGraph g2 = DrainageGraph::from_json(j2);

    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::fusion,
                                   FloodMethod::classification);
    Model m1(cfg, g1);
    Model m2(cfg, g2);
    randomize_params(m1.params(), 777, 0.5);

    // Same weights on both models; only the exchange tensors are indexed by
    // element order and must be permuted along with the graph.
    ParameterSet copy;
    for (int i = 0; i < m1.params().count(); ++i) {
        const std::string& name = m1.params().name(i);
        const Eigen::MatrixXd& src = m1.params().tensor(i);
        copy.add(name, static_cast<int>(src.rows()), static_cast<int>(src.cols()));
        Eigen::MatrixXd& dst = copy.tensor(i);
        if (name.find("exchange_node") != std::string::npos) {
            for (int r = 0; r < nn; ++r)
                for (int c = 0; c < nc; ++c)
                    dst(r, c) = src(sigma[static_cast<std::size_t>(r)],
                                    tau[static_cast<std::size_t>(c)]);
        } else if (name.find("exchange_edge") != std::string::npos) {
            for (int r = 0; r < nc; ++r)
                for (int c = 0; c < nn; ++c)
                    dst(r, c) = src(tau[static_cast<std::size_t>(r)],
                                    sigma[static_cast<std::size_t>(c)]);
        } else {
            dst = src;
        }
    }
    m2.set_parameters(copy);

    // Build one batch from g1's trajectory and its row-permuted counterpart.
    Rng rng(derive_seed(seed, "forcing"));
    auto forcing = testutil::forcing_series(g1, rng, 13, 8.0);
    Trajectory traj = simulate(g1, initial_state(g1), forcing, OracleConfig{});
    WindowSpec spec;
    spec.past = 4;
    spec.future = 3;
    spec.stride = 2;
    std::vector<Sample> samples = window_trajectory(g1, traj, spec, "ev");
    REQUIRE(samples.size() >= 2);
    Normalizer norm = fit_normalizer(samples);
    std::vector<const Sample*> ptrs = {&samples[0], &samples[1]};
    Batch b1 = make_batch(ptrs, norm, cfg, m1.artifacts());

    auto permute_blocks = [](const Eigen::MatrixXd& src, const std::vector<int>& perm) {
        const int r = static_cast<int>(perm.size());
        const int blocks = static_cast<int>(src.rows()) / r;
        Eigen::MatrixXd out(src.rows(), src.cols());
        for (int b = 0; b < blocks; ++b)
            for (int k = 0; k < r; ++k)
                out.row(b * r + k) = src.row(b * r + perm[static_cast<std::size_t>(k)]);
        return out;
    };
    Batch b2 = b1;
    b2.past_nodes = permute_blocks(b1.past_nodes, sigma);
    b2.past_node_forcing = permute_blocks(b1.past_node_forcing, sigma);
    b2.future_node_forcing = permute_blocks(b1.future_node_forcing, sigma);
    b2.target_nodes = permute_blocks(b1.target_nodes, sigma);
    b2.flood_label = permute_blocks(b1.flood_label, sigma);
    b2.past_edges = permute_blocks(b1.past_edges, tau);
    b2.past_edge_forcing = permute_blocks(b1.past_edge_forcing, tau);
    b2.future_edge_forcing = permute_blocks(b1.future_edge_forcing, tau);
    b2.target_edges = permute_blocks(b1.target_edges, tau);

    Prediction p1 = m1.predict(b1);
    Prediction p2 = m2.predict(b2);
    const Eigen::MatrixXd want_nodes = permute_blocks(p1.node_states, sigma);
    const Eigen::MatrixXd want_edges = permute_blocks(p1.edge_states, tau);
    const Eigen::MatrixXd want_flood = permute_blocks(p1.flooding, sigma);
    CHECK((p2.node_states - want_nodes).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((p2.edge_states - want_edges).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((p2.flooding - want_flood).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("gat spatial influence stays within the neighborhood closure") {
    // Chain of 6 nodes, 600 m pipes, delta 700: spatial neighborhoods reach
    // exactly one hop per layer.
    nlohmann::json j;
    j["nodes"] = nlohmann::json::array();
    j["edges"] = nlohmann::json::array();
    for (int i = 0; i < 6; ++i) {
        nlohmann::json node = {{"id", "n" + std::to_string(i)},
                               {"kind", i == 5 ? "outfall" : "junction"},
                               {"invert_elevation", 0.5 * (5 - i)},
                               {"max_depth", i == 5 ? 0.0 : 3.0},
                               {"storage_area", i == 5 ? 0.0 : 10.0},
                               {"catchment_area", i == 5 ? 0.0 : 900.0}};
        j["nodes"].push_back(node);
    }
    for (int i = 0; i < 5; ++i) {
        j["edges"].push_back({{"id", "p" + std::to_string(i)},
                              {"from", "n" + std::to_string(i)},
                              {"to", "n" + std::to_string(i + 1)},
                              {"length", 600.0},
                              {"capacity", 6.0},
                              {"conveyance_coeff", 3.0},
                              {"controllable", false}});
    }
    DrainageGraph graph = DrainageGraph::from_json(j);

    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::individual,
                                   FloodMethod::balance);
    cfg.delta = 700.0;
    cfg.spatial_layers = 2;
    Model model(cfg, graph);
    randomize_params(model.params(), 551, 0.5);
    // Dense exchange biases would couple every edge into every node; the
    // locality guarantee holds for the masked terms, so pin biases at zero.
    for (int i = 0; i < model.params().count(); ++i) {
        if (model.params().name(i).find("exchange") != std::string::npos &&
            model.params().name(i).back() == 'b') {
            model.params().tensor(i).setZero();
        }
    }

    Rng rng(derive_seed(61, "forcing"));
    auto forcing = testutil::forcing_series(graph, rng, 13, 6.0);
    Trajectory traj = simulate(graph, initial_state(graph), forcing, OracleConfig{});
    WindowSpec spec;
    spec.past = 4;
    spec.future = 3;
    spec.stride = 2;
    std::vector<Sample> samples = window_trajectory(graph, traj, spec, "ev");
    REQUIRE(!samples.empty());
    Normalizer norm = fit_normalizer(samples);
    std::vector<const Sample*> ptrs = {&samples[0]};
    Batch base = make_batch(ptrs, norm, cfg, model.artifacts());

    const int perturbed_node = 0;
    Batch bumped = base;
    for (int t = 0; t < cfg.past_steps; ++t) {
        bumped.past_nodes(t * 6 + perturbed_node, 0) += 0.25;
    }

    // Influence closure: each layer the perturbation reaches a node if any
    // neighborhood member either already carries it or touches a carrying
    // edge, and symmetrically for edges.
    std::set<int> live_nodes = {perturbed_node};
    std::set<int> live_edges;
    const GraphArtifacts& art = model.artifacts();
    for (int l = 0; l < cfg.spatial_layers; ++l) {
        auto node_touched = [&](int u) {
            if (live_nodes.count(u)) return true;
            for (int jj = 0; jj < art.n_edges; ++jj) {
                if (live_edges.count(jj) && art.incidence(u, jj) != 0.0) return true;
            }
            return false;
        };
        auto edge_touched = [&](int e) {
            if (live_edges.count(e)) return true;
            for (int u = 0; u < art.n_nodes; ++u) {
                if (live_nodes.count(u) && art.incidence(u, e) != 0.0) return true;
            }
            return false;
        };
        std::set<int> next_nodes;
        std::set<int> next_edges;
        for (int i = 0; i < art.n_nodes; ++i) {
            for (int u : art.node_nbrs[static_cast<std::size_t>(i)]) {
                if (node_touched(u)) {
                    next_nodes.insert(i);
                    break;
                }
            }
        }
        for (int e = 0; e < art.n_edges; ++e) {
            for (int f : art.edge_nbrs[static_cast<std::size_t>(e)]) {
                if (edge_touched(f)) {
                    next_edges.insert(e);
                    break;
                }
            }
        }
        live_nodes = std::move(next_nodes);
        live_edges = std::move(next_edges);
    }
    REQUIRE(live_nodes.size() < 6u);  // the chain is long enough to exclude some

    ForwardResult ra = model.forward(base, false, false);
    ForwardResult rb = model.forward(bumped, false, false);
    const Eigen::MatrixXd& xa = ra.tape->value(ra.past_spatial_nodes);
    const Eigen::MatrixXd& xb = rb.tape->value(rb.past_spatial_nodes);
    const Eigen::MatrixXd& ea = ra.tape->value(ra.past_spatial_edges);
    const Eigen::MatrixXd& eb = rb.tape->value(rb.past_spatial_edges);
    bool some_changed = false;
    for (int t = 0; t < cfg.past_steps; ++t) {
        for (int i = 0; i < 6; ++i) {
            const double diff = (xa.row(t * 6 + i) - xb.row(t * 6 + i)).cwiseAbs().maxCoeff();
            if (live_nodes.count(i)) {
                if (diff > 0.0) some_changed = true;
            } else {
                CHECK(diff == 0.0);
            }
        }
        for (int e = 0; e < 5; ++e) {
            const double diff = (ea.row(t * 5 + e) - eb.row(t * 5 + e)).cwiseAbs().maxCoeff();
            if (!live_edges.count(e)) CHECK(diff == 0.0);
        }
    }
    CHECK(some_changed);
}

TEST_CASE("future forcing cannot influence earlier prediction steps") {
    ModelData data = make_data(71, 5, 1, 4, 3);
    const int nn = static_cast<int>(data.graph.node_count());

    for (SpatialKind sk : {SpatialKind::gat, SpatialKind::fully_connected}) {
        CAPTURE(to_string(sk));
        ModelConfig cfg = small_config(sk, FusionKind::fusion, FloodMethod::balance);
        Model model(cfg, data.graph);
        randomize_params(model.params(), 717, 0.5);
        Batch base = to_batch(data, cfg, model.artifacts(), 1);

        const int t0 = 2;
        Batch bumped = base;
        for (int i = 0; i < nn; ++i) {
            bumped.future_node_forcing(t0 * nn + i, 0) += 0.3;
        }
        Prediction pa = model.predict(base);
        Prediction pb = model.predict(bumped);
        for (int t = 0; t < t0; ++t) {
            CHECK((pa.node_states.middleRows(t * nn, nn) -
                   pb.node_states.middleRows(t * nn, nn)).cwiseAbs().maxCoeff() == 0.0);
        }
        CHECK((pa.node_states - pb.node_states).cwiseAbs().maxCoeff() > 0.0);
    }

    SUBCASE("past stream is causal too") {
        ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::individual,
                                       FloodMethod::balance);
        Model model(cfg, data.graph);
        randomize_params(model.params(), 718, 0.5);
        Batch base = to_batch(data, cfg, model.artifacts(), 1);
        const int t0 = 2;
        Batch bumped = base;
        for (int i = 0; i < nn; ++i) bumped.past_nodes(t0 * nn + i, 1) += 0.2;
        ForwardResult ra = model.forward(base, false, false);
        ForwardResult rb = model.forward(bumped, false, false);
        const Eigen::MatrixXd& ta = ra.tape->value(ra.past_temporal_nodes);
        const Eigen::MatrixXd& tb = rb.tape->value(rb.past_temporal_nodes);
        for (int t = 0; t < t0; ++t) {
            CHECK((ta.middleRows(t * nn, nn) - tb.middleRows(t * nn, nn))
                      .cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("loss components have pinned values at the persistence point") {
    ModelData data = make_data(81, 5, 1, 4, 3);
    const int nn = static_cast<int>(data.graph.node_count());
    const int n = 3;

    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::individual,
                                   FloodMethod::balance);
    Model model(cfg, data.graph);
    Batch batch = to_batch(data, cfg, model.artifacts(), 1);

    // Targets equal to persistence make both state losses exactly zero.
    Eigen::MatrixXd last_nodes = batch.past_nodes.middleRows((cfg.past_steps - 1) * nn, nn);
    const int nc = static_cast<int>(data.graph.edge_count());
    Eigen::MatrixXd last_edges = batch.past_edges.middleRows((cfg.past_steps - 1) * nc, nc);
    for (int t = 0; t < n; ++t) {
        batch.target_nodes.middleRows(t * nn, nn) = last_nodes;
        batch.target_edges.middleRows(t * nc, nc) = last_edges;
    }
    LossBreakdown loss = model.evaluate_loss(batch);
    CHECK(loss.node == 0.0);
    CHECK(loss.edge == 0.0);
    CHECK(loss.flood == 0.0);
    CHECK(loss.total == 0.0);

    SUBCASE("a single unit node error contributes 1/(N*T)") {
        batch.target_nodes(2, 0) += 1.0;
        LossBreakdown l = model.evaluate_loss(batch);
        CHECK(l.node == doctest::Approx(1.0 / (nn * n)).epsilon(1e-14));
        CHECK(l.edge == 0.0);
    }

    SUBCASE("classification loss at zero logits is ln 2") {
        ModelConfig ccfg = small_config(SpatialKind::gat, FusionKind::individual,
                                        FloodMethod::classification);
        Model cmodel(ccfg, data.graph);
        Batch cbatch = to_batch(data, ccfg, cmodel.artifacts(), 2);
        LossBreakdown l = cmodel.evaluate_loss(cbatch);
        CHECK(l.flood == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
}

TEST_CASE("analytic gradients match finite differences on every tensor") {
    ModelData data = make_data(91, 4, 0, 3, 3);

    auto run_check = [&](SpatialKind sk, FusionKind fk, FloodMethod fm, std::uint64_t seed) {
        CAPTURE(to_string(sk));
        CAPTURE(to_string(fk));
        CAPTURE(to_string(fm));
        ModelConfig cfg = small_config(sk, fk, fm);
        cfg.past_steps = 3;
        cfg.future_steps = 3;
        cfg.spatial_layers = 1;
        Model model(cfg, data.graph);
        randomize_params(model.params(), seed, 0.5);
        Batch batch = to_batch(data, cfg, model.artifacts(), 2);

        LossBreakdown loss;
        std::vector<Eigen::MatrixXd> grads = model.gradients(batch, loss);
        CHECK(std::isfinite(loss.total));

        const double h = 1e-5;
        Rng pick(derive_seed(seed, "entries"));
        for (int i = 0; i < model.params().count(); ++i) {
            Eigen::MatrixXd& t = model.params().tensor(i);
            const int entries = std::min<int>(3, static_cast<int>(t.size()));
            for (int e = 0; e < entries; ++e) {
                const Eigen::Index flat =
                    static_cast<Eigen::Index>(pick.uniform_int(0, static_cast<int>(t.size()) - 1));
                const double saved = t.data()[flat];
                t.data()[flat] = saved + h;
                const double up = model.evaluate_loss(batch).total;
                t.data()[flat] = saved - h;
                const double dn = model.evaluate_loss(batch).total;
                t.data()[flat] = saved;
                const double fd = (up - dn) / (2.0 * h);
                const double ad = grads[static_cast<std::size_t>(i)].data()[flat];
                const double rel = std::abs(ad - fd) /
                                   std::max({1.0, std::abs(ad), std::abs(fd)});
                INFO("tensor ", model.params().name(i), " flat index ", flat,
                     ": ad=", ad, " fd=", fd);
                CHECK(rel < 1e-4);
            }
        }
    };

    run_check(SpatialKind::gat, FusionKind::fusion, FloodMethod::classification, 911);
    run_check(SpatialKind::fully_connected, FusionKind::individual, FloodMethod::balance, 912);
}

TEST_CASE("checkpoints round-trip tensors and metadata") {
    ModelData data = make_data(95, 5, 1, 4, 3);
    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::fusion,
                                   FloodMethod::classification);
    Model model(cfg, data.graph);
    randomize_params(model.params(), 955, 0.5);

    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.normalizer = data.norm;
    ckpt.network_hash = data.graph.content_hash();
    ckpt.step = 42;
    ckpt.loss_history = {0.5, 0.25, 0.125};
    for (int i = 0; i < model.params().count(); ++i) {
        const int idx = ckpt.params.add(model.params().name(i),
                                        static_cast<int>(model.params().tensor(i).rows()),
                                        static_cast<int>(model.params().tensor(i).cols()));
        ckpt.params.tensor(idx) = model.params().tensor(i);
    }

    const std::string path = "test_model_ckpt.bin";
    write_checkpoint(ckpt, path);
    Checkpoint back = read_checkpoint(path);
    CHECK(back.config.to_json() == cfg.to_json());
    CHECK(back.network_hash == ckpt.network_hash);
    CHECK(back.step == 42);
    CHECK(back.loss_history == ckpt.loss_history);
    REQUIRE(back.params.count() == model.params().count());
    for (int i = 0; i < back.params.count(); ++i) {
        CHECK(back.params.name(i) == model.params().name(i));
        CHECK(back.params.tensor(i) == model.params().tensor(i));
    }

    SUBCASE("restored parameters reproduce predictions bit for bit") {
        Batch batch = to_batch(data, cfg, model.artifacts(), 1);
        Prediction want = model.predict(batch);
        Model fresh(cfg, data.graph);
        fresh.set_parameters(back.params);
        Prediction got = fresh.predict(batch);
        CHECK(got.node_states == want.node_states);
        CHECK(got.edge_states == want.edge_states);
        CHECK(got.flooding == want.flooding);
    }

    SUBCASE("corrupted payload is rejected") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(64);
        char b = 0;
        f.read(&b, 1);
        f.seekp(64);
        b = static_cast<char>(b ^ 0x20);
        f.write(&b, 1);
        f.close();
        CHECK_THROWS_AS(read_checkpoint(path), ValidationError);
    }

    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
}

TEST_CASE("batch assembly validates sample shapes") {
    ModelData data = make_data(97, 5, 1, 4, 3);
    ModelConfig cfg = small_config(SpatialKind::gat, FusionKind::fusion, FloodMethod::balance);
    Model model(cfg, data.graph);

    Sample broken = data.samples[0];
    broken.past_nodes.conservativeResize(broken.past_nodes.rows() - 1, 3);
    std::vector<const Sample*> ptrs = {&broken};
    CHECK_THROWS_AS(make_batch(ptrs, data.norm, cfg, model.artifacts()), ValidationError);
    CHECK_THROWS_AS(make_batch({}, data.norm, cfg, model.artifacts()), ValidationError);
}
