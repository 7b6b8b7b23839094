#include "hydronet/model.hpp"

#include "hydronet/common.hpp"
#include "hydronet/json_util.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <utility>

namespace hydronet {

std::string to_string(SpatialKind kind) {
    return kind == SpatialKind::fully_connected ? "fully_connected" : "gat";
}

std::string to_string(FusionKind kind) {
    return kind == FusionKind::individual ? "individual" : "fusion";
}

std::string to_string(FloodMethod method) {
    return method == FloodMethod::balance ? "balance" : "classification";
}

SpatialKind spatial_kind_from_string(const std::string& s) {
    if (s == "fully_connected") return SpatialKind::fully_connected;
    if (s == "gat") return SpatialKind::gat;
    throw ValidationError("unknown spatial kind '" + s + "'");
}

FusionKind fusion_kind_from_string(const std::string& s) {
    if (s == "individual") return FusionKind::individual;
    if (s == "fusion") return FusionKind::fusion;
    throw ValidationError("unknown fusion kind '" + s + "'");
}

FloodMethod flood_method_from_string(const std::string& s) {
    if (s == "balance") return FloodMethod::balance;
    if (s == "classification") return FloodMethod::classification;
    throw ValidationError("unknown flood method '" + s + "'");
}

int ModelConfig::receptive_field() const {
    const int total = std::accumulate(temporal_dilations.begin(), temporal_dilations.end(), 0);
    return 1 + (temporal_kernel - 1) * total;
}

void ModelConfig::validate() const {
    if (past_steps < 1 || future_steps < 1)
        throw ValidationError("model config: window lengths must be >= 1");
    if (spatial_layers < 1 || hidden_channels < 1 || attention_heads < 1 || temporal_kernel < 1)
        throw ValidationError("model config: layer counts and sizes must be >= 1");
    if (temporal_dilations.empty())
        throw ValidationError("model config: at least one temporal dilation required");
    for (std::size_t i = 0; i < temporal_dilations.size(); ++i) {
        if (temporal_dilations[i] < 1)
            throw ValidationError("model config: dilations must be >= 1");
        if (i > 0 && temporal_dilations[i] <= temporal_dilations[i - 1])
            throw ValidationError("model config: dilations must be strictly increasing");
    }
    if (!(delta > 0.0))
        throw ValidationError("model config: delta must be positive");
    if (receptive_field() < past_steps)
        throw ValidationError("model config: temporal receptive field " +
                              std::to_string(receptive_field()) + " does not cover the past window " +
                              std::to_string(past_steps));
    if (spatial_kind == SpatialKind::gat && hidden_channels % attention_heads != 0)
        throw ValidationError("model config: hidden channels must be divisible by attention heads");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"m", past_steps},
                          {"n", future_steps},
                          {"spatial_kind", to_string(spatial_kind)},
                          {"fusion", to_string(fusion)},
                          {"flood_method", to_string(flood_method)},
                          {"spatial_layers", spatial_layers},
                          {"hidden_channels", hidden_channels},
                          {"attention_heads", attention_heads},
                          {"temporal_kernel", temporal_kernel},
                          {"temporal_dilations", temporal_dilations},
                          {"delta", delta},
                          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    const std::string where = "model config";
    if (!j.is_object()) throw ValidationError(where + " must be an object");
    reject_unknown_keys(j, {"m", "n", "spatial_kind", "fusion", "flood_method", "spatial_layers",
                            "hidden_channels", "attention_heads", "temporal_kernel",
                            "temporal_dilations", "delta", "seed"}, where);
    ModelConfig cfg;
    cfg.past_steps = static_cast<int>(json_integer(j, "m", where));
    cfg.future_steps = static_cast<int>(json_integer(j, "n", where));
    cfg.spatial_kind = spatial_kind_from_string(json_string(j, "spatial_kind", where));
    cfg.fusion = fusion_kind_from_string(json_string(j, "fusion", where));
    cfg.flood_method = flood_method_from_string(json_string(j, "flood_method", where));
    cfg.spatial_layers = static_cast<int>(json_integer(j, "spatial_layers", where));
    cfg.hidden_channels = static_cast<int>(json_integer(j, "hidden_channels", where));
    cfg.attention_heads = static_cast<int>(json_integer(j, "attention_heads", where));
    cfg.temporal_kernel = static_cast<int>(json_integer(j, "temporal_kernel", where));
    if (!j.contains("temporal_dilations") || !j["temporal_dilations"].is_array())
        throw ValidationError("key 'temporal_dilations' in " + where + " must be an array");
    cfg.temporal_dilations.clear();
    for (const auto& d : j["temporal_dilations"]) {
        if (!d.is_number_integer())
            throw ValidationError("temporal_dilations entries must be integers");
        cfg.temporal_dilations.push_back(d.get<int>());
    }
    cfg.delta = json_number(j, "delta", where);
    if (!j.contains("seed") || !j["seed"].is_number_integer() || j["seed"].get<double>() < 0)
        throw ValidationError("key 'seed' in " + where + " must be a non-negative integer");
    cfg.seed = j["seed"].get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

int ParameterSet::add(const std::string& name, int rows, int cols) {
    if (name.empty() || rows < 1 || cols < 1)
        throw ValidationError("parameter '" + name + "' must be named with positive shape");
    if (contains(name))
        throw ValidationError("duplicate parameter name '" + name + "'");
    names_.push_back(name);
    tensors_.push_back(Eigen::MatrixXd::Zero(rows, cols));
    return count() - 1;
}

int ParameterSet::index(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return static_cast<int>(i);
    }
    throw ValidationError("unknown parameter '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
    for (const std::string& n : names_) {
        if (n == name) return true;
    }
    return false;
}

std::int64_t ParameterSet::scalar_count() const {
    std::int64_t total = 0;
    for (const Eigen::MatrixXd& t : tensors_) total += t.size();
    return total;
}

const std::string& ParameterSet::name(int i) const {
    if (i < 0 || i >= count()) throw ValidationError("parameter index out of range");
    return names_[static_cast<std::size_t>(i)];
}

Eigen::MatrixXd& ParameterSet::tensor(int i) {
    if (i < 0 || i >= count()) throw ValidationError("parameter index out of range");
    return tensors_[static_cast<std::size_t>(i)];
}

const Eigen::MatrixXd& ParameterSet::tensor(int i) const {
    if (i < 0 || i >= count()) throw ValidationError("parameter index out of range");
    return tensors_[static_cast<std::size_t>(i)];
}

Eigen::MatrixXd& ParameterSet::tensor(const std::string& name) {
    return tensors_[static_cast<std::size_t>(index(name))];
}

const Eigen::MatrixXd& ParameterSet::tensor(const std::string& name) const {
    return tensors_[static_cast<std::size_t>(index(name))];
}

GraphArtifacts build_artifacts(const DrainageGraph& graph, double delta) {
    GraphArtifacts art;
    art.n_nodes = static_cast<int>(graph.node_count());
    art.n_edges = static_cast<int>(graph.edge_count());
    art.incidence = graph.incidence();
    art.incidence_in = (art.incidence.array() < 0.0).cast<double>();
    art.incidence_out = (art.incidence.array() > 0.0).cast<double>();
    const Adjacency adj = threshold_adjacency(graph, delta);
    art.node_nbrs.resize(static_cast<std::size_t>(art.n_nodes));
    for (int i = 0; i < art.n_nodes; ++i) {
        for (int j = 0; j < art.n_nodes; ++j) {
            if (adj.node(i, j) != 0.0) art.node_nbrs[static_cast<std::size_t>(i)].push_back(j);
        }
    }
    art.edge_nbrs.resize(static_cast<std::size_t>(art.n_edges));
    for (int i = 0; i < art.n_edges; ++i) {
        for (int j = 0; j < art.n_edges; ++j) {
            if (adj.edge(i, j) != 0.0) art.edge_nbrs[static_cast<std::size_t>(i)].push_back(j);
        }
    }
    return art;
}

namespace {

void check_rows(const Eigen::MatrixXf& m, Eigen::Index rows, Eigen::Index cols,
                const std::string& what) {
    if (m.rows() != rows || m.cols() != cols)
        throw ValidationError("batch sample: " + what + " has shape " + std::to_string(m.rows()) +
                              "x" + std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                              "x" + std::to_string(cols));
}

/// Stacks one per-sample block into the batch matrix, normalizing each
/// column with its variable kind.
void stack_block(Eigen::MatrixXd& dst, Eigen::Index row0, const Eigen::MatrixXf& src,
                 const Normalizer& norm, const std::vector<Normalizer::Kind>& kinds) {
    for (Eigen::Index i = 0; i < src.rows(); ++i) {
        for (Eigen::Index j = 0; j < src.cols(); ++j) {
            dst(row0 + i, j) = norm.normalize(kinds[static_cast<std::size_t>(j)],
                                              static_cast<double>(src(i, j)));
        }
    }
}

}  // namespace

Batch make_batch(const std::vector<const Sample*>& samples, const Normalizer& norm,
                 const ModelConfig& config, const GraphArtifacts& art) {
    if (samples.empty()) throw ValidationError("batch: needs at least one sample");
    const Eigen::Index b = static_cast<Eigen::Index>(samples.size());
    const Eigen::Index m = config.past_steps;
    const Eigen::Index n = config.future_steps;
    const Eigen::Index nn = art.n_nodes;
    const Eigen::Index nc = art.n_edges;

    Batch batch;
    batch.size = static_cast<int>(b);
    batch.past_nodes.resize(b * m * nn, 3);
    batch.past_edges.resize(b * m * nc, 2);
    batch.past_node_forcing.resize(b * m * nn, 1);
    batch.past_edge_forcing.resize(b * m * nc, 1);
    batch.future_node_forcing.resize(b * n * nn, 1);
    batch.future_edge_forcing.resize(b * n * nc, 1);
    batch.target_nodes.resize(b * n * nn, 3);
    batch.target_edges.resize(b * n * nc, 2);
    batch.target_flood.resize(b * n * nn, 1);
    batch.flood_label.resize(b * n * nn, 1);

    using K = Normalizer::Kind;
    const std::vector<K> node_kinds = {K::depth_node, K::flow, K::flow};
    const std::vector<K> edge_kinds = {K::depth_edge, K::flow};
    const std::vector<K> runoff_kind = {K::flow};
    const std::vector<K> control_kind = {K::control};

    for (Eigen::Index s = 0; s < b; ++s) {
        const Sample& sm = *samples[static_cast<std::size_t>(s)];
        check_rows(sm.past_nodes, m * nn, 3, "past node states");
        check_rows(sm.past_edges, m * nc, 2, "past edge states");
        check_rows(sm.past_node_forcing, m * nn, 1, "past runoff");
        check_rows(sm.past_edge_forcing, m * nc, 1, "past control");
        check_rows(sm.future_node_forcing, n * nn, 1, "future runoff");
        check_rows(sm.future_edge_forcing, n * nc, 1, "future control");
        check_rows(sm.target_nodes, n * nn, 3, "target node states");
        check_rows(sm.target_edges, n * nc, 2, "target edge states");
        check_rows(sm.target_flood, n * nn, 1, "target flooding");
        check_rows(sm.flood_label, n * nn, 1, "flood labels");
        stack_block(batch.past_nodes, s * m * nn, sm.past_nodes, norm, node_kinds);
        stack_block(batch.past_edges, s * m * nc, sm.past_edges, norm, edge_kinds);
        stack_block(batch.past_node_forcing, s * m * nn, sm.past_node_forcing, norm, runoff_kind);
        stack_block(batch.past_edge_forcing, s * m * nc, sm.past_edge_forcing, norm, control_kind);
        stack_block(batch.future_node_forcing, s * n * nn, sm.future_node_forcing, norm, runoff_kind);
        stack_block(batch.future_edge_forcing, s * n * nc, sm.future_edge_forcing, norm, control_kind);
        stack_block(batch.target_nodes, s * n * nn, sm.target_nodes, norm, node_kinds);
        stack_block(batch.target_edges, s * n * nc, sm.target_edges, norm, edge_kinds);
        stack_block(batch.target_flood, s * n * nn, sm.target_flood, norm, runoff_kind);
        batch.flood_label.middleRows(s * n * nn, n * nn) =
            sm.flood_label.cast<double>();
    }
    return batch;
}

Eigen::MatrixXd flood_balance(const Eigen::MatrixXd& q_in, const Eigen::MatrixXd& runoff,
                              const Eigen::MatrixXd& q_out) {
    if (q_in.rows() != runoff.rows() || q_in.rows() != q_out.rows() || q_in.cols() != 1 ||
        runoff.cols() != 1 || q_out.cols() != 1)
        throw ValidationError("flood balance: inputs must be equal-length column vectors");
    return (q_in + runoff - q_out).cwiseMax(0.0);
}

Eigen::MatrixXd apply_flood_gate(const Eigen::MatrixXd& balance, const Eigen::MatrixXd& prob) {
    if (balance.rows() != prob.rows() || balance.cols() != 1 || prob.cols() != 1)
        throw ValidationError("flood gate: inputs must be equal-length column vectors");
    return (prob.array() > 0.5).select(balance, Eigen::MatrixXd::Zero(balance.rows(), 1));
}

Model::Model(ModelConfig config, const DrainageGraph& graph) : config_(std::move(config)) {
    config_.validate();
    artifacts_ = build_artifacts(graph, config_.delta);
    build_parameters();
    init_parameters();
}

namespace {

std::string layer_name(const std::string& prefix, int layer, const std::string& part) {
    return prefix + "." + std::to_string(layer) + "." + part;
}

}  // namespace

void Model::build_parameters() {
    const int nn = artifacts_.n_nodes;
    const int nc = artifacts_.n_edges;
    const int hidden = config_.hidden_channels;
    const int k = config_.temporal_kernel;

    if (config_.spatial_kind == SpatialKind::gat) {
        const int heads = config_.attention_heads;
        const int dh = hidden / heads;
        for (const std::string& prefix : {std::string("past.spatial"), std::string("future.spatial")}) {
            const bool past = prefix == "past.spatial";
            for (int l = 0; l < config_.spatial_layers; ++l) {
                const int cx = l == 0 ? (past ? 4 : 1) : hidden;
                const int ce = l == 0 ? (past ? 3 : 1) : hidden;
                params_.add(layer_name(prefix, l, "f_edge.w"), ce, ce);
                params_.add(layer_name(prefix, l, "f_edge.b"), 1, ce);
                params_.add(layer_name(prefix, l, "f_node.w"), cx, cx);
                params_.add(layer_name(prefix, l, "f_node.b"), 1, cx);
                params_.add(layer_name(prefix, l, "exchange_node.w"), nn, nc);
                params_.add(layer_name(prefix, l, "exchange_node.b"), nn, nc);
                params_.add(layer_name(prefix, l, "exchange_edge.w"), nc, nn);
                params_.add(layer_name(prefix, l, "exchange_edge.b"), nc, nn);
                for (int h = 0; h < heads; ++h) {
                    const std::string hn = "node.h" + std::to_string(h) + ".";
                    params_.add(layer_name(prefix, l, hn + "w"), cx + ce, dh);
                    params_.add(layer_name(prefix, l, hn + "a_src"), dh, 1);
                    params_.add(layer_name(prefix, l, hn + "a_dst"), dh, 1);
                }
                for (int h = 0; h < heads; ++h) {
                    const std::string he = "edge.h" + std::to_string(h) + ".";
                    params_.add(layer_name(prefix, l, he + "w"), ce + cx, dh);
                    params_.add(layer_name(prefix, l, he + "a_src"), dh, 1);
                    params_.add(layer_name(prefix, l, he + "a_dst"), dh, 1);
                }
            }
        }
    } else {
        const int past_width = 3 * nn + 2 * nc + nn + nc;
        const int future_width = nn + nc;
        for (const std::string& prefix : {std::string("past.spatial"), std::string("future.spatial")}) {
            const bool past = prefix == "past.spatial";
            for (int l = 0; l < config_.spatial_layers; ++l) {
                const int win = l == 0 ? (past ? past_width : future_width) : hidden;
                params_.add(layer_name(prefix, l, "w"), win, hidden);
                params_.add(layer_name(prefix, l, "b"), 1, hidden);
            }
        }
    }

    std::vector<std::string> temporal_prefixes;
    if (config_.spatial_kind == SpatialKind::gat) {
        temporal_prefixes = {"past.temporal_node", "past.temporal_edge",
                             "future.temporal_node", "future.temporal_edge"};
    } else {
        temporal_prefixes = {"past.temporal", "future.temporal"};
    }
    for (const std::string& prefix : temporal_prefixes) {
        for (std::size_t l = 0; l < config_.temporal_dilations.size(); ++l) {
            for (int tap = 0; tap < k; ++tap) {
                params_.add(layer_name(prefix, static_cast<int>(l), "k" + std::to_string(tap)),
                            hidden, hidden);
            }
            params_.add(layer_name(prefix, static_cast<int>(l), "b"), 1, hidden);
        }
    }

    const bool flat = config_.spatial_kind == SpatialKind::fully_connected;
    const int node_out = config_.fusion == FusionKind::fusion ? 1 : 3;
    params_.add("head.node.w", hidden, flat ? node_out * nn : node_out);
    params_.add("head.node.b", 1, flat ? node_out * nn : node_out);
    params_.add("head.edge.w", hidden, flat ? 2 * nc : 2);
    params_.add("head.edge.b", 1, flat ? 2 * nc : 2);
    if (config_.flood_method == FloodMethod::classification) {
        params_.add("head.flood.w", hidden, flat ? nn : 1);
        params_.add("head.flood.b", 1, flat ? nn : 1);
    }
}

void Model::init_parameters() {
    for (int i = 0; i < params_.count(); ++i) {
        const std::string& name = params_.name(i);
        Eigen::MatrixXd& t = params_.tensor(i);
        const bool bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
        const bool head = name.rfind("head.", 0) == 0;
        if (bias || head) {
            t.setZero();
            continue;
        }
        Rng rng(derive_seed(config_.seed, name));
        const double bound = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
        for (Eigen::Index r = 0; r < t.rows(); ++r) {
            for (Eigen::Index c = 0; c < t.cols(); ++c) {
                t(r, c) = rng.uniform(-bound, bound);
            }
        }
    }
}

void Model::set_parameters(const ParameterSet& src) {
    if (src.count() != params_.count())
        throw ValidationError("parameter count mismatch: have " + std::to_string(src.count()) +
                              ", model needs " + std::to_string(params_.count()));
    for (int i = 0; i < params_.count(); ++i) {
        if (src.name(i) != params_.name(i))
            throw ValidationError("parameter order mismatch at '" + src.name(i) + "', expected '" +
                                  params_.name(i) + "'");
        const Eigen::MatrixXd& t = src.tensor(i);
        Eigen::MatrixXd& dst = params_.tensor(i);
        if (t.rows() != dst.rows() || t.cols() != dst.cols())
            throw ValidationError("parameter shape mismatch for '" + src.name(i) + "'");
        if (!t.allFinite())
            throw ValidationError("parameter '" + src.name(i) + "' has non-finite entries");
        dst = t;
    }
}

std::pair<Var, Var> Model::spatial_gat(Tape& tape, const std::vector<Var>& pv,
                                       const std::string& prefix, Var x, Var e) const {
    auto p = [&](const std::string& name) { return pv[static_cast<std::size_t>(params_.index(name))]; };
    const int nn = artifacts_.n_nodes;
    const int nc = artifacts_.n_edges;
    Var mask_n = tape.leaf(artifacts_.incidence, false);
    Var mask_e = tape.leaf(artifacts_.incidence.transpose(), false);
    for (int l = 0; l < config_.spatial_layers; ++l) {
        Var fe = tape.linear(e, p(layer_name(prefix, l, "f_edge.w")), p(layer_name(prefix, l, "f_edge.b")));
        Var fx = tape.linear(x, p(layer_name(prefix, l, "f_node.w")), p(layer_name(prefix, l, "f_node.b")));
        Var coeff_n = tape.add(tape.cmul(p(layer_name(prefix, l, "exchange_node.w")), mask_n),
                               p(layer_name(prefix, l, "exchange_node.b")));
        Var coeff_e = tape.add(tape.cmul(p(layer_name(prefix, l, "exchange_edge.w")), mask_e),
                               p(layer_name(prefix, l, "exchange_edge.b")));
        Var xin = tape.concat_cols(x, tape.block_lmul_var(coeff_n, fe, nc));
        Var ein = tape.concat_cols(e, tape.block_lmul_var(coeff_e, fx, nn));
        Var xout;
        Var eout;
        for (int h = 0; h < config_.attention_heads; ++h) {
            const std::string hn = "node.h" + std::to_string(h) + ".";
            Var z = tape.matmul(xin, p(layer_name(prefix, l, hn + "w")));
            Var o = tape.attention(z, p(layer_name(prefix, l, hn + "a_src")),
                                   p(layer_name(prefix, l, hn + "a_dst")), artifacts_.node_nbrs);
            xout = h == 0 ? o : tape.concat_cols(xout, o);
        }
        for (int h = 0; h < config_.attention_heads; ++h) {
            const std::string he = "edge.h" + std::to_string(h) + ".";
            Var z = tape.matmul(ein, p(layer_name(prefix, l, he + "w")));
            Var o = tape.attention(z, p(layer_name(prefix, l, he + "a_src")),
                                   p(layer_name(prefix, l, he + "a_dst")), artifacts_.edge_nbrs);
            eout = h == 0 ? o : tape.concat_cols(eout, o);
        }
        x = tape.relu(xout);
        e = tape.relu(eout);
    }
    return {x, e};
}

Var Model::spatial_dense(Tape& tape, const std::vector<Var>& pv, const std::string& prefix,
                         Var x) const {
    auto p = [&](const std::string& name) { return pv[static_cast<std::size_t>(params_.index(name))]; };
    for (int l = 0; l < config_.spatial_layers; ++l) {
        x = tape.relu(tape.linear(x, p(layer_name(prefix, l, "w")), p(layer_name(prefix, l, "b"))));
    }
    return x;
}

Var Model::temporal(Tape& tape, const std::vector<Var>& pv, const std::string& prefix,
                    Var x, int batch, int steps, int rows) const {
    auto p = [&](const std::string& name) { return pv[static_cast<std::size_t>(params_.index(name))]; };
    for (std::size_t l = 0; l < config_.temporal_dilations.size(); ++l) {
        std::vector<Var> taps;
        taps.reserve(static_cast<std::size_t>(config_.temporal_kernel));
        for (int k = 0; k < config_.temporal_kernel; ++k) {
            taps.push_back(p(layer_name(prefix, static_cast<int>(l), "k" + std::to_string(k))));
        }
        x = tape.relu(tape.causal_conv(x, taps, p(layer_name(prefix, static_cast<int>(l), "b")),
                                       config_.temporal_dilations[l], batch, steps, rows));
    }
    return x;
}

namespace {

void check_batch_shape(const Eigen::MatrixXd& m, Eigen::Index rows, Eigen::Index cols,
                       const std::string& what) {
    if (m.rows() != rows || m.cols() != cols)
        throw ValidationError("batch: " + what + " has shape " + std::to_string(m.rows()) + "x" +
                              std::to_string(m.cols()) + ", expected " + std::to_string(rows) +
                              "x" + std::to_string(cols));
}

/// Per-step element-major flattening of the fully-connected variant:
/// node channels, then edge channels, then node runoff, then edge control.
Eigen::MatrixXd flatten_steps(const Eigen::MatrixXd& nodes, const Eigen::MatrixXd& edges,
                              const Eigen::MatrixXd& node_forcing,
                              const Eigen::MatrixXd& edge_forcing,
                              Eigen::Index blocks, Eigen::Index nn, Eigen::Index nc) {
    const Eigen::Index n_ch = nodes.cols();
    const Eigen::Index e_ch = edges.cols();
    Eigen::MatrixXd out(blocks, n_ch * nn + e_ch * nc + nn + nc);
    for (Eigen::Index b = 0; b < blocks; ++b) {
        Eigen::Index col = 0;
        for (Eigen::Index i = 0; i < nn; ++i) {
            for (Eigen::Index c = 0; c < n_ch; ++c) out(b, col++) = nodes(b * nn + i, c);
        }
        for (Eigen::Index j = 0; j < nc; ++j) {
            for (Eigen::Index c = 0; c < e_ch; ++c) out(b, col++) = edges(b * nc + j, c);
        }
        for (Eigen::Index i = 0; i < nn; ++i) out(b, col++) = node_forcing(b * nn + i, 0);
        for (Eigen::Index j = 0; j < nc; ++j) out(b, col++) = edge_forcing(b * nc + j, 0);
    }
    return out;
}

/// Forcing-only variant of the flattening for the future stream.
Eigen::MatrixXd flatten_forcing(const Eigen::MatrixXd& node_forcing,
                                const Eigen::MatrixXd& edge_forcing,
                                Eigen::Index blocks, Eigen::Index nn, Eigen::Index nc) {
    Eigen::MatrixXd out(blocks, nn + nc);
    for (Eigen::Index b = 0; b < blocks; ++b) {
        for (Eigen::Index i = 0; i < nn; ++i) out(b, i) = node_forcing(b * nn + i, 0);
        for (Eigen::Index j = 0; j < nc; ++j) out(b, nn + j) = edge_forcing(b * nc + j, 0);
    }
    return out;
}

/// Rows of the last past step for every batch element: the skip connection
/// state.
Eigen::MatrixXd last_step_rows(const Eigen::MatrixXd& seq, Eigen::Index batch,
                               Eigen::Index steps, Eigen::Index rows) {
    Eigen::MatrixXd out(batch * rows, seq.cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
        out.middleRows(b * rows, rows) = seq.middleRows(b * steps * rows + (steps - 1) * rows, rows);
    }
    return out;
}

}  // namespace

ForwardResult Model::forward(const Batch& batch, bool training, bool with_loss) const {
    const Eigen::Index b = batch.size;
    const Eigen::Index m = config_.past_steps;
    const Eigen::Index n = config_.future_steps;
    const Eigen::Index nn = artifacts_.n_nodes;
    const Eigen::Index nc = artifacts_.n_edges;
    if (b < 1) throw ValidationError("batch: empty");
    check_batch_shape(batch.past_nodes, b * m * nn, 3, "past node states");
    check_batch_shape(batch.past_edges, b * m * nc, 2, "past edge states");
    check_batch_shape(batch.past_node_forcing, b * m * nn, 1, "past runoff");
    check_batch_shape(batch.past_edge_forcing, b * m * nc, 1, "past control");
    check_batch_shape(batch.future_node_forcing, b * n * nn, 1, "future runoff");
    check_batch_shape(batch.future_edge_forcing, b * n * nc, 1, "future control");
    if (with_loss) {
        check_batch_shape(batch.target_nodes, b * n * nn, 3, "target node states");
        check_batch_shape(batch.target_edges, b * n * nc, 2, "target edge states");
        if (config_.flood_method == FloodMethod::classification)
            check_batch_shape(batch.flood_label, b * n * nn, 1, "flood labels");
    }

    ForwardResult res;
    res.tape = std::make_unique<Tape>();
    Tape& tape = *res.tape;
    res.param_vars.reserve(static_cast<std::size_t>(params_.count()));
    for (int i = 0; i < params_.count(); ++i) {
        res.param_vars.push_back(tape.leaf(params_.tensor(i), training));
    }
    const std::vector<Var>& pv = res.param_vars;
    auto p = [&](const std::string& name) { return pv[static_cast<std::size_t>(params_.index(name))]; };

    Var node_feat;
    Var edge_feat;
    if (config_.spatial_kind == SpatialKind::gat) {
        Eigen::MatrixXd past_x(b * m * nn, 4);
        past_x << batch.past_nodes, batch.past_node_forcing;
        Eigen::MatrixXd past_e(b * m * nc, 3);
        past_e << batch.past_edges, batch.past_edge_forcing;
        auto [xs, es] = spatial_gat(tape, pv, "past.spatial",
                                    tape.leaf(std::move(past_x), false),
                                    tape.leaf(std::move(past_e), false));
        res.past_spatial_nodes = xs;
        res.past_spatial_edges = es;
        Var xt = temporal(tape, pv, "past.temporal_node", xs, static_cast<int>(b),
                          static_cast<int>(m), static_cast<int>(nn));
        Var et = temporal(tape, pv, "past.temporal_edge", es, static_cast<int>(b),
                          static_cast<int>(m), static_cast<int>(nc));
        res.past_temporal_nodes = xt;
        Var ctx_x = tape.take_last_step(xt, static_cast<int>(b), static_cast<int>(m),
                                        static_cast<int>(nn));
        Var ctx_e = tape.take_last_step(et, static_cast<int>(b), static_cast<int>(m),
                                        static_cast<int>(nc));

        auto [fxs, fes] = spatial_gat(tape, pv, "future.spatial",
                                      tape.leaf(batch.future_node_forcing, false),
                                      tape.leaf(batch.future_edge_forcing, false));
        Var fx = tape.broadcast_step_add(fxs, ctx_x, static_cast<int>(b), static_cast<int>(n),
                                         static_cast<int>(nn));
        Var fe = tape.broadcast_step_add(fes, ctx_e, static_cast<int>(b), static_cast<int>(n),
                                         static_cast<int>(nc));
        node_feat = temporal(tape, pv, "future.temporal_node", fx, static_cast<int>(b),
                             static_cast<int>(n), static_cast<int>(nn));
        edge_feat = temporal(tape, pv, "future.temporal_edge", fe, static_cast<int>(b),
                             static_cast<int>(n), static_cast<int>(nc));
    } else {
        Eigen::MatrixXd past_flat = flatten_steps(batch.past_nodes, batch.past_edges,
                                                  batch.past_node_forcing, batch.past_edge_forcing,
                                                  b * m, nn, nc);
        Var xs = spatial_dense(tape, pv, "past.spatial", tape.leaf(std::move(past_flat), false));
        res.past_spatial_nodes = xs;
        res.past_spatial_edges = xs;
        Var xt = temporal(tape, pv, "past.temporal", xs, static_cast<int>(b),
                          static_cast<int>(m), 1);
        res.past_temporal_nodes = xt;
        Var ctx = tape.take_last_step(xt, static_cast<int>(b), static_cast<int>(m), 1);

        Eigen::MatrixXd future_flat = flatten_forcing(batch.future_node_forcing,
                                                      batch.future_edge_forcing, b * n, nn, nc);
        Var fs = spatial_dense(tape, pv, "future.spatial", tape.leaf(std::move(future_flat), false));
        Var fc = tape.broadcast_step_add(fs, ctx, static_cast<int>(b), static_cast<int>(n), 1);
        Var feat = temporal(tape, pv, "future.temporal", fc, static_cast<int>(b),
                            static_cast<int>(n), 1);
        node_feat = feat;
        edge_feat = feat;
    }

    const bool flat = config_.spatial_kind == SpatialKind::fully_connected;
    const bool fused = config_.fusion == FusionKind::fusion;

    // Output heads produce residuals; the skip connection adds the last
    // observed state, broadcast over the future steps.
    Var edge_res = tape.linear(edge_feat, p("head.edge.w"), p("head.edge.b"));
    if (flat) edge_res = tape.split_rows(edge_res, static_cast<int>(nc), 2);
    Var skip_edges = tape.leaf(last_step_rows(batch.past_edges, b, m, nc), false);
    res.edge_states = tape.broadcast_step_add(edge_res, skip_edges, static_cast<int>(b),
                                              static_cast<int>(n), static_cast<int>(nc));

    Var node_res = tape.linear(node_feat, p("head.node.w"), p("head.node.b"));
    if (flat) node_res = tape.split_rows(node_res, static_cast<int>(nn), fused ? 1 : 3);
    const Eigen::MatrixXd last_nodes = last_step_rows(batch.past_nodes, b, m, nn);
    if (fused) {
        Var skip_depth = tape.leaf(last_nodes.col(0), false);
        Var depth = tape.broadcast_step_add(node_res, skip_depth, static_cast<int>(b),
                                            static_cast<int>(n), static_cast<int>(nn));
        Var q = tape.slice_cols(res.edge_states, 1, 1);
        Var q_in = tape.block_lmul_const(artifacts_.incidence_in, q, static_cast<int>(nc));
        Var q_out = tape.block_lmul_const(artifacts_.incidence_out, q, static_cast<int>(nc));
        res.node_states = tape.concat_cols(tape.concat_cols(depth, q_in), q_out);
    } else {
        Var skip_nodes = tape.leaf(last_nodes, false);
        res.node_states = tape.broadcast_step_add(node_res, skip_nodes, static_cast<int>(b),
                                                  static_cast<int>(n), static_cast<int>(nn));
    }

    if (config_.flood_method == FloodMethod::classification) {
        Var logits = tape.linear(node_feat, p("head.flood.w"), p("head.flood.b"));
        if (flat) logits = tape.split_rows(logits, static_cast<int>(nn), 1);
        res.flood_logits = logits;
    }

    if (!tape.value(res.node_states).allFinite() || !tape.value(res.edge_states).allFinite())
        throw RuntimeFailure("model forward produced non-finite state outputs");

    if (with_loss) {
        const double node_w = 1.0 / static_cast<double>(b * nn * n);
        const double edge_w = 1.0 / static_cast<double>(b * nc * n);
        res.loss_node = tape.mse(res.node_states, batch.target_nodes, node_w);
        res.loss_edge = tape.mse(res.edge_states, batch.target_edges, edge_w);
        res.loss = tape.add(res.loss_node, res.loss_edge);
        if (config_.flood_method == FloodMethod::classification) {
            res.loss_flood = tape.bce_logits(res.flood_logits, batch.flood_label, node_w);
            res.loss = tape.add(res.loss, res.loss_flood);
        }
        if (!std::isfinite(tape.value(res.loss)(0, 0)))
            throw RuntimeFailure("model loss is non-finite");
    }
    return res;
}

Prediction Model::predict(const Batch& batch) const {
    ForwardResult res = forward(batch, false, false);
    Prediction pred;
    pred.node_states = res.tape->value(res.node_states);
    pred.edge_states = res.tape->value(res.edge_states);
    const Eigen::MatrixXd balance = flood_balance(pred.node_states.col(1),
                                                  batch.future_node_forcing,
                                                  pred.node_states.col(2));
    if (config_.flood_method == FloodMethod::classification) {
        const Eigen::MatrixXd logits = res.tape->value(res.flood_logits);
        pred.flood_prob = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
        pred.flooding = apply_flood_gate(balance, pred.flood_prob);
    } else {
        pred.flooding = balance;
    }
    return pred;
}

std::vector<Eigen::MatrixXd> Model::gradients(const Batch& batch, LossBreakdown& loss) const {
    ForwardResult res = forward(batch, true, true);
    res.tape->backward(res.loss);
    loss.total = res.tape->value(res.loss)(0, 0);
    loss.node = res.tape->value(res.loss_node)(0, 0);
    loss.edge = res.tape->value(res.loss_edge)(0, 0);
    loss.flood = res.loss_flood.valid() ? res.tape->value(res.loss_flood)(0, 0) : 0.0;
    std::vector<Eigen::MatrixXd> grads;
    grads.reserve(static_cast<std::size_t>(params_.count()));
    for (int i = 0; i < params_.count(); ++i) {
        grads.push_back(res.tape->gradient(res.param_vars[static_cast<std::size_t>(i)]));
        if (!grads.back().allFinite())
            throw RuntimeFailure("non-finite gradient for parameter '" + params_.name(i) + "'");
    }
    return grads;
}

LossBreakdown Model::evaluate_loss(const Batch& batch) const {
    ForwardResult res = forward(batch, false, true);
    LossBreakdown loss;
    loss.total = res.tape->value(res.loss)(0, 0);
    loss.node = res.tape->value(res.loss_node)(0, 0);
    loss.edge = res.tape->value(res.loss_edge)(0, 0);
    loss.flood = res.loss_flood.valid() ? res.tape->value(res.loss_flood)(0, 0) : 0.0;
    return loss;
}

namespace {

void append_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
}

std::uint32_t take_u32(const std::string& payload, std::size_t& pos) {
    if (pos + 4 > payload.size()) throw ValidationError("checkpoint: truncated payload");
    std::uint32_t v = 0;
    std::memcpy(&v, payload.data() + pos, 4);
    pos += 4;
    return v;
}

constexpr char kCheckpointMagic[8] = {'H', 'N', 'C', 'K', 'P', 'T', '1', '\0'};

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ckpt.config.validate();
    std::string payload(kCheckpointMagic, 8);
    append_u32(payload, static_cast<std::uint32_t>(ckpt.params.count()));
    for (int i = 0; i < ckpt.params.count(); ++i) {
        const std::string& name = ckpt.params.name(i);
        const Eigen::MatrixXd& t = ckpt.params.tensor(i);
        append_u32(payload, static_cast<std::uint32_t>(name.size()));
        payload.append(name);
        append_u32(payload, static_cast<std::uint32_t>(t.rows()));
        append_u32(payload, static_cast<std::uint32_t>(t.cols()));
        payload.append(reinterpret_cast<const char*>(t.data()),
                       static_cast<std::size_t>(t.size()) * sizeof(double));
    }

    nlohmann::json sidecar{{"config", ckpt.config.to_json()},
                           {"normalizer", ckpt.normalizer.to_json()},
                           {"network_hash", ckpt.network_hash},
                           {"step", ckpt.step},
                           {"loss_history", ckpt.loss_history},
                           {"tensor_count", ckpt.params.count()},
                           {"checksum", to_hex(fnv1a64(payload))}};

    std::ofstream bin(path, std::ios::binary | std::ios::trunc);
    if (!bin) throw RuntimeFailure("cannot open '" + path + "' for writing");
    bin.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!bin) throw RuntimeFailure("failed writing '" + path + "'");
    bin.close();

    std::ofstream side(path + ".json", std::ios::trunc);
    if (!side) throw RuntimeFailure("cannot open '" + path + ".json' for writing");
    side << sidecar.dump(2) << "\n";
    if (!side) throw RuntimeFailure("failed writing '" + path + ".json'");
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw ValidationError("cannot open checkpoint '" + path + "'");
    std::stringstream buffer;
    buffer << bin.rdbuf();
    const std::string payload = buffer.str();

    std::ifstream side(path + ".json");
    if (!side) throw ValidationError("cannot open checkpoint sidecar '" + path + ".json'");
    nlohmann::json sidecar;
    try {
        side >> sidecar;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("checkpoint sidecar is not valid JSON: " + std::string(e.what()));
    }
    const std::string where = "checkpoint sidecar";
    reject_unknown_keys(sidecar, {"config", "normalizer", "network_hash", "step", "loss_history",
                                  "tensor_count", "checksum"}, where);
    if (json_string(sidecar, "checksum", where) != to_hex(fnv1a64(payload)))
        throw ValidationError("checkpoint '" + path + "' is corrupt: checksum mismatch");

    Checkpoint ckpt;
    if (!sidecar.contains("config")) throw ValidationError("missing key 'config' in " + where);
    ckpt.config = ModelConfig::from_json(sidecar["config"]);
    if (!sidecar.contains("normalizer")) throw ValidationError("missing key 'normalizer' in " + where);
    ckpt.normalizer = Normalizer::from_json(sidecar["normalizer"]);
    ckpt.network_hash = json_string(sidecar, "network_hash", where);
    ckpt.step = json_integer(sidecar, "step", where);
    if (!sidecar.contains("loss_history") || !sidecar["loss_history"].is_array())
        throw ValidationError("key 'loss_history' in " + where + " must be an array");
    for (const auto& v : sidecar["loss_history"]) {
        if (!v.is_number()) throw ValidationError("loss_history entries must be numbers");
        ckpt.loss_history.push_back(v.get<double>());
    }

    std::size_t pos = 0;
    if (payload.size() < 8 || std::memcmp(payload.data(), kCheckpointMagic, 8) != 0)
        throw ValidationError("checkpoint '" + path + "' has a bad magic header");
    pos = 8;
    const std::uint32_t count = take_u32(payload, pos);
    if (static_cast<int>(count) != json_integer(sidecar, "tensor_count", where))
        throw ValidationError("checkpoint tensor count disagrees with sidecar");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = take_u32(payload, pos);
        if (pos + name_len > payload.size()) throw ValidationError("checkpoint: truncated payload");
        const std::string name = payload.substr(pos, name_len);
        pos += name_len;
        const std::uint32_t rows = take_u32(payload, pos);
        const std::uint32_t cols = take_u32(payload, pos);
        const std::size_t bytes = static_cast<std::size_t>(rows) * cols * sizeof(double);
        if (pos + bytes > payload.size()) throw ValidationError("checkpoint: truncated payload");
        const int idx = ckpt.params.add(name, static_cast<int>(rows), static_cast<int>(cols));
        std::memcpy(ckpt.params.tensor(idx).data(), payload.data() + pos, bytes);
        pos += bytes;
        if (!ckpt.params.tensor(idx).allFinite())
            throw ValidationError("checkpoint tensor '" + name + "' has non-finite entries");
    }
    if (pos != payload.size())
        throw ValidationError("checkpoint '" + path + "' has trailing bytes");
    return ckpt;
}

}  // namespace hydronet
