#pragma once

#include "hydronet/dataset.hpp"
#include "hydronet/graph.hpp"
#include "hydronet/tape.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace hydronet {

/// Spatial block family: one flattened dense stack over the whole network
/// state per step, or graph attention over delta-neighborhoods.
enum class SpatialKind { fully_connected, gat };

/// Whether node flows are free outputs or derived from edge flows through the
/// incidence sums.
enum class FusionKind { individual, fusion };

/// How flooding is produced from the predicted flows.
enum class FloodMethod { balance, classification };

std::string to_string(SpatialKind kind);
std::string to_string(FusionKind kind);
std::string to_string(FloodMethod method);
SpatialKind spatial_kind_from_string(const std::string& s);
FusionKind fusion_kind_from_string(const std::string& s);
FloodMethod flood_method_from_string(const std::string& s);

struct ModelConfig {
    int past_steps = 60;
    int future_steps = 60;
    SpatialKind spatial_kind = SpatialKind::gat;
    FusionKind fusion = FusionKind::fusion;
    FloodMethod flood_method = FloodMethod::classification;
    int spatial_layers = 3;
    int hidden_channels = 32;
    int attention_heads = 2;
    int temporal_kernel = 3;
    std::vector<int> temporal_dilations = {1, 2, 4, 8, 16, 32};
    double delta = 1000.0;
    std::uint64_t seed = 0;

    /// 1 + (kernel - 1) * sum(dilations): steps of history one temporal
    /// stack can see. Must cover the whole past window.
    int receptive_field() const;
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Ordered, named tensor store. Creation order is the canonical order used
/// for gradients, optimizer state, and checkpoints.
class ParameterSet {
public:
    int add(const std::string& name, int rows, int cols);
    int index(const std::string& name) const;
    bool contains(const std::string& name) const;
    int count() const { return static_cast<int>(tensors_.size()); }
    std::int64_t scalar_count() const;

    const std::string& name(int i) const;
    Eigen::MatrixXd& tensor(int i);
    const Eigen::MatrixXd& tensor(int i) const;
    Eigen::MatrixXd& tensor(const std::string& name);
    const Eigen::MatrixXd& tensor(const std::string& name) const;

private:
    std::vector<std::string> names_;
    std::vector<Eigen::MatrixXd> tensors_;
};

/// Static per-network inputs to the forward pass.
struct GraphArtifacts {
    int n_nodes = 0;
    int n_edges = 0;
    Eigen::MatrixXd incidence;      // N x C, +1 leaving / -1 entering
    Eigen::MatrixXd incidence_in;   // N x C, 1 where the edge enters the node
    Eigen::MatrixXd incidence_out;  // N x C, 1 where the edge leaves the node
    std::vector<std::vector<int>> node_nbrs;  // delta neighborhoods, self included
    std::vector<std::vector<int>> edge_nbrs;
};

GraphArtifacts build_artifacts(const DrainageGraph& graph, double delta);

/// A normalized, double-precision training batch. Row layout of every
/// sequence matrix is sample-major, then step, then element.
struct Batch {
    int size = 0;
    Eigen::MatrixXd past_nodes;           // (B*m*N) x 3
    Eigen::MatrixXd past_edges;           // (B*m*C) x 2
    Eigen::MatrixXd past_node_forcing;    // (B*m*N) x 1
    Eigen::MatrixXd past_edge_forcing;    // (B*m*C) x 1
    Eigen::MatrixXd future_node_forcing;  // (B*n*N) x 1
    Eigen::MatrixXd future_edge_forcing;  // (B*n*C) x 1
    Eigen::MatrixXd target_nodes;         // (B*n*N) x 3
    Eigen::MatrixXd target_edges;         // (B*n*C) x 2
    Eigen::MatrixXd target_flood;         // (B*n*N) x 1, normalized Q_w
    Eigen::MatrixXd flood_label;          // (B*n*N) x 1
};

/// Stacks and normalizes samples; all samples must share the window and
/// element counts implied by (config, graph).
Batch make_batch(const std::vector<const Sample*>& samples, const Normalizer& norm,
                 const ModelConfig& config, const GraphArtifacts& art);

/// One forward evaluation. Owns the tape; handles stay valid as long as the
/// result is alive.
struct ForwardResult {
    std::unique_ptr<Tape> tape;
    std::vector<Var> param_vars;  // aligned with ParameterSet order
    Var node_states;              // (B*n*N) x 3: h_v, Q_in, Q_out (post-constraint)
    Var edge_states;              // (B*n*C) x 2: h_e, Q
    Var flood_logits;             // (B*n*N) x 1, classification only
    Var loss;                     // total; invalid when no targets requested
    Var loss_node;
    Var loss_edge;
    Var loss_flood;
    // Spatial-block and temporal-block outputs of the past stream, kept for
    // locality and causality checks.
    Var past_spatial_nodes;
    Var past_spatial_edges;
    Var past_temporal_nodes;
};

/// Normalized prediction with flooding resolved per the configured method.
struct Prediction {
    Eigen::MatrixXd node_states;  // (B*n*N) x 3
    Eigen::MatrixXd edge_states;  // (B*n*C) x 2
    Eigen::MatrixXd flooding;     // (B*n*N) x 1, >= 0
    Eigen::MatrixXd flood_prob;   // (B*n*N) x 1; empty for the balance method
};

/// Water balance surplus at each node-step: max(q_in + runoff - q_out, 0).
Eigen::MatrixXd flood_balance(const Eigen::MatrixXd& q_in, const Eigen::MatrixXd& runoff,
                              const Eigen::MatrixXd& q_out);

/// Zeroes the balance wherever the classifier probability is <= 0.5.
Eigen::MatrixXd apply_flood_gate(const Eigen::MatrixXd& balance,
                                 const Eigen::MatrixXd& prob);

struct LossBreakdown {
    double total = 0.0;
    double node = 0.0;
    double edge = 0.0;
    double flood = 0.0;
};

/// The surrogate: two spatial blocks, two temporal blocks, skip connection,
/// and the flow-constraint block, parameterized per (config, graph).
class Model {
public:
    Model(ModelConfig config, const DrainageGraph& graph);

    const ModelConfig& config() const { return config_; }
    const GraphArtifacts& artifacts() const { return artifacts_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    /// Replaces all tensors; names, order, and shapes must match exactly.
    void set_parameters(const ParameterSet& src);

    /// Records gradients when training is true; with_loss additionally
    /// evaluates the loss against the batch targets.
    ForwardResult forward(const Batch& batch, bool training, bool with_loss) const;

    /// Inference: no gradient recording, flood gate applied.
    Prediction predict(const Batch& batch) const;

    /// Mean-batch loss and gradients for every parameter, in ParameterSet
    /// order. Throws RuntimeFailure naming the tensor on non-finite entries.
    std::vector<Eigen::MatrixXd> gradients(const Batch& batch, LossBreakdown& loss) const;

    LossBreakdown evaluate_loss(const Batch& batch) const;

private:
    void build_parameters();
    void init_parameters();
    std::pair<Var, Var> spatial_gat(Tape& tape, const std::vector<Var>& pv,
                                    const std::string& prefix, Var x, Var e) const;
    Var spatial_dense(Tape& tape, const std::vector<Var>& pv, const std::string& prefix,
                      Var x) const;
    Var temporal(Tape& tape, const std::vector<Var>& pv, const std::string& prefix,
                 Var x, int batch, int steps, int rows) const;

    ModelConfig config_;
    GraphArtifacts artifacts_;
    ParameterSet params_;
};

/// Serialized model state: tensors plus everything needed to reuse them.
struct Checkpoint {
    ModelConfig config;
    Normalizer normalizer;
    std::string network_hash;
    std::int64_t step = 0;
    std::vector<double> loss_history;
    ParameterSet params;
};

/// Binary tensor container at `path` with a JSON sidecar at `path + ".json"`;
/// the sidecar carries the config, normalizer, provenance, and a checksum of
/// the tensor payload.
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace hydronet
