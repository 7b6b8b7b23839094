#pragma once

#include "hydronet/dataset.hpp"
#include "hydronet/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace hydronet {

/// Optimizer hyperparameters and loop control. learning_rate may be zero
/// (smoke tests run one pass without moving the parameters); everything else
/// follows the usual adaptive-moment defaults.
struct TrainConfig {
    int epochs = 2000;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int validation_interval = 1;  // epochs between validation passes
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// First and second gradient moments, one pair per parameter tensor.
class AdamState {
public:
    explicit AdamState(const ParameterSet& params);

    /// One bias-corrected update in place. Throws RuntimeFailure naming the
    /// tensor when an update produces a non-finite entry.
    void update(ParameterSet& params, const std::vector<Eigen::MatrixXd>& grads,
                const TrainConfig& config);

    std::int64_t step() const { return step_; }
    const Eigen::MatrixXd& first_moment(int i) const { return m_[i]; }
    const Eigen::MatrixXd& second_moment(int i) const { return v_[i]; }

private:
    std::int64_t step_ = 0;
    std::vector<Eigen::MatrixXd> m_, v_;
};

/// One validation evaluation. The component fields break down val_loss;
/// val_loss equals (mse_node + mse_edge) + bce_flood exactly.
struct CurveRecord {
    int epoch = 0;
    double time_s = 0.0;      // wall time since training started
    double train_loss = 0.0;  // mean over the epoch's batches
    double val_loss = 0.0;
    double mse_node = 0.0;
    double mse_edge = 0.0;
    double bce_flood = 0.0;
};

struct TrainingCurve {
    std::vector<CurveRecord> records;

    /// Trailing mean of val_loss over the last `window` records ending at
    /// each record (shorter prefix while fewer records exist).
    std::vector<double> moving_average(int window = 500) const;

    /// CSV with header "epoch,time_s,train_loss,val_loss,mse_node,mse_edge,
    /// bce_flood"; floats formatted to round-trip.
    void write_csv(const std::string& path) const;
};

struct TrainResult {
    TrainingCurve curve;
    int completed_epochs = 0;
    int best_epoch = 0;        // 0 when no validation record exists
    double best_val_loss = 0.0;
    double final_val_loss = 0.0;
    bool diverged = false;
    std::string best_checkpoint;   // empty when never written
    std::string final_checkpoint;
};

/// Minimizes the batch loss over `train_samples` with Adam, validating every
/// `validation_interval` epochs (and always after the last). The model's
/// parameters are updated in place; `out_dir` receives best.ckpt (lowest
/// validation loss) and final.ckpt. Deterministic under (config.seed, model
/// seed): fixed shuffle stream and accumulation order.
///
/// A non-finite loss, gradient, or update aborts the run: the parameters roll
/// back to the last state that passed validation, final.ckpt holds that
/// state, and the result is marked diverged.
TrainResult train_model(Model& model, const TrainConfig& config,
                        const std::vector<Sample>& train_samples,
                        const std::vector<Sample>& val_samples,
                        const Normalizer& norm, const std::string& network_hash,
                        const std::string& out_dir);

}  // namespace hydronet
