#include "hydronet/trainer.hpp"

#include "hydronet/common.hpp"
#include "hydronet/json_util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace hydronet {

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ValidationError("train config: learning_rate must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0))
        throw ValidationError("train config: beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0))
        throw ValidationError("train config: beta2 must be in [0, 1)");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon))
        throw ValidationError("train config: epsilon must be finite and > 0");
    if (validation_interval < 1)
        throw ValidationError("train config: validation_interval must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["learning_rate"] = learning_rate;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["epsilon"] = epsilon;
    j["validation_interval"] = validation_interval;
    j["seed"] = seed;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    const std::string where = "train config";
    if (!j.is_object()) throw ValidationError(where + " must be an object");
    reject_unknown_keys(j, {"epochs", "batch_size", "learning_rate", "beta1", "beta2",
                            "epsilon", "validation_interval", "seed"}, where);
    TrainConfig cfg;
    cfg.epochs = static_cast<int>(json_integer(j, "epochs", where));
    cfg.batch_size = static_cast<int>(json_integer(j, "batch_size", where));
    cfg.learning_rate = json_number(j, "learning_rate", where);
    cfg.beta1 = json_number(j, "beta1", where);
    cfg.beta2 = json_number(j, "beta2", where);
    cfg.epsilon = json_number(j, "epsilon", where);
    cfg.validation_interval = static_cast<int>(json_integer(j, "validation_interval", where));
    const long seed = json_integer(j, "seed", where);
    if (seed < 0) throw ValidationError(where + ": seed must be nonnegative");
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.validate();
    return cfg;
}

AdamState::AdamState(const ParameterSet& params) {
    m_.reserve(static_cast<std::size_t>(params.count()));
    v_.reserve(static_cast<std::size_t>(params.count()));
    for (int i = 0; i < params.count(); ++i) {
        const Eigen::MatrixXd& t = params.tensor(i);
        m_.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
        v_.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
    }
}

void AdamState::update(ParameterSet& params, const std::vector<Eigen::MatrixXd>& grads,
                       const TrainConfig& config) {
    if (static_cast<int>(grads.size()) != params.count() ||
        params.count() != static_cast<int>(m_.size())) {
        throw ValidationError("adam: gradient count does not match parameter count");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step_));
    for (int i = 0; i < params.count(); ++i) {
        Eigen::MatrixXd& t = params.tensor(i);
        const Eigen::MatrixXd& g = grads[static_cast<std::size_t>(i)];
        if (g.rows() != t.rows() || g.cols() != t.cols())
            throw ValidationError("adam: gradient shape mismatch for " + params.name(i));
        Eigen::MatrixXd& m = m_[static_cast<std::size_t>(i)];
        Eigen::MatrixXd& v = v_[static_cast<std::size_t>(i)];
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
        t.array() -= config.learning_rate * (m.array() / bc1) /
                     ((v.array() / bc2).sqrt() + config.epsilon);
        if (!t.allFinite())
            throw RuntimeFailure("adam: non-finite update in " + params.name(i));
    }
}

std::vector<double> TrainingCurve::moving_average(int window) const {
    if (window < 1) throw ValidationError("moving average: window must be >= 1");
    std::vector<double> out(records.size(), 0.0);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::size_t first = i + 1 >= static_cast<std::size_t>(window)
                                      ? i + 1 - static_cast<std::size_t>(window)
                                      : 0;
        double sum = 0.0;
        for (std::size_t k = first; k <= i; ++k) sum += records[k].val_loss;
        out[i] = sum / static_cast<double>(i - first + 1);
    }
    return out;
}

void TrainingCurve::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw RuntimeFailure("cannot write training curve to " + path);
    f << "epoch,time_s,train_loss,val_loss,mse_node,mse_edge,bce_flood\n";
    for (const CurveRecord& r : records) {
        f << r.epoch << ',' << format_double(r.time_s) << ','
          << format_double(r.train_loss) << ',' << format_double(r.val_loss) << ','
          << format_double(r.mse_node) << ',' << format_double(r.mse_edge) << ','
          << format_double(r.bce_flood) << '\n';
    }
    if (!f) throw RuntimeFailure("failed writing training curve to " + path);
}

namespace {

/// Sample-weighted mean loss over fixed-order chunks; keeps peak tape memory
/// bounded by the batch size regardless of the set size.
LossBreakdown chunked_loss(const Model& model, const std::vector<Sample>& samples,
                           const Normalizer& norm, int chunk_size) {
    LossBreakdown agg;
    double weight = 0.0;
    std::vector<const Sample*> ptrs;
    for (std::size_t first = 0; first < samples.size();
         first += static_cast<std::size_t>(chunk_size)) {
        const std::size_t last = std::min(samples.size(),
                                          first + static_cast<std::size_t>(chunk_size));
        ptrs.clear();
        for (std::size_t i = first; i < last; ++i) ptrs.push_back(&samples[i]);
        const LossBreakdown part = model.evaluate_loss(
            make_batch(ptrs, norm, model.config(), model.artifacts()));
        const double w = static_cast<double>(last - first);
        agg.node += w * part.node;
        agg.edge += w * part.edge;
        agg.flood += w * part.flood;
        weight += w;
    }
    agg.node /= weight;
    agg.edge /= weight;
    agg.flood /= weight;
    agg.total = (agg.node + agg.edge) + agg.flood;
    return agg;
}

Checkpoint snapshot(const Model& model, const Normalizer& norm,
                    const std::string& network_hash, std::int64_t step,
                    const std::vector<double>& history) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    ckpt.normalizer = norm;
    ckpt.network_hash = network_hash;
    ckpt.step = step;
    ckpt.loss_history = history;
    ckpt.params = model.params();
    return ckpt;
}

}  // namespace

TrainResult train_model(Model& model, const TrainConfig& config,
                        const std::vector<Sample>& train_samples,
                        const std::vector<Sample>& val_samples,
                        const Normalizer& norm, const std::string& network_hash,
                        const std::string& out_dir) {
    config.validate();
    if (train_samples.empty()) throw ValidationError("training set is empty");
    if (val_samples.empty()) throw ValidationError("validation set is empty");
    std::filesystem::create_directories(out_dir);

    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&start]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    };

    TrainResult result;
    AdamState adam(model.params());
    Rng shuffle_rng(derive_seed(config.seed, "shuffle"));

    std::vector<std::size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    // Rollback targets: last state that passed validation, and the best one.
    Checkpoint last_good = snapshot(model, norm, network_hash, 0, {});
    Checkpoint best;
    bool have_best = false;
    std::vector<double> val_history;

    std::vector<const Sample*> ptrs;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        try {
            for (std::size_t i = order.size(); i > 1; --i) {
                const auto j = static_cast<std::size_t>(
                    shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
                std::swap(order[i - 1], order[j]);
            }

            double train_node = 0.0, train_edge = 0.0, train_flood = 0.0;
            double weight = 0.0;
            for (std::size_t first = 0; first < order.size();
                 first += static_cast<std::size_t>(config.batch_size)) {
                const std::size_t last = std::min(
                    order.size(), first + static_cast<std::size_t>(config.batch_size));
                ptrs.clear();
                for (std::size_t i = first; i < last; ++i)
                    ptrs.push_back(&train_samples[order[i]]);
                const Batch batch = make_batch(ptrs, norm, model.config(),
                                               model.artifacts());
                LossBreakdown loss;
                const std::vector<Eigen::MatrixXd> grads = model.gradients(batch, loss);
                if (!std::isfinite(loss.total))
                    throw RuntimeFailure("training loss diverged");
                adam.update(model.params(), grads, config);
                const double w = static_cast<double>(last - first);
                train_node += w * loss.node;
                train_edge += w * loss.edge;
                train_flood += w * loss.flood;
                weight += w;
            }

            if (epoch % config.validation_interval != 0 && epoch != config.epochs)
                continue;

            const LossBreakdown val = chunked_loss(model, val_samples, norm,
                                                   config.batch_size);
            if (!std::isfinite(val.total)) throw RuntimeFailure("validation loss diverged");

            CurveRecord rec;
            rec.epoch = epoch;
            rec.time_s = elapsed();
            rec.train_loss = (train_node + train_edge + train_flood) / weight;
            rec.val_loss = val.total;
            rec.mse_node = val.node;
            rec.mse_edge = val.edge;
            rec.bce_flood = val.flood;
            result.curve.records.push_back(rec);
            val_history.push_back(val.total);

            last_good = snapshot(model, norm, network_hash, adam.step(), val_history);
            if (!have_best || val.total < best.loss_history.back()) {
                best = last_good;
                have_best = true;
                result.best_epoch = epoch;
                result.best_val_loss = val.total;
            }
            result.completed_epochs = epoch;
        } catch (const RuntimeFailure&) {
            result.diverged = true;
            break;
        }
    }

    if (result.diverged) model.set_parameters(last_good.params);

    const std::filesystem::path dir(out_dir);
    if (have_best) {
        result.best_checkpoint = (dir / "best.ckpt").string();
        write_checkpoint(best, result.best_checkpoint);
    }
    result.final_checkpoint = (dir / "final.ckpt").string();
    write_checkpoint(result.diverged
                         ? last_good
                         : snapshot(model, norm, network_hash, adam.step(), val_history),
                     result.final_checkpoint);
    if (!result.curve.records.empty())
        result.final_val_loss = result.curve.records.back().val_loss;
    return result;
}

}  // namespace hydronet
