#pragma once

// Mini-batch Adam training against point-cloud datasets.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "nifkit/datagen.hpp"
#include "nifkit/models.hpp"

namespace nifkit {

struct TrainConfig {
    double learning_rate = 1e-3;
    Index batch_size = 1024;
    Index epochs = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    bool shuffle = true;

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
        require(batch_size >= 1, "batch_size must be >= 1");
        require(epochs >= 0, "epochs must be >= 0");
        require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "adam betas must lie in [0, 1)");
        require(epsilon > 0.0, "adam epsilon must be positive");
    }
};

inline constexpr double kDivergenceLoss = 1e12;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

namespace detail {

/// Per-row weights normalized to mean 1; empty when all weights are equal so
/// the weighted loss is bitwise the unweighted one.
inline Vector normalized_weights(const Vector* weights, Index rows) {
    if (!weights) return {};
    require(weights->size() == rows, "loss weights length differs from row count");
    if (rows == 0 || weights->minCoeff() == weights->maxCoeff()) return {};
    require(weights->minCoeff() > 0.0, "loss weights must be positive");
    return *weights / weights->mean();
}

}  // namespace detail

/// (1/M) sum_i w_i ||pred_i - target_i||^2, weights normalized to mean 1.
inline double mse_loss(const Matrix& pred, const Matrix& target, const Vector* weights = nullptr) {
    require(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse_loss: shape mismatch");
    if (pred.rows() == 0) return 0.0;
    const Vector w = detail::normalized_weights(weights, pred.rows());
    const Vector sq = (pred - target).rowwise().squaredNorm();
    const double total = w.size() ? w.dot(sq) : sq.sum();
    return total / static_cast<double>(pred.rows());
}

/// dL/dpred of mse_loss.
inline Matrix mse_grad(const Matrix& pred, const Matrix& target, const Vector* weights = nullptr) {
    require(pred.rows() == target.rows() && pred.cols() == target.cols(), "mse_grad: shape mismatch");
    const Vector w = detail::normalized_weights(weights, pred.rows());
    Matrix g = (2.0 / static_cast<double>(std::max<Index>(pred.rows(), 1))) * (pred - target);
    if (w.size()) g = w.asDiagonal() * g;
    return g;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st, const TrainConfig& cfg) {
    require(params.size() == grads.size() && st.m.size() == params.size() && st.v.size() == params.size(),
            "adam_step: size mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) fail(ErrorKind::Divergence, "non-finite gradient at Adam step " + std::to_string(st.t + 1));
    ++st.t;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * grads[i];
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * grads[i] * grads[i];
        const double mh = st.m[i] / c1;
        const double vh = st.v[i] / c2;
        params[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct TrainHistory {
    std::vector<double> epoch_loss;  // row-weighted mean of the epoch's batch losses (normalized scale)
    double wall_seconds = 0.0;
    std::int64_t steps = 0;
};

inline void check_model_matches(const Model& model, const PointCloudDataset& ds) {
    const PointCloudSchema& s = ds.schema;
    require(model.cond_dim() == s.cond_dim() && model.space_dim() == s.d_space && model.out_dim() == s.d_out,
            std::string(to_string(model.kind())) + ": model dims (cond " + std::to_string(model.cond_dim()) + ", space " +
                std::to_string(model.space_dim()) + ", out " + std::to_string(model.out_dim()) +
                ") do not match dataset schema (cond " + std::to_string(s.cond_dim()) + ", space " +
                std::to_string(s.d_space) + ", out " + std::to_string(s.d_out) + ")");
}

/// Called after each epoch with (epoch index, epoch loss).
using EpochCallback = std::function<void(Index, double)>;

inline TrainHistory fit(Model& model, const PointCloudDataset& ds, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {}) {
    cfg.validate();
    ds.validate();
    check_model_matches(model, ds);
    tune_allocator();
    const auto t0 = std::chrono::steady_clock::now();

    const Matrix inputs = ds.inputs();
    const Matrix targets = ds.targets();
    const bool weighted = ds.schema.has_weight;
    const Vector weights = ds.weights();
    const Index n = ds.rows();
    const Index bs = std::min(cfg.batch_size, std::max<Index>(n, 1));

    Rng rng(cfg.seed);
    AdamState adam(model.params().size());
    ParamVector grad(model.params().size());
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});

    TrainHistory hist;
    Matrix xb, yb;
    Vector wb;
    Tape tape;
    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) rng.shuffle(std::span<Index>(order));
        double epoch_sum = 0.0;
        for (Index start = 0; start < n; start += bs) {
            const Index len = std::min(bs, n - start);
            xb.resize(len, inputs.cols());
            yb.resize(len, targets.cols());
            wb.resize(len);
            for (Index i = 0; i < len; ++i) {
                const Index r = order[static_cast<std::size_t>(start + i)];
                xb.row(i) = inputs.row(r);
                yb.row(i) = targets.row(r);
                wb(i) = weights(r);
            }
            const Matrix pred = model.forward(xb, &tape);
            const double loss = mse_loss(pred, yb, weighted ? &wb : nullptr);
            if (!std::isfinite(loss) || loss > kDivergenceLoss)
                fail(ErrorKind::Divergence, "training diverged at epoch " + std::to_string(epoch) + " (loss " +
                                                std::to_string(loss) + ")");
            epoch_sum += loss * static_cast<double>(len);
            std::fill(grad.begin(), grad.end(), 0.0);
            model.backward(xb, tape, mse_grad(pred, yb, weighted ? &wb : nullptr), grad);
            try {
                adam_step(model.params(), grad, adam, cfg);
            } catch (const Error& e) {
                fail(e.kind(), std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")");
            }
            ++hist.steps;
        }
        const double epoch_loss = n > 0 ? epoch_sum / static_cast<double>(n) : 0.0;
        hist.epoch_loss.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }
    hist.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return hist;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Predictions in normalized units, evaluated in chunks.
inline Matrix predict(const Model& model, const Matrix& inputs, Index chunk = 16384) {
    Matrix out(inputs.rows(), model.out_dim());
    for (Index s = 0; s < inputs.rows(); s += chunk) {
        const Index len = std::min(chunk, inputs.rows() - s);
        out.middleRows(s, len) = model.forward(inputs.middleRows(s, len));
    }
    return out;
}

inline double dataset_loss(const Model& model, const PointCloudDataset& ds) {
    check_model_matches(model, ds);
    const Vector w = ds.weights();
    return mse_loss(predict(model, ds.inputs()), ds.targets(), ds.schema.has_weight ? &w : nullptr);
}

struct GroupRmse {
    double param = 0.0;  // first parameter column, physical units
    Index rows = 0;
    double rmse = 0.0;
};

struct RmseReport {
    double rmse = 0.0;             // physical units over all rows and outputs
    double rmse_normalized = 0.0;  // normalized target units
    double mean_group_rmse = 0.0;  // arithmetic mean of per-group values
    std::vector<GroupRmse> groups;
};

/// RMSE = sqrt(mean squared error over rows and output components). Groups
/// are keyed by the first parameter column; overall^2 is the row-weighted mean
/// of group^2.
inline RmseReport rmse_report(const Model& model, const PointCloudDataset& ds, bool group_by_param = true) {
    check_model_matches(model, ds);
    const PointCloudSchema& s = ds.schema;
    const Matrix pred = predict(model, ds.inputs());
    const Matrix tgt = ds.targets();
    RmseReport rep;
    if (ds.rows() == 0) return rep;
    Matrix pred_phys = pred, tgt_phys = tgt;
    if (!ds.norm.empty()) {
        const NormalizationSpec out_norm = ds.norm.slice(s.out_offset(), s.d_out);
        pred_phys = out_norm.invert(pred);
        tgt_phys = out_norm.invert(tgt);
    }
    const Vector sq = (pred_phys - tgt_phys).rowwise().squaredNorm();
    const double denom = static_cast<double>(ds.rows() * s.d_out);
    rep.rmse = std::sqrt(sq.sum() / denom);
    rep.rmse_normalized = std::sqrt((pred - tgt).squaredNorm() / denom);

    if (group_by_param && s.d_param > 0) {
        const ColumnNorm pn = ds.norm.empty() ? ColumnNorm{} : ds.norm.columns[0];
        std::map<double, std::pair<Index, double>> acc;
        for (Index r = 0; r < ds.rows(); ++r) {
            auto& a = acc[pn.invert(ds.table(r, 0))];
            ++a.first;
            a.second += sq(r);
        }
        for (const auto& [p, a] : acc)
            rep.groups.push_back({p, a.first, std::sqrt(a.second / static_cast<double>(a.first * s.d_out))});
    } else {
        rep.groups.push_back({0.0, ds.rows(), rep.rmse});
    }
    double m = 0.0;
    for (const auto& g : rep.groups) m += g.rmse;
    rep.mean_group_rmse = m / static_cast<double>(rep.groups.size());
    return rep;
}

/// Max relative error (floor 1e-3 on the scale) between the analytic gradient
/// of the dataset loss and central differences over every trainable.
inline double grad_check(const Model& model, const PointCloudDataset& sample, double h = 1e-6) {
    require(h >= 1e-7 && h <= 1e-4, "grad_check: h must lie in [1e-7, 1e-4]");
    check_model_matches(model, sample);
    const Matrix x = sample.inputs();
    const Matrix y = sample.targets();
    const Vector w = sample.weights();
    const Vector* wp = sample.schema.has_weight ? &w : nullptr;
    Tape tape;
    const Matrix pred = model.forward(x, &tape);
    ParamVector g(model.params().size(), 0.0);
    model.backward(x, tape, mse_grad(pred, y, wp), g);

    auto probe = model.clone();
    double worst = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double orig = probe->params()[i];
        probe->params()[i] = orig + h;
        const double fp = mse_loss(probe->forward(x), y, wp);
        probe->params()[i] = orig - h;
        const double fm = mse_loss(probe->forward(x), y, wp);
        probe->params()[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double scale = std::max({std::abs(fd), std::abs(g[i]), 1e-3});
        worst = std::max(worst, std::abs(fd - g[i]) / scale);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
            {"beta1", c.beta1},                 {"beta2", c.beta2},           {"epsilon", c.epsilon},
            {"seed", c.seed},                   {"shuffle", c.shuffle}};
}

inline nlohmann::json to_json(const RmseReport& r) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups) groups.push_back({{"param", g.param}, {"rows", g.rows}, {"rmse", g.rmse}});
    return {{"rmse_physical", r.rmse},
            {"rmse_normalized", r.rmse_normalized},
            {"mean_group_rmse_physical", r.mean_group_rmse},
            {"groups", groups}};
}

/// Metrics document: config echo, per-epoch losses (normalized scale),
/// final RMSE on train (and test when given), wall time, seed.
inline nlohmann::json metrics_json(const nlohmann::json& config, const TrainConfig& tc, const TrainHistory& h,
                                   const RmseReport& train, const RmseReport* test = nullptr) {
    nlohmann::json j;
    j["config"] = config;
    j["train"] = to_json(tc);
    j["seed"] = tc.seed;
    j["loss_scale"] = "normalized";
    j["epoch_loss"] = h.epoch_loss;
    j["final_loss"] = h.epoch_loss.empty() ? nlohmann::json(nullptr) : nlohmann::json(h.epoch_loss.back());
    j["steps"] = h.steps;
    j["wall_seconds"] = h.wall_seconds;
    j["train_rmse"] = to_json(train);
    if (test) j["test_rmse"] = to_json(*test);
    return j;
}

}  // namespace nifkit
