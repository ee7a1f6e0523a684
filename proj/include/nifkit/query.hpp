#pragma once

// Decoupled spatial query: freeze the ShapeNet parameters of one condition,
// then evaluate points and spatial gradients without touching ParameterNet.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#if defined(__unix__)
#include <sys/utsname.h>
#endif

#include "nifkit/models.hpp"

namespace nifkit {

class CompiledField {
public:
    CompiledField(ShapeNetConfig cfg, std::vector<double> theta, std::vector<double> condition,
                  std::vector<double> zeta, ModelKind source)
        : cfg_(std::move(cfg)), theta_(std::move(theta)), condition_(std::move(condition)), zeta_(std::move(zeta)),
          source_(source) {}

    const ShapeNetConfig& shape_config() const { return cfg_; }
    std::span<const double> theta() const { return theta_; }
    std::span<const double> condition() const { return condition_; }
    std::span<const double> zeta() const { return zeta_; }
    ModelKind source() const { return source_; }

private:
    ShapeNetConfig cfg_;
    std::vector<double> theta_;
    std::vector<double> condition_;
    std::vector<double> zeta_;
    ModelKind source_;
};

inline CompiledField compile(const NifModel& model, std::span<const double> condition) {
    require(static_cast<Index>(condition.size()) == model.cond_dim(),
            "compile: condition has " + std::to_string(condition.size()) + " values, model expects " +
                std::to_string(model.cond_dim()));
    Matrix cond(1, model.cond_dim());
    for (Index j = 0; j < model.cond_dim(); ++j) cond(0, j) = condition[static_cast<std::size_t>(j)];
    const Matrix zeta = model.latent(cond);
    const Matrix theta = model.shape_params(zeta);
    return {model.config().shape, std::vector<double>(theta.data(), theta.data() + theta.size()),
            std::vector<double>(condition.begin(), condition.end()),
            std::vector<double>(zeta.data(), zeta.data() + zeta.size()), model.kind()};
}

inline Matrix eval_points(const CompiledField& f, const Matrix& points) {
    require(points.cols() == f.shape_config().d_in, "eval_points: point width must be " +
                                                        std::to_string(f.shape_config().d_in));
    if (points.rows() == 0) return Matrix(0, f.shape_config().d_out);
    return mlp_forward(f.theta(), f.shape_config(), points);
}

/// Column o * d_in + j holds du_o / dx_j.
inline Matrix eval_gradient(const CompiledField& f, const Matrix& points) {
    require(points.cols() == f.shape_config().d_in, "eval_gradient: point width must be " +
                                                          std::to_string(f.shape_config().d_in));
    if (points.rows() == 0) return Matrix(0, f.shape_config().d_out * f.shape_config().d_in);
    return shape_spatial_gradient(f.shape_config(), f.theta(), points);
}

// ---------------------------------------------------------------------------
// Flop model
// ---------------------------------------------------------------------------

enum class QueryMode { Forward, Gradient };

inline constexpr double kActivationFlops = 4.0;

/// Forward: per layer 2*in*out + out for the affine map, plus act_weight*out
/// for a non-linear activation (and out more for the sine frequency scale);
/// each half-sum block adds 2*width. Gradient: the forward pass, derivative
/// evaluation (act_weight*out per non-linear layer) and, for every output
/// component, a reverse sweep of 2*in*out per layer, out per non-linear layer
/// (and out for the sine scale), 2*width per block.
inline double flops_per_point(const Chain& c, QueryMode mode, Index d_out, double act_weight = kActivationFlops) {
    c.validate();
    double fwd = 0.0, deriv = 0.0, sweep = 0.0;
    for (const auto& l : c.layers) {
        const double in = static_cast<double>(l.in), out = static_cast<double>(l.out);
        fwd += 2.0 * in * out + out;
        sweep += 2.0 * in * out;
        if (!l.act.is_identity()) {
            fwd += act_weight * out;
            deriv += act_weight * out;
            sweep += out;
            if (l.act.kind == ActKind::Sine) {
                fwd += out;
                sweep += out;
            }
        }
    }
    if (c.style == BlockStyle::ResNetHalfSum) {
        const double blocks = static_cast<double>((c.layers.size() - 2) / 2);
        const double w = static_cast<double>(c.layers[1].in);
        fwd += blocks * 2.0 * w;
        sweep += blocks * 2.0 * w;
    }
    if (mode == QueryMode::Forward) return fwd;
    return fwd + deriv + static_cast<double>(d_out) * sweep;
}

inline double flops_per_point(const ShapeNetConfig& cfg, QueryMode mode, double act_weight = kActivationFlops) {
    return flops_per_point(cfg.chain(), mode, cfg.d_out, act_weight);
}

inline constexpr double kMonolithicWidthFactor = 1.37;

/// Space-time SIREN taking condition and space together, width ceil(1.37 w).
inline ShapeNetConfig monolithic_siren_config(const NifConfig& nif, double factor = kMonolithicWidthFactor) {
    ShapeNetConfig s = nif.shape;
    s.d_in = nif.shape.d_in + nif.pnet.d_in;
    s.width = static_cast<Index>(std::ceil(factor * static_cast<double>(nif.shape.width) - 1e-9));
    s.act = Activation::sine();
    return s;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct QueryBenchEntry {
    std::string name;
    Index width = 0;
    double flops_forward = 0.0;
    double flops_gradient = 0.0;
    double ns_per_point_forward = 0.0;
    double ns_per_point_gradient = 0.0;
    double compile_ns = 0.0;
    double error_proxy = -1.0;  // caller-supplied, negative when unknown
};

struct QueryBenchReport {
    Index n_points = 0;
    Index repeats = 0;
    std::vector<QueryBenchEntry> entries;
    std::string machine;
};

inline std::string machine_descriptor() {
#if defined(__unix__)
    utsname u{};
    if (uname(&u) == 0) return std::string(u.sysname) + " " + u.release + " " + u.machine;
#endif
    return "unknown";
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace detail {

template <class F>
double median_ns(Index repeats, F&& f) {
    std::vector<double> t;
    for (Index r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        t.push_back(std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(t.begin(), t.end());
    const std::size_t n = t.size();
    return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
}

}  // namespace detail

/// Times NIF (compile once, then ShapeNet only) against a monolithic model
/// fed [condition, point] rows. Points are uniform in [-1, 1]^d.
inline QueryBenchReport run_benchmark(const NifModel& nif, const Model& mono, std::span<const double> condition,
                                      Index n_points, Index repeats, std::uint64_t seed = 0) {
    require(repeats >= 1, "benchmark: repeats must be >= 1");
    require(n_points >= 0, "benchmark: n_points must be >= 0");
    require(mono.input_dim() == nif.cond_dim() + nif.space_dim(),
            "benchmark: monolithic model must take condition and space columns");
    QueryBenchReport rep;
    rep.n_points = n_points;
    rep.repeats = repeats;
    rep.machine = machine_descriptor();

    Rng rng(seed);
    const Index ds = nif.space_dim();
    Matrix pts(n_points, ds);
    for (Index i = 0; i < n_points; ++i)
        for (Index j = 0; j < ds; ++j) pts(i, j) = rng.uniform(-1.0, 1.0);
    Matrix rows(n_points, nif.cond_dim() + ds);
    for (Index i = 0; i < n_points; ++i) {
        for (Index j = 0; j < nif.cond_dim(); ++j) rows(i, j) = condition[static_cast<std::size_t>(j)];
        rows.row(i).tail(ds) = pts.row(i);
    }
    const double per = n_points > 0 ? 1.0 / static_cast<double>(n_points) : 0.0;

    QueryBenchEntry a;
    a.name = to_string(nif.kind());
    a.width = nif.config().shape.width;
    a.flops_forward = flops_per_point(nif.config().shape, QueryMode::Forward);
    a.flops_gradient = flops_per_point(nif.config().shape, QueryMode::Gradient);
    std::optional<CompiledField> field;
    a.compile_ns = detail::median_ns(repeats, [&] { field.emplace(compile(nif, condition)); });
    if (n_points > 0) {
        a.ns_per_point_forward = per * detail::median_ns(repeats, [&] { (void)eval_points(*field, pts); });
        a.ns_per_point_gradient = per * detail::median_ns(repeats, [&] { (void)eval_gradient(*field, pts); });
    }
    rep.entries.push_back(a);

    QueryBenchEntry b;
    b.name = to_string(mono.kind());
    if (const auto* m = dynamic_cast<const MlpModel*>(&mono)) {
        b.width = m->config().width;
        b.flops_forward = flops_per_point(m->config(), QueryMode::Forward);
        b.flops_gradient = flops_per_point(m->config(), QueryMode::Gradient);
    }
    if (n_points > 0) {
        b.ns_per_point_forward = per * detail::median_ns(repeats, [&] { (void)mono.forward(rows); });
        b.ns_per_point_gradient = per * detail::median_ns(repeats, [&] { (void)spatial_gradient(mono, rows); });
    }
    rep.entries.push_back(b);
    return rep;
}

inline nlohmann::json to_json(const QueryBenchReport& r) {
    nlohmann::json j;
    j["n_points"] = r.n_points;
    j["repeats"] = r.repeats;
    j["machine"] = r.machine;
    j["activation_flops"] = kActivationFlops;
    j["models"] = nlohmann::json::array();
    for (const auto& e : r.entries) {
        nlohmann::json m = {{"name", e.name},
                            {"width", e.width},
                            {"flops_per_point_forward", e.flops_forward},
                            {"flops_per_point_gradient", e.flops_gradient},
                            {"ns_per_point_forward", e.ns_per_point_forward},
                            {"ns_per_point_gradient", e.ns_per_point_gradient},
                            {"compile_ns", e.compile_ns}};
        if (e.error_proxy >= 0.0) m["error_proxy"] = e.error_proxy;
        m["config_hash"] = fnv1a(e.name + ":" + std::to_string(e.width) + ":" + std::to_string(e.flops_forward));
        j["models"].push_back(m);
    }
    return j;
}

}  // namespace nifkit
