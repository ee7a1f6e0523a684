#pragma once

// Command-line driver. `run` returns the process exit code:
// 0 success, 1 usage error, 2 data error, 3 numeric divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nifkit/checkpoint.hpp"
#include "nifkit/datagen.hpp"
#include "nifkit/query.hpp"
#include "nifkit/reduce.hpp"
#include "nifkit/train.hpp"

namespace nifkit::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline void flatten_json(const nlohmann::json& j, const std::string& prefix, KeyValues& out) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it)
            flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    } else if (j.is_array()) {
        std::string s;
        for (std::size_t i = 0; i < j.size(); ++i) {
            if (i) s += ",";
            s += j[i].is_string() ? j[i].get<std::string>() : j[i].dump();
        }
        out[prefix] = s;
    } else if (j.is_string()) {
        out[prefix] = j.get<std::string>();
    } else {
        out[prefix] = j.dump();
    }
}

/// `key=value` lines (`#` comments, blank lines ignored) or a JSON object
/// whose nesting becomes dotted keys.
inline KeyValues parse_config_text(const std::string& text, const std::string& origin = "config") {
    KeyValues kv;
    const std::string t = trim(text);
    if (!t.empty() && t.front() == '{') {
        try {
            flatten_json(nlohmann::json::parse(t), "", kv);
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(origin + ": invalid JSON: " + e.what());
        }
        return kv;
    }
    std::istringstream is(text);
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        ++n;
        line = trim(line);
        if (line.empty() || line.front() == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(origin + " line " + std::to_string(n) + ": expected key=value");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

class RunConfig {
public:
    explicit RunConfig(KeyValues defaults) : values_(std::move(defaults)) {}

    void merge(const KeyValues& kv, const std::string& origin) {
        for (const auto& [k, v] : kv) {
            if (!values_.count(k)) throw UsageError(origin + ": unknown key '" + k + "'");
            values_[k] = v;
        }
    }
    void set(const std::string& k, const std::string& v) {
        if (!values_.count(k)) throw UsageError("unknown key '" + k + "'");
        values_[k] = v;
    }

    const std::string& str(const std::string& k) const {
        const auto it = values_.find(k);
        if (it == values_.end()) throw std::logic_error("config key not declared: " + k);
        return it->second;
    }
    double num(const std::string& k) const {
        const std::string& s = str(k);
        try {
            std::size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError("config key '" + k + "': '" + s + "' is not a number");
        }
    }
    Index integer(const std::string& k) const {
        const std::string& s = str(k);
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw UsageError("config key '" + k + "': '" + s + "' is not an integer");
        }
    }
    bool flag(const std::string& k) const {
        const std::string& s = str(k);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw UsageError("config key '" + k + "': '" + s + "' is not a boolean");
    }
    std::vector<double> nums(const std::string& k) const {
        std::vector<double> out;
        std::stringstream ss(str(k));
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cell = trim(cell);
            if (cell.empty()) continue;
            try {
                out.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw UsageError("config key '" + k + "': '" + cell + "' is not a number");
            }
        }
        return out;
    }
    std::vector<Index> integers(const std::string& k) const {
        std::vector<Index> out;
        for (double v : nums(k)) {
            if (v != std::floor(v)) throw UsageError("config key '" + k + "': expected integers");
            out.push_back(static_cast<Index>(v));
        }
        return out;
    }

    std::string dump() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
        return s;
    }
    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : values_) j[k] = v;
        return j;
    }

private:
    KeyValues values_;
};

inline KeyValues model_defaults() {
    return {{"model.kind", "nif-full"},
            {"shape.width", "30"},
            {"shape.blocks", "1"},
            {"shape.act", "auto"},
            {"shape.omega0", "30"},
            {"shape.style", "resnet"},
            {"pnet.hidden", "30,30"},
            {"pnet.bottleneck", "1"},
            {"pnet.act", "swish"},
            {"nif.last_layer_bias", "true"},
            {"deeponet.branch_hidden", "30,30"},
            {"deeponet.trunk_hidden", "30,30"},
            {"deeponet.latent", "16"},
            {"deeponet.act", "swish"},
            {"fourier.features", "16"},
            {"fourier.sigma", "1"}};
}

inline KeyValues train_defaults() {
    return {{"train.learning_rate", "1e-3"},
            {"train.batch_size", "1024"},
            {"train.epochs", "100"},
            {"train.shuffle", "true"}};
}

inline KeyValues defaults_for(const std::string& cmd) {
    KeyValues d{{"seed", "0"}};
    auto add = [&](const KeyValues& more) { d.insert(more.begin(), more.end()); };
    if (cmd == "gen-ks") {
        add({{"ks.mu", ""},
             {"ks.mu_lo", "0.2"},
             {"ks.mu_hi", "0.28"},
             {"ks.mu_count", "20"},
             {"ks.n_grid", "1024"},
             {"ks.dt", "1e-3"},
             {"ks.t_final", "100"},
             {"ks.save_every", "10"},
             {"ks.subsample_space", "4"},
             {"ks.subsample_time", "100"},
             {"ks.file", "ks.csv"}});
    } else if (cmd == "gen-wave") {
        const WaveConfig w;
        add({{"wave.n_x", std::to_string(w.n_x)},
             {"wave.n_t", std::to_string(w.n_t)},
             {"wave.x_max", "1"},
             {"wave.t_max", "70"},
             {"wave.speed", "0.012"},
             {"wave.omega", "70"},
             {"wave.envelope", "1000"},
             {"wave.x0", "0.1"}});
    } else if (cmd == "train") {
        add({{"data.train", ""}, {"data.test", ""}});
        add(model_defaults());
        add(train_defaults());
    } else if (cmd == "eval") {
        add({{"eval.model", ""}, {"eval.data", ""}, {"eval.predictions", "true"}});
    } else if (cmd == "pod") {
        add({{"data.input", ""}, {"pod.rank", "10"}, {"pod.output", "0"}});
    } else if (cmd == "qdeim") {
        add({{"data.input", ""}, {"qdeim.rank", "10"}, {"qdeim.output", "0"}});
    } else if (cmd == "sparse-sense") {
        add({{"data.input", ""}, {"sense.sensors", ""}, {"sense.rank", "10"}, {"sense.output", "0"}});
        add(model_defaults());
        add(train_defaults());
    } else if (cmd == "dmd") {
        add({{"dmd.model", ""}, {"dmd.data", ""}, {"dmd.rank", "0"}, {"dmd.dt", "0"}, {"dmd.grid", "500"}});
    } else if (cmd == "bench-query") {
        add({{"bench.model", ""},
             {"bench.baseline", ""},
             {"bench.points", "100000"},
             {"bench.repeats", "5"},
             {"bench.condition", ""},
             {"bench.width_factor", "1.37"}});
    } else {
        throw UsageError("unknown subcommand '" + cmd + "'");
    }
    return d;
}

inline const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> s{"gen-ks", "gen-wave", "train", "eval", "pod",
                                            "qdeim",  "sparse-sense", "dmd", "bench-query"};
    return s;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

struct Context {
    RunConfig cfg;
    fs::path out;
    std::uint64_t seed = 0;
    std::ostream& log;
};

inline fs::path required_path(const RunConfig& c, const std::string& key) {
    const std::string& p = c.str(key);
    if (p.empty()) throw UsageError("config key '" + key + "' is required");
    return p;
}

inline void write_text(const fs::path& p, const std::string& s) {
    std::ofstream os(p);
    if (!os) fail(ErrorKind::Io, "cannot open '" + p.string() + "' for writing");
    os << s;
    if (!os) fail(ErrorKind::Io, "failed writing '" + p.string() + "'");
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

inline void write_matrix_csv(const fs::path& p, const std::vector<std::string>& header, const Matrix& m) {
    std::ostringstream os;
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << "\n";
    write_matrix_rows(os, m);
    write_text(p, os.str());
}

/// Re-expresses `d` under normalization `norm` (used to score test data with
/// the training statistics).
inline PointCloudDataset renormalize(const PointCloudDataset& d, const NormalizationSpec& norm) {
    if (norm.empty()) return d;
    if (static_cast<Index>(norm.columns.size()) != d.schema.cols())
        fail(ErrorKind::InvalidInput, "normalization column count does not match the dataset");
    PointCloudDataset out = d;
    const Matrix raw = d.norm.empty() ? d.table : d.norm.invert(d.table);
    out.norm = norm;
    out.table = norm.apply(raw);
    return out;
}

inline std::unique_ptr<Model> build_model(const RunConfig& c, const PointCloudSchema& s) {
    const ModelKind kind = [&] {
        try {
            return parse_model_kind(c.str("model.kind"));
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }();
    try {
        ShapeNetConfig shape;
        shape.width = c.integer("shape.width");
        shape.n_blocks = c.integer("shape.blocks");
        const std::string act = c.str("shape.act");
        const bool sine_default = kind == ModelKind::NifFull || kind == ModelKind::NifLastLayer || kind == ModelKind::Siren;
        shape.act = {act == "auto" ? (sine_default ? ActKind::Sine : ActKind::Swish) : parse_act_kind(act),
                     c.num("shape.omega0")};
        if (kind == ModelKind::Mlp && shape.act.kind == ActKind::Sine)
            throw UsageError("model.kind=mlp with a sine activation is a SIREN; use model.kind=siren");
        shape.style = parse_block_style(c.str("shape.style"));
        shape.d_out = s.d_out;
        switch (kind) {
            case ModelKind::NifFull:
            case ModelKind::NifLastLayer: {
                NifConfig n;
                n.shape = shape;
                n.shape.d_in = s.d_space;
                n.pnet.d_in = s.cond_dim();
                n.pnet.hidden = c.integers("pnet.hidden");
                n.pnet.bottleneck = c.integer("pnet.bottleneck");
                n.pnet.act = {parse_act_kind(c.str("pnet.act")), c.num("shape.omega0")};
                n.pnet.target = kind == ModelKind::NifFull ? NifMode::Full : NifMode::LastLayer;
                n.last_layer_bias = c.flag("nif.last_layer_bias");
                return std::make_unique<NifModel>(n);
            }
            case ModelKind::Mlp:
            case ModelKind::Siren: {
                shape.d_in = s.input_dim();
                if (kind == ModelKind::Siren) shape.act = Activation::sine(c.num("shape.omega0"));
                return std::make_unique<MlpModel>(shape, s.cond_dim());
            }
            case ModelKind::DeepONet: {
                if (s.d_out != 1) throw UsageError("deeponet supports a single output column");
                DeepONetConfig d;
                const Index latent = c.integer("deeponet.latent");
                d.branch = {s.cond_dim()};
                for (Index w : c.integers("deeponet.branch_hidden")) d.branch.push_back(w);
                d.branch.push_back(latent + 1);
                d.trunk = {s.d_space};
                for (Index w : c.integers("deeponet.trunk_hidden")) d.trunk.push_back(w);
                d.trunk.push_back(latent);
                d.act = {parse_act_kind(c.str("deeponet.act")), c.num("shape.omega0")};
                return std::make_unique<DeepONetModel>(d);
            }
            case ModelKind::Fourier: {
                FourierFeatureConfig f;
                f.d_in = s.input_dim();
                f.n_features = c.integer("fourier.features");
                f.sigma = c.num("fourier.sigma");
                f.mlp = shape;
                return std::make_unique<FourierModel>(f, s.cond_dim());
            }
        }
    } catch (const Error& e) {
        throw UsageError(std::string("model config: ") + e.what());
    }
    throw UsageError("unsupported model kind");
}

inline TrainConfig train_config(const RunConfig& c, std::uint64_t seed) {
    TrainConfig t;
    t.learning_rate = c.num("train.learning_rate");
    t.batch_size = c.integer("train.batch_size");
    t.epochs = c.integer("train.epochs");
    t.shuffle = c.flag("train.shuffle");
    t.seed = seed;
    try {
        t.validate();
    } catch (const Error& e) {
        throw UsageError(std::string("train config: ") + e.what());
    }
    return t;
}

/// Trains, then writes model.nif, model.norm.json and metrics.json.
inline void train_and_save(Context& ctx, Model& model, const PointCloudDataset& train,
                           const PointCloudDataset* test) {
    const TrainConfig tc = train_config(ctx.cfg, ctx.seed);
    Rng init(ctx.seed);
    model.init(init);
    ctx.log << "training " << to_string(model.kind()) << " (" << model.param_count() << " parameters) on "
            << train.rows() << " rows for " << tc.epochs << " epochs\n";
    const TrainHistory h = fit(model, train, tc);
    const RmseReport tr = rmse_report(model, train);
    std::optional<RmseReport> te;
    if (test) te = rmse_report(model, *test);
    save_model(model, ctx.out / "model.nif");
    if (!train.norm.empty()) write_json(ctx.out / "model.norm.json", normalization_to_json(train.norm, train.schema));
    nlohmann::json m = metrics_json(ctx.cfg.to_json(), tc, h, tr, te ? &*te : nullptr);
    m["model"] = to_string(model.kind());
    m["param_count"] = model.param_count();
    write_json(ctx.out / "metrics.json", m);
    ctx.log << "final loss " << (h.epoch_loss.empty() ? 0.0 : h.epoch_loss.back()) << ", train rmse " << tr.rmse
            << (te ? ", test rmse " + std::to_string(te->rmse) : std::string()) << "\n";
}

inline std::vector<double> condition_values(const std::string& s, Index n) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (!cell.empty()) v.push_back(std::stod(cell));
    }
    if (v.empty()) v.assign(static_cast<std::size_t>(n), 0.0);
    if (static_cast<Index>(v.size()) != n)
        throw UsageError("condition needs " + std::to_string(n) + " values, got " + std::to_string(v.size()));
    return v;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline void cmd_gen_ks(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    std::vector<double> mus = c.nums("ks.mu");
    if (mus.empty()) mus = linspace(c.num("ks.mu_lo"), c.num("ks.mu_hi"), c.integer("ks.mu_count"));
    KSConfig k;
    k.n_grid = c.integer("ks.n_grid");
    k.dt = c.num("ks.dt");
    k.t_final = c.num("ks.t_final");
    k.save_every = c.integer("ks.save_every");
    k.subsample_space = c.integer("ks.subsample_space");
    k.subsample_time = c.integer("ks.subsample_time");
    try {
        k.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    ctx.log << "solving KS for " << mus.size() << " viscosities\n";
    const PointCloudDataset d = make_ks_dataset(mus, k);
    write_pointcloud(ctx.out / c.str("ks.file"), d);
    ctx.log << "wrote " << d.rows() << " rows to " << (ctx.out / c.str("ks.file")).string() << "\n";
}

inline void cmd_gen_wave(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    WaveConfig w;
    w.n_x = c.integer("wave.n_x");
    w.n_t = c.integer("wave.n_t");
    w.x_max = c.num("wave.x_max");
    w.t_max = c.num("wave.t_max");
    w.speed = c.num("wave.speed");
    w.omega = c.num("wave.omega");
    w.envelope = c.num("wave.envelope");
    w.x0 = c.num("wave.x0");
    if (w.n_x < 2 || w.n_t < 2) throw UsageError("wave grid needs at least 2 points per axis");
    const PointCloudDataset d = make_wave_dataset(w);
    write_pointcloud(ctx.out / "wave.csv", d);
    ctx.log << "wrote " << d.rows() << " rows to " << (ctx.out / "wave.csv").string() << "\n";
}

inline void cmd_train(Context& ctx) {
    const PointCloudDataset train = read_pointcloud(required_path(ctx.cfg, "data.train"));
    std::optional<PointCloudDataset> test;
    if (!ctx.cfg.str("data.test").empty()) {
        test = renormalize(read_pointcloud(ctx.cfg.str("data.test")), train.norm);
        if (!(test->schema == train.schema)) fail(ErrorKind::InvalidInput, "train and test schemas differ");
    }
    auto model = build_model(ctx.cfg, train.schema);
    train_and_save(ctx, *model, train, test ? &*test : nullptr);
}

inline void cmd_eval(Context& ctx) {
    const fs::path mpath = required_path(ctx.cfg, "eval.model");
    const auto model = load_model(mpath);
    PointCloudDataset d = read_pointcloud(required_path(ctx.cfg, "eval.data"));
    fs::path side = mpath;
    side.replace_extension(".norm.json");
    if (fs::exists(side)) {
        std::ifstream js(side);
        nlohmann::json j;
        try {
            js >> j;
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Parse, side.string() + ": " + e.what());
        }
        d = renormalize(d, normalization_from_json(j));
    }
    check_model_matches(*model, d);
    const RmseReport r = rmse_report(*model, d);
    nlohmann::json j;
    j["model"] = to_string(model->kind());
    j["rows"] = d.rows();
    j["loss_normalized"] = dataset_loss(*model, d);
    j["rmse"] = to_json(r);
    write_json(ctx.out / "eval.json", j);
    if (ctx.cfg.flag("eval.predictions")) {
        const Matrix pred = predict(*model, d.inputs());
        const NormalizationSpec out_norm =
            d.norm.empty() ? NormalizationSpec::identity(d.schema.d_out) : d.norm.slice(d.schema.out_offset(), d.schema.d_out);
        const Matrix raw_in = d.norm.empty() ? d.table : d.norm.invert(d.table);
        Matrix rows(d.rows(), d.schema.input_dim() + 2 * d.schema.d_out);
        rows << raw_in.leftCols(d.schema.input_dim()), raw_in.middleCols(d.schema.out_offset(), d.schema.d_out),
            out_norm.invert(pred);
        std::vector<std::string> header;
        for (Index i = 0; i < d.schema.input_dim(); ++i) header.push_back("in" + std::to_string(i));
        for (Index i = 0; i < d.schema.d_out; ++i) header.push_back("target" + std::to_string(i));
        for (Index i = 0; i < d.schema.d_out; ++i) header.push_back("pred" + std::to_string(i));
        write_matrix_csv(ctx.out / "predictions.csv", header, rows);
    }
    ctx.log << "rmse " << r.rmse << " (normalized " << r.rmse_normalized << ")\n";
}

/// Space coordinates (physical units) of the first snapshot, in table order.
inline Matrix snapshot_points(const PointCloudDataset& d, const SnapshotIndex& idx) {
    const Matrix raw = d.norm.empty() ? d.table : d.norm.invert(d.table);
    Matrix p(idx.points_per_snapshot, d.schema.d_space);
    for (Index i = 0; i < idx.points_per_snapshot; ++i)
        p.row(i) = raw.row(idx.rows.front()[static_cast<std::size_t>(i)]).segment(d.schema.space_offset(), d.schema.d_space);
    return p;
}

inline std::vector<std::string> coord_header(Index d) {
    std::vector<std::string> h;
    for (Index i = 0; i < d; ++i) h.push_back("x" + std::to_string(i));
    return h;
}

inline void cmd_pod(Context& ctx) {
    const PointCloudDataset d = read_pointcloud(required_path(ctx.cfg, "data.input"));
    const ColMatrix u = snapshot_matrix(d, ctx.cfg.integer("pod.output"));
    const Index r = ctx.cfg.integer("pod.rank");
    if (r < 0 || r > std::min(u.rows(), u.cols()))
        throw UsageError("pod.rank must be in [0, " + std::to_string(std::min(u.rows(), u.cols())) + "]");
    const PodResult p = pod(u, r);
    const Matrix pts = snapshot_points(d, snapshot_index(d));
    auto header = coord_header(pts.cols());
    for (Index i = 0; i < r; ++i) header.push_back("mode" + std::to_string(i));
    Matrix modes(pts.rows(), pts.cols() + r);
    modes << pts, p.basis.Psi;
    write_matrix_csv(ctx.out / "pod_modes.csv", header, modes);
    std::vector<std::string> ch;
    for (Index i = 0; i < r; ++i) ch.push_back("a" + std::to_string(i));
    write_matrix_csv(ctx.out / "pod_coeffs.csv", ch, Matrix(p.coeffs.transpose()));
    nlohmann::json j;
    j["rank"] = r;
    j["snapshot_shape"] = {u.rows(), u.cols()};
    j["singular_values"] = std::vector<double>(p.all_sigma.data(), p.all_sigma.data() + p.all_sigma.size());
    j["residual_fro2"] = p.residual;
    j["tail_energy"] = p.tail_energy;
    j["relative_residual"] = std::sqrt(p.residual / u.squaredNorm());
    write_json(ctx.out / "pod.json", j);
    ctx.log << "POD rank " << r << ": relative residual " << j["relative_residual"].get<double>() << "\n";
}

inline void cmd_qdeim(Context& ctx) {
    const PointCloudDataset d = read_pointcloud(required_path(ctx.cfg, "data.input"));
    const ColMatrix u = snapshot_matrix(d, ctx.cfg.integer("qdeim.output"));
    const Index r = ctx.cfg.integer("qdeim.rank");
    if (r < 1 || r > std::min(u.rows(), u.cols()))
        throw UsageError("qdeim.rank must be in [1, " + std::to_string(std::min(u.rows(), u.cols())) + "]");
    const PodResult p = pod(u, r);
    const QdeimSelection sel = qdeim_select(p.basis.Psi, r);
    ColMatrix y(r, u.cols());
    for (Index i = 0; i < r; ++i) y.row(i) = u.row(sel.indices[static_cast<std::size_t>(i)]);
    const ColMatrix rec = deim_reconstruct(sel, p.basis.Psi, y);
    const Matrix pts = snapshot_points(d, snapshot_index(d));
    nlohmann::json j;
    j["rank"] = r;
    j["sensors"] = sel.indices;
    nlohmann::json coords = nlohmann::json::array();
    for (Index g : sel.indices) {
        std::vector<double> x(static_cast<std::size_t>(pts.cols()));
        for (Index c = 0; c < pts.cols(); ++c) x[static_cast<std::size_t>(c)] = pts(g, c);
        coords.push_back(x);
    }
    j["sensor_coordinates"] = coords;
    j["reconstruction_relative_error"] = (rec - u).norm() / u.norm();
    j["pod_projection_relative_error"] = std::sqrt(p.residual) / u.norm();
    write_json(ctx.out / "qdeim.json", j);
    ctx.log << "QDEIM " << r << " sensors, reconstruction error " << j["reconstruction_relative_error"].get<double>()
            << "\n";
}

inline void cmd_sparse_sense(Context& ctx) {
    const PointCloudDataset d = read_pointcloud(required_path(ctx.cfg, "data.input"));
    const Index out = ctx.cfg.integer("sense.output");
    std::vector<Index> sensors = ctx.cfg.integers("sense.sensors");
    if (sensors.empty()) {
        const ColMatrix u = snapshot_matrix(d, out);
        const Index r = ctx.cfg.integer("sense.rank");
        if (r < 1 || r > std::min(u.rows(), u.cols()))
            throw UsageError("sense.rank must be in [1, " + std::to_string(std::min(u.rows(), u.cols())) + "]");
        sensors = qdeim_select(pod(u, r).basis.Psi, r).indices;
    }
    const PointCloudDataset s = nif_sparse_sensing_build(sensors, d, out);
    write_pointcloud(ctx.out / "sparse.csv", s);
    write_json(ctx.out / "sensors.json", nlohmann::json{{"sensors", sensors}});
    auto model = build_model(ctx.cfg, s.schema);
    train_and_save(ctx, *model, s, nullptr);
}

inline void cmd_dmd(Context& ctx) {
    const auto loaded = load_model(required_path(ctx.cfg, "dmd.model"));
    const auto* nif = dynamic_cast<const NifModel*>(loaded.get());
    if (!nif || nif->kind() != ModelKind::NifLastLayer) throw UsageError("dmd needs a nif-lastlayer checkpoint");
    PointCloudDataset d = read_pointcloud(required_path(ctx.cfg, "dmd.data"));
    fs::path side = ctx.cfg.str("dmd.model");
    side.replace_extension(".norm.json");
    if (fs::exists(side)) {
        std::ifstream js(side);
        nlohmann::json j;
        js >> j;
        d = renormalize(d, normalization_from_json(j));
    }
    check_model_matches(*nif, d);
    const SnapshotIndex idx = snapshot_index(d);
    const Index mt = static_cast<Index>(idx.rows.size());
    Matrix cond(mt, d.schema.cond_dim());
    for (Index k = 0; k < mt; ++k) cond.row(k) = d.table.row(idx.rows[static_cast<std::size_t>(k)].front()).head(d.schema.cond_dim());
    const ColMatrix a = nif->latent(cond).transpose();

    Matrix qp(idx.points_per_snapshot, d.schema.d_space);
    for (Index i = 0; i < idx.points_per_snapshot; ++i)
        qp.row(i) = d.table.row(idx.rows.front()[static_cast<std::size_t>(i)]).segment(d.schema.space_offset(), d.schema.d_space);
    const Vector extent = qp.colwise().maxCoeff() - qp.colwise().minCoeff();
    double measure = 1.0;
    for (Index j = 0; j < extent.size(); ++j) measure *= extent(j) > 0.0 ? extent(j) : 1.0;
    const Vector w = Vector::Constant(qp.rows(), measure / static_cast<double>(qp.rows()));
    const NormalizedModes nm = nif_modes_normalize(*nif, qp, w, a);

    double dt = ctx.cfg.num("dmd.dt");
    if (dt <= 0.0) {
        if (d.schema.d_time == 1 && mt >= 2) {
            const Matrix raw = d.norm.empty() ? d.table : d.norm.invert(d.table);
            const Index tc = d.schema.d_param;
            dt = raw(idx.rows[1].front(), tc) - raw(idx.rows[0].front(), tc);
        }
        if (!(dt > 0.0)) dt = 1.0;
    }
    Index rank = ctx.cfg.integer("dmd.rank");
    if (rank <= 0) rank = nm.rank();
    if (rank > nm.rank()) throw UsageError("dmd.rank exceeds the latent dimension " + std::to_string(nm.rank()));
    const DmdResult res = dmd(nm.zeta, dt, rank);
    for (const auto& wmsg : res.warnings) ctx.log << "warning: " << wmsg << "\n";

    nlohmann::json j = to_json(res);
    j["normalization_constants"] = std::vector<double>(nm.c.data(), nm.c.data() + nm.c.size());
    write_json(ctx.out / "dmd.json", j);

    std::vector<std::string> lh{"snapshot"};
    for (Index i = 0; i < nm.rank(); ++i) lh.push_back("zeta" + std::to_string(i));
    Matrix lat(mt, nm.rank() + 1);
    for (Index k = 0; k < mt; ++k) {
        lat(k, 0) = static_cast<double>(k);
        lat.row(k).tail(nm.rank()) = nm.zeta.col(k).transpose();
    }
    write_matrix_csv(ctx.out / "latent.csv", lh, lat);

    // mode fields on a uniform grid spanning the data (normalized coordinates)
    const Index g = ctx.cfg.integer("dmd.grid");
    if (g < 2) throw UsageError("dmd.grid must be >= 2");
    Matrix grid;
    if (d.schema.d_space == 1) {
        grid.resize(g, 1);
        const double lo = qp.col(0).minCoeff(), hi = qp.col(0).maxCoeff();
        for (Index i = 0; i < g; ++i) grid(i, 0) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(g - 1);
    } else if (d.schema.d_space == 2) {
        grid.resize(g * g, 2);
        const double x0 = qp.col(0).minCoeff(), x1 = qp.col(0).maxCoeff();
        const double y0 = qp.col(1).minCoeff(), y1 = qp.col(1).maxCoeff();
        for (Index i = 0; i < g; ++i)
            for (Index k = 0; k < g; ++k) {
                grid(i * g + k, 0) = x0 + (x1 - x0) * static_cast<double>(i) / static_cast<double>(g - 1);
                grid(i * g + k, 1) = y0 + (y1 - y0) * static_cast<double>(k) / static_cast<double>(g - 1);
            }
    } else {
        grid = qp;
    }
    const CMatrix fields = dmd_mode_field(res, nm, grid);
    Matrix phys = grid;
    if (!d.norm.empty())
        for (Index c = 0; c < grid.cols(); ++c)
            for (Index i = 0; i < grid.rows(); ++i)
                phys(i, c) = d.norm.columns[static_cast<std::size_t>(d.schema.space_offset() + c)].invert(grid(i, c));
    write_complex_fields_csv(ctx.out / "dmd_modes.csv", phys, fields);
    ctx.log << "DMD rank " << res.rank << ", " << res.eigenvalues.size() << " eigenvalues\n";
}

inline void cmd_bench_query(Context& ctx) {
    const auto loaded = load_model(required_path(ctx.cfg, "bench.model"));
    const auto* nif = dynamic_cast<const NifModel*>(loaded.get());
    if (!nif) throw UsageError("bench-query needs a NIF checkpoint");
    std::unique_ptr<Model> mono;
    if (!ctx.cfg.str("bench.baseline").empty()) {
        mono = load_model(ctx.cfg.str("bench.baseline"));
    } else {
        mono = std::make_unique<MlpModel>(monolithic_siren_config(nif->config(), ctx.cfg.num("bench.width_factor")),
                                          nif->cond_dim());
        Rng rng(ctx.seed);
        mono->init(rng);
    }
    const auto cond = condition_values(ctx.cfg.str("bench.condition"), nif->cond_dim());
    const Index n = ctx.cfg.integer("bench.points");
    const Index reps = ctx.cfg.integer("bench.repeats");
    if (n < 0 || reps < 1) throw UsageError("bench.points must be >= 0 and bench.repeats >= 1");
    const QueryBenchReport rep = run_benchmark(*nif, *mono, cond, n, reps, ctx.seed);
    nlohmann::json j = to_json(rep);
    j["config"] = ctx.cfg.to_json();
    j["baseline_trained"] = !ctx.cfg.str("bench.baseline").empty();
    write_json(ctx.out / "bench_query.json", j);
    for (const auto& e : rep.entries)
        ctx.log << e.name << ": width " << e.width << ", " << e.flops_forward << " flops/pt fwd, "
                << e.ns_per_point_forward << " ns/pt fwd, " << e.ns_per_point_gradient << " ns/pt grad\n";
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline std::string usage_text() {
    std::string s = "usage: nifkit <subcommand> [--config PATH] [--set key=value]... [--seed N] [--out DIR]\n"
                    "subcommands:";
    for (const auto& c : subcommands()) s += " " + c;
    return s + "\nNIFKIT_THREADS caps the worker count.\n";
}

inline int exit_code_for(const Error& e) { return e.kind() == ErrorKind::Divergence ? kDivergence : kData; }

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    if (args.empty() || args[0] == "-h" || args[0] == "--help") {
        (args.empty() ? err : out) << usage_text();
        return args.empty() ? kUsage : kOk;
    }
    const std::string cmd = args[0];
    try {
        RunConfig cfg(defaults_for(cmd));
        CLI::App app{"nifkit " + cmd};
        std::string config_path, out_dir = ".";
        std::vector<std::string> sets;
        std::optional<std::uint64_t> seed;
        app.add_option("--config", config_path, "key=value or JSON config file");
        app.add_option("--set", sets, "override one config key (key=value)");
        app.add_option("--seed", seed, "random seed (overrides config)");
        app.add_option("--out", out_dir, "output directory");
        std::vector<std::string> rest(args.begin() + 1, args.end());
        std::reverse(rest.begin(), rest.end());
        try {
            app.parse(rest);
        } catch (const CLI::ParseError& e) {
            if (e.get_exit_code() == 0) {
                out << app.help() << usage_text();
                return kOk;
            }
            throw UsageError(e.what());
        }
        if (!config_path.empty()) {
            std::ifstream is(config_path);
            if (!is) throw UsageError("cannot read config file '" + config_path + "'");
            std::stringstream ss;
            ss << is.rdbuf();
            cfg.merge(parse_config_text(ss.str(), config_path), config_path);
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
            cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
        }
        if (seed) cfg.set("seed", std::to_string(*seed));
        if (const char* t = std::getenv("NIFKIT_THREADS")) {
            char* end = nullptr;
            const long n = std::strtol(t, &end, 10);
            if (!end || *end != '\0' || n < 1) throw UsageError("NIFKIT_THREADS must be a positive integer");
            Eigen::setNbThreads(static_cast<int>(n));
        }

        Context ctx{cfg, out_dir, static_cast<std::uint64_t>(cfg.integer("seed")), out};
        fs::create_directories(ctx.out);
        write_text(ctx.out / ("config." + cmd + ".txt"), cfg.dump());

        if (cmd == "gen-ks") cmd_gen_ks(ctx);
        else if (cmd == "gen-wave") cmd_gen_wave(ctx);
        else if (cmd == "train") cmd_train(ctx);
        else if (cmd == "eval") cmd_eval(ctx);
        else if (cmd == "pod") cmd_pod(ctx);
        else if (cmd == "qdeim") cmd_qdeim(ctx);
        else if (cmd == "sparse-sense") cmd_sparse_sense(ctx);
        else if (cmd == "dmd") cmd_dmd(ctx);
        else if (cmd == "bench-query") cmd_bench_query(ctx);
        return kOk;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n" << usage_text();
        return kUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kData;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kData;
    }
}

}  // namespace nifkit::cli
