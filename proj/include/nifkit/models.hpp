#pragma once

// Trainable models: NIF (ParameterNet -> ShapeNet) and the baselines (plain
// MLP, monolithic SIREN, DeepONet, Fourier-feature MLP). Every model maps rows
// [cond | space] of a point-cloud table to outputs and exposes a flat
// parameter vector plus reverse-mode gradients.

#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "nifkit/nets.hpp"

namespace nifkit {

// ---------------------------------------------------------------------------
// Configurations
// ---------------------------------------------------------------------------

/// Coordinate network: d_in -> width, n_blocks x (width -> width -> width),
/// width -> d_out (linear). Also used for the plain MLP and monolithic SIREN
/// baselines.
struct ShapeNetConfig {
    Index d_in = 1;
    Index width = 16;
    Index n_blocks = 1;
    Index d_out = 1;
    Activation act{ActKind::Swish, 30.0};
    BlockStyle style = BlockStyle::ResNetHalfSum;

    Chain chain() const {
        Chain c;
        c.style = style;
        c.layers.push_back({d_in, width, act});
        for (Index b = 0; b < n_blocks; ++b) {
            c.layers.push_back({width, width, act});
            c.layers.push_back({width, width, act});
        }
        c.layers.push_back({width, d_out, Activation::identity()});
        return c;
    }

    void validate() const {
        require(d_in >= 1 && d_out >= 1 && width >= 1 && n_blocks >= 0, "shape net dims must be positive");
        act.validate();
    }

    bool operator==(const ShapeNetConfig&) const = default;
};

enum class NifMode { Full, LastLayer };

inline const char* to_string(NifMode m) { return m == NifMode::Full ? "full" : "lastlayer"; }

/// d_in -> hidden... (act) -> bottleneck r (linear) -> output (linear).
struct ParameterNetConfig {
    Index d_in = 1;
    std::vector<Index> hidden{30, 30};
    Index bottleneck = 1;
    Activation act{ActKind::Swish, 30.0};
    NifMode target = NifMode::Full;

    bool operator==(const ParameterNetConfig&) const = default;
};

struct NifConfig {
    ShapeNetConfig shape;
    ParameterNetConfig pnet;
    /// LastLayer mode only: whether ParameterNet also produces the output bias.
    bool last_layer_bias = true;

    Chain shape_chain() const { return shape.chain(); }

    /// Layers whose parameters ParameterNet produces.
    std::vector<DenseShape> hyper_layers() const {
        const Chain c = shape_chain();
        if (pnet.target == NifMode::Full) return c.layers;
        return {c.layers.back()};
    }
    FlatParamLayout hyper_layout() const {
        const auto h = hyper_layers();
        return FlatParamLayout::of(h, pnet.target == NifMode::Full || last_layer_bias);
    }
    /// Width of ParameterNet's output.
    Index hyper_size() const { return hyper_layout().total; }
    /// Flat ShapeNet parameter count m.
    Index shape_param_count() const { return shape_chain().param_count(); }

    /// ParameterNet including the output layer.
    Chain pnet_chain() const {
        Chain c;
        Index in = pnet.d_in;
        for (Index h : pnet.hidden) {
            c.layers.push_back({in, h, pnet.act});
            in = h;
        }
        c.layers.push_back({in, pnet.bottleneck, Activation::identity()});
        c.layers.push_back({pnet.bottleneck, hyper_size(), Activation::identity()});
        return c;
    }
    /// ParameterNet up to and including the bottleneck.
    Chain trunk_chain() const {
        Chain c = pnet_chain();
        c.layers.pop_back();
        return c;
    }
    /// ShapeNet layers trained directly (LastLayer mode: all but the last).
    Chain static_chain() const {
        Chain c;
        if (pnet.target == NifMode::Full) return c;
        c = shape_chain();
        c.layers.pop_back();
        return c;
    }

    Index theta_count() const {
        return FlatParamLayout::of(pnet_chain().layers).total;
    }
    Index static_count() const { return static_chain().param_count(); }
    Index total_count() const { return theta_count() + static_count(); }

    void validate() const {
        shape.validate();
        pnet.act.validate();
        require(pnet.d_in >= 1 && pnet.bottleneck >= 1, "parameter net dims must be positive");
        for (Index h : pnet.hidden) require(h >= 1, "parameter net hidden widths must be positive");
        if (pnet.target == NifMode::LastLayer)
            require(shape.width == pnet.bottleneck,
                    "last-layer mode needs ShapeNet width == ParameterNet bottleneck (r features)");
    }

    bool operator==(const NifConfig&) const = default;
};

/// branch: cond -> ... -> K+1 (last layer linear); trunk: space -> ... -> K
/// (activation on every layer). u = sum_k branch_k * trunk_k + branch_{K+1}.
struct DeepONetConfig {
    std::vector<Index> branch{1, 30, 30, 17};
    std::vector<Index> trunk{1, 30, 30, 16};
    Activation act{ActKind::Swish, 30.0};

    Chain branch_chain() const {
        Chain c;
        for (std::size_t i = 0; i + 1 < branch.size(); ++i)
            c.layers.push_back({branch[i], branch[i + 1], i + 2 == branch.size() ? Activation::identity() : act});
        return c;
    }
    Chain trunk_chain() const {
        Chain c;
        for (std::size_t i = 0; i + 1 < trunk.size(); ++i) c.layers.push_back({trunk[i], trunk[i + 1], act});
        return c;
    }
    Index param_count() const { return branch_chain().param_count() + trunk_chain().param_count(); }

    void validate() const {
        require(branch.size() >= 2 && trunk.size() >= 2, "deeponet nets need at least one layer");
        require(branch.back() == trunk.back() + 1, "deeponet branch output must be trunk output + 1");
        for (Index w : branch) require(w >= 1, "deeponet widths must be positive");
        for (Index w : trunk) require(w >= 1, "deeponet widths must be positive");
        act.validate();
    }

    bool operator==(const DeepONetConfig&) const = default;
};

/// gamma(v) = [cos(2 pi B v), sin(2 pi B v)], B (n_features x d_in) frozen,
/// followed by an MLP whose d_in is 2 n_features.
struct FourierFeatureConfig {
    Index d_in = 2;
    Index n_features = 16;
    double sigma = 1.0;
    ShapeNetConfig mlp{};

    ShapeNetConfig resolved_mlp() const {
        ShapeNetConfig m = mlp;
        m.d_in = 2 * n_features;
        return m;
    }
    Index param_count() const { return resolved_mlp().chain().param_count(); }

    void validate() const {
        require(d_in >= 1 && n_features >= 1 && sigma >= 0.0, "fourier feature config invalid");
        resolved_mlp().validate();
    }

    bool operator==(const FourierFeatureConfig&) const = default;
};

inline Index count_params(const ShapeNetConfig& c) { return c.chain().param_count(); }
inline Index count_params(const NifConfig& c) { return c.total_count(); }
inline Index count_params(const DeepONetConfig& c) { return c.param_count(); }
inline Index count_params(const FourierFeatureConfig& c) { return c.param_count(); }

// ---------------------------------------------------------------------------
// Hypernetwork layers
// ---------------------------------------------------------------------------

/// Gradient sinks for HyperAffine::backward; empty spans are skipped.
struct HyperGrads {
    std::span<double> head_w;   // m x r column-major
    std::span<double> head_b;   // m
    std::span<double> static_p;
    Matrix* dzeta = nullptr;    // rows x r
};

/// ShapeNet affine source where some layers take their parameters from the
/// linear ParameterNet head, theta(zeta) = A zeta + c, with zeta the per-row
/// bottleneck code. Because the head is linear in zeta, each hyper layer is
/// evaluated as (r + 1) shared products instead of materializing per-row
/// weights:  z = s (h W_c^T + sum_s zeta_s (h W_s^T)) + b_c + zeta B^T.
class HyperAffine final : public AffineSource {
public:

    HyperAffine(const NifConfig& cfg, const Chain& shape, const FlatParamLayout& hyper_layout,
                const FlatParamLayout& static_layout, std::span<const double> head_w,
                std::span<const double> head_b, std::span<const double> static_p, const Matrix& zeta,
                HyperGrads grads = {})
        : shape_(shape),
          hyper_(hyper_layout),
          static_layout_(static_layout),
          head_w_(head_w),
          head_b_(head_b),
          static_p_(static_p),
          zeta_(zeta),
          g_(grads),
          r_(cfg.pnet.bottleneck),
          m_(hyper_layout.total),
          first_hyper_(cfg.pnet.target == NifMode::Full ? 0 : shape.layers.size() - 1) {
        if (g_.dzeta) *g_.dzeta = Matrix::Zero(zeta.rows(), r_);
    }

    Matrix forward(std::size_t l, const Matrix& h, LayerCache& cache) const override {
        if (l < first_hyper_) return static_forward(l, h);
        const std::size_t hl = l - first_hyper_;
        const double s = shape_.layers[l].act.input_scale();
        const Index out = shape_.layers[l].out;
        Matrix z(h.rows(), out);
        z.noalias() = h * hyper_.weight(head_b_, hl).transpose();
        cache.products.assign(static_cast<std::size_t>(r_), Matrix());
        for (Index k = 0; k < r_; ++k) {
            Matrix& g = cache.products[static_cast<std::size_t>(k)];
            g.resize(h.rows(), out);
            g.noalias() = h * hyper_.weight(column(head_w_, k), hl).transpose();
            z.noalias() += zeta_.col(k).asDiagonal() * g;
        }
        if (s != 1.0) z *= s;
        if (hyper_.biases[hl].rows > 0) {
            z.rowwise() += hyper_.bias(head_b_, hl).transpose();
            for (Index k = 0; k < r_; ++k)
                z.noalias() += zeta_.col(k) * hyper_.bias(column(head_w_, k), hl).transpose();
        }
        return z;
    }

    Matrix backward(std::size_t l, const Matrix& h, const Matrix& dz, const LayerCache& cache,
                    bool want_dh) override {
        if (l < first_hyper_) return static_backward(l, h, dz, want_dh);
        const std::size_t hl = l - first_hyper_;
        const double s = shape_.layers[l].act.input_scale();
        const Segment& ws = hyper_.weights[hl];
        const Segment& bs = hyper_.biases[hl];
        const bool has_bias = bs.rows > 0;

        Matrix dh;
        if (want_dh) {
            dh.resize(h.rows(), h.cols());
            dh.noalias() = dz * hyper_.weight(head_b_, hl);
        }
        if (!g_.head_b.empty()) {
            ColMap(g_.head_b.data() + ws.offset, ws.rows, ws.cols).noalias() += s * (dz.transpose() * h);
            if (has_bias) Eigen::Map<Vector>(g_.head_b.data() + bs.offset, bs.rows) += dz.colwise().sum().transpose();
        }
        Matrix dzk(dz.rows(), dz.cols());
        for (Index k = 0; k < r_; ++k) {
            dzk.noalias() = zeta_.col(k).asDiagonal() * dz;
            if (want_dh) dh.noalias() += dzk * hyper_.weight(column(head_w_, k), hl);
            if (!g_.head_w.empty()) {
                double* gk = g_.head_w.data() + k * m_;
                ColMap(gk + ws.offset, ws.rows, ws.cols).noalias() += s * (dzk.transpose() * h);
                if (has_bias) Eigen::Map<Vector>(gk + bs.offset, bs.rows) += dzk.colwise().sum().transpose();
            }
            if (g_.dzeta) {
                auto col = g_.dzeta->col(k);
                col += s * (dz.array() * cache.products[static_cast<std::size_t>(k)].array()).rowwise().sum().matrix();
                if (has_bias) col.noalias() += dz * hyper_.bias(column(head_w_, k), hl);
            }
        }
        if (want_dh && s != 1.0) dh *= s;
        return dh;
    }

private:
    std::span<const double> column(std::span<const double> w, Index k) const {
        return w.subspan(static_cast<std::size_t>(k * m_), static_cast<std::size_t>(m_));
    }

    Matrix static_forward(std::size_t l, const Matrix& h) const {
        const double s = shape_.layers[l].act.input_scale();
        Matrix z(h.rows(), shape_.layers[l].out);
        z.noalias() = h * static_layout_.weight(static_p_, l).transpose();
        if (s != 1.0) z *= s;
        z.rowwise() += static_layout_.bias(static_p_, l).transpose();
        return z;
    }

    Matrix static_backward(std::size_t l, const Matrix& h, const Matrix& dz, bool want_dh) {
        const double s = shape_.layers[l].act.input_scale();
        if (!g_.static_p.empty()) {
            const Segment& ws = static_layout_.weights[l];
            const Segment& bs = static_layout_.biases[l];
            ColMap(g_.static_p.data() + ws.offset, ws.rows, ws.cols).noalias() += s * (dz.transpose() * h);
            Eigen::Map<Vector>(g_.static_p.data() + bs.offset, bs.rows) += dz.colwise().sum().transpose();
        }
        if (!want_dh) return {};
        Matrix dh(h.rows(), h.cols());
        dh.noalias() = s * (dz * static_layout_.weight(static_p_, l));
        return dh;
    }

    const Chain& shape_;
    const FlatParamLayout& hyper_;
    const FlatParamLayout& static_layout_;
    std::span<const double> head_w_;
    std::span<const double> head_b_;
    std::span<const double> static_p_;
    const Matrix& zeta_;
    HyperGrads g_;
    Index r_;
    Index m_;
    std::size_t first_hyper_;
};

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

enum class ModelKind { NifFull, NifLastLayer, Mlp, Siren, DeepONet, Fourier };

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::NifFull: return "nif-full";
        case ModelKind::NifLastLayer: return "nif-lastlayer";
        case ModelKind::Mlp: return "mlp";
        case ModelKind::Siren: return "siren";
        case ModelKind::DeepONet: return "deeponet";
        case ModelKind::Fourier: return "fourier";
    }
    return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
    for (ModelKind k : {ModelKind::NifFull, ModelKind::NifLastLayer, ModelKind::Mlp, ModelKind::Siren,
                        ModelKind::DeepONet, ModelKind::Fourier})
        if (s == to_string(k)) return k;
    fail(ErrorKind::InvalidInput, "unknown model '" + std::string(s) + "'");
}

/// Whatever a model needs to keep between forward and backward.
struct Tape {
    std::vector<ChainTape> chains;
    std::vector<Matrix> mats;
};

class Model {
public:
    virtual ~Model() = default;

    virtual ModelKind kind() const = 0;
    virtual Index cond_dim() const = 0;
    virtual Index space_dim() const = 0;
    virtual Index out_dim() const = 0;
    Index input_dim() const { return cond_dim() + space_dim(); }

    ParamVector& params() { return params_; }
    const ParamVector& params() const { return params_; }
    Index param_count() const { return static_cast<Index>(params_.size()); }

    /// Rows [cond | space] -> outputs.
    virtual Matrix forward(const Matrix& x, Tape* tape = nullptr) const = 0;

    /// Accumulates dL/dparams into `grad` and returns dL/dx.
    virtual Matrix backward(const Matrix& x, const Tape& tape, const Matrix& dy, std::span<double> grad) const = 0;

    virtual void init(Rng& rng) = 0;
    virtual std::unique_ptr<Model> clone() const = 0;

protected:
    void check_input(const Matrix& x) const {
        require(x.cols() == input_dim(), std::string(to_string(kind())) + ": input has " + std::to_string(x.cols()) +
                                             " columns, expected " + std::to_string(input_dim()));
    }

    ParamVector params_;
};

// ---------------------------------------------------------------------------
// NIF
// ---------------------------------------------------------------------------

/// Trainables are [Theta | static ShapeNet params]; Theta uses the
/// FlatParamLayout of the ParameterNet chain (its last weight segment is the
/// m x r head A, its last bias segment the head offset c).
class NifModel final : public Model {
public:
    explicit NifModel(NifConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        shape_ = cfg_.shape_chain();
        pnet_ = cfg_.pnet_chain();
        trunk_ = cfg_.trunk_chain();
        static_ = cfg_.static_chain();
        pnet_layout_ = pnet_.layout();
        hyper_layout_ = cfg_.hyper_layout();
        static_layout_ = FlatParamLayout::of(static_.layers);
        shape_layout_ = shape_.layout();
        theta_count_ = pnet_layout_.total;
        params_.assign(static_cast<std::size_t>(theta_count_ + static_layout_.total), 0.0);
    }

    const NifConfig& config() const { return cfg_; }
    const Chain& shape_chain() const { return shape_; }
    const Chain& pnet_chain() const { return pnet_; }
    const FlatParamLayout& shape_layout() const { return shape_layout_; }
    const FlatParamLayout& hyper_layout() const { return hyper_layout_; }
    Index theta_count() const { return theta_count_; }
    Index latent_dim() const { return cfg_.pnet.bottleneck; }

    ModelKind kind() const override {
        return cfg_.pnet.target == NifMode::Full ? ModelKind::NifFull : ModelKind::NifLastLayer;
    }
    Index cond_dim() const override { return cfg_.pnet.d_in; }
    Index space_dim() const override { return cfg_.shape.d_in; }
    Index out_dim() const override { return cfg_.shape.d_out; }

    std::span<const double> theta() const { return {params_.data(), static_cast<std::size_t>(theta_count_)}; }
    std::span<const double> static_params() const {
        return {params_.data() + theta_count_, static_cast<std::size_t>(static_layout_.total)};
    }
    std::span<const double> head_weight() const { return segment(pnet_layout_.weights.back()); }
    std::span<const double> head_bias() const { return segment(pnet_layout_.biases.back()); }
    std::span<double> head_weight_mut() { return segment_mut(pnet_layout_.weights.back()); }
    std::span<double> head_bias_mut() { return segment_mut(pnet_layout_.biases.back()); }

    /// Bottleneck codes zeta for condition rows.
    Matrix latent(const Matrix& cond, ChainTape* tape = nullptr) const {
        StaticAffine src(pnet_, pnet_layout_, theta());
        return run_chain(trunk_, src, cond, tape);
    }

    /// ParameterNet output per row (width = hyper size).
    Matrix hyper_output(const Matrix& zeta) const {
        const ConstColMap a(head_weight().data(), hyper_layout_.total, latent_dim());
        const Eigen::Map<const Vector> c(head_bias().data(), hyper_layout_.total);
        Matrix out(zeta.rows(), hyper_layout_.total);
        out.noalias() = zeta * a.transpose();
        out.rowwise() += c.transpose();
        return out;
    }

    /// Full ShapeNet flat parameters (length m) per row: in LastLayer mode the
    /// hidden segments are the static parameters.
    Matrix shape_params(const Matrix& zeta) const {
        const Matrix hyper = hyper_output(zeta);
        if (cfg_.pnet.target == NifMode::Full) return hyper;
        Matrix out(zeta.rows(), shape_layout_.total);
        const std::size_t L = shape_.layers.size();
        for (Index r = 0; r < zeta.rows(); ++r) {
            for (std::size_t l = 0; l + 1 < L; ++l) {
                const Segment& dw = shape_layout_.weights[l];
                const Segment& db = shape_layout_.biases[l];
                const Segment& sw = static_layout_.weights[l];
                const Segment& sb = static_layout_.biases[l];
                for (Index i = 0; i < dw.size(); ++i) out(r, dw.offset + i) = static_params()[sw.offset + i];
                for (Index i = 0; i < db.size(); ++i) out(r, db.offset + i) = static_params()[sb.offset + i];
            }
            const Segment& dw = shape_layout_.weights[L - 1];
            const Segment& db = shape_layout_.biases[L - 1];
            for (Index i = 0; i < dw.size(); ++i) out(r, dw.offset + i) = hyper(r, hyper_layout_.weights[0].offset + i);
            for (Index i = 0; i < db.size(); ++i)
                out(r, db.offset + i) = hyper_layout_.biases[0].rows > 0 ? hyper(r, hyper_layout_.biases[0].offset + i) : 0.0;
        }
        return out;
    }

    /// ShapeNet input to the last layer (the features phi_i in LastLayer mode).
    Matrix features(const Matrix& space) const {
        require(cfg_.pnet.target == NifMode::LastLayer, "features: only defined in last-layer mode");
        require(space.cols() == space_dim(), "features: wrong number of space columns");
        const Matrix zeta = Matrix::Zero(space.rows(), latent_dim());
        HyperAffine src(cfg_, shape_, hyper_layout_, static_layout_, head_weight(), head_bias(), static_params(),
                        zeta);
        ChainTape t;
        run_chain(shape_, src, space, &t);
        return t.in.back();
    }

    Matrix forward(const Matrix& x, Tape* tape = nullptr) const override {
        check_input(x);
        Tape local;
        Tape& t = tape ? *tape : local;
        t.chains.assign(2, ChainTape());
        t.mats.assign(1, Matrix());
        t.mats[0] = latent(x.leftCols(cond_dim()), &t.chains[0]);
        HyperAffine src(cfg_, shape_, hyper_layout_, static_layout_, head_weight(), head_bias(), static_params(),
                        t.mats[0]);
        return run_chain(shape_, src, x.rightCols(space_dim()), &t.chains[1]);
    }

    Matrix backward(const Matrix& x, const Tape& t, const Matrix& dy, std::span<double> grad) const override {
        require(static_cast<Index>(grad.size()) == param_count(), "nif backward: gradient has wrong length");
        const Matrix& zeta = t.mats[0];
        Matrix dzeta;
        HyperGrads g;
        const Segment& hw = pnet_layout_.weights.back();
        const Segment& hb = pnet_layout_.biases.back();
        g.head_w = grad.subspan(static_cast<std::size_t>(hw.offset), static_cast<std::size_t>(hw.size()));
        g.head_b = grad.subspan(static_cast<std::size_t>(hb.offset), static_cast<std::size_t>(hb.size()));
        g.static_p = grad.subspan(static_cast<std::size_t>(theta_count_));
        g.dzeta = &dzeta;
        HyperAffine src(cfg_, shape_, hyper_layout_, static_layout_, head_weight(), head_bias(), static_params(),
                        zeta, g);
        const Matrix dspace = backprop_chain(shape_, src, t.chains[1], dy, true);
        StaticAffine trunk_src(pnet_, pnet_layout_, theta(), grad.first(static_cast<std::size_t>(theta_count_)));
        const Matrix dcond = backprop_chain(trunk_, trunk_src, t.chains[0], dzeta, true);
        Matrix dx(x.rows(), input_dim());
        dx.leftCols(cond_dim()) = dcond;
        dx.rightCols(space_dim()) = dspace;
        return dx;
    }

    /// Trunk layers by the ParameterNet activation rule; head weights by the
    /// same rule scaled by 1e-2; head offset drawn as a ShapeNet
    /// initialization of the generated segments; static layers as ShapeNet.
    void init(Rng& rng) override {
        std::span<double> p(params_);
        for (std::size_t l = 0; l < trunk_.layers.size(); ++l)
            init_layer(rng, cfg_.pnet.act, pnet_.layers[l], l == 0, p.data() + pnet_layout_.weights[l].offset,
                       p.data() + pnet_layout_.biases[l].offset);
        init_layer(rng, cfg_.pnet.act, pnet_.layers.back(), false, head_weight_mut().data(), nullptr,
                   kHyperHeadScale);
        const auto hyper_layers = cfg_.hyper_layers();
        const std::size_t first = cfg_.pnet.target == NifMode::Full ? 0 : shape_.layers.size() - 1;
        std::span<double> c = head_bias_mut();
        for (std::size_t hl = 0; hl < hyper_layers.size(); ++hl) {
            const bool has_b = hyper_layout_.biases[hl].rows > 0;
            init_layer(rng, cfg_.shape.act, hyper_layers[hl], first + hl == 0,
                       c.data() + hyper_layout_.weights[hl].offset,
                       has_b ? c.data() + hyper_layout_.biases[hl].offset : nullptr);
        }
        for (std::size_t l = 0; l < static_.layers.size(); ++l)
            init_layer(rng, cfg_.shape.act, static_.layers[l], l == 0,
                       p.data() + theta_count_ + static_layout_.weights[l].offset,
                       p.data() + theta_count_ + static_layout_.biases[l].offset);
    }

    std::unique_ptr<Model> clone() const override { return std::make_unique<NifModel>(*this); }

private:
    std::span<const double> segment(const Segment& s) const {
        return {params_.data() + s.offset, static_cast<std::size_t>(s.size())};
    }
    std::span<double> segment_mut(const Segment& s) {
        return {params_.data() + s.offset, static_cast<std::size_t>(s.size())};
    }

    NifConfig cfg_;
    Chain shape_, pnet_, trunk_, static_;
    FlatParamLayout pnet_layout_, hyper_layout_, static_layout_, shape_layout_;
    Index theta_count_ = 0;
};

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Plain coordinate MLP on all input columns; kind Siren when the activation
/// is sine.
class MlpModel final : public Model {
public:
    MlpModel(ShapeNetConfig cfg, Index cond_dim) : cfg_(cfg), cond_dim_(cond_dim) {
        cfg_.validate();
        require(cond_dim >= 0 && cond_dim < cfg_.d_in, "mlp: cond_dim must leave at least one space column");
        chain_ = cfg_.chain();
        layout_ = chain_.layout();
        params_.assign(static_cast<std::size_t>(layout_.total), 0.0);
    }

    const ShapeNetConfig& config() const { return cfg_; }
    const Chain& chain() const { return chain_; }

    ModelKind kind() const override { return cfg_.act.kind == ActKind::Sine ? ModelKind::Siren : ModelKind::Mlp; }
    Index cond_dim() const override { return cond_dim_; }
    Index space_dim() const override { return cfg_.d_in - cond_dim_; }
    Index out_dim() const override { return cfg_.d_out; }

    Matrix forward(const Matrix& x, Tape* tape = nullptr) const override {
        check_input(x);
        Tape local;
        Tape& t = tape ? *tape : local;
        t.chains.assign(1, ChainTape());
        StaticAffine src(chain_, layout_, params_);
        return run_chain(chain_, src, x, &t.chains[0]);
    }

    Matrix backward(const Matrix&, const Tape& t, const Matrix& dy, std::span<double> grad) const override {
        StaticAffine src(chain_, layout_, params_, grad);
        return backprop_chain(chain_, src, t.chains[0], dy, true);
    }

    void init(Rng& rng) override { init_chain(rng, chain_, cfg_.act, params_); }
    std::unique_ptr<Model> clone() const override { return std::make_unique<MlpModel>(*this); }

private:
    ShapeNetConfig cfg_;
    Index cond_dim_;
    Chain chain_;
    FlatParamLayout layout_;
};

/// Trainables: [branch params | trunk params].
class DeepONetModel final : public Model {
public:
    explicit DeepONetModel(DeepONetConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        branch_ = cfg_.branch_chain();
        trunk_ = cfg_.trunk_chain();
        branch_layout_ = branch_.layout();
        trunk_layout_ = trunk_.layout();
        params_.assign(static_cast<std::size_t>(branch_layout_.total + trunk_layout_.total), 0.0);
    }

    const DeepONetConfig& config() const { return cfg_; }

    ModelKind kind() const override { return ModelKind::DeepONet; }
    Index cond_dim() const override { return cfg_.branch.front(); }
    Index space_dim() const override { return cfg_.trunk.front(); }
    Index out_dim() const override { return 1; }

    Matrix forward(const Matrix& x, Tape* tape = nullptr) const override {
        check_input(x);
        Tape local;
        Tape& t = tape ? *tape : local;
        t.chains.assign(2, ChainTape());
        t.mats.assign(2, Matrix());
        StaticAffine bsrc(branch_, branch_layout_, branch_params());
        StaticAffine tsrc(trunk_, trunk_layout_, trunk_params());
        t.mats[0] = run_chain(branch_, bsrc, x.leftCols(cond_dim()), &t.chains[0]);
        t.mats[1] = run_chain(trunk_, tsrc, x.rightCols(space_dim()), &t.chains[1]);
        return combine(t.mats[0], t.mats[1]);
    }

    /// u = sum_k b_k t_k + b_{K+1}
    static Matrix combine(const Matrix& b, const Matrix& tr) {
        const Index k = tr.cols();
        Matrix u(b.rows(), 1);
        u.col(0) = (b.leftCols(k).array() * tr.array()).rowwise().sum().matrix() + b.col(k);
        return u;
    }

    Matrix backward(const Matrix& x, const Tape& t, const Matrix& dy, std::span<double> grad) const override {
        const Index k = t.mats[1].cols();
        Matrix db(x.rows(), k + 1);
        db.leftCols(k) = dy.col(0).asDiagonal() * t.mats[1];
        db.col(k) = dy.col(0);
        const Matrix dt = dy.col(0).asDiagonal() * t.mats[0].leftCols(k);
        const auto nb = static_cast<std::size_t>(branch_layout_.total);
        StaticAffine bsrc(branch_, branch_layout_, branch_params(), grad.first(nb));
        StaticAffine tsrc(trunk_, trunk_layout_, trunk_params(), grad.subspan(nb));
        Matrix dx(x.rows(), input_dim());
        dx.leftCols(cond_dim()) = backprop_chain(branch_, bsrc, t.chains[0], db, true);
        dx.rightCols(space_dim()) = backprop_chain(trunk_, tsrc, t.chains[1], dt, true);
        return dx;
    }

    void init(Rng& rng) override {
        std::span<double> p(params_);
        const auto nb = static_cast<std::size_t>(branch_layout_.total);
        init_chain(rng, branch_, cfg_.act, p.first(nb));
        init_chain(rng, trunk_, cfg_.act, p.subspan(nb));
    }
    std::unique_ptr<Model> clone() const override { return std::make_unique<DeepONetModel>(*this); }

    std::span<const double> branch_params() const {
        return {params_.data(), static_cast<std::size_t>(branch_layout_.total)};
    }
    std::span<const double> trunk_params() const {
        return {params_.data() + branch_layout_.total, static_cast<std::size_t>(trunk_layout_.total)};
    }

private:
    DeepONetConfig cfg_;
    Chain branch_, trunk_;
    FlatParamLayout branch_layout_, trunk_layout_;
};

/// Random Fourier features followed by an MLP. B is sampled in init() and is
/// not part of the trainable vector.
class FourierModel final : public Model {
public:
    FourierModel(FourierFeatureConfig cfg, Index cond_dim) : cfg_(cfg), cond_dim_(cond_dim) {
        cfg_.validate();
        require(cond_dim >= 0 && cond_dim < cfg_.d_in, "fourier: cond_dim must leave at least one space column");
        chain_ = cfg_.resolved_mlp().chain();
        layout_ = chain_.layout();
        params_.assign(static_cast<std::size_t>(layout_.total), 0.0);
        freq_ = ColMatrix::Zero(cfg_.n_features, cfg_.d_in);
    }

    const FourierFeatureConfig& config() const { return cfg_; }
    const ColMatrix& frequencies() const { return freq_; }
    void set_frequencies(const ColMatrix& b) {
        require(b.rows() == cfg_.n_features && b.cols() == cfg_.d_in, "fourier: frequency matrix shape");
        freq_ = b;
    }

    ModelKind kind() const override { return ModelKind::Fourier; }
    Index cond_dim() const override { return cond_dim_; }
    Index space_dim() const override { return cfg_.d_in - cond_dim_; }
    Index out_dim() const override { return cfg_.mlp.d_out; }

    Matrix features(const Matrix& x) const {
        const Matrix proj = 2.0 * std::numbers::pi * (x * freq_.transpose());
        Matrix g(x.rows(), 2 * cfg_.n_features);
        g.leftCols(cfg_.n_features) = proj.array().cos().matrix();
        g.rightCols(cfg_.n_features) = proj.array().sin().matrix();
        return g;
    }

    Matrix forward(const Matrix& x, Tape* tape = nullptr) const override {
        check_input(x);
        Tape local;
        Tape& t = tape ? *tape : local;
        t.chains.assign(1, ChainTape());
        t.mats.assign(1, features(x));
        StaticAffine src(chain_, layout_, params_);
        return run_chain(chain_, src, t.mats[0], &t.chains[0]);
    }

    Matrix backward(const Matrix&, const Tape& t, const Matrix& dy, std::span<double> grad) const override {
        StaticAffine src(chain_, layout_, params_, grad);
        const Matrix dg = backprop_chain(chain_, src, t.chains[0], dy, true);
        const Index n = cfg_.n_features;
        const Matrix& g = t.mats[0];
        // d cos(p) = -sin(p) dp, d sin(p) = cos(p) dp, p = 2 pi B x
        const Matrix dp = (dg.rightCols(n).array() * g.leftCols(n).array() -
                           dg.leftCols(n).array() * g.rightCols(n).array()).matrix();
        return 2.0 * std::numbers::pi * dp * freq_;
    }

    void init(Rng& rng) override {
        for (Index i = 0; i < freq_.rows(); ++i)
            for (Index j = 0; j < freq_.cols(); ++j) freq_(i, j) = cfg_.sigma * rng.normal();
        init_chain(rng, chain_, cfg_.mlp.act, params_);
    }
    std::unique_ptr<Model> clone() const override { return std::make_unique<FourierModel>(*this); }

private:
    FourierFeatureConfig cfg_;
    Index cond_dim_;
    Chain chain_;
    FlatParamLayout layout_;
    ColMatrix freq_;
};

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

/// Plain chain evaluation with shared parameters.
inline Matrix mlp_forward(std::span<const double> params, const ShapeNetConfig& cfg, const Matrix& inputs,
                          ChainTape* tape = nullptr) {
    const Chain c = cfg.chain();
    const FlatParamLayout lay = c.layout();
    StaticAffine src(c, lay, params);
    return run_chain(c, src, inputs, tape);
}

struct NifForward {
    Matrix u;
    Matrix latent;
    Matrix flat_params;  // rows x m
};

inline NifForward nif_forward(const NifModel& model, const Matrix& rows) {
    NifForward out;
    Tape t;
    out.u = model.forward(rows, &t);
    out.latent = t.mats[0];
    out.flat_params = model.shape_params(out.latent);
    return out;
}

/// Gradient of sum(dy .* model(x)) with respect to all trainables.
inline std::vector<double> nif_backward(const Model& model, const Matrix& rows, const Matrix& dy) {
    Tape t;
    model.forward(rows, &t);
    ParamVector g(model.params().size(), 0.0);
    model.backward(rows, t, dy, g);
    return {g.begin(), g.end()};
}

/// d u_o / d x_j for every row, laid out as column o * space_dim + j.
inline Matrix spatial_gradient(const Model& model, const Matrix& rows) {
    Tape t;
    const Matrix u = model.forward(rows, &t);
    const Index ds = model.space_dim();
    Matrix out(rows.rows(), model.out_dim() * ds);
    ParamVector scratch(model.params().size(), 0.0);
    for (Index o = 0; o < model.out_dim(); ++o) {
        Matrix seed = Matrix::Zero(u.rows(), u.cols());
        seed.col(o).setOnes();
        const Matrix dx = model.backward(rows, t, seed, scratch);
        out.middleCols(o * ds, ds) = dx.rightCols(ds);
    }
    return out;
}

/// ShapeNet gradient for fixed flat parameters (columns o * d_in + j).
inline Matrix shape_spatial_gradient(const ShapeNetConfig& cfg, std::span<const double> flat, const Matrix& points) {
    const Chain c = cfg.chain();
    const FlatParamLayout lay = c.layout();
    StaticAffine src(c, lay, flat);
    ChainTape t;
    const Matrix u = run_chain(c, src, points, &t);
    Matrix out(points.rows(), cfg.d_out * cfg.d_in);
    for (Index o = 0; o < cfg.d_out; ++o) {
        Matrix seed = Matrix::Zero(u.rows(), u.cols());
        seed.col(o).setOnes();
        out.middleCols(o * cfg.d_in, cfg.d_in) = backprop_chain(c, src, t, seed, true);
    }
    return out;
}

inline Matrix deeponet_forward(const DeepONetModel& model, const Matrix& t_batch, const Matrix& x_batch) {
    require(t_batch.rows() == x_batch.rows(), "deeponet: branch and trunk batches differ in length");
    Matrix x(t_batch.rows(), t_batch.cols() + x_batch.cols());
    x << t_batch, x_batch;
    return model.forward(x);
}

inline Matrix fourier_forward(const FourierModel& model, const Matrix& inputs) { return model.forward(inputs); }

}  // namespace nifkit
