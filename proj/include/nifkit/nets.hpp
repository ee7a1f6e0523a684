#pragma once

// Dense layer chains with reverse-mode gradients.
//
// A chain is a list of dense layers z = s * W h + b, a = f(z) where s is the
// activation's input scale (omega0 for sine, 1 otherwise). Parameters live in
// one flat vector laid out as vec(W_1), ..., vec(W_L), b_1, ..., b_L with
// column-major vectorization. Where the weights come from is abstracted behind
// AffineSource so the same forward/backward code serves ordinary networks and
// hypernetwork-generated layers.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nifkit/numerics.hpp"

namespace nifkit {

enum class ActKind { Identity, Swish, Tanh, ReLU, Sine };

inline const char* to_string(ActKind k) {
    switch (k) {
        case ActKind::Identity: return "identity";
        case ActKind::Swish: return "swish";
        case ActKind::Tanh: return "tanh";
        case ActKind::ReLU: return "relu";
        case ActKind::Sine: return "sine";
    }
    return "?";
}

inline ActKind parse_act_kind(std::string_view s) {
    if (s == "identity" || s == "linear") return ActKind::Identity;
    if (s == "swish") return ActKind::Swish;
    if (s == "tanh") return ActKind::Tanh;
    if (s == "relu") return ActKind::ReLU;
    if (s == "sine" || s == "siren" || s == "sin") return ActKind::Sine;
    fail(ErrorKind::InvalidInput, "unknown activation '" + std::string(s) + "'");
}

struct Activation {
    ActKind kind = ActKind::Identity;
    double omega0 = 30.0;

    static Activation identity() { return {ActKind::Identity, 30.0}; }
    static Activation sine(double omega0 = 30.0) { return {ActKind::Sine, omega0}; }

    double input_scale() const { return kind == ActKind::Sine ? omega0 : 1.0; }
    bool is_identity() const { return kind == ActKind::Identity; }

    void validate() const { require(omega0 > 0.0, "activation omega0 must be positive"); }

    bool operator==(const Activation&) const = default;
};

/// f(z) elementwise.
inline Matrix activate(const Activation& act, const Matrix& z) {
    switch (act.kind) {
        case ActKind::Identity: return z;
        case ActKind::Swish: return (z.array() / (1.0 + (-z.array()).exp())).matrix();
        case ActKind::Tanh: return z.array().tanh().matrix();
        case ActKind::ReLU: return z.array().max(0.0).matrix();
        case ActKind::Sine: return z.array().sin().matrix();
    }
    return z;
}

/// f'(z) elementwise. ReLU uses 0 at the kink.
inline Matrix activate_deriv(const Activation& act, const Matrix& z) {
    switch (act.kind) {
        case ActKind::Identity: return Matrix::Ones(z.rows(), z.cols());
        case ActKind::Swish: {
            const auto sig = (1.0 / (1.0 + (-z.array()).exp())).eval();
            return (sig * (1.0 + z.array() * (1.0 - sig))).matrix();
        }
        case ActKind::Tanh: return (1.0 - z.array().tanh().square()).matrix();
        case ActKind::ReLU: return (z.array() > 0.0).cast<double>().matrix();
        case ActKind::Sine: return z.array().cos().matrix();
    }
    return Matrix::Ones(z.rows(), z.cols());
}

/// f(z) and f'(z) together, sharing the transcendental evaluation.
inline void activate_with_deriv(const Activation& act, const Matrix& z, Matrix& a, Matrix& d) {
    const auto za = z.array();
    switch (act.kind) {
        case ActKind::Identity:
            a = z;
            d.setOnes(z.rows(), z.cols());
            return;
        case ActKind::Swish: {
            d = (1.0 + (-za).exp()).inverse().matrix();  // sigmoid, reused below
            a = (za * d.array()).matrix();
            d = (d.array() * (1.0 + za * (1.0 - d.array()))).matrix();
            return;
        }
        case ActKind::Tanh:
            a = za.tanh().matrix();
            d = (1.0 - a.array().square()).matrix();
            return;
        case ActKind::ReLU:
            a = za.max(0.0).matrix();
            d = (za > 0.0).cast<double>().matrix();
            return;
        case ActKind::Sine:
            a = za.sin().matrix();
            d = za.cos().matrix();
            return;
    }
}

struct DenseShape {
    Index in = 0;
    Index out = 0;
    Activation act{};

    bool operator==(const DenseShape&) const = default;
};

enum class BlockStyle { PlainChain, ResNetHalfSum };

inline const char* to_string(BlockStyle b) { return b == BlockStyle::PlainChain ? "plain" : "resnet"; }

inline BlockStyle parse_block_style(std::string_view s) {
    if (s == "plain") return BlockStyle::PlainChain;
    if (s == "resnet") return BlockStyle::ResNetHalfSum;
    fail(ErrorKind::InvalidInput, "unknown block style '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Flat parameter layout
// ---------------------------------------------------------------------------

struct Segment {
    Index offset = 0;
    Index rows = 0;
    Index cols = 1;

    Index size() const { return rows * cols; }
};

using ConstColMap = Eigen::Map<const ColMatrix>;
using ColMap = Eigen::Map<ColMatrix>;

/// vec(W_1), ..., vec(W_L), b_1, ..., b_L; W_l is out x in, column-major.
struct FlatParamLayout {
    std::vector<Segment> weights;
    std::vector<Segment> biases;
    Index total = 0;

    static FlatParamLayout of(std::span<const DenseShape> layers, bool with_biases = true) {
        FlatParamLayout p;
        Index off = 0;
        for (const auto& l : layers) {
            p.weights.push_back({off, l.out, l.in});
            off += l.out * l.in;
        }
        for (const auto& l : layers) {
            p.biases.push_back({off, with_biases ? l.out : 0, 1});
            off += with_biases ? l.out : 0;
        }
        p.total = off;
        return p;
    }

    ConstColMap weight(std::span<const double> flat, std::size_t l) const {
        const Segment& s = weights[l];
        return ConstColMap(flat.data() + s.offset, s.rows, s.cols);
    }
    Eigen::Map<const Vector> bias(std::span<const double> flat, std::size_t l) const {
        const Segment& s = biases[l];
        return Eigen::Map<const Vector>(flat.data() + s.offset, s.rows);
    }

    /// Split a flat vector into per-layer matrices and bias vectors.
    void unpack(std::span<const double> flat, std::vector<ColMatrix>& w, std::vector<Vector>& b) const {
        require(static_cast<Index>(flat.size()) == total, "unpack: flat vector has wrong length");
        w.clear();
        b.clear();
        for (std::size_t l = 0; l < weights.size(); ++l) {
            w.emplace_back(weight(flat, l));
            b.emplace_back(bias(flat, l));
        }
    }

    std::vector<double> pack(const std::vector<ColMatrix>& w, const std::vector<Vector>& b) const {
        require(w.size() == weights.size() && b.size() == biases.size(), "pack: wrong number of tensors");
        std::vector<double> flat(static_cast<std::size_t>(total));
        for (std::size_t l = 0; l < weights.size(); ++l) {
            require(w[l].rows() == weights[l].rows && w[l].cols() == weights[l].cols, "pack: weight shape");
            require(b[l].size() == biases[l].rows, "pack: bias shape");
            ColMap(flat.data() + weights[l].offset, weights[l].rows, weights[l].cols) = w[l];
            Eigen::Map<Vector>(flat.data() + biases[l].offset, biases[l].rows) = b[l];
        }
        return flat;
    }
};

// ---------------------------------------------------------------------------
// Chains
// ---------------------------------------------------------------------------

/// A dense chain. With ResNetHalfSum, layers [1, L-1) are grouped in pairs and
/// each pair computes eta' = (eta + f(W2 f(W1 eta + b1) + b2)) / 2.
struct Chain {
    std::vector<DenseShape> layers;
    BlockStyle style = BlockStyle::PlainChain;

    Index in_dim() const { return layers.empty() ? 0 : layers.front().in; }
    Index out_dim() const { return layers.empty() ? 0 : layers.back().out; }
    FlatParamLayout layout() const { return FlatParamLayout::of(layers); }
    Index param_count() const {
        Index n = 0;
        for (const auto& l : layers) n += l.out * l.in + l.out;
        return n;
    }

    void validate() const {
        require(!layers.empty(), "chain has no layers");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            require(layers[i].in >= 1 && layers[i].out >= 1, "chain layer widths must be >= 1");
            layers[i].act.validate();
            if (i > 0) require(layers[i].in == layers[i - 1].out, "chain layer widths do not connect");
        }
        if (style == BlockStyle::ResNetHalfSum) {
            require(layers.size() >= 2 && (layers.size() - 2) % 2 == 0,
                    "resnet chain needs first layer, pairs of block layers, last layer");
            for (std::size_t i = 1; i + 1 < layers.size(); ++i)
                require(layers[i].in == layers[i].out, "resnet block layers must be square");
        }
    }

    bool operator==(const Chain&) const = default;
};

/// Per-layer scratch an affine source may keep for its backward pass.
struct LayerCache {
    std::vector<Matrix> products;
};

/// Supplies z = s * W h + b for layer l and consumes dL/dz on the way back.
class AffineSource {
public:
    virtual ~AffineSource() = default;
    virtual Matrix forward(std::size_t l, const Matrix& h, LayerCache& cache) const = 0;
    /// Accumulates parameter gradients; returns dL/dh when `want_dh`.
    virtual Matrix backward(std::size_t l, const Matrix& h, const Matrix& dz, const LayerCache& cache,
                            bool want_dh) = 0;
};

/// Weights read from a flat vector in FlatParamLayout order.
class StaticAffine final : public AffineSource {
public:
    StaticAffine(const Chain& chain, const FlatParamLayout& layout, std::span<const double> params,
                 std::span<double> grad = {})
        : chain_(chain), layout_(layout), params_(params), grad_(grad) {
        require(static_cast<Index>(params.size()) == layout.total, "parameter vector has wrong length");
        require(grad.empty() || grad.size() == params.size(), "gradient vector has wrong length");
    }

    Matrix forward(std::size_t l, const Matrix& h, LayerCache&) const override {
        const double s = chain_.layers[l].act.input_scale();
        Matrix z(h.rows(), chain_.layers[l].out);
        z.noalias() = h * layout_.weight(params_, l).transpose();
        if (s != 1.0) z *= s;
        z.rowwise() += layout_.bias(params_, l).transpose();
        return z;
    }

    Matrix backward(std::size_t l, const Matrix& h, const Matrix& dz, const LayerCache&, bool want_dh) override {
        const double s = chain_.layers[l].act.input_scale();
        if (!grad_.empty()) {
            const Segment& ws = layout_.weights[l];
            const Segment& bs = layout_.biases[l];
            ColMap gw(grad_.data() + ws.offset, ws.rows, ws.cols);
            gw.noalias() += s * (dz.transpose() * h);
            Eigen::Map<Vector>(grad_.data() + bs.offset, bs.rows) += dz.colwise().sum().transpose();
        }
        if (!want_dh) return {};
        Matrix dh(h.rows(), h.cols());
        dh.noalias() = s * (dz * layout_.weight(params_, l));
        return dh;
    }

private:
    const Chain& chain_;
    const FlatParamLayout& layout_;
    std::span<const double> params_;
    std::span<double> grad_;
};

struct ChainTape {
    std::vector<Matrix> in;     // layer inputs
    std::vector<Matrix> deriv;  // f'(z) per layer (empty for identity layers)
    std::vector<LayerCache> cache;
};

namespace detail {

inline Matrix layer_forward(const Chain& c, const AffineSource& src, std::size_t l, const Matrix& h,
                            ChainTape& tape) {
    tape.in[l] = h;
    const Activation& act = c.layers[l].act;
    if (act.is_identity()) return src.forward(l, h, tape.cache[l]);
    Matrix a;
    activate_with_deriv(act, src.forward(l, h, tape.cache[l]), a, tape.deriv[l]);
    return a;
}

inline Matrix layer_backward(const Chain& c, AffineSource& src, std::size_t l, const Matrix& da,
                             const ChainTape& tape, bool want_dh) {
    const Activation& act = c.layers[l].act;
    if (act.is_identity()) return src.backward(l, tape.in[l], da, tape.cache[l], want_dh);
    const Matrix dz = (da.array() * tape.deriv[l].array()).matrix();
    return src.backward(l, tape.in[l], dz, tape.cache[l], want_dh);
}

}  // namespace detail

/// Forward pass over a batch (one sample per row).
inline Matrix run_chain(const Chain& c, const AffineSource& src, const Matrix& x, ChainTape* tape = nullptr) {
    require(x.cols() == c.in_dim(),
            "chain input width " + std::to_string(x.cols()) + " != expected " + std::to_string(c.in_dim()));
    ChainTape local;
    ChainTape& t = tape ? *tape : local;
    const std::size_t L = c.layers.size();
    t.in.resize(L);
    t.deriv.resize(L);
    t.cache.resize(L);
    if (c.style == BlockStyle::PlainChain) {
        Matrix h = x;
        for (std::size_t l = 0; l < L; ++l) h = detail::layer_forward(c, src, l, h, t);
        return h;
    }
    Matrix h = detail::layer_forward(c, src, 0, x, t);
    for (std::size_t l = 1; l + 1 < L; l += 2) {
        const Matrix zeta = detail::layer_forward(c, src, l, h, t);
        const Matrix y = detail::layer_forward(c, src, l + 1, zeta, t);
        h = 0.5 * (h + y);
    }
    return detail::layer_forward(c, src, L - 1, h, t);
}

/// Reverse pass; returns dL/dx when `want_dx`.
inline Matrix backprop_chain(const Chain& c, AffineSource& src, const ChainTape& t, const Matrix& dy,
                             bool want_dx = true) {
    const std::size_t L = c.layers.size();
    require(dy.cols() == c.out_dim() && t.in.size() == L, "backprop_chain: tape/gradient mismatch");
    if (c.style == BlockStyle::PlainChain) {
        Matrix d = dy;
        for (std::size_t l = L; l-- > 0;) d = detail::layer_backward(c, src, l, d, t, l > 0 || want_dx);
        return d;
    }
    Matrix d = detail::layer_backward(c, src, L - 1, dy, t, true);
    for (std::size_t b = (L - 2) / 2; b-- > 0;) {
        // block (l1, l2): eta' = (eta + f(z2(f(z1(eta))))) / 2
        const std::size_t l1 = 1 + 2 * b, l2 = l1 + 1;
        const Matrix dzeta = detail::layer_backward(c, src, l2, 0.5 * d, t, true);
        d = 0.5 * d + detail::layer_backward(c, src, l1, dzeta, t, true);
    }
    return detail::layer_backward(c, src, 0, d, t, want_dx);
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline constexpr double kTruncNormalStd = 0.1;
inline constexpr double kTruncNormalCutoff = 2.0;
inline constexpr double kHyperHeadScale = 1e-2;

/// Bounds of the sine-network uniform initialization for a layer with the
/// given fan-in. The first layer of a network uses 1/n_i for weights.
struct SirenBounds {
    double weight;
    double bias;
};

inline SirenBounds siren_bounds(Index fan_in, bool first_layer, double omega0) {
    const double n = static_cast<double>(fan_in);
    if (first_layer) return {1.0 / n, 1.0 / std::sqrt(n)};
    return {std::sqrt(6.0 / n) / omega0, 1.0 / std::sqrt(n)};
}

/// Draws one layer's weights then biases. `family` selects the rule: sine
/// networks use the uniform SIREN bounds, every other activation the truncated
/// normal (std 0.1, cutoff 2 std).
inline void init_layer(Rng& rng, const Activation& family, const DenseShape& shape, bool first_layer,
                       double* weights, double* biases, double weight_scale = 1.0) {
    const Index nw = shape.in * shape.out;
    if (family.kind == ActKind::Sine) {
        const SirenBounds b = siren_bounds(shape.in, first_layer, family.omega0);
        for (Index i = 0; i < nw; ++i) weights[i] = weight_scale * rng.uniform(-b.weight, b.weight);
        if (biases)
            for (Index i = 0; i < shape.out; ++i) biases[i] = rng.uniform(-b.bias, b.bias);
    } else {
        for (Index i = 0; i < nw; ++i) weights[i] = weight_scale * rng.trunc_normal(kTruncNormalStd, kTruncNormalCutoff);
        if (biases)
            for (Index i = 0; i < shape.out; ++i) biases[i] = rng.trunc_normal(kTruncNormalStd, kTruncNormalCutoff);
    }
}

/// Initializes a whole chain into `flat` (FlatParamLayout order).
inline void init_chain(Rng& rng, const Chain& c, const Activation& family, std::span<double> flat,
                       bool first_is_input_layer = true) {
    const FlatParamLayout lay = c.layout();
    require(static_cast<Index>(flat.size()) == lay.total, "init_chain: wrong parameter length");
    for (std::size_t l = 0; l < c.layers.size(); ++l)
        init_layer(rng, family, c.layers[l], first_is_input_layer && l == 0, flat.data() + lay.weights[l].offset,
                   flat.data() + lay.biases[l].offset);
}

}  // namespace nifkit
