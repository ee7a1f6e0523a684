#pragma once

// Point-cloud datasets: schema, normalization, generators (Kuramoto-Sivashinsky,
// modulated traveling wave, planted linear latent series) and CSV/JSON I/O.

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fftw3.h>
#include <json.hpp>

#include "nifkit/numerics.hpp"

namespace nifkit {

// ---------------------------------------------------------------------------
// Schema and normalization
// ---------------------------------------------------------------------------

enum class ColumnRole { Param, Time, Space, Out, Weight };

inline const char* to_string(ColumnRole r) {
    switch (r) {
        case ColumnRole::Param: return "param";
        case ColumnRole::Time: return "time";
        case ColumnRole::Space: return "space";
        case ColumnRole::Out: return "out";
        case ColumnRole::Weight: return "weight";
    }
    return "?";
}

/// Column layout of a point-cloud table, in the fixed order
/// param | time | space | out | weight.
struct PointCloudSchema {
    Index d_param = 0;
    Index d_time = 0;
    Index d_space = 1;
    Index d_out = 1;
    bool has_weight = false;

    Index cols() const { return d_param + d_time + d_space + d_out + (has_weight ? 1 : 0); }
    Index cond_dim() const { return d_param + d_time; }
    Index input_dim() const { return d_param + d_time + d_space; }
    Index space_offset() const { return d_param + d_time; }
    Index out_offset() const { return d_param + d_time + d_space; }
    Index weight_offset() const { return out_offset() + d_out; }

    ColumnRole role(Index c) const {
        if (c < d_param) return ColumnRole::Param;
        if (c < d_param + d_time) return ColumnRole::Time;
        if (c < space_offset() + d_space) return ColumnRole::Space;
        if (c < out_offset() + d_out) return ColumnRole::Out;
        return ColumnRole::Weight;
    }

    void validate() const {
        require(d_param >= 0 && d_out >= 1 && d_space >= 1, "schema needs d_space >= 1 and d_out >= 1");
        require(d_time == 0 || d_time == 1, "schema d_time must be 0 or 1");
    }

    bool operator==(const PointCloudSchema&) const = default;
};

enum class NormKind { Identity, Standard, MinMaxSym };

inline const char* to_string(NormKind k) {
    switch (k) {
        case NormKind::Identity: return "identity";
        case NormKind::Standard: return "standard";
        case NormKind::MinMaxSym: return "minmax_sym";
    }
    return "?";
}

inline NormKind parse_norm_kind(std::string_view s) {
    if (s == "identity") return NormKind::Identity;
    if (s == "standard") return NormKind::Standard;
    if (s == "minmax_sym") return NormKind::MinMaxSym;
    fail(ErrorKind::Parse, "unknown normalization kind '" + std::string(s) + "'");
}

/// Affine map v -> (v - center) / scale for one column. For Standard the
/// statistics are (mean, sample std); for MinMaxSym (min, max).
struct ColumnNorm {
    NormKind kind = NormKind::Identity;
    double stat_a = 0.0;
    double stat_b = 1.0;

    double center() const {
        switch (kind) {
            case NormKind::Identity: return 0.0;
            case NormKind::Standard: return stat_a;
            case NormKind::MinMaxSym: return 0.5 * (stat_a + stat_b);
        }
        return 0.0;
    }
    double scale() const {
        switch (kind) {
            case NormKind::Identity: return 1.0;
            case NormKind::Standard: return stat_b;
            case NormKind::MinMaxSym: return 0.5 * (stat_b - stat_a);
        }
        return 1.0;
    }
    double apply(double v) const { return (v - center()) / scale(); }
    double invert(double v) const { return v * scale() + center(); }

    bool operator==(const ColumnNorm&) const = default;
};

inline ColumnNorm fit_column(NormKind kind, std::span<const double> values, Index col_for_errors = 0) {
    ColumnNorm n;
    n.kind = kind;
    if (kind == NormKind::Identity) return n;
    if (values.size() < 2)
        fail(ErrorKind::DegenerateColumn, "column " + std::to_string(col_for_errors) + " has fewer than 2 values");
    if (kind == NormKind::Standard) {
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
        if (!(sd > 0.0))
            fail(ErrorKind::DegenerateColumn, "column " + std::to_string(col_for_errors) + " is constant");
        n.stat_a = mean;
        n.stat_b = sd;
    } else {
        const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
        if (!(*hi > *lo))
            fail(ErrorKind::DegenerateColumn, "column " + std::to_string(col_for_errors) + " is constant");
        n.stat_a = *lo;
        n.stat_b = *hi;
    }
    return n;
}

struct NormalizationSpec {
    std::vector<ColumnNorm> columns;

    bool empty() const { return columns.empty(); }

    static NormalizationSpec identity(Index cols) {
        return {std::vector<ColumnNorm>(static_cast<std::size_t>(cols))};
    }

    /// One kind per column.
    static NormalizationSpec fit(const Matrix& table, const std::vector<NormKind>& kinds) {
        require(static_cast<Index>(kinds.size()) == table.cols(), "normalization: one kind per column required");
        NormalizationSpec spec;
        std::vector<double> col(static_cast<std::size_t>(table.rows()));
        for (Index c = 0; c < table.cols(); ++c) {
            for (Index r = 0; r < table.rows(); ++r) col[static_cast<std::size_t>(r)] = table(r, c);
            spec.columns.push_back(fit_column(kinds[static_cast<std::size_t>(c)], col, c));
        }
        return spec;
    }

    Matrix apply(const Matrix& table) const {
        check(table);
        Matrix out(table.rows(), table.cols());
        for (Index c = 0; c < table.cols(); ++c) {
            const ColumnNorm& n = columns[static_cast<std::size_t>(c)];
            const double center = n.center(), scale = n.scale();
            for (Index r = 0; r < table.rows(); ++r) out(r, c) = (table(r, c) - center) / scale;
        }
        return out;
    }

    Matrix invert(const Matrix& table) const {
        check(table);
        Matrix out(table.rows(), table.cols());
        for (Index c = 0; c < table.cols(); ++c) {
            const ColumnNorm& n = columns[static_cast<std::size_t>(c)];
            const double center = n.center(), scale = n.scale();
            for (Index r = 0; r < table.rows(); ++r) out(r, c) = table(r, c) * scale + center;
        }
        return out;
    }

    /// Sub-spec for a contiguous column range.
    NormalizationSpec slice(Index first, Index count) const {
        NormalizationSpec s;
        s.columns.assign(columns.begin() + first, columns.begin() + first + count);
        return s;
    }

    bool operator==(const NormalizationSpec&) const = default;

private:
    void check(const Matrix& table) const {
        require(static_cast<Index>(columns.size()) == table.cols(), "normalization: column count mismatch");
    }
};

/// Rows of (param, time, space, out, weight). `table` holds normalized values
/// whenever `norm` is non-empty; `norm.invert(table)` recovers physical units.
struct PointCloudDataset {
    PointCloudSchema schema;
    Matrix table;
    NormalizationSpec norm;

    Index rows() const { return table.rows(); }

    Matrix inputs() const { return table.leftCols(schema.input_dim()); }
    Matrix targets() const { return table.middleCols(schema.out_offset(), schema.d_out); }
    Vector weights() const {
        if (!schema.has_weight) return Vector::Ones(table.rows());
        return table.col(schema.weight_offset());
    }

    /// Subset of rows, same schema and normalization.
    PointCloudDataset take_rows(std::span<const Index> idx) const {
        PointCloudDataset d{schema, Matrix(static_cast<Index>(idx.size()), table.cols()), norm};
        for (std::size_t i = 0; i < idx.size(); ++i) d.table.row(static_cast<Index>(i)) = table.row(idx[i]);
        return d;
    }

    void validate() const {
        schema.validate();
        require(table.cols() == schema.cols(), "dataset table width does not match schema");
        require(table.allFinite(), "dataset contains non-finite entries");
        require(norm.empty() || static_cast<Index>(norm.columns.size()) == table.cols(),
                "dataset normalization width does not match schema");
        if (schema.has_weight)
            for (Index r = 0; r < table.rows(); ++r)
                require(table(r, schema.weight_offset()) > 0.0, "weights must be strictly positive");
    }
};

/// Standard on every column except the weight column (left as-is).
inline std::vector<NormKind> standard_kinds(const PointCloudSchema& s) {
    std::vector<NormKind> k(static_cast<std::size_t>(s.cols()), NormKind::Standard);
    if (s.has_weight) k.back() = NormKind::Identity;
    return k;
}

// ---------------------------------------------------------------------------
// Kuramoto-Sivashinsky: u_t + u u_x + u_xx + mu u_xxxx = 0 on [0, 2pi)
// ---------------------------------------------------------------------------

struct KSConfig {
    Index n_grid = 1024;
    double dt = 1e-3;
    double t_final = 100.0;
    Index save_every = 10;
    Index subsample_space = 4;
    Index subsample_time = 100;
    bool dealias = true;

    Index n_steps() const { return static_cast<Index>(std::llround(t_final / dt)); }
    /// Snapshots kept per run after temporal subsampling (t = 0 first).
    Index n_time_out() const { return (n_steps() / save_every) / subsample_time; }
    Index n_space_out() const { return n_grid / subsample_space; }

    void validate() const {
        require(n_grid >= 4 && (n_grid & (n_grid - 1)) == 0, "ks: n_grid must be a power of two");
        require(dt > 0.0 && t_final > 0.0, "ks: dt and t_final must be positive");
        require(save_every >= 1 && subsample_space >= 1 && subsample_time >= 1, "ks: factors must be >= 1");
        require(n_grid % subsample_space == 0, "ks: subsample_space must divide n_grid");
    }
};

struct KSResult {
    Matrix snapshots;            // n_grid x n_saved
    std::vector<double> times;   // n_saved
    double max_imag_residue = 0.0;
};

namespace detail {

class FftPlan {
public:
    FftPlan(Index n, int sign) : n_(n), buf_(static_cast<std::size_t>(n)) {
        auto* p = reinterpret_cast<fftw_complex*>(buf_.data());
        plan_ = fftw_plan_dft_1d(static_cast<int>(n), p, p, sign, FFTW_ESTIMATE);
    }
    FftPlan(const FftPlan&) = delete;
    FftPlan& operator=(const FftPlan&) = delete;
    ~FftPlan() { fftw_destroy_plan(plan_); }

    std::vector<Complex>& buffer() { return buf_; }
    void execute() { fftw_execute(plan_); }

private:
    Index n_;
    std::vector<Complex> buf_;
    fftw_plan plan_;
};

}  // namespace detail

/// Fourier pseudo-spectral ETD-RK4 (Kassam-Trefethen) integration. Saves the
/// state every `save_every` steps starting at t = 0, including t_final when it
/// falls on a save step.
inline KSResult solve_ks(double mu, const KSConfig& cfg, std::span<const double> u0) {
    cfg.validate();
    require(mu > 0.0, "ks: mu must be positive");
    require(static_cast<Index>(u0.size()) == cfg.n_grid, "ks: u0 length must equal n_grid");
    require(all_finite(u0), "ks: u0 must be finite");

    const Index n = cfg.n_grid;
    const double h = cfg.dt;
    const auto un = static_cast<std::size_t>(n);

    std::vector<double> k(un), lin(un);
    std::vector<Complex> e(un), e2(un), q(un), f1(un), f2(un), f3(un), g(un);
    for (Index j = 0; j < n; ++j) {
        double kj = j < n / 2 ? static_cast<double>(j) : static_cast<double>(j - n);
        if (j == n / 2) kj = 0.0;
        k[static_cast<std::size_t>(j)] = kj;
    }

    // phi-function coefficients by contour quadrature on 16 points.
    constexpr int kContour = 16;
    for (std::size_t j = 0; j < un; ++j) {
        const double kj = k[j];
        lin[j] = kj * kj - mu * kj * kj * kj * kj;
        const double hl = h * lin[j];
        e[j] = std::exp(hl);
        e2[j] = std::exp(hl / 2.0);
        Complex sq{}, s1{}, s2{}, s3{};
        for (int m = 1; m <= kContour; ++m) {
            const Complex r = std::exp(Complex(0.0, M_PI * (m - 0.5) / kContour));
            const Complex lr = hl + r;
            const Complex el = std::exp(lr);
            const Complex lr3 = lr * lr * lr;
            sq += (std::exp(lr / 2.0) - 1.0) / lr;
            s1 += (-4.0 - lr + el * (4.0 - 3.0 * lr + lr * lr)) / lr3;
            s2 += (2.0 + lr + el * (-2.0 + lr)) / lr3;
            s3 += (-4.0 - 3.0 * lr - lr * lr + el * (4.0 - lr)) / lr3;
        }
        q[j] = h * (sq / double(kContour)).real();
        f1[j] = h * (s1 / double(kContour)).real();
        f2[j] = h * (s2 / double(kContour)).real();
        f3[j] = h * (s3 / double(kContour)).real();
        const bool keep = !cfg.dealias || std::abs(kj) < static_cast<double>(n) / 3.0;
        g[j] = keep ? Complex(0.0, -0.5 * kj) : Complex(0.0, 0.0);
    }

    detail::FftPlan fwd(n, FFTW_FORWARD), bwd(n, FFTW_BACKWARD);
    auto& fb = fwd.buffer();
    auto& bb = bwd.buffer();
    const double inv_n = 1.0 / static_cast<double>(n);
    double max_imag = 0.0;
    double max_abs = 0.0;

    // Physical values of a spectral state, with the realness check.
    auto to_physical = [&](const std::vector<Complex>& spec) {
        std::copy(spec.begin(), spec.end(), bb.begin());
        bwd.execute();
        max_abs = 0.0;
        for (std::size_t j = 0; j < un; ++j) {
            bb[j] *= inv_n;
            max_imag = std::max(max_imag, std::abs(bb[j].imag()));
            max_abs = std::max(max_abs, std::abs(bb[j].real()));
        }
    };
    // N(v) = g * fft(real(ifft(v))^2)
    auto nonlinear = [&](const std::vector<Complex>& spec, std::vector<Complex>& out) {
        to_physical(spec);
        for (std::size_t j = 0; j < un; ++j) {
            const double r = bb[j].real();
            fb[j] = Complex(r * r, 0.0);
        }
        fwd.execute();
        for (std::size_t j = 0; j < un; ++j) out[j] = g[j] * fb[j];
    };

    std::vector<Complex> v(un), nv(un), a(un), na(un), b(un), nb(un), c(un), nc(un);
    for (std::size_t j = 0; j < un; ++j) fb[j] = Complex(u0[j], 0.0);
    fwd.execute();
    std::copy(fb.begin(), fb.end(), v.begin());

    const Index n_steps = cfg.n_steps();
    const Index n_saved = n_steps / cfg.save_every + 1;
    KSResult out;
    out.snapshots.resize(n, n_saved);
    out.times.reserve(static_cast<std::size_t>(n_saved));
    Index saved = 0;
    auto save = [&](Index step) {
        to_physical(v);
        for (Index j = 0; j < n; ++j) out.snapshots(j, saved) = bb[static_cast<std::size_t>(j)].real();
        out.times.push_back(static_cast<double>(step) * h);
        ++saved;
    };
    save(0);

    for (Index step = 1; step <= n_steps; ++step) {
        nonlinear(v, nv);
        if (!(max_abs <= 1e6))
            fail(ErrorKind::Divergence, "ks: |u| exceeded 1e6 at step " + std::to_string(step - 1));
        for (std::size_t j = 0; j < un; ++j) a[j] = e2[j] * v[j] + q[j] * nv[j];
        nonlinear(a, na);
        for (std::size_t j = 0; j < un; ++j) b[j] = e2[j] * v[j] + q[j] * na[j];
        nonlinear(b, nb);
        for (std::size_t j = 0; j < un; ++j) c[j] = e2[j] * a[j] + q[j] * (2.0 * nb[j] - nv[j]);
        nonlinear(c, nc);
        for (std::size_t j = 0; j < un; ++j)
            v[j] = e[j] * v[j] + nv[j] * f1[j] + 2.0 * (na[j] + nb[j]) * f2[j] + nc[j] * f3[j];
        // Round-off leaves an anti-Hermitian remainder in v that the unstable
        // linear modes would amplify; project back onto real fields.
        v[0] = Complex(v[0].real(), 0.0);
        v[un / 2] = Complex(v[un / 2].real(), 0.0);
        for (std::size_t j = 1; j < un / 2; ++j) {
            const Complex sym = 0.5 * (v[j] + std::conj(v[un - j]));
            v[j] = sym;
            v[un - j] = std::conj(sym);
        }
        if (step % cfg.save_every == 0) save(step);
    }
    to_physical(v);
    if (!(max_abs <= 1e6)) fail(ErrorKind::Divergence, "ks: |u| exceeded 1e6 at step " + std::to_string(n_steps));
    out.max_imag_residue = max_imag;
    return out;
}

inline std::vector<double> ks_grid(Index n) {
    std::vector<double> x(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) x[static_cast<std::size_t>(j)] = 2.0 * M_PI * static_cast<double>(j) / static_cast<double>(n);
    return x;
}

/// `count` evenly spaced values covering [lo, hi] (both ends included).
inline std::vector<double> linspace(double lo, double hi, Index count) {
    std::vector<double> v(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i)
        v[static_cast<std::size_t>(i)] =
            count == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
    return v;
}

/// Raw (un-normalized) KS table: rows (mu, t, x, u), mu-major, then t, then x,
/// on the subsampled grid. u0 = sin(x).
inline Matrix ks_table(std::span<const double> mus, const KSConfig& cfg) {
    cfg.validate();
    const Index nx = cfg.n_space_out();
    const Index nt = cfg.n_time_out();
    const auto grid = ks_grid(cfg.n_grid);
    std::vector<double> u0(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) u0[j] = std::sin(grid[j]);

    Matrix table(static_cast<Index>(mus.size()) * nt * nx, 4);
    Index row = 0;
    for (double mu : mus) {
        const KSResult res = solve_ks(mu, cfg, u0);
        for (Index it = 0; it < nt; ++it) {
            const Index col = it * cfg.subsample_time;
            for (Index ix = 0; ix < nx; ++ix) {
                const Index gj = ix * cfg.subsample_space;
                table(row, 0) = mu;
                table(row, 1) = res.times[static_cast<std::size_t>(col)];
                table(row, 2) = grid[static_cast<std::size_t>(gj)];
                table(row, 3) = res.snapshots(gj, col);
                ++row;
            }
        }
    }
    return table;
}

inline PointCloudSchema ks_schema() { return {1, 1, 1, 1, false}; }

/// KS dataset with every column Standard-normalized on its own statistics.
/// A column that is constant in the generated table (the mu column when a
/// single mu is requested) is left un-normalized.
inline PointCloudDataset make_ks_dataset(std::span<const double> mus, const KSConfig& cfg) {
    for (double mu : mus) require(mu > 0.0, "ks: every mu must be positive");
    PointCloudDataset d;
    d.schema = ks_schema();
    const Matrix raw = ks_table(mus, cfg);
    auto kinds = standard_kinds(d.schema);
    for (Index c = 0; c < raw.cols(); ++c)
        if (raw.rows() > 0 && (raw.col(c).array() == raw(0, c)).all()) kinds[static_cast<std::size_t>(c)] = NormKind::Identity;
    d.norm = NormalizationSpec::fit(raw, kinds);
    d.table = d.norm.apply(raw);
    return d;
}

/// KS dataset normalized with statistics fitted elsewhere (e.g. test set with
/// training statistics).
inline PointCloudDataset make_ks_dataset(std::span<const double> mus, const KSConfig& cfg,
                                         const NormalizationSpec& norm) {
    for (double mu : mus) require(mu > 0.0, "ks: every mu must be positive");
    PointCloudDataset d;
    d.schema = ks_schema();
    d.norm = norm;
    d.table = norm.apply(ks_table(mus, cfg));
    return d;
}

// ---------------------------------------------------------------------------
// Modulated traveling wave
// ---------------------------------------------------------------------------

struct WaveConfig {
    double envelope = 1000.0;  // decay rate of the Gaussian envelope
    double speed = 0.012;
    double omega = 70.0;
    double x0 = 0.1;
    Index n_x = 300;
    Index n_t = 20;
    double x_max = 1.0;
    double t_max = 70.0;

    double value(double x, double t) const {
        const double s = x - (x0 + speed * t);
        return std::exp(-envelope * s * s) * std::sin(omega * s);
    }
};

inline Matrix wave_table(const WaveConfig& cfg = {}) {
    const auto xs = linspace(0.0, cfg.x_max, cfg.n_x);
    const auto ts = linspace(0.0, cfg.t_max, cfg.n_t);
    Matrix table(cfg.n_x * cfg.n_t, 3);
    Index row = 0;
    for (double t : ts)
        for (double x : xs) {
            table(row, 0) = t;
            table(row, 1) = x;
            table(row, 2) = cfg.value(x, t);
            ++row;
        }
    return table;
}

/// Rows (t, x, u), t-major, Standard-normalized.
inline PointCloudDataset make_wave_dataset(const WaveConfig& cfg = {}) {
    PointCloudDataset d;
    d.schema = {0, 1, 1, 1, false};
    const Matrix raw = wave_table(cfg);
    d.norm = NormalizationSpec::fit(raw, standard_kinds(d.schema));
    d.table = d.norm.apply(raw);
    return d;
}

// ---------------------------------------------------------------------------
// Planted linear latent dynamics (DMD fixture)
// ---------------------------------------------------------------------------

struct LatentSeries {
    ColMatrix z;  // r x n_steps
    double dt = 1.0;
};

/// z_k = sum_j mode_j * lambda_j^k * alpha_j with random complex alpha. Each
/// eigenvalue with non-zero imaginary part stands for a conjugate pair and
/// consumes two columns of `modes` (real and imaginary part of the mode);
/// a real eigenvalue consumes one column.
inline LatentSeries make_linear_series(std::span<const Complex> eigs, const ColMatrix& modes, Index n_steps,
                                       double dt, Rng& rng) {
    require(n_steps >= 1, "linear series: n_steps must be >= 1");
    Index needed = 0;
    for (const Complex& l : eigs) {
        require(std::abs(l) <= 1.05, "linear series: |lambda| must be <= 1.05");
        needed += l.imag() != 0.0 ? 2 : 1;
    }
    require(modes.cols() == needed, "linear series: modes column count does not match eigenvalues");
    if (modes.cols() > 0) {
        const SvdThin svd = svd_thin(modes);
        if (modes.cols() > modes.rows() || svd.s(svd.s.size() - 1) <= 1e-10 * svd.s(0))
            fail(ErrorKind::InvalidInput, "linear series: modes are not full column rank");
    }
    LatentSeries out;
    out.dt = dt;
    out.z = ColMatrix::Zero(modes.rows(), n_steps);
    Index col = 0;
    for (const Complex& l : eigs) {
        const double mag = rng.uniform(0.5, 1.5);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        if (l.imag() != 0.0) {
            const Complex alpha = std::polar(mag, phase);
            const CVector w = modes.col(col).cast<Complex>() + Complex(0, 1) * modes.col(col + 1).cast<Complex>();
            Complex p = alpha;
            for (Index k = 0; k < n_steps; ++k) {
                out.z.col(k) += 2.0 * (w * p).real();
                p *= l;
            }
            col += 2;
        } else {
            double p = mag;
            for (Index k = 0; k < n_steps; ++k) {
                out.z.col(k) += modes.col(col) * p;
                p *= l.real();
            }
            col += 1;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV / JSON I/O
// ---------------------------------------------------------------------------

inline std::string schema_header(const PointCloudSchema& s) {
    std::ostringstream os;
    os << "# nif-pointcloud v1; roles=param:" << s.d_param << ",time:" << s.d_time << ",space:" << s.d_space
       << ",out:" << s.d_out << ",weight:" << (s.has_weight ? 1 : 0);
    return os.str();
}

inline PointCloudSchema parse_schema_header(const std::string& line) {
    const std::string prefix = "# nif-pointcloud v1; roles=";
    if (line.rfind(prefix, 0) != 0) fail(ErrorKind::Parse, "line 1: missing '" + prefix + "' header");
    PointCloudSchema s{0, 0, 0, 0, false};
    bool seen[5] = {false, false, false, false, false};
    std::stringstream ss(line.substr(prefix.size()));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto colon = tok.find(':');
        if (colon == std::string::npos) fail(ErrorKind::Parse, "line 1: malformed role entry '" + tok + "'");
        const std::string name = tok.substr(0, colon);
        long long count = 0;
        try {
            std::size_t used = 0;
            count = std::stoll(tok.substr(colon + 1), &used);
            if (used != tok.size() - colon - 1) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            fail(ErrorKind::Parse, "line 1: bad count in role entry '" + tok + "'");
        }
        if (count < 0) fail(ErrorKind::Parse, "line 1: negative count in '" + tok + "'");
        int idx = -1;
        if (name == "param") idx = 0, s.d_param = count;
        else if (name == "time") idx = 1, s.d_time = count;
        else if (name == "space") idx = 2, s.d_space = count;
        else if (name == "out") idx = 3, s.d_out = count;
        else if (name == "weight") idx = 4, s.has_weight = count != 0;
        else fail(ErrorKind::Parse, "line 1: unknown role token '" + name + "'");
        if (seen[idx]) fail(ErrorKind::Parse, "line 1: duplicate role token '" + name + "'");
        seen[idx] = true;
        if (idx == 4 && count > 1) fail(ErrorKind::Parse, "line 1: weight count must be 0 or 1");
    }
    for (bool b : seen)
        if (!b) fail(ErrorKind::Parse, "line 1: header must list param, time, space, out and weight");
    try {
        s.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Parse, std::string("line 1: ") + e.what());
    }
    return s;
}

inline nlohmann::json normalization_to_json(const NormalizationSpec& spec, const PointCloudSchema& schema) {
    nlohmann::json cols = nlohmann::json::array();
    for (std::size_t c = 0; c < spec.columns.size(); ++c) {
        const ColumnNorm& n = spec.columns[c];
        nlohmann::json j;
        j["role"] = to_string(schema.role(static_cast<Index>(c)));
        j["kind"] = to_string(n.kind);
        if (n.kind == NormKind::Standard) {
            j["mean"] = n.stat_a;
            j["std"] = n.stat_b;
        } else if (n.kind == NormKind::MinMaxSym) {
            j["min"] = n.stat_a;
            j["max"] = n.stat_b;
        }
        cols.push_back(j);
    }
    return {{"format", "nif-norm v1"}, {"columns", cols}};
}

inline NormalizationSpec normalization_from_json(const nlohmann::json& j) {
    NormalizationSpec spec;
    try {
        for (const auto& c : j.at("columns")) {
            ColumnNorm n;
            n.kind = parse_norm_kind(c.at("kind").get<std::string>());
            if (n.kind == NormKind::Standard) {
                n.stat_a = c.at("mean").get<double>();
                n.stat_b = c.at("std").get<double>();
            } else if (n.kind == NormKind::MinMaxSym) {
                n.stat_a = c.at("min").get<double>();
                n.stat_b = c.at("max").get<double>();
            }
            spec.columns.push_back(n);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, std::string("normalization sidecar: ") + e.what());
    }
    return spec;
}

/// `dir/wave.csv` -> `dir/wave.norm.json`
inline std::filesystem::path norm_sidecar_path(const std::filesystem::path& csv) {
    std::filesystem::path p = csv;
    p.replace_extension(".norm.json");
    return p;
}

inline void write_matrix_rows(std::ostream& os, const Matrix& m) {
    char buf[32];
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
            if (c) os << ',';
            os << buf;
        }
        os << '\n';
    }
}

/// Writes the CSV and, when the dataset carries normalization, the sidecar.
inline void write_pointcloud(const std::filesystem::path& path, const PointCloudDataset& d) {
    d.validate();
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    os << schema_header(d.schema) << '\n';
    write_matrix_rows(os, d.table);
    if (!os) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
    if (!d.norm.empty()) {
        std::ofstream js(norm_sidecar_path(path));
        if (!js) fail(ErrorKind::Io, "cannot write normalization sidecar for '" + path.string() + "'");
        js << normalization_to_json(d.norm, d.schema).dump(2) << '\n';
    }
}

inline std::vector<double> parse_csv_row(const std::string& line, std::size_t line_no) {
    std::vector<double> vals;
    std::size_t start = 0;
    while (start <= line.size()) {
        std::size_t end = line.find(',', start);
        if (end == std::string::npos) end = line.size();
        const std::string cell = line.substr(start, end - start);
        char* stop = nullptr;
        errno = 0;
        const double v = std::strtod(cell.c_str(), &stop);
        const char* cell_end = cell.c_str() + cell.size();
        const bool blank_tail = stop && std::all_of(static_cast<const char*>(stop), cell_end, [](char ch) {
            return ch == ' ' || ch == '\r' || ch == '\t';
        });
        if (cell.empty() || stop == cell.c_str() || !blank_tail || !std::isfinite(v))
            fail(ErrorKind::Parse, "line " + std::to_string(line_no) + ": non-numeric cell '" + cell + "'");
        vals.push_back(v);
        start = end + 1;
    }
    return vals;
}

inline PointCloudDataset read_pointcloud(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line)) fail(ErrorKind::Parse, "line 1: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    PointCloudDataset d;
    d.schema = parse_schema_header(line);
    const Index width = d.schema.cols();
    std::vector<double> flat;
    std::size_t line_no = 1;
    Index n_rows = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto vals = parse_csv_row(line, line_no);
        if (static_cast<Index>(vals.size()) != width)
            fail(ErrorKind::Parse, "line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                                       " cells, found " + std::to_string(vals.size()));
        flat.insert(flat.end(), vals.begin(), vals.end());
        ++n_rows;
    }
    d.table = Eigen::Map<Matrix>(flat.data(), n_rows, width);
    const auto side = norm_sidecar_path(path);
    if (std::filesystem::exists(side)) {
        std::ifstream js(side);
        nlohmann::json j;
        try {
            js >> j;
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Parse, side.string() + ": " + e.what());
        }
        d.norm = normalization_from_json(j);
        if (static_cast<Index>(d.norm.columns.size()) != width)
            fail(ErrorKind::Parse, side.string() + ": column count does not match the CSV header");
    }
    if (d.schema.has_weight)
        for (Index r = 0; r < d.table.rows(); ++r)
            if (!(d.table(r, d.schema.weight_offset()) > 0.0))
                fail(ErrorKind::Parse, "line " + std::to_string(r + 2) + ": weight must be strictly positive");
    return d;
}

}  // namespace nifkit
