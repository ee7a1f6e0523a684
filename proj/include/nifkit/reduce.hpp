#pragma once

// Linear reduction: POD, QDEIM sensor placement and reconstruction, NIF
// latent-mode normalization, exact DMD, and the NIF sparse-sensing dataset.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "nifkit/datagen.hpp"
#include "nifkit/models.hpp"

namespace nifkit {

// ---------------------------------------------------------------------------
// POD
// ---------------------------------------------------------------------------

struct SvdResult {
    ColMatrix Psi;  // M_x x r, orthonormal columns
    Vector sigma;   // r, non-increasing
    ColMatrix V;    // M_t x r
    Index r = 0;
};

struct PodResult {
    SvdResult basis;
    ColMatrix coeffs;           // r x M_t, alpha(t) = Psi^T u(t)
    Vector all_sigma;           // every singular value of the snapshot matrix
    double residual = 0.0;      // ||U - Psi Psi^T U||_F^2, computed directly
    double tail_energy = 0.0;   // sum of sigma_i^2 for i > r
};

inline PodResult pod(const Eigen::Ref<const ColMatrix>& snapshots, Index r) {
    const Index mx = snapshots.rows();
    const Index mt = snapshots.cols();
    require(mx >= 1 && mt >= 1, "pod: empty snapshot matrix");
    require(r >= 0 && r <= std::min(mx, mt),
            "pod: rank " + std::to_string(r) + " exceeds min(M_x, M_t) = " + std::to_string(std::min(mx, mt)));
    const SvdThin svd = svd_thin(snapshots);
    PodResult out;
    out.all_sigma = svd.s;
    out.basis.r = r;
    out.basis.Psi = svd.U.leftCols(r);
    out.basis.sigma = svd.s.head(r);
    out.basis.V = svd.V.leftCols(r);
    out.coeffs = out.basis.Psi.transpose() * snapshots;
    out.residual = (snapshots - out.basis.Psi * out.coeffs).squaredNorm();
    out.tail_energy = svd.s.tail(svd.s.size() - r).squaredNorm();
    return out;
}

// ---------------------------------------------------------------------------
// QDEIM
// ---------------------------------------------------------------------------

struct QdeimSelection {
    std::vector<Index> indices;  // best first
    Index n_rows = 0;            // M_x

    ColMatrix measurement_matrix() const {
        ColMatrix c = ColMatrix::Zero(static_cast<Index>(indices.size()), n_rows);
        for (std::size_t i = 0; i < indices.size(); ++i) c(static_cast<Index>(i), indices[i]) = 1.0;
        return c;
    }
    Index p() const { return static_cast<Index>(indices.size()); }
};

inline QdeimSelection qdeim_select(const Eigen::Ref<const ColMatrix>& psi, Index p) {
    const Index r = psi.cols();
    require(r >= 1, "qdeim: basis has no columns");
    if (p != r)
        fail(ErrorKind::Unsupported, "qdeim: sensor count p = " + std::to_string(p) + " must equal rank r = " +
                                         std::to_string(r) + "; refit the POD basis at rank " + std::to_string(p));
    const PivotedQr qr = qr_column_pivot(psi.transpose());
    QdeimSelection s;
    s.n_rows = psi.rows();
    s.indices.assign(qr.perm.begin(), qr.perm.begin() + p);
    return s;
}

/// Rows of Psi picked by the selection (C Psi).
inline ColMatrix sensor_rows(const QdeimSelection& sel, const Eigen::Ref<const ColMatrix>& psi) {
    ColMatrix m(sel.p(), psi.cols());
    for (Index i = 0; i < sel.p(); ++i) {
        const Index g = sel.indices[static_cast<std::size_t>(i)];
        require(g >= 0 && g < psi.rows(), "sensor index " + std::to_string(g) + " out of range");
        m.row(i) = psi.row(g);
    }
    return m;
}

inline constexpr double kDeimConditionLimit = 1e12;

/// u_hat = Psi (C Psi)^+ y; y may hold several snapshots as columns.
inline ColMatrix deim_reconstruct(const QdeimSelection& sel, const Eigen::Ref<const ColMatrix>& psi,
                                  const Eigen::Ref<const ColMatrix>& y) {
    require(y.rows() == sel.p(), "deim: expected " + std::to_string(sel.p()) + " sensor values per column, got " +
                                     std::to_string(y.rows()));
    const ColMatrix cpsi = sensor_rows(sel, psi);
    const SvdThin svd = svd_thin(cpsi);
    const double smin = svd.s(svd.s.size() - 1);
    const double cond = smin > 0.0 ? svd.s(0) / smin : std::numeric_limits<double>::infinity();
    if (!(cond < kDeimConditionLimit))
        fail(ErrorKind::Conditioning, "deim: C*Psi has condition number " + std::to_string(cond));
    return psi * least_squares(cpsi, y).x;
}

// ---------------------------------------------------------------------------
// Snapshot grouping
// ---------------------------------------------------------------------------

/// Rows grouped into snapshots by their condition columns (param + time), in
/// first-appearance order. Every snapshot must list the same number of points.
struct SnapshotIndex {
    std::vector<std::vector<Index>> rows;  // per snapshot, in table order
    Index points_per_snapshot = 0;
};

inline SnapshotIndex snapshot_index(const PointCloudDataset& ds) {
    const Index nc = ds.schema.cond_dim();
    SnapshotIndex idx;
    std::map<std::vector<double>, std::size_t> where;
    for (Index r = 0; r < ds.rows(); ++r) {
        std::vector<double> key(static_cast<std::size_t>(nc));
        for (Index c = 0; c < nc; ++c) key[static_cast<std::size_t>(c)] = ds.table(r, c);
        auto [it, inserted] = where.emplace(std::move(key), idx.rows.size());
        if (inserted) idx.rows.emplace_back();
        idx.rows[it->second].push_back(r);
    }
    if (idx.rows.empty()) fail(ErrorKind::InvalidInput, "dataset has no rows");
    idx.points_per_snapshot = static_cast<Index>(idx.rows.front().size());
    for (std::size_t s = 0; s < idx.rows.size(); ++s)
        if (static_cast<Index>(idx.rows[s].size()) != idx.points_per_snapshot)
            fail(ErrorKind::InvalidInput, "snapshot " + std::to_string(s) + " has " + std::to_string(idx.rows[s].size()) +
                                              " points, expected " + std::to_string(idx.points_per_snapshot));
    return idx;
}

/// M_x x M_t matrix of output column `out` in physical units.
inline ColMatrix snapshot_matrix(const PointCloudDataset& ds, Index out = 0) {
    require(out >= 0 && out < ds.schema.d_out, "snapshot_matrix: output column out of range");
    const SnapshotIndex idx = snapshot_index(ds);
    const Index col = ds.schema.out_offset() + out;
    const ColumnNorm norm = ds.norm.empty() ? ColumnNorm{} : ds.norm.columns[static_cast<std::size_t>(col)];
    ColMatrix u(idx.points_per_snapshot, static_cast<Index>(idx.rows.size()));
    for (std::size_t s = 0; s < idx.rows.size(); ++s)
        for (Index i = 0; i < idx.points_per_snapshot; ++i)
            u(i, static_cast<Index>(s)) = norm.invert(ds.table(idx.rows[s][static_cast<std::size_t>(i)], col));
    return u;
}

// ---------------------------------------------------------------------------
// NIF latent modes
// ---------------------------------------------------------------------------

/// Spatial modes phi_i of a last-layer NIF at the given points: column
/// i * d_out + l holds component l of mode i. `offset` receives the
/// zeta-independent part when non-null.
inline Matrix nif_mode_fields(const NifModel& model, const Matrix& points, Matrix* offset = nullptr) {
    require(model.config().pnet.target == NifMode::LastLayer, "mode fields need a last-layer NIF");
    const Index r = model.latent_dim();
    const Index d_out = model.out_dim();
    const Matrix h = model.features(points);
    const FlatParamLayout& hl = model.hyper_layout();
    const Segment& ws = hl.weights[0];
    const Segment& bs = hl.biases[0];
    const ConstColMap a(model.head_weight().data(), hl.total, r);
    Matrix out(points.rows(), r * d_out);
    for (Index i = 0; i < r; ++i) {
        const ConstColMap w(a.col(i).data() + ws.offset, ws.rows, ws.cols);
        Matrix phi = h * w.transpose();
        if (bs.rows > 0) phi.rowwise() += a.col(i).segment(bs.offset, bs.rows).transpose();
        out.middleCols(i * d_out, d_out) = phi;
    }
    if (offset) {
        const Eigen::Map<const Vector> c(model.head_bias().data(), hl.total);
        const ConstColMap w(c.data() + ws.offset, ws.rows, ws.cols);
        *offset = h * w.transpose();
        if (bs.rows > 0) offset->rowwise() += c.segment(bs.offset, bs.rows).transpose();
    }
    return out;
}

struct NormalizedModes {
    Vector c;                            // r normalization constants
    ColMatrix zeta;                      // r x M_t, zeta_i = c_i a_i
    std::shared_ptr<const NifModel> model;

    Index rank() const { return c.size(); }

    /// phi_i / c_i at arbitrary points (same column layout as nif_mode_fields).
    Matrix eval(const Matrix& points) const {
        Matrix phi = nif_mode_fields(*model, points);
        const Index d_out = model->out_dim();
        for (Index i = 0; i < rank(); ++i) phi.middleCols(i * d_out, d_out) /= c(i);
        return phi;
    }
};

inline NormalizedModes nif_modes_normalize(const NifModel& model, const Matrix& quad_points, const Vector& quad_weights,
                                           const Eigen::Ref<const ColMatrix>& latent) {
    require(quad_points.rows() == quad_weights.size(), "mode normalization: one weight per quadrature point required");
    require(quad_points.rows() >= 1, "mode normalization: empty quadrature");
    require((quad_weights.array() > 0.0).all(), "mode normalization: quadrature weights must be positive");
    const Index r = model.latent_dim();
    require(latent.rows() == r, "mode normalization: latent series must have " + std::to_string(r) + " rows");
    const Index d_out = model.out_dim();
    const Matrix phi = nif_mode_fields(model, quad_points);
    NormalizedModes out;
    out.c.resize(r);
    for (Index i = 0; i < r; ++i) {
        const double e = quad_weights.dot(phi.middleCols(i * d_out, d_out).rowwise().squaredNorm());
        out.c(i) = std::sqrt(e);
        if (!(out.c(i) >= 1e-12))
            fail(ErrorKind::DegenerateMode, "mode " + std::to_string(i) + " has norm " + std::to_string(out.c(i)));
    }
    out.zeta = out.c.asDiagonal() * latent;
    out.model = std::make_shared<NifModel>(model);
    return out;
}

// ---------------------------------------------------------------------------
// DMD
// ---------------------------------------------------------------------------

inline constexpr double kDmdTruncation = 1e-10;

struct DmdResult {
    CVector eigenvalues;  // non-increasing modulus
    CMatrix modes;        // r x k, exact DMD modes X' V S^-1 w
    CVector amplitudes;   // modes * amplitudes ~ first snapshot
    Vector frequencies;   // Im(ln lambda) / (2 pi dt)
    Vector growth_rates;  // Re(ln lambda) / dt
    double dt = 1.0;
    Index rank = 0;
    std::vector<std::string> warnings;
};

inline DmdResult dmd(const Eigen::Ref<const ColMatrix>& z, double dt, Index rank) {
    require(z.cols() >= 3, "dmd: need at least 3 snapshots");
    require(dt > 0.0, "dmd: dt must be positive");
    require(rank >= 1 && rank <= z.rows(), "dmd: rank must be in [1, " + std::to_string(z.rows()) + "]");
    const Index mt = z.cols();
    const ColMatrix x = z.leftCols(mt - 1);
    const ColMatrix xp = z.rightCols(mt - 1);
    const SvdThin svd = svd_thin(x);
    DmdResult out;
    out.dt = dt;
    Index k = std::min(rank, svd.s.size());
    Index kept = 0;
    while (kept < k && svd.s(kept) >= kDmdTruncation * svd.s(0) && svd.s(kept) > 0.0) ++kept;
    if (kept < k)
        out.warnings.push_back("dmd: snapshot matrix is rank deficient, truncated from rank " + std::to_string(k) +
                               " to " + std::to_string(kept));
    k = kept;
    if (k == 0) fail(ErrorKind::Numeric, "dmd: snapshot matrix is zero");
    out.rank = k;
    const ColMatrix u = svd.U.leftCols(k);
    const ColMatrix vs = svd.V.leftCols(k) * svd.s.head(k).cwiseInverse().asDiagonal();
    const ColMatrix xpvs = xp * vs;
    const ColMatrix atilde = u.transpose() * xpvs;
    const EigResult eig = eig_small(atilde);
    out.eigenvalues = eig.values;
    out.modes = xpvs.cast<Complex>() * eig.vectors;
    for (Index j = 0; j < k; ++j)
        if (std::abs(out.eigenvalues(j)) > 0.0) out.modes.col(j) /= out.eigenvalues(j);
    out.amplitudes = out.modes.colPivHouseholderQr().solve(z.col(0).cast<Complex>());
    out.frequencies.resize(k);
    out.growth_rates.resize(k);
    for (Index j = 0; j < k; ++j) {
        const Complex lg = std::log(out.eigenvalues(j));
        out.frequencies(j) = lg.imag() / (2.0 * std::numbers::pi * dt);
        out.growth_rates(j) = lg.real() / dt;
    }
    return out;
}

/// Spatial DMD modes sum_i w_i phi~_i(x): column j * d_out + l.
inline CMatrix dmd_mode_field(const DmdResult& d, const NormalizedModes& basis, const Matrix& points) {
    require(d.modes.rows() == basis.rank(), "dmd_mode_field: DMD was fitted on a different latent rank");
    const Index d_out = basis.model->out_dim();
    const Matrix phi = basis.eval(points);
    CMatrix out = CMatrix::Zero(points.rows(), d.modes.cols() * d_out);
    for (Index j = 0; j < d.modes.cols(); ++j)
        for (Index i = 0; i < basis.rank(); ++i)
            out.middleCols(j * d_out, d_out) += d.modes(i, j) * phi.middleCols(i * d_out, d_out).cast<Complex>();
    return out;
}

inline nlohmann::json to_json(const DmdResult& d) {
    nlohmann::json j;
    j["dt"] = d.dt;
    j["rank"] = d.rank;
    j["eigenvalues"] = nlohmann::json::array();
    for (Index i = 0; i < d.eigenvalues.size(); ++i)
        j["eigenvalues"].push_back({{"re", d.eigenvalues(i).real()},
                                    {"im", d.eigenvalues(i).imag()},
                                    {"abs", std::abs(d.eigenvalues(i))},
                                    {"frequency", d.frequencies(i)},
                                    {"growth_rate", d.growth_rates(i)},
                                    {"amplitude_abs", std::abs(d.amplitudes(i))}});
    j["warnings"] = d.warnings;
    return j;
}

/// Grid coordinates then re/im column pairs per field column.
inline void write_complex_fields_csv(const std::filesystem::path& path, const Matrix& points, const CMatrix& fields,
                                     const std::string& prefix = "mode") {
    require(points.rows() == fields.rows(), "csv: point and field row counts differ");
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    os.precision(17);
    for (Index c = 0; c < points.cols(); ++c) os << (c ? "," : "") << "x" << c;
    for (Index c = 0; c < fields.cols(); ++c) os << "," << prefix << c << "_re," << prefix << c << "_im";
    os << "\n";
    for (Index r = 0; r < points.rows(); ++r) {
        for (Index c = 0; c < points.cols(); ++c) os << (c ? "," : "") << points(r, c);
        for (Index c = 0; c < fields.cols(); ++c) os << "," << fields(r, c).real() << "," << fields(r, c).imag();
        os << "\n";
    }
    if (!os) fail(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// NIF sparse sensing
// ---------------------------------------------------------------------------

/// Rows (sensor values at t, x, u(x, t)) for every snapshot and point. Sensor
/// indices address points within a snapshot (table order). The result is
/// normalized with a fresh standard fit on its own raw values.
inline PointCloudDataset nif_sparse_sensing_build(std::span<const Index> sensors, const PointCloudDataset& ds,
                                                  Index out = 0) {
    require(!sensors.empty(), "sparse sensing: no sensors given");
    require(out >= 0 && out < ds.schema.d_out, "sparse sensing: output column out of range");
    const SnapshotIndex idx = snapshot_index(ds);
    for (Index g : sensors)
        if (g < 0 || g >= idx.points_per_snapshot)
            fail(ErrorKind::InvalidInput, "sparse sensing: sensor index " + std::to_string(g) + " out of range [0, " +
                                              std::to_string(idx.points_per_snapshot) + ")");
    const Matrix raw_in = ds.norm.empty() ? ds.table : ds.norm.invert(ds.table);
    const Index p = static_cast<Index>(sensors.size());
    const Index ds_ = ds.schema.d_space;
    PointCloudSchema schema{p, 0, ds_, 1, false};
    Matrix raw(static_cast<Index>(idx.rows.size()) * idx.points_per_snapshot, schema.cols());
    Index row = 0;
    const Index ucol = ds.schema.out_offset() + out;
    for (const auto& snap : idx.rows) {
        Vector y(p);
        for (Index k = 0; k < p; ++k) y(k) = raw_in(snap[static_cast<std::size_t>(sensors[static_cast<std::size_t>(k)])], ucol);
        for (Index r : snap) {
            raw.row(row).head(p) = y.transpose();
            raw.row(row).segment(p, ds_) = raw_in.row(r).segment(ds.schema.space_offset(), ds_);
            raw(row, p + ds_) = raw_in(r, ucol);
            ++row;
        }
    }
    PointCloudDataset d;
    d.schema = schema;
    auto kinds = standard_kinds(schema);
    for (Index c = 0; c < raw.cols(); ++c)
        if ((raw.col(c).array() == raw(0, c)).all()) kinds[static_cast<std::size_t>(c)] = NormKind::Identity;
    d.norm = NormalizationSpec::fit(raw, kinds);
    d.table = d.norm.apply(raw);
    return d;
}

}  // namespace nifkit
