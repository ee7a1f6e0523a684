#pragma once

// Dense linear algebra and seeded sampling shared by every other module.
// All arithmetic is in double precision.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "nifkit/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace nifkit {

/// Batch temporaries of a few hundred kB are allocated and released every
/// step; glibc would serve each from a fresh mmap and page-fault it in. Raise
/// the thresholds once so they are recycled from the heap instead.
inline void tune_allocator() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
        return true;
    }();
    (void)done;
#endif
}

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMatrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Complex = std::complex<double>;
using CVector = Eigen::VectorXcd;

/// Trainable storage. Aligned so that vectorized reductions over views into
/// it split the same way on every allocation.
using ParamVector = std::vector<double, Eigen::aligned_allocator<double>>;
using CMatrix = Eigen::MatrixXcd;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// Seeded 64-bit stream. The engine is mt19937_64; the real-valued transforms
/// are implemented here so that streams do not depend on the standard
/// library's distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1) with 53 random mantissa bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) {
        if (!(a <= b)) fail(ErrorKind::InvalidInput, "uniform range requires a <= b");
        if (a == b) return a;
        double v = a + (b - a) * uniform01();
        return std::min(v, b);
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double rad = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * M_PI * u2;
        spare_ = rad * std::sin(ang);
        has_spare_ = true;
        return rad * std::cos(ang);
    }

    /// N(0, std^2) resampled until |v| <= cutoff * std.
    double trunc_normal(double stddev, double cutoff = 2.0) {
        if (!(stddev > 0.0) || !(cutoff > 0.0))
            fail(ErrorKind::InvalidInput, "truncated normal requires std > 0 and cutoff > 0");
        const double bound = cutoff * stddev;
        for (;;) {
            const double v = stddev * normal();
            if (std::abs(v) <= bound) return v;
        }
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::span<T> v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

struct Uniform {
    double a = 0.0;
    double b = 1.0;
};

struct TruncNormal {
    double stddev = 1.0;
    double cutoff = 2.0;
};

using Distribution = std::variant<Uniform, TruncNormal>;

inline double sample(Rng& rng, const Distribution& dist) {
    return std::visit(
        [&](const auto& d) -> double {
            using D = std::decay_t<decltype(d)>;
            if constexpr (std::is_same_v<D, Uniform>) {
                return rng.uniform(d.a, d.b);
            } else {
                return rng.trunc_normal(d.stddev, d.cutoff);
            }
        },
        dist);
}

inline Matrix random_matrix(Rng& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

// ---------------------------------------------------------------------------
// Factorizations
// ---------------------------------------------------------------------------

struct SvdThin {
    ColMatrix U;  // rows x k, orthonormal columns
    Vector s;     // k values, non-increasing
    ColMatrix V;  // cols x k, orthonormal columns
};

/// Thin SVD, k = min(rows, cols).
inline SvdThin svd_thin(const Eigen::Ref<const ColMatrix>& a) {
    if (a.rows() < 1 || a.cols() < 1) fail(ErrorKind::InvalidInput, "svd of empty matrix");
    if (!a.allFinite()) fail(ErrorKind::InvalidInput, "svd input contains non-finite entries");
    Eigen::JacobiSVD<ColMatrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success)
        fail(ErrorKind::Numeric, "svd did not converge (Jacobi sweeps exhausted)");
    return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

struct PivotedQr {
    ColMatrix Q;            // rows x k
    ColMatrix R;            // k x cols, upper trapezoidal
    std::vector<Index> perm;  // A.col(perm[j]) is column j of Q*R
};

/// Householder QR with column pivoting. At step k the remaining column with
/// the largest norm (recomputed exactly, not downdated) becomes the pivot;
/// equal norms resolve to the lowest original column index.
inline PivotedQr qr_column_pivot(const Eigen::Ref<const ColMatrix>& a) {
    if (!a.allFinite()) fail(ErrorKind::InvalidInput, "qr input contains non-finite entries");
    const Index m = a.rows();
    const Index n = a.cols();
    const Index k = std::min(m, n);
    ColMatrix w = a;
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::vector<Vector> reflectors;
    reflectors.reserve(static_cast<std::size_t>(k));

    for (Index step = 0; step < k; ++step) {
        Index best = step;
        double best_norm = -1.0;
        for (Index j = step; j < n; ++j) {
            const double nj = w.col(j).tail(m - step).squaredNorm();
            if (nj > best_norm || (nj == best_norm && perm[j] < perm[best])) {
                best = j;
                best_norm = nj;
            }
        }
        if (best != step) {
            w.col(step).swap(w.col(best));
            std::swap(perm[step], perm[best]);
        }
        Vector v = w.col(step).tail(m - step);
        const double alpha = v.norm();
        if (alpha == 0.0) {
            reflectors.emplace_back(Vector::Zero(m - step));
            continue;
        }
        const double sign = v(0) >= 0.0 ? 1.0 : -1.0;
        v(0) += sign * alpha;
        v.normalize();
        auto block = w.bottomRightCorner(m - step, n - step);
        block.noalias() -= 2.0 * v * (v.transpose() * block);
        w.col(step).tail(m - step - 1).setZero();
        reflectors.push_back(std::move(v));
    }

    PivotedQr out;
    out.R = w.topRows(k).triangularView<Eigen::Upper>();
    out.Q = ColMatrix::Identity(m, k);
    for (Index step = k - 1; step >= 0; --step) {
        const Vector& v = reflectors[static_cast<std::size_t>(step)];
        if (v.size() == 0 || v.squaredNorm() == 0.0) continue;
        auto block = out.Q.bottomRows(m - step);
        block.noalias() -= 2.0 * v * (v.transpose() * block);
    }
    out.perm = std::move(perm);
    return out;
}

struct LeastSquares {
    ColMatrix x;
    Index rank = 0;
    bool truncated = false;  // true when singular values below the cutoff were dropped
};

/// Minimum-norm least squares through the SVD pseudoinverse; singular values
/// below 1e-12 * s_max are discarded.
inline LeastSquares least_squares(const Eigen::Ref<const ColMatrix>& a,
                                  const Eigen::Ref<const ColMatrix>& b) {
    if (a.rows() != b.rows())
        fail(ErrorKind::InvalidInput, "least_squares: A and b row counts differ");
    if (!b.allFinite()) fail(ErrorKind::InvalidInput, "least_squares: b contains non-finite entries");
    const SvdThin svd = svd_thin(a);
    const double cutoff = svd.s.size() > 0 ? 1e-12 * svd.s(0) : 0.0;
    Index rank = 0;
    for (Index i = 0; i < svd.s.size(); ++i)
        if (svd.s(i) > cutoff) ++rank;
    LeastSquares out;
    out.rank = rank;
    out.truncated = rank < svd.s.size();
    const ColMatrix utb = svd.U.leftCols(rank).transpose() * b;
    const Vector inv = svd.s.head(rank).cwiseInverse();
    out.x = svd.V.leftCols(rank) * (inv.asDiagonal() * utb);
    return out;
}

inline constexpr Index kEigSmallCap = 128;

struct EigResult {
    CVector values;   // non-increasing modulus
    CMatrix vectors;  // column i pairs with values(i), unit 2-norm
};

/// Eigen-decomposition of a small general real matrix (reduced DMD operators).
inline EigResult eig_small(const Eigen::Ref<const ColMatrix>& a) {
    if (a.rows() != a.cols()) fail(ErrorKind::InvalidInput, "eig_small: matrix is not square");
    if (a.rows() > kEigSmallCap)
        fail(ErrorKind::InvalidInput,
             "eig_small: size " + std::to_string(a.rows()) + " exceeds cap " + std::to_string(kEigSmallCap));
    if (!a.allFinite()) fail(ErrorKind::InvalidInput, "eig_small: non-finite entries");
    const Index n = a.rows();
    EigResult out;
    if (n == 0) return out;
    Eigen::EigenSolver<ColMatrix> es(a, true);
    if (es.info() != Eigen::Success) fail(ErrorKind::Numeric, "eig_small: QR iteration did not converge");
    const CVector vals = es.eigenvalues();
    const CMatrix vecs = es.eigenvectors();
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index i, Index j) { return std::abs(vals(i)) > std::abs(vals(j)); });
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Index i = 0; i < n; ++i) {
        out.values(i) = vals(order[static_cast<std::size_t>(i)]);
        out.vectors.col(i) = vecs.col(order[static_cast<std::size_t>(i)]).normalized();
    }
    return out;
}

}  // namespace nifkit
