#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>

#include "collapse_lab/error.hpp"
#include "collapse_lab/rng.hpp"
#include "collapse_lab/synthesis/synthesis.hpp"

namespace collapse_lab {

namespace {

double dot(const Matrix& a, const Matrix& b) { return a.col(0).dot(b.col(0)); }

Matrix random_sphere_point(Rng& rng, Index d) {
    Matrix v = gaussian_matrix(rng, d, 1);
    v.array() -= v.mean();
    return v * (std::sqrt(static_cast<double>(d)) / v.norm());
}

struct Groups {
    Matrix centers;
    std::vector<Index> of;
};

Groups group_targets(const Matrix& targets) {
    const double tol = 1e-9 * std::sqrt(static_cast<double>(targets.rows()));
    Groups g;
    std::vector<Index> firsts;
    for (Index u = 0; u < targets.cols(); ++u) {
        Index found = -1;
        for (std::size_t j = 0; j < firsts.size(); ++j) {
            if ((targets.col(u) - targets.col(firsts[j])).norm() <= tol) {
                found = static_cast<Index>(j);
                break;
            }
        }
        if (found < 0) {
            found = static_cast<Index>(firsts.size());
            firsts.push_back(u);
        }
        g.of.push_back(found);
    }
    g.centers.resize(targets.rows(), static_cast<Index>(firsts.size()));
    for (std::size_t j = 0; j < firsts.size(); ++j) {
        g.centers.col(static_cast<Index>(j)) = targets.col(firsts[j]);
    }
    return g;
}

double margin_cap(const Matrix& centers, double c) {
    const double d = static_cast<double>(centers.rows());
    if (centers.cols() < 2) return 1.0 / (10.0 * c);
    double worst = -1.0;
    for (Index i = 0; i < centers.cols(); ++i) {
        for (Index j = i + 1; j < centers.cols(); ++j) {
            worst = std::max(worst, dot(centers.col(i), centers.col(j)) / d);
        }
    }
    return (1.0 - worst) / (10.0 * c);
}

// Candidate curve from x to h through an optional waypoint, with its parking
// angle; nullopt when the curve is undefined or enters the cap early.
std::optional<Curve> candidate(const Matrix& x, const Matrix& h, const Matrix* waypoint,
                               double cap) {
    const double d = static_cast<double>(x.rows());
    const double theta_c = std::acos(std::clamp(cap / d, -1.0, 1.0));
    Curve curve;
    try {
        if (dot(x, h) >= cap) {
            curve.arcs.push_back(make_arc(x, h));
            curve.park = 0.0;
            return curve;
        }
        if (waypoint == nullptr) {
            curve.arcs.push_back(make_arc(x, h));
        } else {
            if (dot(*waypoint, h) >= cap) return std::nullopt;
            Arc first = make_arc(x, *waypoint);
            if (first.max_dot(h, 0.0, first.angle) >= cap) return std::nullopt;
            curve.arcs.push_back(std::move(first));
            curve.arcs.push_back(make_arc(*waypoint, h));
            curve.detour = true;
        }
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::ZeroVector) throw;
        return std::nullopt;
    }
    curve.park = curve.length() - theta_c;
    return curve;
}

std::optional<CurvePlan> try_plan(const Matrix& starts, const Matrix& targets,
                                  const Groups& groups, double m, double c,
                                  const PlanOptions& options) {
    const Index d = starts.rows();
    const Index U = starts.cols();
    const double cap = static_cast<double>(d) * (1.0 - c * m);
    const double limit = static_cast<double>(d) * (1.0 - m);

    CurvePlan plan;
    plan.starts = starts;
    plan.targets = targets;
    plan.parking.resize(d, U);
    plan.groups = groups.centers;
    plan.group_of = groups.of;
    plan.m = m;
    plan.c = c;
    plan.curvature = 1.0 / std::sqrt(static_cast<double>(d));

    for (Index u = 0; u < U; ++u) {
        const Matrix x = starts.col(u);
        const Matrix h = targets.col(u);
        std::optional<Curve> chosen;
        for (Index attempt = 0; attempt <= options.detour_retries && !chosen; ++attempt) {
            std::optional<Curve> curve;
            if (attempt == 0) {
                curve = candidate(x, h, nullptr, cap);
            } else {
                Rng rng(derive_seed({options.seed, static_cast<std::uint64_t>(u),
                                     static_cast<std::uint64_t>(attempt)}));
                const Matrix w = random_sphere_point(rng, d);
                curve = candidate(x, h, &w, cap);
            }
            if (!curve) continue;
            bool ok = true;
            for (Index v = u + 1; v < U && ok; ++v) {
                ok = curve->max_dot(starts.col(v), 0.0, curve->length()) <= limit;
            }
            for (Index v = 0; v < u && ok; ++v) {
                ok = curve->max_dot(plan.parking.col(v), 0.0, curve->park) <= limit;
            }
            if (ok) chosen = std::move(curve);
        }
        if (!chosen) return std::nullopt;
        plan.parking.col(u) = chosen->at(chosen->park);
        if (chosen->detour) ++plan.detours;
        plan.curves.push_back(std::move(*chosen));
    }
    return plan;
}

}  // namespace

Matrix Arc::at(double t) const { return std::cos(t) * a + std::sin(t) * b; }

double Arc::max_dot(const Matrix& y, double t0, double t1) const {
    const double A = dot(y, a);
    const double B = dot(y, b);
    double best = std::max(A * std::cos(t0) + B * std::sin(t0), A * std::cos(t1) + B * std::sin(t1));
    double peak = std::atan2(B, A);
    if (peak < 0.0) peak += 2.0 * std::numbers::pi;
    if (peak >= t0 && peak <= t1) best = std::hypot(A, B);
    return best;
}

Arc make_arc(const Matrix& from, const Matrix& to) {
    const double radius2 = from.squaredNorm();
    Matrix v = to - (dot(from, to) / radius2) * from;
    const double nv = v.norm();
    require(nv > 1e-9 * to.norm(), ErrorKind::ZeroVector, "arc endpoints are (anti)parallel");
    Arc arc;
    arc.a = from;
    arc.b = v * (std::sqrt(radius2) / nv);
    arc.angle = std::atan2(dot(to, arc.b), dot(to, arc.a));
    return arc;
}

double Curve::length() const {
    double total = 0.0;
    for (const auto& arc : arcs) total += arc.angle;
    return total;
}

Matrix Curve::at(double s) const {
    for (std::size_t i = 0; i + 1 < arcs.size(); ++i) {
        if (s <= arcs[i].angle) return arcs[i].at(s);
        s -= arcs[i].angle;
    }
    return arcs.back().at(std::min(s, arcs.back().angle));
}

double Curve::max_dot(const Matrix& y, double s0, double s1) const {
    double best = -std::numeric_limits<double>::infinity();
    double offset = 0.0;
    for (const auto& arc : arcs) {
        const double lo = std::max(s0, offset);
        const double hi = std::min(s1, offset + arc.angle);
        if (lo <= hi) best = std::max(best, arc.max_dot(y, lo - offset, hi - offset));
        offset += arc.angle;
    }
    return best;
}

CurvePlan plan_curves(const Matrix& starts, const Matrix& targets, const PlanOptions& options) {
    require(starts.rows() == targets.rows() && starts.cols() == targets.cols(),
            ErrorKind::ShapeMismatch, "starts / targets");
    const Groups groups = group_targets(targets);
    double c = options.c;
    for (Index raise = 0; raise <= options.c_raises; ++raise, c *= 2.0) {
        const double hi = margin_cap(groups.centers, c);
        if (hi < options.m_floor) continue;
        if (auto plan = try_plan(starts, targets, groups, hi, c, options)) return *plan;
        auto best = try_plan(starts, targets, groups, options.m_floor, c, options);
        if (!best) continue;
        double lo_m = options.m_floor;
        double hi_m = hi;
        for (int it = 0; it < 40; ++it) {
            const double mid = std::sqrt(lo_m * hi_m);
            if (auto plan = try_plan(starts, targets, groups, mid, c, options)) {
                lo_m = mid;
                best = std::move(plan);
            } else {
                hi_m = mid;
            }
        }
        return *best;
    }
    throw Error(ErrorKind::MarginBelowFloor, "no curve plan with margin above the floor");
}

}  // namespace collapse_lab
