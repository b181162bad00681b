#pragma once

#include "dobcbf/hocbf.hpp"

#include <limits>
#include <string>
#include <vector>

namespace dobcbf {

/// min 1/2 (u - u_ref)' P (u - u_ref)  s.t.  coeff_i · u >= rhs_i,  u in box.
struct QpProblem {
    Eigen::MatrixXd weight;
    ControlVector u_ref;
    std::vector<AffineConstraint> ineqs;
    BoxSet box;

    Eigen::Index dim() const { return u_ref.size(); }

    double objective(const ControlVector& u) const {
        const Eigen::VectorXd e = u - u_ref;
        return 0.5 * e.dot(weight * e);
    }

    void validate() const {
        const Eigen::Index m = dim();
        if (weight.rows() != m || weight.cols() != m) throw ContractError("QpProblem: weight is not m x m");
        if (box.dim() != m) throw ContractError("QpProblem: box dimension mismatch");
        if (!u_ref.allFinite()) throw ContractError("QpProblem: non-finite u_ref");
        for (const auto& c : ineqs) {
            if (c.coeff.size() != m) throw ContractError("QpProblem: constraint dimension mismatch");
            if (!c.coeff.allFinite() || !std::isfinite(c.rhs)) {
                throw ContractError("QpProblem: non-finite constraint");
            }
        }
    }
};

enum class QpStatus { optimal, relaxed, failed };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::optimal: return "optimal";
        case QpStatus::relaxed: return "relaxed";
        case QpStatus::failed: return "failed";
    }
    return "unknown";
}

struct QpSolution {
    ControlVector u;
    QpStatus status = QpStatus::failed;
    std::vector<double> slacks;            ///< per inequality, max(0, rhs - coeff·u)
    std::vector<double> multipliers;       ///< per inequality
    Eigen::VectorXd box_lower_multipliers;
    Eigen::VectorXd box_upper_multipliers;
    std::vector<double> slack_multipliers; ///< relaxed solves only: rows s_i >= 0
    double kkt_residual = std::numeric_limits<double>::infinity();
    int iterations = 0;
    std::string message;
};

struct QpOptions {
    double rho = 1e6;               ///< slack penalty rho * sum s_i^2 in the relaxed re-solve
    int max_iterations = 0;         ///< 0 = 100 * m
    double rank_tol = 1e-12;        ///< relative pivot threshold for active-set rank
    double feasibility_tol = 1e-9;
};

namespace detail {

/// Dense Goldfarb-Idnani dual active-set method for
///     min 1/2 z'Hz + c'z  s.t.  N_j' z >= b_j,
/// started from a given z (normally the unconstrained minimizer). Active-set
/// quantities are recomputed from small dense solves at every step, which is
/// cheap at the sizes this library targets.
struct DualActiveSet {
    enum class Outcome { optimal, infeasible, singular, iteration_limit };

    Outcome outcome = Outcome::optimal;
    Eigen::VectorXd z;
    Eigen::VectorXd lambda;  ///< one per constraint column
    int iterations = 0;

    DualActiveSet(const Eigen::MatrixXd& H, const Eigen::MatrixXd& N, const Eigen::VectorXd& b,
                  Eigen::VectorXd z0, int max_iterations, double reg, double tol) {
        const Eigen::Index nz = H.rows();
        const Eigen::Index nc = N.cols();
        const Eigen::VectorXd z_start = z0;
        z = std::move(z0);
        lambda = Eigen::VectorXd::Zero(nc);

        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success) {
            outcome = Outcome::singular;
            return;
        }
        const Eigen::MatrixXd L = llt.matrixL();
        // Constraint columns in the H-whitened coordinates w = L'z.
        const Eigen::MatrixXd B = L.triangularView<Eigen::Lower>().solve(N);

        std::vector<Eigen::Index> active;
        std::vector<double> act_lambda;

        auto violation = [&](Eigen::Index j) { return N.col(j).dot(z) - b[j]; };

        while (true) {
            // Most violated inactive constraint; ties resolved to the lowest index.
            Eigen::Index p = -1;
            double worst = 0.0;
            for (Eigen::Index j = 0; j < nc; ++j) {
                if (std::find(active.begin(), active.end(), j) != active.end()) continue;
                const double s = violation(j);
                if (s < -tol * (1.0 + std::abs(b[j])) && s < worst) {
                    worst = s;
                    p = j;
                }
            }
            if (p < 0) break;
            if (++iterations > max_iterations) {
                outcome = Outcome::iteration_limit;
                return;
            }

            std::vector<double> lam_plus = act_lambda;
            lam_plus.push_back(0.0);
            const Eigen::VectorXd np = N.col(p);
            const Eigen::VectorXd cp = B.col(p);

            while (true) {
                const Eigen::Index q = static_cast<Eigen::Index>(active.size());
                // r solves the least-squares problem min |Ba r - cp|; the residual
                // is the whitened step direction.
                Eigen::VectorXd r(q);
                Eigen::VectorXd resid = cp;
                double col_scale = cp.norm();
                if (q > 0) {
                    Eigen::MatrixXd Ba(nz, q);
                    for (Eigen::Index k = 0; k < q; ++k) Ba.col(k) = B.col(active[k]);
                    col_scale = std::max(col_scale, Ba.colwise().norm().maxCoeff());
                    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Ba);
                    qr.setThreshold(reg);
                    if (qr.rank() < q) {
                        outcome = Outcome::singular;
                        return;
                    }
                    r = qr.solve(cp);
                    if (!r.allFinite()) {
                        outcome = Outcome::singular;
                        return;
                    }
                    resid -= Ba * r;
                }
                const Eigen::VectorXd dir =
                    L.transpose().triangularView<Eigen::Upper>().solve(resid);
                // np dependent on the active rows leaves only rounding in resid.
                // Tested on the same scale as the rank threshold, but looser, so
                // a row accepted here never makes the active set rank deficient.
                const bool dir_zero =
                    q >= nz || resid.norm() <= 100.0 * reg * std::max(col_scale, 1e-300);

                double t1 = std::numeric_limits<double>::infinity();
                Eigen::Index drop = -1;
                for (Eigen::Index k = 0; k < q; ++k) {
                    if (r[k] > 1e-14) {
                        const double ratio = lam_plus[k] / r[k];
                        if (ratio < t1) {
                            t1 = ratio;
                            drop = k;
                        }
                    }
                }
                double t2 = std::numeric_limits<double>::infinity();
                if (!dir_zero) {
                    const double curv = resid.squaredNorm();
                    if (curv > 0.0) t2 = -violation(p) / curv;
                }
                const double t = std::min(t1, t2);
                if (!std::isfinite(t)) {
                    outcome = Outcome::infeasible;
                    return;
                }

                for (Eigen::Index k = 0; k < q; ++k) lam_plus[k] -= t * r[k];
                lam_plus.back() += t;

                if (std::isfinite(t2)) z += t * dir;

                if (t2 <= t1) {
                    active.push_back(p);
                    act_lambda = lam_plus;
                    break;
                }
                active.erase(active.begin() + drop);
                lam_plus.erase(lam_plus.begin() + drop);
                if (++iterations > max_iterations) {
                    outcome = Outcome::iteration_limit;
                    return;
                }
            }
        }

        // Active rows are not re-checked inside the loop; rounding on nearly
        // dependent rows can leave one of them violated, which only happens
        // on the way to an infeasibility certificate.
        for (Eigen::Index j = 0; j < nc; ++j) {
            const double scale = 1.0 + std::abs(b[j]) + N.col(j).norm() * z.norm();
            if (violation(j) < -1e3 * tol * scale) {
                outcome = Outcome::infeasible;
                return;
            }
        }
        polish(H, N, b, z_start, active, act_lambda, tol);
        for (std::size_t k = 0; k < active.size(); ++k) lambda[active[k]] = std::max(0.0, act_lambda[k]);
    }

    /// Re-solve the equality problem on the final active set in one shot. The
    /// incremental updates drift off the active rows when the multipliers are
    /// large; the polished point is kept only if it stays dual and primal feasible.
    void polish(const Eigen::MatrixXd& H, const Eigen::MatrixXd& N, const Eigen::VectorXd& b,
                const Eigen::VectorXd& z_start, const std::vector<Eigen::Index>& active,
                std::vector<double>& act_lambda, double tol) {
        const Eigen::Index q = static_cast<Eigen::Index>(active.size());
        if (q == 0) return;
        const Eigen::Index nz = H.rows();
        // [H -Na; Na' 0] (z, lam) = (H z_start, b_a)
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(nz + q, nz + q);
        Eigen::VectorXd rhs(nz + q);
        K.topLeftCorner(nz, nz) = H;
        rhs.head(nz) = H * z_start;
        for (Eigen::Index k = 0; k < q; ++k) {
            K.block(0, nz + k, nz, 1) = -N.col(active[k]);
            K.block(nz + k, 0, 1, nz) = N.col(active[k]).transpose();
            rhs[nz + k] = b[active[k]];
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
        if (!lu.isInvertible()) return;
        const Eigen::VectorXd sol = lu.solve(rhs);
        if (!sol.allFinite()) return;
        const Eigen::VectorXd zp = sol.head(nz);
        const Eigen::VectorXd lam = sol.tail(q);
        const double lam_scale = 1.0 + lam.cwiseAbs().maxCoeff();
        if ((lam.array() < -1e-9 * lam_scale).any()) return;
        for (Eigen::Index j = 0; j < N.cols(); ++j) {
            const double scale = 1.0 + std::abs(b[j]) + N.col(j).norm() * zp.norm();
            if (N.col(j).dot(zp) - b[j] < -tol * scale) return;
        }
        z = zp;
        for (Eigen::Index k = 0; k < q; ++k) act_lambda[k] = lam[k];
    }
};

}  // namespace detail

inline double verify_kkt(const QpProblem& p, const QpSolution& sol, const QpOptions& opt = {});

/// Solver with reusable scratch storage; one instance per trajectory.
class QpSolver {
public:
    explicit QpSolver(QpOptions opt = {}) : opt_(opt) {}

    const QpOptions& options() const { return opt_; }

    QpSolution solve(const QpProblem& p) {
        p.validate();
        const Eigen::Index m = p.dim();
        const int max_iter = opt_.max_iterations > 0 ? opt_.max_iterations : 100 * static_cast<int>(m);

        // Identical coefficient rows: keep the tightest.
        rows_.clear();
        for (std::size_t i = 0; i < p.ineqs.size(); ++i) {
            bool merged = false;
            for (auto& r : rows_) {
                if (p.ineqs[r].coeff == p.ineqs[i].coeff) {
                    if (p.ineqs[i].rhs > p.ineqs[r].rhs) r = i;
                    merged = true;
                    break;
                }
            }
            if (!merged) rows_.push_back(i);
        }
        const Eigen::Index q = static_cast<Eigen::Index>(rows_.size());

        QpSolution sol;
        sol.multipliers.assign(p.ineqs.size(), 0.0);
        sol.box_lower_multipliers = Eigen::VectorXd::Zero(m);
        sol.box_upper_multipliers = Eigen::VectorXd::Zero(m);

        // Hard problem: barrier rows, then box lower, then box upper.
        Eigen::MatrixXd N(m, q + 2 * m);
        Eigen::VectorXd b(q + 2 * m);
        for (Eigen::Index k = 0; k < q; ++k) {
            N.col(k) = p.ineqs[rows_[k]].coeff;
            b[k] = p.ineqs[rows_[k]].rhs;
        }
        N.middleCols(q, m) = Eigen::MatrixXd::Identity(m, m);
        b.segment(q, m) = p.box.lower();
        N.rightCols(m) = -Eigen::MatrixXd::Identity(m, m);
        b.tail(m) = -p.box.upper();

        detail::DualActiveSet hard(p.weight, N, b, p.u_ref, max_iter, opt_.rank_tol,
                                   opt_.feasibility_tol);
        sol.iterations = hard.iterations;

        if (hard.outcome == detail::DualActiveSet::Outcome::optimal) {
            sol.u = p.box.clamp(hard.z);
            sol.status = QpStatus::optimal;
            for (Eigen::Index k = 0; k < q; ++k) sol.multipliers[rows_[k]] = hard.lambda[k];
            sol.box_lower_multipliers = hard.lambda.segment(q, m);
            sol.box_upper_multipliers = hard.lambda.tail(m);
            sol.slacks.assign(p.ineqs.size(), 0.0);
            sol.kkt_residual = verify_kkt(p, sol, opt_);
            return sol;
        }
        if (hard.outcome != detail::DualActiveSet::Outcome::infeasible) {
            return fail(p, sol, hard.outcome);
        }

        // Relaxed problem over z = (u, s') with s' = sqrt(2 rho) s: every barrier
        // row gets its own slack with penalty rho |s|^2 = 1/2 |s'|^2; the box stays
        // hard. The scaling keeps the Hessian at unit size.
        const Eigen::Index nr = static_cast<Eigen::Index>(p.ineqs.size());
        const Eigen::Index nz = m + nr;
        const double root_rho = std::sqrt(2.0 * opt_.rho);
        Eigen::MatrixXd H = Eigen::MatrixXd::Identity(nz, nz);
        H.topLeftCorner(m, m) = p.weight;
        Eigen::MatrixXd Nr = Eigen::MatrixXd::Zero(nz, 2 * nr + 2 * m);
        Eigen::VectorXd br(2 * nr + 2 * m);
        for (Eigen::Index k = 0; k < nr; ++k) {
            Nr.col(k).head(m) = p.ineqs[k].coeff;
            Nr(m + k, k) = 1.0 / root_rho;
            br[k] = p.ineqs[k].rhs;
            Nr(m + k, nr + k) = 1.0;
            br[nr + k] = 0.0;
        }
        Nr.block(0, 2 * nr, m, m) = Eigen::MatrixXd::Identity(m, m);
        br.segment(2 * nr, m) = p.box.lower();
        Nr.block(0, 2 * nr + m, m, m) = -Eigen::MatrixXd::Identity(m, m);
        br.tail(m) = -p.box.upper();
        Eigen::VectorXd z0(nz);
        z0 << p.u_ref, Eigen::VectorXd::Zero(nr);

        detail::DualActiveSet soft(H, Nr, br, z0, max_iter + 200 * static_cast<int>(nr),
                                   opt_.rank_tol, opt_.feasibility_tol);
        sol.iterations += soft.iterations;
        if (soft.outcome != detail::DualActiveSet::Outcome::optimal) return fail(p, sol, soft.outcome);

        sol.u = p.box.clamp(soft.z.head(m));
        sol.slack_multipliers.assign(p.ineqs.size(), 0.0);
        for (Eigen::Index k = 0; k < nr; ++k) {
            sol.multipliers[k] = soft.lambda[k];
            sol.slack_multipliers[k] = root_rho * soft.lambda[nr + k];
        }
        sol.box_lower_multipliers = soft.lambda.segment(2 * nr, m);
        sol.box_upper_multipliers = soft.lambda.tail(m);
        sol.slacks.resize(p.ineqs.size());
        bool any_slack = false;
        for (std::size_t i = 0; i < p.ineqs.size(); ++i) {
            sol.slacks[i] = std::max(0.0, p.ineqs[i].rhs - p.ineqs[i].coeff.dot(sol.u));
            any_slack = any_slack || sol.slacks[i] > 0.0;
        }
        sol.status = any_slack ? QpStatus::relaxed : QpStatus::optimal;
        if (!any_slack) sol.slack_multipliers.clear();
        sol.kkt_residual = verify_kkt(p, sol, opt_);
        return sol;
    }

private:
    QpSolution fail(const QpProblem& p, QpSolution sol, detail::DualActiveSet::Outcome why) const {
        sol.status = QpStatus::failed;
        sol.u = p.box.clamp(p.u_ref);
        sol.slacks.assign(p.ineqs.size(), 0.0);
        switch (why) {
            case detail::DualActiveSet::Outcome::iteration_limit: sol.message = "iteration cap exceeded"; break;
            case detail::DualActiveSet::Outcome::infeasible:
                sol.message = "slack problem reported infeasible (numerical breakdown)";
                break;
            default: sol.message = "active constraint rows numerically dependent"; break;
        }
        return sol;
    }

    QpOptions opt_;
    std::vector<std::size_t> rows_;
};

inline QpSolution solve(const QpProblem& p, const QpOptions& opt = {}) {
    QpSolver solver(opt);
    return solver.solve(p);
}

/// Max-norm of the KKT residuals (stationarity, primal feasibility, dual
/// feasibility, complementarity) of `sol` for `p`, using the multipliers the
/// solution reports. Relaxed solutions are checked against the slack problem.
inline double verify_kkt(const QpProblem& p, const QpSolution& sol, const QpOptions& opt) {
    const Eigen::Index m = p.dim();
    if (sol.u.size() != m) return std::numeric_limits<double>::infinity();
    const bool relaxed = !sol.slack_multipliers.empty();
    const auto lambda_of = [&](std::size_t i) {
        return i < sol.multipliers.size() ? sol.multipliers[i] : 0.0;
    };
    const Eigen::VectorXd lo_mult = sol.box_lower_multipliers.size() == m
                                        ? sol.box_lower_multipliers
                                        : Eigen::VectorXd::Zero(m);
    const Eigen::VectorXd hi_mult = sol.box_upper_multipliers.size() == m
                                        ? sol.box_upper_multipliers
                                        : Eigen::VectorXd::Zero(m);

    double res = 0.0;
    Eigen::VectorXd grad = p.weight * (sol.u - p.u_ref);
    for (std::size_t i = 0; i < p.ineqs.size(); ++i) grad -= lambda_of(i) * p.ineqs[i].coeff;
    grad -= lo_mult;
    grad += hi_mult;
    res = std::max(res, grad.lpNorm<Eigen::Infinity>());

    for (Eigen::Index j = 0; j < m; ++j) {
        const double lo_gap = sol.u[j] - p.box.lower()[j];
        const double hi_gap = p.box.upper()[j] - sol.u[j];
        res = std::max({res, -lo_gap, -hi_gap, -lo_mult[j], -hi_mult[j],
                        std::abs(lo_mult[j] * lo_gap), std::abs(hi_mult[j] * hi_gap)});
    }

    for (std::size_t i = 0; i < p.ineqs.size(); ++i) {
        const double s = relaxed ? sol.slacks[i] : 0.0;
        const double gap = p.ineqs[i].coeff.dot(sol.u) + s - p.ineqs[i].rhs;
        const double lam = lambda_of(i);
        res = std::max({res, -gap, -lam, std::abs(lam * gap)});
        if (relaxed) {
            const double mu = sol.slack_multipliers[i];
            res = std::max({res, std::abs(2.0 * opt.rho * s - lam - mu), -mu, std::abs(mu * s), -s});
        }
    }
    return res;
}

}  // namespace dobcbf
