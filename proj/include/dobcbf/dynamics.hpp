#pragma once

#include "dobcbf/core.hpp"

#include <functional>
#include <numbers>
#include <vector>

namespace dobcbf {

/// Uncertain control-affine system  x' = f(x) + g(x) u + d(x).
///
/// Only the nominal part (f, g) and the Lipschitz data of d are known to the
/// filter; the true d lives in a DisturbanceFn owned by the simulator.
struct SystemModel {
    int n = 0;
    int m = 0;
    std::function<Eigen::VectorXd(const StateVector&)> drift;
    std::function<Eigen::MatrixXd(const StateVector&)> input_matrix;
    BoxSet state_box;
    BoxSet input_box;
    double lipschitz_const = 0.0;
    double origin_bound = 0.0;
    /// Optional normalization applied after each step (e.g. heading wrap).
    /// Must leave f, g and d invariant.
    std::function<StateVector(const StateVector&)> wrap;

    void validate() const {
        if (n <= 0 || m <= 0) throw ContractError("SystemModel: n and m must be positive");
        if (!drift || !input_matrix) throw ContractError("SystemModel: drift/input_matrix unset");
        if (state_box.dim() != n) throw ContractError("SystemModel: state box dimension != n");
        if (input_box.dim() != m) throw ContractError("SystemModel: input box dimension != m");
        if (!(lipschitz_const >= 0.0) || !(origin_bound >= 0.0)) {
            throw ContractError("SystemModel: l_d and b_d must be nonnegative");
        }
    }

    StateVector normalize(const StateVector& x) const { return wrap ? wrap(x) : x; }
};

/// The simulator's ground-truth disturbance together with the constants it
/// is certified to satisfy.
struct DisturbanceFn {
    std::function<DisturbanceVector(const StateVector&)> eval;
    double declared_lipschitz = 0.0;
    double declared_origin_bound = 0.0;

    DisturbanceVector operator()(const StateVector& x) const { return eval(x); }

    static DisturbanceFn zero(int n) {
        return {[n](const StateVector&) { return DisturbanceVector::Zero(n); }, 0.0, 0.0};
    }
};

inline StateVector eval_dynamics(const SystemModel& model, const StateVector& x,
                                 const ControlVector& u, const DisturbanceVector& d) {
    require_dim(x, model.n, "eval_dynamics: state");
    require_dim(u, model.m, "eval_dynamics: control");
    require_dim(d, model.n, "eval_dynamics: disturbance");
    return model.drift(x) + model.input_matrix(x) * u + d;
}

/// Classical RK4 on a generic vector field, checking every stage.
template <class Field>
Eigen::VectorXd rk4(const Field& field, const Eigen::VectorXd& x, double dt) {
    const Eigen::VectorXd k1 = field(x);
    if (!k1.allFinite()) throw IntegrationBlowup(1, "rk4: non-finite derivative at stage 1");
    const Eigen::VectorXd k2 = field(x + 0.5 * dt * k1);
    if (!k2.allFinite()) throw IntegrationBlowup(2, "rk4: non-finite derivative at stage 2");
    const Eigen::VectorXd k3 = field(x + 0.5 * dt * k2);
    if (!k3.allFinite()) throw IntegrationBlowup(3, "rk4: non-finite derivative at stage 3");
    const Eigen::VectorXd k4 = field(x + dt * k3);
    if (!k4.allFinite()) throw IntegrationBlowup(4, "rk4: non-finite derivative at stage 4");
    Eigen::VectorXd next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) throw IntegrationBlowup(5, "rk4: non-finite state after combination");
    return next;
}

/// One RK4 step of the true plant with u held over [t, t+dt].
inline StateVector step_rk4(const SystemModel& model, const StateVector& x, const ControlVector& u,
                            const DisturbanceFn& d_fn, double dt) {
    if (!(dt > 0.0)) throw ContractError("step_rk4: dt must be positive");
    require_dim(x, model.n, "step_rk4: state");
    require_dim(u, model.m, "step_rk4: control");
    auto field = [&](const StateVector& s) -> Eigen::VectorXd {
        return model.drift(s) + model.input_matrix(s) * u + d_fn(s);
    };
    return model.normalize(rk4(field, x, dt));
}

/// Random smooth disturbance with analytically certified constants.
///
/// Each coordinate is  c_j + sum_k A_jk (sin(w_jk·x + phi_jk) - sin(phi_jk)),
/// so d(0) = c. Row j of the Jacobian has norm <= sum_k |A_jk| |w_jk|, and
/// the spectral norm is bounded by the Frobenius norm of those row bounds;
/// the amplitudes are scaled so that this bound equals l_d exactly.
/// `rows` restricts the nonzero coordinates (empty = all rows).
inline DisturbanceFn sample_lipschitz_disturbance(std::uint64_t seed, double l_d, double b_d,
                                                  const BoxSet& box,
                                                  const std::vector<int>& rows = {}) {
    if (!(l_d >= 0.0) || !(b_d >= 0.0)) {
        throw ContractError("sample_lipschitz_disturbance: l_d and b_d must be nonnegative");
    }
    const int n = static_cast<int>(box.dim());
    constexpr int kTerms = 3;
    Rng rng(mix_seed(seed, 0xD157));

    std::vector<int> active = rows;
    if (active.empty()) {
        for (int j = 0; j < n; ++j) active.push_back(j);
    }

    double extent = 0.0;
    for (int i = 0; i < n; ++i) extent = std::max(extent, box.upper()[i] - box.lower()[i]);
    const double base_freq = extent > 0.0 ? 2.0 * std::numbers::pi / extent : 1.0;

    struct Term {
        int row;
        double amp;
        Eigen::VectorXd w;
        double phase;
    };
    std::vector<Term> terms;
    std::vector<double> row_bound(n, 0.0);
    for (int j : active) {
        for (int k = 0; k < kTerms; ++k) {
            Eigen::VectorXd w(n);
            for (int i = 0; i < n; ++i) w[i] = rng.uniform(-1.0, 1.0);
            if (w.norm() < 1e-3) w[0] = 1.0;
            w *= base_freq * rng.uniform(0.5, 2.0) / w.norm();
            const double amp = rng.uniform(-1.0, 1.0);
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            row_bound[j] += std::abs(amp) * w.norm();
            terms.push_back({j, amp, std::move(w), phase});
        }
    }
    double raw = 0.0;
    for (double r : row_bound) raw += r * r;
    raw = std::sqrt(raw);
    const double scale = (l_d > 0.0 && raw > 0.0) ? l_d / raw : 0.0;
    for (auto& t : terms) t.amp *= scale;

    Eigen::VectorXd offset = Eigen::VectorXd::Zero(n);
    if (b_d > 0.0) {
        for (int j : active) offset[j] = rng.uniform(-1.0, 1.0);
        const double norm = offset.norm();
        if (norm > 0.0) offset *= b_d * rng.uniform(0.5, 1.0) / norm;
    }

    DisturbanceFn fn;
    fn.declared_lipschitz = scale > 0.0 ? l_d : 0.0;
    fn.declared_origin_bound = offset.norm();
    fn.eval = [terms = std::move(terms), offset](const StateVector& x) {
        DisturbanceVector d = offset;
        for (const auto& t : terms) {
            if (t.amp == 0.0) continue;
            d[t.row] += t.amp * (std::sin(t.w.dot(x) + t.phase) - std::sin(t.phase));
        }
        return d;
    };
    return fn;
}

}  // namespace dobcbf
