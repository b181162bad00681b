#pragma once

#include "dobcbf/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dobcbf {

/// Disturbance observer parameters. `dt` is the simulation step; the
/// estimation period T must be an integer multiple of it.
struct ObserverConfig {
    double a = 1.0;
    double T = 1e-2;
    double dt = 1e-3;

    long steps_per_sample() const { return std::lround(T / dt); }

    void validate() const {
        if (!(a > 0.0)) throw ContractError("ObserverConfig: a must be positive");
        if (!(T > 0.0)) throw ContractError("ObserverConfig: T must be positive");
        if (!(dt > 0.0)) throw ContractError("ObserverConfig: dt must be positive");
        const double ratio = T / dt;
        if (std::lround(ratio) < 1 || std::abs(ratio - std::round(ratio)) > 1e-9 * ratio) {
            throw ContractError("ObserverConfig: T must be an integer multiple of dt");
        }
    }

    /// a / (e^{aT} - 1), the gain of the piecewise-constant law.
    double pc_gain() const { return a / std::expm1(a * T); }
};

struct ObserverState {
    StateVector x_hat;
    DisturbanceVector d_hat;
    double t = 0.0;
    long step = 0;
    long sample_index = 0;  ///< number of pc_update calls so far
};

/// x_hat(0) = x(0), d_hat(0) = 0.
inline ObserverState initialize_observer(const StateVector& x0) {
    ObserverState obs;
    obs.x_hat = x0;
    obs.d_hat = DisturbanceVector::Zero(x0.size());
    return obs;
}

/// One step of the state predictor
///     x_hat' = f(x) + g(x) u + d_hat - a (x_hat - x)
/// with u and d_hat held. The measured state is linearly interpolated between
/// `x_begin` and `x_end` inside the step; pass the same vector twice to hold it.
inline ObserverState predictor_step(const ObserverState& obs, const SystemModel& model,
                                    const ObserverConfig& cfg, const StateVector& x_begin,
                                    const StateVector& x_end, const ControlVector& u) {
    require_dim(obs.x_hat, model.n, "predictor_step: x_hat");
    require_dim(x_begin, model.n, "predictor_step: x_begin");
    require_dim(x_end, model.n, "predictor_step: x_end");
    const double dt = cfg.dt;
    // Time is carried as an extra coordinate so rk4 can interpolate x.
    Eigen::VectorXd aug(model.n + 1);
    aug << obs.x_hat, 0.0;
    auto field = [&](const Eigen::VectorXd& s) -> Eigen::VectorXd {
        const double tau = s[model.n] / dt;
        const StateVector x = (1.0 - tau) * x_begin + tau * x_end;
        Eigen::VectorXd out(model.n + 1);
        out.head(model.n) = model.drift(x) + model.input_matrix(x) * u + obs.d_hat -
                            cfg.a * (s.head(model.n) - x);
        out[model.n] = 1.0;
        return out;
    };
    ObserverState next = obs;
    try {
        next.x_hat = rk4(field, aug, dt).head(model.n);
    } catch (const IntegrationBlowup& e) {
        throw ObserverDivergence(std::string("predictor_step: ") + e.what());
    }
    next.step = obs.step + 1;
    next.t = static_cast<double>(next.step) * dt;
    return next;
}

inline ObserverState predictor_step(const ObserverState& obs, const SystemModel& model,
                                    const ObserverConfig& cfg, const StateVector& x,
                                    const ControlVector& u) {
    return predictor_step(obs, model, cfg, x, x, u);
}

/// Piecewise-constant update at a sampling instant t = iT:
///     d_hat = -(a / (e^{aT} - 1)) (x_hat - x).
inline ObserverState pc_update(const ObserverState& obs, const ObserverConfig& cfg,
                               const StateVector& x) {
    require_dim(x, obs.x_hat.size(), "pc_update: state");
    const long sps = cfg.steps_per_sample();
    if (obs.step % sps != 0) {
        throw SchedulingError("pc_update: t = " + std::to_string(obs.t) +
                              " is not on the sampling grid (T = " + std::to_string(cfg.T) + ")");
    }
    if (obs.sample_index != obs.step / sps) {
        throw SchedulingError("pc_update: expected sample " + std::to_string(obs.step / sps) +
                              ", observer is at sample " + std::to_string(obs.sample_index));
    }
    ObserverState next = obs;
    next.d_hat = -cfg.pc_gain() * (obs.x_hat - x);
    if (!next.d_hat.allFinite()) throw ObserverDivergence("pc_update: non-finite estimate");
    next.sample_index = obs.sample_index + 1;
    return next;
}

/// Plant and predictor advanced together by one RK4 step, so the predictor
/// sees the plant's intermediate stage states rather than a held sample.
struct CoupledState {
    StateVector x;
    ObserverState obs;
};

inline CoupledState coupled_step(const SystemModel& model, const ObserverConfig& cfg,
                                 const StateVector& x, const ObserverState& obs,
                                 const ControlVector& u, const DisturbanceFn& d_fn) {
    const int n = model.n;
    Eigen::VectorXd aug(2 * n);
    aug << x, obs.x_hat;
    auto field = [&](const Eigen::VectorXd& s) -> Eigen::VectorXd {
        const auto xs = s.head(n);
        const Eigen::VectorXd nominal = model.drift(xs) + model.input_matrix(xs) * u;
        Eigen::VectorXd out(2 * n);
        out.head(n) = nominal + d_fn(xs);
        out.tail(n) = nominal + obs.d_hat - cfg.a * (s.tail(n) - xs);
        return out;
    };
    const Eigen::VectorXd next = rk4(field, aug, cfg.dt);
    CoupledState out{next.head(n), obs};
    const StateVector wrapped = model.normalize(out.x);
    out.obs.x_hat = next.tail(n) + (wrapped - out.x);
    out.x = wrapped;
    out.obs.step = obs.step + 1;
    out.obs.t = static_cast<double>(out.obs.step) * cfg.dt;
    return out;
}

/// Precomputed estimation error bound:
///   delta(t) = theta on [0, T),  gamma(T) = 2 sqrt(n) eta T + sqrt(n)(1 - e^{-aT}) theta after.
struct ErrorBound {
    double theta = 0.0;
    double eta = 0.0;
    double gamma = 0.0;
    double T = 0.0;
    bool empirical = false;

    double delta_of_t(double t) const { return t < T * (1.0 - 1e-12) ? theta : gamma; }
    /// delta during the i-th sampling interval [iT, (i+1)T).
    double delta_for_sample(long i) const { return i <= 0 ? theta : gamma; }
    double max_delta() const { return std::max(theta, gamma); }
};

inline double gamma_of(int n, double eta, double theta, double a, double T) {
    const double rn = std::sqrt(static_cast<double>(n));
    return 2.0 * rn * eta * T - rn * std::expm1(-a * T) * theta;
}

struct BoundGridOptions {
    int resolution = 33;          ///< points per dimension before the budget cap
    long point_budget = 250000;   ///< cap on grid points over X
    int refine_rounds = 60;
};

namespace detail {

inline double dynamics_norm_at(const SystemModel& model, const StateVector& x,
                               const Eigen::MatrixXd& vertices, Eigen::Index* best_vertex) {
    const Eigen::VectorXd f = model.drift(x);
    const Eigen::MatrixXd g = model.input_matrix(x);
    if (!f.allFinite() || !g.allFinite()) {
        throw BoundComputationError("compute_error_bound: non-finite f or g on the state box");
    }
    double best = -1.0;
    for (Eigen::Index j = 0; j < vertices.cols(); ++j) {
        const double v = (f + g * vertices.col(j)).norm();
        if (v > best) {
            best = v;
            if (best_vertex) *best_vertex = j;
        }
    }
    return best;
}

}  // namespace detail

/// max over X x U of |f(x) + g(x) u|: uniform grid over X, vertices of U
/// (the norm of an affine map is convex in u), then coordinate pattern search
/// from the best grid point.
inline double max_nominal_rate(const SystemModel& model, const BoundGridOptions& opt = {}) {
    const int n = model.n;
    const BoxSet& X = model.state_box;
    const BoxSet& U = model.input_box;
    Eigen::MatrixXd vertices(model.m, static_cast<Eigen::Index>(U.vertex_count()));
    for (std::size_t k = 0; k < U.vertex_count(); ++k) {
        vertices.col(static_cast<Eigen::Index>(k)) = U.vertex(k);
    }

    long per_dim = std::max(2, opt.resolution);
    while (per_dim > 2 && std::pow(static_cast<double>(per_dim), n) > opt.point_budget) --per_dim;

    std::vector<long> idx(n, 0);
    StateVector x(n), best_x = X.center();
    double best = -1.0;
    auto coord = [&](int i, long k) {
        const double lo = X.lower()[i], hi = X.upper()[i];
        return per_dim == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / (per_dim - 1);
    };
    while (true) {
        for (int i = 0; i < n; ++i) x[i] = coord(i, idx[i]);
        const double v = detail::dynamics_norm_at(model, x, vertices, nullptr);
        if (v > best) {
            best = v;
            best_x = x;
        }
        int i = 0;
        while (i < n && ++idx[i] == per_dim) idx[i++] = 0;
        if (i == n) break;
    }

    Eigen::VectorXd step = (X.upper() - X.lower()) / static_cast<double>(per_dim - 1);
    for (int round = 0; round < opt.refine_rounds; ++round) {
        bool improved = false;
        for (int i = 0; i < n; ++i) {
            for (double sgn : {1.0, -1.0}) {
                StateVector cand = best_x;
                cand[i] = std::clamp(cand[i] + sgn * step[i], X.lower()[i], X.upper()[i]);
                const double v = detail::dynamics_norm_at(model, cand, vertices, nullptr);
                if (v > best) {
                    best = v;
                    best_x = cand;
                    improved = true;
                }
            }
        }
        if (!improved) step *= 0.5;
    }
    if (!std::isfinite(best)) throw BoundComputationError("compute_error_bound: unbounded rate");
    return best;
}

inline ErrorBound compute_error_bound(const SystemModel& model, const ObserverConfig& cfg,
                                      const BoundGridOptions& opt = {}) {
    model.validate();
    cfg.validate();
    ErrorBound b;
    b.T = cfg.T;
    const double l_d = model.lipschitz_const;
    b.theta = l_d * model.state_box.max_norm() + model.origin_bound;
    b.eta = l_d > 0.0 ? l_d * (max_nominal_rate(model, opt) + b.theta) : 0.0;
    b.gamma = gamma_of(model.n, b.eta, b.theta, cfg.a, cfg.T);
    if (!std::isfinite(b.theta) || !std::isfinite(b.gamma)) {
        throw BoundComputationError("compute_error_bound: non-finite bound");
    }
    return b;
}

struct CertificationReport {
    double max_error_after_T = 0.0;   ///< max |d_hat - d| over t >= T
    double max_ratio = 0.0;           ///< max |d_hat - d| / delta(t) over all steps
    long checked_steps = 0;
    long violations = 0;
    long truncated_trials = 0;        ///< trials stopped because x left X
    double violation_fraction() const {
        return checked_steps > 0 ? static_cast<double>(violations) / checked_steps : 0.0;
    }
};

/// Empirical check of the error bound: closed trajectories under random
/// piecewise-constant admissible inputs, |d_hat(t) - d(x(t))| compared with
/// delta(t) at every simulation step. A trial stops early if x leaves X.
inline CertificationReport certify_bound(const SystemModel& model, const ObserverConfig& cfg,
                                         const ErrorBound& bound, const DisturbanceFn& d_fn,
                                         double horizon, int trials, std::uint64_t seed,
                                         const StateVector* x0 = nullptr) {
    cfg.validate();
    CertificationReport rep;
    const long sps = cfg.steps_per_sample();
    const long steps = std::lround(horizon / cfg.dt);
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(trial)));
        StateVector x = x0 ? *x0 : rng.uniform_in(model.state_box.scaled(0.5));
        ObserverState obs = initialize_observer(x);
        ControlVector u = ControlVector::Zero(model.m);
        for (long k = 0; k <= steps; ++k) {
            if (!model.state_box.contains(x)) {
                ++rep.truncated_trials;
                break;
            }
            if (k % sps == 0) {
                obs = pc_update(obs, cfg, x);
                u = rng.uniform_in(model.input_box);
            }
            const long sample = k / sps;
            const double delta = bound.delta_for_sample(sample);
            const double err = (obs.d_hat - d_fn(x)).norm();
            ++rep.checked_steps;
            if (err > delta) ++rep.violations;
            if (delta > 0.0) rep.max_ratio = std::max(rep.max_ratio, err / delta);
            else if (err > 0.0) rep.max_ratio = std::numeric_limits<double>::infinity();
            if (sample >= 1) rep.max_error_after_T = std::max(rep.max_error_after_T, err);
            if (k == steps) break;
            auto next = coupled_step(model, cfg, x, obs, u, d_fn);
            x = std::move(next.x);
            obs = std::move(next.obs);
        }
    }
    return rep;
}

/// Tighter gamma from observed errors, scaled by `safety_factor`. theta is kept.
inline ErrorBound empirical_bound(const ErrorBound& theoretical,
                                  const std::vector<CertificationReport>& calibration,
                                  double safety_factor = 2.0) {
    double observed = 0.0;
    for (const auto& r : calibration) observed = std::max(observed, r.max_error_after_T);
    ErrorBound b = theoretical;
    b.gamma = safety_factor * observed;
    b.empirical = true;
    return b;
}

}  // namespace dobcbf
