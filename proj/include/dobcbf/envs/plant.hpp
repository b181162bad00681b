#pragma once

#include "dobcbf/dynamics.hpp"
#include "dobcbf/hocbf.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace dobcbf {

/// Everything the episode loop needs about one benchmark system.
struct Plant {
    std::string name;
    SystemModel model;
    DisturbanceFn disturbance;
    std::vector<ConstraintSpec> constraints;
    /// Per-episode initial condition.
    std::function<StateVector(Rng&)> initial_state;
    /// Unclipped reward for landing in x after applying u; t is the time at x.
    std::function<double(const StateVector&, const ControlVector&, double)> raw_reward;
    /// Disturbance-free equilibrium input (hover for the quadrotor).
    ControlVector equilibrium_input;

    double min_barrier(const StateVector& x) const {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& c : constraints) m = std::min(m, c.h(x));
        return m;
    }
};

constexpr double kRewardMin = -10.0;
constexpr double kRewardMax = 0.0;

inline double clip_reward(double r) { return std::clamp(r, kRewardMin, kRewardMax); }

/// Numerical check that neither u nor the disturbance shows up before
/// derivative m of h: the partials of h, L_f h, ..., L_f^{m-2} h along every
/// input direction g_j(x) and every disturbance row in `disturbance_rows` vanish,
/// and at least one of L_g L_f^{m-1} h or [L_f^{m-1} h]_x d-row is nonzero at
/// some sample.
inline bool disturbance_relative_degree_matches(const ConstraintSpec& spec, const SystemModel& model,
                                                const std::vector<int>& disturbance_rows,
                                                int samples = 200, std::uint64_t seed = 1,
                                                double tol = 1e-6) {
    Rng rng(seed);
    const double eps = 1e-6;
    bool d_appears = false;
    for (int s = 0; s < samples; ++s) {
        const StateVector x = rng.uniform_in(model.state_box);
        const Eigen::MatrixXd g = model.input_matrix(x);
        for (int k = 0; k + 1 < spec.m; ++k) {
            const auto& fk = k == 0 ? spec.h : spec.lie_f[k - 1];
            auto dir_deriv = [&](const Eigen::VectorXd& dir) {
                return (fk(x + eps * dir) - fk(x - eps * dir)) / (2.0 * eps);
            };
            for (Eigen::Index j = 0; j < g.cols(); ++j) {
                if (std::abs(dir_deriv(g.col(j))) > tol) return false;
            }
            for (int r : disturbance_rows) {
                if (std::abs(dir_deriv(Eigen::VectorXd::Unit(model.n, r))) > tol) return false;
            }
        }
        const Eigen::VectorXd grad = spec.grad_row(x);
        for (int r : disturbance_rows) d_appears = d_appears || std::abs(grad[r]) > tol;
    }
    return d_appears;
}

}  // namespace dobcbf
