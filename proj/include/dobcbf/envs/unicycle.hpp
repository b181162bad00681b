#pragma once

#include "dobcbf/envs/plant.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace dobcbf {

struct Obstacle {
    Eigen::Vector2d center;
    double radius = 0.0;
};

/// Slip that erodes forward speed: d_m(p_x) = base (1 + rel_amp sin(freq p_x)).
struct SlipProfile {
    double base = 0.3;
    double rel_amp = 0.5;
    double freq = 1.0;

    double operator()(double px) const { return base * (1.0 + rel_amp * std::sin(freq * px)); }
    double lipschitz() const {
        return std::max(std::abs(base) * (1.0 + std::abs(rel_amp)), std::abs(base * rel_amp * freq));
    }
};

struct UnicycleParams {
    Eigen::Vector2d start{-2.5, -2.5};
    double start_heading = std::numbers::pi / 4.0;
    double start_jitter = 0.1;        ///< uniform half-width on position; heading gets 2x
    Eigen::Vector2d goal{2.5, 2.5};
    std::vector<Obstacle> obstacles{
        {Eigen::Vector2d(0.0, 0.0), 0.5},
        {Eigen::Vector2d(-1.2, 1.0), 0.4},
        {Eigen::Vector2d(1.3, -0.9), 0.3},
    };
    double workspace = 3.0;           ///< X = [-w, w]^2 x [-pi, pi]
    double v_min = -1.0;
    double v_max = 2.0;
    double omega_max = std::numbers::pi;
    SlipProfile slip;
    double beta_gain = 5.0;
    double control_weight = 1e-3;

    void validate() const {
        if (!(v_min <= v_max) || !(omega_max > 0.0)) throw ConfigError("unicycle: bad input box");
        if (!(workspace > 0.0)) throw ConfigError("unicycle: workspace must be positive");
        if (!(beta_gain > 0.0)) throw ConfigError("unicycle: beta_gain must be positive");
        if (!(control_weight >= 0.0)) throw ConfigError("unicycle: control_weight must be >= 0");
        for (std::size_t i = 0; i < obstacles.size(); ++i) {
            const auto& o = obstacles[i];
            const std::string tag = "unicycle: obstacle " + std::to_string(i);
            if (!(o.radius > 0.0)) throw ConfigError(tag + " radius must be positive");
            if ((start - o.center).norm() <= o.radius + start_jitter * std::sqrt(2.0)) {
                throw ConfigError(tag + " contains the start region");
            }
            if ((goal - o.center).norm() <= o.radius) throw ConfigError(tag + " contains the goal");
        }
    }
};

/// d(x) = (cos th, sin th, 0) d_m(p_x). The Jacobian columns along p_x and th
/// are orthogonal with norms |d_m'| and |d_m|, so l_d = max of the two bounds.
inline DisturbanceFn unicycle_slip_disturbance(const SlipProfile& slip) {
    DisturbanceFn d;
    d.eval = [slip](const StateVector& x) {
        const double dm = slip(x[0]);
        return Eigen::Vector3d(std::cos(x[2]) * dm, std::sin(x[2]) * dm, 0.0).eval();
    };
    d.declared_lipschitz = slip.lipschitz();
    d.declared_origin_bound = std::abs(slip.base);
    return d;
}

inline double wrap_angle(double a) { return std::remainder(a, 2.0 * std::numbers::pi); }

inline SystemModel unicycle_system(const UnicycleParams& p) {
    SystemModel m;
    m.n = 3;
    m.m = 2;
    m.drift = [](const StateVector&) { return Eigen::VectorXd::Zero(3).eval(); };
    m.input_matrix = [](const StateVector& x) {
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(3, 2);
        g(0, 0) = std::cos(x[2]);
        g(1, 0) = std::sin(x[2]);
        g(2, 1) = 1.0;
        return g;
    };
    const double pi = std::numbers::pi;
    m.state_box = BoxSet(Eigen::Vector3d(-p.workspace, -p.workspace, -pi),
                         Eigen::Vector3d(p.workspace, p.workspace, pi));
    m.input_box = BoxSet(Eigen::Vector2d(p.v_min, -p.omega_max), Eigen::Vector2d(p.v_max, p.omega_max));
    m.wrap = [](const StateVector& x) {
        StateVector y = x;
        y[2] = wrap_angle(y[2]);
        return y;
    };
    return m;
}

/// h = 1/2 (|p - c|^2 - r^2), relative degree one through v.
inline ConstraintSpec obstacle_barrier(const Obstacle& o, double beta_gain, const std::string& name) {
    ConstraintSpec s;
    s.name = name;
    s.m = 1;
    const Eigen::Vector2d c = o.center;
    const double r2 = o.radius * o.radius;
    s.h = [c, r2](const StateVector& x) { return 0.5 * ((x.head<2>() - c).squaredNorm() - r2); };
    s.lie_f = {[](const StateVector&) { return 0.0; }};
    s.lie_g_lie_f = [c](const StateVector& x) {
        const Eigen::Vector2d e = x.head<2>() - c;
        return Eigen::Vector2d(e.x() * std::cos(x[2]) + e.y() * std::sin(x[2]), 0.0).eval();
    };
    s.grad_row = [c](const StateVector& x) {
        return Eigen::Vector3d(x[0] - c.x(), x[1] - c.y(), 0.0).eval();
    };
    s.betas = {ClassKappa::linear(beta_gain)};
    return s;
}

inline Plant make_unicycle(const UnicycleParams& p) {
    p.validate();
    Plant plant;
    plant.name = "unicycle";
    plant.model = unicycle_system(p);
    plant.disturbance = unicycle_slip_disturbance(p.slip);
    plant.model.lipschitz_const = plant.disturbance.declared_lipschitz;
    plant.model.origin_bound = plant.disturbance.declared_origin_bound;
    for (std::size_t i = 0; i < p.obstacles.size(); ++i) {
        plant.constraints.push_back(
            obstacle_barrier(p.obstacles[i], p.beta_gain, "obstacle_" + std::to_string(i)));
    }
    plant.initial_state = [p](Rng& rng) {
        const double j = p.start_jitter;
        return Eigen::Vector3d(p.start.x() + rng.uniform(-j, j), p.start.y() + rng.uniform(-j, j),
                               wrap_angle(p.start_heading + rng.uniform(-2.0 * j, 2.0 * j)))
            .eval();
    };
    plant.raw_reward = [goal = p.goal, w = p.control_weight](const StateVector& x, const ControlVector& u,
                                                             double) {
        return -(x.head<2>() - goal).squaredNorm() - w * u.squaredNorm();
    };
    plant.equilibrium_input = Eigen::Vector2d::Zero();
    return plant;
}

inline double unicycle_reward(const UnicycleParams& p, const StateVector& x, const ControlVector& u) {
    return clip_reward(-(x.head<2>() - p.goal).squaredNorm() - p.control_weight * u.squaredNorm());
}

}  // namespace dobcbf
