#pragma once

#include "dobcbf/envs/plant.hpp"

#include <cmath>
#include <numbers>

namespace dobcbf {

/// Lumped uncertainty of the planar quadrotor. Rotor friction removes a
/// constant thrust c_i from each rotor (d_ui = -c_i); air resistance is a
/// linear drag -c_d v plus a constant wind acceleration.
struct QuadrotorDisturbance {
    double drag = 0.01;
    Eigen::Vector2d wind{0.15, -0.1};
    double rotor_loss_1 = 5e-5;
    double rotor_loss_2 = 5e-5;
};

/// Circle of radius `radius` about the origin in the xz-plane.
struct CircleReference {
    double radius = 0.7;
    double rate = 1.0;   ///< rad/s
    double phase = 0.0;

    Eigen::Vector2d position(double t) const {
        const double a = rate * t + phase;
        return radius * Eigen::Vector2d(std::cos(a), std::sin(a));
    }
    Eigen::Vector2d velocity(double t) const {
        const double a = rate * t + phase;
        return radius * rate * Eigen::Vector2d(-std::sin(a), std::cos(a));
    }
    Eigen::Vector2d acceleration(double t) const { return -rate * rate * position(t); }
};

struct QuadrotorParams {
    double mass = 0.032;
    double arm = 0.04;
    double inertia_yy = 2.4e-5;
    double gravity = 9.81;
    double u_max = 2.0;
    double r_bnd = 0.85;
    double pos_limit = 1.2;
    double vel_limit = 4.0;
    double angle_limit = std::numbers::pi / 3.0;
    double rate_limit = 10.0;
    QuadrotorDisturbance disturbance;
    CircleReference reference;
    double start_jitter = 0.05;
    double beta1 = 5.0;
    double beta2 = 10.0;
    double control_weight = 0.1;

    double hover_thrust() const { return 0.5 * mass * gravity; }

    void validate() const {
        if (!(mass > 0.0) || !(arm > 0.0) || !(inertia_yy > 0.0)) {
            throw ConfigError("quadrotor: mass, arm and inertia must be positive");
        }
        if (!(gravity >= 0.0)) throw ConfigError("quadrotor: gravity must be >= 0");
        if (!(u_max > 0.0)) throw ConfigError("quadrotor: u_max must be positive");
        if (!(r_bnd > 0.0) || !(pos_limit >= r_bnd)) {
            throw ConfigError("quadrotor: need 0 < r_bnd <= pos_limit");
        }
        if (!(vel_limit > 0.0) || !(angle_limit > 0.0) || !(rate_limit > 0.0)) {
            throw ConfigError("quadrotor: state limits must be positive");
        }
        if (!(beta1 > 0.0) || !(beta2 > 0.0)) throw ConfigError("quadrotor: beta gains must be positive");
        if (!(reference.radius + start_jitter * std::sqrt(2.0) < r_bnd)) {
            throw ConfigError("quadrotor: reference circle must lie inside r_bnd");
        }
        if (!(disturbance.drag >= 0.0)) throw ConfigError("quadrotor: drag must be >= 0");
        if (!(control_weight >= 0.0)) throw ConfigError("quadrotor: control_weight must be >= 0");
    }
};

/// d(x) over the rows (p_x, v_x, p_z, v_z, th, th'). With s = (c_1 + c_2)/m:
///   v_x: -c_d v_x + w_x + s sin th
///   v_z: -c_d v_z + w_z - s cos th
///   th'': (c_1 - c_2) L / I
/// J J' = c_d^2 I + s^2 e e' with |e| = 1, so l_d = sqrt(c_d^2 + s^2).
inline DisturbanceFn quadrotor_disturbance(const QuadrotorParams& p) {
    const auto& q = p.disturbance;
    const double s = (q.rotor_loss_1 + q.rotor_loss_2) / p.mass;
    const double torque = (q.rotor_loss_1 - q.rotor_loss_2) * p.arm / p.inertia_yy;
    DisturbanceFn d;
    d.eval = [q, s, torque](const StateVector& x) {
        StateVector out = StateVector::Zero(6);
        out[1] = -q.drag * x[1] + q.wind.x() + s * std::sin(x[4]);
        out[3] = -q.drag * x[3] + q.wind.y() - s * std::cos(x[4]);
        out[5] = torque;
        return out;
    };
    d.declared_lipschitz = std::hypot(q.drag, s);
    d.declared_origin_bound = Eigen::Vector3d(q.wind.x(), q.wind.y() - s, torque).norm();
    return d;
}

inline SystemModel quadrotor_system(const QuadrotorParams& p) {
    SystemModel m;
    m.n = 6;
    m.m = 2;
    const double g0 = p.gravity;
    m.drift = [g0](const StateVector& x) {
        StateVector f(6);
        f << x[1], 0.0, x[3], -g0, x[5], 0.0;
        return f;
    };
    const double mass = p.mass, lever = p.arm / p.inertia_yy;
    m.input_matrix = [mass, lever](const StateVector& x) {
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(6, 2);
        const double sx = -std::sin(x[4]) / mass, cz = std::cos(x[4]) / mass;
        g(1, 0) = sx;
        g(1, 1) = sx;
        g(3, 0) = cz;
        g(3, 1) = cz;
        g(5, 0) = -lever;
        g(5, 1) = lever;
        return g;
    };
    Eigen::VectorXd half(6);
    half << p.pos_limit, p.vel_limit, p.pos_limit, p.vel_limit, p.angle_limit, p.rate_limit;
    m.state_box = BoxSet::symmetric(half);
    m.input_box = BoxSet(Eigen::Vector2d::Zero(), Eigen::Vector2d::Constant(p.u_max));
    return m;
}

/// h = 1/2 (r^2 - p_x^2 - p_z^2), relative degree two.
///   L_f h        = -(p_x v_x + p_z v_z)
///   L_f^2 h      = -(v_x^2 + v_z^2) + g p_z
///   L_g L_f h    = (p_x sin th - p_z cos th) / m  for each rotor
///   [L_f h]_x    = (-v_x, -p_x, -v_z, -p_z, 0, 0)
///   O(h)         = L_f(beta_1 o h) = beta_1'(h) L_f h
inline ConstraintSpec boundary_barrier(const QuadrotorParams& p) {
    ConstraintSpec s;
    s.name = "boundary";
    s.m = 2;
    const double r2 = p.r_bnd * p.r_bnd, g0 = p.gravity, mass = p.mass;
    s.h = [r2](const StateVector& x) { return 0.5 * (r2 - x[0] * x[0] - x[2] * x[2]); };
    auto lf1 = [](const StateVector& x) { return -(x[0] * x[1] + x[2] * x[3]); };
    s.lie_f = {lf1, [g0](const StateVector& x) { return -(x[1] * x[1] + x[3] * x[3]) + g0 * x[2]; }};
    s.lie_g_lie_f = [mass](const StateVector& x) {
        const double v = (x[0] * std::sin(x[4]) - x[2] * std::cos(x[4])) / mass;
        return Eigen::Vector2d(v, v).eval();
    };
    s.grad_row = [](const StateVector& x) {
        StateVector g(6);
        g << -x[1], -x[0], -x[3], -x[2], 0.0, 0.0;
        return g;
    };
    s.betas = {ClassKappa::linear(p.beta1), ClassKappa::linear(p.beta2)};
    const ClassKappa b1 = s.betas[0];
    s.o_term = [b1, r2, lf1](const StateVector& x) {
        const double h = 0.5 * (r2 - x[0] * x[0] - x[2] * x[2]);
        return b1.derivative(h) * lf1(x);
    };
    return s;
}

inline Plant make_quadrotor(const QuadrotorParams& p) {
    p.validate();
    Plant plant;
    plant.name = "quadrotor";
    plant.model = quadrotor_system(p);
    plant.disturbance = quadrotor_disturbance(p);
    plant.model.lipschitz_const = plant.disturbance.declared_lipschitz;
    plant.model.origin_bound = plant.disturbance.declared_origin_bound;
    plant.constraints.push_back(boundary_barrier(p));
    plant.initial_state = [p](Rng& rng) {
        const Eigen::Vector2d p0 = p.reference.position(0.0);
        const double j = p.start_jitter;
        StateVector x = StateVector::Zero(6);
        x[0] = p0.x() + rng.uniform(-j, j);
        x[2] = p0.y() + rng.uniform(-j, j);
        return x;
    };
    const double hover = p.hover_thrust();
    plant.raw_reward = [ref = p.reference, w = p.control_weight, hover](
                           const StateVector& x, const ControlVector& u, double t) {
        const Eigen::Vector2d pos(x[0], x[2]);
        return -(pos - ref.position(t)).squaredNorm() - w * (u.array() - hover).matrix().squaredNorm();
    };
    plant.equilibrium_input = Eigen::Vector2d::Constant(hover);
    return plant;
}

}  // namespace dobcbf
