#pragma once

#include "dobcbf/envs/quadrotor.hpp"
#include "dobcbf/envs/unicycle.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace dobcbf {

/// Raised for malformed policy output (wrong size, non-finite entries).
struct PolicyError : Error {
    explicit PolicyError(const std::string& what) : Error("policy", what) {}
};

/// Action source standing in for the learning agent. One instance per episode.
class Policy {
public:
    virtual ~Policy() = default;

    /// Called before the first step of an episode.
    virtual void reset(std::uint64_t /*seed*/, long /*episode*/) {}

    /// Proposed action at time t. `last_reward` is the reward of the previous
    /// transition (0 on the first step).
    virtual ControlVector act(const StateVector& x, double t, double last_reward) = 0;

    /// Called once after the last transition of an episode.
    virtual void finish(const StateVector& /*x*/, double /*t*/, double /*last_reward*/) {}

    virtual std::string kind() const = 0;
};

class ConstantPolicy final : public Policy {
public:
    explicit ConstantPolicy(ControlVector u) : u_(std::move(u)) {}
    ControlVector act(const StateVector&, double, double) override { return u_; }
    std::string kind() const override { return "constant"; }

private:
    ControlVector u_;
};

/// Heading-aligned proportional controller toward the goal.
class UnicycleTracker final : public Policy {
public:
    struct Gains {
        double k_v = 1.0;
        double k_omega = 3.0;
    };

    UnicycleTracker(const UnicycleParams& p, Gains gains) : p_(p), k_(gains) {}
    explicit UnicycleTracker(const UnicycleParams& p) : UnicycleTracker(p, Gains{}) {}

    ControlVector act(const StateVector& x, double, double) override {
        const Eigen::Vector2d e = p_.goal - x.head<2>();
        const double dist = e.norm();
        if (dist < 1e-9) return Eigen::Vector2d::Zero();
        const double err = wrap_angle(std::atan2(e.y(), e.x()) - x[2]);
        const double v = std::clamp(k_.k_v * dist * std::cos(err), -p_.v_max, p_.v_max);
        const double w = std::clamp(k_.k_omega * err, -p_.omega_max, p_.omega_max);
        return Eigen::Vector2d(v, w);
    }

    std::string kind() const override { return "nominal_tracker"; }

private:
    UnicycleParams p_;
    Gains k_;
};

/// Cascaded PD: position loop sets a thrust vector, the attitude loop turns
/// the body toward it. Outputs rotor thrusts.
class QuadrotorTracker final : public Policy {
public:
    struct Gains {
        double kp = 9.0;
        double kd = 6.0;
        double k_theta = 400.0;
        double k_theta_dot = 40.0;
    };

    QuadrotorTracker(const QuadrotorParams& p, Gains gains) : p_(p), k_(gains) {}
    explicit QuadrotorTracker(const QuadrotorParams& p) : QuadrotorTracker(p, Gains{}) {}

    ControlVector act(const StateVector& x, double t, double) override {
        const auto& ref = p_.reference;
        const Eigen::Vector2d pos(x[0], x[2]), vel(x[1], x[3]);
        Eigen::Vector2d a = k_.kp * (ref.position(t) - pos) + k_.kd * (ref.velocity(t) - vel) +
                            ref.acceleration(t);
        a.y() += p_.gravity;
        const double limit = 0.8 * p_.angle_limit;
        const double theta_des = std::clamp(std::atan2(-a.x(), a.y()), -limit, limit);
        const double thrust = std::max(0.0, p_.mass * (-a.x() * std::sin(x[4]) + a.y() * std::cos(x[4])));
        const double alpha = k_.k_theta * (theta_des - x[4]) - k_.k_theta_dot * x[5];
        const double diff = alpha * p_.inertia_yy / p_.arm;
        return Eigen::Vector2d(0.5 * (thrust - diff), 0.5 * (thrust + diff));
    }

    std::string kind() const override { return "nominal_tracker"; }

private:
    QuadrotorParams p_;
    Gains k_;
};

/// Wrapped policy plus independent uniform noise in [-amp_i, amp_i] per input.
/// With a linear schedule the amplitude falls to zero at `decay_episodes`.
class NoisyExplorer final : public Policy {
public:
    enum class Schedule { constant, linear };

    NoisyExplorer(std::unique_ptr<Policy> inner, Eigen::VectorXd amplitude,
                  Schedule schedule = Schedule::constant, long decay_episodes = 0)
        : inner_(std::move(inner)), amp_(std::move(amplitude)), schedule_(schedule),
          decay_(decay_episodes) {
        if ((amp_.array() < 0.0).any()) throw ContractError("NoisyExplorer: negative amplitude");
        if (schedule_ == Schedule::linear && decay_ <= 0) {
            throw ContractError("NoisyExplorer: linear schedule needs decay_episodes > 0");
        }
    }

    void reset(std::uint64_t seed, long episode) override {
        inner_->reset(mix_seed(seed, 1), episode);
        rng_ = Rng(mix_seed(seed, 2));
        scale_ = 1.0;
        if (schedule_ == Schedule::linear) {
            scale_ = std::max(0.0, 1.0 - static_cast<double>(episode) / static_cast<double>(decay_));
        }
    }

    ControlVector act(const StateVector& x, double t, double last_reward) override {
        ControlVector u = inner_->act(x, t, last_reward);
        require_dim(amp_, u.size(), "NoisyExplorer: amplitude");
        for (Eigen::Index i = 0; i < u.size(); ++i) {
            const double a = scale_ * amp_[i];
            const double r = rng_.uniform(-1.0, 1.0);
            if (a > 0.0) u[i] += a * r;
        }
        return u;
    }

    void finish(const StateVector& x, double t, double last_reward) override {
        inner_->finish(x, t, last_reward);
    }

    std::string kind() const override { return "noisy_explorer"; }

    double current_scale() const { return scale_; }

private:
    std::unique_ptr<Policy> inner_;
    Eigen::VectorXd amp_;
    Schedule schedule_;
    long decay_;
    double scale_ = 1.0;
    Rng rng_;
};

}  // namespace dobcbf
