#include <catch2/catch_amalgamated.hpp>

#include "dobcbf/envs/quadrotor.hpp"
#include "dobcbf/envs/unicycle.hpp"
#include "dobcbf/policy.hpp"
#include "support/oracles.hpp"

#include <numbers>

using namespace dobcbf;
using Catch::Approx;

namespace {

UnicycleParams single_obstacle() {
    UnicycleParams p;
    p.obstacles = {{Eigen::Vector2d(0.0, 0.0), 0.5}};
    return p;
}

}  // namespace

TEST_CASE("unicycle dynamics and disturbance", "[envs][unicycle]") {
    const Plant plant = make_unicycle(UnicycleParams{});
    const auto& model = plant.model;
    CHECK(model.n == 3);
    CHECK(model.m == 2);
    const StateVector x(Eigen::Vector3d(0.4, -1.0, 0.3));
    CHECK(model.drift(x).isZero(0.0));
    const Eigen::MatrixXd g = model.input_matrix(x);
    CHECK(g(0, 0) == std::cos(0.3));
    CHECK(g(1, 0) == std::sin(0.3));
    CHECK(g(2, 1) == 1.0);
    CHECK(g(2, 0) == 0.0);
    const double dm = 0.3 * (1.0 + 0.5 * std::sin(0.4));
    const DisturbanceVector d = plant.disturbance(x);
    CHECK(d[0] == Approx(std::cos(0.3) * dm).epsilon(1e-15));
    CHECK(d[1] == Approx(std::sin(0.3) * dm).epsilon(1e-15));
    CHECK(d[2] == 0.0);
}

TEST_CASE("unicycle barrier outside the obstacle is positive", "[envs][unicycle]") {
    const UnicycleParams p = single_obstacle();
    const Plant plant = make_unicycle(p);
    const auto& spec = plant.constraints.at(0);
    const double r = p.obstacles[0].radius;
    const StateVector x(Eigen::Vector3d(r + 1.0, 0.0, 0.0));
    CHECK(spec.h(x) == Approx(0.5 * ((r + 1.0) * (r + 1.0) - r * r)));
    CHECK(spec.h(x) > 0.0);
}

TEST_CASE("unicycle barrier and its rate at a hand-evaluated state", "[envs][unicycle]") {
    const Plant plant = make_unicycle(single_obstacle());
    const auto& spec = plant.constraints.at(0);
    const StateVector x(Eigen::Vector3d(1.0, 0.0, std::numbers::pi));
    CHECK(spec.h(x) == Approx(0.375).epsilon(1e-15));
    const ControlVector u(Eigen::Vector2d(1.0, 0.0));
    const double hdot = spec.grad_row(x).dot(eval_dynamics(plant.model, x, u, DisturbanceVector::Zero(3)));
    CHECK(hdot == Approx(-1.0).epsilon(1e-14));
    CHECK(spec.lie_g_lie_f(x).dot(u) == Approx(-1.0).epsilon(1e-14));
}

TEST_CASE("unicycle gradient row matches finite differences", "[envs][unicycle][property]") {
    const Plant plant = make_unicycle(UnicycleParams{});
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const StateVector x = rng.uniform_in(plant.model.state_box);
        for (const auto& spec : plant.constraints) {
            const Eigen::VectorXd fd = oracle::numeric_gradient(spec.h, x, 1e-6);
            CHECK((fd - spec.grad_row(x)).norm() <= 1e-6 * (1.0 + fd.norm()));
            const Eigen::MatrixXd g = plant.model.input_matrix(x);
            const Eigen::VectorXd lg = spec.lie_g_lie_f(x);
            for (Eigen::Index j = 0; j < 2; ++j) {
                CHECK(lg[j] == Approx(fd.dot(g.col(j))).margin(1e-6));
            }
        }
    }
}

TEST_CASE("constant slip is indistinguishable from a speed offset", "[envs][unicycle][property]") {
    UnicycleParams p;
    const double c = 0.37;
    p.slip = SlipProfile{c, 0.0, 1.0};
    const Plant slip = make_unicycle(p);
    const SystemModel& model = slip.model;
    const DisturbanceFn none = DisturbanceFn::zero(3);

    Rng rng(9);
    StateVector xa(Eigen::Vector3d(-1.0, 0.5, 0.2)), xb = xa;
    for (int k = 0; k < 2000; ++k) {
        const double v = rng.uniform(-0.5, 1.5), w = rng.uniform(-2.0, 2.0);
        xa = step_rk4(model, xa, Eigen::Vector2d(v - c, w), slip.disturbance, 1e-3);
        xb = step_rk4(model, xb, Eigen::Vector2d(v, w), none, 1e-3);
    }
    CHECK((xa - xb).norm() <= 1e-12);
}

TEST_CASE("declared unicycle slip constants bound the disturbance", "[envs][unicycle][property]") {
    const Plant plant = make_unicycle(UnicycleParams{});
    const auto& d = plant.disturbance;
    Rng rng(12);
    const BoxSet& X = plant.model.state_box;
    for (int trial = 0; trial < 20000; ++trial) {
        const StateVector x = rng.uniform_in(X), y = rng.uniform_in(X);
        CHECK((d(x) - d(y)).norm() <= d.declared_lipschitz * (x - y).norm() + 1e-12);
        CHECK(d(x).norm() <= d.declared_lipschitz * x.norm() + d.declared_origin_bound + 1e-12);
    }
    CHECK(d.declared_lipschitz == Approx(0.45));
    CHECK(d.declared_origin_bound == Approx(0.3));
}

TEST_CASE("unfiltered tracker reaches the goal without disturbance", "[envs][unicycle]") {
    UnicycleParams p;
    p.slip = SlipProfile{0.0, 0.0, 1.0};
    p.start_jitter = 0.0;
    const Plant plant = make_unicycle(p);
    UnicycleTracker tracker(p);
    Rng rng(0);
    StateVector x = plant.initial_state(rng);
    for (int k = 0; k < 2000; ++k) {
        const ControlVector u = plant.model.input_box.clamp(tracker.act(x, 1e-2 * k, 0.0));
        for (int s = 0; s < 10; ++s) x = plant.model.normalize(step_rk4(plant.model, x, u, plant.disturbance, 1e-3));
    }
    CHECK((x.head<2>() - p.goal).norm() < 0.1);
}

TEST_CASE("unicycle parameter validation", "[envs][unicycle]") {
    UnicycleParams p;
    p.obstacles.push_back({p.start, 0.2});
    CHECK_THROWS_AS(make_unicycle(p), ConfigError);
    p = UnicycleParams{};
    p.obstacles.push_back({p.goal + Eigen::Vector2d(0.05, 0.0), 0.1});
    CHECK_THROWS_AS(make_unicycle(p), ConfigError);
    p = UnicycleParams{};
    p.obstacles[1].radius = 0.0;
    CHECK_THROWS_AS(make_unicycle(p), ConfigError);
    p = UnicycleParams{};
    p.v_min = 3.0;
    CHECK_THROWS_AS(make_unicycle(p), ConfigError);
    CHECK_NOTHROW(make_unicycle(UnicycleParams{}));
}

TEST_CASE("quadrotor defaults", "[envs][quadrotor]") {
    const QuadrotorParams p;
    CHECK(p.u_max == 2.0);
    CHECK(p.r_bnd == 0.85);
    const Plant plant = make_quadrotor(p);
    CHECK(plant.model.n == 6);
    CHECK(plant.model.m == 2);
    CHECK(plant.model.input_box.lower().isZero(0.0));
    CHECK(plant.model.input_box.upper().isApprox(Eigen::Vector2d::Constant(2.0)));
    REQUIRE(plant.constraints.size() == 1);
    CHECK(plant.constraints[0].m == 2);
}

TEST_CASE("quadrotor hover is a force balance", "[envs][quadrotor]") {
    const QuadrotorParams p;
    const SystemModel model = quadrotor_system(p);
    const ControlVector u = Eigen::Vector2d::Constant(p.hover_thrust());
    const StateVector xdot = eval_dynamics(model, StateVector::Zero(6), u, DisturbanceVector::Zero(6));
    CHECK(xdot.norm() <= 1e-15);
}

TEST_CASE("quadrotor with no thrust falls freely", "[envs][quadrotor][property]") {
    const QuadrotorParams p;
    const SystemModel model = quadrotor_system(p);
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const StateVector x = rng.uniform_in(model.state_box);
        const StateVector xdot = eval_dynamics(model, x, ControlVector::Zero(2), DisturbanceVector::Zero(6));
        CHECK(xdot[3] == -p.gravity);
        CHECK(xdot[1] == 0.0);
        CHECK(xdot[5] == 0.0);
        CHECK(xdot[0] == x[1]);
        CHECK(xdot[2] == x[3]);
        CHECK(xdot[4] == x[5]);
    }
}

TEST_CASE("quadrotor thrust and torque directions", "[envs][quadrotor]") {
    const QuadrotorParams p;
    const SystemModel model = quadrotor_system(p);
    StateVector x = StateVector::Zero(6);
    x[4] = 0.2;
    const ControlVector u(Eigen::Vector2d(0.3, 0.1));
    const StateVector xdot = eval_dynamics(model, x, u, DisturbanceVector::Zero(6));
    CHECK(xdot[1] == Approx(-0.4 * std::sin(0.2) / p.mass));
    CHECK(xdot[3] == Approx(0.4 * std::cos(0.2) / p.mass - p.gravity));
    CHECK(xdot[5] == Approx((0.1 - 0.3) * p.arm / p.inertia_yy));
}

TEST_CASE("quadrotor phi_1 at a hand-evaluated state", "[envs][quadrotor]") {
    const QuadrotorParams p;
    const auto spec = boundary_barrier(p);
    StateVector x = StateVector::Zero(6);
    x[0] = 0.5;
    x[1] = 1.0;
    const auto phis = phi_sequence(spec, x);
    REQUIRE(phis.size() == 2);
    CHECK(phis[0] == Approx(0.5 * (0.7225 - 0.25)).epsilon(1e-14));
    CHECK(phis[1] == Approx(-0.5 + p.beta1 * 0.5 * (0.7225 - 0.25)).epsilon(1e-14));
}

TEST_CASE("quadrotor L_g L_f h matches finite differences", "[envs][quadrotor][property]") {
    const QuadrotorParams p;
    const Plant plant = make_quadrotor(p);
    const auto& spec = plant.constraints[0];
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        StateVector x = rng.uniform_in(plant.model.state_box);
        if (trial < 20) x[4] = 0.0;
        const Eigen::MatrixXd g = plant.model.input_matrix(x);
        const Eigen::VectorXd closed = spec.lie_g_lie_f(x);
        const Eigen::VectorXd grad = oracle::numeric_gradient(spec.lie_f[0], x, 1e-6);
        for (Eigen::Index j = 0; j < 2; ++j) {
            const double fd = grad.dot(g.col(j));
            CHECK(std::abs(closed[j] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
        }
        CHECK((grad - spec.grad_row(x)).norm() <= 1e-6 * (1.0 + grad.norm()));
    }
}

TEST_CASE("declared quadrotor disturbance constants bound the disturbance", "[envs][quadrotor][property]") {
    QuadrotorParams p;
    p.disturbance.rotor_loss_1 = 2e-4;  // unequal losses add a torque term
    const Plant plant = make_quadrotor(p);
    const auto& d = plant.disturbance;
    const BoxSet& X = plant.model.state_box;
    Rng rng(5);
    for (int trial = 0; trial < 20000; ++trial) {
        const StateVector x = rng.uniform_in(X), y = rng.uniform_in(X);
        CHECK((d(x) - d(y)).norm() <= d.declared_lipschitz * (x - y).norm() + 1e-12);
        CHECK(d(x).norm() <= d.declared_lipschitz * x.norm() + d.declared_origin_bound + 1e-12);
    }
    const StateVector x0 = StateVector::Zero(6);
    CHECK(d(x0)[5] == Approx((2e-4 - 5e-5) * p.arm / p.inertia_yy));
}

TEST_CASE("quadrotor parameter validation", "[envs][quadrotor]") {
    QuadrotorParams p;
    p.mass = 0.0;
    CHECK_THROWS_AS(make_quadrotor(p), ConfigError);
    p = QuadrotorParams{};
    p.reference.radius = 0.9;
    CHECK_THROWS_AS(make_quadrotor(p), ConfigError);
    p = QuadrotorParams{};
    p.u_max = -1.0;
    CHECK_THROWS_AS(make_quadrotor(p), ConfigError);
}

TEST_CASE("rewards", "[envs][reward]") {
    const UnicycleParams p;
    const ControlVector zero = ControlVector::Zero(2);
    const StateVector at_goal(Eigen::Vector3d(p.goal.x(), p.goal.y(), 0.7));
    CHECK(unicycle_reward(p, at_goal, zero) == 0.0);
    const StateVector unit(Eigen::Vector3d(p.goal.x() + 1.0, p.goal.y(), 0.0));
    CHECK(unicycle_reward(p, unit, zero) == Approx(-1.0));
    CHECK(unicycle_reward(p, unit, Eigen::Vector2d(1.0, 1.0)) == Approx(-1.0 - 2.0 * p.control_weight));
    // Far away the reward saturates at the lower clip.
    CHECK(unicycle_reward(p, StateVector(Eigen::Vector3d(-3.0, -3.0, 0.0)), zero) == kRewardMin);

    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        UnicycleParams shifted = p;
        const Eigen::Vector2d s(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        shifted.goal += s;
        StateVector x(Eigen::Vector3d(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), 0.0));
        StateVector xs = x;
        xs.head<2>() += s;
        const ControlVector u(Eigen::Vector2d(rng.uniform(-1.0, 2.0), rng.uniform(-3.0, 3.0)));
        CHECK(unicycle_reward(shifted, xs, u) == Approx(unicycle_reward(p, x, u)).margin(1e-12));
    }

    const QuadrotorParams q;
    const Plant quad = make_quadrotor(q);
    StateVector on_ref = StateVector::Zero(6);
    const Eigen::Vector2d r = q.reference.position(1.3);
    on_ref[0] = r.x();
    on_ref[2] = r.y();
    CHECK(clip_reward(quad.raw_reward(on_ref, quad.equilibrium_input, 1.3)) == Approx(0.0).margin(1e-15));
    on_ref[0] += 1.0;
    CHECK(clip_reward(quad.raw_reward(on_ref, quad.equilibrium_input, 1.3)) == Approx(-1.0));
}
