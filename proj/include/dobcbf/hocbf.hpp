#pragma once

#include "dobcbf/core.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dobcbf {

/// Extended class-K function: linear k*s or cubic k*s^3.
struct ClassKappa {
    enum class Kind { linear, cubic };
    Kind kind = Kind::linear;
    double gain = 1.0;

    static ClassKappa linear(double k) { return {Kind::linear, k}; }
    static ClassKappa cubic(double k) { return {Kind::cubic, k}; }

    double operator()(double s) const { return kind == Kind::linear ? gain * s : gain * s * s * s; }
    double derivative(double s) const { return kind == Kind::linear ? gain : 3.0 * gain * s * s; }
};

/// Truncated Taylor series of a scalar along a flow: coeff[k] = y^(k)(0) / k!.
class TaylorJet {
public:
    TaylorJet() = default;
    explicit TaylorJet(std::vector<double> coeff) : c_(std::move(coeff)) {}

    /// Build from successive time derivatives y, y', y'', ...
    static TaylorJet from_derivatives(const std::vector<double>& derivs) {
        std::vector<double> c(derivs.size());
        double fact = 1.0;
        for (std::size_t k = 0; k < derivs.size(); ++k) {
            if (k > 0) fact *= static_cast<double>(k);
            c[k] = derivs[k] / fact;
        }
        return TaylorJet(std::move(c));
    }

    std::size_t order() const { return c_.empty() ? 0 : c_.size() - 1; }
    double value() const { return c_.empty() ? 0.0 : c_[0]; }

    /// k-th time derivative at t = 0.
    double derivative(std::size_t k) const {
        if (k >= c_.size()) return 0.0;
        double fact = 1.0;
        for (std::size_t i = 2; i <= k; ++i) fact *= static_cast<double>(i);
        return c_[k] * fact;
    }

    /// Time derivative; loses one order.
    TaylorJet differentiate() const {
        if (c_.size() <= 1) return TaylorJet(std::vector<double>{});
        std::vector<double> d(c_.size() - 1);
        for (std::size_t k = 0; k + 1 < c_.size(); ++k) d[k] = static_cast<double>(k + 1) * c_[k + 1];
        return TaylorJet(std::move(d));
    }

    TaylorJet truncated(std::size_t order) const {
        std::vector<double> c(c_.begin(), c_.begin() + std::min(c_.size(), order + 1));
        return TaylorJet(std::move(c));
    }

    friend TaylorJet operator+(const TaylorJet& a, const TaylorJet& b) {
        const std::size_t len = std::min(a.c_.size(), b.c_.size());
        std::vector<double> c(len);
        for (std::size_t k = 0; k < len; ++k) c[k] = a.c_[k] + b.c_[k];
        return TaylorJet(std::move(c));
    }

    friend TaylorJet operator*(double s, const TaylorJet& a) {
        std::vector<double> c = a.c_;
        for (double& v : c) v *= s;
        return TaylorJet(std::move(c));
    }

    friend TaylorJet operator*(const TaylorJet& a, const TaylorJet& b) {
        const std::size_t len = std::min(a.c_.size(), b.c_.size());
        std::vector<double> c(len, 0.0);
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; i + j < len; ++j) c[i + j] += a.c_[i] * b.c_[j];
        return TaylorJet(std::move(c));
    }

private:
    std::vector<double> c_;
};

inline TaylorJet compose(const ClassKappa& beta, const TaylorJet& y) {
    return beta.kind == ClassKappa::Kind::linear ? beta.gain * y : beta.gain * (y * y * y);
}

/// A barrier h with input relative degree m and the Lie-derivative data the
/// filter needs:
///   lie_f[k-1]  = L_f^k h, k = 1..m
///   lie_g_lie_f = L_g L_f^{m-1} h        (row over inputs)
///   grad_row    = d(L_f^{m-1} h)/dx       (row over states)
///   o_term      = sum_{i=1}^{m-1} L_f^i (beta_{m-i} o phi_{m-i-1}); optional, derived
///                 from the jet of h along f when unset.
struct ConstraintSpec {
    std::string name;
    int m = 1;
    std::function<double(const StateVector&)> h;
    std::vector<std::function<double(const StateVector&)>> lie_f;
    std::function<Eigen::VectorXd(const StateVector&)> lie_g_lie_f;
    std::function<Eigen::VectorXd(const StateVector&)> grad_row;
    std::function<double(const StateVector&)> o_term;
    std::vector<ClassKappa> betas;

    void validate() const {
        if (m < 1) throw ContractError("ConstraintSpec " + name + ": m must be >= 1");
        if (!h || !lie_g_lie_f || !grad_row) {
            throw ContractError("ConstraintSpec " + name + ": missing callback");
        }
        if (static_cast<int>(lie_f.size()) != m) {
            throw ContractError("ConstraintSpec " + name + ": need L_f^k h for k = 1..m");
        }
        if (static_cast<int>(betas.size()) != m) {
            throw ContractError("ConstraintSpec " + name + ": need m class-K functions");
        }
        for (const auto& b : betas) {
            if (!(b.gain > 0.0)) throw ContractError("ConstraintSpec " + name + ": gains must be > 0");
        }
    }

    /// Jet of h along the nominal flow, to order m.
    TaylorJet jet(const StateVector& x) const {
        std::vector<double> d{h(x)};
        for (const auto& lf : lie_f) d.push_back(lf(x));
        return TaylorJet::from_derivatives(d);
    }
};

/// The sequence phi_i = phi_{i-1}' + beta_i(phi_{i-1}), returned as jets;
/// phi_i keeps order m - i.
inline std::vector<TaylorJet> phi_jets(const ConstraintSpec& spec, const StateVector& x) {
    std::vector<TaylorJet> phis{spec.jet(x)};
    for (int i = 1; i < spec.m; ++i) {
        const TaylorJet& prev = phis.back();
        phis.push_back(prev.differentiate() + compose(spec.betas[i - 1], prev).truncated(prev.order() - 1));
    }
    return phis;
}

/// [phi_0(x), ..., phi_{m-1}(x)].
inline std::vector<double> phi_sequence(const ConstraintSpec& spec, const StateVector& x) {
    std::vector<double> out;
    for (const auto& j : phi_jets(spec, x)) out.push_back(j.value());
    return out;
}

/// O(h) from the jets; used when the spec does not supply a closed form.
inline double o_term_from_jets(const ConstraintSpec& spec, const std::vector<TaylorJet>& phis) {
    double o = 0.0;
    for (int i = 1; i <= spec.m - 1; ++i) {
        o += compose(spec.betas[spec.m - i - 1], phis[spec.m - i - 1]).derivative(i);
    }
    return o;
}

inline double o_term(const ConstraintSpec& spec, const StateVector& x) {
    if (spec.m == 1) return 0.0;
    if (spec.o_term) return spec.o_term(x);
    return o_term_from_jets(spec, phi_jets(spec, x));
}

/// coeff · u >= rhs.
struct AffineConstraint {
    Eigen::VectorXd coeff;
    double rhs = 0.0;

    bool satisfied_by(const ControlVector& u, double tol = 0.0) const {
        return coeff.dot(u) >= rhs - tol;
    }
};

/// Terms of the barrier condition that do not involve u or the disturbance.
struct BarrierTerms {
    double lie_f_m = 0.0;          ///< L_f^m h
    double o = 0.0;                ///< O(h)
    double beta_m_phi = 0.0;       ///< beta_m(phi_{m-1})
    Eigen::VectorXd lie_g;         ///< L_g L_f^{m-1} h
    Eigen::VectorXd grad;          ///< [L_f^{m-1} h]_x
};

inline BarrierTerms barrier_terms(const ConstraintSpec& spec, const StateVector& x) {
    BarrierTerms t;
    const auto phis = phi_jets(spec, x);
    t.lie_f_m = spec.lie_f[spec.m - 1](x);
    t.o = spec.m == 1 ? 0.0 : (spec.o_term ? spec.o_term(x) : o_term_from_jets(spec, phis));
    t.beta_m_phi = spec.betas[spec.m - 1](phis.back().value());
    t.lie_g = spec.lie_g_lie_f(x);
    t.grad = spec.grad_row(x);
    return t;
}

/// K(t,x,u) + beta_m(phi_{m-1}) >= 0 rearranged as coeff·u >= rhs, using the
/// estimate d_hat and the current error bound delta.
inline AffineConstraint assemble_constraint(const ConstraintSpec& spec, const StateVector& x,
                                            const DisturbanceVector& d_hat, double delta) {
    const BarrierTerms t = barrier_terms(spec, x);
    require_dim(d_hat, t.grad.size(), "assemble_constraint: d_hat");
    AffineConstraint c;
    c.coeff = t.lie_g;
    c.rhs = -(t.lie_f_m + t.o + t.grad.dot(d_hat) - t.grad.norm() * delta + t.beta_m_phi);
    return c;
}

/// Design-time worst-case condition: the sup over the input box of
///   L_f^m h + L_g L_f^{m-1} h u - |[L_f^{m-1} h]_x| (theta + 2 delta_max) + O(h) + beta_m(phi_{m-1})
/// is nonnegative. The expression is affine in u, so the sup sits at a vertex.
inline double worst_case_margin(const ConstraintSpec& spec, const StateVector& x, double theta,
                                double delta_max, const BoxSet& input_box) {
    const BarrierTerms t = barrier_terms(spec, x);
    const ControlVector u = input_box.argmax_linear(t.lie_g);
    return t.lie_f_m + t.lie_g.dot(u) - t.grad.norm() * (theta + 2.0 * delta_max) + t.o +
           t.beta_m_phi;
}

inline bool check_worst_case(const ConstraintSpec& spec, const StateVector& x, double theta,
                             double delta_max, const BoxSet& input_box) {
    return worst_case_margin(spec, x, theta, delta_max, input_box) >= 0.0;
}

/// Left-hand side of the high-order barrier condition with the true disturbance.
inline double true_condition_value(const ConstraintSpec& spec, const StateVector& x,
                                   const ControlVector& u, const DisturbanceVector& d_true) {
    const BarrierTerms t = barrier_terms(spec, x);
    return t.lie_f_m + t.lie_g.dot(u) + t.grad.dot(d_true) + t.o + t.beta_m_phi;
}

inline bool true_condition_holds(const ConstraintSpec& spec, const StateVector& x,
                                 const ControlVector& u, const DisturbanceVector& d_true) {
    return true_condition_value(spec, x, u, d_true) >= 0.0;
}

}  // namespace dobcbf
