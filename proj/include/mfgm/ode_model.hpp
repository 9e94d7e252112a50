#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mfgm/errors.hpp"

namespace mfgm {

/// Product of distinct state variables. Indices are 0-based and kept sorted; the empty
/// monomial is the constant 1.
class Monomial {
public:
    Monomial() = default;

    explicit Monomial(std::vector<int> states) : states_(std::move(states)) {
        std::sort(states_.begin(), states_.end());
        if (std::adjacent_find(states_.begin(), states_.end()) != states_.end()) {
            throw InvalidArgument("monomial repeats a state; only products of distinct states are allowed");
        }
        if (!states_.empty() && states_.front() < 0) {
            throw InvalidArgument("monomial state index must be non-negative");
        }
    }

    Monomial(std::initializer_list<int> states) : Monomial(std::vector<int>(states)) {}

    [[nodiscard]] const std::vector<int>& states() const noexcept { return states_; }
    [[nodiscard]] bool empty() const noexcept { return states_.empty(); }
    [[nodiscard]] std::size_t degree() const noexcept { return states_.size(); }

    [[nodiscard]] bool contains(int state) const {
        return std::binary_search(states_.begin(), states_.end(), state);
    }

    [[nodiscard]] Monomial without(int state) const {
        Monomial out;
        out.states_.reserve(states_.size());
        for (int s : states_) {
            if (s != state) out.states_.push_back(s);
        }
        return out;
    }

    /// Value at one time point, `x` indexed by state.
    template <typename Vec>
    [[nodiscard]] double eval(const Vec& x) const {
        double v = 1.0;
        for (int s : states_) v *= x[s];
        return v;
    }

    bool operator==(const Monomial&) const = default;

private:
    std::vector<int> states_;
};

/// One signed rate term `sign * theta[param] * monomial` of an equation.
struct Term {
    int param = 0;
    int sign = +1;
    Monomial monomial;

    [[nodiscard]] double coefficient(const Eigen::VectorXd& theta) const {
        return static_cast<double>(sign) * theta[param];
    }

    bool operator==(const Term&) const = default;
};

/// K-state mass-action ODE, linear in its M parameters: dx_k/dt = sum over terms of k.
class OdeSystem {
public:
    OdeSystem(int num_states, int num_params, std::vector<std::vector<Term>> equations)
        : num_states_(num_states), num_params_(num_params), equations_(std::move(equations)) {
        if (num_states_ <= 0 || num_params_ <= 0) {
            throw InvalidArgument("ODE system needs at least one state and one parameter");
        }
        if (static_cast<int>(equations_.size()) != num_states_) {
            throw DimensionMismatch("expected " + std::to_string(num_states_) + " equations, got " +
                                    std::to_string(equations_.size()));
        }
        for (const auto& eq : equations_) {
            for (const auto& term : eq) {
                if (term.param < 0 || term.param >= num_params_) {
                    throw IndexOutOfRange("term parameter index " + std::to_string(term.param + 1) +
                                          " outside 1.." + std::to_string(num_params_));
                }
                if (term.sign != 1 && term.sign != -1) {
                    throw InvalidArgument("term sign must be +1 or -1");
                }
                if (!term.monomial.empty() && term.monomial.states().back() >= num_states_) {
                    throw IndexOutOfRange("monomial state index " +
                                          std::to_string(term.monomial.states().back() + 1) +
                                          " outside 1.." + std::to_string(num_states_));
                }
            }
        }
    }

    [[nodiscard]] int num_states() const noexcept { return num_states_; }
    [[nodiscard]] int num_params() const noexcept { return num_params_; }
    [[nodiscard]] const std::vector<std::vector<Term>>& equations() const noexcept { return equations_; }
    [[nodiscard]] const std::vector<Term>& equation(int k) const { return equations_.at(k); }

    bool operator==(const OdeSystem&) const = default;

private:
    int num_states_;
    int num_params_;
    std::vector<std::vector<Term>> equations_;
};

namespace detail {

inline void check_theta(const OdeSystem& sys, const Eigen::VectorXd& theta) {
    if (theta.size() != sys.num_params()) {
        throw DimensionMismatch("theta has " + std::to_string(theta.size()) + " entries, system has " +
                                std::to_string(sys.num_params()) + " parameters");
    }
}

inline void check_state(const OdeSystem& sys, Eigen::Index size) {
    if (size != sys.num_states()) {
        throw DimensionMismatch("state has " + std::to_string(size) + " entries, system has " +
                                std::to_string(sys.num_states()) + " states");
    }
}

}  // namespace detail

/// Right-hand side f(x, theta).
inline Eigen::VectorXd evaluate(const OdeSystem& sys, const Eigen::VectorXd& theta,
                                const Eigen::VectorXd& x) {
    detail::check_theta(sys, theta);
    detail::check_state(sys, x.size());
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(sys.num_states());
    for (int k = 0; k < sys.num_states(); ++k) {
        for (const auto& term : sys.equation(k)) {
            dx[k] += term.coefficient(theta) * term.monomial.eval(x);
        }
    }
    return dx;
}

/// N x M matrix G_k with f_k(X, theta) = G_k theta over the time columns of X (K x N).
inline Eigen::MatrixXd design_matrix(const OdeSystem& sys, const Eigen::MatrixXd& X, int k) {
    detail::check_state(sys, X.rows());
    if (k < 0 || k >= sys.num_states()) throw IndexOutOfRange("state index out of range");
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(X.cols(), sys.num_params());
    for (Eigen::Index t = 0; t < X.cols(); ++t) {
        for (const auto& term : sys.equation(k)) {
            G(t, term.param) += static_cast<double>(term.sign) * term.monomial.eval(X.col(t));
        }
    }
    return G;
}

struct AffineDecomposition {
    Eigen::VectorXd slope;      // df_k / dx_u, free of x_u
    Eigen::VectorXd intercept;  // f_k with x_u = 0
};

/// Splits every f_k at one time point as slope_k * x_u + intercept_k. Exact because each
/// monomial contains x_u at most once.
inline AffineDecomposition affine_in_state(const OdeSystem& sys, const Eigen::VectorXd& theta,
                                           const Eigen::VectorXd& x, int u) {
    detail::check_theta(sys, theta);
    detail::check_state(sys, x.size());
    if (u < 0 || u >= sys.num_states()) throw IndexOutOfRange("state index out of range");
    AffineDecomposition out{Eigen::VectorXd::Zero(sys.num_states()),
                            Eigen::VectorXd::Zero(sys.num_states())};
    for (int k = 0; k < sys.num_states(); ++k) {
        for (const auto& term : sys.equation(k)) {
            const double c = term.coefficient(theta);
            if (term.monomial.contains(u)) {
                out.slope[k] += c * term.monomial.without(u).eval(x);
            } else {
                out.intercept[k] += c * term.monomial.eval(x);
            }
        }
    }
    return out;
}

/// dx1 = theta1 x1 - theta2 x1 x2,  dx2 = -theta3 x2 + theta4 x1 x2
inline OdeSystem builtin_lotka_volterra() {
    return OdeSystem(2, 4,
                     {{Term{0, +1, Monomial{0}}, Term{1, -1, Monomial{0, 1}}},
                      {Term{2, -1, Monomial{1}}, Term{3, +1, Monomial{0, 1}}}});
}

/// Signalling pathway with x1=[S], x2=[Sd], x3=[R], x4=[RS], x5 standing in for the
/// Michaelis-Menten fraction of [Rpp]; theta = (k1, k2, k3, k4, V). Km does not appear.
inline OdeSystem builtin_protein_pathway() {
    return OdeSystem(5, 5,
                     {
                         {Term{0, -1, Monomial{0}}, Term{1, -1, Monomial{0, 2}}, Term{2, +1, Monomial{3}}},
                         {Term{0, +1, Monomial{0}}},
                         {Term{1, -1, Monomial{0, 2}}, Term{2, +1, Monomial{3}}, Term{4, +1, Monomial{4}}},
                         {Term{1, +1, Monomial{0, 2}}, Term{2, -1, Monomial{3}}, Term{3, -1, Monomial{3}}},
                         {Term{3, +1, Monomial{3}}, Term{4, -1, Monomial{4}}},
                     });
}

}  // namespace mfgm
