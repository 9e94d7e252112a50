#pragma once

// Text format for mass-action systems, one equation per line:
//
//   # Lotka-Volterra
//   dx1 = +theta1*x1 - theta2*x1*x2
//   dx2 = -theta3*x2 + theta4*x1*x2
//
// Indices are 1-based. Each term is an optional sign followed by exactly one thetaI and any
// number of distinct xJ factors joined by '*'. An equation without terms is written `dxK = 0`.
// The number of parameters is the largest theta index, and every index up to it must be used.

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/ode_model.hpp"

namespace mfgm {

namespace detail {

class LineScanner {
public:
    LineScanner(std::string_view text, std::size_t line) : text_(text), line_(line) {}

    void skip_space() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }
    [[nodiscard]] bool done() {
        skip_space();
        return pos_ >= text_.size();
    }
    [[nodiscard]] char peek() {
        skip_space();
        return pos_ < text_.size() ? text_[pos_] : '\0';
    }
    bool accept(char c) {
        if (peek() == c) {
            ++pos_;
            return true;
        }
        return false;
    }
    void expect(char c) {
        if (!accept(c)) fail(std::string("expected '") + c + "'");
    }
    bool accept_word(std::string_view word) {
        skip_space();
        if (text_.substr(pos_, word.size()) == word) {
            pos_ += word.size();
            return true;
        }
        return false;
    }
    int read_index() {
        std::size_t start = pos_;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        if (start == pos_) fail("expected an index");
        const int v = std::stoi(std::string(text_.substr(start, pos_ - start)));
        if (v < 1) fail("indices are 1-based");
        return v;
    }
    [[noreturn]] void fail(const std::string& msg) const {
        throw ParseError(msg + " at column " + std::to_string(pos_ + 1), line_);
    }

private:
    std::string_view text_;
    std::size_t line_;
    std::size_t pos_ = 0;
};

struct RawTerm {
    int param;  // 1-based
    int sign;
    std::vector<int> states;  // 1-based
};

}  // namespace detail

inline OdeSystem parse_model(std::string_view text) {
    std::map<int, std::vector<detail::RawTerm>> equations;
    std::map<int, std::size_t> defined_on;
    int max_param = 0;
    std::set<int> used_params;

    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        detail::LineScanner sc(line, line_no);
        if (sc.done()) continue;

        if (!sc.accept_word("dx")) sc.fail("equation must start with dxK");
        const int k = sc.read_index();
        if (defined_on.count(k)) {
            sc.fail("equation dx" + std::to_string(k) + " already defined on line " +
                    std::to_string(defined_on[k]));
        }
        defined_on[k] = line_no;
        sc.expect('=');
        auto& terms = equations[k];

        if (sc.peek() == '0') {
            sc.accept('0');
            if (!sc.done()) sc.fail("unexpected text after 0");
            continue;
        }
        bool first = true;
        while (!sc.done()) {
            int sign = +1;
            if (sc.accept('+')) {
            } else if (sc.accept('-')) {
                sign = -1;
            } else if (!first) {
                sc.fail("expected '+' or '-' between terms");
            }
            first = false;
            detail::RawTerm term{0, sign, {}};
            do {
                if (sc.accept_word("theta")) {
                    if (term.param != 0) sc.fail("a term may contain only one parameter");
                    term.param = sc.read_index();
                } else if (sc.accept_word("x")) {
                    const int j = sc.read_index();
                    for (int s : term.states) {
                        if (s == j) sc.fail("state x" + std::to_string(j) + " repeated within a term");
                    }
                    term.states.push_back(j);
                } else {
                    sc.fail("expected thetaI or xJ");
                }
            } while (sc.accept('*'));
            if (term.param == 0) sc.fail("term has no parameter");
            max_param = std::max(max_param, term.param);
            used_params.insert(term.param);
            terms.push_back(std::move(term));
        }
    }

    if (equations.empty()) throw ParseError("model has no equations", 0);
    const int K = static_cast<int>(equations.size());
    for (int k = 1; k <= K; ++k) {
        if (!equations.count(k)) throw ParseError("missing equation dx" + std::to_string(k), 0);
    }
    if (max_param == 0) throw ParseError("model has no parameters", 0);
    for (int p = 1; p <= max_param; ++p) {
        if (!used_params.count(p)) throw ParseError("parameter theta" + std::to_string(p) + " is never used", 0);
    }

    std::vector<std::vector<Term>> eqs(K);
    for (auto& [k, terms] : equations) {
        for (const auto& t : terms) {
            std::vector<int> states;
            for (int s : t.states) {
                if (s > K) {
                    throw ParseError("state x" + std::to_string(s) + " exceeds the " +
                                         std::to_string(K) + " declared equations",
                                     defined_on[k]);
                }
                states.push_back(s - 1);
            }
            eqs[k - 1].push_back(Term{t.param - 1, t.sign, Monomial(std::move(states))});
        }
    }
    return OdeSystem(K, max_param, std::move(eqs));
}

inline std::string serialize_model(const OdeSystem& sys) {
    std::ostringstream out;
    for (int k = 0; k < sys.num_states(); ++k) {
        out << "dx" << (k + 1) << " =";
        const auto& eq = sys.equation(k);
        if (eq.empty()) out << " 0";
        for (std::size_t i = 0; i < eq.size(); ++i) {
            const auto& t = eq[i];
            if (i == 0) {
                out << ' ' << (t.sign > 0 ? "+" : "-");
            } else {
                out << (t.sign > 0 ? " + " : " - ");
            }
            out << "theta" << (t.param + 1);
            for (int s : t.monomial.states()) out << "*x" << (s + 1);
        }
        out << '\n';
    }
    return out.str();
}

inline OdeSystem load_model_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open model file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_model(buf.str());
}

}  // namespace mfgm
