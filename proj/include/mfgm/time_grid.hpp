#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mfgm/errors.hpp"

namespace mfgm {

/// Strictly increasing sample times, at least two of them.
class TimeGrid {
public:
    explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {
        if (times_.size() < 2) {
            throw InvalidArgument("time grid needs at least two points");
        }
        for (std::size_t i = 0; i < times_.size(); ++i) {
            if (!std::isfinite(times_[i])) {
                throw InvalidArgument("time grid contains a non-finite value");
            }
            if (i > 0 && !(times_[i] > times_[i - 1])) {
                throw InvalidArgument("time grid must be strictly increasing");
            }
        }
    }

    /// Uniform grid start, start+step, ... up to and including `stop` (within half a step).
    static TimeGrid uniform(double start, double stop, double step) {
        if (!(step > 0.0) || !(stop > start)) {
            throw InvalidArgument("uniform grid needs step > 0 and stop > start");
        }
        const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 0.5)) + 1;
        std::vector<double> t(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = start + static_cast<double>(i) * step;
        }
        return TimeGrid(std::move(t));
    }

    [[nodiscard]] std::size_t size() const noexcept { return times_.size(); }
    [[nodiscard]] double operator[](std::size_t i) const { return times_[i]; }
    [[nodiscard]] std::span<const double> times() const noexcept { return times_; }
    [[nodiscard]] double front() const { return times_.front(); }
    [[nodiscard]] double back() const { return times_.back(); }

    [[nodiscard]] double min_gap() const {
        double gap = times_[1] - times_[0];
        for (std::size_t i = 2; i < times_.size(); ++i) {
            gap = std::min(gap, times_[i] - times_[i - 1]);
        }
        return gap;
    }

    bool operator==(const TimeGrid&) const = default;

private:
    std::vector<double> times_;
};

}  // namespace mfgm
