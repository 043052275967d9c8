#include "ossod/ema.hpp"

#include <cmath>

#include "ossod/errors.hpp"

namespace ossod {

namespace {

void check_finite(const ParamVector& v, const char* what) {
    for (double x : v.values) {
        require(std::isfinite(x), errc::validation,
                std::string(what) + ": parameters must be finite");
    }
}

}  // namespace

EmaState make_ema_state(double alpha, ParamVector initial) {
    require(alpha >= 0.0 && alpha <= 1.0, errc::validation, "ema: alpha must be in [0, 1]");
    require(!initial.values.empty(), errc::validation, "ema: empty parameter vector");
    check_finite(initial, "ema");
    return EmaState{alpha, std::move(initial), 0};
}

EmaState ema_update(const EmaState& state, const ParamVector& student) {
    require(student.compatible_with(state.current), errc::validation,
            "ema: student parameters incompatible with teacher layout");
    check_finite(student, "ema");
    EmaState next = state;
    for (std::size_t i = 0; i < next.current.values.size(); ++i) {
        next.current.values[i] =
            state.alpha * state.current.values[i] + (1.0 - state.alpha) * student.values[i];
    }
    next.step = state.step + 1;
    return next;
}

}  // namespace ossod
