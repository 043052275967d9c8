#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ossod {

// Default EMA smoothing factor for the teacher update.
constexpr double kDefaultEmaAlpha = 0.999;

// Flat parameter vector with a layout tag. Two vectors are compatible when
// their tags match and their lengths agree; the tag is an opaque description
// of what the values mean (e.g. which model family produced them).
struct ParamVector {
    std::string layout_tag;
    std::vector<double> values;

    bool compatible_with(const ParamVector& other) const {
        return layout_tag == other.layout_tag && values.size() == other.values.size();
    }

    bool operator==(const ParamVector&) const = default;
};

struct EmaState {
    double alpha = kDefaultEmaAlpha;
    ParamVector current;    // teacher parameters
    std::int64_t step = 0;  // number of updates applied
};

EmaState make_ema_state(double alpha, ParamVector initial);

// One exponential-moving-average step:
//   teacher' = alpha * teacher + (1 - alpha) * student
// element-wise. The student vector must be layout-compatible with the state.
EmaState ema_update(const EmaState& state, const ParamVector& student);

}  // namespace ossod
