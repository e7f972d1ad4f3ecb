#pragma once

#include <algorithm>
#include <cmath>

namespace cablab {

// One rounding mode everywhere: round half away from zero (what std::round
// does). Pinned so the integer kernel oracle is reproducible.
inline float round_half_away(float x) { return std::round(x); }

inline int quantize_value(float x, float scale, int zero_point, int qmin, int qmax) {
    const float q = round_half_away(x / scale) + static_cast<float>(zero_point);
    const float c = std::min(static_cast<float>(qmax), std::max(static_cast<float>(qmin), q));
    return static_cast<int>(c);
}

// True when round(x/s)+z lands inside [qmin,qmax]; the STE gradient mask.
inline bool quantize_in_range(float x, float scale, int zero_point, int qmin, int qmax) {
    const float q = round_half_away(x / scale) + static_cast<float>(zero_point);
    return q >= static_cast<float>(qmin) && q <= static_cast<float>(qmax);
}

inline float fake_quant_value(float x, float scale, int zero_point, int qmin, int qmax) {
    const int q = quantize_value(x, scale, zero_point, qmin, qmax);
    return scale * static_cast<float>(q - zero_point);
}

}  // namespace cablab
