// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used only by tests. Nothing here
// calls into the code paths it is compared against.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace oracle {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Mat4 = std::array<std::array<double, 4>, 4>;

inline Mat3 quat_to_matrix(const std::array<double, 4>& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
             {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
             {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

/// Angle of R_a^T R_b from its trace, degrees.
inline double trace_angle_deg(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const Mat3 ra = quat_to_matrix(a), rb = quat_to_matrix(b);
    double tr = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) tr += ra[k][i] * rb[k][i];
    const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

inline Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
    Mat4 c{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 4; ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

/// Homogeneous transform chain: T_j = T_parent * [R_j | offset_j].
inline std::vector<std::array<double, 3>> fk_homogeneous(const std::vector<std::array<double, 4>>& quats,
                                                        const std::vector<int>& parent,
                                                        const std::vector<std::array<double, 3>>& offset) {
    std::vector<Mat4> world(quats.size());
    std::vector<std::array<double, 3>> pos(quats.size());
    for (std::size_t j = 0; j < quats.size(); ++j) {
        const Mat3 r = quat_to_matrix(quats[j]);
        Mat4 local{};
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 3; ++k) local[i][k] = r[i][k];
            local[i][3] = offset[j][i];
        }
        local[3][3] = 1.0;
        world[j] = parent[j] < 0 ? local : mat4_mul(world[static_cast<std::size_t>(parent[j])], local);
        pos[j] = {world[j][0][3], world[j][1][3], world[j][2][3]};
    }
    return pos;
}

/// Plain scalar-loop perceptron: hidden layers leaky-ReLU(0.2), identity output.
/// weights[l][o][i], biases[l][o].
inline std::vector<double> mlp_scalar(const std::vector<std::vector<std::vector<double>>>& weights,
                                      const std::vector<std::vector<double>>& biases, std::vector<double> x) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
        std::vector<double> y(weights[l].size());
        for (std::size_t o = 0; o < y.size(); ++o) {
            double acc = biases[l][o];
            for (std::size_t i = 0; i < x.size(); ++i) acc += weights[l][o][i] * x[i];
            y[o] = (l + 1 < weights.size() && acc <= 0.0) ? 0.2 * acc : acc;
        }
        x = std::move(y);
    }
    return x;
}

/// Exhaustive nearest-code scan; first minimum wins.
inline int brute_force_nearest(const std::vector<double>& z, const std::vector<std::vector<double>>& codes) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < codes.size(); ++k) {
        double d = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) d += (z[i] - codes[k][i]) * (z[i] - codes[k][i]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

}  // namespace oracle
