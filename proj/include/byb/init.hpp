#pragma once

#include "byb/rng.hpp"
#include "byb/tensor.hpp"

namespace byb {

inline Tensor normal_init(Shape shape, double stddev, Rng& rng, bool requires_grad = true) {
    Vec v(shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = stddev * rng.gauss();
    return Tensor::from_array(std::move(shape), std::move(v), requires_grad);
}

inline Tensor uniform_init(Shape shape, double bound, Rng& rng, bool requires_grad = true) {
    Vec v(shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-bound, bound);
    return Tensor::from_array(std::move(shape), std::move(v), requires_grad);
}

// Positional tables are scaled to the embedding-init magnitude; unit-amplitude
// sinusoids would drown the content signal entirely.
constexpr double kPositionEncodingScale = 0.02;

// Parameter-free sin/cos table: row p, column 2i holds sin(p / 10000^(2i/d)),
// column 2i+1 the matching cos, times `amplitude`.
inline Tensor sinusoidal_position_encodings(Index positions, Index d,
                                            double amplitude = kPositionEncodingScale) {
    Vec v(positions * d);
    for (Index p = 0; p < positions; ++p) {
        for (Index i = 0; i < d; ++i) {
            const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(d);
            const double angle = static_cast<double>(p) / std::pow(10000.0, exponent);
            v[p * d + i] = amplitude * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
    return Tensor::from_array(Shape{positions, d}, std::move(v), false);
}

}  // namespace byb
