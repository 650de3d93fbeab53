#pragma once

#include "nsp/tensor.hpp"

namespace nsp {

/// Diagonal Gaussian over the D x H' x W' latent field, tensors shaped
/// [1, D, H', W']. log_var is clamped to the configured range by the encoder.
struct LatentPosterior {
    Tensor mean;
    Tensor log_var;
};

/// One-step Euler-Maruyama transition: mean = z + f(z) dt, var = sigma(z)^2 dt.
struct TransitionGaussian {
    Tensor mean;
    Tensor var;
    double dt = 1.0;
};

}  // namespace nsp
