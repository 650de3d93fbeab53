#pragma once

#include <cmath>

#include "nsp/latent.hpp"
#include "nsp/tensor.hpp"

namespace nsp {

constexpr double kLog2Pi = 1.8378770664093454836;

struct LossWeights {
    double beta_kl = 0.5;
    double beta_sde = 0.01;
    double beta_ctx = 15.0;
    double beta_delta = 90.0;
};

struct LossBreakdown {
    double rec = 0.0;
    double ctx = 0.0;
    double prior = 0.0;
    double trans = 0.0;
    double delta = 0.0;
    double total = 0.0;
};

/// Mean heteroscedastic Gaussian negative log-likelihood over observations:
/// 1/K sum 0.5 [log 2pi + log_var + (y - mean)^2 / exp(log_var)].
/// Evaluated in raw mm/h target space.
inline Tensor gaussian_nll(const Tensor& mean_at, const Tensor& log_var_at,
                           const Tensor& targets) {
    if (mean_at.numel() == 0) throw NumericError("gaussian_nll: empty observation set");
    if (mean_at.shape() != log_var_at.shape() || mean_at.shape() != targets.shape())
        throw ShapeError("gaussian_nll: shape mismatch");
    Tensor err = sub(targets, mean_at);
    Tensor quad = mul(square(err), exp_op(neg(log_var_at)));
    Tensor per = scale(add_scalar(add(log_var_at, quad), kLog2Pi), 0.5);
    return mean(per);
}

/// Mask-selected variant of the same likelihood (mean over mask-true cells).
inline Tensor gaussian_nll_masked(const Tensor& mean_t, const Tensor& log_var_t,
                                  const Tensor& targets, const Tensor& mask) {
    Tensor err = sub(targets, mean_t);
    Tensor quad = mul(square(err), exp_op(neg(log_var_t)));
    Tensor per = scale(add_scalar(add(log_var_t, quad), kLog2Pi), 0.5);
    return masked_reduce(per, mask, ReduceKind::Mean);
}

/// KL(q || N(0, I)) averaged per coordinate:
/// 1/D' sum 0.5 (sigma^2 + mu^2 - 1 - log sigma^2).
inline Tensor prior_kl(const LatentPosterior& post) {
    Tensor var = exp_op(post.log_var);
    Tensor per = scale(sub(add(var, square(post.mean)), add_scalar(post.log_var, 1.0)), 0.5);
    return mean(per);
}

/// Closed-form KL(q_next || transition) for diagonal Gaussians, averaged per
/// coordinate: 0.5 [log(v_p / v_q) + (v_q + (mu_q - m_p)^2) / v_p - 1].
/// The transition carries any stop-gradient applied to z upstream.
inline Tensor transition_kl(const LatentPosterior& q_next, const TransitionGaussian& trans) {
    if (q_next.mean.shape() != trans.mean.shape())
        throw ShapeError("transition_kl: shape mismatch");
    Tensor v_q = exp_op(q_next.log_var);
    Tensor log_vp = log_op(trans.var);
    Tensor diff2 = square(sub(q_next.mean, trans.mean));
    Tensor ratio = div(add(v_q, diff2), trans.var);
    Tensor per = scale(add_scalar(add(sub(log_vp, q_next.log_var), ratio), -1.0), 0.5);
    return mean(per);
}

/// Girsanov drift-matching loss, the matched-variance special case of the
/// transition KL: 0.5 (mu_q - m_p)^2 / v_p, averaged per coordinate.
inline Tensor girsanov_loss(const LatentPosterior& q_next, const TransitionGaussian& trans) {
    if (q_next.mean.shape() != trans.mean.shape())
        throw ShapeError("girsanov_loss: shape mismatch");
    Tensor diff2 = square(sub(q_next.mean, trans.mean));
    return mean(scale(div(diff2, trans.var), 0.5));
}

/// Graph-bearing loss terms; undefined tensors contribute zero.
struct LossTerms {
    Tensor rec;
    Tensor ctx;
    Tensor prior;
    Tensor trans;
    Tensor delta;
};

inline Tensor total_loss(const LossTerms& terms, const LossWeights& w,
                         LossBreakdown* breakdown = nullptr) {
    Tensor total = terms.rec.defined() ? terms.rec : Tensor::scalar(0.0);
    if (terms.ctx.defined()) total = add(total, scale(terms.ctx, w.beta_ctx));
    if (terms.prior.defined()) total = add(total, scale(terms.prior, w.beta_kl));
    if (terms.trans.defined()) total = add(total, scale(terms.trans, w.beta_sde));
    if (terms.delta.defined()) total = add(total, scale(terms.delta, w.beta_delta));
    if (breakdown) {
        breakdown->rec = terms.rec.defined() ? terms.rec.item() : 0.0;
        breakdown->ctx = terms.ctx.defined() ? terms.ctx.item() : 0.0;
        breakdown->prior = terms.prior.defined() ? terms.prior.item() : 0.0;
        breakdown->trans = terms.trans.defined() ? terms.trans.item() : 0.0;
        breakdown->delta = terms.delta.defined() ? terms.delta.item() : 0.0;
        breakdown->total = total.item();
    }
    return total;
}

/// Weighted held-out MSE for the learned baselines: sum w_i (yhat - y)^2 /
/// sum w_i with w_i = weight when y_i >= rain_threshold else 1.
inline Tensor weighted_heldout_mse(const Tensor& pred_at, const Tensor& targets,
                                   double rain_threshold = 0.5, double weight = 5.0) {
    if (pred_at.numel() == 0) throw NumericError("weighted_heldout_mse: empty target set");
    if (pred_at.shape() != targets.shape())
        throw ShapeError("weighted_heldout_mse: shape mismatch");
    std::vector<double> w(targets.numel());
    double wsum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = targets.values()[i] >= rain_threshold ? weight : 1.0;
        wsum += w[i];
    }
    Tensor weights = Tensor::from(targets.shape(), std::move(w));
    Tensor se = square(sub(pred_at, targets));
    return scale(sum(mul(se, weights)), 1.0 / wsum);
}

}  // namespace nsp
