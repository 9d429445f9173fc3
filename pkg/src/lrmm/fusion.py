"""Shared scoring layer and the joint training objective.

The scorer is a single affine layer over the concatenated reconstructions
of all four modalities. The objective is a learned-weight combination of
the rating regression loss and the per-modality reconstruction losses,
each reconstruction term carrying a KL sparsity penalty on its hidden
activations.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from .data import MODALITIES
from .errors import InvalidArgument

# softplus(raw) with this raw equals exactly 1, so the two objective
# weights start the optimization balanced
WEIGHT_RAW_INIT = math.log(math.e - 1.0)

RHO_HAT_CLAMP = 1e-7


def init_fusion_params(store: nn.ParameterStore, modality_dim: int,
                       rng: np.random.Generator):
    store.add("fusion.w_s", nn.init_uniform_fan(4 * modality_dim, 1, rng))
    store.add("fusion.b_s", np.zeros(()))
    store.add("fusion.alpha_raw", np.full((), WEIGHT_RAW_INIT))
    store.add("fusion.beta_raw", np.full((), WEIGHT_RAW_INIT))


def score_batch(fused: nn.Tensor, store: nn.ParameterStore) -> nn.Tensor:
    """(B, 4d) concatenated reconstructions -> (B,) raw predictions."""
    out = nn.affine(fused, store.tensor("fusion.w_s"), store.tensor("fusion.b_s"))
    return nn.reshape(out, (out.value.shape[0],))


def score(e_u: nn.Tensor, e_o: nn.Tensor, e_m: nn.Tensor, e_v: nn.Tensor,
          store: nn.ParameterStore) -> nn.Tensor:
    """Scalar prediction for one sample's four reconstruction vectors."""
    dims = {t.value.shape for t in (e_u, e_o, e_m, e_v)}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise InvalidArgument(f"modality vectors disagree in shape: {dims}")
    fused = nn.concat([e_u, e_o, e_m, e_v], axis=-1)
    out = nn.add(nn.matmul(fused, store.tensor("fusion.w_s")), store.tensor("fusion.b_s"))
    return nn.reshape(out, ())


def regression_loss(preds: nn.Tensor, truths: np.ndarray, lam: float,
                    theta_r: list[nn.Tensor], l2_squared: bool = False) -> nn.Tensor:
    """Mean squared error plus lam times the joint L2 norm of theta_r.

    The penalty is the norm itself by default; l2_squared switches to the
    squared-norm convention. lam=0 skips the term entirely.
    """
    truths = np.asarray(truths, dtype=np.float64)
    n = truths.shape[0]
    if n == 0:
        raise InvalidArgument("regression loss over an empty batch")
    if preds.value.shape != truths.shape:
        raise InvalidArgument(
            f"predictions {preds.value.shape} vs truths {truths.shape}"
        )
    mse = nn.scale(nn.tsum(nn.square(nn.sub(preds, nn.const(truths)))), 1.0 / n)
    if lam == 0.0:
        return mse
    sq = None
    for t in theta_r:
        term = nn.tsum(nn.square(t))
        sq = term if sq is None else nn.add(sq, term)
    if sq is None:
        return mse
    penalty = sq if l2_squared else nn.sqrt(sq)
    return nn.add(mse, nn.scale(penalty, lam))


def kl_from_mean_activation(rho_hat: nn.Tensor, rho: float) -> nn.Tensor:
    """KL divergence between target rate rho and each mean activation,
    summed over hidden units. rho_hat is clamped away from {0,1}."""
    if not (0.0 < rho < 1.0):
        raise InvalidArgument("rho must lie strictly inside (0, 1)")
    clamped = nn.clamp(rho_hat, RHO_HAT_CLAMP, 1.0 - RHO_HAT_CLAMP)
    n_units = clamped.value.size
    constant = n_units * (rho * math.log(rho) + (1.0 - rho) * math.log(1.0 - rho))
    var = nn.add(
        nn.scale(nn.tsum(nn.log(clamped)), -rho),
        nn.scale(nn.tsum(nn.log(nn.sub(nn.const(np.ones(clamped.value.shape)), clamped))),
                 -(1.0 - rho)),
    )
    return nn.add(var, nn.const(np.float64(constant)))


def kl_sparsity(hidden: nn.Tensor, rho: float) -> nn.Tensor:
    """Sparsity penalty over a (N, d_h) matrix of hidden activations:
    column means against the target rate, summed across units."""
    if hidden.value.ndim != 2 or hidden.value.shape[0] == 0:
        raise InvalidArgument("hidden activations must be a non-empty (N, d_h) matrix")
    n = hidden.value.shape[0]
    rho_hat = nn.matmul(nn.const(np.full((1, n), 1.0 / n)), hidden)
    return kl_from_mean_activation(rho_hat, rho)


def reconstruction_loss(recon: nn.Tensor, target: nn.Tensor, hidden: nn.Tensor,
                        rho: float, lambda_rho: float) -> nn.Tensor:
    """Mean squared reconstruction error over rows plus the KL penalty."""
    if recon.value.shape != target.value.shape:
        raise InvalidArgument("reconstruction and target shapes differ")
    rows = recon.value.shape[0] if recon.value.ndim == 2 else 1
    mse = nn.scale(nn.tsum(nn.square(nn.sub(recon, target))), 1.0 / rows)
    if lambda_rho == 0.0:
        return mse
    return nn.add(mse, nn.scale(kl_sparsity(hidden, rho), lambda_rho))


def objective_weights(store: nn.ParameterStore):
    """Positive (alpha, beta) via softplus of their unconstrained raws."""
    alpha = nn.softplus(store.tensor("fusion.alpha_raw"))
    beta = nn.softplus(store.tensor("fusion.beta_raw"))
    return alpha, beta


def total_loss(l_reg: nn.Tensor, l_recon: dict[str, nn.Tensor],
               store: nn.ParameterStore):
    """alpha * regression + beta * sum of per-modality reconstruction terms.

    Modalities absent from l_recon (no data in the batch) contribute zero.
    Returns (total, alpha, beta).
    """
    alpha, beta = objective_weights(store)
    total = nn.mul(alpha, l_reg)
    recon_sum = None
    for g in MODALITIES:
        term = l_recon.get(g)
        if term is None:
            continue
        recon_sum = term if recon_sum is None else nn.add(recon_sum, term)
    if recon_sum is not None:
        total = nn.add(total, nn.mul(beta, recon_sum))
    return total, alpha, beta
