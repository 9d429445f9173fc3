"""End-to-end rating model: batched forward pass and joint loss.

Every sample contributes four reconstruction slots to the scorer. A slot
holds the autoencoder's reconstruction of the encoder output when the
modality survived, and the autoencoder's zero-input prior when it was
dropped (training) or absent from the data. Predictions therefore come
from the same fused representation regardless of what was observed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion, imputation, nn
from .data import MODALITIES, Sample
from .encoders import (
    EncoderConfig,
    TEXT_MODALITIES,
    encode_text_batch,
    encode_visual_batch,
    init_encoder_params,
    make_dropout_mask,
)
from .errors import InvalidArgument
from .imputation import AutoencoderConfig, init_autoencoder_params
from .fusion import init_fusion_params

REGIMES = ("+F", "-U", "-O", "-M", "-V")

_MOD_INDEX = {g: i for i, g in enumerate(MODALITIES)}


def regime_keep_flags(regime: str) -> np.ndarray:
    """Four keep flags for an evaluation regime; -X zeroes that modality."""
    if regime not in REGIMES:
        raise InvalidArgument(f"unknown regime {regime!r}, expected one of {REGIMES}")
    keep = np.ones(4, dtype=bool)
    if regime != "+F":
        keep[_MOD_INDEX[regime[1].lower()]] = False
    return keep


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)

    @property
    def modality_dim(self) -> int:
        return self.encoder.modality_dim


@dataclass
class LossParams:
    lam: float = 1e-4
    rho: float = 0.05
    lambda_rho: float = 0.01
    l2_squared: bool = False


@dataclass
class Batch:
    keys: list[str]
    ratings: np.ndarray                       # (B,)
    text_ids: dict[str, np.ndarray]           # g -> (B, T_g)
    text_lengths: dict[str, np.ndarray]       # g -> (B,)
    visual: np.ndarray                        # (B, visual_in_dim)
    avail: np.ndarray                         # (B, 4) bool, column order u,o,m,v

    @property
    def size(self) -> int:
        return len(self.keys)


def make_batch(samples: list[Sample], visual_in_dim: int) -> Batch:
    if not samples:
        raise InvalidArgument("empty batch")
    batch = len(samples)
    text_ids = {}
    text_lengths = {}
    for g, attr in (("u", "user_doc"), ("o", "item_doc"), ("m", "meta_doc")):
        docs = [getattr(s, attr) for s in samples]
        t_max = max((len(d) for d in docs), default=0)
        ids = np.zeros((batch, t_max), dtype=np.intp)
        lengths = np.zeros(batch, dtype=np.intp)
        for row, d in enumerate(docs):
            ids[row, : len(d)] = d.token_ids
            lengths[row] = len(d)
        text_ids[g] = ids
        text_lengths[g] = lengths
    visual = np.zeros((batch, visual_in_dim))
    avail = np.zeros((batch, 4), dtype=bool)
    for row, s in enumerate(samples):
        avail[row] = s.mask.as_array()
        if s.image_feat is not None:
            if s.image_feat.shape != (visual_in_dim,):
                raise InvalidArgument(
                    f"sample {s.key}: feature dim {s.image_feat.shape} != {visual_in_dim}"
                )
            visual[row] = s.image_feat
    return Batch(
        keys=[s.key for s in samples],
        ratings=np.array([s.rating for s in samples], dtype=np.float64),
        text_ids=text_ids,
        text_lengths=text_lengths,
        visual=visual,
        avail=avail,
    )


@dataclass
class LossBreakdown:
    total: float
    l_reg: float
    l_recon: dict[str, float]
    kl: dict[str, float]
    alpha: float
    beta: float


class RatingModel:
    """Parameter container plus the batched forward/loss computation."""

    def __init__(self, cfg: ModelConfig, vocab_size: int,
                 store: nn.ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.vocab_size = vocab_size
        if store is None:
            store = nn.ParameterStore(rng_seed=seed)
            rng = np.random.default_rng(seed)
            init_encoder_params(store, cfg.encoder, vocab_size, rng)
            init_autoencoder_params(store, cfg.modality_dim, cfg.autoencoder, rng)
            init_fusion_params(store, cfg.modality_dim, rng)
        self.store = store
        # diagnostic: how many slots took the zero-input path last forward
        self.last_zero_slots = 0

    # ------------------------------------------------------------- forward

    def _text_slot(self, batch: Batch, g: str, kept: np.ndarray,
                   dropout_mask: np.ndarray | None):
        """Encode one text modality and run its reconstruction path.

        kept: (B,) bool, modality survives for that row (implies avail).
        Returns (recon (B,d), target (B,d), rho_hat (1,d_h) or None,
        kl_rows count).
        """
        store = self.store
        d = self.cfg.modality_dim
        ids = batch.text_ids[g]
        lengths = batch.text_lengths[g]
        avail = batch.avail[:, _MOD_INDEX[g]]
        b = batch.size

        pooled, states = encode_text_batch(ids, lengths, store, self.cfg.encoder,
                                           g, dropout_mask=dropout_mask)
        prior_hid, prior_rec = imputation.zero_input_prior(store, g, d)

        kept = kept & avail & (lengths > 0)
        dropped = avail & (lengths > 0) & ~kept
        n_dropped = int(dropped.sum())
        inv_len = np.where(lengths > 0, 1.0 / np.maximum(lengths, 1), 0.0)

        recon_kept = None
        hid_sum = None
        for t, h in enumerate(states):
            hid = imputation.ae_encode_rows(h, store, g)
            dec = imputation.ae_decode_rows(hid, store, g)
            w_dec = kept * (t < lengths) * inv_len
            term = nn.mul(dec, nn.const(w_dec[:, None]))
            recon_kept = term if recon_kept is None else nn.add(recon_kept, term)
            w_kl = (kept * (t < lengths)).astype(np.float64)
            if w_kl.any():
                contrib = nn.matmul(nn.const(w_kl[None, :]), hid)
                hid_sum = contrib if hid_sum is None else nn.add(hid_sum, contrib)

        nonkept = (~kept).astype(np.float64)
        prior_part = nn.mul(prior_rec, nn.const(nonkept[:, None]))
        recon = prior_part if recon_kept is None else nn.add(recon_kept, prior_part)

        kl_rows = int((kept * lengths).sum()) + n_dropped
        rho_hat = None
        if kl_rows > 0:
            pieces = []
            if hid_sum is not None:
                pieces.append(hid_sum)
            if n_dropped > 0:
                pieces.append(nn.scale(prior_hid, float(n_dropped)))
            acc = pieces[0]
            for p in pieces[1:]:
                acc = nn.add(acc, p)
            rho_hat = nn.scale(acc, 1.0 / kl_rows)
        return recon, pooled, rho_hat, kl_rows

    def _visual_slot(self, batch: Batch, kept: np.ndarray):
        store = self.store
        d = self.cfg.modality_dim
        avail = batch.avail[:, _MOD_INDEX["v"]]
        kept = kept & avail

        e_v = encode_visual_batch(batch.visual, avail, store, self.cfg.encoder)
        ae_in = nn.mul(e_v, nn.const(kept.astype(np.float64)[:, None]))
        hid = imputation.ae_encode_rows(ae_in, store, "v")
        recon = imputation.ae_decode_rows(hid, store, "v")

        n_avail = int(avail.sum())
        rho_hat = None
        if n_avail > 0:
            # dropped rows fed zero input, so their hidden row is already
            # the zero-input prior; a plain availability-weighted mean works
            w = avail.astype(np.float64) / n_avail
            rho_hat = nn.matmul(nn.const(w[None, :]), hid)
        return recon, e_v, rho_hat, n_avail

    def forward_batch(self, batch: Batch, keep: np.ndarray,
                      dropout_masks: dict[str, np.ndarray] | None = None):
        """Shared forward pass.

        keep: (B,4) bool of modality survival (modality dropout at train,
        regime flags at eval); rows are further intersected with data
        availability. Returns (preds (B,) tensor, slots dict) where each
        slot is (recon, target, rho_hat, rows).
        """
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (batch.size, 4):
            raise InvalidArgument(f"keep mask must be (B,4), got {keep.shape}")
        dropout_masks = dropout_masks or {}
        slots = {}
        for g in TEXT_MODALITIES:
            slots[g] = self._text_slot(batch, g, keep[:, _MOD_INDEX[g]],
                                       dropout_masks.get(g))
        slots["v"] = self._visual_slot(batch, keep[:, _MOD_INDEX["v"]])
        eff = keep & batch.avail
        self.last_zero_slots = int(batch.size * 4 - eff.sum())
        fused = nn.concat([slots[g][0] for g in MODALITIES], axis=1)
        preds = fusion.score_batch(fused, self.store)
        return preds, slots

    # ---------------------------------------------------------------- loss

    def loss_on_batch(self, batch: Batch, keep: np.ndarray,
                      dropout_masks: dict[str, np.ndarray] | None,
                      params: LossParams):
        """Joint objective over one batch; returns (total node, breakdown)."""
        preds, slots = self.forward_batch(batch, keep, dropout_masks)
        store = self.store
        l_reg = fusion.regression_loss(
            preds, batch.ratings, params.lam,
            [store.tensor("fusion.w_s"), store.tensor("fusion.b_s")],
            l2_squared=params.l2_squared,
        )
        b = batch.size
        l_recon: dict[str, nn.Tensor] = {}
        kl_values: dict[str, float] = {}
        for gi, g in enumerate(MODALITIES):
            recon, target, rho_hat, _rows = slots[g]
            avail01 = batch.avail[:, gi].astype(np.float64)
            if not avail01.any():
                continue
            diff = nn.square(nn.sub(recon, target))
            mse = nn.scale(nn.tsum(nn.mul(diff, nn.const(avail01[:, None]))), 1.0 / b)
            if rho_hat is not None and params.lambda_rho != 0.0:
                kl = fusion.kl_from_mean_activation(rho_hat, params.rho)
                kl_values[g] = float(kl.value)
                l_recon[g] = nn.add(mse, nn.scale(kl, params.lambda_rho))
            else:
                kl_values[g] = 0.0
                l_recon[g] = mse
        total, alpha, beta = fusion.total_loss(l_reg, l_recon, store)
        breakdown = LossBreakdown(
            total=float(total.value),
            l_reg=float(l_reg.value),
            l_recon={g: float(t.value) for g, t in l_recon.items()},
            kl=kl_values,
            alpha=float(alpha.value),
            beta=float(beta.value),
        )
        return total, breakdown

    # ------------------------------------------------------------- predict

    def predict_batch(self, samples: list[Sample], regime: str = "+F") -> np.ndarray:
        """Raw predictions (no clamping) for a list of samples."""
        batch = make_batch(samples, self.cfg.encoder.visual_in_dim)
        keep = np.broadcast_to(regime_keep_flags(regime), (batch.size, 4))
        preds, _ = self.forward_batch(batch, np.array(keep))
        return preds.value.copy()
