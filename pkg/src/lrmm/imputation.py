"""Modality dropout and autoencoder-based imputation.

Training randomly drops whole modalities per sample; each modality owns a
small autoencoder whose zero-input response acts as a learned prior, used
verbatim whenever that modality is dropped or missing. The scorer always
consumes reconstructions, never raw encoder outputs, so the representation
seen downstream is the same whether the modality was observed or imputed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import MODALITIES, ModalityMask
from .encoders import ModalityEmbedding
from .errors import DegenerateSample, InvalidArgument


@dataclass
class MDropConfig:
    p_m: float = 0.0
    n_m: int = 4
    min_kept: int = 1

    def __post_init__(self):
        if not (0.0 <= self.p_m <= 1.0):
            raise InvalidArgument("p_m must lie in [0, 1]")
        if self.n_m < 2:
            raise InvalidArgument("modality dropout needs at least 2 modalities")
        if not (1 <= self.min_kept < self.n_m):
            raise InvalidArgument("min_kept must lie in [1, n_m)")


def sample_mask(cfg: MDropConfig, rng: np.random.Generator) -> ModalityMask:
    """Draw one keep mask. With probability 1-p_m nothing is dropped;
    otherwise each modality survives with probability 1-1/n_m, redrawing
    until at least min_kept modalities survive.
    """
    if cfg.n_m != len(MODALITIES):
        raise InvalidArgument(f"mask sampling expects n_m={len(MODALITIES)}")
    if rng.random() >= cfg.p_m:
        return ModalityMask(True, True, True, True)
    keep_prob = 1.0 - 1.0 / cfg.n_m
    while True:
        keep = rng.random(cfg.n_m) < keep_prob
        if int(keep.sum()) >= cfg.min_kept:
            return ModalityMask.from_array(keep)


@dataclass
class AutoencoderConfig:
    hidden: int = 1024

    def __post_init__(self):
        if self.hidden < 1:
            raise InvalidArgument("autoencoder hidden size must be positive")


def init_autoencoder_params(store: nn.ParameterStore, modality_dim: int,
                            cfg: AutoencoderConfig, rng: np.random.Generator):
    """One encoder/decoder pair per modality, biases zero."""
    for g in MODALITIES:
        store.add(f"ae_{g}.w_vh", nn.init_uniform_fan(modality_dim, cfg.hidden, rng))
        store.add(f"ae_{g}.b_vh", np.zeros(cfg.hidden))
        store.add(f"ae_{g}.w_hv", nn.init_uniform_fan(cfg.hidden, modality_dim, rng))
        store.add(f"ae_{g}.b_hv", np.zeros(modality_dim))


def ae_encode_rows(x: nn.Tensor, store: nn.ParameterStore, modality: str) -> nn.Tensor:
    return nn.sigmoid(nn.affine(x, store.tensor(f"ae_{modality}.w_vh"),
                                store.tensor(f"ae_{modality}.b_vh")))


def ae_decode_rows(h: nn.Tensor, store: nn.ParameterStore, modality: str) -> nn.Tensor:
    return nn.sigmoid(nn.affine(h, store.tensor(f"ae_{modality}.w_hv"),
                                store.tensor(f"ae_{modality}.b_hv")))


def zero_input_prior(store: nn.ParameterStore, modality: str, modality_dim: int):
    """(hidden, reconstruction) the autoencoder emits for an all-zero input.

    This is what stands in for a dropped or missing modality; it is a
    function of the biases and decoder weights only, so it is learned.
    """
    zero = nn.const(np.zeros((1, modality_dim)))
    hid = ae_encode_rows(zero, store, modality)
    return hid, ae_decode_rows(hid, store, modality)


def reconstruct(embedding_in, modality: str, store: nn.ParameterStore,
                modality_dim: int):
    """Run one modality's autoencoder.

    embedding_in is a ModalityEmbedding (text inputs run the AE per word
    state and average the decodings; visual runs it once on the vector) or
    None for the zero-input prior. Returns (e_recon (d,), hidden rows list).
    """
    g = modality
    if embedding_in is None:
        hid, rec = zero_input_prior(store, g, modality_dim)
        return nn.reshape(rec, (modality_dim,)), [nn.reshape(hid, (hid.value.shape[1],))]
    if embedding_in.word_level:
        hids = []
        decs = []
        for wv in embedding_in.word_level:
            h = ae_encode_rows(wv, store, g)
            hids.append(h)
            decs.append(ae_decode_rows(h, store, g))
        acc = decs[0]
        for d in decs[1:]:
            acc = nn.add(acc, d)
        return nn.scale(acc, 1.0 / len(decs)), hids
    h = ae_encode_rows(embedding_in.vector, store, g)
    return ae_decode_rows(h, store, g), [h]


def apply_mask(embeddings: dict[str, ModalityEmbedding | None],
               mask: ModalityMask):
    """Combine data availability with a keep mask.

    Returns (inputs, effective) where inputs maps each modality to its
    ModalityEmbedding or None (dropped/missing) and effective records
    which survived. A sample with nothing left is degenerate.
    """
    flags = mask.as_array()
    inputs: dict[str, ModalityEmbedding | None] = {}
    eff = []
    for g, keep in zip(MODALITIES, flags):
        emb = embeddings.get(g)
        alive = bool(keep) and emb is not None
        inputs[g] = emb if alive else None
        eff.append(alive)
    effective = ModalityMask.from_array(eff)
    if not effective.any():
        raise DegenerateSample("sample has no usable modality after masking")
    return inputs, effective


def impute(embeddings: dict[str, ModalityEmbedding | None], mask: ModalityMask,
           store: nn.ParameterStore, modality_dim: int):
    """Reconstruct all four modality slots for one sample.

    Kept modalities are reconstructed from their encoder output; dropped
    or missing ones fall back to the zero-input prior. Returns
    ({modality: e_recon vector}, effective mask).
    """
    inputs, effective = apply_mask(embeddings, mask)
    recon: dict[str, nn.Tensor] = {}
    for g in MODALITIES:
        vec, _ = reconstruct(inputs[g], g, store, modality_dim)
        recon[g] = vec
    return recon, effective
