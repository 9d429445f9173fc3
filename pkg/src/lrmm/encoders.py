"""Modality encoders: LSTM + average pooling per text channel, affine
projection with tanh for precomputed image features.

Batched entry points operate on (B, T) id matrices with per-row lengths;
padding rows get zero pooling weight, so mixed-length batches match the
one-document-at-a-time results exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Document, MODALITIES
from .errors import EmptyModalityError, InvalidArgument

TEXT_MODALITIES = ("u", "o", "m")


@dataclass
class EncoderConfig:
    embed_dim: int = 256
    lstm_hidden: int = 256
    visual_in_dim: int = 4096
    post_recurrent_dropout: float = 0.5

    def __post_init__(self):
        if self.embed_dim < 1 or self.lstm_hidden < 1 or self.visual_in_dim < 1:
            raise InvalidArgument("encoder dimensions must be positive")
        if not (0.0 <= self.post_recurrent_dropout < 1.0):
            raise InvalidArgument("dropout rate must lie in [0, 1)")

    @property
    def modality_dim(self) -> int:
        return self.lstm_hidden


@dataclass
class ModalityEmbedding:
    """Pooled document vector plus, for text, the per-timestep states
    the reconstruction path feeds on."""

    modality: str
    vector: nn.Tensor
    word_level: list[nn.Tensor] | None = None


def _lstm_weight(embed_dim: int, hidden: int, rng) -> np.ndarray:
    # input block fan-uniform, recurrent block orthogonal per gate
    w = np.zeros((embed_dim + hidden, 4 * hidden))
    for gate in range(4):
        w[:embed_dim, gate * hidden : (gate + 1) * hidden] = nn.init_uniform_fan(
            embed_dim, hidden, rng
        ).value
        w[embed_dim:, gate * hidden : (gate + 1) * hidden] = nn.init_orthogonal(
            hidden, hidden, rng
        ).value
    return w


def init_encoder_params(store: nn.ParameterStore, cfg: EncoderConfig,
                        vocab_size: int, rng: np.random.Generator):
    """One shared word embedding, one LSTM per text modality, one visual map."""
    if vocab_size < 2:
        raise InvalidArgument("vocabulary must at least hold pad and unk")
    store.add("word_emb", nn.init_uniform_fan(vocab_size, cfg.embed_dim, rng))
    for g in TEXT_MODALITIES:
        store.add(f"lstm_{g}.w", _lstm_weight(cfg.embed_dim, cfg.lstm_hidden, rng))
        store.add(f"lstm_{g}.b", np.zeros(4 * cfg.lstm_hidden))
    store.add("visual.w", nn.init_uniform_fan(cfg.visual_in_dim, cfg.lstm_hidden, rng))
    store.add("visual.b", np.zeros(cfg.lstm_hidden))


def encode_text_batch(ids: np.ndarray, lengths: np.ndarray, store: nn.ParameterStore,
                      cfg: EncoderConfig, modality: str, dropout_mask=None):
    """Run one text LSTM over a padded batch and average-pool the states.

    Returns (pooled (B,H) tensor, list of T per-step (B,H) state tensors).
    Rows with length 0 pool to zero. dropout_mask, when given, is an
    already-scaled (B,H) keep mask applied to every recurrent output state
    (training only), so the pooled vector and the word-level states feeding
    the reconstruction path stay consistent.
    """
    if modality not in TEXT_MODALITIES:
        raise InvalidArgument(f"not a text modality: {modality!r}")
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    batch, t_max = ids.shape
    hidden = cfg.lstm_hidden
    emb = store.tensor("word_emb")
    w = store.tensor(f"lstm_{modality}.w")
    b = store.tensor(f"lstm_{modality}.b")

    inv_len = np.where(lengths > 0, 1.0 / np.maximum(lengths, 1), 0.0)
    drop = nn.const(dropout_mask) if dropout_mask is not None else None
    state = nn.zero_state(batch, hidden)
    pooled = None
    word_states: list[nn.Tensor] = []
    for t in range(t_max):
        x = nn.gather_rows(emb, ids[:, t])
        state = nn.lstm_step(x, state, w, b)
        h = state.h if drop is None else nn.mul(state.h, drop)
        word_states.append(h)
        weight = (t < lengths) * inv_len
        term = nn.mul(h, nn.const(weight[:, None]))
        pooled = term if pooled is None else nn.add(pooled, term)
    if pooled is None:
        pooled = nn.const(np.zeros((batch, hidden)))
    return pooled, word_states


def encode_visual_batch(feats: np.ndarray, present: np.ndarray,
                        store: nn.ParameterStore, cfg: EncoderConfig) -> nn.Tensor:
    """tanh-squashed affine projection of image features; absent rows are zero."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != cfg.visual_in_dim:
        raise InvalidArgument(
            f"visual features must be (B,{cfg.visual_in_dim}), got {feats.shape}"
        )
    out = nn.tanh(nn.affine(nn.const(feats), store.tensor("visual.w"),
                            store.tensor("visual.b")))
    return nn.mul(out, nn.const(np.asarray(present, dtype=np.float64)[:, None]))


def make_dropout_mask(batch: int, hidden: int, rate: float,
                      rng: np.random.Generator) -> np.ndarray | None:
    """Inverted-dropout keep mask, pre-scaled by 1/keep; None when rate is 0."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random((batch, hidden)) < keep) / keep


def encode_text(doc: Document, modality: str, store: nn.ParameterStore,
                cfg: EncoderConfig, mode: str = "infer",
                rng: np.random.Generator | None = None) -> ModalityEmbedding:
    """Encode one document. Empty documents cannot be encoded; callers
    route those to the imputation path instead."""
    if mode not in ("train", "infer"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    if len(doc) == 0:
        raise EmptyModalityError(f"empty document for modality {modality!r}")
    mask = None
    if mode == "train" and cfg.post_recurrent_dropout > 0.0:
        if rng is None:
            raise InvalidArgument("training-mode dropout needs an rng")
        mask = make_dropout_mask(1, cfg.lstm_hidden, cfg.post_recurrent_dropout, rng)
    ids = np.asarray([doc.token_ids])
    pooled, states = encode_text_batch(ids, np.array([len(doc)]), store, cfg,
                                       modality, dropout_mask=mask)
    return ModalityEmbedding(
        modality=modality,
        vector=nn.reshape(pooled, (cfg.lstm_hidden,)),
        word_level=[nn.reshape(s, (cfg.lstm_hidden,)) for s in states],
    )


def encode_visual(feat: np.ndarray, store: nn.ParameterStore,
                  cfg: EncoderConfig) -> ModalityEmbedding:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape != (cfg.visual_in_dim,):
        raise InvalidArgument(
            f"visual feature must have dim {cfg.visual_in_dim}, got {feat.shape}"
        )
    out = encode_visual_batch(feat[None, :], np.ones(1), store, cfg)
    return ModalityEmbedding(modality="v", vector=nn.reshape(out, (cfg.lstm_hidden,)))


def average_pool(vectors: list[nn.Tensor]) -> nn.Tensor:
    """Arithmetic mean of equal-shape vectors."""
    if not vectors:
        raise InvalidArgument("cannot pool zero vectors")
    acc = vectors[0]
    for v in vectors[1:]:
        acc = nn.add(acc, v)
    return nn.scale(acc, 1.0 / len(vectors))
