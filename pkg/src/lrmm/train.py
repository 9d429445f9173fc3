"""Training loop, evaluation, baselines and the experiment protocols.

Training shuffles seeded mini-batches, draws modality-dropout masks and
unit-dropout masks outside the computation graph, takes one ADADELTA step
per batch, and early-stops on validation RMSE with patience. The returned
model always carries the best-validation parameters seen.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, MODALITIES, Sample
from .encoders import EncoderConfig, TEXT_MODALITIES, make_dropout_mask
from .errors import InvalidArgument, NonFiniteValues, TrainingDiverged
from .imputation import AutoencoderConfig, MDropConfig, sample_mask
from .model import (
    Batch,
    LossBreakdown,
    LossParams,
    ModelConfig,
    RatingModel,
    REGIMES,
    make_batch,
)

log = logging.getLogger(__name__)

RATING_MIN = 1.0
RATING_MAX = 5.0


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-4
    lam: float = 1e-4
    rho: float = 0.05
    lambda_rho: float = 0.01
    p_m: float = 0.0
    min_kept: int = 1
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    l_max: int = 100
    l2_squared: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise InvalidArgument("batch_size, max_epochs and patience must be positive")
        if not (0.0 <= self.p_m <= 1.0):
            raise InvalidArgument("p_m must lie in [0, 1]")

    def loss_params(self) -> LossParams:
        return LossParams(lam=self.lam, rho=self.rho, lambda_rho=self.lambda_rho,
                          l2_squared=self.l2_squared)


# ------------------------------------------------------------------- metrics


def rmse_value(preds: np.ndarray, truths: np.ndarray) -> float:
    d = np.asarray(preds, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def mae_value(preds: np.ndarray, truths: np.ndarray) -> float:
    d = np.asarray(preds, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    return float(np.mean(np.abs(d)))


@dataclass
class ExperimentReport:
    regime: str
    rmse: float
    mae: float
    n_samples: int
    config_hash: str = ""


def _clamped_metrics(preds, truths):
    clamped = np.clip(preds, RATING_MIN, RATING_MAX)
    return rmse_value(clamped, truths), mae_value(clamped, truths)


def evaluate(model: RatingModel, samples: list[Sample], regime: str = "+F",
             config_hash: str = "", batch_size: int = 512) -> ExperimentReport:
    """Clamped RMSE/MAE of the model on a sample list under one regime."""
    if not samples:
        raise InvalidArgument("cannot evaluate an empty split")
    preds = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        preds[start : start + len(chunk)] = model.predict_batch(chunk, regime)
    truths = np.array([s.rating for s in samples])
    r, m = _clamped_metrics(preds, truths)
    return ExperimentReport(regime=regime, rmse=r, mae=m, n_samples=len(samples),
                            config_hash=config_hash)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: RatingModel
    history: list[dict]
    trainlog: list[dict]
    best_epoch: int
    best_val_rmse: float
    diverged: bool
    zero_input_slots: int


def _usable(samples: list[Sample]) -> list[Sample]:
    return [s for s in samples if s.mask.any()]


def _draw_keep(avail_row: np.ndarray, cfg: MDropConfig | None,
               rng: np.random.Generator) -> np.ndarray:
    if cfg is None:
        return np.ones(4, dtype=bool)
    while True:
        keep = sample_mask(cfg, rng).as_array()
        if (keep & avail_row).any():
            return keep


def train(dataset: Dataset, tcfg: TrainConfig, mcfg: ModelConfig) -> TrainResult:
    train_samples = _usable(dataset.train_samples())
    n_skipped = len(dataset.train_samples()) - len(train_samples)
    if n_skipped:
        log.warning("dropping %d training samples with no modality at all", n_skipped)
    valid_samples = dataset.valid_samples()
    if not train_samples or not valid_samples:
        raise InvalidArgument("training needs non-empty train and validation splits")

    model = RatingModel(mcfg, vocab_size=len(dataset.vocabulary), seed=tcfg.seed)
    shuffle_rng, mask_rng, drop_rng = (
        np.random.default_rng(c) for c in np.random.SeedSequence(tcfg.seed).spawn(3)
    )
    mdrop = MDropConfig(p_m=tcfg.p_m, min_kept=tcfg.min_kept) if tcfg.p_m > 0 else None
    loss_params = tcfg.loss_params()
    drop_rate = mcfg.encoder.post_recurrent_dropout
    hidden = mcfg.encoder.lstm_hidden

    history: list[dict] = []
    trainlog: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_snap = model.store.snapshot()
    patience_left = tcfg.patience
    diverged = False
    zero_slots = 0

    for epoch in range(tcfg.max_epochs):
        perm = shuffle_rng.permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(train_samples), tcfg.batch_size):
            rows = perm[start : start + tcfg.batch_size]
            chunk = [train_samples[i] for i in rows]
            batch = make_batch(chunk, mcfg.encoder.visual_in_dim)
            keep = np.stack([
                _draw_keep(batch.avail[i], mdrop, mask_rng) for i in range(batch.size)
            ])
            dropout_masks = {}
            if drop_rate > 0.0:
                for g in TEXT_MODALITIES:
                    dropout_masks[g] = make_dropout_mask(batch.size, hidden,
                                                         drop_rate, drop_rng)
            try:
                with nn.Tape() as tape:
                    total, breakdown = model.loss_on_batch(batch, keep,
                                                           dropout_masks, loss_params)
                    tape.backward(total)
                nn.adadelta_update(model.store, lr=tcfg.lr)
            except (NonFiniteValues, TrainingDiverged) as err:
                log.warning("training diverged at epoch %d: %s", epoch, err)
                diverged = True
                break
            model.store.zero_grad()
            zero_slots += model.last_zero_slots
            epoch_loss += breakdown.total
            n_batches += 1
            trainlog.append(_log_row(epoch, n_batches - 1, breakdown))
        if diverged:
            break
        try:
            val = evaluate(model, valid_samples, "+F")
        except NonFiniteValues as err:
            log.warning("validation pass diverged at epoch %d: %s", epoch, err)
            diverged = True
            break
        history.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_rmse": val.rmse,
            "val_mae": val.mae,
        })
        if val.rmse < best_val:
            best_val = val.rmse
            best_epoch = epoch
            best_snap = model.store.snapshot()
            patience_left = tcfg.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

    model.store.restore(best_snap)
    return TrainResult(model=model, history=history, trainlog=trainlog,
                       best_epoch=best_epoch, best_val_rmse=float(best_val),
                       diverged=diverged, zero_input_slots=zero_slots)


def _log_row(epoch: int, batch: int, b: LossBreakdown) -> dict:
    row = {"epoch": epoch, "batch": batch, "total": b.total, "l_reg": b.l_reg,
           "alpha": b.alpha, "beta": b.beta}
    for g in MODALITIES:
        row[f"recon_{g}"] = b.l_recon.get(g, 0.0)
        row[f"kl_{g}"] = b.kl.get(g, 0.0)
    return row


# ------------------------------------------------------------------ baselines


@dataclass
class ConstantPredictor:
    value: float

    def predict(self, samples: list[Sample]) -> np.ndarray:
        return np.full(len(samples), self.value)


@dataclass
class PerItemPredictor:
    item_means: dict[str, float]
    fallback: float

    def predict(self, samples: list[Sample]) -> np.ndarray:
        return np.array([self.item_means.get(s.item_id, self.fallback)
                         for s in samples])


def offset_baseline(train_samples: list[Sample]) -> ConstantPredictor:
    """Constant predictor at the mean training rating."""
    if not train_samples:
        raise InvalidArgument("offset baseline needs a non-empty train split")
    return ConstantPredictor(float(np.mean([s.rating for s in train_samples])))


def per_item_offset_baseline(item_ratings: dict[str, list[float]],
                             fallback: float) -> PerItemPredictor:
    """Per-item mean rating where any was observed, the fallback elsewhere."""
    means = {item: float(np.mean(vals)) for item, vals in item_ratings.items() if vals}
    return PerItemPredictor(item_means=means, fallback=fallback)


def evaluate_predictor(predictor, samples: list[Sample], label: str = "OFFSET",
                       config_hash: str = "") -> ExperimentReport:
    if not samples:
        raise InvalidArgument("cannot evaluate an empty split")
    preds = predictor.predict(samples)
    truths = np.array([s.rating for s in samples])
    r, m = _clamped_metrics(preds, truths)
    return ExperimentReport(regime=label, rmse=r, mae=m, n_samples=len(samples),
                            config_hash=config_hash)


# ---------------------------------------------------------------- experiments


def regime_suite(model: RatingModel, samples: list[Sample],
                 config_hash: str = "") -> list[ExperimentReport]:
    return [evaluate(model, samples, regime, config_hash) for regime in REGIMES]


def sparsify_experiment(dataset: Dataset, ks, tcfg: TrainConfig,
                        mcfg: ModelConfig) -> list[dict]:
    """Cold-start protocol: retrain at each review budget k and compare with
    the per-item offset whose means come from the same retained reviews."""
    global_mean = float(np.mean([s.rating for s in dataset.train_samples()]))
    rows = []
    for k in ks:
        k_val = None if k in (None, "all") else int(k)
        ds_k = dataset.sparsify_items(k_val)
        result = train(ds_k, tcfg, mcfg)
        rep = evaluate(result.model, ds_k.test_samples(), "+F")
        item_pred = per_item_offset_baseline(ds_k.retained_item_ratings(), global_mean)
        base = evaluate_predictor(item_pred, ds_k.test_samples())
        rows.append({
            "k": "all" if k_val is None else k_val,
            "lrmm_rmse": rep.rmse, "lrmm_mae": rep.mae,
            "item_offset_rmse": base.rmse, "item_offset_mae": base.mae,
            "n": rep.n_samples,
        })
    return rows


def length_sweep(dataset: Dataset, lengths, tcfg: TrainConfig,
                 mcfg: ModelConfig) -> list[dict]:
    if any(length < 1 for length in lengths):
        raise InvalidArgument("sweep lengths must be positive")
    rows = []
    for length in lengths:
        ds_l = dataset.with_l_max(int(length))
        result = train(ds_l, tcfg, mcfg)
        rep = evaluate(result.model, ds_l.test_samples(), "+F")
        rows.append({"length": int(length), "rmse": rep.rmse, "mae": rep.mae,
                     "n": rep.n_samples})
    return rows


def cross_domain(model: RatingModel, target: Dataset,
                 config_hash: str = "") -> list[ExperimentReport]:
    """Evaluate a source-trained model on a target corpus, no fine-tuning.

    The target dataset must have been built through the source vocabulary
    so token ids line up; unknown target tokens are already UNK."""
    return regime_suite(model, target.test_samples(), config_hash)


# -------------------------------------------------------------- configuration

CONFIG_DEFAULTS = {
    "data.l_max": "100",
    "data.min_freq": "20",
    "data.visual_dim": "4096",
    "train.embed_dim": "256",
    "train.lstm_hidden": "256",
    "train.dropout": "0.5",
    "train.batch_size": "256",
    "train.lr": "0.0001",
    "train.lambda": "0.0001",
    "train.rho": "0.05",
    "train.lambda_rho": "0.01",
    "train.max_epochs": "50",
    "train.patience": "5",
    "train.seed": "0",
    "train.l2_squared": "false",
    "mdrop.p_m": "0.0",
    "mdrop.min_kept": "1",
    "mauto.hidden": "1024",
}


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def effective_config(overrides: dict[str, str] | None = None) -> dict[str, str]:
    cfg = dict(CONFIG_DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in CONFIG_DEFAULTS:
            raise InvalidArgument(f"unknown config key {key!r}")
        cfg[key] = str(value)
    return cfg


def config_hash(cfg: dict[str, str]) -> str:
    blob = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def _as_bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise InvalidArgument(f"expected a boolean, got {text!r}")


def configs_from_flat(cfg: dict[str, str], visual_in_dim: int | None = None):
    """Materialize (TrainConfig, ModelConfig) from a flat effective config."""
    tcfg = TrainConfig(
        batch_size=int(cfg["train.batch_size"]),
        lr=float(cfg["train.lr"]),
        lam=float(cfg["train.lambda"]),
        rho=float(cfg["train.rho"]),
        lambda_rho=float(cfg["train.lambda_rho"]),
        p_m=float(cfg["mdrop.p_m"]),
        min_kept=int(cfg["mdrop.min_kept"]),
        max_epochs=int(cfg["train.max_epochs"]),
        patience=int(cfg["train.patience"]),
        seed=int(cfg["train.seed"]),
        l_max=int(cfg["data.l_max"]),
        l2_squared=_as_bool(cfg["train.l2_squared"]),
    )
    mcfg = ModelConfig(
        encoder=EncoderConfig(
            embed_dim=int(cfg["train.embed_dim"]),
            lstm_hidden=int(cfg["train.lstm_hidden"]),
            visual_in_dim=visual_in_dim or int(cfg["data.visual_dim"]),
            post_recurrent_dropout=float(cfg["train.dropout"]),
        ),
        autoencoder=AutoencoderConfig(hidden=int(cfg["mauto.hidden"])),
    )
    return tcfg, mcfg
