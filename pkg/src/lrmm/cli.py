"""Command-line entry point tying ingestion, training and evaluation together.

Exit codes: 0 success, 1 usage or argument error, 2 data or format error,
3 training divergence. A trained checkpoint travels with two sidecar files,
<ckpt>.vocab.txt and <ckpt>.cfg, so later invocations rebuild the exact
vocabulary, split and model geometry without the original flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import nn
from .data import MODALITIES, Vocabulary, load_dataset
from .errors import (
    FormatError,
    InvalidArgument,
    MissingEntity,
    NonFiniteValues,
    TrainingDiverged,
)
from .model import RatingModel, REGIMES, make_batch, regime_keep_flags
from .train import (
    config_hash,
    configs_from_flat,
    cross_domain,
    effective_config,
    evaluate,
    evaluate_predictor,
    length_sweep,
    offset_baseline,
    parse_config_file,
    regime_suite,
    sparsify_experiment,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _CliParser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _normalize_regime_flags(argv: list[str]) -> list[str]:
    """Let `--regime -U` parse even though the value starts with a dash."""
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--regime" and i + 1 < len(argv) and argv[i + 1] in REGIMES:
            out.append(f"--regime={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


# --------------------------------------------------------------- shared bits


def _add_data_flags(p, features=True):
    p.add_argument("--reviews", required=True, help="reviews JSONL file")
    p.add_argument("--meta", required=True, help="item metadata JSONL file")
    if features:
        p.add_argument("--features", help="precomputed image feature file")


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="overrides train.seed")


def _effective(args) -> dict[str, str]:
    overrides = parse_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = effective_config(overrides)
    if getattr(args, "seed", None) is not None:
        cfg["train.seed"] = str(args.seed)
    return cfg


def _load_data(args, cfg, vocabulary=None):
    return load_dataset(
        args.reviews,
        args.meta,
        getattr(args, "features", None),
        seed=int(cfg["train.seed"]),
        l_max=int(cfg["data.l_max"]),
        min_freq=int(cfg["data.min_freq"]),
        vocabulary=vocabulary,
    )


def _fmt(x) -> str:
    return format(float(x), ".12g")


def _emit(text: str, out_path):
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as f:
            f.write(text)


def _report_csv(reports) -> str:
    lines = ["regime,rmse,mae,n,config_hash"]
    for r in reports:
        lines.append(f"{r.regime},{_fmt(r.rmse)},{_fmt(r.mae)},{r.n_samples},{r.config_hash}")
    return "\n".join(lines) + "\n"


def _write_cfg_sidecar(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        for k in sorted(cfg):
            f.write(f"{k}={cfg[k]}\n")


def _load_checkpoint_trio(ckpt_path):
    """Checkpoint plus its .vocab.txt and .cfg sidecars."""
    store = nn.load_checkpoint(ckpt_path)
    vocab = Vocabulary.load(f"{ckpt_path}.vocab.txt")
    cfg = effective_config(parse_config_file(f"{ckpt_path}.cfg"))
    return store, vocab, cfg


def _model_from_store(store, cfg, vocab) -> RatingModel:
    # the saved visual projection pins the true feature input width
    visual_in = int(store.tensor("visual.w").value.shape[0])
    _tcfg, mcfg = configs_from_flat(cfg, visual_in_dim=visual_in)
    if store.tensor("word_emb").value.shape[0] != len(vocab):
        raise FormatError(
            f"checkpoint embeds {store.tensor('word_emb').value.shape[0]} tokens "
            f"but the vocabulary sidecar holds {len(vocab)}"
        )
    return RatingModel(mcfg, vocab_size=len(vocab), store=store)


def _check_feature_dim(dataset, model):
    want = model.cfg.encoder.visual_in_dim
    if dataset.feature_dim is not None and dataset.feature_dim != want:
        raise FormatError(
            f"feature file dim {dataset.feature_dim} does not match "
            f"the checkpoint's visual input dim {want}"
        )


# --------------------------------------------------------------- subcommands


def cmd_ingest(args) -> int:
    cfg = _effective(args)
    ds = _load_data(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    ds.vocabulary.save(os.path.join(args.out, "vocab.txt"))
    ds.write_split_manifest(os.path.join(args.out, "split.csv"))
    n_feat = sum(1 for s in ds.samples if s.image_feat is not None)
    print(
        f"records={len(ds.records)} vocab={len(ds.vocabulary)} "
        f"train={len(ds.train_idx)} valid={len(ds.valid_idx)} "
        f"test={len(ds.test_idx)} with_features={n_feat}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _effective(args)
    ds = _load_data(args, cfg)
    tcfg, mcfg = configs_from_flat(cfg, visual_in_dim=ds.feature_dim)
    result = train(ds, tcfg, mcfg)
    nn.save_checkpoint(result.model.store, args.out)
    ds.vocabulary.save(f"{args.out}.vocab.txt")
    _write_cfg_sidecar(f"{args.out}.cfg", cfg)
    print(
        f"epochs={len(result.history)} best_epoch={result.best_epoch} "
        f"best_val_rmse={_fmt(result.best_val_rmse)} "
        f"config_hash={config_hash(cfg)}"
    )
    if result.diverged:
        print("training diverged; checkpoint holds the last good parameters",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_evaluate(args) -> int:
    store, vocab, cfg = _load_checkpoint_trio(args.ckpt)
    model = _model_from_store(store, cfg, vocab)
    ds = _load_data(args, cfg, vocabulary=vocab)
    _check_feature_dim(ds, model)
    tag = config_hash(cfg)
    if args.regime:
        reports = [evaluate(model, ds.test_samples(), args.regime, tag)]
    else:
        reports = regime_suite(model, ds.test_samples(), tag)
    _emit(_report_csv(reports), args.out)
    return EXIT_OK


def cmd_sparsify(args) -> int:
    cfg = _effective(args)
    ds = _load_data(args, cfg)
    tcfg, mcfg = configs_from_flat(cfg, visual_in_dim=ds.feature_dim)
    ks: list = []
    for part in args.k.split(","):
        part = part.strip()
        if part == "all":
            ks.append("all")
        else:
            try:
                k = int(part)
            except ValueError:
                raise InvalidArgument(f"--k values must be integers or 'all', got {part!r}")
            if k < 0:
                raise InvalidArgument("--k values must be non-negative")
            ks.append(k)
    if not ks:
        raise InvalidArgument("--k needs at least one value")
    rows = sparsify_experiment(ds, ks, tcfg, mcfg)
    tag = config_hash(cfg)
    lines = ["k,lrmm_rmse,lrmm_mae,item_offset_rmse,item_offset_mae,n,config_hash"]
    for r in rows:
        lines.append(
            f"{r['k']},{_fmt(r['lrmm_rmse'])},{_fmt(r['lrmm_mae'])},"
            f"{_fmt(r['item_offset_rmse'])},{_fmt(r['item_offset_mae'])},{r['n']},{tag}"
        )
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_length_sweep(args) -> int:
    cfg = _effective(args)
    ds = _load_data(args, cfg)
    tcfg, mcfg = configs_from_flat(cfg, visual_in_dim=ds.feature_dim)
    try:
        lengths = [int(part) for part in args.lengths.split(",")]
    except ValueError:
        raise InvalidArgument(f"--lengths must be a comma list of integers, got {args.lengths!r}")
    rows = length_sweep(ds, lengths, tcfg, mcfg)
    tag = config_hash(cfg)
    lines = ["length,rmse,mae,n,config_hash"]
    for r in rows:
        lines.append(f"{r['length']},{_fmt(r['rmse'])},{_fmt(r['mae'])},{r['n']},{tag}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_cross_domain(args) -> int:
    store, vocab, cfg = _load_checkpoint_trio(args.source_ckpt)
    model = _model_from_store(store, cfg, vocab)
    reviews = os.path.join(args.target_data, "reviews.jsonl")
    meta = os.path.join(args.target_data, "meta.jsonl")
    features = os.path.join(args.target_data, "features.lrmmfeat")
    target = load_dataset(
        reviews,
        meta,
        features if os.path.exists(features) else None,
        seed=int(cfg["train.seed"]),
        l_max=int(cfg["data.l_max"]),
        min_freq=int(cfg["data.min_freq"]),
        vocabulary=vocab,
    )
    _check_feature_dim(target, model)
    reports = cross_domain(model, target, config_hash(cfg))
    _emit(_report_csv(reports), args.out)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    store, vocab, cfg = _load_checkpoint_trio(args.ckpt)
    model = _model_from_store(store, cfg, vocab)
    ds = _load_data(args, cfg, vocabulary=vocab)
    _check_feature_dim(ds, model)
    regime = args.regime or "+F"
    keep_row = regime_keep_flags(regime)
    d = model.cfg.modality_dim
    lines = ["sample_key,modality,is_reconstruction," + ",".join(f"v_{i}" for i in range(d))]
    samples = ds.test_samples()
    for start in range(0, len(samples), 512):
        chunk = samples[start : start + 512]
        batch = make_batch(chunk, model.cfg.encoder.visual_in_dim)
        keep = np.broadcast_to(keep_row, (batch.size, 4)).copy()
        _preds, slots = model.forward_batch(batch, keep)
        for i, key in enumerate(batch.keys):
            for gi, g in enumerate(MODALITIES):
                recon, target = slots[g][0], slots[g][1]
                if batch.avail[i, gi] and keep_row[gi]:
                    vals = ",".join(_fmt(v) for v in target.value[i])
                    lines.append(f"{key},{g},0,{vals}")
                vals = ",".join(_fmt(v) for v in recon.value[i])
                lines.append(f"{key},{g},1,{vals}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_extract_offset(args) -> int:
    cfg = _effective(args)
    ds = _load_data(args, cfg)
    base = offset_baseline(ds.train_samples())
    rep = evaluate_predictor(base, ds.test_samples(), label="OFFSET",
                             config_hash=config_hash(cfg))
    _emit(_report_csv([rep]), args.out)
    return EXIT_OK


# -------------------------------------------------------------------- wiring


def build_parser() -> _CliParser:
    parser = _CliParser(prog="lrmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_CliParser)

    p = sub.add_parser("ingest", help="build vocabulary and split manifest")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="report metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_data_flags(p)
    p.add_argument("--regime", choices=REGIMES, help="evaluate one regime (default: all)")
    p.add_argument("--out", help="also write the report CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sparsify-experiment", help="cold-start protocol over review budgets")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--k", required=True, help="comma list of budgets, e.g. all,5,1,0")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("length-sweep", help="retrain across document length caps")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--lengths", required=True, help="comma list, e.g. 10,50,100")
    p.add_argument("--out")
    p.set_defaults(func=cmd_length_sweep)

    p = sub.add_parser("cross-domain", help="evaluate a source checkpoint on a target corpus")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target-data", required=True,
                   help="directory with reviews.jsonl, meta.jsonl and optional features.lrmmfeat")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cross_domain)

    p = sub.add_parser("dump-embeddings", help="write test-split embeddings and reconstructions")
    p.add_argument("--ckpt", required=True)
    _add_data_flags(p)
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("extract-offset", help="report the global-mean rating baseline")
    _add_data_flags(p, features=False)
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract_offset)

    return parser


def run(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    argv = _normalize_regime_flags(list(argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # raised by our error() override and by --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except InvalidArgument as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, MissingEntity, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteValues) as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


def main():
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
