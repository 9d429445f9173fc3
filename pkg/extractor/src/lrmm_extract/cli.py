"""Command line driver: manifest CSV in, LRMMFEAT file plus sidecar out.

The manifest holds one item per row as `item_id,image_path` (an optional
`item_id,image_path` header row is skipped). Records are written in
manifest order. An image that cannot be decoded is skipped with a log
line; if nothing survives the run fails. The sidecar `<out>.meta.txt`
records which model produced the file.

Exit codes: 0 success, 1 usage error, 2 data error (bad manifest,
unknown or unavailable model, zero successful records).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

from . import __version__
from .backends import FEATURE_DIM, BackendUnavailable, DEFAULT_MODEL, make_backend
from .featfile import write_features

log = logging.getLogger("lrmm_extract")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class ManifestError(ValueError):
    pass


def read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            for lineno, row in enumerate(csv.reader(f), 1):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != 2:
                    raise ManifestError(f"{path}:{lineno}: expected item_id,image_path")
                item_id, image_path = row[0].strip(), row[1].strip()
                if lineno == 1 and (item_id, image_path) == ("item_id", "image_path"):
                    continue
                if not item_id or not image_path:
                    raise ManifestError(f"{path}:{lineno}: empty field")
                rows.append((item_id, image_path))
    except OSError as err:
        raise ManifestError(f"cannot read manifest {path}: {err}")
    if not rows:
        raise ManifestError(f"manifest {path} holds no rows")
    seen = set()
    for item_id, _ in rows:
        if item_id in seen:
            raise ManifestError(f"duplicate item id {item_id!r} in manifest")
        seen.add(item_id)
    return rows


def extract_to_file(manifest_rows, out_path, model_id: str) -> int:
    """Run the backend over the manifest; returns the surviving record count."""
    backend = make_backend(model_id)
    records = []
    for item_id, image_path in manifest_rows:
        try:
            vec = backend.extract(image_path)
        except (OSError, ValueError) as err:
            log.warning("skipping %s (%s): %s", item_id, image_path, err)
            continue
        records.append((item_id, vec))
    if not records:
        raise ManifestError("no image in the manifest could be decoded")
    write_features(out_path, records, FEATURE_DIM)
    with open(f"{out_path}.meta.txt", "w", encoding="utf-8") as f:
        f.write(f"model={model_id}\n")
        f.write(f"version={__version__}\n")
        f.write(f"dim={FEATURE_DIM}\n")
        f.write(f"records={len(records)}\n")
    return len(records)


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        print(f"usage error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # tolerate an explicit leading subcommand token
    if argv[:1] == ["extract"]:
        argv = argv[1:]
    parser = _CliParser(prog="lrmm-extract",
                        description="extract item-image features into an LRMMFEAT file")
    parser.add_argument("--manifest", required=True, help="CSV of item_id,image_path rows")
    parser.add_argument("--out", required=True, help="output LRMMFEAT path")
    parser.add_argument("--model", default=DEFAULT_MODEL, help="backend model identifier")
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if err.code is not None else EXIT_OK
    try:
        rows = read_manifest(args.manifest)
        n = extract_to_file(rows, args.out, args.model)
    except (ManifestError, BackendUnavailable, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    print(f"records={n} dim={FEATURE_DIM} model={args.model} out={args.out}")
    return EXIT_OK


def main():
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
