"""Backend determinism, file format compatibility, and the end-to-end
re-extraction acceptance property."""

import struct

import numpy as np
import pytest

from lrmm_extract.backends import (
    FEATURE_DIM,
    BackendUnavailable,
    CnnFc1,
    HashProjection,
    make_backend,
)
from lrmm_extract.cli import extract_to_file, read_manifest
from lrmm_extract.featfile import write_features

from conftest import write_manifest

# the tool exists to feed this consumer, so compatibility is tested
# against the real loader
from lrmm.data import load_image_features


# ----------------------------------------------------------------- backends


def test_hash_projection_dim_and_determinism(image_dir):
    backend = make_backend("hash-proj/v1")
    a = backend.extract(image_dir / "gradient.png")
    b = backend.extract(image_dir / "gradient.png")
    assert a.shape == (FEATURE_DIM,)
    assert a.dtype == np.float32
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) < 1.0)


def test_hash_projection_stable_across_instances(image_dir):
    a = HashProjection("hash-proj/v1").extract(image_dir / "red.png")
    b = HashProjection("hash-proj/v1").extract(image_dir / "red.png")
    assert np.array_equal(a, b)


def test_different_images_differ(image_dir):
    backend = make_backend("hash-proj/v1")
    a = backend.extract(image_dir / "red.png")
    b = backend.extract(image_dir / "gradient.png")
    assert not np.array_equal(a, b)


def test_unknown_model_rejected():
    with pytest.raises(ValueError, match="unknown model"):
        make_backend("resnet-headless/v9")


def test_undecodable_image_raises(image_dir):
    backend = make_backend("hash-proj/v1")
    with pytest.raises((OSError, ValueError)):
        backend.extract(image_dir / "broken.jpg")


def test_cnn_backend_if_weights_available(image_dir):
    pytest.importorskip("torchvision")
    try:
        backend = CnnFc1("vgg16-fc1/v1")
    except BackendUnavailable as err:
        pytest.skip(str(err))
    vec = backend.extract(image_dir / "gradient.png")
    assert vec.shape == (FEATURE_DIM,)
    assert np.array_equal(vec, backend.extract(image_dir / "gradient.png"))


# ----------------------------------------------------------------- manifest


def test_manifest_roundtrip(tmp_path, image_dir):
    path = write_manifest(tmp_path / "m.csv",
                          [("i1", image_dir / "red.png"),
                           ("i2", image_dir / "noise.png")], header=True)
    assert read_manifest(path) == [("i1", str(image_dir / "red.png")),
                                   ("i2", str(image_dir / "noise.png"))]


def test_manifest_without_header(tmp_path, image_dir):
    path = write_manifest(tmp_path / "m.csv", [("i1", image_dir / "red.png")])
    assert len(read_manifest(path)) == 1


def test_manifest_duplicate_ids_rejected(tmp_path, image_dir):
    path = write_manifest(tmp_path / "m.csv",
                          [("i1", image_dir / "red.png"),
                           ("i1", image_dir / "noise.png")])
    with pytest.raises(ValueError, match="duplicate"):
        read_manifest(path)


def test_manifest_bad_row_rejected(tmp_path):
    (tmp_path / "m.csv").write_text("only_one_field\n")
    with pytest.raises(ValueError, match="expected item_id,image_path"):
        read_manifest(tmp_path / "m.csv")


def test_empty_manifest_rejected(tmp_path):
    (tmp_path / "m.csv").write_text("\n")
    with pytest.raises(ValueError, match="no rows"):
        read_manifest(tmp_path / "m.csv")


# ------------------------------------------------------------- file writing


def test_output_loadable_by_data_pipeline(tmp_path, image_dir):
    rows = [("item-a", str(image_dir / "red.png")),
            ("item-b", str(image_dir / "gradient.png"))]
    out = tmp_path / "features.lrmmfeat"
    n = extract_to_file(rows, out, "hash-proj/v1")
    assert n == 2
    loaded, dim = load_image_features(out)
    assert dim == FEATURE_DIM
    assert list(loaded) == ["item-a", "item-b"]
    for vec in loaded.values():
        assert vec.shape == (FEATURE_DIM,)
        # float32 payload: the loader's float64 view round-trips exactly
        assert np.array_equal(vec.astype(np.float32).astype(np.float64), vec)


def test_header_and_payload_agree(tmp_path, image_dir):
    out = tmp_path / "features.lrmmfeat"
    extract_to_file([("x", str(image_dir / "noise.png"))], out, "hash-proj/v1")
    blob = out.read_bytes()
    assert blob[:8] == b"LRMMFEAT"
    version, count = struct.unpack_from("<II", blob, 8)
    (dim,) = struct.unpack_from("<I", blob, 16)
    assert (version, count, dim) == (1, 1, FEATURE_DIM)
    (id_len,) = struct.unpack_from("<I", blob, 20)
    assert len(blob) == 24 + id_len + 4 * FEATURE_DIM


def test_same_image_two_ids_identical_payload(tmp_path, image_dir):
    rows = [("first", str(image_dir / "red.png")),
            ("second", str(image_dir / "red.png"))]
    out = tmp_path / "features.lrmmfeat"
    extract_to_file(rows, out, "hash-proj/v1")
    loaded, _ = load_image_features(out)
    assert np.array_equal(loaded["first"], loaded["second"])


def test_undecodable_image_skipped_and_logged(tmp_path, image_dir, caplog):
    rows = [("ok", str(image_dir / "red.png")),
            ("bad", str(image_dir / "broken.jpg")),
            ("missing", str(image_dir / "nowhere.png"))]
    out = tmp_path / "features.lrmmfeat"
    with caplog.at_level("WARNING", logger="lrmm_extract"):
        n = extract_to_file(rows, out, "hash-proj/v1")
    assert n == 1
    loaded, _ = load_image_features(out)
    assert list(loaded) == ["ok"]
    assert sum("skipping" in r.message for r in caplog.records) == 2


def test_zero_survivors_is_an_error(tmp_path, image_dir):
    rows = [("bad", str(image_dir / "broken.jpg"))]
    with pytest.raises(ValueError, match="no image"):
        extract_to_file(rows, tmp_path / "f.lrmmfeat", "hash-proj/v1")


def test_sidecar_records_model_and_version(tmp_path, image_dir):
    out = tmp_path / "features.lrmmfeat"
    extract_to_file([("a", str(image_dir / "red.png"))], out, "hash-proj/v1")
    meta = (tmp_path / "features.lrmmfeat.meta.txt").read_text()
    lines = dict(line.split("=", 1) for line in meta.strip().splitlines())
    assert lines["model"] == "hash-proj/v1"
    assert lines["dim"] == str(FEATURE_DIM)
    assert lines["records"] == "1"
    assert lines["version"]


def test_writer_rejects_wrong_dim(tmp_path):
    with pytest.raises(ValueError, match="shape"):
        write_features(tmp_path / "f.lrmmfeat",
                       [("a", np.zeros(7, dtype=np.float32))], FEATURE_DIM)


# ----------------------------------------------------------------- acceptance


def test_acceptance_reextraction_byte_identical(tmp_path, image_dir):
    rows = [("i1", str(image_dir / "red.png")),
            ("i2", str(image_dir / "gradient.png")),
            ("i3", str(image_dir / "noise.png"))]
    out_a = tmp_path / "a.lrmmfeat"
    out_b = tmp_path / "b.lrmmfeat"
    extract_to_file(rows, out_a, "hash-proj/v1")
    extract_to_file(rows, out_b, "hash-proj/v1")
    blob_a, blob_b = out_a.read_bytes(), out_b.read_bytes()
    loaded, dim = load_image_features(out_a)
    ok = (blob_a == blob_b and dim == FEATURE_DIM and len(loaded) == 3
          and all(v.shape == (FEATURE_DIM,) for v in loaded.values()))
    print(f"[ACCEPTANCE] feature-extractor: {'PASS' if ok else 'FAIL'} "
          f"(dim={dim}, records={len(loaded)}, byte-identical={blob_a == blob_b})",
          flush=True)
    assert ok
