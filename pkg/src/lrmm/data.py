"""Corpus loading, tokenization, document building, splits and feature files.

Documents for a (user, item) pair are built from TRAIN-split reviews only,
and the pair's own review is excluded from both its user and item documents
so the target never leaks into its inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidArgument, MissingEntity

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[^\W_]+")

MODALITIES = ("u", "o", "m", "v")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation and underscores split words."""
    return _WORD_RE.findall(text.lower())


# ------------------------------------------------------------------- loading


@dataclass
class ReviewRecord:
    user_id: str
    item_id: str
    rating: float
    text: str


def _parse_review(line: str):
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("not an object")
    user = obj["reviewerID"]
    item = obj["asin"]
    rating = float(obj["overall"])
    text = obj.get("reviewText")
    if not isinstance(user, str) or not user or not isinstance(item, str) or not item:
        raise ValueError("bad ids")
    if not isinstance(text, str):
        raise ValueError("bad reviewText")
    if not (1.0 <= rating <= 5.0):
        raise ValueError("rating out of range")
    return ReviewRecord(user_id=user, item_id=item, rating=rating, text=text)


def load_reviews(path) -> tuple[list[ReviewRecord], int]:
    """Parse a reviews JSONL file; returns (records, malformed line count).

    More than half the non-blank lines malformed means the file itself is
    suspect and a format error is raised instead of a quiet trickle of skips.
    """
    records: list[ReviewRecord] = []
    skipped = 0
    total = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            total += 1
            try:
                records.append(_parse_review(line))
            except (ValueError, KeyError, TypeError):
                skipped += 1
    if total == 0:
        log.warning("review file %s is empty", path)
    elif skipped * 2 > total:
        raise FormatError(
            f"{path}: {skipped} of {total} lines malformed; refusing to continue"
        )
    elif skipped:
        log.warning("skipped %d malformed review lines in %s", skipped, path)
    return records, skipped


def load_metadata(path) -> tuple[dict[str, tuple[str, str]], int]:
    """Parse an item metadata JSONL file into {item_id: (title, description)}."""

    def as_text(v):
        if v is None:
            return ""
        if isinstance(v, str):
            return v
        if isinstance(v, list):
            return " ".join(x for x in v if isinstance(x, str))
        raise ValueError("bad text field")

    meta: dict[str, tuple[str, str]] = {}
    skipped = 0
    total = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            total += 1
            try:
                obj = json.loads(line)
                item = obj["asin"]
                if not isinstance(item, str) or not item:
                    raise ValueError("bad asin")
                meta[item] = (as_text(obj.get("title")), as_text(obj.get("description")))
            except (ValueError, KeyError, TypeError):
                skipped += 1
    if total == 0:
        log.warning("metadata file %s is empty", path)
    elif skipped * 2 > total:
        raise FormatError(f"{path}: {skipped} of {total} lines malformed")
    elif skipped:
        log.warning("skipped %d malformed metadata lines in %s", skipped, path)
    return meta, skipped


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Token ids with <pad>=0 and <unk>=1; built from training text only."""

    def __init__(self, tokens: list[str], min_freq: int = 1):
        self.min_freq = int(min_freq)
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InvalidArgument("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts, min_freq: int) -> "Vocabulary":
        if min_freq < 1:
            raise InvalidArgument("min_freq must be at least 1")
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(tokenize(text))
        kept = [t for t, c in counts.items() if c >= min_freq]
        # frequency desc, then lexicographic: stable across runs and platforms
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept, min_freq=min_freq)

    def encode(self, tokens: list[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"#min_freq={self.min_freq}\n")
            for t in self.id_to_token[2:]:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            if not header.startswith("#min_freq="):
                raise FormatError(f"{path}: missing vocabulary header")
            min_freq = int(header.split("=", 1)[1])
            tokens = [line.rstrip("\n") for line in f]
        return cls([t for t in tokens if t], min_freq=min_freq)


# ----------------------------------------------------------------- documents


@dataclass
class Document:
    """Token ids already truncated to the length cap."""

    token_ids: list[int]
    original_length: int

    def __len__(self) -> int:
        return len(self.token_ids)


def _empty_doc() -> Document:
    return Document(token_ids=[], original_length=0)


class DocumentIndex:
    """Review text grouped by user and by item, with leave-one-out lookups.

    Built from training records only. Lookup of an unknown entity raises;
    sample construction passes missing_ok=True so cold users/items fall
    back to an empty document (their modality flag goes false).
    """

    def __init__(self, records: list[ReviewRecord], record_ids: list[int],
                 vocabulary: Vocabulary, metadata: dict, l_max: int):
        if l_max < 1:
            raise InvalidArgument("l_max must be positive")
        self.l_max = l_max
        self.by_user: dict[str, list[tuple[int, list[int]]]] = {}
        self.by_item: dict[str, list[tuple[int, list[int]]]] = {}
        for rid in record_ids:
            r = records[rid]
            ids = vocabulary.encode(tokenize(r.text))
            self.by_user.setdefault(r.user_id, []).append((rid, ids))
            self.by_item.setdefault(r.item_id, []).append((rid, ids))
        self.meta: dict[str, Document] = {}
        for item, (title, desc) in metadata.items():
            ids = vocabulary.encode(tokenize(title) + tokenize(desc))
            self.meta[item] = Document(ids[: l_max], len(ids))

    def _concat(self, parts: list[tuple[int, list[int]]], exclude: int | None) -> Document:
        out: list[int] = []
        total = 0
        for rid, ids in parts:
            if rid == exclude:
                continue
            total += len(ids)
            if len(out) < self.l_max:
                out.extend(ids[: self.l_max - len(out)])
        return Document(out, total)

    def user_document(self, user_id: str, exclude: int | None = None,
                      missing_ok: bool = False) -> Document:
        parts = self.by_user.get(user_id)
        if parts is None:
            if missing_ok:
                return _empty_doc()
            raise MissingEntity(f"unknown user {user_id!r}")
        return self._concat(parts, exclude)

    def item_document(self, item_id: str, exclude: int | None = None,
                      missing_ok: bool = False) -> Document:
        parts = self.by_item.get(item_id)
        if parts is None:
            if missing_ok:
                return _empty_doc()
            raise MissingEntity(f"unknown item {item_id!r}")
        return self._concat(parts, exclude)

    def meta_document(self, item_id: str) -> Document:
        return self.meta.get(item_id, _empty_doc())


# ------------------------------------------------------------------- samples


@dataclass
class ModalityMask:
    """Which of the four inputs a sample actually carries (or keeps)."""

    u: bool
    o: bool
    m: bool
    v: bool

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.o, self.m, self.v], dtype=bool)

    @classmethod
    def from_array(cls, flags) -> "ModalityMask":
        f = [bool(x) for x in flags]
        if len(f) != 4:
            raise InvalidArgument("modality mask needs exactly 4 flags")
        return cls(*f)

    def any(self) -> bool:
        return self.u or self.o or self.m or self.v

    def count(self) -> int:
        return int(self.u) + int(self.o) + int(self.m) + int(self.v)


@dataclass
class Sample:
    key: str
    user_id: str
    item_id: str
    user_doc: Document
    item_doc: Document
    meta_doc: Document
    image_feat: np.ndarray | None
    rating: float
    mask: ModalityMask = field(init=False)

    def __post_init__(self):
        self.mask = ModalityMask(
            u=len(self.user_doc) > 0,
            o=len(self.item_doc) > 0,
            m=len(self.meta_doc) > 0,
            v=self.image_feat is not None,
        )


# --------------------------------------------------------------------- split


def split_indices(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Random permutation, contiguous cut. Valid and test take floor(ratio*n),
    train gets the remainder. Returns (train, valid, test) index lists.
    """
    if n < 3:
        raise InvalidArgument(f"need at least 3 records to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgument(f"split ratios must be 3 non-negatives summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_valid = int(np.floor(ratios[1] * n))
    n_test = int(np.floor(ratios[2] * n))
    n_train = n - n_valid - n_test
    train = perm[:n_train]
    valid = perm[n_train : n_train + n_valid]
    test = perm[n_train + n_valid :]
    return train.tolist(), valid.tolist(), test.tolist()


# -------------------------------------------------------------- feature file

FEAT_MAGIC = b"LRMMFEAT"
FEAT_VERSION = 1


def write_image_features(path, features: dict[str, np.ndarray], dim: int | None = None):
    """Write id -> vector pairs in insertion order as little-endian f32."""
    items = list(features.items())
    if dim is None:
        if not items:
            raise InvalidArgument("cannot infer dim from an empty feature map")
        dim = int(np.asarray(items[0][1]).shape[0])
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<II", FEAT_VERSION, len(items)))
        f.write(struct.pack("<I", dim))
        for item_id, vec in items:
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (dim,):
                raise FormatError(
                    f"feature vector for {item_id!r} has shape {v.shape}, expected ({dim},)"
                )
            raw = item_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(v.astype("<f4").tobytes())


def _feat_read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"feature file truncated reading {what} at byte offset {f.tell() - len(buf)}"
        )
    return buf


def load_image_features(path) -> tuple[dict[str, np.ndarray], int]:
    """Read a feature file back into {id: float64 vector}; returns (map, dim)."""
    with open(path, "rb") as f:
        magic = _feat_read(f, 8, "magic")
        if magic != FEAT_MAGIC:
            raise FormatError(f"bad feature file magic {magic!r}")
        version, count = struct.unpack("<II", _feat_read(f, 8, "header"))
        if version != FEAT_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        (dim,) = struct.unpack("<I", _feat_read(f, 4, "dim"))
        out: dict[str, np.ndarray] = {}
        for i in range(count):
            (id_len,) = struct.unpack("<I", _feat_read(f, 4, f"id length of record {i}"))
            item_id = _feat_read(f, id_len, f"id of record {i}").decode("utf-8")
            raw = _feat_read(f, 4 * dim, f"vector of record {i}")
            out[item_id] = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"feature file has trailing bytes at offset {f.tell() - 1}")
    return out, dim


# ------------------------------------------------------------------- dataset


def _stable_item_key(seed: int, item_id: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(item_id.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence([seed & 0xFFFFFFFF, *words])


class Dataset:
    """Records, split, vocabulary and realized samples for one corpus."""

    def __init__(self, records, metadata, features, feature_dim, *, seed, l_max,
                 min_freq, ratios=(0.8, 0.1, 0.1), vocabulary=None, retained=None):
        self.records = records
        self.metadata = metadata
        self.features = features or {}
        self.feature_dim = feature_dim
        self.seed = seed
        self.l_max = l_max
        self.min_freq = min_freq
        self.ratios = tuple(ratios)
        self.retained = retained

        self.train_idx, self.valid_idx, self.test_idx = split_indices(
            len(records), ratios, seed
        )
        doc_record_ids = list(self.train_idx)
        if retained is not None:
            allowed = set()
            for ids in retained.values():
                allowed.update(ids)
            doc_record_ids = [i for i in doc_record_ids if i in allowed]

        if vocabulary is None:
            train_items = {records[i].item_id for i in self.train_idx}
            texts = [records[i].text for i in self.train_idx]
            for item in sorted(train_items):
                if item in metadata:
                    title, desc = metadata[item]
                    texts.append(title)
                    texts.append(desc)
            vocabulary = Vocabulary.build(texts, min_freq)
        self.vocabulary = vocabulary

        self.index = DocumentIndex(records, doc_record_ids, vocabulary, metadata, l_max)
        self.samples = [self._make_sample(i) for i in range(len(records))]

    def _make_sample(self, rid: int) -> Sample:
        r = self.records[rid]
        return Sample(
            key=f"{r.user_id}:{r.item_id}:{rid}",
            user_id=r.user_id,
            item_id=r.item_id,
            user_doc=self.index.user_document(r.user_id, exclude=rid, missing_ok=True),
            item_doc=self.index.item_document(r.item_id, exclude=rid, missing_ok=True),
            meta_doc=self.index.meta_document(r.item_id),
            image_feat=self.features.get(r.item_id),
            rating=r.rating,
        )

    def train_samples(self) -> list[Sample]:
        return [self.samples[i] for i in self.train_idx]

    def valid_samples(self) -> list[Sample]:
        return [self.samples[i] for i in self.valid_idx]

    def test_samples(self) -> list[Sample]:
        return [self.samples[i] for i in self.test_idx]

    def split_of(self) -> dict[str, str]:
        out = {}
        for name, idx in (("train", self.train_idx), ("valid", self.valid_idx),
                          ("test", self.test_idx)):
            for i in idx:
                out[self.samples[i].key] = name
        return out

    def write_split_manifest(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("sample_key,split\n")
            for i, s in enumerate(self.samples):
                name = ("train" if i in self._train_set() else
                        "valid" if i in self._valid_set() else "test")
                f.write(f"{s.key},{name}\n")

    def _train_set(self):
        if not hasattr(self, "_ts"):
            self._ts = set(self.train_idx)
            self._vs = set(self.valid_idx)
        return self._ts

    def _valid_set(self):
        self._train_set()
        return self._vs

    def sparsify_items(self, k) -> "Dataset":
        """Keep at most k train reviews per item for document building.

        Retained sets are nested as k grows (one permutation per item,
        take the first k), so coverage is monotone. The vocabulary and
        split stay fixed; k=None (or inf) returns an equivalent dataset.
        """
        if k is not None and k != float("inf") and k < 0:
            raise InvalidArgument("k must be non-negative")
        per_item: dict[str, list[int]] = {}
        for i in self.train_idx:
            per_item.setdefault(self.records[i].item_id, []).append(i)
        retained: dict[str, list[int]] = {}
        for item, ids in per_item.items():
            ids = sorted(ids)
            rng = np.random.default_rng(_stable_item_key(self.seed, item))
            perm = rng.permutation(len(ids))
            if k is None or k == float("inf"):
                take = len(ids)
            else:
                take = min(int(k), len(ids))
            retained[item] = [ids[j] for j in perm[:take]]
        return Dataset(
            self.records, self.metadata, self.features, self.feature_dim,
            seed=self.seed, l_max=self.l_max, min_freq=self.min_freq,
            ratios=self.ratios, vocabulary=self.vocabulary, retained=retained,
        )

    def retained_item_ratings(self) -> dict[str, list[float]]:
        """Train ratings per item, honoring any sparsification."""
        out: dict[str, list[float]] = {}
        if self.retained is None:
            for i in self.train_idx:
                r = self.records[i]
                out.setdefault(r.item_id, []).append(r.rating)
        else:
            for item, ids in self.retained.items():
                out[item] = [self.records[i].rating for i in sorted(ids)]
        return out

    def with_l_max(self, l_max: int) -> "Dataset":
        return Dataset(
            self.records, self.metadata, self.features, self.feature_dim,
            seed=self.seed, l_max=l_max, min_freq=self.min_freq,
            ratios=self.ratios, vocabulary=self.vocabulary, retained=self.retained,
        )


def build_dataset(records, metadata, features=None, feature_dim=None, *, seed=0,
                  l_max=100, min_freq=20, ratios=(0.8, 0.1, 0.1), vocabulary=None) -> Dataset:
    if feature_dim is None and features:
        feature_dim = int(next(iter(features.values())).shape[0])
    return Dataset(records, metadata, features, feature_dim, seed=seed, l_max=l_max,
                   min_freq=min_freq, ratios=ratios, vocabulary=vocabulary)


def load_dataset(reviews_path, meta_path, features_path=None, *, seed=0, l_max=100,
                 min_freq=20, ratios=(0.8, 0.1, 0.1), vocabulary=None) -> Dataset:
    records, _ = load_reviews(reviews_path)
    metadata, _ = load_metadata(meta_path)
    features, dim = (None, None)
    if features_path is not None:
        features, dim = load_image_features(features_path)
    return build_dataset(records, metadata, features, dim, seed=seed, l_max=l_max,
                         min_freq=min_freq, ratios=ratios, vocabulary=vocabulary)
