"""Synthetic review corpora with planted rating structure.

Each user carries a tone level and each item a grade level; the rating is
a linear function of the two plus noise. Review text, item metadata, and
image features all encode the underlying levels through marker tokens (or
basis directions), so a working model can recover ratings from any subset
of modalities that covers both factors. Marker tokens come first in every
text so short truncation lengths keep the signal.
"""

from __future__ import annotations

import json

import numpy as np

from .data import ReviewRecord

_FILLER = ["the", "a", "it", "this", "that", "with", "for", "was", "and", "of",
           "really", "quite", "just", "so", "very", "too"]

_TONE = ["dourvoice", "evenvoice", "warmvoice"]
_GRADE = ["roughgrade", "plaingrade", "primegrade"]


def synthetic_corpus(n_reviews=2000, n_users=150, n_items=60, seed=0, *,
                     user_weight=0.8, item_weight=0.9, noise=0.05,
                     assortativity=0.0, marker_repeats=3, filler_count=4,
                     feature_dim=12, feature_noise=0.05, with_meta=True,
                     with_features=True):
    """Returns (records, metadata, features) with planted structure.

    rating = 3 + user_weight*tone + item_weight*grade + noise, with tone
    and grade in {-1, 0, +1}. Weights must keep ratings inside [1, 5].

    assortativity is the probability that a user reviews an item whose
    grade equals their tone; it correlates the user-side and item-side
    signals so every modality carries overlapping rating information.
    """
    span = abs(user_weight) + abs(item_weight) + 4 * noise
    if span > 2.0:
        raise ValueError(f"planted weights {user_weight}/{item_weight} can leave [1,5]")
    if not (0.0 <= assortativity <= 1.0):
        raise ValueError("assortativity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    tone = rng.integers(-1, 2, size=n_users)
    grade = rng.integers(-1, 2, size=n_items)
    by_grade = {level: np.flatnonzero(grade == level) for level in (-1, 0, 1)}

    records = []
    for _ in range(n_reviews):
        u = int(rng.integers(n_users))
        pool = by_grade[int(tone[u])]
        if pool.size and rng.random() < assortativity:
            o = int(pool[rng.integers(pool.size)])
        else:
            o = int(rng.integers(n_items))
        rating = (3.0 + user_weight * tone[u] + item_weight * grade[o]
                  + noise * float(rng.standard_normal()))
        rating = float(np.clip(rating, 1.0, 5.0))
        tokens = [_TONE[tone[u] + 1]] * marker_repeats
        tokens += [_GRADE[grade[o] + 1]] * marker_repeats
        tokens += list(rng.choice(_FILLER, size=filler_count))
        records.append(ReviewRecord(user_id=f"u{u}", item_id=f"i{o}",
                                    rating=rating, text=" ".join(tokens)))

    metadata = {}
    if with_meta:
        for o in range(n_items):
            g = _GRADE[grade[o] + 1]
            metadata[f"i{o}"] = (f"{g} gadget", f"{g} build quality overall")

    features = {}
    if with_features:
        for o in range(n_items):
            vec = feature_noise * rng.standard_normal(feature_dim)
            vec[grade[o] + 1] += 1.0  # grade level as a basis direction
            # keep f32 round-trip exact so file I/O does not perturb tests
            features[f"i{o}"] = vec.astype(np.float32).astype(np.float64)
    return records, metadata, features


def write_reviews_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({"reviewerID": r.user_id, "asin": r.item_id,
                                "overall": r.rating, "reviewText": r.text}) + "\n")


def write_metadata_jsonl(path, metadata):
    with open(path, "w", encoding="utf-8") as f:
        for item_id, (title, desc) in metadata.items():
            f.write(json.dumps({"asin": item_id, "title": title,
                                "description": desc}) + "\n")
