"""Attribute vocabulary curation: canonical forms, visualness, sharedness, ranking.

An attribute is worth keeping when it is both visual (a linear probe on image
features finds it) and shared (it co-occurs with many objects). The two scores
are multiplied and the vocabulary is ranked by the product.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np


class CurationError(ValueError):
    pass


# --- canonical forms ---------------------------------------------------------

class SynonymMap:
    """Raw label -> canonical label. Canonical labels must map to themselves."""

    def __init__(self, mapping: Mapping[str, str]):
        mapping = dict(mapping)
        for raw, canon in mapping.items():
            target = mapping.get(canon, canon)
            if target != canon:
                raise CurationError(
                    f"{raw!r} maps to {canon!r}, which is not canonical (maps to {target!r})")
        self.mapping = mapping

    def __call__(self, label: str) -> str:
        return self.mapping.get(label, label)

    def __len__(self):
        return len(self.mapping)

    @classmethod
    def from_tsv(cls, path) -> "SynonymMap":
        mapping = {}
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 2 or not row[0].strip() or not row[1].strip():
                    raise CurationError(f"{path}:{lineno}: expected 'raw<TAB>canonical'")
                mapping[row[0].strip()] = row[1].strip()
        return cls(mapping)


def canonicalize(labels: Iterable[str], synonyms: SynonymMap) -> List[str]:
    return [synonyms(l) for l in labels]


# --- co-occurrence -----------------------------------------------------------

@dataclass
class CooccurrenceTable:
    attributes: List[str]
    objects: List[str]
    counts: np.ndarray  # (A, O) nonnegative integers

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.shape != (len(self.attributes), len(self.objects)):
            raise CurationError(f"counts shape {self.counts.shape} does not match the vocabularies")
        if self.counts.dtype.kind not in "iu":
            if not np.all(self.counts == np.round(self.counts)):
                raise CurationError("counts must be integers")
            self.counts = self.counts.astype(np.int64)
        if np.any(self.counts < 0):
            raise CurationError("counts must be nonnegative")

    @property
    def attribute_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def object_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_records(cls, records: Iterable[Sequence]) -> "CooccurrenceTable":
        """Build from (attribute, object, count) rows; repeated pairs are summed."""
        acc: Dict[tuple, int] = {}
        for a, o, n in records:
            acc[(a, o)] = acc.get((a, o), 0) + int(n)
        attributes = sorted({a for a, _ in acc})
        objects = sorted({o for _, o in acc})
        ai = {a: i for i, a in enumerate(attributes)}
        oi = {o: i for i, o in enumerate(objects)}
        counts = np.zeros((len(attributes), len(objects)), dtype=np.int64)
        for (a, o), n in acc.items():
            counts[ai[a], oi[o]] += n
        return cls(attributes, objects, counts)

    @classmethod
    def from_csv(cls, path, synonyms: Optional[SynonymMap] = None) -> "CooccurrenceTable":
        """CSV with ``attribute,object,count`` rows; an optional header row is skipped."""
        rows = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or not "".join(row).strip():
                    continue
                if len(row) != 3:
                    raise CurationError(f"{path}:{lineno}: expected 'attribute,object,count'")
                try:
                    n = int(row[2])
                except ValueError:
                    if lineno == 1:
                        continue
                    raise CurationError(f"{path}:{lineno}: count {row[2]!r} is not an integer") from None
                if n < 0:
                    raise CurationError(f"{path}:{lineno}: negative count")
                a = row[0].strip()
                rows.append((synonyms(a) if synonyms else a, row[1].strip(), n))
        if not rows:
            raise CurationError(f"{path}: no co-occurrence rows")
        return cls.from_records(rows)


# --- scores ------------------------------------------------------------------

def sharedness_raw(table: CooccurrenceTable, threshold: int = 5) -> np.ndarray:
    """|{o : n(a,o) > T}| * log(N / n(a)); 0 where n(a) = 0."""
    n_a = table.attribute_totals.astype(np.float64)
    partners = (table.counts > threshold).sum(axis=1)
    N = float(table.total)
    out = np.zeros(len(table.attributes))
    has = n_a > 0
    out[has] = partners[has] * np.log(N / n_a[has])
    return out


def min_max(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def sharedness(table: CooccurrenceTable, threshold: int = 5) -> Dict[str, float]:
    raw = sharedness_raw(table, threshold)
    return dict(zip(table.attributes, map(float, min_max(raw))))


def fit_probe(features, positive, ridge: float = 1e-2) -> np.ndarray:
    """Ridge-regressed linear probe on +-1 targets; returns weights with a trailing bias."""
    X = np.asarray(features, dtype=np.float64)
    y = np.where(np.asarray(positive, dtype=bool), 1.0, -1.0)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    reg = ridge * np.eye(Xb.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(Xb.T @ Xb + reg, Xb.T @ y)


def probe_scores(probe, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    return X @ probe[:-1] + probe[-1]


def visualness(scores, positive, k: int = 5) -> float:
    """Precision@k of a probe's held-out ranking; ties go to the lower image index."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if scores.size < k:
        raise CurationError(f"visualness needs at least {k} held-out images, got {scores.size}")
    top = np.argsort(-scores, kind="stable")[:k]
    return int(positive[top].sum()) / k


@dataclass(frozen=True)
class AttributeScore:
    attribute: str
    visualness: float
    sharedness: float

    def __post_init__(self):
        for name in ("visualness", "sharedness"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise CurationError(f"{name} of {self.attribute!r} outside [0, 1]: {v}")

    @property
    def product(self) -> float:
        return self.visualness * self.sharedness


def rank_attributes(scores: Iterable[AttributeScore]) -> List[AttributeScore]:
    return sorted(scores, key=lambda s: (-s.product, s.attribute))


def score_attributes(table: CooccurrenceTable, vis: Mapping[str, float],
                     threshold: int = 5) -> List[AttributeScore]:
    """Ranked scores for the attributes present in both the table and ``vis``."""
    shared = sharedness(table, threshold)
    missing = sorted(set(shared) - set(vis))
    if missing:
        raise CurationError(f"no visualness score for {missing}")
    return rank_attributes(AttributeScore(a, float(vis[a]), shared[a]) for a in table.attributes)


def write_ranking(path, ranked: Sequence[AttributeScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attribute", "visualness", "sharedness", "product"])
        for s in ranked:
            w.writerow([s.attribute, f"{s.visualness:.6g}", f"{s.sharedness:.6g}", f"{s.product:.6g}"])


def read_visualness(path) -> Dict[str, float]:
    """CSV of ``attribute,visualness``; a header row is skipped."""
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                out[row[0].strip()] = float(row[1])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise CurationError(f"{path}:{lineno}: expected 'attribute,visualness'") from None
    return out


# --- synthetic corpus ----------------------------------------------------------

@dataclass
class CurationCorpus:
    features: np.ndarray           # (N, d)
    attribute_labels: np.ndarray   # (N, A) bool
    objects: np.ndarray            # (N,) object index
    attributes: List[str]
    object_names: List[str]

    def table(self) -> CooccurrenceTable:
        A, O = len(self.attributes), len(self.object_names)
        counts = np.zeros((A, O), dtype=np.int64)
        for a in range(A):
            np.add.at(counts[a], self.objects[self.attribute_labels[:, a]], 1)
        return CooccurrenceTable(list(self.attributes), list(self.object_names), counts)


def synthetic_corpus(seed: int, num_images: int = 1200, num_objects: int = 12, dim: int = 16,
                     noise: float = 0.5) -> CurationCorpus:
    """Corpus with three planted attribute patterns and two fillers.

    ``glossy`` is visual and shared across objects; ``aerodynamic`` is visual
    but only ever tagged on one object; ``lucky`` is a random tag with no
    visual signal. ``round`` is visual and shared but very frequent (low
    inverse frequency); ``vintage`` is shared with a weak visual signal.
    """
    rng = np.random.default_rng(seed)
    objects = rng.integers(num_objects, size=num_images)
    P = rng.standard_normal((num_objects, dim))
    X = P[objects] + noise * rng.standard_normal((num_images, dim))
    dirs = rng.standard_normal((5, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    names = ["glossy", "aerodynamic", "lucky", "round", "vintage"]
    labels = np.zeros((num_images, 5), dtype=bool)
    labels[:, 0] = rng.random(num_images) < 0.15
    labels[:, 1] = (objects == 0) & (rng.random(num_images) < 0.6)
    labels[:, 2] = rng.random(num_images) < 0.15
    labels[:, 3] = rng.random(num_images) < 0.6
    labels[:, 4] = rng.random(num_images) < 0.15
    strength = np.array([3.0, 3.0, 0.0, 3.0, 0.4])
    X = X + (labels * strength) @ dirs
    return CurationCorpus(X, labels, objects, names, [f"object{o}" for o in range(num_objects)])


def corpus_visualness(corpus: CurationCorpus, heldout_fraction: float = 0.5, seed: int = 0,
                      k: int = 5) -> Dict[str, float]:
    """Fit one probe per attribute on a train split, score precision@k on the held-out split."""
    n = corpus.features.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * (1 - heldout_fraction)))
    tr, ho = order[:cut], order[cut:]
    out = {}
    for a, name in enumerate(corpus.attributes):
        probe = fit_probe(corpus.features[tr], corpus.attribute_labels[tr, a])
        out[name] = visualness(probe_scores(probe, corpus.features[ho]),
                               corpus.attribute_labels[ho, a], k)
    return out


def curate_corpus(corpus: CurationCorpus, threshold: int = 5, seed: int = 0) -> List[AttributeScore]:
    return score_attributes(corpus.table(), corpus_visualness(corpus, seed=seed), threshold)
