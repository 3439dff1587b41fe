"""Shortlist inference over the attribute x object grid and classifier-bank export.

Only the top-k_a attributes and top-k_o objects of the individual heads are
combined; the composed logits of that k_a x k_o grid go through one softmax,
and every pair outside the grid has probability 0.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .model import CompNet, ModelError
from .numerics import as_array, softmax

Pair = Tuple[int, int]

BANK_MAGIC = b"CNBANK\x00\x00"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<8sIIIIQ")


class InferenceError(ValueError):
    pass


@dataclass
class Shortlist:
    attributes: np.ndarray
    p_attributes: np.ndarray
    objects: np.ndarray
    p_objects: np.ndarray

    @property
    def grid(self) -> List[Pair]:
        return [(int(a), int(o)) for a in self.attributes for o in self.objects]


@dataclass
class CompositionScores:
    probs: Dict[Pair, float] = field(default_factory=dict)

    def __getitem__(self, pair: Pair) -> float:
        return self.probs.get(tuple(pair), 0.0)

    def __len__(self):
        return len(self.probs)

    def items(self):
        return self.probs.items()

    def ranked(self) -> List[Tuple[Pair, float]]:
        return sorted(self.probs.items(), key=lambda kv: (-kv[1], kv[0]))


def top_k_indices(p: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k column indices by descending value, ties to the lower index."""
    if k < 1:
        raise InferenceError("shortlist sizes must be >= 1")
    return np.argsort(-p, axis=-1, kind="stable")[..., :k]


def head_probabilities(model: CompNet, features):
    s_a, s_o = model.head_scores(features)
    return softmax(s_a), softmax(s_o)


def predict_shortlist(model: CompNet, feature, k_a: int, k_o: int) -> Shortlist:
    p_a, p_o = head_probabilities(model, as_array(feature, 1))
    ia, io = top_k_indices(p_a, k_a), top_k_indices(p_o, k_o)
    return Shortlist(ia, p_a[ia], io, p_o[io])


class ClassifierSource:
    """Composed classifiers on demand, cached per (attribute, object) pair."""

    def __init__(self, model: CompNet):
        self.model = model
        self._cache: Dict[Pair, np.ndarray] = {}

    def classifiers(self, pairs: Sequence[Pair]) -> Dict[Pair, np.ndarray]:
        missing = sorted({tuple(map(int, p)) for p in pairs} - self._cache.keys())
        if missing:
            ai, oi = np.array(missing, dtype=np.intp).T
            W, _ = self.model.compose_pairs(ai, oi, train=False)
            for p, row in zip(missing, W):
                self._cache[p] = row
        return {tuple(map(int, p)): self._cache[tuple(map(int, p))] for p in pairs}


def score_compositions(source, feature, shortlist: Shortlist) -> CompositionScores:
    """Softmax over the composed logits of the shortlist grid.

    ``source`` is a :class:`CompNet`, a :class:`ClassifierSource` or a
    :class:`ClassifierBank`; grid pairs a bank does not hold are left out.
    """
    if isinstance(source, CompNet):
        source = ClassifierSource(source)
    f = as_array(feature, 1)
    grid = shortlist.grid
    if not grid:
        raise InferenceError("empty shortlist")
    found = source.classifiers(grid)
    pairs = [p for p in grid if p in found]
    if not pairs:
        return CompositionScores()
    W = np.array([found[p] for p in pairs])
    probs = softmax(W[:, :-1] @ f + W[:, -1])
    return CompositionScores(dict(zip(pairs, map(float, probs))))


def top_scores_truncate(scores: CompositionScores, m: int) -> CompositionScores:
    if m < 1:
        raise InferenceError("m must be >= 1")
    return CompositionScores(dict(scores.ranked()[:m]))


# --- batched grid scoring (used by evaluation) ---------------------------------------

class GridScorer:
    """Dense (B, A, O) shortlist probabilities for a batch of encoded features.

    ``method`` selects how grid pairs are scored: ``"compnet"`` composes
    classifiers, ``"product"`` multiplies head probabilities (the Softmax
    Product baseline), ``"fc"`` uses directly learned seen-pair classifiers.
    """

    def __init__(self, model: CompNet, method: str = "compnet", fc=None, fc_pairs=None,
                 bank: "ClassifierBank" = None):
        if method not in ("compnet", "product", "fc"):
            raise InferenceError(f"unknown scoring method {method!r}")
        self.model = model
        self.method = method
        self.bank = bank
        self.source = bank if bank is not None else ClassifierSource(model)
        A, O = model.cfg.num_attributes, model.cfg.num_objects
        if method == "fc":
            self.fc_index = -np.ones((A, O), dtype=np.intp)
            for i, (a, o) in enumerate(fc_pairs):
                self.fc_index[a, o] = i
            self.fc = fc

    def score(self, F, k_a: int, k_o: int, batch_size: int = 1024) -> np.ndarray:
        F = np.atleast_2d(F)
        A, O = self.model.cfg.num_attributes, self.model.cfg.num_objects
        out = np.zeros((F.shape[0], A, O))
        for start in range(0, F.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            out[sl] = self._score_block(F[sl], min(k_a, A), min(k_o, O))
        return out

    def _score_block(self, F, k_a, k_o):
        B = F.shape[0]
        A, O = self.model.cfg.num_attributes, self.model.cfg.num_objects
        p_a, p_o = head_probabilities(self.model, F)
        ia, io = top_k_indices(p_a, k_a), top_k_indices(p_o, k_o)
        ga = np.repeat(ia, k_o, axis=1)  # (B, k_a * k_o)
        go = np.tile(io, (1, k_a))
        rows = np.arange(B)[:, None]
        if self.method == "product":
            probs = p_a[rows, ga] * p_o[rows, go]
        else:
            if self.method == "fc":
                idx = self.fc_index[ga, go]
                valid = idx >= 0
                W = self.fc[np.where(valid, idx, 0)]
            else:
                uniq = np.unique(ga * O + go)
                pairs = [(int(u // O), int(u % O)) for u in uniq]
                found = self.source.classifiers(pairs)
                table = np.zeros((A * O, self.model.D + 1))
                valid_flat = np.zeros(A * O, dtype=bool)
                for (a, o), w in found.items():
                    table[a * O + o] = w
                    valid_flat[a * O + o] = True
                W = table[ga * O + go]
                valid = valid_flat[ga * O + go]
            logits = np.einsum("bgd,bd->bg", W[..., :-1], F) + W[..., -1]
            logits = np.where(valid, logits, -np.inf)
            m = np.max(logits, axis=1, keepdims=True)
            m = np.where(np.isfinite(m), m, 0.0)
            e = np.exp(logits - m)
            z = e.sum(axis=1, keepdims=True)
            probs = np.divide(e, z, out=np.zeros_like(e), where=z > 0)
        out = np.zeros((B, A, O))
        out[rows, ga, go] = probs
        return out


# --- classifier bank ----------------------------------------------------------------------

class ClassifierBank:
    """Composed linear classifiers for an allow-list of pairs, sorted by (a, o)."""

    def __init__(self, pairs: np.ndarray, weights: np.ndarray, num_attributes: int,
                 num_objects: int):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        self.pairs = np.ascontiguousarray(pairs[order])
        self.weights = np.ascontiguousarray(np.asarray(weights, dtype=np.float64)[order])
        self.num_attributes = num_attributes
        self.num_objects = num_objects
        self._keys = self.pairs[:, 0] * num_objects + self.pairs[:, 1]
        if np.any(np.diff(self._keys) == 0):
            raise InferenceError("duplicate pair in classifier bank")

    def __len__(self):
        return len(self.pairs)

    @property
    def D(self) -> int:
        return self.weights.shape[1] - 1

    def lookup(self, pair: Pair) -> Optional[np.ndarray]:
        a, o = pair
        key = a * self.num_objects + o
        i = int(np.searchsorted(self._keys, key))
        if i < len(self._keys) and self._keys[i] == key:
            return self.weights[i]
        return None

    def __contains__(self, pair) -> bool:
        return self.lookup(pair) is not None

    def classifiers(self, pairs: Sequence[Pair]) -> Dict[Pair, np.ndarray]:
        out = {}
        for p in pairs:
            w = self.lookup(tuple(map(int, p)))
            if w is not None:
                out[tuple(map(int, p))] = w
        return out

    def score(self, pair: Pair, feature) -> Optional[float]:
        w = self.lookup(pair)
        if w is None:
            return None
        f = as_array(feature, 1)
        return float(w[:-1] @ f + w[-1])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, self.D, self.num_attributes,
                                       self.num_objects, len(self)))
            fh.write(self.pairs.astype("<i4").tobytes())
            fh.write(self.weights.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ClassifierBank":
        data = Path(path).read_bytes()
        if len(data) < _BANK_HEADER.size:
            raise InferenceError(f"{path}: truncated classifier bank")
        magic, version, D, A, O, n = _BANK_HEADER.unpack_from(data)
        if magic != BANK_MAGIC:
            raise InferenceError(f"{path}: not a classifier bank")
        if version != BANK_VERSION:
            raise InferenceError(f"{path}: unsupported bank version {version}")
        off = _BANK_HEADER.size
        expected = off + n * 2 * 4 + n * (D + 1) * 8
        if len(data) != expected:
            raise InferenceError(f"{path}: size {len(data)} != expected {expected}")
        pairs = np.frombuffer(data, dtype="<i4", count=2 * n, offset=off).reshape(n, 2)
        off += n * 2 * 4
        weights = np.frombuffer(data, dtype="<f8", count=n * (D + 1), offset=off).reshape(n, D + 1)
        return cls(pairs.astype(np.int64), weights.astype(np.float64), A, O)


def export_bank(model: CompNet, allow_list: Iterable[Pair]) -> ClassifierBank:
    pairs = sorted({(int(a), int(o)) for a, o in allow_list})
    if not pairs:
        raise InferenceError("empty allow-list")
    A, O = model.cfg.num_attributes, model.cfg.num_objects
    for a, o in pairs:
        if not (0 <= a < A and 0 <= o < O):
            raise InferenceError(f"pair ({a}, {o}) outside the vocabulary")
    ai, oi = np.array(pairs, dtype=np.intp).T
    W, _ = model.compose_pairs(ai, oi, train=False)
    return ClassifierBank(np.array(pairs), W, A, O)


def read_allow_list(path) -> List[Pair]:
    """CSV of ``attribute,object`` id pairs; a non-numeric first row is a header."""
    import csv

    pairs = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                pairs.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise InferenceError(f"{path}:{lineno}: expected 'attribute,object' ids") from None
    return pairs


# --- prediction records --------------------------------------------------------------------

def prediction_record(image_id, scores: CompositionScores, attributes=None, objects=None) -> dict:
    pairs = []
    for (a, o), p in scores.ranked():
        pairs.append({"attribute": attributes[a] if attributes else a,
                      "object": objects[o] if objects else o, "prob": p})
    return {"image_id": image_id, "pairs": pairs}


def write_predictions(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
