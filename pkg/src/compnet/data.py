"""Synthetic weakly-labelled attribute/object corpus and the seen/unseen split.

An image is a small set of (attribute, object) pairs drawn from the
realisable part of the composition grid. Its raw feature is the sum of the
object prototypes and attribute prototypes plus Gaussian noise; the observed
labels are then corrupted by random drops and additions, like user tags.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

FORMAT = "compnet-dataset"
VERSION = 1
PARTITIONS = ("train", "test-seen", "test-unseen")

Pair = Tuple[int, int]


class DataError(ValueError):
    pass


@dataclass
class SyntheticWorldConfig:
    num_attributes: int = 12
    num_objects: int = 24
    raw_dim: int = 32
    prototype_scale: float = 1.0
    attribute_scale: float = 1.0
    noise: float = 0.1
    context_flip: float = 0.0
    num_groups: int = 4
    group_share: float = 0.0
    drop_prob: float = 0.1
    add_prob: float = 0.0
    sparsity: float = 0.6
    max_objects: int = 1
    max_attributes: int = 2
    train_size: int = 2000
    test_size: int = 500
    min_occurrence: int = 20
    unseen_ratio: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_prob", "add_prob", "sparsity", "group_share", "context_flip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.unseen_ratio < 1.0:
            raise DataError("unseen_ratio must lie in (0, 1)")
        if self.noise < 0:
            raise DataError("noise must be nonnegative")
        for name in ("num_attributes", "num_objects", "raw_dim", "max_objects", "num_groups",
                     "max_attributes", "train_size", "min_occurrence"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.test_size < 0:
            raise DataError("test_size must be >= 0")


@dataclass
class ImageSample:
    id: int
    feature: np.ndarray
    attrs: List[int]
    objs: List[int]
    partition: str = "train"

    def pairs(self) -> List[Pair]:
        return [(a, o) for a in self.attrs for o in self.objs]

    def __eq__(self, other):
        return (isinstance(other, ImageSample) and self.id == other.id
                and np.array_equal(self.feature, other.feature) and self.attrs == other.attrs
                and self.objs == other.objs and self.partition == other.partition)


@dataclass
class CompositionSpace:
    num_attributes: int
    num_objects: int
    seen: Dict[Pair, int] = field(default_factory=dict)
    unseen: Dict[Pair, int] = field(default_factory=dict)

    def mask(self, which: str = "seen") -> np.ndarray:
        m = np.zeros((self.num_attributes, self.num_objects), dtype=bool)
        for a, o in getattr(self, which):
            m[a, o] = True
        return m

    def split_of(self, pair: Pair) -> Optional[str]:
        if pair in self.seen:
            return "seen"
        if pair in self.unseen:
            return "unseen"
        return None


@dataclass
class Dataset:
    samples: List[ImageSample]
    attributes: List[str]
    objects: List[str]
    space: CompositionSpace
    meta: dict = field(default_factory=dict)

    def partition(self, *names: str) -> List[ImageSample]:
        return [s for s in self.samples if s.partition in names]

    def arrays(self, samples: Optional[Sequence[ImageSample]] = None):
        """Feature matrix plus boolean attribute and object label masks."""
        samples = self.samples if samples is None else samples
        X = np.array([s.feature for s in samples], dtype=np.float64).reshape(len(samples), -1)
        Ya = np.zeros((len(samples), len(self.attributes)), dtype=bool)
        Yo = np.zeros((len(samples), len(self.objects)), dtype=bool)
        for i, s in enumerate(samples):
            Ya[i, s.attrs] = True
            Yo[i, s.objs] = True
        return X, Ya, Yo

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.samples == other.samples
                and self.attributes == other.attributes and self.objects == other.objects
                and self.space == other.space)


# --- generation -------------------------------------------------------------------

@dataclass
class World:
    """Latent structure of a synthetic corpus."""

    object_prototypes: np.ndarray
    attribute_prototypes: np.ndarray
    realizable: np.ndarray  # (A, O) bool
    groups: np.ndarray  # (O,) object group ids
    offsets: np.ndarray  # (A, num_groups, raw_dim) group-specific attribute appearance

    def appearance(self, attr: int, obj: int) -> np.ndarray:
        """What attribute ``attr`` adds to the feature when it describes ``obj``."""
        return self.attribute_prototypes[attr] + self.offsets[attr, self.groups[obj]]


def make_world(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> World:
    A, O, d = cfg.num_attributes, cfg.num_objects, cfg.raw_dim
    groups = np.arange(O) % cfg.num_groups
    G = rng.standard_normal((cfg.num_groups, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    U = rng.standard_normal((O, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    P_o = cfg.group_share * G[groups] + (1.0 - cfg.group_share) * U
    P_o /= np.linalg.norm(P_o, axis=1, keepdims=True) / cfg.prototype_scale
    P_a = rng.standard_normal((A, d))
    P_a /= np.linalg.norm(P_a, axis=1, keepdims=True) / cfg.attribute_scale
    realizable = rng.random((A, O)) < cfg.sparsity
    # every object keeps at least one attribute
    for o in range(O):
        if not realizable[:, o].any():
            realizable[rng.integers(A), o] = True
    if realizable.sum() < 2:
        raise DataError("configuration yields fewer than 2 realisable pairs")
    # an attribute may look inverted on one object group: no linear object-agnostic
    # attribute classifier separates it, a per-composition classifier does
    flipped = rng.random((A, cfg.num_groups)) < cfg.context_flip
    offsets = np.where(flipped[:, :, None], -2.0 * P_a[:, None, :], 0.0)
    return World(P_o, P_a, realizable, groups, offsets)


def corrupt_labels(labels: Sequence[int], vocab_size: int, drop_prob: float, add_prob: float,
                   rng: np.random.Generator) -> Tuple[List[int], int, int]:
    """Drop each label with ``drop_prob``; add one random label with ``add_prob``.

    Returns the new sorted label list and the numbers of dropped/added labels.
    """
    kept = [l for l in labels if rng.random() >= drop_prob]
    dropped = len(labels) - len(kept)
    added = 0
    if add_prob and rng.random() < add_prob:
        extra = int(rng.integers(vocab_size))
        if extra not in kept:
            kept.append(extra)
            added = 1
    return sorted(set(kept)), dropped, added


def _draw_image(cfg, world, rng, stats):
    O = cfg.num_objects
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    objs = sorted(rng.choice(O, size=min(n_obj, O), replace=False).tolist())
    feature = world.object_prototypes[objs].sum(axis=0)
    attrs = set()
    for o in objs:
        options = np.flatnonzero(world.realizable[:, o])
        n_attr = int(rng.integers(1, cfg.max_attributes + 1))
        for a in rng.choice(options, size=min(n_attr, options.size), replace=False).tolist():
            feature = feature + world.appearance(a, o)
            attrs.add(a)
    attrs = sorted(attrs)
    if cfg.noise:
        feature = feature + cfg.noise * rng.standard_normal(cfg.raw_dim)
    obs_a, da, aa = corrupt_labels(attrs, cfg.num_attributes, cfg.drop_prob, cfg.add_prob, rng)
    obs_o, do, ao = corrupt_labels(objs, cfg.num_objects, cfg.drop_prob, cfg.add_prob, rng)
    stats["dropped_labels"] += da + do
    stats["added_labels"] += aa + ao
    if not obs_a or not obs_o:
        stats["discarded_images"] += 1
        return None
    return feature, obs_a, obs_o


def pair_counts(samples: Iterable[ImageSample]) -> Dict[Pair, int]:
    counts: Dict[Pair, int] = {}
    for s in samples:
        for p in s.pairs():
            counts[p] = counts.get(p, 0) + 1
    return counts


def split_compositions(counts: Dict[Pair, int], unseen_ratio: float, seed: int,
                       min_occurrence: int = 1):
    """Random split of the qualifying pairs into (seen, unseen) count maps."""
    if not 0.0 < unseen_ratio < 1.0:
        raise DataError("unseen_ratio must lie in (0, 1)")
    qualifying = sorted(p for p, c in counts.items() if c >= min_occurrence)
    if len(qualifying) < 2:
        raise DataError(f"only {len(qualifying)} pairs reach {min_occurrence} occurrences")
    n_unseen = int(math.floor(unseen_ratio * len(qualifying) + 0.5))
    if n_unseen == 0 or n_unseen == len(qualifying):
        raise DataError(f"ratio {unseen_ratio} gives a degenerate split of {len(qualifying)} pairs")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(qualifying), size=n_unseen, replace=False).tolist())
    seen = {p: counts[p] for i, p in enumerate(qualifying) if i not in chosen}
    unseen = {p: counts[p] for i, p in enumerate(qualifying) if i in chosen}
    return seen, unseen


def is_unseen_image(sample: ImageSample, unseen) -> bool:
    return any(p in unseen for p in sample.pairs())


def tag_images(dataset: Dataset, test_size: Optional[int] = None, seed: int = 0) -> Dataset:
    """Tag every image seen/unseen; unseen images can only land in the test set.

    With ``test_size`` the test partition is a uniform sample of that many
    images and the rest of the seen images form the train partition; unseen
    images outside the sample are left out (partition ``"unused"``).
    """
    unseen = dataset.space.unseen
    flags = [is_unseen_image(s, unseen) for s in dataset.samples]
    n = len(dataset.samples)
    if test_size is None:
        test = set(i for i, f in enumerate(flags) if f)
    else:
        test = set(np.random.default_rng(seed).permutation(n)[:test_size].tolist())
    for i, (s, f) in enumerate(zip(dataset.samples, flags)):
        if i in test:
            s.partition = "test-unseen" if f else "test-seen"
        else:
            s.partition = "unused" if f else "train"
    return dataset


def generate(cfg: SyntheticWorldConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    world = make_world(cfg, rng)
    stats = {"dropped_labels": 0, "added_labels": 0, "discarded_images": 0}

    def draw(n):
        out = []
        while len(out) < n:
            img = _draw_image(cfg, world, rng, stats)
            if img is not None:
                out.append(img)
        return out

    pool = draw(cfg.train_size + cfg.test_size)
    samples = [ImageSample(i, f, a, o) for i, (f, a, o) in enumerate(pool)]
    counts = pair_counts(samples)
    seen, unseen = split_compositions(counts, cfg.unseen_ratio, cfg.seed, cfg.min_occurrence)
    space = CompositionSpace(cfg.num_attributes, cfg.num_objects, seen, unseen)
    ds = Dataset(samples, [f"attr{a:03d}" for a in range(cfg.num_attributes)],
                 [f"obj{o:03d}" for o in range(cfg.num_objects)], space)
    tag_images(ds, cfg.test_size, seed=cfg.seed)

    # top up the train partition with fresh seen images; the split stays fixed
    n_train = sum(s.partition == "train" for s in ds.samples)
    while n_train < cfg.train_size:
        for f, a, o in draw(cfg.train_size - n_train):
            s = ImageSample(len(ds.samples), f, a, o)
            if not is_unseen_image(s, unseen):
                ds.samples.append(s)
                n_train += 1
            else:
                s.partition = "unused"
                ds.samples.append(s)
    ds.samples = [s for s in ds.samples if s.partition != "unused"]
    ds.meta = {"config": asdict(cfg), "stats": stats,
               "realizable": np.argwhere(world.realizable).tolist()}
    return ds


# --- persistence --------------------------------------------------------------------

def save(dataset: Dataset, path) -> None:
    space = dataset.space
    header = {
        "format": FORMAT, "version": VERSION,
        "attributes": dataset.attributes, "objects": dataset.objects,
        "raw_dim": int(dataset.samples[0].feature.shape[0]) if dataset.samples else 0,
        "seen": [[a, o, c] for (a, o), c in sorted(space.seen.items())],
        "unseen": [[a, o, c] for (a, o), c in sorted(space.unseen.items())],
        "meta": dataset.meta,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in dataset.samples:
            fh.write(json.dumps({"id": s.id, "feature": s.feature.tolist(), "attrs": s.attrs,
                                 "objs": s.objs, "partition": s.partition}) + "\n")


def load(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: malformed header: {exc.msg}") from None
    if header.get("format") != FORMAT:
        raise DataError(f"{path}:1: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise DataError(f"{path}:1: unsupported version {header.get('version')}")
    A, O = len(header["attributes"]), len(header["objects"])
    raw_dim = header["raw_dim"]

    def pairs(rows, lineno):
        out = {}
        for a, o, c in rows:
            if not (0 <= a < A and 0 <= o < O):
                raise DataError(f"{path}:{lineno}: pair ({a}, {o}) outside the vocabulary")
            out[(a, o)] = c
        return out

    space = CompositionSpace(A, O, pairs(header["seen"], 1), pairs(header["unseen"], 1))
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            sample = ImageSample(int(rec["id"]), np.array(rec["feature"], dtype=np.float64),
                                 [int(a) for a in rec["attrs"]], [int(o) for o in rec["objs"]],
                                 rec["partition"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
        if sample.feature.shape != (raw_dim,):
            raise DataError(f"{path}:{lineno}: feature has {sample.feature.size} values, "
                            f"header says {raw_dim}")
        if any(not 0 <= a < A for a in sample.attrs) or any(not 0 <= o < O for o in sample.objs):
            raise DataError(f"{path}:{lineno}: label outside the header vocabulary")
        if not sample.attrs or not sample.objs:
            raise DataError(f"{path}:{lineno}: image needs an attribute and an object label")
        if sample.partition not in PARTITIONS:
            raise DataError(f"{path}:{lineno}: unknown partition {sample.partition!r}")
        samples.append(sample)
    return Dataset(samples, header["attributes"], header["objects"], space, header.get("meta", {}))


def load_config(path) -> SyntheticWorldConfig:
    from .config import read_toml

    raw = read_toml(path)
    section = raw.get("data", raw)
    return SyntheticWorldConfig(**section)
