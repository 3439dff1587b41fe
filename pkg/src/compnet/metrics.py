"""Head precision@1 and per-composition average precision split by seen/unseen."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

Pair = Tuple[int, int]


def precision_at_1(scores, labels) -> Tuple[float, int]:
    """Fraction of images whose top-scoring class is a positive.

    Images without labels are skipped; the number skipped is returned too.
    Ties in the score go to the lower class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    has = labels.any(axis=1)
    skipped = int((~has).sum())
    if not has.any():
        return float("nan"), skipped
    top = np.argmax(scores[has], axis=1)
    hits = labels[has][np.arange(int(has.sum())), top]
    return float(hits.mean()), skipped


def average_precision(scores, relevant, image_ids=None) -> float:
    """Non-interpolated AP: mean precision at each relevant image in rank order.

    Images are ranked by descending score, equal scores by ascending image id.
    Returns nan when nothing is relevant.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    ids = np.arange(scores.size) if image_ids is None else np.asarray(image_ids)
    n_rel = int(relevant.sum())
    if n_rel == 0:
        return float("nan")
    order = np.lexsort((ids, -scores))
    hits = relevant[order]
    ranks = np.flatnonzero(hits) + 1
    # correctly rounded sum: the value does not depend on summation order
    return math.fsum((np.arange(1, n_rel + 1) / ranks).tolist()) / n_rel


def ap_table(scores, relevance, pairs: Sequence[Pair], image_ids=None) -> Dict[Pair, float]:
    """AP of every pair with at least one relevant image.

    ``scores`` and ``relevance`` are (N, A, O); pairs without a relevant image
    are omitted.
    """
    out = {}
    for a, o in pairs:
        rel = relevance[:, a, o]
        if rel.any():
            out[(a, o)] = average_precision(scores[:, a, o], rel, image_ids)
    return out


def map_by_split(table: Dict[Pair, float], seen, unseen) -> Tuple[Optional[float], Optional[float]]:
    """Unweighted mean AP over the seen and unseen pairs present in ``table``."""

    def mean(keys):
        vals = [table[p] for p in keys if p in table]
        return math.fsum(vals) / len(vals) if vals else None

    return mean(seen), mean(unseen)


@dataclass
class MetricReport:
    object_p1: float
    attribute_p1: float
    seen_map: Optional[float]
    unseen_map: Optional[float]
    num_seen: int = 0
    num_unseen: int = 0
    excluded: int = 0
    skipped_images: int = 0
    k_a: int = 0
    k_o: int = 0
    method: str = "compnet"
    ap: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def to_text(self) -> str:
        """Aligned table: head P@1 and composition mAP in percent."""

        def pct(v):
            return "--" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.1f}"

        head = ["Method", "Obj. P@1", "Attr. P@1", "S mAP", "U mAP"]
        row = [self.method, pct(self.object_p1), pct(self.attribute_p1), pct(self.seen_map),
               pct(self.unseen_map)]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        line = "  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(head, widths)))
        vals = "  ".join(r.ljust(w) if i == 0 else r.rjust(w) for i, (r, w) in enumerate(zip(row, widths)))
        rule = "-" * len(line)
        foot = (f"shortlist {self.k_a}x{self.k_o}; {self.num_seen} seen / {self.num_unseen} unseen "
                f"compositions scored; {self.excluded} without test images")
        return "\n".join([rule, line, rule, vals, rule, foot])


def pair_key(pair: Pair) -> str:
    return f"{pair[0]},{pair[1]}"
