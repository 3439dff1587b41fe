"""Loss stack: multi-label softmax CE, hard-negative approximate softmax with
conditional terms, the BCE baseline, and the batched total loss with gradients.

The per-image functions (``multilabel_ce``, ``select_hard_negatives``,
``approx_joint_prob``, ``conditional_prob_given_*``, ``composition_loss``) are
the reference definitions. :func:`batch_loss` computes the same quantities for
a whole batch at once and also returns gradients for every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import DiffOp, log_sigmoid, log_softmax, logsumexp, sigmoid, softmax

Pair = Tuple[int, int]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    attribute: float = 1.0
    object: float = 1.0
    composition: float = 1.0

    def __post_init__(self):
        vals = (self.attribute, self.object, self.composition)
        if min(vals) < 0 or max(vals) <= 0:
            raise LossError("loss weights must be nonnegative with at least one positive")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "LossWeights":
        if len(values) != 3:
            raise LossError("loss weights are [attribute, object, composition]")
        return cls(*map(float, values))


@dataclass(frozen=True)
class LossSettings:
    weights: LossWeights = field(default_factory=LossWeights)
    num_negatives: Optional[int] = None  # None: every eligible pair
    negatives_from: str = "seen"  # "seen" | "all" (the vanilla approximation)
    conditional: bool = True
    conditional_support: str = "all"  # "all" | "seen": pairs inside the conditional softmaxes
    composition: str = "compnet"  # "compnet" | "bce" | "fc" | "none"

    def __post_init__(self):
        if self.negatives_from not in ("seen", "all"):
            raise LossError(f"negatives_from must be 'seen' or 'all', got {self.negatives_from!r}")
        if self.conditional_support not in ("all", "seen"):
            raise LossError(f"conditional_support must be 'all' or 'seen', got {self.conditional_support!r}")
        if self.composition not in ("compnet", "bce", "fc", "none"):
            raise LossError(f"unknown composition loss {self.composition!r}")
        if self.num_negatives is not None and self.num_negatives < 1:
            raise LossError("num_negatives must be >= 1")


# --- per-image reference definitions --------------------------------------------

def multilabel_ce(logits, positives: Iterable[int]) -> float:
    """Softmax cross-entropy with each of the k positive targets set to 1/k."""
    positives = sorted(set(int(p) for p in positives))
    if not positives:
        raise LossError("multi-label cross-entropy needs at least one positive")
    logits = np.asarray(logits, dtype=np.float64)
    if positives[0] < 0 or positives[-1] >= logits.shape[0]:
        raise LossError("positive index out of range")
    return float(-np.mean(log_softmax(logits)[positives]))


def select_hard_negatives(p_a, p_o, seen: Iterable[Pair], positives: Iterable[Pair],
                          k: int) -> List[Pair]:
    """The k pairs of ``seen`` minus ``positives`` with the largest p_a * p_o.

    Ties go to the lexicographically smaller (attribute, object) pair.
    """
    if k < 1:
        raise LossError("k must be >= 1")
    p_a = np.asarray(p_a, dtype=np.float64)
    p_o = np.asarray(p_o, dtype=np.float64)
    excluded = set(map(tuple, positives))
    candidates = sorted(set(map(tuple, seen)) - excluded)
    if not candidates:
        raise LossError("no eligible negative pairs")
    scores = np.array([p_a[a] * p_o[o] for a, o in candidates])
    order = np.argsort(-scores, kind="stable")[:k]
    return [candidates[i] for i in order]


def approx_joint_prob(s_pos: float, s_negs: Sequence[float]) -> float:
    logits = np.concatenate([[float(s_pos)], np.asarray(s_negs, dtype=np.float64).reshape(-1)])
    return float(np.exp(logits[0] - logsumexp(logits)))


def conditional_prob_given_attribute(p_a: float, s_row, obj: int,
                                     num_objects: Optional[int] = None) -> float:
    """p_a times the softmax over the attribute's row of composition logits."""
    s_row = np.asarray(s_row, dtype=np.float64)
    if num_objects is not None and s_row.shape[0] != num_objects:
        raise LossError(f"row has {s_row.shape[0]} logits, expected {num_objects}")
    return float(p_a * softmax(s_row)[obj])


def conditional_prob_given_object(p_o: float, s_col, attr: int,
                                  num_attributes: Optional[int] = None) -> float:
    s_col = np.asarray(s_col, dtype=np.float64)
    if num_attributes is not None and s_col.shape[0] != num_attributes:
        raise LossError(f"column has {s_col.shape[0]} logits, expected {num_attributes}")
    return float(p_o * softmax(s_col)[attr])


def composition_loss(S, p_a, p_o, positives: Sequence[Pair], negatives: Sequence[Pair],
                     conditional: bool = True) -> Dict[str, float]:
    """Composition loss of one image given its full logit grid ``S[a, o]``.

    Returns the total together with its three (1/k-weighted) log terms.
    """
    positives = sorted(set(map(tuple, positives)))
    if not positives:
        raise LossError("image has no positive composition")
    S = np.asarray(S, dtype=np.float64)
    neg_logits = [S[a, o] for a, o in negatives]
    k = len(positives)
    joint = cond_a = cond_o = 0.0
    for a, o in positives:
        joint -= np.log(approx_joint_prob(S[a, o], neg_logits)) / k
        if conditional:
            cond_a -= np.log(conditional_prob_given_attribute(p_a[a], S[a, :], o)) / k
            cond_o -= np.log(conditional_prob_given_object(p_o[o], S[:, o], a)) / k
    return {"loss": joint + cond_a + cond_o, "joint": joint, "cond_attr": cond_a,
            "cond_obj": cond_o}


def bce_composition_loss(logits, labels) -> float:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    s = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.size == 0:
        return 0.0
    return float(-np.mean(y * log_sigmoid(s) + (1 - y) * log_sigmoid(-s)))


def total_loss(parts: Dict[str, float], weights: LossWeights) -> float:
    return (weights.attribute * parts["attr"] + weights.object * parts["obj"]
            + weights.composition * parts.get("comp", 0.0))


# --- batched loss with gradients ---------------------------------------------------

def hard_negative_mask(p_a, p_o, allowed, positive, k: Optional[int]):
    """Batched selection: boolean (B, A, O) mask of the chosen negatives."""
    B, A = p_a.shape
    O = p_o.shape[1]
    scores = (p_a[:, :, None] * p_o[:, None, :]).reshape(B, A * O)
    eligible = (allowed[None, :, :] & ~positive).reshape(B, A * O)
    if not eligible.any(axis=1).all():
        raise LossError("an image has no eligible negative pairs")
    if k is None or k >= A * O:
        return eligible.reshape(B, A, O)
    scores = np.where(eligible, scores, -1.0)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros((B, A * O), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return (mask & eligible).reshape(B, A, O)


def _head_ce(logits, Y):
    logp = log_softmax(logits)
    counts = Y.sum(axis=1)
    if np.any(counts == 0):
        raise LossError("an image has an empty positive label set")
    target = Y / counts[:, None]
    loss = -np.sum(target * logp, axis=1)
    return loss, np.exp(logp) - target, logp


def batch_loss(model, X, Ya, Yo, seen, settings: LossSettings, fc=None,
               need_grads: bool = True):
    """Mean total loss over a batch, its components and parameter gradients.

    ``Ya`` (B, A) and ``Yo`` (B, O) are boolean label masks, ``seen`` an (A, O)
    boolean mask. ``fc`` holds the Composition FC weights when
    ``settings.composition == "fc"``; its gradient is returned under "fc.W".
    """
    Ya = np.asarray(Ya, dtype=bool)
    Yo = np.asarray(Yo, dtype=bool)
    B = Ya.shape[0]
    A, O = Ya.shape[1], Yo.shape[1]
    w = settings.weights
    F, enc_cache = model.encode(X, return_cache=True)
    s_a, s_o = model.head_scores(F)
    la, dsa, logpa = _head_ce(s_a, Ya)
    lo, dso, logpo = _head_ce(s_o, Yo)
    parts = {"attr": float(la.mean()), "obj": float(lo.mean())}
    dsa *= w.attribute / B
    dso *= w.object / B
    dF = np.zeros_like(F)
    grads: Dict[str, np.ndarray] = {}

    kind = settings.composition if w.composition > 0 else "none"
    positive = Ya[:, :, None] & Yo[:, None, :]
    k_pos = positive.sum(axis=(1, 2)).astype(np.float64)
    wpos = positive / k_pos[:, None, None]
    comp = 0.0

    if kind in ("compnet", "bce"):
        p_a, p_o = np.exp(logpa), np.exp(logpo)
        allowed = seen if (settings.negatives_from == "seen" or kind == "bce") else np.ones_like(seen)
        neg = hard_negative_mask(p_a, p_o, allowed, positive, settings.num_negatives)
        conditional = settings.conditional and kind == "compnet"
        needed = (positive | neg).any(axis=0)
        if conditional:
            needed |= Ya.any(axis=0)[:, None] | Yo.any(axis=0)[None, :]
        ai, oi = np.nonzero(needed)
        Wc, comp_cache = model.compose_pairs(ai, oi)
        S_needed = F @ Wc[:, :-1].T + Wc[:, -1]
        S = np.zeros((B, A, O), dtype=F.dtype)
        S[:, ai, oi] = S_needed
        dS = np.zeros_like(S)

        if kind == "compnet":
            lse_neg = logsumexp(np.where(neg, S, -np.inf).reshape(B, -1), axis=1)
            lse_pair = np.logaddexp(S, lse_neg[:, None, None])
            logp = S - lse_pair
            joint = -np.sum(wpos * logp, axis=(1, 2))
            one_minus_p = -np.expm1(logp)
            dS -= wpos * one_minus_p
            coef = np.sum(wpos * one_minus_p, axis=(1, 2))
            q = np.exp(np.where(neg, S, -np.inf) - lse_neg[:, None, None])
            dS += coef[:, None, None] * q
            parts["joint"] = float(joint.mean())
            per_image = joint
            if conditional:
                S_cond = S
                if settings.conditional_support == "seen":
                    # the positive always stays in its own row and column
                    S_cond = np.where(seen[None] | positive, S, -np.inf)
                row_lse = logsumexp(S_cond, axis=2)
                col_lse = logsumexp(S_cond, axis=1)
                logc_a = logpa[:, :, None] + S - row_lse[:, :, None]
                logc_o = logpo[:, None, :] + S - col_lse[:, None, :]
                cond_a = -np.sum(wpos * logc_a, axis=(1, 2))
                cond_o = -np.sum(wpos * logc_o, axis=(1, 2))
                r = wpos.sum(axis=2)
                c = wpos.sum(axis=1)
                with np.errstate(invalid="ignore"):
                    row_sm = np.nan_to_num(np.exp(S_cond - row_lse[:, :, None]))
                    col_sm = np.nan_to_num(np.exp(S_cond - col_lse[:, None, :]))
                dS += -2 * wpos + r[:, :, None] * row_sm + c[:, None, :] * col_sm
                dsa_c = np.exp(logpa) - r
                dso_c = np.exp(logpo) - c
                dsa += dsa_c * (w.composition / B)
                dso += dso_c * (w.composition / B)
                parts["cond_attr"] = float(cond_a.mean())
                parts["cond_obj"] = float(cond_o.mean())
                per_image = per_image + cond_a + cond_o
            comp = float(per_image.mean())
        else:
            cand = positive | neg
            n_c = cand.sum(axis=(1, 2)).astype(np.float64)
            y = positive.astype(np.float64)
            bce = -(y * log_sigmoid(S) + (1 - y) * log_sigmoid(-S))
            comp = float((np.sum(np.where(cand, bce, 0.0), axis=(1, 2)) / n_c).mean())
            dS = np.where(cand, (sigmoid(S) - y) / n_c[:, None, None], 0.0)

        dS *= w.composition / B
        dS_needed = dS[:, ai, oi]
        dWc = np.concatenate([dS_needed.T @ F, dS_needed.sum(axis=0)[:, None]], axis=1)
        dF += dS_needed @ Wc[:, :-1]
        if need_grads:
            model.compose_pairs_backward(comp_cache, dWc, grads)
    elif kind == "fc":
        seen_a, seen_o = np.nonzero(seen)
        logits = F @ fc[:, :-1].T + fc[:, -1]
        Yc = positive[:, seen_a, seen_o]
        has = Yc.any(axis=1)
        per_image = np.zeros(B)
        dlog = np.zeros_like(logits)
        if has.any():
            l, d, _ = _head_ce(logits[has], Yc[has])
            per_image[has] = l
            dlog[has] = d
        comp = float(per_image.mean())
        dlog *= w.composition / B
        grads["fc.W"] = np.concatenate([dlog.T @ F, dlog.sum(axis=0)[:, None]], axis=1)
        dF += dlog @ fc[:, :-1]

    parts["comp"] = comp
    parts["total"] = total_loss(parts, w)
    if not need_grads:
        return parts["total"], parts, grads
    _add(grads, "attr.W", dsa.T @ F)
    _add(grads, "attr.b", dsa.sum(axis=0))
    _add(grads, "obj.W", dso.T @ F)
    _add(grads, "obj.b", dso.sum(axis=0))
    dF += dsa @ model.params["attr.W"] + dso @ model.params["obj.W"]
    model.encode_backward(enc_cache, dF, grads)
    return parts["total"], parts, grads


def _add(grads, name, value):
    grads[name] = grads[name] + value if name in grads else value


def loss_op(model, X, Ya, Yo, seen, settings: LossSettings, fc=None) -> DiffOp:
    """DiffOp view of :func:`batch_loss` w.r.t. every model parameter (and fc.W)."""
    names = list(model.params)

    def fwd(inp):
        saved = dict(model.params)
        model.params.update({k: inp[k] for k in names})
        try:
            total, _, grads = batch_loss(model, X, Ya, Yo, seen, settings, fc=inp.get("fc.W"))
        finally:
            model.params.update(saved)
        return np.asarray(total), grads

    shapes = {k: v.shape for k, v in model.params.items()}
    if fc is not None:
        shapes["fc.W"] = fc.shape

    def bwd(grads, g):
        # parameters the loss does not touch (the MLP under "fc") get zeros
        return {k: (grads[k] if k in grads else np.zeros(shape)) * g for k, shape in shapes.items()}

    return DiffOp("batch_loss", fwd, bwd)
