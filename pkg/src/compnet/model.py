"""Three-head composition network: encoder, attribute/object heads, composition MLP.

Classifiers carry their bias as an extra trailing coordinate, so an
attribute or object classifier is a ``D + 1`` vector and the composition MLP
maps ``2 (D + 1) -> D -> D -> D + 1``.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .numerics import DTYPE, DiffOp, NumericsError, as_array, leaky_relu, leaky_relu_grad

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    raw_dim: int
    feature_dim: int
    num_attributes: int
    num_objects: int
    encoder: str = "mlp"  # "identity" | "mlp"
    encoder_hidden: List[int] = field(default_factory=list)
    slope: float = 0.1
    dropout: float = 0.3
    detach_composition_inputs: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ("identity", "mlp"):
            raise ModelError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "identity" and self.raw_dim != self.feature_dim:
            raise ModelError("identity encoder requires raw_dim == feature_dim")
        if len(self.encoder_hidden) > 1:
            raise ModelError("encoder supports at most one hidden layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")
        for name in ("raw_dim", "feature_dim", "num_attributes", "num_objects"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def encoder_dims(self) -> List[int]:
        if self.encoder == "identity":
            return []
        return [self.raw_dim, *self.encoder_hidden, self.feature_dim]


def _he_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(DTYPE)


def init_params(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    """Parameters in declaration order (the checkpoint order)."""
    rng = np.random.default_rng(cfg.seed)
    D = cfg.feature_dim
    params: Dict[str, np.ndarray] = {}
    dims = cfg.encoder_dims
    for i in range(len(dims) - 1):
        params[f"enc.W{i}"] = _he_uniform(rng, dims[i + 1], dims[i])
        params[f"enc.b{i}"] = np.zeros(dims[i + 1])
    params["attr.W"] = _he_uniform(rng, cfg.num_attributes, D)
    params["attr.b"] = np.zeros(cfg.num_attributes)
    params["obj.W"] = _he_uniform(rng, cfg.num_objects, D)
    params["obj.b"] = np.zeros(cfg.num_objects)
    params["comp.W1"] = _he_uniform(rng, D, 2 * (D + 1))
    params["comp.b1"] = np.zeros(D)
    params["comp.W2"] = _he_uniform(rng, D, D)
    params["comp.b2"] = np.zeros(D)
    params["comp.W3"] = _he_uniform(rng, D + 1, D)
    params["comp.b3"] = np.zeros(D + 1)
    return params


def augment(W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([W, b[:, None]], axis=1)


class CompNet:
    """Parameter container plus the batched forward/backward passes."""

    def __init__(self, cfg: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.training = False
        self._dropout_rng = np.random.default_rng([cfg.seed, 1])
        self._check_shapes()

    def _check_shapes(self):
        expected = {k: v.shape for k, v in init_params_shapes(self.cfg).items()}
        if list(expected) != list(self.params):
            raise ModelError(f"parameter names {list(self.params)} != {list(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ModelError(f"{k} has shape {self.params[k].shape}, expected {shape}")

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def reseed_dropout(self, seed):
        self._dropout_rng = np.random.default_rng(seed)

    @property
    def D(self) -> int:
        return self.cfg.feature_dim

    # -- encoder ------------------------------------------------------------

    def encode(self, raw, return_cache: bool = False):
        x = as_array(raw)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.cfg.raw_dim:
            raise ModelError(f"raw input has dimension {X.shape[1]}, expected {self.cfg.raw_dim}")
        cache = []
        h = X
        n_layers = len(self.cfg.encoder_dims) - 1
        for i in range(n_layers):
            z = h @ self.params[f"enc.W{i}"].T + self.params[f"enc.b{i}"]
            cache.append((h, z))
            h = leaky_relu(z, self.cfg.slope) if i < n_layers - 1 else z
        F = h[0] if single else h
        return (F, cache) if return_cache else F

    def encode_backward(self, cache, dF, grads):
        n_layers = len(cache)
        g = dF
        for i in reversed(range(n_layers)):
            h, z = cache[i]
            if i < n_layers - 1:
                g = g * leaky_relu_grad(z, self.cfg.slope)
            grads[f"enc.W{i}"] = grads.get(f"enc.W{i}", 0) + g.T @ h
            grads[f"enc.b{i}"] = grads.get(f"enc.b{i}", 0) + g.sum(axis=0)
            g = g @ self.params[f"enc.W{i}"]
        return g

    # -- linear heads -------------------------------------------------------

    def head_scores(self, feature):
        F = as_array(feature)
        if F.shape[-1] != self.D:
            raise ModelError(f"feature has dimension {F.shape[-1]}, expected {self.D}")
        s_a = F @ self.params["attr.W"].T + self.params["attr.b"]
        s_o = F @ self.params["obj.W"].T + self.params["obj.b"]
        return s_a, s_o

    def attribute_classifiers(self) -> np.ndarray:
        return augment(self.params["attr.W"], self.params["attr.b"])

    def object_classifiers(self) -> np.ndarray:
        return augment(self.params["obj.W"], self.params["obj.b"])

    # -- composition MLP ----------------------------------------------------

    def mlp_forward(self, inputs: np.ndarray, train: Optional[bool] = None):
        """Apply the composition MLP to rows of concatenated classifier pairs."""
        train = self.training if train is None else train
        p, a, rate = self.params, self.cfg.slope, self.cfg.dropout
        z1 = inputs @ p["comp.W1"].T + p["comp.b1"]
        h1 = leaky_relu(z1, a)
        m1 = self._dropout_mask(h1.shape) if train and rate > 0 else None
        if m1 is not None:
            h1 = h1 * m1
        z2 = h1 @ p["comp.W2"].T + p["comp.b2"]
        h2 = leaky_relu(z2, a)
        m2 = self._dropout_mask(h2.shape) if train and rate > 0 else None
        if m2 is not None:
            h2 = h2 * m2
        out = h2 @ p["comp.W3"].T + p["comp.b3"]
        return out, (inputs, z1, m1, h1, z2, m2, h2)

    def _dropout_mask(self, shape):
        keep = 1.0 - self.cfg.dropout
        return (self._dropout_rng.random(shape) < keep) / keep

    def mlp_backward(self, cache, dout, grads):
        inputs, z1, m1, h1, z2, m2, h2 = cache
        p, a = self.params, self.cfg.slope
        _acc(grads, "comp.W3", dout.T @ h2)
        _acc(grads, "comp.b3", dout.sum(axis=0))
        g = dout @ p["comp.W3"]
        if m2 is not None:
            g = g * m2
        g = g * leaky_relu_grad(z2, a)
        _acc(grads, "comp.W2", g.T @ h1)
        _acc(grads, "comp.b2", g.sum(axis=0))
        g = g @ p["comp.W2"]
        if m1 is not None:
            g = g * m1
        g = g * leaky_relu_grad(z1, a)
        _acc(grads, "comp.W1", g.T @ inputs)
        _acc(grads, "comp.b1", g.sum(axis=0))
        return g @ p["comp.W1"]

    def compose_classifier(self, w_a, w_o, mode: str = "eval"):
        """Composed (D + 1)-classifier for one attribute/object classifier pair."""
        w_a, w_o = as_array(w_a, 1), as_array(w_o, 1)
        if w_a.shape[0] != self.D + 1 or w_o.shape[0] != self.D + 1:
            raise ModelError(f"classifier vectors must have length {self.D + 1}")
        if mode not in ("train", "eval"):
            raise ModelError(f"unknown mode {mode!r}")
        out, _ = self.mlp_forward(np.concatenate([w_a, w_o])[None, :], train=mode == "train")
        return out[0]

    def compose_pairs(self, attr_idx, obj_idx, train: Optional[bool] = None):
        """Composed classifiers for many (attribute, object) pairs in one pass."""
        Ca, Co = self.attribute_classifiers(), self.object_classifiers()
        attr_idx = np.asarray(attr_idx, dtype=np.intp)
        obj_idx = np.asarray(obj_idx, dtype=np.intp)
        inputs = np.concatenate([Ca[attr_idx], Co[obj_idx]], axis=1)
        out, cache = self.mlp_forward(inputs, train=train)
        return out, (attr_idx, obj_idx, cache)

    def compose_pairs_backward(self, cache, dW, grads):
        attr_idx, obj_idx, mlp_cache = cache
        dinputs = self.mlp_backward(mlp_cache, dW, grads)
        if self.cfg.detach_composition_inputs:
            return
        D1 = self.D + 1
        dCa = np.zeros((self.cfg.num_attributes, D1), dtype=dinputs.dtype)
        dCo = np.zeros((self.cfg.num_objects, D1), dtype=dinputs.dtype)
        np.add.at(dCa, attr_idx, dinputs[:, :D1])
        np.add.at(dCo, obj_idx, dinputs[:, D1:])
        _acc(grads, "attr.W", dCa[:, :-1])
        _acc(grads, "attr.b", dCa[:, -1])
        _acc(grads, "obj.W", dCo[:, :-1])
        _acc(grads, "obj.b", dCo[:, -1])

    # -- persistence --------------------------------------------------------

    def save(self, path, meta: Optional[dict] = None):
        save_checkpoint(path, self, meta)

    @classmethod
    def load(cls, path):
        model, _ = load_checkpoint(path)
        return model


def init_params_shapes(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    D = cfg.feature_dim
    shapes = {}
    dims = cfg.encoder_dims
    for i in range(len(dims) - 1):
        shapes[f"enc.W{i}"] = np.empty((dims[i + 1], dims[i]))
        shapes[f"enc.b{i}"] = np.empty(dims[i + 1])
    shapes["attr.W"] = np.empty((cfg.num_attributes, D))
    shapes["attr.b"] = np.empty(cfg.num_attributes)
    shapes["obj.W"] = np.empty((cfg.num_objects, D))
    shapes["obj.b"] = np.empty(cfg.num_objects)
    shapes["comp.W1"] = np.empty((D, 2 * (D + 1)))
    shapes["comp.b1"] = np.empty(D)
    shapes["comp.W2"] = np.empty((D, D))
    shapes["comp.b2"] = np.empty(D)
    shapes["comp.W3"] = np.empty((D + 1, D))
    shapes["comp.b3"] = np.empty(D + 1)
    return shapes


def composition_score(w_ao, feature) -> float:
    w_ao, f = as_array(w_ao, 1), as_array(feature, 1)
    if w_ao.shape[0] != f.shape[0] + 1:
        raise ModelError("composed classifier must be one longer than the feature")
    return float(w_ao[:-1] @ f + w_ao[-1])


def _acc(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# --- checkpoint container -----------------------------------------------------

def save_checkpoint(path, model: CompNet, meta: Optional[dict] = None, extra_params=None):
    """Write header (dimensions, encoder spec, parameter order) plus raw tensors."""
    extra_params = extra_params or {}
    header = {
        "format": "compnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "order": list(model.params) + list(extra_params),
        "meta": meta or {},
    }
    arrays = {f"p{i}": np.ascontiguousarray(v, dtype=DTYPE)
              for i, v in enumerate([*model.params.values(), *extra_params.values()])}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, header=blob, **arrays)


def load_checkpoint(path):
    """Returns ``(model, header)``; extra tensors land in ``header["extra"]``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode("utf-8"))
            if header.get("format") != "compnet-checkpoint":
                raise ModelError(f"{path} is not a checkpoint")
            if header["version"] != CHECKPOINT_VERSION:
                raise ModelError(f"unsupported checkpoint version {header['version']}")
            tensors = {name: z[f"p{i}"].copy() for i, name in enumerate(header["order"])}
    except ModelError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise ModelError(f"{path}: unreadable checkpoint ({exc})") from None
    cfg = ModelConfig(**header["config"])
    names = list(init_params_shapes(cfg))
    model = CompNet(cfg, {n: tensors.pop(n) for n in names})
    header["extra"] = tensors
    return model, header


# --- grad-checkable views -------------------------------------------------------

_MLP_NAMES = ("comp.W1", "comp.b1", "comp.W2", "comp.b2", "comp.W3", "comp.b3")


def composition_op(model: CompNet) -> DiffOp:
    """DiffOp for ``compose_classifier`` in eval mode w.r.t. w_a, w_o and MLP params."""

    def fwd(inp):
        saved = {k: model.params[k] for k in _MLP_NAMES}
        model.params.update({k: inp[k] for k in _MLP_NAMES})
        try:
            x = np.concatenate([inp["w_a"], inp["w_o"]])[None, :]
            out, cache = model.mlp_forward(x, train=False)
        finally:
            model.params.update(saved)
        return out[0], ({k: inp[k] for k in _MLP_NAMES}, cache)

    def bwd(state, g):
        mlp_params, cache = state
        saved = {k: model.params[k] for k in _MLP_NAMES}
        model.params.update(mlp_params)
        try:
            grads: Dict[str, np.ndarray] = {}
            dx = model.mlp_backward(cache, g[None, :], grads)[0]
        finally:
            model.params.update(saved)
        D1 = model.D + 1
        grads["w_a"], grads["w_o"] = dx[:D1], dx[D1:]
        return grads

    return DiffOp("compose_classifier", fwd, bwd)


def encoder_op(model: CompNet) -> DiffOp:
    """DiffOp for the encoder w.r.t. its parameters and the raw input batch."""
    names = [k for k in model.params if k.startswith("enc.")]

    def fwd(inp):
        saved = {k: model.params[k] for k in names}
        model.params.update({k: inp[k] for k in names})
        try:
            F, cache = model.encode(inp["x"], return_cache=True)
        finally:
            model.params.update(saved)
        return F, ({k: inp[k] for k in names}, cache)

    def bwd(state, g):
        enc_params, cache = state
        saved = {k: model.params[k] for k in names}
        model.params.update(enc_params)
        try:
            grads: Dict[str, np.ndarray] = {}
            grads["x"] = model.encode_backward(cache, g, grads)
        finally:
            model.params.update(saved)
        return grads

    return DiffOp("encode", fwd, bwd)


def point_for(model: CompNet, names: Sequence[str]) -> Dict[str, np.ndarray]:
    return {k: model.params[k].copy() for k in names}


__all__ = [
    "CompNet", "ModelConfig", "ModelError", "NumericsError", "augment", "composition_op",
    "composition_score", "encoder_op", "init_params", "load_checkpoint", "point_for",
    "save_checkpoint",
]
