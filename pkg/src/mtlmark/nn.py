"""Dense multi-task network: shared backbone, primary head, watermark head.

Inputs are rows of a 2-D array; a 1-D input is treated as a batch of one.
The watermark head reads the post-activation outputs of the tapped backbone
layers, concatenated in ascending layer order.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParseError, StructuralError

ACTIVATIONS = ("relu", "tanh", "identity")
GROUPS = ("backbone", "c_p", "c_wm")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise StructuralError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


def init_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    if spec.in_dim < 1 or spec.out_dim < 1:
        raise StructuralError(f"layer dims must be >= 1: {spec}")
    scale = np.sqrt((2.0 if spec.activation == "relu" else 1.0) / spec.in_dim)
    W = rng.normal(0.0, scale, size=(spec.out_dim, spec.in_dim))
    return Layer(W, np.zeros(spec.out_dim), spec.activation)


def init_stack(dims, rng, hidden="relu", last="identity") -> list[Layer]:
    """Layers ``dims[0] -> dims[1] -> ...``; the final layer uses ``last``."""
    n = len(dims) - 1
    return [init_layer(LayerSpec(dims[i], dims[i + 1], last if i == n - 1 else hidden), rng)
            for i in range(n)]


def _check_chain(layers, name):
    for i in range(1, len(layers)):
        if layers[i].in_dim != layers[i - 1].out_dim:
            raise StructuralError(f"{name}[{i}] expects {layers[i].in_dim} inputs, "
                                  f"previous layer emits {layers[i - 1].out_dim}")


@dataclass
class WatermarkHead:
    layers: list[Layer]
    taps: tuple[int, ...]

    def __post_init__(self):
        self.taps = tuple(sorted(int(t) for t in self.taps))
        if len(set(self.taps)) != len(self.taps) or not self.taps:
            raise StructuralError(f"taps must be a non-empty set, got {self.taps}")
        _check_chain(self.layers, "c_wm")
        if self.layers and self.layers[-1].out_dim != 2:
            raise StructuralError("watermark head must emit 2 logits")


@dataclass
class MultiTaskModel:
    backbone: list[Layer]
    c_p: list[Layer]
    c_wm: WatermarkHead | None = None
    # w0 snapshot of backbone + c_p arrays, set by primary training; never serialized
    anchor: list | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        _check_chain(self.backbone, "backbone")
        _check_chain(self.c_p, "c_p")
        if self.backbone and self.c_p and self.c_p[0].in_dim != self.backbone[-1].out_dim:
            raise StructuralError("primary head input does not match backbone output")
        if self.c_wm is not None:
            check_head_fits(self, self.c_wm)

    @property
    def input_dim(self) -> int:
        return self.backbone[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.c_p[-1].out_dim

    def published(self) -> "MultiTaskModel":
        """The releasable model: backbone and primary head only."""
        return MultiTaskModel(copy.deepcopy(self.backbone), copy.deepcopy(self.c_p), None)

    def with_head(self, head: WatermarkHead) -> "MultiTaskModel":
        """Shares backbone/c_p arrays with ``self``; copy first if training."""
        return MultiTaskModel(self.backbone, self.c_p, head, self.anchor)

    def copy(self) -> "MultiTaskModel":
        return copy.deepcopy(self)

    def group(self, name: str) -> list[Layer]:
        if name == "c_wm":
            return self.c_wm.layers if self.c_wm is not None else []
        return getattr(self, name)

    def arrays(self, groups=GROUPS) -> list[np.ndarray]:
        """Parameter arrays (by reference) in a fixed order."""
        out = []
        for g in groups:
            for layer in self.group(g):
                out += [layer.W, layer.b]
        return out


def check_head_fits(model: MultiTaskModel, head: WatermarkHead):
    depth = len(model.backbone)
    if any(t < 0 or t >= depth for t in head.taps):
        raise StructuralError(f"taps {head.taps} outside backbone depth {depth}")
    width = sum(model.backbone[t].out_dim for t in head.taps)
    if head.layers and head.layers[0].in_dim != width:
        raise StructuralError(f"c_wm expects {head.layers[0].in_dim} inputs, taps give {width}")


def make_model(input_dim, backbone_widths, n_classes, wm_hidden=(64,), taps=None,
               primary_hidden=(), seed=0) -> MultiTaskModel:
    """Randomly initialised model; taps default to the first three backbone layers."""
    rng = np.random.default_rng(seed)
    backbone = init_stack([input_dim, *backbone_widths], rng, last="relu")
    c_p = init_stack([backbone_widths[-1], *primary_hidden, n_classes], rng)
    if taps is None:
        taps = tuple(range(min(3, len(backbone_widths))))
    width = sum(backbone_widths[t] for t in taps)
    c_wm = WatermarkHead(init_stack([width, *wm_hidden, 2], rng), taps)
    return MultiTaskModel(backbone, c_p, c_wm)


def fresh_head_like(head: WatermarkHead, seed) -> WatermarkHead:
    rng = np.random.default_rng(seed)
    layers = [init_layer(LayerSpec(l.in_dim, l.out_dim, l.activation), rng) for l in head.layers]
    return WatermarkHead(layers, head.taps)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class ForwardTrace:
    """Post-activation outputs of every layer on the path, plus head logits."""

    backbone: list[np.ndarray]
    head: list[np.ndarray]
    logits: np.ndarray
    head_input: np.ndarray
    # pre-activations, kept for backward
    z_backbone: list[np.ndarray] = field(repr=False, default_factory=list)
    z_head: list[np.ndarray] = field(repr=False, default_factory=list)


def _run(layers, x, zs, acts):
    a = x
    for layer in layers:
        z = a @ layer.W.T + layer.b
        a = _act(layer.activation, z)
        zs.append(z)
        acts.append(a)
    return a


def forward(model: MultiTaskModel, x, head: str = "primary",
            c_wm: WatermarkHead | None = None) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise StructuralError(f"input dim {x.shape[1]} != model input dim {model.input_dim}")
    c_wm = c_wm if c_wm is not None else model.c_wm
    if head == "watermark":
        if c_wm is None:
            raise StructuralError("model has no watermark head")
        check_head_fits(model, c_wm)
        depth = max(c_wm.taps) + 1
    elif head == "primary":
        depth = len(model.backbone)
    else:
        raise StructuralError(f"unknown head {head!r}")
    zb, ab = [], []
    last = _run(model.backbone[:depth], x, zb, ab)
    if head == "primary":
        h_in, layers = last, model.c_p
    else:
        h_in, layers = np.concatenate([ab[t] for t in c_wm.taps], axis=1), c_wm.layers
    zh, ah = [], []
    logits = _run(layers, h_in, zh, ah)
    return ForwardTrace(ab, ah, logits, h_in, zb, zh)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, target) -> float:
    """Mean cross-entropy of integer targets."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(target)), target].mean())


def predict(model, x, head="primary", c_wm=None) -> np.ndarray:
    return forward(model, x, head, c_wm).logits.argmax(axis=1)


def accuracy(model, x, y, head="primary", c_wm=None) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict(model, x, head, c_wm) == np.asarray(y)).mean())


@dataclass
class Grads:
    """Gradients keyed by group; each entry is a list of (dW, db)."""

    backbone: list
    c_p: list
    c_wm: list

    def arrays(self, groups=GROUPS):
        out = []
        for g in groups:
            for dW, db in getattr(self, g):
                out += [dW, db]
        return out


def zero_grads(model: MultiTaskModel) -> Grads:
    z = lambda layers: [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in layers]
    return Grads(z(model.backbone), z(model.c_p), z(model.group("c_wm")))


def _backprop_stack(layers, zs, acts, inp, delta_out, name):
    """Backprop through ``layers`` given dLoss/d(output); returns (grads, dLoss/d(input))."""
    grads = [None] * len(layers)
    g = delta_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = g * _act_grad(layer.activation, zs[i], acts[i])
        a_prev = acts[i - 1] if i > 0 else inp
        dW = dz.T @ a_prev
        db = dz.sum(axis=0)
        g = dz @ layer.W
        if not (np.isfinite(dW).all() and np.isfinite(g).all()):
            raise NumericalError(f"non-finite gradient in {name}[{i}]", layer=(name, i))
        grads[i] = (dW, db)
    return grads, g


def backward(model: MultiTaskModel, x, target, head: str = "primary",
             c_wm: WatermarkHead | None = None) -> tuple[float, Grads]:
    """Mean cross-entropy loss and its exact gradient for one head."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    tr = forward(model, x, head, c_wm)
    n_out = tr.logits.shape[1]
    if target.size and (target.min() < 0 or target.max() >= n_out):
        raise StructuralError(f"targets outside [0, {n_out})")
    if not np.isfinite(tr.logits).all():
        raise NumericalError("non-finite logits", layer=None)
    loss = cross_entropy(tr.logits, target)
    p = softmax(tr.logits)
    p[np.arange(len(target)), target] -= 1.0
    delta = p / len(target)

    grads = zero_grads(model)
    if head == "primary":
        hg, g_back = _backprop_stack(model.c_p, tr.z_head, tr.head, tr.head_input, delta, "c_p")
        grads.c_p = hg
        bb_grad = [None] * len(tr.backbone)
        bb_grad[-1] = g_back
    else:
        head_obj = c_wm if c_wm is not None else model.c_wm
        hg, g_back = _backprop_stack(head_obj.layers, tr.z_head, tr.head, tr.head_input, delta, "c_wm")
        grads.c_wm = hg
        bb_grad = [None] * len(tr.backbone)
        off = 0
        for t in head_obj.taps:
            w = model.backbone[t].out_dim
            bb_grad[t] = g_back[:, off:off + w]
            off += w
    # walk the backbone top-down, adding tapped contributions as we pass them
    g = None
    for i in range(len(tr.backbone) - 1, -1, -1):
        if bb_grad[i] is not None:
            g = bb_grad[i] if g is None else g + bb_grad[i]
        layer = model.backbone[i]
        dz = g * _act_grad(layer.activation, tr.z_backbone[i], tr.backbone[i])
        a_prev = tr.backbone[i - 1] if i > 0 else x
        dW, db = dz.T @ a_prev, dz.sum(axis=0)
        if not np.isfinite(dW).all():
            raise NumericalError(f"non-finite gradient in backbone[{i}]", layer=("backbone", i))
        grads.backbone[i] = (dW, db)
        g = dz @ layer.W
    return loss, grads


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float,
             weight_decay: float = 0.0):
    """In-place ``w <- w - lr * (grad + weight_decay * w)``."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if lr == 0:
        return
    for w, g in zip(params, grads):
        w -= lr * (g + weight_decay * w)


def flat(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def apply_prune_mask(model: MultiTaskModel, rho: float) -> tuple[MultiTaskModel, list[np.ndarray]]:
    """Zero the floor(rho * W) smallest-magnitude backbone weights globally.

    Ties break by (layer, row, col) order; biases are exempt.  Returns the
    pruned copy and per-layer boolean keep-masks.
    """
    if not 0 <= rho <= 1:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    out = model.copy()
    weights = [l.W for l in out.backbone]
    total = sum(w.size for w in weights)
    k = int(np.floor(rho * total + 1e-9))
    masks = [np.ones_like(w, dtype=bool) for w in weights]
    if k:
        mags = np.abs(flat(weights))
        # stable sort keeps flat (layer, row, col) order among equal magnitudes
        drop = np.argsort(mags, kind="stable")[:k]
        keep = np.ones(total, dtype=bool)
        keep[drop] = False
        off = 0
        for i, w in enumerate(weights):
            masks[i] = keep[off:off + w.size].reshape(w.shape)
            w[~masks[i]] = 0.0
            off += w.size
    return out, masks


# ---- canonical serialization ---------------------------------------------

def _hex(arr) -> list[str]:
    return [struct.pack(">d", float(v)).hex() for v in np.asarray(arr).ravel()]


def _unhex(items, where) -> np.ndarray:
    try:
        return np.array([struct.unpack(">d", bytes.fromhex(s))[0] for s in items], dtype=np.float64)
    except (ValueError, TypeError, struct.error) as exc:
        raise ParseError(f"bad f64hex value: {exc}", where) from exc


def _layer_doc(layer: Layer) -> dict:
    return {"activation": layer.activation, "shape": list(layer.W.shape),
            "W": {"f64hex": _hex(layer.W)}, "b": {"f64hex": _hex(layer.b)}}


def _layer_from(doc, where) -> Layer:
    try:
        rows, cols = doc["shape"]
        W = _unhex(doc["W"]["f64hex"], f"{where}.W").reshape(rows, cols)
        b = _unhex(doc["b"]["f64hex"], f"{where}.b")
        return Layer(W, b, doc["activation"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed layer: {exc}", where) from exc


def serialize(model: MultiTaskModel) -> bytes:
    head = model.c_wm
    doc = {"version": 1,
           "backbone": [_layer_doc(l) for l in model.backbone],
           "c_p": [_layer_doc(l) for l in model.c_p],
           "c_wm": [_layer_doc(l) for l in head.layers] if head else [],
           "taps": list(head.taps) if head else []}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def serialize_head(head: WatermarkHead) -> bytes:
    """A watermark head alone, as a model document with empty backbone and c_p."""
    doc = {"version": 1, "backbone": [], "c_p": [],
           "c_wm": [_layer_doc(l) for l in head.layers], "taps": list(head.taps)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _load_doc(data):
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.pos) from exc
    except UnicodeDecodeError as exc:
        raise ParseError("invalid UTF-8", exc.start) from exc
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise ParseError("unsupported or missing version", "$.version")
    for k in ("backbone", "c_p", "c_wm", "taps"):
        if not isinstance(doc.get(k), list):
            raise ParseError(f"missing list field {k!r}", f"$.{k}")
    return doc


def deserialize(data: bytes) -> MultiTaskModel:
    doc = _load_doc(data)
    bb = [_layer_from(d, f"$.backbone[{i}]") for i, d in enumerate(doc["backbone"])]
    cp = [_layer_from(d, f"$.c_p[{i}]") for i, d in enumerate(doc["c_p"])]
    wm = [_layer_from(d, f"$.c_wm[{i}]") for i, d in enumerate(doc["c_wm"])]
    head = WatermarkHead(wm, doc["taps"]) if wm else None
    try:
        return MultiTaskModel(bb, cp, head)
    except StructuralError as exc:
        raise ParseError(str(exc), "$") from exc


def deserialize_head(data: bytes) -> WatermarkHead:
    doc = _load_doc(data)
    wm = [_layer_from(d, f"$.c_wm[{i}]") for i, d in enumerate(doc["c_wm"])]
    if not wm:
        raise ParseError("document holds no watermark head", "$.c_wm")
    return WatermarkHead(wm, doc["taps"])


def model_hash(model: MultiTaskModel) -> bytes:
    return hashlib.sha256(serialize(model)).digest()


def head_hash(head: WatermarkHead) -> bytes:
    return hashlib.sha256(serialize_head(head)).digest()
