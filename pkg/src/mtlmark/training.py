"""Staged multi-task training.

1. ``train_primary``: mini-batch SGD on cross-entropy + L2 decay, snapshotting w0.
2. ``embed_watermark``: watermark cross-entropy + lam1 * ||w - w0||^2
   + lam2 * R_DA, where R_DA is the watermark loss after simulated tuning.
   R_DA gradients use the first-order approximation (tuning Jacobian = I).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ConfigError, StateError, TrainingError

FROZEN_SENTINEL = 1e6
ANCHORED = ("backbone", "c_p")


@dataclass
class TrainConfig:
    lambda0: float = 1e-4
    lambda1: float = 0.01
    lambda2: float = 1.0
    lr_primary: float = 0.05
    lr_wm: float = 0.05
    epochs_primary: int = 50
    epochs_wm: int = 150
    batch_size: int = 32
    wm_batch_size: int = 64
    # tuning simulation for R_DA
    E: int = 2
    k: int = 5
    lr_inner: float = 0.05
    subset_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        rates = (self.lambda0, self.lambda1, self.lambda2, self.lr_primary, self.lr_wm, self.lr_inner)
        if any(r < 0 for r in rates):
            raise ConfigError("rates and regularizer weights must be >= 0")
        if self.lambda2 > 0 and (self.E < 1 or self.k < 0):
            raise ConfigError("R_DA needs E >= 1 and k >= 0")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError("subset_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.wm_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")

    @property
    def frozen(self) -> bool:
        return self.lambda1 >= FROZEN_SENTINEL


@dataclass
class TrainReport:
    curves: dict[str, list[float]] = field(default_factory=dict)
    accuracies: dict[str, float] = field(default_factory=dict)
    w0_fingerprint: str = ""
    delta_max: float = 0.0
    max_output_deviation: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _fingerprint(arrays) -> str:
    return hashlib.sha256(nn.flat(arrays).tobytes()).hexdigest()


def snapshot(model: nn.MultiTaskModel) -> list[np.ndarray]:
    return [a.copy() for a in model.arrays(ANCHORED)]


def weight_penalty(model) -> float:
    """u(w) = 0.5 * ||w||^2 over backbone and primary head."""
    return 0.5 * float(sum((a * a).sum() for a in model.arrays(ANCHORED)))


def primary_objective(model, ds: LabeledDataset, lambda0: float) -> float:
    ce = nn.cross_entropy(nn.forward(model, ds.inputs).logits, ds.labels)
    return ce + lambda0 * weight_penalty(model)


def _check_finite(value, what):
    if not np.isfinite(value):
        raise TrainingError(f"{what} diverged (loss = {value})")


def train_primary(model: nn.MultiTaskModel, data: LabeledDataset, cfg: TrainConfig,
                  test: LabeledDataset | None = None):
    """Mini-batch SGD on the primary task; returns a trained copy with w0 set."""
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    params = model.arrays(ANCHORED)
    curve = []
    for _ in range(cfg.epochs_primary):
        order = rng.permutation(len(data))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, g = nn.backward(model, data.inputs[b], data.labels[b], "primary")
            _check_finite(loss, "primary training")
            nn.sgd_step(params, g.arrays(ANCHORED), cfg.lr_primary, cfg.lambda0)
        obj = primary_objective(model, data, cfg.lambda0)
        _check_finite(obj, "primary training")
        curve.append(obj)
    model.anchor = snapshot(model)
    report = TrainReport(curves={"primary": curve}, w0_fingerprint=_fingerprint(model.anchor))
    report.accuracies["primary_train"] = nn.accuracy(model, data.inputs, data.labels)
    if test is not None:
        report.accuracies["primary_test"] = nn.accuracy(model, test.inputs, test.labels)
    return model, report


def r_func(model: nn.MultiTaskModel, anchor=None) -> float:
    """||w - w0||^2 over backbone and primary head."""
    anchor = model.anchor if anchor is None else anchor
    if anchor is None:
        raise StateError("model has no w0 snapshot")
    cur = model.arrays(ANCHORED)
    if len(cur) != len(anchor) or any(a.shape != b.shape for a, b in zip(cur, anchor)):
        raise nn.StructuralError("parameter shapes differ from the w0 snapshot")
    return float(sum(((a - b) ** 2).sum() for a, b in zip(cur, anchor)))


def r_func_grad(model, anchor=None) -> list[np.ndarray]:
    anchor = model.anchor if anchor is None else anchor
    return [2.0 * (a - b) for a, b in zip(model.arrays(ANCHORED), anchor)]


def displacement(model, anchor=None) -> float:
    return float(np.sqrt(r_func(model, anchor)))


def simulate_tuning(model: nn.MultiTaskModel, data: LabeledDataset, cfg: TrainConfig,
                    seed) -> nn.MultiTaskModel:
    """k full-batch SGD steps on a random subset of ``data``; returns a copy."""
    tuned = model.copy()
    if cfg.k == 0:
        return tuned
    rng = np.random.default_rng(seed)
    size = max(1, int(round(cfg.subset_fraction * len(data))))
    idx = rng.choice(len(data), size=size, replace=False)
    x, y = data.inputs[idx], data.labels[idx]
    params = tuned.arrays(ANCHORED)
    for _ in range(cfg.k):
        _, g = nn.backward(tuned, x, y, "primary")
        nn.sgd_step(params, g.arrays(ANCHORED), cfg.lr_inner, cfg.lambda0)
    return tuned


def tuning_subset(data, cfg, seed):
    """The subset simulate_tuning draws for ``seed`` (for checks)."""
    rng = np.random.default_rng(seed)
    size = max(1, int(round(cfg.subset_fraction * len(data))))
    return data.subset(rng.choice(len(data), size=size, replace=False))


def r_da(model: nn.MultiTaskModel, data: LabeledDataset, wm_x, wm_y, cfg: TrainConfig,
         seeds) -> tuple[float, nn.Grads]:
    """Watermark loss averaged over simulated tunings, with first-order gradient."""
    if len(seeds) < 1:
        raise ConfigError("R_DA needs at least one tuning seed")
    total = 0.0
    acc = None
    for s in seeds:
        tuned = simulate_tuning(model, data, cfg, s)
        loss, g = nn.backward(tuned, wm_x, wm_y, "watermark")
        total += loss
        arrs = g.arrays()
        acc = arrs if acc is None else [a + b for a, b in zip(acc, arrs)]
    grads = nn.zero_grads(model)
    it = iter(a / len(seeds) for a in acc)
    for name in nn.GROUPS:
        setattr(grads, name, [(next(it), next(it)) for _ in getattr(grads, name)])
    return total / len(seeds), grads


def embed_watermark(model: nn.MultiTaskModel, data: LabeledDataset, wm_x, wm_y, cfg: TrainConfig,
                    test: LabeledDataset | None = None, on_epoch=None):
    """Minimise the watermark objective; returns a trained copy and report.

    ``on_epoch(epoch, model)`` is called after every epoch (1-based).
    With ``lambda1 >= FROZEN_SENTINEL`` only the watermark head moves.
    """
    if model.anchor is None:
        raise StateError("embed_watermark needs a w0 snapshot; run train_primary first")
    if model.c_wm is None:
        raise StateError("model has no watermark head")
    model = model.copy()
    wm_x = np.asarray(wm_x, dtype=np.float64)
    wm_y = np.asarray(wm_y, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed + 1)
    trainable = ("c_wm",) if cfg.frozen else nn.GROUPS
    params = model.arrays(trainable)
    curves = {k: [] for k in ("wm", "r_func", "r_da", "total")}
    use_func = cfg.lambda1 > 0 and not cfg.frozen
    for epoch in range(1, cfg.epochs_wm + 1):
        sums = dict.fromkeys(curves, 0.0)
        steps = 0
        order = rng.permutation(len(wm_y))
        for s in range(0, len(order), cfg.wm_batch_size):
            b = order[s:s + cfg.wm_batch_size]
            l_wm, g = nn.backward(model, wm_x[b], wm_y[b], "watermark")
            grads = g.arrays(trainable)
            rf = r_func(model) if use_func else 0.0
            if use_func:
                # grads are ordered backbone, c_p, c_wm; c_wm has no anchor
                for i, r in enumerate(r_func_grad(model)):
                    grads[i] = grads[i] + cfg.lambda1 * r
            rda = 0.0
            if cfg.lambda2 > 0:
                seeds = rng.integers(0, 2**63 - 1, size=cfg.E)
                rda, gd = r_da(model, data, wm_x, wm_y, cfg, list(seeds))
                grads = [a + cfg.lambda2 * d for a, d in zip(grads, gd.arrays(trainable))]
            total = l_wm + cfg.lambda1 * rf + cfg.lambda2 * rda
            _check_finite(total, "watermark embedding")
            nn.sgd_step(params, grads, cfg.lr_wm)
            for k_, v in (("wm", l_wm), ("r_func", rf), ("r_da", rda), ("total", total)):
                sums[k_] += v
            steps += 1
        for k_ in curves:
            curves[k_].append(sums[k_] / max(steps, 1))
        if on_epoch is not None:
            on_epoch(epoch, model)
    report = TrainReport(curves=curves, w0_fingerprint=_fingerprint(model.anchor))
    report.accuracies["wm"] = nn.accuracy(model, wm_x, wm_y, "watermark")
    report.delta_max = displacement(model)
    if test is not None:
        report.accuracies["primary_test"] = nn.accuracy(model, test.inputs, test.labels)
        report.max_output_deviation = output_deviation(model, clean_model(model), test.inputs)
    return model, report


def clean_model(model: nn.MultiTaskModel) -> nn.MultiTaskModel:
    """Backbone + c_p restored to the w0 snapshot."""
    out = model.published()
    for a, b in zip(out.arrays(ANCHORED), model.anchor):
        a[...] = b
    return out


def output_deviation(a, b, x) -> float:
    """Max absolute difference of primary-head probabilities."""
    pa = nn.softmax(nn.forward(a, x).logits)
    pb = nn.softmax(nn.forward(b, x).logits)
    return float(np.abs(pa - pb).max()) if len(x) else 0.0
