"""Adversary toolkit: fine-tuning variants, pruning, fine-pruning, overwriting, forging.

Attacks work on copies and never read or modify the host's watermark head;
evaluation against the host head happens outside the attack itself.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import AttackError, ConfigError
from .keys import DomainEncoder, WatermarkKey, build_wm_dataset
from .training import TrainConfig, embed_watermark, snapshot

KINDS = ("ft", "ftll", "rtll", "np", "fp", "overwrite", "forge")


@dataclass
class AttackConfig:
    kind: str = "ft"
    lr: float = 0.005
    epochs: int = 20
    rho: float = 0.2
    batch_size: int = 32
    rho_grid: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(21))
    # overwrite / forge
    adversary_secret: str = "adversary"
    epoch_grid: tuple[int, ...] = (10, 30, 50)
    lambda1: float = 0.01
    lambda2: float = 0.0
    lr_wm: float = 0.05
    forge_iters: int = 5000
    forge_lr: float = 0.5
    forge_n: int = 64
    forge_taps: tuple[int, ...] | None = (0, 1)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.rho <= 1:
            raise ConfigError("rho must lie in [0, 1]")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        self.rho_grid = tuple(float(r) for r in self.rho_grid)
        self.epoch_grid = tuple(int(e) for e in self.epoch_grid)
        if self.forge_taps is not None:
            self.forge_taps = tuple(int(t) for t in self.forge_taps)
        if list(self.rho_grid) != sorted(self.rho_grid):
            raise ConfigError("rho_grid must be ascending")


@dataclass
class AttackReport:
    kind: str
    primary_before: float | None = None
    primary_after: float | None = None
    wm_before: float | None = None
    wm_after: float | None = None
    sweep: list[tuple[float, float, float]] = field(default_factory=list)
    rho_break: float | None = None
    decline_at_break: float | None = None
    adversary_wm: float | None = None
    fluctuation: list[tuple[int, float, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def sweep_csv(self) -> str:
        rows = ["rho,primary_acc,wm_acc"]
        rows += [f"{r:.6g},{p:.6f},{w:.6f}" for r, p, w in self.sweep]
        return "\n".join(rows) + "\n"

    def fluctuation_csv(self) -> str:
        rows = ["epochs,host_wm_acc,fluctuation"]
        rows += [f"{e},{a:.6f},{f:.6f}" for e, a, f in self.fluctuation]
        return "\n".join(rows) + "\n"


def _sgd_primary(model, data, lr, epochs, batch_size, groups, rng, masks=None):
    params = model.arrays(groups)
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), batch_size):
            b = order[s:s + batch_size]
            loss, g = nn.backward(model, data.inputs[b], data.labels[b], "primary")
            if not np.isfinite(loss):
                raise AttackError(f"fine-tuning diverged (loss = {loss})")
            nn.sgd_step(params, g.arrays(groups), lr)
            if masks is not None:
                for layer, mask in zip(model.backbone, masks):
                    layer.W[~mask] = 0.0
    return model


def fine_tune(model: nn.MultiTaskModel, data: LabeledDataset, cfg: AttackConfig) -> nn.MultiTaskModel:
    """``ft`` tunes backbone + c_p, ``ftll`` only c_p, ``rtll`` re-initialises c_p first."""
    out = model.published()
    rng = np.random.default_rng(cfg.seed)
    kind = cfg.kind if cfg.kind in ("ft", "ftll", "rtll") else "ft"
    if kind == "rtll":
        init_rng = np.random.default_rng([cfg.seed, 1])
        out.c_p = [nn.init_layer(nn.LayerSpec(l.in_dim, l.out_dim, l.activation), init_rng)
                   for l in out.c_p]
    groups = ("backbone", "c_p") if kind == "ft" else ("c_p",)
    if cfg.lr == 0 or cfg.epochs == 0:
        return out
    return _sgd_primary(out, data, cfg.lr, cfg.epochs, cfg.batch_size, groups, rng)


def neuron_prune(model: nn.MultiTaskModel, rho: float) -> nn.MultiTaskModel:
    return nn.apply_prune_mask(model.published(), rho)[0]


def fine_prune(model: nn.MultiTaskModel, data: LabeledDataset, cfg: AttackConfig) -> nn.MultiTaskModel:
    pruned, masks = nn.apply_prune_mask(model.published(), cfg.rho)
    if cfg.lr == 0 or cfg.epochs == 0:
        return pruned
    rng = np.random.default_rng(cfg.seed)
    return _sgd_primary(pruned, data, cfg.lr, cfg.epochs, cfg.batch_size, ("backbone", "c_p"), rng, masks)


def wm_accuracy(model, head: nn.WatermarkHead, wm_x, wm_y) -> float:
    return nn.accuracy(model, wm_x, wm_y, "watermark", head)


def evaluate_attack(kind, before, after, head, wm_x, wm_y, test: LabeledDataset) -> AttackReport:
    """Primary and watermark accuracy of an attacked model vs. the original."""
    return AttackReport(
        kind=kind,
        primary_before=nn.accuracy(before, test.inputs, test.labels),
        primary_after=nn.accuracy(after, test.inputs, test.labels),
        wm_before=wm_accuracy(before, head, wm_x, wm_y),
        wm_after=wm_accuracy(after, head, wm_x, wm_y))


def prune_sweep(model, head, wm_x, wm_y, test: LabeledDataset, rho_grid) -> list[tuple[float, float, float]]:
    rows = []
    for rho in rho_grid:
        pruned = neuron_prune(model, rho)
        rows.append((float(rho), nn.accuracy(pruned, test.inputs, test.labels),
                     wm_accuracy(pruned, head, wm_x, wm_y)))
    return rows


def prune_to_break(model, key: WatermarkKey, head: nn.WatermarkHead, gamma: float, rho_grid,
                   test: LabeledDataset, encoder: DomainEncoder | None = None) -> AttackReport:
    """Smallest grid ``rho`` at which watermark accuracy drops below ``gamma``.

    ``decline_at_break`` is unpruned primary accuracy minus the accuracy at
    that ``rho``; both stay ``None`` if the watermark survives the whole grid.
    """
    grid = [float(r) for r in rho_grid]
    if grid != sorted(grid):
        raise ConfigError("rho grid must be ascending")
    enc = encoder or DomainEncoder.vector(model.input_dim, key.m)
    ds = build_wm_dataset(key, enc)
    rows = prune_sweep(model, head, ds.inputs, ds.labels, test, grid)
    base = nn.accuracy(model, test.inputs, test.labels)
    report = AttackReport(kind="np", primary_before=base,
                          wm_before=wm_accuracy(model, head, ds.inputs, ds.labels), sweep=rows)
    for rho, p_acc, w_acc in rows:
        if w_acc < gamma:
            report.rho_break = rho
            report.decline_at_break = base - p_acc
            report.primary_after = p_acc
            report.wm_after = w_acc
            break
    return report


def overwrite(model: nn.MultiTaskModel, adversary_key: WatermarkKey, data: LabeledDataset,
              cfg: AttackConfig, template: nn.WatermarkHead, host_probe=None,
              encoder: DomainEncoder | None = None):
    """Embed the adversary's own watermark into a stolen model.

    The adversary anchors R_func at the stolen weights and trains a fresh
    head built from ``template``'s shape.  ``host_probe(model) -> accuracy``
    is evaluated at 0 epochs and at every point of ``cfg.epoch_grid``; the
    attack itself never sees the host head.
    Returns ``(stolen model with adversary head, adversary head, report)``.
    """
    stolen = model.published()
    stolen.anchor = snapshot(stolen)
    adv_head = nn.fresh_head_like(template, [cfg.seed, 7])
    stolen = stolen.with_head(adv_head)
    enc = encoder or DomainEncoder.vector(model.input_dim, adversary_key.m)
    ds = build_wm_dataset(adversary_key, enc)
    grid = sorted(set(cfg.epoch_grid))
    tcfg = TrainConfig(lambda1=cfg.lambda1, lambda2=cfg.lambda2, lr_wm=cfg.lr_wm,
                       lr_primary=cfg.lr, epochs_wm=max(grid, default=0), seed=cfg.seed)
    report = AttackReport(kind="overwrite")
    base = host_probe(stolen) if host_probe else None
    report.wm_before = base
    if host_probe:
        report.fluctuation.append((0, base, 0.0))

    def probe(epoch, m):
        if host_probe and epoch in grid:
            acc = host_probe(m)
            report.fluctuation.append((epoch, acc, abs(acc - base)))

    if grid:
        stolen, _ = embed_watermark(stolen, data, ds.inputs, ds.labels, tcfg, on_epoch=probe)
    adv_head = stolen.c_wm
    report.adversary_wm = wm_accuracy(stolen, adv_head, ds.inputs, ds.labels)
    if host_probe:
        report.wm_after = report.fluctuation[-1][1]
    return stolen, adv_head, report


def forge(model: nn.MultiTaskModel, key: WatermarkKey, taps, iters: int = 5000, lr: float = 0.5,
          encoder: DomainEncoder | None = None):
    """Fit a linear watermark head for ``key`` on frozen tapped features.

    Starts from the least-squares fit, then runs full-batch logistic descent
    until every point is classified or ``iters`` runs out.  ``model`` is never modified.  Returns
    ``(head, accuracy, separated)``.
    """
    published = model.published()
    enc = encoder or DomainEncoder.vector(model.input_dim, key.m)
    ds = build_wm_dataset(key, enc)
    width = sum(published.backbone[t].out_dim for t in taps)
    head = nn.WatermarkHead([nn.Layer(np.zeros((2, width)), np.zeros(2), "identity")], taps)
    if key.n > width + 1:
        raise AttackError(f"forging needs N <= L + 1, got N={key.n}, L={width}")
    feats = nn.forward(published, ds.inputs, "watermark", head).head_input
    y = ds.labels
    sign = 2.0 * y - 1.0
    # scale-normalise features so one step size fits all models
    scale = max(float(np.abs(feats).max()), 1e-12)
    f = feats / scale
    # minimum-norm least squares onto the +-1 targets interpolates them exactly
    # when the points are in general position; logistic descent covers the rest
    sol = np.linalg.lstsq(np.hstack([f, np.ones((len(y), 1))]), sign, rcond=None)[0]
    w, b = sol[:-1].copy(), float(sol[-1])
    separated = False
    for _ in range(iters):
        margin = sign * (f @ w + b)
        if (margin > 0).all():
            separated = True
            break
        # d/dw of mean log(1 + exp(-margin))
        coef = -sign / (1.0 + np.exp(np.clip(margin, -50, 50)))
        w -= lr * (f.T @ coef) / len(y)
        b -= lr * coef.mean()
    # two-logit head: logit1 - logit0 = (f @ w + b)
    W = np.zeros((2, width))
    W[1] = w / scale
    head = nn.WatermarkHead([nn.Layer(W, np.array([0.0, b]), "identity")], taps)
    acc = wm_accuracy(published, head, ds.inputs, ds.labels)
    return head, acc, separated
