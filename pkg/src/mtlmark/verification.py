"""Ownership test, Chernoff threshold bounds and null-accuracy calibration."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DomainError, StructuralError, VerificationError
from .keys import DomainEncoder, WatermarkKey, build_wm_dataset

GAMMA_GRID = tuple(round(0.05 * i, 2) for i in range(11, 21))  # 0.55 .. 1.0


def threshold_count(gamma: float, n: int) -> int:
    """ceil(gamma * n), robust to float noise such as 0.7 * 20 = 14.000000000000002."""
    return math.ceil(round(gamma * n, 9))


@dataclass(frozen=True)
class VerifyReport:
    n_correct: int
    n: int
    gamma: float
    passed: bool
    key_fingerprint: str
    model_hash: str

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n if self.n else 0.0

    @property
    def threshold(self) -> int:
        return threshold_count(self.gamma, self.n)

    def consistent(self) -> bool:
        return self.passed == (self.n_correct >= self.threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy"] = self.accuracy
        d["threshold"] = self.threshold
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def decide(n_correct: int, n: int, gamma: float) -> bool:
    return n_correct >= threshold_count(gamma, n)


def verify(model: nn.MultiTaskModel, key: WatermarkKey, c_wm: nn.WatermarkHead, gamma: float,
           encoder: DomainEncoder | None = None) -> VerifyReport:
    """Pass iff backbone + ``c_wm`` classifies at least ceil(gamma*N) key points."""
    if not 0.5 < gamma <= 1:
        raise DomainError(f"gamma must lie in (0.5, 1], got {gamma}")
    published = model.published()
    try:
        nn.check_head_fits(published, c_wm)
    except StructuralError as exc:
        raise VerificationError(str(exc)) from exc
    enc = encoder or DomainEncoder.vector(published.input_dim, key.m)
    if enc.size != published.input_dim:
        raise VerificationError(f"encoder emits {enc.size} values, model takes {published.input_dim}")
    ds = build_wm_dataset(key, enc)
    pred = nn.predict(published, ds.inputs, "watermark", c_wm)
    n_correct = int((pred == ds.labels).sum())
    return VerifyReport(n_correct, key.n, gamma, decide(n_correct, key.n, gamma),
                        key.fingerprint.hex(), nn.model_hash(published).hex())


# ---- Chernoff machinery ----------------------------------------------------

def log_chernoff_bound(p: float, gamma: float, n: int, lam: float) -> float:
    if not 0 < p < 1:
        raise DomainError(f"p must lie in (0, 1), got {p}")
    if not p < gamma <= 1:
        raise DomainError(f"gamma must lie in (p, 1], got {gamma} with p={p}")
    if lam < 0 or n < 0:
        raise DomainError("lambda and N must be non-negative")
    if math.isinf(lam):
        # limit lam -> inf: finite only when gamma == 1, where it equals N log p
        return n * math.log(p) if gamma == 1 else -math.inf
    # log(1 - p + p e^lam) = lam + log(p + (1 - p) e^-lam), stable for large lam
    log_num = lam + math.log(p + (1 - p) * math.exp(-lam))
    return n * (log_num - gamma * lam)


def chernoff_bound(p: float, gamma: float, n: int, lam: float) -> float:
    """((1 - p + p e^lam) / e^(gamma lam))^N, evaluated in log-space.

    Loose choices of lam can push the (still valid) bound past float range;
    those return inf.
    """
    log_b = log_chernoff_bound(p, gamma, n, lam)
    return math.exp(log_b) if log_b < 709.0 else math.inf


def optimize_lambda(p: float, gamma: float) -> float:
    """Closed-form minimiser ln(gamma (1-p) / (p (1-gamma))); +inf at gamma = 1."""
    if not 0 < p < 1:
        raise DomainError(f"p must lie in (0, 1), got {p}")
    if not p < gamma <= 1:
        raise DomainError(f"need p < gamma <= 1, got p={p}, gamma={gamma}")
    if gamma == 1:
        return math.inf
    return math.log(gamma * (1 - p) / (p * (1 - gamma)))


def best_bound(p: float, gamma: float, n: int) -> float:
    return chernoff_bound(p, gamma, n, optimize_lambda(p, gamma))


def binomial_tail(p: float, gamma: float, n: int) -> float:
    """Exact Pr[X >= ceil(gamma n)] for X ~ Binomial(n, p)."""
    k0 = threshold_count(gamma, n)
    return sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(k0, n + 1))


# ---- null calibration --------------------------------------------------------

@dataclass
class GammaCalibration:
    samples: list[float]
    quantiles: dict[str, float]
    p_max: float
    gamma: float | None
    certified_bound: float | None
    n: int
    target: float
    mode: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def quantiles_csv(self) -> str:
        rows = ["quantile,accuracy"] + [f"{q},{v:.6f}" for q, v in self.quantiles.items()]
        return "\n".join(rows) + "\n"

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.samples, bins=bins, range=(0.0, 1.0))

    def histogram_csv(self, bins: int = 20) -> str:
        counts, edges = self.histogram(bins)
        rows = ["bin_lo,bin_hi,count"]
        rows += [f"{edges[i]:.4f},{edges[i + 1]:.4f},{int(c)}" for i, c in enumerate(counts)]
        return "\n".join(rows) + "\n"


def recommend_gamma(p_max: float, n: int, target: float = 1e-6, grid=GAMMA_GRID):
    """Smallest grid gamma > p_max whose optimised bound is <= target."""
    for g in grid:
        if g > p_max and best_bound(p_max, g, n) <= target:
            return g, best_bound(p_max, g, n)
    return None, None


def null_secret(seed: int, i: int) -> bytes:
    return f"null-{seed}-{i}".encode()


def calibrate_null(model: nn.MultiTaskModel, c_wm: nn.WatermarkHead, trials: int, seed: int,
                   n: int, m: int | None = None, target: float = 1e-6, mode: str = "foreign",
                   encoder: DomainEncoder | None = None) -> GammaCalibration:
    """Watermark-branch accuracy on ``trials`` fresh keys.

    ``mode="foreign"`` tests the supplied head; ``mode="random"`` tests a
    freshly initialised head of the same shape per trial.
    """
    if trials < 30:
        raise ConfigError(f"calibration needs at least 30 trials, got {trials}")
    if mode not in ("foreign", "random"):
        raise ConfigError(f"unknown calibration mode {mode!r}")
    published = model.published()
    samples = []
    for i in range(trials):
        key = WatermarkKey(null_secret(seed, i), n, m)
        enc = encoder or DomainEncoder.vector(published.input_dim, key.m)
        ds = build_wm_dataset(key, enc)
        head = c_wm if mode == "foreign" else nn.fresh_head_like(c_wm, [seed, i])
        pred = nn.predict(published, ds.inputs, "watermark", head)
        samples.append(float((pred == ds.labels).mean()))
    qs = np.quantile(samples, [0.5, 0.95, 0.999])
    quantiles = {"0.5": float(qs[0]), "0.95": float(qs[1]), "0.999": float(qs[2])}
    p_max = max(float(qs[2]), 0.5)
    gamma, bound = recommend_gamma(p_max, n, target) if p_max < 1 else (None, None)
    return GammaCalibration(samples, quantiles, p_max, gamma, bound, n, target, mode)
