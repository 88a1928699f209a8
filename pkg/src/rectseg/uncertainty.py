"""Per-pixel uncertainty estimators and the right/wrong certainty gap.

All estimators take probability maps shaped [..., H, W, C] and return a
VarianceMap over [..., H, W]. Squared-difference estimators sum over classes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import TwoHeadSegNet, forward
from .synthdata import write_pgm

PROB_FLOOR = 1e-8
KINDS = ("kl_forward", "kl_reversed", "mse", "naive", "true", "mc_dropout")


@dataclass(frozen=True)
class VarianceMap:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variance kind {self.kind!r}")
        finite = self.values[~np.isnan(self.values)]
        if finite.size and finite.min() < 0:
            raise ValueError("variance values must be nonnegative")


@dataclass(frozen=True)
class CertaintyMap:
    values: np.ndarray
    kind: str


def _check_pair(P, Q):
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"probability maps differ in shape: {P.shape} vs {Q.shape}")
    return P, Q


def _kl(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    logp = np.log(np.clip(P, PROB_FLOOR, 1.0))
    logq = np.log(np.clip(Q, PROB_FLOOR, 1.0))
    return np.maximum((P * (logp - logq)).sum(axis=-1), 0.0)


def kl_variance(P, P_aux, direction: str = "forward") -> VarianceMap:
    """KL(P || P_aux) per pixel, or KL(P_aux || P) for direction='reversed'."""
    P, Q = _check_pair(P, P_aux)
    if direction == "forward":
        return VarianceMap(_kl(P, Q), "kl_forward")
    if direction == "reversed":
        return VarianceMap(_kl(Q, P), "kl_reversed")
    raise ValueError(f"unknown KL direction {direction!r}")


def mse_variance(P, P_aux) -> VarianceMap:
    P, Q = _check_pair(P, P_aux)
    return VarianceMap(((P - Q) ** 2).sum(axis=-1), "mse")


def _onehot_sq(P: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != P.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} != map shape {P.shape[:-1]}")
    onehot = np.eye(P.shape[-1])[labels]
    return ((P - onehot) ** 2).sum(axis=-1)


def naive_variance(P, pseudo_labels, valid: Optional[np.ndarray] = None) -> VarianceMap:
    """Squared distance to the one-hot pseudo label; NaN where the label is invalid."""
    P = np.asarray(P, dtype=np.float64)
    v = _onehot_sq(P, pseudo_labels)
    if valid is not None:
        v = np.where(np.asarray(valid, dtype=bool), v, np.nan)
    return VarianceMap(v, "naive")


def true_variance(P, gt) -> VarianceMap:
    """Squared distance to the one-hot ground truth (synthetic data only)."""
    P = np.asarray(P, dtype=np.float64)
    return VarianceMap(_onehot_sq(P, gt), "true")


def mc_dropout_variance(net: TwoHeadSegNet, x: np.ndarray, rate: float, T: int = 10,
                        rng: Optional[np.random.Generator] = None) -> VarianceMap:
    """Mean over T dropout-active passes of KL(P_eval || P_drop), primary head only."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if T < 1:
        raise ValueError("need at least one stochastic pass")
    P, _ = forward(net, x, mode="eval")
    if rate == 0.0:
        return VarianceMap(np.zeros(P.shape[:-1]), "mc_dropout")
    if rng is None:
        rng = np.random.default_rng(0)
    acc = np.zeros(P.shape[:-1])
    for _ in range(T):
        P_drop, _ = forward(net, x, mode="train", rng=rng, dropout_rate=rate)
        acc += _kl(P, P_drop)
    return VarianceMap(acc / T, "mc_dropout")


def certainty(vm: VarianceMap) -> CertaintyMap:
    """exp(-variance), in (0, 1]."""
    return CertaintyMap(np.exp(-vm.values), vm.kind)


def uncertainty_gap(cm: CertaintyMap, pred: np.ndarray, gt: np.ndarray,
                    confidence: Optional[np.ndarray] = None,
                    confidence_floor: Optional[float] = None,
                    ignore: Optional[np.ndarray] = None) -> dict:
    """Mean certainty on right vs wrong predictions; None where a side is empty."""
    values = np.asarray(cm.values)
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if not (values.shape == pred.shape == gt.shape):
        raise ValueError("certainty map, prediction and truth must share shape")
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    if confidence_floor is not None:
        if confidence is None:
            raise ValueError("confidence_floor needs a confidence map")
        keep &= np.asarray(confidence) > confidence_floor
    right = keep & (pred == gt)
    wrong = keep & (pred != gt)
    r = float(values[right].mean()) if right.any() else None
    w = float(values[wrong].mean()) if wrong.any() else None
    return {
        "right_certainty": r,
        "wrong_certainty": w,
        "gap": None if r is None or w is None else r - w,
        "n_right": int(right.sum()),
        "n_wrong": int(wrong.sum()),
    }


def export_heatmap(path, values: np.ndarray) -> None:
    """16-bit PGM plus a '<name>.range.txt' sidecar with min/max for de-quantisation."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.nanmin(values)), float(np.nanmax(values))
    span = hi - lo
    q = np.zeros(values.shape) if span == 0 else (values - lo) / span * 65535.0
    write_pgm(path, np.round(np.nan_to_num(q)), maxval=65535)
    Path(str(path) + ".range.txt").write_text(f"min={lo!r}\nmax={hi!r}\n")


def load_heatmap(path) -> np.ndarray:
    from .synthdata import read_pgm

    q, _ = read_pgm(path)
    meta = dict(line.split("=", 1) for line in Path(str(path) + ".range.txt").read_text().splitlines())
    lo, hi = float(meta["min"]), float(meta["max"])
    return lo + q / 65535.0 * (hi - lo)
