"""Pseudo labels from a source-trained model and the fixed-threshold baseline."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List

import numpy as np

from .model import TwoHeadSegNet, forward
from .synthdata import read_pgm, write_pgm


@dataclass(frozen=True)
class PseudoLabelSet:
    labels: np.ndarray      # [N, H, W] int64
    confidence: np.ndarray  # [N, H, W] max primary-head probability
    valid: np.ndarray       # [N, H, W] bool
    provenance: str = ""
    tau_history: tuple = ()

    def __post_init__(self):
        if not (self.labels.shape == self.confidence.shape == self.valid.shape):
            raise ValueError("labels, confidence and valid mask must share shape")
        for arr in (self.labels, self.confidence, self.valid):
            arr.setflags(write=False)

    def __len__(self):
        return self.labels.shape[0]

    def fingerprint(self) -> bytes:
        return self.labels.tobytes() + self.confidence.tobytes() + self.valid.tobytes()


def labels_from_probs(P: np.ndarray):
    """(argmax, max) per pixel; argmax breaks ties toward the lowest class."""
    return np.argmax(P, axis=-1), np.max(P, axis=-1)


def generate_pseudo_labels(net_s: TwoHeadSegNet, images: np.ndarray, provenance: str = "",
                           batch: int = 50) -> PseudoLabelSet:
    labels, conf = [], []
    for i in range(0, len(images), batch):
        P, _ = forward(net_s, images[i:i + batch], mode="eval")
        lab, c = labels_from_probs(P)
        labels.append(lab)
        conf.append(c)
    labels = np.concatenate(labels).astype(np.int64)
    conf = np.concatenate(conf)
    return PseudoLabelSet(labels, conf, np.ones(labels.shape, dtype=bool), provenance)


def threshold_filter(pl: PseudoLabelSet, tau: float) -> PseudoLabelSet:
    """Keep only pixels whose confidence is strictly above tau."""
    valid = pl.valid & (pl.confidence > tau)
    return replace(pl, valid=valid, tau_history=pl.tau_history + (float(tau),))


def pseudo_quality_report(pl: PseudoLabelSet, gt: np.ndarray, num_classes: int) -> dict:
    gt = np.asarray(gt)
    if gt.shape != pl.labels.shape:
        raise ValueError(f"truth shape {gt.shape} != pseudo-label shape {pl.labels.shape}")
    v = pl.valid
    correct = (pl.labels == gt) & v
    n_valid = int(v.sum())
    per_class: List = []
    for c in range(num_classes):
        sel = v & (gt == c)
        per_class.append(float(correct[sel].mean()) if sel.any() else None)
    return {
        "accuracy": float(correct.sum() / n_valid) if n_valid else None,
        "per_class_accuracy": per_class,
        "fraction_valid": float(n_valid / v.size),
    }


# -- on-disk layout: lab/conf/mask PGMs per image plus manifest.txt ------------------


def save_pseudo_labels(pl: PseudoLabelSet, directory) -> List[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(len(pl)):
        trio = (f"pl_{i:04d}.pgm", f"conf_{i:04d}.pgm", f"valid_{i:04d}.pgm")
        write_pgm(d / trio[0], pl.labels[i])
        write_pgm(d / trio[1], np.round(pl.confidence[i] * 65535), maxval=65535)
        write_pgm(d / trio[2], pl.valid[i].astype(np.uint8))
        names += trio
    lines = [f"provenance={pl.provenance}", f"n={len(pl)}",
             f"tau_history={json.dumps(list(pl.tau_history))}"]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return names + ["manifest.txt"]


def load_pseudo_labels(directory) -> PseudoLabelSet:
    """Confidence comes back quantised to 1/65535."""
    d = Path(directory)
    meta = dict(line.split("=", 1) for line in (d / "manifest.txt").read_text().splitlines() if "=" in line)
    n = int(meta["n"])
    labels, conf, valid = [], [], []
    for i in range(n):
        labels.append(read_pgm(d / f"pl_{i:04d}.pgm")[0])
        conf.append(read_pgm(d / f"conf_{i:04d}.pgm")[0] / 65535.0)
        valid.append(read_pgm(d / f"valid_{i:04d}.pgm")[0].astype(bool))
    return PseudoLabelSet(np.stack(labels), np.stack(conf), np.stack(valid),
                          meta.get("provenance", ""), tuple(json.loads(meta.get("tau_history", "[]"))))
