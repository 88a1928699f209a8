"""Source pretraining and pseudo-label adaptation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .loss import (EmptyMaskError, RectifiedLossConfig, cross_entropy, rectified_loss_terms)
from .model import ArchConfig, TwoHeadSegNet, forward_logits, init_params
from .pseudo import PseudoLabelSet
from .synthdata import AugmentPolicy, LabeledImage, augment
from .tensor import SGD

log = logging.getLogger(__name__)

LOSS_MODES = ("plain_ce", "rectified", "thresholded")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # architecture
    widths: Tuple[int, ...] = (16, 16, 32, 32)
    aux_tap: int = 2
    dropout_rate: float = 0.1
    num_classes: int = 5
    # data
    shift_preset: str = "default"
    n_source: int = 400
    n_source_test: int = 100
    n_target: int = 400
    n_target_test: int = 100
    # schedule
    source_iters: int = 3000
    adapt_iters: int = 2000
    early_stop: float = 0.5
    batch_size: int = 8
    source_lr: float = 0.01
    base_lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    source_aux_weight: float = 0.5
    # augmentation
    flip_p: float = 0.5
    scale_min: float = 0.8
    scale_max: float = 1.2
    crop_h: int = 24
    crop_w: int = 24
    # adaptation objective
    loss: str = "rectified"
    tau: float = 0.0
    distance: str = "kl_forward"
    variance_grad: str = "detached"
    aux_ce_weight: float = 0.0
    pseudo_source: str = "strong"
    weak_fraction: float = 0.5
    # inference
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not 0.0 < self.early_stop <= 1.0:
            raise ValueError("early_stop must lie in (0, 1]")
        for name in ("n_source", "n_source_test", "n_target", "n_target_test", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("source_iters", "adapt_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss!r}; expected one of {LOSS_MODES}")
        if self.pseudo_source not in ("strong", "weak"):
            raise ValueError("pseudo_source must be 'strong' or 'weak'")
        if not 0.0 < self.weak_fraction < 1.0:
            raise ValueError("weak_fraction must lie in (0, 1)")
        self.rect_cfg  # validates distance/variance_grad

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(widths=self.widths, aux_tap=self.aux_tap, dropout_rate=self.dropout_rate,
                          num_classes=self.num_classes)

    @property
    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.flip_p, (self.scale_min, self.scale_max), (self.crop_h, self.crop_w))

    @property
    def rect_cfg(self) -> RectifiedLossConfig:
        return RectifiedLossConfig(self.distance, self.variance_grad, self.aux_ce_weight)

    @property
    def adapt_steps(self) -> int:
        return int(round(self.early_stop * self.adapt_iters))

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


@dataclass
class History:
    rows: List[Tuple[int, float, float, float, float]] = field(default_factory=list)
    skipped: int = 0

    def add(self, it, lr, loss, ce_term, var_term):
        self.rows.append((it, lr, loss, ce_term, var_term))

    @property
    def loss(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss", "ce_term", "var_term"])
            for it, lr, loss, ce, var in self.rows:
                w.writerow([it, repr(lr), repr(loss), repr(ce), repr(var)])


def poly_lr(it: int, total: int, base: float, power: float = 0.9) -> float:
    """base * (1 - it/total)^power."""
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    return base * (1.0 - it / total) ** power


def _streams(seed: int, tag: int):
    """Independent (batch sampling, dropout) generators for one training stage."""
    ss = np.random.SeedSequence([seed, tag])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _sample_batch(rng, items: Sequence[LabeledImage], cfg: ExperimentConfig):
    idx = rng.integers(0, len(items), size=cfg.batch_size)
    policy = cfg.augment_policy
    crops = [augment(items[i], rng, policy) for i in idx]
    return (np.stack([c.image for c in crops]), np.stack([c.labels for c in crops]),
            ~np.stack([c.ignore for c in crops]))


def _check(loss_value: float, stage: str, it: int):
    if not np.isfinite(loss_value):
        raise TrainingDiverged(f"{stage}: loss became non-finite at iteration {it}")


def pretrain_source(source: Sequence[LabeledImage], cfg: ExperimentConfig,
                    snapshot_at: Sequence[int] = ()) -> Tuple[TwoHeadSegNet, History, Dict[int, TwoHeadSegNet]]:
    """Supervised training of both heads on labelled source data.

    Returns the trained net, its loss history and clones taken after the
    iteration counts listed in snapshot_at.
    """
    net = init_params(cfg.seed, cfg.arch)
    hist = History()
    snaps: Dict[int, TwoHeadSegNet] = {}
    if 0 in snapshot_at:
        snaps[0] = net.clone()
    if cfg.source_iters == 0:
        return net, hist, snaps
    opt = SGD(net.parameters(), cfg.source_lr, cfg.momentum, cfg.weight_decay)
    batch_rng, drop_rng = _streams(cfg.seed, 1)
    for it in range(cfg.source_iters):
        lr = poly_lr(it, cfg.source_iters, cfg.source_lr, cfg.poly_power)
        x, y, valid = _sample_batch(batch_rng, source, cfg)
        try:
            primary, aux = forward_logits(net, x, "train", drop_rng)
            ce_p = cross_entropy(primary, y, valid)
            ce_a = cross_entropy(aux, y, valid)
            loss = ce_p + ce_a * cfg.source_aux_weight
            loss.backward()
        except FloatingPointError as exc:
            raise TrainingDiverged(f"pretrain_source: {exc} at iteration {it}") from exc
        _check(loss.item(), "pretrain_source", it)
        opt.step(lr)
        hist.add(it, lr, loss.item(), ce_p.item(), ce_a.item())
        if it + 1 in snapshot_at:
            snaps[it + 1] = net.clone()
    return net, hist, snaps


def adapt(net_s: TwoHeadSegNet, target_images: np.ndarray, pl: PseudoLabelSet, cfg: ExperimentConfig,
          force_equal_heads: bool = False) -> Tuple[TwoHeadSegNet, History]:
    """Fine-tune a copy of net_s on unlabelled target images with frozen pseudo labels.

    Only target images and pseudo labels are visible here. With
    force_equal_heads the auxiliary output is replaced by the primary one,
    so the rectified objective reduces to plain cross-entropy.
    """
    if len(target_images) != len(pl):
        raise ValueError("one pseudo-label map per target image is required")
    net = net_s.clone()
    hist = History()
    steps = cfg.adapt_steps
    if cfg.adapt_iters == 0 or steps == 0:
        return net, hist
    items = [LabeledImage(target_images[i], pl.labels[i], ~pl.valid[i]) for i in range(len(pl))]
    rect = cfg.rect_cfg
    aux_trained = (cfg.loss == "rectified" and not force_equal_heads) or rect.aux_ce_weight > 0
    params = [net.params[n] for n in net.param_names() if aux_trained or not n.startswith("aux.")]
    opt = SGD(params, cfg.base_lr, cfg.momentum, cfg.weight_decay)
    batch_rng, drop_rng = _streams(cfg.seed, 2)
    for it in range(steps):
        lr = poly_lr(it, cfg.adapt_iters, cfg.base_lr, cfg.poly_power)
        x, y, valid = _sample_batch(batch_rng, items, cfg)
        try:
            primary, aux = forward_logits(net, x, "train", drop_rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"adapt: {exc} at iteration {it}") from exc
        if force_equal_heads:
            aux = primary
        try:
            if cfg.loss == "rectified":
                loss, ce_term, var_term = rectified_loss_terms(primary, aux, y, valid, rect)
            else:
                loss = cross_entropy(primary, y, valid)
                if rect.aux_ce_weight > 0:
                    loss = loss + cross_entropy(aux, y, valid) * rect.aux_ce_weight
                ce_term, var_term = loss.item(), 0.0
        except EmptyMaskError:
            hist.skipped += 1
            continue
        _check(loss.item(), "adapt", it)
        try:
            loss.backward()
        except FloatingPointError as exc:
            raise TrainingDiverged(f"adapt: {exc} at iteration {it}") from exc
        opt.step(lr)
        hist.add(it, lr, loss.item(), ce_term, var_term)
    if hist.skipped == steps:
        raise TrainingDiverged("adapt: every batch had an empty valid mask; lower tau")
    if hist.skipped:
        log.info("adapt skipped %d/%d batches with no valid pixels", hist.skipped, steps)
    return net, hist


def config_items(cfg: ExperimentConfig) -> List[Tuple[str, object]]:
    return [(f.name, getattr(cfg, f.name)) for f in fields(cfg)]
