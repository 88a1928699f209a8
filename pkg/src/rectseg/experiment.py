"""End-to-end orchestration shared by the CLI and the acceptance suite.

A run is: generate domains, pretrain on source, pseudo-label the target
training images with the (strong or weak) source model, adapt, evaluate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import synthdata as sd
from .evaluation import IoUReport, evaluate_checkpoint
from .model import TwoHeadSegNet, forward
from .pseudo import PseudoLabelSet, generate_pseudo_labels, pseudo_quality_report, threshold_filter
from .train import ExperimentConfig, History, adapt, pretrain_source
from .uncertainty import certainty, kl_variance, uncertainty_gap

log = logging.getLogger(__name__)

SPLITS = ("source", "source_test", "target", "target_test")
_SPLIT_TAGS = {name: 11 + i for i, name in enumerate(SPLITS)}


def split_seed(seed: int, split: str) -> int:
    """Generator seed for one dataset split, independent of the training streams."""
    return int(np.random.SeedSequence([seed, _SPLIT_TAGS[split]]).generate_state(1)[0])


def split_sizes(cfg: ExperimentConfig) -> Dict[str, int]:
    return {"source": cfg.n_source, "source_test": cfg.n_source_test,
            "target": cfg.n_target, "target_test": cfg.n_target_test}


def make_datasets(cfg: ExperimentConfig) -> Dict[str, List[sd.LabeledImage]]:
    src_p, tgt_p = sd.preset(cfg.shift_preset)
    sizes = split_sizes(cfg)
    return {name: sd.gen_domain(split_seed(cfg.seed, name), sizes[name],
                                src_p if name.startswith("source") else tgt_p)
            for name in SPLITS}


def images_of(ds: Sequence[sd.LabeledImage]) -> np.ndarray:
    return np.stack([d.image for d in ds])


def labels_of(ds: Sequence[sd.LabeledImage]) -> np.ndarray:
    return np.stack([d.labels for d in ds])


def weak_iters(cfg: ExperimentConfig) -> int:
    return int(round(cfg.weak_fraction * cfg.source_iters))


@dataclass
class SourceStage:
    strong: TwoHeadSegNet
    weak: TwoHeadSegNet
    history: History


def pretrain(cfg: ExperimentConfig, data) -> SourceStage:
    """Source training; the weak model is the snapshot taken part-way through it."""
    k = weak_iters(cfg)
    net, hist, snaps = pretrain_source(data["source"], cfg, snapshot_at=(k,))
    return SourceStage(net, snaps[k], hist)


def teacher_of(stage: SourceStage, cfg: ExperimentConfig) -> TwoHeadSegNet:
    return stage.strong if cfg.pseudo_source == "strong" else stage.weak


def pseudo_labels_for(teacher: TwoHeadSegNet, cfg: ExperimentConfig, data) -> PseudoLabelSet:
    pl = generate_pseudo_labels(teacher, images_of(data["target"]), provenance=cfg.pseudo_source)
    if cfg.loss == "thresholded":
        pl = threshold_filter(pl, cfg.tau)
    return pl


def gap_report(net: TwoHeadSegNet, ds: Sequence[sd.LabeledImage], confidence_floor: Optional[float] = None,
               batch: int = 50) -> dict:
    """Right/wrong mean of exp(-KL(P || P_aux)) over a labelled dataset, primary-head predictions."""
    certs, preds, confs = [], [], []
    images = images_of(ds)
    for i in range(0, len(images), batch):
        P, P_aux = forward(net, images[i:i + batch])
        certs.append(certainty(kl_variance(P, P_aux)).values)
        preds.append(P.argmax(-1))
        confs.append(P.max(-1))
    from .uncertainty import CertaintyMap
    cm = CertaintyMap(np.concatenate(certs), "kl_forward")
    return uncertainty_gap(cm, np.concatenate(preds), labels_of(ds), np.concatenate(confs), confidence_floor,
                           np.stack([d.ignore for d in ds]))


@dataclass
class RunResult:
    cfg: ExperimentConfig
    source: SourceStage
    pseudo: PseudoLabelSet
    target_net: TwoHeadSegNet
    adapt_history: History
    reports: Dict[str, IoUReport] = field(default_factory=dict)
    pseudo_quality: dict = field(default_factory=dict)


def run_pipeline(cfg: ExperimentConfig, data=None, stage: Optional[SourceStage] = None) -> RunResult:
    data = make_datasets(cfg) if data is None else data
    stage = pretrain(cfg, data) if stage is None else stage
    teacher = teacher_of(stage, cfg)
    pl = pseudo_labels_for(teacher, cfg, data)
    net_t, hist = adapt(teacher, images_of(data["target"]), pl, cfg)
    res = RunResult(cfg, stage, pl, net_t, hist)
    a, b = cfg.alpha, cfg.beta
    res.reports = {
        "source_only/source_test": evaluate_checkpoint(teacher, data["source_test"], a, b),
        "source_only/target_test": evaluate_checkpoint(teacher, data["target_test"], a, b),
        "adapted/target_test": evaluate_checkpoint(net_t, data["target_test"], a, b),
    }
    res.pseudo_quality = pseudo_quality_report(pl, labels_of(data["target"]), cfg.num_classes)
    return res


# -- mode comparison (threshold sweep, rectified vs plain) --------------------------------

def mode_config(cfg: ExperimentConfig, mode: str) -> ExperimentConfig:
    """'plain', 'rectified' or 'tau:<value>'."""
    if mode == "plain":
        return cfg.replace(loss="plain_ce", tau=0.0)
    if mode == "rectified":
        return cfg.replace(loss="rectified", tau=0.0)
    if mode.startswith("tau:"):
        return cfg.replace(loss="thresholded", tau=float(mode[4:]))
    raise ValueError(f"unknown mode {mode!r}; expected plain, rectified or tau:<value>")


@dataclass
class ModeOutcome:
    mode: str
    report: IoUReport
    history: History
    net: TwoHeadSegNet


def compare_modes(cfg: ExperimentConfig, data, stage: SourceStage, modes: Sequence[str]) -> Dict[str, ModeOutcome]:
    """Adapt from one pretrained source model under each mode; pseudo labels are shared."""
    teacher = teacher_of(stage, cfg)
    x = images_of(data["target"])
    base_pl = generate_pseudo_labels(teacher, x, provenance=cfg.pseudo_source)
    out = {}
    for mode in modes:
        mc = mode_config(cfg, mode)
        pl = threshold_filter(base_pl, mc.tau) if mc.loss == "thresholded" else base_pl
        net, hist = adapt(teacher, x, pl, mc)
        out[mode] = ModeOutcome(mode, evaluate_checkpoint(net, data["target_test"], cfg.alpha, cfg.beta), hist, net)
        log.info("seed %d %s: mIoU %.4f", cfg.seed, mode, out[mode].report.miou)
    return out
