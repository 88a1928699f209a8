"""Two-head fully convolutional segmenter.

A stack of same-padded 3x3 conv+ReLU layers feeds two classifiers: the
auxiliary head reads a shallow activation, the primary head the deepest one.
Each head is dropout followed by a 1x1 conv to class logits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .tensor import Tensor, conv2d, dropout, relu, no_grad

CHECKPOINT_MAGIC = b"RSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    widths: Tuple[int, ...] = (16, 16, 32, 32)
    kernel: int = 3
    aux_tap: int = 2
    dropout_rate: float = 0.1
    num_classes: int = 5
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError("trunk needs at least one layer with positive width")
        if not 1 <= self.aux_tap < len(self.widths):
            raise ValueError(
                f"aux_tap must satisfy 1 <= aux_tap < depth ({len(self.widths)}), got {self.aux_tap}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel extent must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class TwoHeadSegNet:
    config: ArchConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    def param_names(self):
        names = []
        for i in range(self.config.depth):
            names += [f"trunk{i}.w", f"trunk{i}.b"]
        names += ["aux.w", "aux.b", "primary.w", "primary.b"]
        return names

    def parameters(self):
        return [self.params[n] for n in self.param_names()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone(self) -> "TwoHeadSegNet":
        return TwoHeadSegNet(self.config, {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def init_params(seed: int, config: Optional[ArchConfig] = None) -> TwoHeadSegNet:
    """He-style uniform init U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero."""
    config = config or ArchConfig()
    rng = np.random.default_rng(seed)
    net = TwoHeadSegNet(config)
    cin = config.in_channels
    k = config.kernel
    for i, cout in enumerate(config.widths):
        bound = np.sqrt(6.0 / (k * k * cin))
        net.params[f"trunk{i}.w"] = Tensor(rng.uniform(-bound, bound, (k, k, cin, cout)), requires_grad=True)
        net.params[f"trunk{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    for head, width in (("aux", config.widths[config.aux_tap - 1]), ("primary", config.widths[-1])):
        bound = np.sqrt(6.0 / width)
        net.params[f"{head}.w"] = Tensor(
            rng.uniform(-bound, bound, (1, 1, width, config.num_classes)), requires_grad=True)
        net.params[f"{head}.b"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return net


def forward_logits(net: TwoHeadSegNet, x, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None,
                   dropout_rate: Optional[float] = None) -> Tuple[Tensor, Tensor]:
    """Return (primary_logits, aux_logits), each [..., H, W, C].

    dropout_rate overrides the configured rate (MC-dropout probing).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.shape[-1] != net.config.in_channels:
        raise ValueError(f"expected {net.config.in_channels} input channels, got {x.shape[-1]}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    rate = net.config.dropout_rate if dropout_rate is None else dropout_rate
    p = net.params
    a = x
    tap = None
    for i in range(net.config.depth):
        a = relu(conv2d(a, p[f"trunk{i}.w"], p[f"trunk{i}.b"]))
        if i + 1 == net.config.aux_tap:
            tap = a
    aux = conv2d(dropout(tap, rate, mode, rng), p["aux.w"], p["aux.b"])
    primary = conv2d(dropout(a, rate, mode, rng), p["primary.w"], p["primary.b"])
    return primary, aux


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(net: TwoHeadSegNet, x, mode: str = "eval",
            rng: Optional[np.random.Generator] = None,
            dropout_rate: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Probability maps (P, P_aux) without recording a graph."""
    with no_grad():
        primary, aux = forward_logits(net, x, mode, rng, dropout_rate)
    return softmax_np(primary.data), softmax_np(aux.data)


def combined_prediction(P: np.ndarray, P_aux: np.ndarray, alpha: float = 1.0, beta: float = 0.5) -> np.ndarray:
    """argmax(alpha*P + beta*P_aux) per pixel; ties go to the lowest class."""
    if P.shape != P_aux.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {P_aux.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError("inference weights must be nonnegative")
    if alpha == 0 and beta == 0:
        raise ValueError("alpha and beta cannot both be zero")
    if beta == 0:
        mix = P
    elif alpha == 0:
        mix = P_aux
    else:
        # normalise by alpha so joint rescaling of (alpha, beta) is bit-exact
        mix = P + (beta / alpha) * P_aux
    return np.argmax(mix, axis=-1)


# -- checkpoint file -----------------------------------------------------------
# header: magic(8) version(u32) in_channels(u32) num_classes(u32) kernel(u32)
#         aux_tap(u32) depth(u32) widths(depth*u32) dropout_rate(f64)
# payload: float64 little-endian, parameters in param_names() order, C order


def save_checkpoint(net: TwoHeadSegNet, path) -> None:
    c = net.config
    header = CHECKPOINT_MAGIC + struct.pack(
        "<6I", CHECKPOINT_VERSION, c.in_channels, c.num_classes, c.kernel, c.aux_tap, c.depth)
    header += struct.pack(f"<{c.depth}I", *c.widths) + struct.pack("<d", c.dropout_rate)
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in net.parameters())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> TwoHeadSegNet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, cin, ncls, kernel, aux_tap, depth = struct.unpack_from("<6I", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + 24
    widths = struct.unpack_from(f"<{depth}I", raw, off)
    off += 4 * depth
    (rate,) = struct.unpack_from("<d", raw, off)
    off += 8
    config = ArchConfig(widths=widths, kernel=kernel, aux_tap=aux_tap, dropout_rate=rate,
                        num_classes=ncls, in_channels=cin)
    template = init_params(0, config)
    for name in template.param_names():
        t = template.params[name]
        n = t.size * 8
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype="<f8", count=t.size, offset=off).reshape(t.shape).astype(np.float64)
        template.params[name] = Tensor(arr, requires_grad=True)
        off += n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return template


def arch_dict(config: ArchConfig) -> dict:
    d = asdict(config)
    d["widths"] = list(config.widths)
    return d
