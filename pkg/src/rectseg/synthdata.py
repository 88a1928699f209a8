"""Synthetic paired segmentation domains with controllable covariate shift.

Scenes are a gray background (class 0) with rectangles and disks of
classes 1..C-1 painted in order, so later shapes occlude earlier ones. The
labelling function is shared between domains; only the appearance (hue,
noise, texture) and the class frequencies move.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

# Classes differ in brightness and saturation as well as hue, so the default
# target hue rotation degrades class identity without swapping it: every
# rotated colour stays nearest (in RGB) to its own source colour. See
# hue_shift_margin.
DEFAULT_COLORS = (
    (0.50, 0.50, 0.50),
    (0.07, 0.27, 0.27),
    (0.81, 0.54, 0.66),
    (0.46, 0.87, 0.59),
    (0.45, 0.16, 0.47),
)


@dataclass(frozen=True)
class Shape:
    kind: str  # "rectangle" | "disk"
    cls: int
    cy: float
    cx: float
    size: Tuple[float, float]  # half-extents for rectangles, (radius, radius) for disks


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    num_classes: int = 5
    shapes: List[Shape] = field(default_factory=list)

    def __post_init__(self):
        for s in self.shapes:
            if not 1 <= s.cls < self.num_classes:
                raise ValueError(f"shape class {s.cls} outside [1, {self.num_classes - 1}]")
            if s.kind not in ("rectangle", "disk"):
                raise ValueError(f"unknown shape kind {s.kind!r}")


@dataclass(frozen=True)
class DomainParams:
    base_colors: Tuple[Tuple[float, float, float], ...] = DEFAULT_COLORS
    hue_shift: float = 0.0
    noise_sigma: float = 0.05
    texture_amp: float = 0.05
    class_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    min_shapes: int = 2
    max_shapes: int = 5
    size_range: Tuple[float, float] = (3.0, 8.0)
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.noise_sigma < 0 or self.texture_amp < 0:
            raise ValueError("noise sigma and texture amplitude must be nonnegative")
        if len(self.class_weights) != len(self.base_colors) - 1:
            raise ValueError("need one frequency weight per foreground class")
        if min(self.class_weights) <= 0:
            raise ValueError("class frequency weights must be positive")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("invalid shape-count range")

    @property
    def num_classes(self) -> int:
        return len(self.base_colors)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "DomainParams":
        d = dict(d)
        d["base_colors"] = tuple(tuple(float(v) for v in c) for c in d["base_colors"])
        for key in ("class_weights", "size_range"):
            d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class LabeledImage:
    image: np.ndarray   # H x W x 3, float64 in [0, 1]
    labels: np.ndarray  # H x W, int64 class ids
    ignore: np.ndarray  # H x W, bool; True pixels are excluded from loss and metrics

    def __post_init__(self):
        if self.labels.shape != self.ignore.shape or self.image.shape[:2] != self.labels.shape:
            raise ValueError("image, labels and ignore mask must share spatial shape")


def source_params() -> DomainParams:
    # last class deliberately rare in the source domain
    return DomainParams(noise_sigma=0.05, texture_amp=0.05, class_weights=(1.0, 1.0, 1.0, 0.15))


def target_params() -> DomainParams:
    return DomainParams(hue_shift=0.15, noise_sigma=0.15, texture_amp=0.05,
                        class_weights=(1.0, 1.0, 1.0, 1.0))


SHIFT_PRESETS = ("default", "none")


def preset(name: str) -> Tuple[DomainParams, DomainParams]:
    """(source, target) parameters for a named shift preset."""
    if name == "default":
        return source_params(), target_params()
    if name == "none":
        return source_params(), source_params()
    raise ValueError(f"unknown shift preset {name!r}; choose from {SHIFT_PRESETS}")


def shift_hue(rgb: Sequence[float], shift: float) -> Tuple[float, float, float]:
    h, s, v = colorsys.rgb_to_hsv(*rgb)
    return colorsys.hsv_to_rgb((h + shift) % 1.0, s, v)


def hue_shift_margin(colors: Sequence[Sequence[float]], shift: float) -> float:
    """min over classes of (distance from the rotated colour to the nearest other
    class colour) minus (distance to its own colour). Negative means some class
    is rotated onto another one."""
    pal = np.asarray(colors, dtype=np.float64)
    rot = np.array([shift_hue(c, shift) for c in pal])
    d = np.linalg.norm(rot[:, None, :] - pal[None, :, :], axis=-1)
    own = np.diag(d).copy()
    np.fill_diagonal(d, np.inf)
    return float((d.min(axis=1) - own).min())


def sample_scene(rng: np.random.Generator, params: DomainParams) -> SceneSpec:
    weights = np.asarray(params.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    n = int(rng.integers(params.min_shapes, params.max_shapes + 1))
    lo, hi = params.size_range
    shapes = []
    for _ in range(n):
        kind = "rectangle" if rng.random() < 0.5 else "disk"
        cls = 1 + int(rng.choice(len(weights), p=weights))
        cy = rng.uniform(0, params.height)
        cx = rng.uniform(0, params.width)
        if kind == "disk":
            r = rng.uniform(lo, hi)
            size = (r, r)
        else:
            size = (rng.uniform(lo, hi), rng.uniform(lo, hi))
        shapes.append(Shape(kind, cls, float(cy), float(cx), (float(size[0]), float(size[1]))))
    return SceneSpec(params.height, params.width, params.num_classes, shapes)


def render_labels(scene: SceneSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:scene.height, 0:scene.width] + 0.5
    labels = np.zeros((scene.height, scene.width), dtype=np.int64)
    for s in scene.shapes:
        if s.kind == "rectangle":
            inside = (np.abs(yy - s.cy) <= s.size[0]) & (np.abs(xx - s.cx) <= s.size[1])
        else:
            inside = (yy - s.cy) ** 2 + (xx - s.cx) ** 2 <= s.size[0] ** 2
        labels[inside] = s.cls
    return labels


def render(scene: SceneSpec, params: DomainParams, rng: np.random.Generator) -> LabeledImage:
    labels = render_labels(scene)
    colors = np.array([shift_hue(c, params.hue_shift) for c in params.base_colors])
    image = colors[labels]
    h, w = labels.shape
    if params.texture_amp > 0:
        fy, fx = rng.uniform(0.05, 0.25, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        image = image + params.texture_amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)[..., None]
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    # quantise to 8 bits so PPM storage round-trips exactly
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return LabeledImage(image, labels, np.zeros_like(labels, dtype=bool))


def gen_domain(seed: int, n: int, params: DomainParams) -> List[LabeledImage]:
    """n images drawn deterministically from (seed, params)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    return [render(sample_scene(rng, params), params, rng) for _ in range(n)]


def stack(images: Sequence[LabeledImage]):
    """(images [N,H,W,3], labels [N,H,W], ignore [N,H,W])."""
    return (np.stack([im.image for im in images]),
            np.stack([im.labels for im in images]),
            np.stack([im.ignore for im in images]))


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    flip_p: float = 0.5
    scale_jitter: Tuple[float, float] = (0.8, 1.2)
    crop: Tuple[int, int] = (24, 24)


def _nearest_index(n_out: int, n_in: int, factor: float) -> np.ndarray:
    src = np.floor((np.arange(n_out) + 0.5) / factor).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def _linear_weights(n_out: int, n_in: int, factor: float):
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def rescale(img: LabeledImage, factor: float) -> LabeledImage:
    """Bilinear for the image, nearest-neighbour for labels and mask."""
    h, w = img.labels.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    fy, fx = nh / h, nw / w
    ry, rx = _nearest_index(nh, h, fy), _nearest_index(nw, w, fx)
    labels = img.labels[np.ix_(ry, rx)]
    ignore = img.ignore[np.ix_(ry, rx)]
    y0, y1, wy = _linear_weights(nh, h, fy)
    x0, x1, wx = _linear_weights(nw, w, fx)
    im = img.image
    top = im[y0][:, x0] * (1 - wx)[None, :, None] + im[y0][:, x1] * wx[None, :, None]
    bot = im[y1][:, x0] * (1 - wx)[None, :, None] + im[y1][:, x1] * wx[None, :, None]
    image = top * (1 - wy)[:, None, None] + bot * wy[:, None, None]
    return LabeledImage(image, labels, ignore)


def hflip(img: LabeledImage) -> LabeledImage:
    return LabeledImage(img.image[:, ::-1].copy(), img.labels[:, ::-1].copy(), img.ignore[:, ::-1].copy())


def augment(img: LabeledImage, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy(),
            *, flip: Optional[bool] = None, factor: Optional[float] = None) -> LabeledImage:
    """Flip, rescale, then crop; image, labels and mask move together.

    flip/factor pin the random draws (testing); the rng is consumed the same
    way regardless so streams stay aligned.
    """
    draw_flip = rng.random() < policy.flip_p
    draw_factor = rng.uniform(*policy.scale_jitter)
    flip = draw_flip if flip is None else flip
    factor = draw_factor if factor is None else factor
    ch, cw = policy.crop
    h, w = img.labels.shape
    if ch > int(round(h * policy.scale_jitter[0])) or cw > int(round(w * policy.scale_jitter[0])):
        raise ValueError(f"crop {ch}x{cw} does not fit a {h}x{w} canvas at scale {policy.scale_jitter[0]}")
    out = hflip(img) if flip else img
    if factor != 1.0:
        out = rescale(out, factor)
    h, w = out.labels.shape
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than canvas {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    sl = (slice(top, top + ch), slice(left, left + cw))
    return LabeledImage(out.image[sl], out.labels[sl], out.ignore[sl])


# -- Netpbm storage ----------------------------------------------------------------


def write_ppm(path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pgm(path, array: np.ndarray, maxval: int = 255) -> None:
    h, w = array.shape
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.asarray(array).astype(dtype)
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + data.tobytes())


def _read_netpbm(path):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    return magic, w, h, maxval, raw[pos:]


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != "P6" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit P6")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3) / 255.0


def read_pgm(path) -> Tuple[np.ndarray, int]:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != "P5":
        raise ValueError(f"{path}: expected P5")
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w).astype(np.int64), maxval


def write_dataset(directory, images: Sequence[LabeledImage], seed: int, params: DomainParams,
                  split: str = "") -> List[str]:
    """Write a dataset directory; returns the list of written file names."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"split={split}", f"seed={seed}", f"n={len(images)}",
             f"params={json.dumps(params.to_dict(), sort_keys=True)}"]
    written = []
    for i, im in enumerate(images):
        names = (f"img_{i:04d}.ppm", f"lab_{i:04d}.pgm", f"mask_{i:04d}.pgm")
        write_ppm(d / names[0], im.image)
        write_pgm(d / names[1], im.labels)
        write_pgm(d / names[2], im.ignore.astype(np.uint8))
        lines.append("file=" + " ".join(names))
        written += names
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    return written + ["manifest.txt"]


def read_manifest(directory) -> dict:
    meta = {"files": []}
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key == "file":
            meta["files"].append(value.split())
        else:
            meta[key] = value
    return meta


def load_dataset(directory) -> List[LabeledImage]:
    d = Path(directory)
    out = []
    for img_name, lab_name, mask_name in read_manifest(d)["files"]:
        image = read_ppm(d / img_name)
        labels, _ = read_pgm(d / lab_name)
        mask, _ = read_pgm(d / mask_name)
        out.append(LabeledImage(image, labels, mask.astype(bool)))
    return out


def with_params(params: DomainParams, **changes) -> DomainParams:
    return replace(params, **changes)
