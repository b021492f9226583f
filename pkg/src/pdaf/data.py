"""Synthetic shapes benchmark, photometric augmentation and PPM/PGM file I/O.

Scenes are 3 x H x W float images over a gradient background (class 0) with
filled shapes painted in order, later shapes occluding earlier ones. Each
foreground class has one geometry and one base hue:

    1 circle, 2 rectangle, 3 triangle, 4 stripe  (cycled when K > 5)
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AugmentRanges, Config
from .errors import ConfigError, ParseError
from .tensor import RngStream

SHAPE_KINDS = ("circle", "rectangle", "triangle", "stripe")
DOMAINS = ("source", "pseudo-target", "shifted-test")
SPLITS = ("train_source", "val_source", "shifted_test")


@dataclass
class Shape:
    kind: str
    label: int
    params: tuple[float, ...]
    color: tuple[float, float, float]


@dataclass
class Scene:
    image: np.ndarray  # 3 x H x W in [0, 1]
    labels: np.ndarray  # H x W uint8
    domain_tag: str = "source"
    shapes: list[Shape] = field(default_factory=list)
    seed: int | None = None


def kind_for_label(label: int) -> str:
    return SHAPE_KINDS[(label - 1) % len(SHAPE_KINDS)]


def class_color(label: int, num_classes: int) -> tuple[float, float, float]:
    hue = (label - 1) / max(num_classes - 1, 1)
    return colorsys.hsv_to_rgb(hue, 0.75, 0.85)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5) / 255.0


# --------------------------------------------------------------------------- scenes


def _sample_shape(rng: RngStream, H: int, W: int, K: int) -> Shape:
    label = int(rng.integers(1, K))
    kind = kind_for_label(label)
    u = rng.uniform(size=8)
    s = float(min(H, W))
    if kind == "circle":
        params = (u[0] * H, u[1] * W, s * (0.12 + 0.10 * u[2]))
    elif kind == "rectangle":
        h, w = s * (0.2 + 0.2 * u[2]), s * (0.2 + 0.2 * u[3])
        y0, x0 = u[0] * (H - h), u[1] * (W - w)
        params = (y0, x0, y0 + h, x0 + w)
    elif kind == "triangle":
        cy, cx = u[0] * H, u[1] * W
        r = s * (0.18 + 0.12 * u[2])
        base = u[3] * 2 * np.pi
        angles = base + np.array([0.0, 2.1 + 0.4 * u[4], 4.2 + 0.4 * u[5]])
        params = tuple(float(v) for a in angles for v in (cy + r * np.sin(a), cx + r * np.cos(a)))
    else:  # stripe
        theta = u[0] * np.pi
        offset = (u[1] - 0.5) * 0.5 * s
        half = s * (0.05 + 0.03 * u[2])
        params = (theta, offset, half)
    base = np.array(class_color(label, K))
    jitter = rng.uniform(-0.08, 0.08, size=3)
    color = tuple(float(v) for v in np.clip(base + jitter, 0.0, 1.0))
    return Shape(kind, label, tuple(float(p) for p in params), color)


def shape_mask(shape: Shape, H: int, W: int) -> np.ndarray:
    """Boolean H x W mask of pixels (sampled at integer coordinates) inside ``shape``."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    p = shape.params
    if shape.kind == "circle":
        cy, cx, r = p
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape.kind == "rectangle":
        y0, x0, y1, x1 = p
        return (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    if shape.kind == "triangle":
        ay, ax, by, bx, cy, cx = p
        det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(det) < 1e-12:
            return np.zeros((H, W), dtype=bool)
        l1 = ((by - cy) * (xx - cx) + (cx - bx) * (yy - cy)) / det
        l2 = ((cy - ay) * (xx - cx) + (ax - cx) * (yy - cy)) / det
        l3 = 1.0 - l1 - l2
        return (l1 >= 0) & (l2 >= 0) & (l3 >= 0)
    theta, offset, half = p
    proj = (xx - W / 2) * np.cos(theta) + (yy - H / 2) * np.sin(theta)
    return np.abs(proj - offset) <= half


def gen_scene(rng: RngStream, H: int = 64, W: int = 64, K: int = 5, n_shapes: int = 3) -> Scene:
    if K < 2:
        raise ConfigError(f"need at least 2 classes, got K={K}")
    if H < 16 or W < 16:
        raise ConfigError(f"scene must be at least 16x16, got {H}x{W}")
    if n_shapes < 0:
        raise ConfigError("n_shapes must be >= 0")

    # muted background: grey level with a slight tint, linear ramp in a random direction
    g = rng.uniform(size=6)
    level = 0.35 + 0.3 * g[0]
    tint = (g[1:4] - 0.5) * 0.12
    angle = g[4] * 2 * np.pi
    amp = 0.1 + 0.1 * g[5]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ramp = ((xx / W - 0.5) * np.cos(angle) + (yy / H - 0.5) * np.sin(angle)) * 2 * amp
    image = np.clip(level + tint[:, None, None] + ramp[None], 0.0, 1.0)
    labels = np.zeros((H, W), dtype=np.uint8)

    shapes = []
    for _ in range(n_shapes):
        shape = _sample_shape(rng, H, W, K)
        mask = shape_mask(shape, H, W)
        image[:, mask] = np.asarray(shape.color)[:, None]
        labels[mask] = shape.label
        shapes.append(shape)
    return Scene(image=image, labels=labels, domain_tag="source", shapes=shapes)


# --------------------------------------------------------------------------- augmentation


def photometric_augment(image: np.ndarray, rng: RngStream, ranges: AugmentRanges) -> np.ndarray:
    """Brightness, contrast, saturation, gamma, then additive noise; clamp to [0, 1].

    Stages whose sampled factor is exactly neutral are skipped, so identity
    ranges reproduce the input bit for bit.
    """
    lo = np.array([ranges.brightness[0], ranges.contrast[0], ranges.saturation[0],
                   ranges.gamma[0], ranges.noise[0]])
    hi = np.array([ranges.brightness[1], ranges.contrast[1], ranges.saturation[1],
                   ranges.gamma[1], ranges.noise[1]])
    bright, contrast, sat, gamma, sigma = rng.uniform(lo, hi)

    out = np.array(image, dtype=np.float64, copy=True)
    if bright != 1.0:
        out = out * bright
    if contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * contrast + mean
    if sat != 1.0:
        luma = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = luma[None] + sat * (out - luma[None])
    if gamma != 1.0:
        out = np.clip(out, 0.0, 1.0) ** gamma
    if sigma != 0.0:
        out = out + sigma * rng.normal(out.shape)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------- PPM / PGM


def write_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm expects a 3 x H x W image, got {image.shape}")
    _, H, W = image.shape
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{W} {H}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def write_pgm(labels: np.ndarray) -> bytes:
    if labels.ndim != 2:
        raise ValueError(f"write_pgm expects an H x W map, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label values must be in 0..255")
    H, W = labels.shape
    return f"P5\n{W} {H}\n255\n".encode() + labels.astype(np.uint8).tobytes()


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, data offset) of a binary PNM header."""
    if len(buf) < 2 or buf[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()!r}, found {buf[:2]!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= len(buf):
                raise ParseError("truncated header", pos)
            raise ParseError(f"expected a decimal number, found {buf[pos:pos + 1]!r}", pos)
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("header must end with a single whitespace byte", pos)
    W, H, maxval = values
    if W < 1 or H < 1:
        raise ParseError(f"bad dimensions {W}x{H}", start)
    if not 1 <= maxval <= 255:
        raise ParseError(f"unsupported maxval {maxval}", start)
    return W, H, maxval, pos + 1


def read_ppm(buf: bytes) -> np.ndarray:
    W, H, maxval, off = _parse_header(buf, b"P6")
    need = off + 3 * W * H
    if len(buf) < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(buf)}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=3 * W * H, offset=off)
    return px.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float64) / float(maxval)


def read_pgm(buf: bytes) -> np.ndarray:
    W, H, _, off = _parse_header(buf, b"P5")
    need = off + W * H
    if len(buf) < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(buf)}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=W * H, offset=off).reshape(H, W).copy()


# --------------------------------------------------------------------------- datasets


@dataclass
class DatasetSplits:
    train_source: list[Scene]
    val_source: list[Scene]
    shifted_test: list[Scene]

    def __getitem__(self, name: str) -> list[Scene]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in SPLITS:
            for scene in self[name]:
                h.update(write_ppm(scene.image))
                h.update(write_pgm(scene.labels))
        return h.hexdigest()[:16]


def scene_for_seed(master: RngStream, scene_seed: int, config: Config) -> tuple[Scene, RngStream]:
    rng = master.child(scene_seed)
    n = int(rng.integers(config.n_shapes_min, config.n_shapes_max + 1))
    scene = gen_scene(rng, config.image_size, config.image_size, config.num_classes, n)
    scene.seed = scene_seed
    return scene, rng


def build_dataset(rng: RngStream, config: Config) -> DatasetSplits:
    """Generate the three splits; each scene gets its own stream keyed by its seed."""
    config.validate()

    def make(offset: int, count: int, shifted: bool) -> list[Scene]:
        scenes = []
        for i in range(count):
            scene, srng = scene_for_seed(rng, offset + i, config)
            if shifted:
                scene.image = photometric_augment(scene.image, srng, config.shift_augment)
                scene.domain_tag = "shifted-test"
            scene.image = quantize(scene.image)
            scenes.append(scene)
        return scenes

    return DatasetSplits(
        train_source=make(config.train_seed_offset, config.train_size, False),
        val_source=make(config.val_seed_offset, config.val_size, False),
        shifted_test=make(config.test_seed_offset, config.test_size, True),
    )


def class_pixel_weights(scenes: list[Scene], K: int, lo: float = 0.2, hi: float = 5.0) -> np.ndarray:
    """Inverse pixel frequency, scaled so a uniform class distribution gives 1, then clipped."""
    counts = np.zeros(K)
    for s in scenes:
        counts += np.bincount(s.labels.reshape(-1), minlength=K)[:K]
    freq = counts / max(counts.sum(), 1.0)
    with np.errstate(divide="ignore"):
        w = np.where(freq > 0, 1.0 / (K * np.maximum(freq, 1e-12)), hi)
    return np.clip(w, lo, hi)


def save_dataset(splits: DatasetSplits, root: str | os.PathLike, config: Config) -> Path:
    """Write PPM/PGM files plus ``manifest.json``; returns the manifest path."""
    root = Path(root)
    manifest = {"config": config.to_dict(), "seed": config.seed, "digest": splits.digest(),
                "splits": {}}
    for name in SPLITS:
        (root / name).mkdir(parents=True, exist_ok=True)
        entries = []
        for i, scene in enumerate(splits[name]):
            img_rel = f"{name}/{i:04d}.ppm"
            lbl_rel = f"{name}/{i:04d}.pgm"
            (root / img_rel).write_bytes(write_ppm(scene.image))
            (root / lbl_rel).write_bytes(write_pgm(scene.labels))
            entries.append([img_rel, lbl_rel])
        manifest["splits"][name] = entries
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest_path: str | os.PathLike) -> tuple[DatasetSplits, dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    tags = {"train_source": "source", "val_source": "source", "shifted_test": "shifted-test"}
    out = {}
    for name in SPLITS:
        scenes = []
        for img_rel, lbl_rel in manifest["splits"][name]:
            image = read_ppm((root / img_rel).read_bytes())
            labels = read_pgm((root / lbl_rel).read_bytes())
            scenes.append(Scene(image=image, labels=labels, domain_tag=tags[name]))
        out[name] = scenes
    return DatasetSplits(**out), manifest
