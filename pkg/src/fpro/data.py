"""Procedural clean images, synthetic degradations and the corpus manifest."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import read_image, write_image
from .tensor import make_rng

KINDS = ("rain-streak", "raindrop-blob", "moire-sinusoid")


@dataclass(frozen=True)
class DegradationSpec:
    """Parameters of one synthetic artifact; angles in degrees from vertical."""

    kind: str = "rain-streak"
    intensity: float = 0.6
    seed: int = 0
    count: tuple = (20, 40)
    angle: tuple = (-25.0, 25.0)
    length: tuple = (8.0, 24.0)
    width: float = 0.8
    blob_radius: tuple = (2.0, 5.0)
    moire_freq: tuple = (0.12, 0.3)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")


def _grid(h: int, w: int):
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def rain_streaks(h: int, w: int, spec: DegradationSpec) -> np.ndarray:
    """Sum of oriented line segments with a Gaussian cross-section, capped at 1."""
    rng = make_rng(spec.seed, "rain-streak")
    yy, xx = _grid(h, w)
    n = int(rng.integers(spec.count[0], spec.count[1] + 1))
    # one dominant direction per image, small per-streak jitter
    base = np.deg2rad(rng.uniform(*spec.angle))
    out = np.zeros((h, w))
    for _ in range(n):
        theta = base + np.deg2rad(rng.normal(0.0, 3.0))
        half = 0.5 * rng.uniform(*spec.length)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        bright = rng.uniform(0.6, 1.0)
        dy, dx = np.cos(theta), np.sin(theta)
        ry, rx = yy - cy, xx - cx
        along = np.clip(ry * dy + rx * dx, -half, half)
        dist2 = (ry - along * dy) ** 2 + (rx - along * dx) ** 2
        out += bright * np.exp(-dist2 / (2.0 * spec.width ** 2))
    return np.minimum(out, 1.0)[..., None] * np.ones(3)


def raindrop_blobs(h: int, w: int, spec: DegradationSpec) -> np.ndarray:
    rng = make_rng(spec.seed, "raindrop-blob")
    yy, xx = _grid(h, w)
    n = int(rng.integers(max(1, spec.count[0] // 4), max(2, spec.count[1] // 4) + 1))
    out = np.zeros((h, w))
    for _ in range(n):
        r = rng.uniform(*spec.blob_radius)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2
        out += rng.uniform(0.4, 0.9) * np.exp(-0.5 * d2 ** 2)
    return np.minimum(out, 1.0)[..., None] * np.ones(3)


def moire(h: int, w: int, spec: DegradationSpec) -> np.ndarray:
    """Two interfering sinusoidal gratings, zero mean, with a slight colour tint."""
    rng = make_rng(spec.seed, "moire-sinusoid")
    yy, xx = _grid(h, w)
    pattern = np.zeros((h, w))
    for _ in range(2):
        f = rng.uniform(*spec.moire_freq)
        a = rng.uniform(0, np.pi)
        pattern += np.sin(2 * np.pi * f * (xx * np.cos(a) + yy * np.sin(a)) + rng.uniform(0, 2 * np.pi))
    tint = rng.uniform(0.6, 1.0, size=3)
    return 0.25 * pattern[..., None] * tint


_ARTIFACTS = {"rain-streak": rain_streaks, "raindrop-blob": raindrop_blobs, "moire-sinusoid": moire}


def synth_degrade(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """``clamp(clean + intensity * artifact, 0, 1)``; the artifact depends only on ``spec``."""
    clean = np.asarray(clean, dtype=np.float64)
    h, w = clean.shape[:2]
    artifact = _ARTIFACTS[spec.kind](h, w, spec)
    return np.clip(clean + spec.intensity * artifact, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def procedural_image(seed: int, size: int = 64) -> np.ndarray:
    """Smooth colour gradients plus a few flat shapes and one soft texture, 8-bit exact."""
    rng = make_rng(seed, "clean-image")
    yy, xx = _grid(size, size)
    u, v = yy / size, xx / size
    c0, c1, c2 = rng.uniform(0.1, 0.8, size=(3, 3))
    img = c0 + (c1 - c0) * u[..., None] + (c2 - c0) * (v[..., None] * u[..., None])
    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform(0.0, 0.9, size=3)
        cy, cx = rng.uniform(0, size, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(min(4, size / 4), size / 3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            hh, ww = rng.uniform(min(4, size / 4), size / 2, size=2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img = np.where(mask[..., None], 0.7 * colour + 0.3 * img, img)
    f = rng.uniform(0.02, 0.08)
    a = rng.uniform(0, np.pi)
    img += 0.05 * np.sin(2 * np.pi * f * (xx * np.cos(a) + yy * np.sin(a)))[..., None]
    return quantize(img)


@dataclass
class Sample:
    clean: np.ndarray
    degraded: np.ndarray
    seed: int
    kind: str
    intensity: float
    clean_path: str | None = None


def make_corpus(n: int, size: int = 64, seed: int = 0, kind: str = "rain-streak",
                intensity: tuple = (0.4, 0.8)) -> list[Sample]:
    rng = make_rng(seed, "corpus")
    out = []
    for i in range(n):
        item_seed = int(seed) * 1_000_003 + i
        level = float(np.round(rng.uniform(*intensity), 4))
        clean = procedural_image(item_seed, size)
        spec = DegradationSpec(kind, level, item_seed)
        out.append(Sample(clean, synth_degrade(clean, spec), item_seed, kind, level))
    return out


def write_corpus(samples: list[Sample], outdir) -> Path:
    """Write clean PNGs and ``manifest.jsonl``; degraded images are regenerated on load."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"clean_{i:04d}.png"
        write_image(outdir / name, s.clean)
        lines.append(json.dumps({"clean": name, "seed": s.seed, "kind": s.kind, "intensity": s.intensity},
                                sort_keys=True))
    manifest = outdir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(manifest) -> list[Sample]:
    """Read a manifest; relative clean paths resolve against the manifest's directory."""
    manifest = Path(manifest)
    root = manifest.parent
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            path = Path(rec["clean"])
            spec = DegradationSpec(rec["kind"], float(rec["intensity"]), int(rec["seed"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{manifest}:{lineno}: bad record ({exc})") from None
        path = path if path.is_absolute() else root / path
        clean = read_image(path)
        samples.append(Sample(clean, synth_degrade(clean, spec), spec.seed, spec.kind, spec.intensity, str(path)))
    if not samples:
        raise ValueError(f"{manifest}: corpus is empty")
    return samples
