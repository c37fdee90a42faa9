"""Visualising the low/high split of the shallow features."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .imageio import write_image
from .model import FPro


@dataclass
class Decomposition:
    source: np.ndarray  # channel-mean of the shallow features, [H, W]
    lo: np.ndarray      # channel-mean of the low band
    hi: np.ndarray
    lo_spectrum: np.ndarray  # channel-mean |FFT|, DC at the centre
    hi_spectrum: np.ndarray


def centered_spectrum(feat: np.ndarray) -> np.ndarray:
    """Mean over channels of ``|fft2|`` of ``feat[H, W, C]``, shifted so DC sits at the centre."""
    mag = np.abs(np.fft.fft2(feat, axes=(0, 1)))
    return np.fft.fftshift(mag.mean(axis=-1))


def decompose_image(model: FPro, image: np.ndarray) -> Decomposition:
    x = T.as_tensor(np.asarray(image)[None], model.shallow.weight.dtype)
    model.eval()
    with T.no_grad():
        f_s = model.shallow(x)
        pair = model.gdds[0](f_s) if len(model.gdds) else None
    if pair is None:
        raise ValueError("model was built without a prompt branch; nothing to decompose")
    f, lo, hi = f_s.data[0], pair.lo.data[0], pair.hi.data[0]
    return Decomposition(f.mean(-1), lo.mean(-1), hi.mean(-1), centered_spectrum(lo), centered_spectrum(hi))


def minmax(img: np.ndarray, ref_scale: float = 1.0, rel_tol: float = 1e-6) -> np.ndarray:
    """Scale to [0, 1]; a map whose range is negligible relative to ``ref_scale`` becomes all zeros."""
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= rel_tol * max(1.0, ref_scale):
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def radial_energy_ratio(spectrum: np.ndarray, radius: float = 0.25) -> float:
    """Mean energy inside vs outside a centred disc of ``radius`` (fraction of the half-size)."""
    h, w = spectrum.shape
    yy, xx = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    r = np.sqrt((yy / (h / 2)) ** 2 + (xx / (w / 2)) ** 2)
    energy = spectrum ** 2
    inside = r <= radius
    return float(energy[inside].mean() / max(energy[~inside].mean(), np.finfo(float).tiny))


def write_decomposition(d: Decomposition, outdir, raw: bool = False) -> list[Path]:
    """Write lo/hi maps and their log-magnitude spectra as PNGs.

    With ``raw`` the maps share one affine encoding ``0.5 + v / (2 R)`` (R in
    ``raw.json``), so ``lo + hi - 0.5`` reproduces ``source.png``.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    scale = float(np.abs(d.source).max())
    if raw:
        r = max(np.abs(d.lo).max(), np.abs(d.hi).max(), scale, np.finfo(float).tiny)
        maps = {"lo": 0.5 + d.lo / (2 * r), "hi": 0.5 + d.hi / (2 * r), "source": 0.5 + d.source / (2 * r)}
        (outdir / "raw.json").write_text(json.dumps({"R": r}) + "\n")
    else:
        maps = {"lo": minmax(d.lo, scale), "hi": minmax(d.hi, scale)}
    spec_ref = float(np.log1p(d.lo_spectrum).max())
    maps["lo_spectrum"] = minmax(np.log1p(d.lo_spectrum), spec_ref)
    maps["hi_spectrum"] = minmax(np.log1p(d.hi_spectrum), spec_ref)
    paths = []
    for name, img in maps.items():
        path = outdir / f"{name}.png"
        write_image(path, img)
        paths.append(path)
    return paths
