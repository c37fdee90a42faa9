"""Loss, training loop and held-out evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, from_model
from .data import Sample
from .freq import rfft2
from .metrics import psnr, ssim
from .model import FPro, fpro_forward
from .optim import LR_MAX, LR_MIN, AdamW, cosine_lr
from .tensor import ShapeError, Tensor


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"loss became {value} at iteration {iteration}")
        self.iteration = iteration


def spectral_magnitude(x: Tensor, eps: float = 1e-12) -> Tensor:
    """|rfft2(x)| with orthonormal scaling, so it is on the same scale as pixel values."""
    h, w = x.shape[-3], x.shape[-2]
    spec = rfft2(x) * (1.0 / math.sqrt(h * w))
    c = x.shape[-1]
    re, im = spec[..., :c], spec[..., c:]
    return T.sqrt(re * re + im * im + eps)


def loss_fn(restored: Tensor, target, lam: float = 0.1) -> Tensor:
    """Mean L1 in pixels plus ``lam`` times mean L1 between spectral magnitudes."""
    target = T.as_tensor(target, restored.dtype)
    if restored.shape != target.shape:
        raise ShapeError(f"restored {restored.shape} and target {target.shape} differ")
    out = T.mean(T.absolute(restored - target))
    if lam:
        out = out + lam * T.mean(T.absolute(spectral_magnitude(restored) - spectral_magnitude(target)))
    return out


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 4
    patch: int = 64
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN
    weight_decay: float = 1e-4
    loss_lambda: float = 0.1
    eval_every: int = 200
    holdout: int = 20
    seed: int = 0
    metric_space: str = "y"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def split_corpus(corpus: list[Sample], holdout: int) -> tuple[list[Sample], list[Sample]]:
    """The last ``holdout`` samples are held out (none when the corpus is too small)."""
    if not corpus:
        raise ValueError("corpus is empty")
    if holdout <= 0 or len(corpus) <= holdout:
        return list(corpus), []
    return list(corpus[:-holdout]), list(corpus[-holdout:])


def evaluate(model: FPro, samples: list[Sample], space: str = "y", batch: int = 4) -> tuple[float, float]:
    """Mean PSNR and SSIM of restored vs clean over ``samples``."""
    was_training = model.training
    scores = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        restored = fpro_forward(model, np.stack([s.degraded for s in chunk]), "eval").data
        for s, r in zip(chunk, restored):
            scores.append((psnr(r, s.clean, space), ssim(r, s.clean, space)))
    model.train(was_training)
    return float(np.mean([p for p, _ in scores])), float(np.mean([q for _, q in scores]))


def baseline_scores(samples: list[Sample], space: str = "y") -> tuple[float, float]:
    """PSNR/SSIM of the degraded inputs themselves."""
    return (float(np.mean([psnr(s.degraded, s.clean, space) for s in samples])),
            float(np.mean([ssim(s.degraded, s.clean, space) for s in samples])))


def _crop(rng, img: np.ndarray, size: int) -> tuple[slice, slice]:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} smaller than the training patch {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return slice(y, y + size), slice(x, x + size)


def _batch(rng, samples: list[Sample], cfg: TrainConfig, dtype):
    idx = rng.integers(0, len(samples), size=cfg.batch)
    xs, ys = [], []
    for i in idx:
        s = samples[int(i)]
        sy, sx = _crop(rng, s.clean, cfg.patch)
        xs.append(s.degraded[sy, sx])
        ys.append(s.clean[sy, sx])
    return np.stack(xs).astype(dtype), np.stack(ys).astype(dtype)


def log_line(record: dict) -> str:
    return json.dumps(record, sort_keys=False)


def train_loop(model: FPro, corpus: list[Sample], cfg: TrainConfig | None = None, log_file=None) -> TrainResult:
    """Train in place with AdamW and cosine annealing.

    Every ``eval_every`` iterations (and at the last one) a record
    ``{iter, lr, loss, psnr, ssim}`` is appended to the log; ``loss`` is the
    mean training loss since the previous record and the metrics come from the
    held-out split (training split when nothing is held out).
    """
    cfg = cfg or TrainConfig()
    train_set, held = split_corpus(corpus, cfg.holdout)
    eval_set = held or train_set
    dtype = model.shallow.weight.dtype
    rng = T.make_rng(cfg.seed, "batches")
    opt = AdamW(model.named_parameters(), weight_decay=cfg.weight_decay)
    result = TrainResult(checkpoint=None)

    def emit(record):
        result.log.append(record)
        if log_file is not None:
            log_file.write(log_line(record) + "\n")
            log_file.flush()

    if cfg.iterations == 0:
        result.checkpoint = from_model(model, 0, rng_state=rng.bit_generator.state)
        return result

    model.train()
    window = []
    for it in range(cfg.iterations):
        lr = cosine_lr(it, cfg.iterations, cfg.lr_max, cfg.lr_min)
        x, y = _batch(rng, train_set, cfg, dtype)
        model.zero_grad()
        loss = loss_fn(model(Tensor(x)), y, cfg.loss_lambda)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(it, value)
        T.backward(loss)
        opt.update(lr)
        result.losses.append(value)
        window.append(value)
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.iterations:
            p, s = evaluate(model, eval_set, cfg.metric_space)
            emit({"iter": done, "lr": round(lr, 12), "loss": round(float(np.mean(window)), 8),
                  "psnr": round(p, 6), "ssim": round(s, 6)})
            window = []
    model.zero_grad()
    result.checkpoint = from_model(model, cfg.iterations, opt, rng_state=rng.bit_generator.state)
    return result
