"""Train the micro network on synthetic rain and restore one held-out image.

    python demos/derain_micro.py [ITERATIONS] [OUTDIR]

Writes degraded/restored/clean PNGs for the first held-out sample and prints
the held-out Y-channel PSNR before and after training.
"""

import sys
from pathlib import Path

import numpy as np

from fpro.data import make_corpus
from fpro.imageio import write_image
from fpro.metrics import psnr
from fpro.model import ModelConfig, build_model, fpro_forward
from fpro.train import TrainConfig, baseline_scores, split_corpus, train_loop


def main(iterations: int = 400, outdir: str = "derain_demo") -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(200, 64, seed=0)
    held = split_corpus(corpus, 20)[1]
    base_psnr, base_ssim = baseline_scores(held)
    print(f"degraded inputs: PSNR {base_psnr:.2f} dB  SSIM {base_ssim:.4f}")

    model = build_model(ModelConfig.micro(), seed=0, dtype=np.float32)
    cfg = TrainConfig(iterations=iterations, eval_every=max(1, iterations // 4))
    result = train_loop(model, corpus, cfg, sys.stdout)
    final = result.log[-1]
    print(f"restored: PSNR {final['psnr']:.2f} dB (+{final['psnr'] - base_psnr:.2f})  SSIM {final['ssim']:.4f}")

    sample = held[0]
    restored = fpro_forward(model, sample.degraded).data
    for name, img in (("degraded", sample.degraded), ("restored", restored), ("clean", sample.clean)):
        write_image(out / f"{name}.png", img)
    print(f"sample 0: {psnr(sample.degraded, sample.clean, 'y'):.2f} dB -> {psnr(restored, sample.clean, 'y'):.2f} dB")
    print(f"images in {out}/")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 400, sys.argv[2] if len(sys.argv) > 2 else "derain_demo")
