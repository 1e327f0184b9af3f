"""A few-minute end-to-end run on a shrunken model.

Pretrains the frozen extractor, trains encoders and denoiser together for a
few hundred steps through a 0 dB AWGN channel, then decodes eight held-out
images at three rate splits and writes them next to the originals as one
PPM strip per split. The model is far too small and too briefly trained to
look good; the point is to see every stage run. The real experiment is
``run_acceptance_experiment.py``.

    python3 demos/train_and_sample_small.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
import torch

from ditjscc import ChannelConfig, Evaluator, GuidanceConfig, SystemConfig, TrainConfig, Trainer, build_system
from ditjscc import make_toy_corpus
from ditjscc.cdit import BlockLayout, CDiTConfig
from ditjscc.imageio import write_ppm
from ditjscc.training import pretrain_extractor

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/small_demo")
out.mkdir(parents=True, exist_ok=True)
torch.manual_seed(0)

train, test = make_toy_corpus(0, 1200).split(200)
test = test.stratified(2)  # two images per object count

cfg = SystemConfig(cdit=CDiTConfig(dim=64, cond_dim=32, heads=2, layout=BlockLayout(2, 1, 1)), T=50)
system = build_system(cfg, seed=0)
X = train.tensor()
pretrain_extractor(system.extractor, X, torch.from_numpy(train.labels), steps=300)

channel = ChannelConfig("awgn", 0.0)
trainer = Trainer(system, X, TrainConfig(steps=400, batch_size=16, lr=3e-4, channel=channel))
losses = trainer.fit(log_path=out / "train_log.csv")
print(f"loss over the first 50 steps {np.mean(losses[:50]):.3f}, last 50 {np.mean(losses[-50:]):.3f}")

ev = Evaluator(system, test.tensor(), test.labels, channel, GuidanceConfig(phi=2.0))
for k_s, k_d in ((64, 64), (128, 0), (128, 128)):
    x_hat = ev.reconstruct(k_s, k_d)
    rep = ev.report_for(x_hat)
    print(f"k_s={k_s:3d} k_d={k_d:3d}  psnr {rep.psnr:5.2f} dB  feat_cos {rep.feat_cos:.3f}  class {rep.class_acc:.2f}")
    recon = (x_hat.permute(0, 2, 3, 1) * 255).round().clamp(0, 255).to(torch.uint8).numpy()
    # originals on top, reconstructions below
    strip = np.concatenate([np.concatenate(list(test.images), 1), np.concatenate(list(recon), 1)], 0)
    write_ppm(out / f"recon_ks{k_s}_kd{k_d}.ppm", strip)
print(f"wrote {out}")
