"""Train and evaluate the toy system behind the direction-of-effect checks.

Trains the frozen extractor (4000 steps), the joint encoder + CDiT system
(20k steps at SNR 0 dB, AWGN) and the MSE baseline, then evaluates a
256-image test set stratified by object count at every rate split the
checks use. Takes roughly five hours on one CPU core.

Each stage caches its output in the run directory, so rerunning after an
interruption picks up where it stopped. tests/test_acceptance.py reads
``results.json`` from here.

    python3 demos/run_acceptance_experiment.py [run_dir]
"""
import logging
import sys
import time

from ditjscc.experiments import ExperimentConfig, run_experiment, summarize_frontier

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
run_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/acceptance"

start = time.time()
res = run_experiment(run_dir, ExperimentConfig())
print(f"finished in {(time.time() - start) / 3600:.2f} h")

m, u, b = res["matched"], res["unconditional"], res["baseline"]
print(f"matched rate k_s={m['k_s']} k_d={m['k_d']} (CBR {m['cbr']:.4f})")
print(f"  diffusion   psnr {m['psnr']:.2f}  feat_cos {m['feat_cos']:.3f}  toy_fid {m['toy_fid']:.3f}")
print(f"  uncond      psnr {u['psnr']:.2f}  feat_cos {u['feat_cos']:.3f}  toy_fid {u['toy_fid']:.3f}")
print(f"  mse base    psnr {b['psnr']:.2f}  feat_cos {b['feat_cos']:.3f}  toy_fid {b['toy_fid']:.3f}")
for k, row in summarize_frontier(res["grid"]).items():
    print(f"total {k}: best k_s {row['best_k_s']}  feat_cos {row['best']:.4f}")
