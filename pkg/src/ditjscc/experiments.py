"""End-to-end toy experiment behind the direction-of-effect checks.

One run trains the frozen extractor, the diffusion system and the MSE
baseline, then evaluates a fixed stratified test set at every rate split
the checks need. Raw numbers go to ``results.json``; judging them against
thresholds is left to the caller. Every expensive stage writes its output
to the run directory and is skipped when that output already exists, so an
interrupted run resumes where it stopped.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import ChannelConfig, cbr
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import ToyCorpus, make_toy_corpus
from .diffusion import GuidanceConfig, diffusion_loss
from .eval import BA_HEADER, SWEEP_HEADER, Evaluator, MetricReport, branch_ablation, plot_sweep, sweep_cbr, write_csv
from .kcba import AllocationConfig, KCWeights, allocate, analyze, fit_norm_stats, kc_score
from .system import SystemConfig, build_system, to_model_range
from .training import (BaselineConfig, BaselineJSCC, Trainer, TrainConfig, load_system, pretrain_extractor,
                       save_system, train_baseline)

__all__ = ["ExperimentConfig", "run_experiment", "rate_grid", "fixed_batch_loss"]

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    num_images: int = 10000
    n_test: int = 1000
    per_count: int = 64
    extractor_steps: int = 4000
    train_steps: int = 20000
    batch_size: int = 32
    # peak rate of a warm-up + cosine schedule, chosen by short pilots
    lr: float = 5e-4
    lr_schedule: str = "cosine"
    warmup_steps: int = 500
    p_u: float = 0.1
    snr_db: float = 0.0
    channel: str = "awgn"
    phi: float = 2.0
    totals: tuple = (128, 256, 512)
    cbr_ks: tuple = (64, 128, 256, 384, 512)
    matched_rates: tuple = (64, 64)
    baseline_steps: int = 4000
    kcba_k: int = 512
    kcba_k_bar_s: int = 256
    kcba_eta: float = 1.0
    eval_batch: int = 64
    system: dict = field(default_factory=lambda: SystemConfig().to_dict())

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(self.channel, self.snr_db, self.seed)


def rate_grid(totals, sys_cfg: SystemConfig) -> list[tuple[int, int]]:
    """All admissible splits of each total, including the semantic-off split."""
    cands = sys_cfg.candidates
    pairs = []
    for k in totals:
        if k in cands.kd_set:
            pairs.append((0, k))
        pairs.extend((ks, k - ks) for ks in cands.ks_set if ks <= k and (k - ks) in cands.kd_set)
    return pairs


def fixed_batch_loss(system, images: torch.Tensor, seed: int = 1234) -> float:
    """Loss on a fixed batch with fixed rates, noise and timesteps (a fingerprint)."""
    gen = torch.Generator().manual_seed(seed)
    x = images[:16]
    with torch.no_grad():
        c_s, c_d = system.conditions(x, 128, 128, ChannelConfig("awgn", 0.0), gen)
        t = torch.randint(1, system.schedule.T + 1, (len(x),), generator=gen)
        z0 = to_model_range(x)
        eps = torch.randn(z0.shape, generator=gen)
        return float(diffusion_loss(system.denoiser, z0, c_s, c_d, t, eps, system.schedule))


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _report_dict(rep: MetricReport) -> dict:
    return {"psnr": rep.psnr, "feat_cos": rep.feat_cos, "toy_fid": rep.toy_fid, "class_acc": rep.class_acc}


class _CachedEvaluator(Evaluator):
    """Evaluator whose per-point metrics persist as JSON in ``cache_dir``."""

    def __init__(self, cache_dir: Path, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.cache_dir = cache_dir
        cache_dir.mkdir(parents=True, exist_ok=True)

    def report(self, k_s, k_d, guidance=None):
        guidance = guidance or self.guidance
        path = self.cache_dir / f"ks{k_s}_kd{k_d}_phi{guidance.phi:g}.json"
        if path.exists():
            d = json.loads(path.read_text())
            return MetricReport(d["psnr"], d["feat_cos"], d["toy_fid"], d["class_acc"],
                                np.asarray(d["per_image_psnr"]), np.asarray(d["per_image_cos"]))
        log.info("evaluating k_s=%d k_d=%d phi=%g", k_s, k_d, guidance.phi)
        rep = super().report(k_s, k_d, guidance)
        self._recon.clear()
        _json_dump(path, {**_report_dict(rep), "per_image_psnr": rep.per_image_psnr.tolist(),
                          "per_image_cos": rep.per_image_cos.tolist()})
        return rep


def _prepare_data(cfg: ExperimentConfig) -> tuple[ToyCorpus, ToyCorpus]:
    corpus = make_toy_corpus(cfg.seed, cfg.num_images)
    train, test_pool = corpus.split(cfg.n_test)
    return train, test_pool.stratified(cfg.per_count)


def _train_system(cfg: ExperimentConfig, run: Path, train: ToyCorpus):
    ckpt = run / "model.ckpt"
    if ckpt.exists():
        system, _ = load_system(ckpt)
        return system
    sys_cfg = SystemConfig.from_dict(cfg.system)
    system = build_system(sys_cfg, cfg.seed)
    X, Y = train.tensor(), torch.from_numpy(train.labels)
    log.info("pretraining extractor for %d steps", cfg.extractor_steps)
    pretrain_extractor(system.extractor, X, Y, steps=cfg.extractor_steps, seed=cfg.seed)
    tcfg = TrainConfig(steps=cfg.train_steps, batch_size=cfg.batch_size, lr=cfg.lr, p_u=cfg.p_u,
                       channel=cfg.channel_config(), seed=cfg.seed, lr_schedule=cfg.lr_schedule,
                       warmup_steps=cfg.warmup_steps)
    trainer = Trainer(system, X, tcfg)
    losses = trainer.fit(log_path=run / "train_log.csv")
    _json_dump(run / "train_summary.json", {
        "first_100_mean": float(np.mean(losses[:100])),
        "last_100_mean": float(np.mean(losses[-100:])),
        "dropout_rate": trainer.dropped / max(trainer.seen, 1),
        "steps": trainer.step,
    })
    save_system(system, ckpt, {"system": sys_cfg.to_dict(), "experiment": asdict(cfg)})
    return system.eval()


def _train_baseline(cfg: ExperimentConfig, run: Path, system, train: ToyCorpus) -> BaselineJSCC:
    path = run / "baseline.ckpt"
    sys_cfg = system.cfg
    if path.exists():
        params, _ = load_checkpoint(path)
        model = BaselineJSCC(system.extractor, sys_cfg)
        model.load_state_dict(params)
        return model.eval()
    bcfg = BaselineConfig(*cfg.matched_rates, steps=cfg.baseline_steps, channel=cfg.channel_config(), seed=cfg.seed)
    model, losses = train_baseline(system.extractor, train.tensor(), bcfg, sys_cfg)
    save_checkpoint(model.state_dict(), path, {"baseline": asdict(bcfg)})
    _json_dump(run / "baseline_summary.json", {"last_100_mse": float(np.mean(losses[-100:]))})
    return model


def _kcba_allocations(cfg: ExperimentConfig, captions, ks_set, eta: float) -> list[tuple[int, int]]:
    weights = KCWeights()
    stats, I_bar = fit_norm_stats(captions, weights)
    acfg = AllocationConfig(k=cfg.kcba_k, k_bar_s=cfg.kcba_k_bar_s, eta=eta, I_bar=I_bar)
    out = []
    for cap in captions:
        a = allocate(kc_score(analyze(cap), weights, stats), acfg, ks_set)
        out.append((a.k_s, a.k_d))
    return out


def run_experiment(run_dir, cfg: ExperimentConfig = ExperimentConfig()) -> dict:
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    _json_dump(run / "experiment_config.json", asdict(cfg))
    torch.set_num_threads(1)
    train, test = _prepare_data(cfg)
    system = _train_system(cfg, run, train)
    baseline = _train_baseline(cfg, run, system, train)
    sys_cfg = system.cfg
    X, H = test.tensor(), test.images.shape[1]
    channel = cfg.channel_config()
    ev = _CachedEvaluator(run / "points", system, X, test.labels, channel, GuidanceConfig(cfg.phi, cfg.p_u),
                          seed=cfg.seed, batch=cfg.eval_batch)
    res: dict = {"n_test": len(test), "extractor_checksum": system.extractor.checksum(),
                 "fixed_batch_loss": fixed_batch_loss(system, X)}
    res["train"] = json.loads((run / "train_summary.json").read_text())

    # every admissible split of each total budget
    grid = rate_grid(cfg.totals, sys_cfg)
    rows = branch_ablation(ev, grid)
    write_csv(run / "branch_ablation.csv", SWEEP_HEADER, rows)
    res["grid"] = [{"k_s": ks, "k_d": kd, **_report_dict(ev.report(ks, kd))} for ks, kd in grid]

    # CBR sweep
    cbr_list = [cbr(k, H, H) for k in cfg.cbr_ks]
    rows = sweep_cbr(ev, cbr_list)
    write_csv(run / "sweep_cbr.csv", SWEEP_HEADER, rows)
    plot_sweep(run / "sweep_cbr.svg", rows)
    res["sweep_cbr"] = [dict(zip(SWEEP_HEADER, r)) for r in rows]

    # conditional vs unconditional sampling, and the MSE baseline, at the matched rate
    ks, kd = cfg.matched_rates
    res["matched"] = {"k_s": ks, "k_d": kd, "cbr": cbr(ks + kd, H, H), **_report_dict(ev.report(ks, kd))}
    res["unconditional"] = _report_dict(ev.report(0, 0, GuidanceConfig(1.0, cfg.p_u)))
    with torch.no_grad():
        gen = torch.Generator().manual_seed(cfg.seed)
        x_base = torch.cat([baseline(X[i : i + 256], ks, kd, channel, gen) for i in range(0, len(X), 256)])
    res["baseline"] = {**_report_dict(MetricReport.measure(X, x_base, test.labels, system.extractor)),
                       **json.loads((run / "baseline_summary.json").read_text())}

    # bandwidth allocation strategies on the complexity-stratified set
    k_bar_d = cfg.kcba_k - cfg.kcba_k_bar_s
    fixed = [(cfg.kcba_k_bar_s, k_bar_d)] * len(test)
    kcba = _kcba_allocations(cfg, test.captions, sys_cfg.candidates.ks_set, cfg.kcba_eta)
    kcba_eta0 = _kcba_allocations(cfg, test.captions, sys_cfg.candidates.ks_set, 0.0)
    kc_cache = run / "points" / f"kcba_eta{cfg.kcba_eta:g}.json"
    if kc_cache.exists():
        kc_rep = json.loads(kc_cache.read_text())
    else:
        kc_rep = _report_dict(ev.report_for(ev.reconstruct_per_image(kcba)))
        _json_dump(kc_cache, kc_rep)
    fixed_rep = _report_dict(ev.report(*fixed[0]))
    ba_rows = []
    for name, allocs, rep in (("fixed", fixed, fixed_rep), ("kcba", kcba, kc_rep)):
        a = np.asarray(allocs)
        ba_rows.append([name] + [f"{v:.6f}" for v in (a.sum(1).mean(), a[:, 0].mean(), a[:, 1].mean())]
                       + [f"{rep[m]:.6f}" for m in ("psnr", "feat_cos", "toy_fid", "class_acc")])
    write_csv(run / "ba_comparison.csv", BA_HEADER, ba_rows)
    res["ba"] = {
        "fixed": {**fixed_rep, "mean_k": float(np.mean([a + b for a, b in fixed]))},
        "kcba": {**kc_rep, "mean_k": float(np.mean([a + b for a, b in kcba])),
                 "ks_histogram": {str(k): int(v) for k, v in zip(*np.unique([a for a, _ in kcba], return_counts=True))}},
        "eta0_equals_fixed": kcba_eta0 == fixed,
        "eta": cfg.kcba_eta,
        "k": cfg.kcba_k,
        "k_bar_s": cfg.kcba_k_bar_s,
    }
    _json_dump(run / "results.json", res)
    return res


def summarize_frontier(grid: list[dict], metric: str = "feat_cos") -> dict:
    """Best split per total and the quality lost by moving one step either way."""
    totals = sorted({g["k_s"] + g["k_d"] for g in grid})
    out = {}
    for k in totals:
        pts = sorted((g for g in grid if g["k_s"] + g["k_d"] == k), key=lambda g: g["k_s"])
        q = [g[metric] for g in pts]
        j = int(np.argmax(q))
        out[k] = {
            "best_k_s": pts[j]["k_s"],
            "best": q[j],
            "drop_less_semantic": q[j] - q[j - 1] if j > 0 else math.nan,
            "drop_less_detail": q[j] - q[j + 1] if j + 1 < len(q) else math.nan,
        }
    return out
