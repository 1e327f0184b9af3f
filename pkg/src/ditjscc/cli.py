"""Command-line entry point: ``ditjscc {gen-data,train,sample,allocate,sweep}``.

Every command writes its outputs plus ``config.json`` (the effective
configuration, seed and a hash of the package sources) into ``--out``.

Exit codes: 0 success, 2 usage error, 3 missing input file, 4 invalid
argument or flag combination, 5 unreadable or incompatible checkpoint,
6 an output failed validation after writing.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .channel import CHANNEL_MODELS, ChannelConfig, cbr
from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig, load_ini, parse_ratio
from .corpus import ToyCorpus, make_toy_corpus
from .diffusion import GuidanceConfig
from .eval import BA_HEADER, SWEEP_HEADER, Evaluator, _fmt, ba_comparison, branch_ablation, half_split, plot_sweep, sweep_cbr, write_csv
from .experiments import rate_grid
from .imageio import read_ppm, write_ppm
from .kcba import AllocationConfig, KCWeights, allocate, analyze, fit_norm_stats, kc_score
from .system import SystemConfig, build_system
from .training import Trainer, TrainConfig, load_system, pretrain_extractor, save_system

__all__ = ["main", "build_parser", "EXIT_MISSING", "EXIT_INVALID", "EXIT_CHECKPOINT", "EXIT_OUTPUT"]

EXIT_OK, EXIT_MISSING, EXIT_INVALID, EXIT_CHECKPOINT, EXIT_OUTPUT = 0, 3, 4, 5, 6

MANIFEST_HEADER = ("image_id", "label", "count", "caption")
SAMPLE_HEADER = ("image_id", "label", "pred", "psnr", "feat_cos")
SUMMARY_HEADER = ("k_s", "k_d", "cbr", "psnr", "feat_cos", "toy_fid", "class_acc")
ALLOC_HEADER = ("caption_id", "wc", "ld", "sc", "kc", "k_s", "k_d")
TRAIN_LOG_COLUMNS = ("step", "loss", "grad_norm", "seconds")

log = logging.getLogger("ditjscc")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _missing(path) -> CliError:
    return CliError(EXIT_MISSING, f"file not found: {path}")


# data


def save_corpus(corpus: ToyCorpus, directory: Path) -> None:
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(corpus.images):
        write_ppm(img_dir / f"{i:05d}.ppm", img)
    rows = [[i, int(lab), int(cnt), cap] for i, (lab, cnt, cap) in
            enumerate(zip(corpus.labels, corpus.counts, corpus.captions))]
    write_csv(directory / "manifest.csv", MANIFEST_HEADER, rows)


def load_corpus(directory) -> ToyCorpus:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.is_file():
        raise _missing(manifest)
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    images = []
    for r in rows:
        p = directory / "images" / f"{int(r['image_id']):05d}.ppm"
        if not p.is_file():
            raise _missing(p)
        images.append(read_ppm(p))
    return ToyCorpus(np.stack(images), np.array([int(r["label"]) for r in rows]),
                     np.array([int(r["count"]) for r in rows]), [r["caption"] for r in rows])


def _corpus(cfg: RunConfig) -> ToyCorpus:
    return load_corpus(cfg.data) if cfg.data else make_toy_corpus(cfg.seed, cfg.num_images)


def _test_images(cfg: RunConfig) -> ToyCorpus:
    corpus = _corpus(cfg)
    if not 0 < cfg.n_test < len(corpus):
        raise CliError(EXIT_INVALID, f"--n-test must lie in (0, {len(corpus)})")
    _, test = corpus.split(cfg.n_test)
    if not 0 < cfg.n_samples <= len(test):
        raise CliError(EXIT_INVALID, f"--n-samples must lie in [1, {len(test)}]")
    return test.subset(np.arange(cfg.n_samples))


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise CliError(EXIT_INVALID, "--checkpoint is required")
    if not Path(cfg.checkpoint).is_file():
        raise _missing(cfg.checkpoint)
    try:
        system, _ = load_system(cfg.checkpoint)
    except (CheckpointError, KeyError, RuntimeError) as e:
        raise CliError(EXIT_CHECKPOINT, f"cannot load checkpoint: {e}") from e
    cfg.T = system.cfg.T  # the checkpoint decides the sampling chain length
    return system


def _channel(cfg: RunConfig) -> ChannelConfig:
    return ChannelConfig(cfg.channel, cfg.snr_db, cfg.seed)


def _check_rates(system, k_s: int, k_d: int) -> tuple[int, int]:
    cands = system.cfg.candidates
    if k_s != 0 and k_s not in cands.ks_set:
        raise CliError(EXIT_INVALID, f"--ks {k_s} is not admissible; choose from {[0, *cands.ks_set]} (0 disables the semantic branch)")
    if k_d not in cands.kd_set:
        raise CliError(EXIT_INVALID, f"--kd {k_d} is not admissible; choose from {list(cands.kd_set)}")
    if k_s + k_d == 0:
        raise CliError(EXIT_INVALID, "--ks and --kd cannot both be 0")
    return k_s, k_d


def _total_from_cbr(rho: float, H: int, W: int) -> int:
    k = rho * 3 * H * W
    if k <= 0 or abs(k - round(k)) > 1e-6:
        raise CliError(EXIT_INVALID, f"--cbr {rho} does not give a whole number of symbols for {H}x{W} images")
    return int(round(k))


def _resolve_rates(cfg: RunConfig, system) -> tuple[int, int]:
    H = system.cfg.cdit.img_size
    if cfg.cbr:
        if cfg.ks is not None or cfg.kd is not None or len(cfg.cbr) != 1:
            raise CliError(EXIT_INVALID, "give either a single --cbr or both --ks and --kd")
        k = _total_from_cbr(cfg.cbr[0], H, H)
        try:
            return _check_rates(system, *half_split(k, system.cfg.candidates.ks_set))
        except ValueError as e:
            raise CliError(EXIT_INVALID, str(e)) from e
    if cfg.ks is None or cfg.kd is None:
        raise CliError(EXIT_INVALID, "give either a single --cbr or both --ks and --kd")
    return _check_rates(system, cfg.ks, cfg.kd)


def _validate_csv(path: Path, header, n_rows: int | None = None) -> None:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != tuple(header):
        raise CliError(EXIT_OUTPUT, f"{path}: header does not match {','.join(header)}")
    if n_rows is not None and len(rows) - 1 != n_rows:
        raise CliError(EXIT_OUTPUT, f"{path}: expected {n_rows} rows, found {len(rows) - 1}")
    if any(len(r) != len(header) for r in rows):
        raise CliError(EXIT_OUTPUT, f"{path}: ragged rows")


def _emit_csv(path: Path, header, rows) -> None:
    write_csv(path, header, rows)
    _validate_csv(path, header, len(rows))


# commands


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    corpus = make_toy_corpus(cfg.seed, cfg.num_images)
    save_corpus(corpus, out)
    _validate_csv(out / "manifest.csv", MANIFEST_HEADER, len(corpus))


def cmd_train(cfg: RunConfig, out: Path) -> None:
    corpus = _corpus(cfg)
    if not 0 < cfg.n_test < len(corpus):
        raise CliError(EXIT_INVALID, f"--n-test must lie in (0, {len(corpus)})")
    train, _ = corpus.split(cfg.n_test)
    sys_cfg = SystemConfig(T=cfg.T)
    system = build_system(sys_cfg, cfg.seed)
    X = train.tensor()
    start = time.perf_counter()
    pretrain_extractor(system.extractor, X, torch.from_numpy(train.labels), steps=cfg.extractor_steps, seed=cfg.seed)
    tcfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, p_u=cfg.p_u,
                       channel=_channel(cfg), seed=cfg.seed, lr_schedule=cfg.lr_schedule,
                       warmup_steps=cfg.warmup_steps)
    trainer = Trainer(system, X, tcfg)
    # wall-clock time is kept out of the CSV so that reruns are byte-identical
    trainer.fit(log_path=out / "train_log.csv", record_time=False)
    save_system(system, out / "model.ckpt", {"system": sys_cfg.to_dict(), "run": cfg.to_dict()})
    (out / "timing.json").write_text(json.dumps({"seconds": round(time.perf_counter() - start, 1)}) + "\n")
    _validate_csv(out / "train_log.csv", TRAIN_LOG_COLUMNS)
    load_checkpoint(out / "model.ckpt")


def cmd_sample(cfg: RunConfig, out: Path) -> None:
    """Transmit test images and decode them by guided sampling."""
    system = _load_model(cfg)
    k_s, k_d = _resolve_rates(cfg, system)
    test = _test_images(cfg)
    ev = Evaluator(system, test.tensor(), test.labels, _channel(cfg), GuidanceConfig(cfg.phi), seed=cfg.seed)
    x_hat = ev.reconstruct(k_s, k_d)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    recon = (x_hat.permute(0, 2, 3, 1) * 255.0).round().clamp(0, 255).to(torch.uint8).numpy()
    for i, img in enumerate(recon):
        write_ppm(img_dir / f"{i:05d}_recon.ppm", img)
        write_ppm(img_dir / f"{i:05d}_input.ppm", test.images[i])
    rep = ev.report_for(x_hat)
    with torch.no_grad():
        pred = system.extractor.logits(x_hat).argmax(1).tolist()
    rows = [[i, int(test.labels[i]), pred[i], _fmt(rep.per_image_psnr[i]), _fmt(rep.per_image_cos[i])]
            for i in range(len(test))]
    _emit_csv(out / "metrics.csv", SAMPLE_HEADER, rows)
    H = system.cfg.cdit.img_size
    summary = [k_s, k_d, _fmt(cbr(k_s + k_d, H, H)), _fmt(rep.psnr), _fmt(rep.feat_cos), _fmt(rep.toy_fid),
               _fmt(rep.class_acc)]
    _emit_csv(out / "summary.csv", SUMMARY_HEADER, [summary])


def _read_captions(path, column: str) -> list[str]:
    p = Path(path)
    if not p.is_file():
        raise _missing(p)
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".csv":
        reader = csv.DictReader(text.splitlines())
        if column not in (reader.fieldnames or []):
            raise CliError(EXIT_INVALID, f"{p}: no column {column!r}; found {reader.fieldnames}")
        return [r[column] for r in reader]
    return [line for line in text.splitlines() if line.strip()]


def _allocation_config(cfg: RunConfig, calib: list[str], candidates) -> tuple[AllocationConfig, object]:
    H = SystemConfig().cdit.img_size
    if cfg.k is not None and cfg.cbr:
        raise CliError(EXIT_INVALID, "give either --k or --cbr, not both")
    if cfg.k is not None:
        k = cfg.k
    elif len(cfg.cbr) == 1:
        k = _total_from_cbr(cfg.cbr[0], H, H)
    else:
        raise CliError(EXIT_INVALID, "the total budget needs --k or a single --cbr")
    k_bar_s = cfg.k_bar_s if cfg.k_bar_s is not None else half_split(k, candidates.ks_set)[0]
    stats, I_bar = fit_norm_stats(calib, KCWeights())
    try:
        acfg = AllocationConfig(k=k, k_bar_s=k_bar_s, eta=cfg.eta, I_bar=I_bar, H=H, W=H)
    except ValueError as e:
        raise CliError(EXIT_INVALID, str(e)) from e
    return acfg, stats


def cmd_allocate(cfg: RunConfig, out: Path) -> None:
    if not cfg.captions:
        raise CliError(EXIT_INVALID, "--captions is required")
    captions = _read_captions(cfg.captions, cfg.column)
    if not captions:
        raise CliError(EXIT_INVALID, f"{cfg.captions}: no captions")
    # calibration defaults to the captions themselves (offline evaluation)
    calib = _read_captions(cfg.calib, cfg.column) if cfg.calib else captions
    candidates = SystemConfig().candidates
    acfg, stats = _allocation_config(cfg, calib, candidates)
    weights = KCWeights()
    rows = []
    for i, cap in enumerate(captions):
        m = analyze(cap)
        I = kc_score(m, weights, stats)
        try:
            a = allocate(I, acfg, candidates.ks_set)
        except ValueError as e:
            raise CliError(EXIT_INVALID, f"{e}; admissible k_s: {list(candidates.ks_set)}") from e
        rows.append([i, m.wc, _fmt(m.ld), _fmt(m.sc), _fmt(I), a.k_s, a.k_d])
    _emit_csv(out / "allocations.csv", ALLOC_HEADER, rows)


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    system = _load_model(cfg)
    test = _test_images(cfg)
    ev = Evaluator(system, test.tensor(), test.labels, _channel(cfg), GuidanceConfig(cfg.phi), seed=cfg.seed)
    H = system.cfg.cdit.img_size
    cands = system.cfg.candidates
    if cfg.kind == "cbr":
        points = cfg.cbr or [cbr(k, H, H) for k in cfg.totals]
        for rho in points:
            _total_from_cbr(rho, H, H)
        rows, header = sweep_cbr(ev, points), SWEEP_HEADER
    elif cfg.kind == "branch":
        grid = rate_grid(cfg.totals, system.cfg)
        if not grid:
            raise CliError(EXIT_INVALID, f"no admissible splits for totals {cfg.totals}")
        rows, header = branch_ablation(ev, grid), SWEEP_HEADER
    elif cfg.kind == "ba":
        acfg, stats = _allocation_config(cfg, test.captions, cands)
        kcba = [allocate(kc_score(analyze(c), KCWeights(), stats), acfg, cands.ks_set) for c in test.captions]
        fixed = (acfg.k_bar_s, acfg.k - acfg.k_bar_s)
        try:
            _check_rates(system, *fixed)
        except CliError as e:
            raise CliError(EXIT_INVALID, f"fixed split {fixed}: {e}") from e
        strategies = {"fixed": [fixed] * len(test), "kcba": [(a.k_s, a.k_d) for a in kcba]}
        rows, header = ba_comparison(ev, strategies), BA_HEADER
    else:
        raise CliError(EXIT_INVALID, f"--kind {cfg.kind!r}; choose from ['cbr', 'branch', 'ba']")
    path = out / f"sweep_{cfg.kind}.csv"
    _emit_csv(path, header, rows)
    if header is SWEEP_HEADER:
        plot_sweep(out / f"sweep_{cfg.kind}.svg", rows, x_col="k_s" if cfg.kind == "branch" else "cbr")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "allocate": cmd_allocate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # every default is None so that only flags actually given override the config file
    a = common.add_argument
    a("--config", help="INI file with a [run] section; flags take precedence over it")
    a("--seed", type=int)
    a("--out", help="output directory (created if needed)")
    a("--channel", choices=CHANNEL_MODELS)
    a("--snr-db", type=float)
    a("--ks", type=int, help="semantic symbols k_s")
    a("--kd", type=int, help="detail symbols k_d")
    a("--cbr", type=parse_ratio, nargs="+", help="total channel bandwidth ratio(s), e.g. 1/24")
    a("--phi", type=float, help="guidance scale")
    a("--eta", type=float, help="KC-BA adjustment strength")
    a("--k", type=int, help="total symbols for allocation")
    a("--k-bar-s", type=int, help="baseline semantic symbols for allocation")
    a("--T", type=int, help="diffusion steps for train (sampling uses the checkpoint's)")
    a("--data", help="corpus directory written by gen-data")
    a("--checkpoint")
    a("--num-images", type=int)
    a("--n-test", type=int)
    a("--n-samples", type=int)
    a("--steps", type=int)
    a("--extractor-steps", type=int)
    a("--batch-size", type=int)
    a("--lr", type=float)
    a("--lr-schedule", choices=("constant", "cosine"), help="after --warmup-steps of linear warm-up")
    a("--warmup-steps", type=int)
    a("--p-u", type=float)
    a("--captions", help="UTF-8 text (one caption per line) or CSV file")
    a("--calib", help="calibration captions for normalization (default: --captions, a non-causal offline fit)")
    a("--column", help="caption column when reading CSV")
    a("--kind", help="sweep kind: cbr, branch or ba")
    a("--totals", type=int, nargs="+", help="total symbol budgets for branch sweeps")
    a("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ditjscc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write the procedural toy corpus as PPM images plus a manifest",
        "train": "pretrain the extractor and train encoders and denoiser jointly",
        "sample": "transmit test images and reconstruct them",
        "allocate": "caption complexity scores and KC-BA rate splits as CSV",
        "sweep": "rate sweeps (cbr, branch, ba) as CSV and SVG",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        if not Path(args.config).is_file():
            raise _missing(args.config)
        try:
            values.update(load_ini(args.config))
        except ValueError as e:
            raise CliError(EXIT_INVALID, str(e)) from e
    fields = RunConfig.__dataclass_fields__
    for name, v in vars(args).items():
        if name in fields and v is not None:
            values[name] = v
    return RunConfig(**values)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out, args.command)
        COMMANDS[args.command](cfg, out)
        cfg.write(out, args.command)
    except CliError as e:
        print(f"ditjscc {args.command}: {e}", file=sys.stderr)
        return e.code
    except CheckpointError as e:
        print(f"ditjscc {args.command}: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as e:
        print(f"ditjscc {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
