"""Run configuration shared by every CLI command.

Values are resolved in three layers, later layers winning: the dataclass
defaults, then the ``[run]`` section of an INI file given with ``--config``,
then explicit command-line flags.
"""
from __future__ import annotations

import configparser
import dataclasses
from fractions import Fraction
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["RunConfig", "load_ini", "parse_ratio", "source_hash"]


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    # channel
    channel: str = "awgn"
    snr_db: float = 0.0
    # rates; cbr is a list so that sweeps can take several points
    ks: int | None = None
    kd: int | None = None
    cbr: list[float] = field(default_factory=list)
    # sampling
    phi: float = 2.0
    T: int = 200
    # allocation
    eta: float = 0.5
    k: int | None = None
    k_bar_s: int | None = None
    captions: str | None = None
    calib: str | None = None
    column: str = "caption"
    # data
    data: str | None = None
    num_images: int = 10000
    n_test: int = 1000
    n_samples: int = 16
    # training
    checkpoint: str | None = None
    steps: int = 20000
    extractor_steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-4
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    p_u: float = 0.1
    # sweeps
    kind: str = "cbr"
    totals: list[int] = field(default_factory=lambda: [128, 256, 512])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, directory, command: str) -> Path:
        path = Path(directory) / "config.json"
        payload = {"command": command, "config": self.to_dict(), "source_hash": source_hash()}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def parse_ratio(text: str) -> float:
    """A number or an exact fraction such as ``1/24``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise ValueError(f"not a number or fraction: {text!r}") from e


def _convert(name: str, raw: str):
    ftype = RunConfig.__dataclass_fields__[name].type
    if raw.strip().lower() in ("", "none") and "None" in ftype:
        return None
    if ftype.startswith("list["):
        item = parse_ratio if "float" in ftype else int
        return [item(v) for v in raw.replace(",", " ").split()]
    if ftype.startswith("int"):
        return int(raw)
    if ftype.startswith("float"):
        return float(raw)
    return raw


def load_ini(path) -> dict:
    """Parse the ``[run]`` section into typed overrides; unknown keys are an error."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep "T" distinct from "t"
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("run"):
        raise ValueError(f"{path}: missing [run] section")
    known = RunConfig.__dataclass_fields__
    out = {}
    for key, raw in parser.items("run"):
        name = key.replace("-", "_")
        if name not in known:
            raise ValueError(f"{path}: unknown key {key!r}; known keys: {sorted(known)}")
        out[name] = _convert(name, raw)
    return out


def source_hash() -> str:
    """SHA-256 over the package sources, identifying the code that made a run."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
