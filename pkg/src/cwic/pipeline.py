"""Run configuration and the full training procedure behind ``cwic train``.

Training has three phases:

1. pre-training with the mask forced to all ones (importance subnet idle);
2. joint fine-tuning with the importance mask and rate loss;
3. fitting the two entropy models on codes extracted from the corpus.
"""

from __future__ import annotations

import configparser
import csv
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from .autoenc import (
    STRIDE,
    ModelBundle,
    NetworkConfig,
    analyse,
    build_bundle,
    new_train_state,
    preset_rate,
    train_step,
)
from .data import load_corpus
from .entropy import TCAE_RATES, TcaeTrainConfig, evaluate_bits, remap_codes, train_entropy_model
from .errors import ConfigurationError, InputError
from .importance import ImportanceConfig

METRICS_FIELDS = ("phase", "step", "lr", "L_D", "L_R", "L_Quant", "sum_m", "bpp_est")
TCAE_FIELDS = ("model", "step", "lr", "bits_per_symbol")
REQUIRED = ("train_dir", "model_out")


@dataclass
class RunConfig:
    train_dir: str = ""
    model_out: str = ""
    metrics_csv: str = ""
    tcae_metrics_csv: str = ""
    seed: int = 0
    # network
    channels: tuple = (16, 24, 32)
    subblocks: int = 1
    n: int = 8
    # importance / quantizer
    L: int = 4
    T: int = 4
    r: float = 0.5
    r0: float = 0.0  # when set, overrides r and gamma with the matching preset
    gamma: float = 1e-4
    xi: float = 0.1
    alpha: float = 0.001
    # optimisation
    loss: str = "mse"
    msssim_scales: int = 3
    steps: int = 2000
    pretrain_steps: int = 500
    batch_size: int = 8
    lr: float = 1e-4
    quant_lr: float = 1e-4
    patience: int = 5
    # entropy models
    order: str = "inclined"
    code_groups: int = 8
    imp_groups: int = 8
    tcae_resblocks: int = 3
    tcae_steps: int = 600
    tcae_batch: int = 16
    tcae_lr: float = TCAE_RATES[0]
    holdout: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.r0:
            self.r, self.gamma = preset_rate(self.r0)
        if self.loss not in ("mse", "msssim"):
            raise ConfigurationError(f"loss must be 'mse' or 'msssim', got {self.loss!r}")
        if self.steps < 0 or not 0 <= self.pretrain_steps <= self.steps:
            raise ConfigurationError("need 0 <= pretrain_steps <= steps")
        if self.batch_size < 1 or self.tcae_batch < 1:
            raise ConfigurationError("batch sizes must be positive")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigurationError("holdout must lie in [0, 1)")

    def network(self) -> NetworkConfig:
        return NetworkConfig(channels=self.channels, subblocks=self.subblocks, n=self.n)

    def importance(self) -> ImportanceConfig:
        return ImportanceConfig(L=self.L, n=self.n, r=self.r, gamma=self.gamma, xi=self.xi, alpha=self.alpha)

    def metrics_path(self) -> Path:
        return Path(self.metrics_csv or f"{self.model_out}.metrics.csv")

    def tcae_metrics_path(self) -> Path:
        return Path(self.tcae_metrics_csv or f"{self.model_out}.tcae.csv")


def _convert(name: str, default, text: str):
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"config key {name!r}: cannot parse {text!r}") from exc
    return text


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments allowed) into a :class:`RunConfig`."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = _convert(key, known[key].default, raw.strip())
    for key, v in overrides.items():
        if v is not None:
            values[key] = v
    for key in REQUIRED:
        if not values.get(key):
            raise ConfigurationError(f"missing required config key {key!r}")
    return RunConfig(**values)


def load_config(path: str | os.PathLike, **overrides) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


def load_training_images(directory: str | os.PathLike) -> np.ndarray:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"training directory {d} does not exist")
    x, paths = load_corpus(d)
    if not paths:
        raise InputError(f"no .ppm images in {d}")
    return x


def check_images(x: np.ndarray) -> None:
    h, w = x.shape[-2:]
    if h % STRIDE or w % STRIDE:
        raise ConfigurationError(f"training images are {h}x{w}; both dims must be divisible by {STRIDE}")


@dataclass
class TrainReport:
    bundle: ModelBundle
    metrics: list[dict] = field(default_factory=list)
    tcae_code_heldout: float = float("nan")  # bits per stored symbol
    tcae_imp_heldout: float = float("nan")
    heldout_bits: float = float("nan")  # total over held-out images
    heldout_uniform_bits: float = float("nan")
    seconds: float = 0.0


def extract_codes(bundle: ModelBundle, x: np.ndarray, batch: int = 32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(o', mask, qi)`` for every image, with ``qi`` as ``(N,1,h,w)``."""
    outs = []
    for s in range(0, len(x), batch):
        a = analyse(bundle, x[s : s + batch])
        outs.append((remap_codes(a.levels, a.mask), a.mask, a.qi))
    o, m, q = zip(*outs)
    return np.concatenate(o), np.concatenate(m), np.concatenate(q)


def train(
    cfg: RunConfig,
    x: np.ndarray,
    log: Callable[[dict], None] | None = None,
    tcae_log: Callable[[dict], None] | None = None,
) -> TrainReport:
    """Train a complete model bundle on ``(N,3,H,W)`` images."""
    check_images(x)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    bundle = build_bundle(
        cfg.network(), cfg.importance(), cfg.T, seed=cfg.seed,
        code_groups=cfg.code_groups, imp_groups=cfg.imp_groups, order=cfg.order, resblocks=cfg.tcae_resblocks,
    )  # fmt: skip
    state = new_train_state(bundle, lr=cfg.lr, quant_lr=cfg.quant_lr, loss=cfg.loss, msssim_scales=cfg.msssim_scales)
    state.schedule.patience = cfg.patience
    report = TrainReport(bundle)

    num = len(x)
    bs = min(cfg.batch_size, num)
    order = rng.permutation(num)
    cursor = 0
    epoch_obj: list[float] = []
    for step in range(cfg.steps):
        if cursor + bs > num:
            state.schedule.update(float(np.mean(epoch_obj)))
            epoch_obj = []
            order = rng.permutation(num)
            cursor = 0
        state.pretrain = step < cfg.pretrain_steps
        if step == cfg.pretrain_steps and step:
            state.schedule.reset()
        batch = x[order[cursor : cursor + bs]]
        cursor += bs
        m = train_step(batch, bundle, state)
        epoch_obj.append(m["L_D"] + cfg.gamma * m["L_R"] + m["L_Quant"])
        row = {"phase": "pretrain" if state.pretrain else "finetune", "step": step, **m}
        report.metrics.append(row)
        if log is not None:
            log(row)

    o, mask, qi = extract_codes(bundle, x)
    n_hold = int(round(cfg.holdout * num))
    n_hold = min(n_hold, num - 1) if num > 1 else 0
    split = num - n_hold
    tcfg = TcaeTrainConfig(
        steps=cfg.tcae_steps, batch_size=cfg.tcae_batch, seed=cfg.seed, patience=cfg.patience,
        rates=tuple(cfg.tcae_lr / TCAE_RATES[0] * r for r in TCAE_RATES),
    )  # fmt: skip
    for name, model, cub, msk in (
        ("code", bundle.tcae_code, o, mask),
        ("importance", bundle.tcae_imp, qi, np.ones_like(qi, dtype=np.uint8)),
    ):

        def _log(step, lr, bps, name=name):
            if tcae_log is not None:
                tcae_log({"model": name, "step": step, "lr": lr, "bits_per_symbol": bps})

        train_entropy_model(model, cub[:split], msk[:split], tcfg, _log)

    bundle.round_to_float32()
    if n_hold:
        ho, hm, hq = o[split:], mask[split:], qi[split:]
        report.tcae_code_heldout = evaluate_bits(bundle.tcae_code, ho, hm)
        report.tcae_imp_heldout = evaluate_bits(bundle.tcae_imp, hq, np.ones_like(hq))
        report.heldout_bits = report.tcae_code_heldout * hm.sum() + report.tcae_imp_heldout * hq.size
        report.heldout_uniform_bits = float(hm.sum() * np.log2(cfg.T + 1) + hq.size * np.log2(cfg.L))
    report.seconds = time.perf_counter() - t0
    return report


class CsvLog:
    """Append rows to a CSV file with a fixed column set, flushing each row."""

    def __init__(self, path: str | os.PathLike, columns: tuple[str, ...]):
        self.path = Path(path)
        try:
            self._f = open(self.path, "w", newline="")
        except OSError as exc:
            raise InputError(f"cannot write {self.path}: {exc}") from exc
        self._w = csv.DictWriter(self._f, fieldnames=columns, extrasaction="ignore")
        self._w.writeheader()

    def __call__(self, row: dict) -> None:
        self._w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def run_training(cfg: RunConfig) -> TrainReport:
    """Load the corpus, train, write the model file and both metric logs."""
    x = load_training_images(cfg.train_dir)
    log = CsvLog(cfg.metrics_path(), METRICS_FIELDS)
    tlog = CsvLog(cfg.tcae_metrics_path(), TCAE_FIELDS)
    try:
        report = train(cfg, x, log, tlog)
    finally:
        log.close()
        tlog.close()
    try:
        Path(cfg.model_out).write_bytes(container.save_model(report.bundle))
    except OSError as exc:
        raise InputError(f"cannot write model {cfg.model_out}: {exc}") from exc
    return report
