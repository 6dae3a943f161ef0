"""Encoder, importance subnet and decoder, plus the combined training step.

Topology (channel counts are configurable):

* shared encoder: three stride-2 convs, each of the first two followed by a
  dense block;
* encoding-specific part: one dense block and a conv with sigmoid down to
  ``n`` code channels;
* importance subnet: two residual blocks and a conv with sigmoid down to one
  channel, fed by the shared encoder features;
* decoder: mirror image with upsampling convs (conv + depth-to-space) and a
  linear 3-channel output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import importance as imp
from . import quantizer as qz
from .entropy import Tcae, TcaeConfig
from .errors import ConfigurationError, CwicError
from .metrics import mse_loss_grad, ms_ssim_loss_grad
from .tensor import (
    Activation,
    Conv2d,
    DenseBlock,
    DepthToSpace,
    Module,
    OptimizerState,
    PlateauSchedule,
    Residual,
    Sequential,
    adam_step,
)

STRIDE = 8
LR_SCHEDULE = (1e-4, 1e-5, 1e-6)
# (r0, gamma) presets; the rate threshold is r = 2/3 * r0
RATE_PRESETS = {
    0.1: 1e-3,
    0.2: 5e-4,
    0.3: 2e-4,
    0.45: 1e-4,
    0.6: 5e-5,
    0.8: 2e-5,
    1.0: 1e-5,
}


def preset_rate(r0: float) -> tuple[float, float]:
    """``(r, gamma)`` for one of the seven expected-rate presets."""
    if r0 not in RATE_PRESETS:
        raise ConfigurationError(f"no preset for r0={r0}; choose from {sorted(RATE_PRESETS)}")
    return 2.0 / 3.0 * r0, RATE_PRESETS[r0]


class TrainingDivergedError(CwicError):
    """A loss or activation became NaN/Inf."""


@dataclass
class NetworkConfig:
    channels: tuple[int, int, int] = (16, 24, 32)
    subblocks: int = 1
    first_depth: int = 3
    depth: int = 2
    n: int = 8
    activation: str = "relu"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigurationError(f"need three positive stage widths, got {self.channels}")
        if self.n < 1 or self.subblocks < 1:
            raise ConfigurationError("n and subblocks must be positive")

    @classmethod
    def full_scale(cls) -> "NetworkConfig":
        return cls(channels=(64, 128, 256), subblocks=3, n=32)


def _dense(c: int, cfg: NetworkConfig, rng) -> DenseBlock:
    return DenseBlock(c, cfg.subblocks, cfg.first_depth, cfg.depth, cfg.activation, rng)


class CwicNet(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        act = cfg.activation
        self.children["encoder_shared"] = Sequential(
            Conv2d(3, c1, 3, stride=2, rng=rng), Activation(act), _dense(c1, cfg, rng),
            Conv2d(c1, c2, 3, stride=2, rng=rng), Activation(act), _dense(c2, cfg, rng),
            Conv2d(c2, c3, 3, stride=2, rng=rng), Activation(act),
        )  # fmt: skip
        self.children["encoder_specific"] = Sequential(
            _dense(c3, cfg, rng), Conv2d(c3, cfg.n, 3, rng=rng), Activation("sigmoid")
        )

        def res() -> Residual:
            return Residual(Sequential(Conv2d(c3, c3, 3, rng=rng), Activation(act), Conv2d(c3, c3, 3, rng=rng)))

        self.children["importance"] = Sequential(
            res(), Activation(act), res(), Activation(act), Conv2d(c3, 1, 3, rng=rng), Activation("sigmoid")
        )
        self.children["decoder"] = Sequential(
            Conv2d(cfg.n, c3, 3, rng=rng), Activation(act), _dense(c3, cfg, rng),
            Conv2d(c3, 4 * c2, 3, rng=rng), DepthToSpace(2), Activation(act), _dense(c2, cfg, rng),
            Conv2d(c2, 4 * c1, 3, rng=rng), DepthToSpace(2), Activation(act), _dense(c1, cfg, rng),
            Conv2d(c1, 4 * c1, 3, rng=rng), DepthToSpace(2), Activation(act),
            Conv2d(c1, 3, 3, rng=rng),
        )  # fmt: skip

    @property
    def shared(self) -> Module:
        return self.children["encoder_shared"]

    @property
    def specific(self) -> Module:
        return self.children["encoder_specific"]

    @property
    def importance(self) -> Module:
        return self.children["importance"]

    @property
    def decoder(self) -> Module:
        return self.children["decoder"]

    def encoder_forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(es, e)``: shared features and the sigmoid code map (``H/8 x W/8``)."""
        x = np.asarray(x, dtype=np.float64)
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ConfigurationError(f"image {h}x{w} is not divisible by {STRIDE}; pad it first")
        es = self.shared.forward(x)
        return es, self.specific.forward(es)

    def importance_forward(self, es: np.ndarray) -> np.ndarray:
        return self.importance.forward(es)

    def decoder_forward(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-3] != self.cfg.n:
            raise ConfigurationError(f"code map has {z.shape[-3]} channels, decoder expects {self.cfg.n}")
        return self.decoder.forward(z)


@dataclass
class ModelBundle:
    net_cfg: NetworkConfig
    imp_cfg: imp.ImportanceConfig
    quant: qz.QuantizerParams
    net: CwicNet
    tcae_code: Tcae
    tcae_imp: Tcae

    @property
    def n(self) -> int:
        return self.net_cfg.n

    @property
    def L(self) -> int:
        return self.imp_cfg.L

    @property
    def T(self) -> int:
        return self.quant.num_levels

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every learnt array, in a fixed order; this is the model-file manifest."""
        out = [(f"net.{k}", p.value) for k, p in self.net.named_parameters()]
        out.append(("quantizer.weights", self.quant.weights))
        out += [(f"tcae_code.{k}", p.value) for k, p in self.tcae_code.named_parameters()]
        out += [(f"tcae_imp.{k}", p.value) for k, p in self.tcae_imp.named_parameters()]
        return out

    def round_to_float32(self) -> None:
        """Make in-memory weights equal to what the model file stores."""
        for _, a in self.named_arrays():
            a[...] = a.astype(np.float32).astype(np.float64)

    def config_dict(self) -> dict:
        return {
            "network": asdict(self.net_cfg),
            "importance": asdict(self.imp_cfg),
            "levels": self.T,
            "tcae_code": asdict(self.tcae_code.cfg),
            "tcae_imp": asdict(self.tcae_imp.cfg),
        }


def build_bundle(
    net_cfg: NetworkConfig,
    imp_cfg: imp.ImportanceConfig,
    T: int,
    seed: int = 0,
    code_groups: int = 8,
    imp_groups: int = 8,
    order: str = "inclined",
    resblocks: int = 3,
) -> ModelBundle:
    if imp_cfg.n != net_cfg.n:
        raise ConfigurationError(f"importance n={imp_cfg.n} != network n={net_cfg.n}")
    rng = np.random.default_rng(seed)
    net = CwicNet(net_cfg, rng)
    tcode = Tcae(TcaeConfig(net_cfg.n, T + 1, code_groups, order, resblocks=resblocks), rng)
    timp = Tcae(TcaeConfig(1, imp_cfg.L, imp_groups, order, resblocks=resblocks), rng)
    return ModelBundle(net_cfg, imp_cfg, qz.init_params(net_cfg.n, T), net, tcode, timp)


def bundle_from_config(config: dict) -> ModelBundle:
    """Skeleton bundle (random weights) matching a ``config_dict`` layout."""
    net_cfg = NetworkConfig(**config["network"])
    imp_cfg = imp.ImportanceConfig(**config["importance"])
    tc = TcaeConfig(**config["tcae_code"])
    ti = TcaeConfig(**config["tcae_imp"])
    if tc.channels != net_cfg.n or tc.alphabet != config["levels"] + 1 or ti.alphabet != imp_cfg.L:
        raise ConfigurationError("entropy model shapes disagree with the network config")
    return ModelBundle(
        net_cfg, imp_cfg, qz.init_params(net_cfg.n, config["levels"]), CwicNet(net_cfg), Tcae(tc), Tcae(ti)
    )


# ---------------------------------------------------------------------------
# Losses and analysis


def mse_loss(xhat: np.ndarray, x: np.ndarray) -> float:
    return float(np.mean((np.asarray(xhat) - x) ** 2))


def distortion(xhat: np.ndarray, x: np.ndarray, loss: str, scales: int = 3) -> tuple[float, np.ndarray]:
    if loss == "mse":
        return mse_loss_grad(xhat, x)
    if loss == "msssim":
        return ms_ssim_loss_grad(xhat, x, scales)
    raise ConfigurationError(f"unknown distortion loss {loss!r}; use 'mse' or 'msssim'")


@dataclass
class Analysis:
    es: np.ndarray
    e: np.ndarray
    p: np.ndarray
    levels: np.ndarray
    values: np.ndarray
    qi: np.ndarray
    mask: np.ndarray
    z: np.ndarray


def analyse(bundle: ModelBundle, x: np.ndarray, full_mask: bool = False) -> Analysis:
    """Run the encoder side: features, importance map, quantization and mask."""
    es, e = bundle.net.encoder_forward(x)
    p = bundle.net.importance_forward(es)
    levels, values = qz.quantize(e, bundle.quant)
    qi = imp.quantize_importance(p, bundle.L)
    if full_mask:
        mask = np.ones(e.shape, dtype=np.uint8)
    else:
        mask = imp.build_mask(qi, bundle.n, bundle.L)
    return Analysis(es, e, p, levels, values, qi, mask, mask * values)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainState:
    net_opt: OptimizerState
    quant_opt: OptimizerState
    window: qz.LevelHistogramWindow
    schedule: PlateauSchedule
    loss: str = "mse"
    msssim_scales: int = 3
    pretrain: bool = False
    train_quantizer: bool = True
    step: int = 0
    reinit_events: list[tuple[int, int]] = field(default_factory=list)


def new_train_state(bundle: ModelBundle, lr: float = LR_SCHEDULE[0], quant_lr: float | None = None, **kw) -> TrainState:
    rates = (lr, lr / 10, lr / 100)
    return TrainState(
        net_opt=OptimizerState(lr=lr),
        quant_opt=OptimizerState(lr=quant_lr if quant_lr is not None else lr),
        window=qz.LevelHistogramWindow(bundle.n, bundle.T),
        schedule=PlateauSchedule(rates),
        **kw,
    )


def _check_finite(**arrays) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise TrainingDivergedError(f"non-finite values in {name}")


def train_step(batch: np.ndarray, bundle: ModelBundle, state: TrainState) -> dict[str, float]:
    """One combined update on a ``(N,3,H,W)`` batch; returns the step metrics.

    Distortion gradients reach the encoder through the mask product and the
    straight-through quantizer. The importance subnet is trained only by the
    two-stage relaxation (stage-1 level search, stage-2 sign proxy); the
    quantizer weights only by the quantization loss.
    """
    x = np.asarray(batch, dtype=np.float64)
    _check_finite(batch=x)
    nb = len(x)
    net = bundle.net
    cfg = bundle.imp_cfg
    net.zero_grad()

    a = analyse(bundle, x, full_mask=state.pretrain)
    xhat = net.decoder.forward(a.z)
    l_d, g_xhat = distortion(xhat, x, state.loss, state.msssim_scales)
    _check_finite(e=a.e, p=a.p, xhat=xhat, L_D=np.array(l_d))

    g_z = net.decoder.backward(g_xhat)
    g_e = a.mask * g_z
    g_es = net.specific.backward(g_e)

    h, w = a.e.shape[-2:]
    per_image_sum = a.mask.reshape(nb, -1).sum(axis=1)
    if not state.pretrain:
        below = bool(per_image_sum.sum() < cfg.r * cfg.n * h * w * nb)
        # per-image gradients: the objective sums image losses, the optimizer sees the mean
        l_star = np.stack([imp.solve_optimal_levels(g * nb, cfg, below) for g in g_z])
        g_p = imp.importance_grad(a.p, l_star[:, None], cfg.alpha, cfg.L)
        net.importance.backward(g_p)  # gradient into the shared encoder is dropped
    net.shared.backward(g_es)

    l_quant, g_s = qz.quantization_loss_grad(a.e, bundle.quant)
    if state.train_quantizer:
        adam_step({"s": bundle.quant.weights}, {"s": g_s}, state.quant_opt)
        qz.project_nonnegative(bundle.quant)
        state.window.push(qz.level_histogram(a.levels, bundle.T))
        new_q, touched = qz.monitor_and_reinit(bundle.quant, state.window)
        if touched:
            bundle.quant.weights[...] = new_q.weights
            state.reinit_events += [(state.step, k) for k in touched]

    named = dict(net.named_parameters())
    state.net_opt.lr = state.schedule.lr
    adam_step({k: p.value for k, p in named.items()}, {k: p.grad for k, p in named.items()}, state.net_opt)
    state.step += 1

    l_r = float(np.mean([imp.rate_loss(m, cfg.r) for m in a.mask]))
    bits = per_image_sum * np.log2(bundle.T) + h * w * np.log2(cfg.L)
    return {
        "L_D": l_d,
        "L_R": l_r,
        "L_Quant": l_quant,
        "sum_m": float(per_image_sum.mean()),
        "bpp_est": float(bits.mean() / (h * w * STRIDE * STRIDE)),
        "lr": state.net_opt.lr,
    }
