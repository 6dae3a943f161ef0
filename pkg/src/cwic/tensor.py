"""Small dense tensor engine with hand-written backward passes.

Feature cuboids are numpy arrays laid out as ``(channels, height, width)``;
the batched kernels below take ``(batch, channels, height, width)`` and the
public single-cuboid helpers add/remove the batch axis. Everything runs in
float64 so gradients can be checked against finite differences.

There is no autograd. Each :class:`Module` caches what it needs during
``forward`` and consumes it in ``backward``; only one forward may be in
flight per module instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError

DTYPE = np.float64


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ConfigurationError(f"expected a (C,H,W) or (N,C,H,W) array, got ndim={x.ndim}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> None:
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[1] != in_ch:
        raise ConfigurationError(
            f"conv input channels: input has {x.shape[1]}, kernel expects {in_ch}"
        )
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} or padding={padding}")
    for axis, size, k in (("height", x.shape[2], kh), ("width", x.shape[3], kw)):
        if size + 2 * padding < k:
            raise ConfigurationError(f"conv {axis}: padded size {size + 2 * padding} < kernel {k}")


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Cross-correlation with zero padding.

    ``x`` is ``(C,H,W)`` or ``(N,C,H,W)``; ``weight`` is
    ``(out_channels, in_channels, kh, kw)``.
    """
    xb, single = _as_batch(x)
    _check_conv(xb, weight, stride, padding)
    _, _, kh, kw = weight.shape
    cols = _windows(xb, kh, kw, stride, padding)
    out = np.tensordot(cols, weight, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(input_grad, kernel_grad, bias_grad)`` for :func:`conv2d_forward`."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    _check_conv(xb, weight, stride, padding)
    n, c, h, w = xb.shape
    out_ch, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if gb.shape != (n, out_ch, ho, wo):
        raise ConfigurationError(
            f"upstream gradient shape {gb.shape} does not match conv output {(n, out_ch, ho, wo)}"
        )
    cols = _windows(xb, kh, kw, stride, padding)
    bias_grad = gb.sum(axis=(0, 2, 3))
    kernel_grad = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))
    dcols = np.tensordot(gb, weight, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + hspan : stride, b : b + wspan : stride] += dcols[
                :, :, :, :, a, b
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + h, padding : padding + w]
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), kernel_grad, bias_grad


# Clamp keeps sigmoid outputs strictly inside (0, 1) in double precision.
_SIGMOID_EPS = 1e-15


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return np.clip(y, _SIGMOID_EPS, 1.0 - _SIGMOID_EPS)


def sigmoid_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return y * (1.0 - y) * grad


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def depth_to_space(x: np.ndarray, factor: int) -> np.ndarray:
    """Move ``factor**2`` channel blocks into spatial ``factor x factor`` tiles.

    Channel ``c * f**2 + di * f + dj`` lands at output channel ``c``, offset
    ``(di, dj)`` inside each tile, so ``[a, b, c, d]`` becomes ``[[a, b], [c, d]]``.
    """
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    f = int(factor)
    if f < 1 or c % (f * f):
        raise ConfigurationError(f"depth_to_space: channels={c} not divisible by factor^2={f * f}")
    out = xb.reshape(n, c // (f * f), f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
    out = np.ascontiguousarray(out.reshape(n, c // (f * f), h * f, w * f))
    return out[0] if single else out


def space_to_depth(x: np.ndarray, factor: int) -> np.ndarray:
    """Exact inverse of :func:`depth_to_space`."""
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    f = int(factor)
    if f < 1 or h % f or w % f:
        raise ConfigurationError(f"space_to_depth: spatial dims {(h, w)} not divisible by {f}")
    out = xb.reshape(n, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4)
    out = np.ascontiguousarray(out.reshape(n, c * f * f, h // f, w // f))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected ADAM update.

    Parameter arrays are updated in place (and also returned) so modules that
    hold references to them see the new values.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ConfigurationError(f"adam: gradient shape {g.shape} != param shape {value.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


class PlateauSchedule:
    """Step through ``rates`` when the epoch objective stops decreasing.

    The next rate is adopted once the objective has failed to improve on its
    best value for ``patience`` successive epochs.
    """

    def __init__(self, rates, patience: int = 5):
        self.rates = tuple(rates)
        self.patience = patience
        self.index = 0
        self.best = np.inf
        self.stale = 0

    @property
    def lr(self) -> float:
        return self.rates[self.index]

    def update(self, objective: float) -> float:
        if objective < self.best:
            self.best = objective
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience and self.index + 1 < len(self.rates):
                self.index += 1
                self.stale = 0
        return self.lr

    def reset(self) -> None:
        """Forget the best objective (the loss definition changed); keep the rate."""
        self.best = np.inf
        self.stale = 0


# ---------------------------------------------------------------------------
# Layer modules


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)


class Module:
    def __init__(self) -> None:
        self.params: dict[str, Param] = {}
        self.children: dict[str, Module] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    __call__ = forward

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad[...] = 0.0


class Conv2d(Module):
    """Same-padded convolution; an optional binary ``mask`` trims kernel taps."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        rng: np.random.Generator | None = None,
        mask: np.ndarray | None = None,
        scale: float | None = None,
    ):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel_size // 2
        self.mask = None if mask is None else np.asarray(mask, dtype=DTYPE)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if self.mask is not None and self.mask.shape != shape:
            raise ConfigurationError(f"mask shape {self.mask.shape} != kernel shape {shape}")
        fan_in = in_channels * kernel_size * kernel_size
        if self.mask is not None:
            fan_in = max(1.0, self.mask.sum() / out_channels)
        std = scale if scale is not None else np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=shape)
        if self.mask is not None:
            w *= self.mask
        self.params["weight"] = Param(w)
        self.params["bias"] = Param(np.zeros(out_channels))
        self._x: np.ndarray | None = None

    def effective_weight(self) -> np.ndarray:
        w = self.params["weight"].value
        return w if self.mask is None else w * self.mask

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.effective_weight(), self.params["bias"].value, self.stride, self.padding)

    def backward(self, grad):
        dx, dw, db = conv2d_backward(self._x, self.effective_weight(), grad, self.stride, self.padding)
        if self.mask is not None:
            dw *= self.mask
        self.params["weight"].grad += dw
        self.params["bias"].grad += db
        return dx


class Activation(Module):
    KINDS = ("relu", "sigmoid", "tanh", "identity")

    def __init__(self, kind: str = "relu"):
        super().__init__()
        if kind not in self.KINDS:
            raise ConfigurationError(f"unknown activation {kind!r}; choose from {self.KINDS}")
        self.kind = kind
        self._cache: np.ndarray | None = None

    def forward(self, x):
        if self.kind == "relu":
            self._cache = x
            return relu_forward(x)
        if self.kind == "sigmoid":
            y = sigmoid_forward(x)
        elif self.kind == "tanh":
            y = np.tanh(x)
        else:
            y = x
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cache
        if self.kind == "relu":
            return relu_backward(y, grad)
        if self.kind == "sigmoid":
            return sigmoid_backward(y, grad)
        if self.kind == "tanh":
            return (1.0 - y * y) * grad
        return grad


class DepthToSpace(Module):
    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return depth_to_space(x, self.factor)

    def backward(self, grad):
        return space_to_depth(grad, self.factor)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.children[str(i)] = layer

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.children.values())):
            grad = layer.backward(grad)
        return grad


class Residual(Module):
    """``x + body(x)``."""

    def __init__(self, body: Module):
        super().__init__()
        self.children["body"] = body

    def forward(self, x):
        return x + self.children["body"].forward(x)

    def backward(self, grad):
        return grad + self.children["body"].backward(grad)


class DenseBlock(Module):
    """Densely connected sub-blocks followed by a 1x1 transition back to ``channels``.

    Sub-block ``j`` sees the channel concatenation of the block input and the
    outputs of sub-blocks ``0..j-1``. The first sub-block has ``first_depth``
    conv layers, the rest ``depth`` each.
    """

    def __init__(
        self,
        channels: int,
        subblocks: int = 1,
        first_depth: int = 3,
        depth: int = 2,
        activation: str = "relu",
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.subblocks = subblocks
        for j in range(subblocks):
            layers: list[Module] = []
            n_conv = first_depth if j == 0 else depth
            for i in range(n_conv):
                cin = channels * (j + 1) if i == 0 else channels
                layers += [Conv2d(cin, channels, 3, rng=rng), Activation(activation)]
            self.children[f"sub{j}"] = Sequential(*layers)
        self.children["transition"] = Conv2d(channels * (subblocks + 1), channels, 1, rng=rng)

    def forward(self, x):
        feats = [x]
        for j in range(self.subblocks):
            feats.append(self.children[f"sub{j}"].forward(np.concatenate(feats, axis=-3)))
        return self.children["transition"].forward(np.concatenate(feats, axis=-3))

    def backward(self, grad):
        c = self.channels
        g = self.children["transition"].backward(grad)
        grads = [g[..., i * c : (i + 1) * c, :, :] for i in range(self.subblocks + 1)]
        grads = [gi.copy() for gi in grads]
        for j in reversed(range(self.subblocks)):
            gin = self.children[f"sub{j}"].backward(grads[j + 1])
            for i in range(j + 1):
                grads[i] += gin[..., i * c : (i + 1) * c, :, :]
        return grads[0]
