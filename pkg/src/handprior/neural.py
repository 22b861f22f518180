"""Trainable building blocks on top of torch autograd.

Parameters live in a :class:`ParamStore` as float32 numpy arrays (the
checkpoint format); training code pulls torch tensors out of it, and the
finite-difference checker works on float64 copies.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteLoss, ShapeMismatch, ValidationError

Tensors = dict[str, torch.Tensor]

# Sign-pattern hooks for the finite-difference checker. While recording,
# every relu/abs call appends the sign of its input; while replaying, the
# recorded signs are used instead, which evaluates the smooth piece of the
# loss that contains the recorded point.
_KINKS: list | None = None
_REPLAY: list | None = None


def _pattern(x: torch.Tensor) -> torch.Tensor | None:
    if _REPLAY is not None:
        return _REPLAY.pop(0)
    if _KINKS is not None:
        _KINKS.append((x > 0).detach().clone())
    return None


def relu(x: torch.Tensor) -> torch.Tensor:
    mask = _pattern(x)
    if mask is not None:
        return x * mask.to(x.dtype)
    return torch.relu(x)


def absolute(x: torch.Tensor) -> torch.Tensor:
    mask = _pattern(x)
    if mask is not None:
        return x * (2 * mask.to(x.dtype) - 1)
    return x.abs()


def _kink_pattern(fn, *args):
    global _KINKS
    _KINKS = []
    try:
        out = fn(*args)
        return out, _KINKS
    finally:
        _KINKS = None


def _replay(fn, pattern, *args):
    global _REPLAY
    _REPLAY = list(pattern)
    try:
        return fn(*args)
    finally:
        _REPLAY = None


class ParamStore:
    """Ordered named float32 arrays plus the seed they were initialized from."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._arrays:
            raise ValidationError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"parameter {name!r} is not finite")
        self._arrays[name] = arr

    def merge(self, other: "ParamStore") -> None:
        for k, v in other.items():
            self.add(k, v)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self.items():
            if k.startswith(prefix):
                out.add(k, v)
        return out

    def n_params(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self.items():
            out.add(k, v.copy())
        return out

    def tensors(self, requires_grad: bool = True, dtype=torch.float32) -> Tensors:
        return {k: torch.tensor(v, dtype=dtype, requires_grad=requires_grad) for k, v in self.items()}

    def assign(self, tensors: Tensors) -> None:
        """Copy trained tensors back (names must already exist)."""
        for k, t in tensors.items():
            if k not in self._arrays:
                raise ValidationError(f"unknown parameter {k!r}")
            arr = t.detach().cpu().numpy().astype(np.float32)
            if arr.shape != self._arrays[k].shape:
                raise ShapeMismatch(f"{k}: {arr.shape} vs {self._arrays[k].shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteLoss(f"parameter {k!r} became non-finite")
            self._arrays[k] = np.ascontiguousarray(arr)

    def blob(self) -> bytes:
        return b"".join(v.astype("<f4").tobytes() for v in self._arrays.values())

    def digest(self) -> str:
        return hashlib.sha256(self.blob()).hexdigest()

    def manifest(self) -> dict:
        return {"seed": self.seed,
                "params": [{"name": k, "shape": list(v.shape), "dtype": "float32"} for k, v in self.items()]}

    def save(self, path, meta: dict | None = None) -> None:
        """``<path>.json`` manifest and ``<path>.bin`` little-endian float32 blob."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        man = self.manifest()
        if meta:
            man["meta"] = meta
        Path(str(path) + ".bin").write_bytes(self.blob())
        Path(str(path) + ".json").write_text(json.dumps(man, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path, expected: dict[str, tuple] | None = None) -> tuple["ParamStore", dict]:
        path = Path(path)
        man = json.loads(Path(str(path) + ".json").read_text())
        buf = np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f4")
        store = cls(man.get("seed", 0))
        pos = 0
        for rec in man["params"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape)) if shape else 1
            if pos + n > len(buf):
                raise ShapeMismatch("checkpoint blob shorter than its manifest")
            store.add(rec["name"], buf[pos:pos + n].reshape(shape))
            pos += n
        if pos != len(buf):
            raise ShapeMismatch("checkpoint blob longer than its manifest")
        if expected is not None:
            for k, shape in expected.items():
                if k not in store or store[k].shape != tuple(shape):
                    raise ShapeMismatch(f"checkpoint parameter {k!r} missing or misshapen")
        return store, man.get("meta", {})


# ----------------------------------------------------------------------------
# fully connected stacks


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden: tuple[int, ...]
    output_width: int
    skip_layer: int | None = None  # layer index whose input gets the network input appended

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1 or any(h < 1 for h in self.hidden):
            raise ValidationError("widths must be >= 1")
        if self.skip_layer is not None and not (1 <= self.skip_layer <= len(self.hidden)):
            raise ValidationError("skip layer index out of range")

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_width, *self.hidden, self.output_width]
        shapes = []
        for i in range(self.n_layers):
            fan_in = widths[i] + (self.input_width if i == self.skip_layer else 0)
            shapes.append((fan_in, widths[i + 1]))
        return shapes


DECODER_SPEC = MlpSpec(94, (256, 256, 256, 256), 1, skip_layer=3)


def mlp_init(spec: MlpSpec, rng: np.random.Generator, prefix: str, store: ParamStore | None = None,
             output_scale: float = 1.0) -> ParamStore:
    """Kaiming fan-in normal weights, zero biases."""
    store = store if store is not None else ParamStore()
    shapes = spec.layer_shapes()
    for i, (fi, fo) in enumerate(shapes):
        gain = 2.0 if i < len(shapes) - 1 else output_scale
        store.add(f"{prefix}.{i}.W", rng.normal(0.0, np.sqrt(gain / fi), size=(fi, fo)))
        store.add(f"{prefix}.{i}.b", np.zeros(fo))
    return store


def mlp_forward(params: Tensors, spec: MlpSpec, x: torch.Tensor, prefix: str) -> torch.Tensor:
    """(..., input_width) -> (..., output_width); ReLU on hidden layers."""
    if x.shape[-1] != spec.input_width:
        raise ShapeMismatch(f"expected input width {spec.input_width}, got {x.shape[-1]}")
    h = x
    for i in range(spec.n_layers):
        if i == spec.skip_layer:
            h = torch.cat([h, x], dim=-1)
        h = h @ params[f"{prefix}.{i}.W"] + params[f"{prefix}.{i}.b"]
        if i < spec.n_layers - 1:
            h = relu(h)
    return h


# ----------------------------------------------------------------------------
# convolutional blocks (NCHW / NCDHW tensors)


def conv_init(rng: np.random.Generator, store: ParamStore, name: str, c_in: int, c_out: int,
              k: int = 3, dims: int = 2, gain: float = 2.0) -> None:
    fan_in = c_in * k ** dims
    store.add(f"{name}.W", rng.normal(0.0, np.sqrt(gain / fan_in), size=(c_out, c_in) + (k,) * dims))
    store.add(f"{name}.b", np.zeros(c_out))


ENCODER_CHANNELS = (8, 16, 32, 64)


def conv_encoder_init(rng: np.random.Generator, c_in: int = 3, prefix: str = "enc",
                      store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    c = c_in
    for i, co in enumerate(ENCODER_CHANNELS):
        conv_init(rng, store, f"{prefix}.{i}", c, co)
        c = co
    return store


def conv_encoder_forward(params: Tensors, image: torch.Tensor, prefix: str = "enc") -> list[torch.Tensor]:
    """(B, C, H, W) -> feature maps at strides 1, 2, 4, 8 with 8/16/32/64 channels."""
    if image.ndim != 4 or image.shape[2] % 8 or image.shape[3] % 8:
        raise ShapeMismatch("encoder input must be (B, C, H, W) with H, W divisible by 8")
    feats = []
    h = image
    for i in range(len(ENCODER_CHANNELS)):
        h = relu(F.conv2d(h, params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"], padding=1))
        if i > 0:
            h = F.avg_pool2d(h, 2)
        feats.append(h)
    return feats


ENCDEC_IN = 11
ENCDEC_OUT = 4
_ENCDEC_DOWN = (16, 32, 48, 48)


def encdec_init(rng: np.random.Generator, prefix: str = "f2d", store: ParamStore | None = None) -> ParamStore:
    store = store if store is not None else ParamStore()
    c0, c1, c2, c3 = _ENCDEC_DOWN
    conv_init(rng, store, f"{prefix}.e0", ENCDEC_IN, c0)
    conv_init(rng, store, f"{prefix}.e1", c0, c1)
    conv_init(rng, store, f"{prefix}.e2", c1, c2)
    conv_init(rng, store, f"{prefix}.e3", c2, c3)
    conv_init(rng, store, f"{prefix}.u2", c3 + c2, c2)
    conv_init(rng, store, f"{prefix}.u1", c2 + c1, c1)
    conv_init(rng, store, f"{prefix}.u0", c1 + c0, c0)
    conv_init(rng, store, f"{prefix}.out", c0 + ENCDEC_IN, ENCDEC_OUT, k=1, gain=1.0)
    return store


def encdec_forward(params: Tensors, x: torch.Tensor, prefix: str = "f2d") -> torch.Tensor:
    """(B, 11, H, W) -> (B, 4, H, W): three stride-2 stages down, three up, skip links."""
    if x.ndim != 4 or x.shape[1] != ENCDEC_IN or x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeMismatch("encoder-decoder input must be (B, 11, H, W) with H, W divisible by 8")

    def conv(name, h, stride=1):
        return relu(F.conv2d(h, params[f"{prefix}.{name}.W"], params[f"{prefix}.{name}.b"],
                                   stride=stride, padding=1))

    def up(h):
        return F.interpolate(h, scale_factor=2, mode="nearest")

    e0 = conv("e0", x)
    e1 = conv("e1", e0, 2)
    e2 = conv("e2", e1, 2)
    e3 = conv("e3", e2, 2)
    u2 = conv("u2", torch.cat([up(e3), e2], 1))
    u1 = conv("u1", torch.cat([up(u2), e1], 1))
    u0 = conv("u0", torch.cat([up(u1), e0], 1))
    return F.conv2d(torch.cat([u0, x], 1), params[f"{prefix}.out.W"], params[f"{prefix}.out.b"])


# ----------------------------------------------------------------------------
# losses, gradients, optimizer


def l1_loss(pred: torch.Tensor, target: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    diff = absolute(pred - target)
    if weight is None:
        return diff.mean()
    return (diff * weight).sum() / weight.sum().clamp_min(1.0)


def check_finite(loss: torch.Tensor, step: int | None = None) -> float:
    val = float(loss.detach())
    if not np.isfinite(val):
        where = "" if step is None else f" at step {step}"
        raise NonFiniteLoss(f"loss became non-finite{where}")
    return val


def gradients(params: Tensors, loss_fn: Callable[[Tensors], torch.Tensor]) -> Tensors:
    """Reverse-mode gradient of ``loss_fn(params)`` for every tensor in ``params``."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    check_finite(loss)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return {k: (torch.zeros_like(leaves[k]) if g is None else g) for k, g in zip(leaves, grads)}


def finite_difference_check(params: Tensors, loss_fn: Callable[[Tensors], torch.Tensor], n_probes: int = 10,
                            h: float = 1e-4, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences.

    Each probe is a random unit direction over all parameters jointly; the
    directional derivative g·v is compared with (L(p+hv) - L(p-hv)) / 2h.
    When a probe segment crosses a relu/abs kink, the two evaluations reuse
    the base point's sign pattern: that piecewise-smooth continuation agrees
    with the loss around the base point, so it has the same gradient there,
    while the raw difference quotient would average two pieces. Runs in
    float64.
    """
    p64 = {k: v.detach().to(torch.float64) for k, v in params.items()}
    grads = gradients(p64, loss_fn)
    with torch.no_grad():
        _, base = _kink_pattern(loss_fn, p64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_probes):
        dirs = {k: torch.tensor(rng.normal(size=tuple(v.shape)), dtype=torch.float64) for k, v in p64.items()}
        norm = float(torch.sqrt(sum((d ** 2).sum() for d in dirs.values())))
        dirs = {k: d / norm for k, d in dirs.items()}
        plus = {k: p64[k] + h * dirs[k] for k in p64}
        minus = {k: p64[k] - h * dirs[k] for k in p64}
        with torch.no_grad():
            lp, kp = _kink_pattern(loss_fn, plus)
            lm, km = _kink_pattern(loss_fn, minus)
            smooth = len(kp) == len(base) == len(km) and all(
                torch.equal(a, b) and torch.equal(a, c) for a, b, c in zip(base, kp, km))
            if not smooth:
                lp = _replay(loss_fn, base, plus)
                lm = _replay(loss_fn, base, minus)
        analytic = float(sum((grads[k] * dirs[k]).sum() for k in p64))
        numeric = (float(lp) - float(lm)) / (2 * h)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def create(cls, params: Tensors) -> "AdamState":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(params: Tensors, grads: Tensors, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update on ``params``; returns the advanced state."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape mismatch for {k!r}")
            m = state.m[k]
            v = state.v[k]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if lr != 0.0:
                p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def step_lr(step: int, total: int, base: float = 1e-4, final: float = 1e-5, drop_at: float = 0.7) -> float:
    """Piecewise-constant schedule: ``base`` until ``drop_at`` of training, then ``final``."""
    return base if step < drop_at * total else final


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
