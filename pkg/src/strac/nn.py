"""Dense layers with optional factorized weight noise, Adam, checkpoint IO."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad

__all__ = [
    "Adam",
    "CHECKPOINT_FORMAT_VERSION",
    "Dense",
    "GradientError",
    "clip_by_global_norm",
    "load_checkpoint",
    "save_checkpoint",
    "scaled_noise",
]

CHECKPOINT_FORMAT_VERSION = 1


class GradientError(RuntimeError):
    """Non-finite gradients detected; the update was aborted."""


def scaled_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """Factorized-noise transform f(x) = sign(x) * sqrt(|x|) of a Gaussian draw."""
    x = rng.standard_normal(n)
    return np.sign(x) * np.sqrt(np.abs(x))


class Dense:
    """Linear layer ``y = x @ W + b`` with optional factorized Gaussian noise.

    With noise the effective weights are ``W_mu + W_sigma * eps_w`` where
    ``eps_w = f(eps_in) outer f(eps_out)``; disabling noise (or passing no
    sample) gives exactly the mean path, so evaluation is deterministic.
    Mean weights start uniform in +-1/sqrt(fan_in), sigma at
    ``sigma_scale/sqrt(fan_in)``.
    """

    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        noisy: bool = False,
        sigma_scale: float = 0.4,
    ):
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.has_bias = bias
        self.noisy = noisy
        bound = 1.0 / math.sqrt(in_dim)
        self.w_mu = ad.Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
        self.b_mu = ad.Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        if noisy:
            s0 = sigma_scale / math.sqrt(in_dim)
            self.w_sigma = ad.Tensor(np.full((in_dim, out_dim), s0), requires_grad=True)
            self.b_sigma = ad.Tensor(np.full(out_dim, s0), requires_grad=True) if bias else None
        else:
            self.w_sigma = None
            self.b_sigma = None

    def params(self) -> dict[str, ad.Tensor]:
        out = {f"{self.name}.w_mu": self.w_mu}
        if self.b_mu is not None:
            out[f"{self.name}.b_mu"] = self.b_mu
        if self.w_sigma is not None:
            out[f"{self.name}.w_sigma"] = self.w_sigma
            if self.b_sigma is not None:
                out[f"{self.name}.b_sigma"] = self.b_sigma
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, tensor in self.params().items():
            src = np.asarray(arrays[key], dtype=np.float64)
            if src.shape != tensor.value.shape:
                raise ValueError(f"{key}: shape {src.shape} != {tensor.value.shape}")
            tensor.value = src.copy()

    def sample_noise(self, rng: np.random.Generator):
        """One factorized noise draw; returns None for a noise-free layer."""
        if not self.noisy:
            return None
        f_in = scaled_noise(rng, self.in_dim)
        f_out = scaled_noise(rng, self.out_dim)
        eps_w = np.outer(f_in, f_out)
        eps_b = f_out.copy() if self.has_bias else None
        return eps_w, eps_b

    def __call__(self, x: ad.Tensor, noise=None) -> ad.Tensor:
        if x.value.shape[-1] != self.in_dim:
            raise ad.AutodiffUsageError(
                f"{self.name}: input dim {x.value.shape[-1]} != {self.in_dim}"
            )
        w = self.w_mu
        b = self.b_mu
        if self.noisy and noise is not None:
            eps_w, eps_b = noise
            w = self.w_mu + self.w_sigma * ad.Tensor(eps_w)
            if b is not None:
                b = self.b_mu + self.b_sigma * ad.Tensor(eps_b)
        y = x @ w
        if b is not None:
            y = y + b
        return y


class Adam:
    """Bias-corrected Adam over a named parameter dict; updates in place.

    Gradients absent from the dict are treated as zero. Non-finite
    gradients abort the step before any state is touched.
    """

    def __init__(
        self,
        params: dict[str, ad.Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        bad = []
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if g.shape != self.params[name].value.shape:
                raise ValueError(
                    f"{name}: grad shape {g.shape} != param shape {self.params[name].value.shape}"
                )
            if not np.all(np.isfinite(g)):
                bad.append(name)
        if bad:
            raise GradientError(f"non-finite gradient for: {', '.join(sorted(bad))}")

        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, tensor in self.params.items():
            g = grads.get(name)
            if g is None:
                g = 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            # in place is safe: snapshots copy the arrays, and no tape from a
            # previous forward is alive when an update applies
            tensor.value -= self.lr * (m / c1) / denom


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients down so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named float64 tensors plus a JSON meta record to an .npz container.

    Layout: one array entry per parameter name, plus ``__meta__`` holding the
    UTF-8 JSON bytes ``{"format_version": 1, ...meta}``. Stable across runs.
    """
    path = Path(path)
    record = {"format_version": CHECKPOINT_FORMAT_VERSION}
    record.update(meta or {})
    blob = np.frombuffer(json.dumps(record, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __meta__=blob, **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {meta.get('format_version')}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta
