"""MLP encoder/decoder and the per-step moving-window cost."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np

from . import autodiff as ad
from .distances import DistanceSpec

Activation = Literal["relu", "sigmoid", "tanh", "linear"]

_ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "linear": lambda v: v,
}


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    latent_dim: int
    encoder_layers: tuple[tuple[int, str], ...] = ((200, "relu"),) * 3
    decoder_layers: tuple[tuple[int, str], ...] = ((200, "relu"),) * 2
    output_activation: str = "sigmoid"
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(tuple(x) for x in self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(tuple(x) for x in self.decoder_layers))
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.latent_dim > self.input_dim:
            raise ValueError(f"latent_dim {self.latent_dim} exceeds input_dim {self.input_dim}")
        for width, act in self.encoder_layers + self.decoder_layers:
            if width < 1:
                raise ValueError("layer widths must be positive")
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.output_activation not in ("sigmoid", "tanh", "linear"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    def layers(self, part: str) -> list[tuple[int, int, str]]:
        """(fan_in, fan_out, activation) for every dense layer of ``enc`` or ``dec``."""
        if part == "enc":
            widths = [(w, a) for w, a in self.encoder_layers] + [(self.latent_dim, "linear")]
            fan_in = self.input_dim
        else:
            widths = [(w, a) for w, a in self.decoder_layers] + [(self.input_dim, self.output_activation)]
            fan_in = self.latent_dim
        out = []
        for width, act in widths:
            out.append((fan_in, width, act))
            fan_in = width
        return out

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "encoder_layers": [list(x) for x in self.encoder_layers],
            "decoder_layers": [list(x) for x in self.decoder_layers],
            "output_activation": self.output_activation,
            "use_bias": self.use_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetSpec:
        return cls(**d)


@dataclass(frozen=True)
class CostConfig:
    lam: float = 1.0
    distance: DistanceSpec = field(default_factory=DistanceSpec)
    selection_metric: Literal["cost", "rec_plus_log_distance"] = "rec_plus_log_distance"
    # how the step cost depends on the real batch size k (window size n):
    #   "window": sum(G)/k + lam * (n/k) * F   (expected step independent of k)
    #   "recon":  sum(G)/k + lam * F
    #   "none":   sum(G) + lam * F             (raw sum, used by the gradient-flow study)
    k_scaling: Literal["window", "recon", "none"] = "window"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.selection_metric not in ("cost", "rec_plus_log_distance"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        if self.k_scaling not in ("window", "recon", "none"):
            raise ValueError(f"unknown k_scaling {self.k_scaling!r}")

    def selection(self, rec: float, dist: float) -> float:
        if self.selection_metric == "cost":
            return rec + self.lam * dist
        return rec + math.log(dist) if dist > 0 else float("-inf")


def init_params(spec: NetSpec, rng: np.random.Generator) -> ad.ParamVector:
    """He-normal weights for ReLU layers, Glorot-normal otherwise; zero biases."""
    arrays = {}
    for part in ("enc", "dec"):
        for i, (fan_in, fan_out, act) in enumerate(spec.layers(part)):
            std = math.sqrt(2.0 / fan_in) if act == "relu" else math.sqrt(2.0 / (fan_in + fan_out))
            arrays[f"{part}.{i}.W"] = rng.standard_normal((fan_in, fan_out)) * std
            if spec.use_bias:
                arrays[f"{part}.{i}.b"] = np.zeros(fan_out)
    return ad.ParamVector.from_arrays(arrays)


def zero_params(spec: NetSpec) -> ad.ParamVector:
    p = init_params(spec, np.random.default_rng(0))
    return p.with_values(np.zeros(len(p)))


def _mlp(tape: ad.Tape, spec: NetSpec, part: str, x: ad.Var) -> ad.Var:
    h = x
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (_, _, act) in enumerate(spec.layers(part)):
            w = tape.param(f"{part}.{i}.W")
            h = ad.affine(h, w, tape.param(f"{part}.{i}.b")) if spec.use_bias else ad.matmul(h, w)
            h = _ACTIVATIONS[act](h)
    return h


def encode_var(tape: ad.Tape, spec: NetSpec, x: ad.Var) -> ad.Var:
    if x.shape[-1] != spec.input_dim:
        raise ad.ShapeError(f"encoder expects dimension {spec.input_dim}, got {x.shape[-1]}")
    return _mlp(tape, spec, "enc", x)


def decode_var(tape: ad.Tape, spec: NetSpec, z: ad.Var) -> ad.Var:
    if z.shape[-1] != spec.latent_dim:
        raise ad.ShapeError(f"decoder expects dimension {spec.latent_dim}, got {z.shape[-1]}")
    return _mlp(tape, spec, "dec", z)


def encode(theta: ad.ParamVector, spec: NetSpec, x) -> np.ndarray:
    tape = ad.Tape(theta)
    return encode_var(tape, spec, tape.const(x)).value


def decode(theta: ad.ParamVector, spec: NetSpec, z) -> np.ndarray:
    tape = ad.Tape(theta)
    return decode_var(tape, spec, tape.const(z)).value


def recon_errors(theta: ad.ParamVector, spec: NetSpec, x) -> np.ndarray:
    """Per-row squared reconstruction error ``|x - D(E x)|^2``."""
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape(theta)
    xhat = decode_var(tape, spec, encode_var(tape, spec, tape.const(x))).value
    return np.sum((x - xhat) ** 2, axis=-1)


def recon_error(theta: ad.ParamVector, spec: NetSpec, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ad.ShapeError("recon_error takes a single example")
    return float(recon_errors(theta, spec, x[None, :])[0])


class BatchCost(NamedTuple):
    value: float
    grad: np.ndarray
    recon: float  # mean squared reconstruction error over the live rows
    distance: float  # unscaled distance term (nan when lambda == 0)
    tape: ad.Tape


def _recon_term(tape, spec, x):
    with tape.scope("network"):
        z = encode_var(tape, spec, x)
        err = ad.sub(x, decode_var(tape, spec, z))
        return z, ad.sqnorm(err)


def _combine(cfg: CostConfig, rec: ad.Var, dist: ad.Var | None, k: int, n: int) -> ad.Var:
    if cfg.k_scaling != "none":
        rec = ad.scale(rec, 1.0 / k)
    if dist is None:
        return rec
    weight = cfg.lam * n / k if cfg.k_scaling == "window" else cfg.lam
    return ad.add(rec, ad.scale(dist, weight))


def batch_cost(theta: ad.ParamVector, spec: NetSpec, cfg: CostConfig, live_x, frozen_z,
               prior, dirs=None) -> BatchCost:
    """Moving-window cost: distance of frozen + E(live) to the prior plus the
    reconstruction error of the live rows only, weighted per ``cfg.k_scaling``.

    ``frozen_z`` enters as constants, so the distance gradient reaches theta
    only through the ``k`` live latents.
    """
    live_x = np.asarray(live_x, dtype=np.float64)
    frozen_z = np.asarray(frozen_z, dtype=np.float64).reshape(-1, spec.latent_dim)
    k = live_x.shape[0]
    if k < 1:
        raise ValueError("need at least one live example")
    n = k + frozen_z.shape[0]
    parts = {}

    def program(tape, x):
        z_live, rec = _recon_term(tape, spec, x)
        parts["recon"] = float(rec.value) / k
        if cfg.lam == 0.0:
            parts["distance"] = float("nan")
            return _combine(cfg, rec, None, k, n)
        if frozen_z.shape[0]:
            with tape.scope("buffer"):
                frozen = tape.const(frozen_z)
            latents = ad.concat_rows(frozen, z_live)
        else:
            latents = z_live
        with tape.scope("distance"):
            dist = cfg.distance(latents, prior, dirs)
        parts["distance"] = float(dist.value)
        return _combine(cfg, rec, dist, k, n)

    value, tape = ad.evaluate(program, theta, live_x)
    return BatchCost(value, ad.backward(tape), parts["recon"], parts["distance"], tape)


def classical_cost(theta: ad.ParamVector, spec: NetSpec, cfg: CostConfig, x, prior,
                   dirs=None, *, k: int | None = None) -> BatchCost:
    """Full-batch cost with every latent live.

    ``x`` is ``(n, N)`` or a stack ``(M, n, N)`` of batches; for a stack the
    value and gradient are summed over the stack. ``k`` is the divisor used
    by ``cfg.k_scaling`` (default n, the classical batch).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-2]
    k = n if k is None else k
    stacks = int(np.prod(x.shape[:-2], dtype=np.int64))
    parts = {}

    def program(tape, xv):
        z, rec = _recon_term(tape, spec, xv)
        parts["recon"] = float(rec.value) / (n * stacks)
        if cfg.lam == 0.0:
            parts["distance"] = float("nan")
            return _combine(cfg, rec, None, k, n)
        with tape.scope("distance"):
            dist = cfg.distance(z, prior, dirs)
        if dist.shape:
            dist = ad.total(dist)
        parts["distance"] = float(dist.value) / stacks
        return _combine(cfg, rec, dist, k, n)

    value, tape = ad.evaluate(program, theta, x)
    return BatchCost(value, ad.backward(tape), parts["recon"], parts["distance"], tape)
