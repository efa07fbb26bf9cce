"""Run configuration: INI-style sections of ``key = value`` lines.

Sections and keys (anything else is rejected)::

    [data]       kind, size, test_size, seed, components, radius, variance,
                 noise, path, test_path
    [model]      latent_dim, encoder, decoder, output_activation, use_bias
    [cost]       distance, lambda, kernel_scale, gamma, n_directions,
                 selection_metric, k_scaling
    [optimizer]  n, k, eta, update_rule, beta1, beta2, adam_eps, etas, k_list
    [run]        steps, seed, seeds, eval_interval, output_dir, horizon,
                 oracle_samples, flow_dt, integrator

Layer lists are written ``200:relu, 200:relu``; an empty value means no
hidden layers. ``auto`` selects the default for kernel_scale and gamma.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .autoencoder import CostConfig, NetSpec
from .data import Dataset, load_idx, make_synthetic
from .distances import DistanceSpec
from .optimizer import MowConfig


class ConfigError(ValueError):
    pass


_KEYS = {
    "data": {"kind", "size", "test_size", "seed", "components", "radius", "variance", "noise", "path",
             "test_path"},
    "model": {"latent_dim", "encoder", "decoder", "output_activation", "use_bias"},
    "cost": {"distance", "lambda", "kernel_scale", "gamma", "n_directions", "selection_metric", "k_scaling"},
    "optimizer": {"n", "k", "eta", "update_rule", "beta1", "beta2", "adam_eps", "etas", "k_list"},
    "run": {"steps", "seed", "seeds", "eval_interval", "output_dir", "horizon", "oracle_samples", "flow_dt",
            "integrator"},
}

DEFAULT_ETAS = (1e-2, 5e-3, 2.5e-3, 1e-3)


@dataclass
class DataConfig:
    kind: str = "gauss_mix"
    size: int = 2000
    test_size: int = 512
    seed: int = 0
    components: int = 2
    radius: float = 3.0
    variance: float = 0.25
    noise: float = 0.05
    path: str | None = None
    test_path: str | None = None

    def load(self) -> tuple[Dataset, Dataset]:
        try:
            if self.kind == "idx":
                if not self.path:
                    raise ConfigError("[data] kind = idx needs a path")
                train = load_idx(self.path)
                test = load_idx(self.test_path) if self.test_path else train
                return train, test
            params = {}
            if self.kind == "gauss_mix":
                params = {"components": self.components, "radius": self.radius, "variance": self.variance}
            elif self.kind == "ring":
                params = {"noise": self.noise}
            train = make_synthetic(self.kind, self.size, params, self.seed)
            test = make_synthetic(self.kind, self.test_size, params, self.seed + 1)
            return train, test
        except ConfigError:
            raise
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load dataset: {exc}") from exc


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    spec: NetSpec = field(default_factory=lambda: NetSpec(2, 1, ((32, "relu"),) * 2, ((32, "relu"),) * 2, "linear"))
    mow: MowConfig = field(default_factory=MowConfig)
    etas: tuple[float, ...] = DEFAULT_ETAS
    k_list: tuple[int, ...] = (1, 32, 64)
    seeds: int = 3
    output_dir: Path = Path("runs")
    horizon: float = 0.5
    oracle_samples: int = 4096
    flow_dt: float | None = None
    integrator: str = "euler"

    def digest(self) -> str:
        """Hash of everything that shapes a training trajectory (not steps or paths)."""
        payload = {
            "data": asdict(self.data) | {"path": None, "test_path": None},
            "spec": self.spec.to_dict(),
            "mow": {k: v for k, v in asdict(self.mow).items() if k != "steps"},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _layers(text: str) -> tuple[tuple[int, str], ...]:
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        width, _, act = item.partition(":")
        out.append((int(width), act.strip() or "relu"))
    return tuple(out)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(";", ",").split(",") if v.strip())


def _auto(text: str) -> float | None:
    return None if text.strip().lower() in ("", "auto") else float(text)


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    base_dir = Path(base_dir)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")

    def get(section, key, conv, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                return conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
        return default

    def path(section, key):
        raw = get(section, key, str, None)
        return str((base_dir / raw).resolve()) if raw else None

    def boolean(text):
        if text.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if text.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    d = DataConfig()
    data = DataConfig(
        kind=get("data", "kind", str, d.kind),
        size=get("data", "size", int, d.size),
        test_size=get("data", "test_size", int, d.test_size),
        seed=get("data", "seed", int, d.seed),
        components=get("data", "components", int, d.components),
        radius=get("data", "radius", float, d.radius),
        variance=get("data", "variance", float, d.variance),
        noise=get("data", "noise", float, d.noise),
        path=path("data", "path"),
        test_path=path("data", "test_path"),
    )
    if data.kind not in ("gauss_mix", "ring", "grid_images", "idx"):
        raise ConfigError(f"unknown dataset kind {data.kind!r}")
    input_dim = {"gauss_mix": 2, "ring": 2, "grid_images": 64}.get(data.kind)

    try:
        if input_dim is None:
            input_dim = data.load()[0].dim
        ds = RunConfig().spec
        spec = NetSpec(
            input_dim=input_dim,
            latent_dim=get("model", "latent_dim", int, ds.latent_dim),
            encoder_layers=get("model", "encoder", _layers, ds.encoder_layers),
            decoder_layers=get("model", "decoder", _layers, ds.decoder_layers),
            output_activation=get("model", "output_activation", str, ds.output_activation),
            use_bias=get("model", "use_bias", boolean, True),
        )
        distance = DistanceSpec(
            kind=get("cost", "distance", str, "mmd_imq"),
            kernel_scale=get("cost", "kernel_scale", _auto, None),
            gamma=get("cost", "gamma", _auto, None),
            n_directions=get("cost", "n_directions", int, 50),
        )
        cost = CostConfig(
            lam=get("cost", "lambda", float, 1.0),
            distance=distance,
            selection_metric=get("cost", "selection_metric", str, "rec_plus_log_distance"),
            k_scaling=get("cost", "k_scaling", str, "window"),
        )
        m = MowConfig()
        mow = MowConfig(
            n=get("optimizer", "n", int, m.n),
            k=get("optimizer", "k", int, m.k),
            eta=get("optimizer", "eta", float, m.eta),
            cost=cost,
            update_rule=get("optimizer", "update_rule", str, m.update_rule),
            betas=(get("optimizer", "beta1", float, m.betas[0]), get("optimizer", "beta2", float, m.betas[1])),
            adam_eps=get("optimizer", "adam_eps", float, m.adam_eps),
            steps=get("run", "steps", int, m.steps),
            seed=get("run", "seed", int, m.seed),
            eval_interval=get("run", "eval_interval", int, m.eval_interval),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    out_dir = get("run", "output_dir", str, "runs")
    cfg = RunConfig(
        data=data,
        spec=spec,
        mow=mow,
        etas=get("optimizer", "etas", _floats, DEFAULT_ETAS),
        k_list=get("optimizer", "k_list", _ints, (1, mow.n // 2, mow.n) if mow.n > 1 else (1,)),
        seeds=get("run", "seeds", int, 3),
        output_dir=(base_dir / out_dir).resolve(),
        horizon=get("run", "horizon", float, 0.5),
        oracle_samples=get("run", "oracle_samples", int, 4096),
        flow_dt=get("run", "flow_dt", float, None),
        integrator=get("run", "integrator", str, "euler"),
    )
    if not cfg.etas or any(e <= 0 for e in cfg.etas):
        raise ConfigError("etas must be a non-empty list of positive values")
    if any(not 1 <= k <= mow.n for k in cfg.k_list):
        raise ConfigError(f"k_list values must lie in [1, {mow.n}]")
    if cfg.seeds < 1:
        raise ConfigError("seeds must be >= 1")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def with_overrides(cfg: RunConfig, **mow_fields) -> RunConfig:
    return replace(cfg, mow=replace(cfg.mow, **mow_fields))
