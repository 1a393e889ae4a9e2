"""Experiment configuration files.

A config is a single JSON object::

    {
      "model":    {"name": "two_state", "beta": 1.0},
      "protocol": {"T": 1.0, "steps": [[0, 0.0], [1.0, 1.0]]},
      "kernel":   {"kind": "finite_metropolis"},
      "mode": "estimate",            # estimate | bk | corollary | convergence | check-assumptions | oracle
      "N": 100000, "grid_steps": 100, "master_seed": 1, "substeps_per_segment": 1,
      "grids": [10, 100],            # convergence only
      "observable": {...},           # corollary only
      "bands": {"sigmas": 4.0},
      "allow_broken": false
    }
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .hamiltonian import build_model
from .kernel import SamplerConfig, build_kernel
from .protocol import Protocol

MODES = ("estimate", "bk", "corollary", "convergence", "check-assumptions", "oracle")
_KNOWN = {"model", "protocol", "kernel", "mode", "N", "grid_steps", "master_seed", "substeps_per_segment",
          "grids", "observable", "bands", "allow_broken", "burn_in", "outputs", "oracle", "stderr_method"}


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj


def digest(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of ``cfg`` without its seed."""
    body = {k: v for k, v in cfg.items() if k != "master_seed"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _int_field(raw, key, default, lo=1):
    v = raw.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < lo:
        raise ConfigError(f"{key}: must be an integer >= {lo}, got {v!r}")
    return v


@dataclass
class ExperimentConfig:
    raw: dict
    model: object
    protocol: Protocol
    kernel: object
    mode: str
    N: int
    grid_steps: int
    master_seed: int
    substeps_per_segment: int
    grids: list = field(default_factory=list)
    sigmas: float = 4.0
    allow_broken: bool = False
    burn_in: Optional[int] = 10_000
    stderr_method: str = "jackknife"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        unknown = sorted(set(raw) - _KNOWN)
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        for key in ("model", "protocol", "kernel"):
            if key not in raw:
                raise ConfigError(f"{key}: missing")
        mode = raw.get("mode", "estimate")
        if mode not in MODES:
            raise ConfigError(f"mode: '{mode}' is not one of {', '.join(MODES)}")
        try:
            model = build_model(raw["model"])
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from exc
        protocol = Protocol.from_json(raw["protocol"])
        if protocol.lambda_dim != model.lambda_dim:
            raise ConfigError(f"protocol: control dimension {protocol.lambda_dim} does not match "
                              f"model '{model.name}' ({model.lambda_dim})")
        try:
            kernel = build_kernel(raw["kernel"], model)
        except ConfigError as exc:
            raise ConfigError(f"kernel: {exc}") from exc
        seed = raw.get("master_seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            raise ConfigError(f"master_seed: must be an integer in [0, 2^64), got {seed!r}")
        grids = raw.get("grids", [])
        if not isinstance(grids, list) or not all(isinstance(g, int) and g >= 1 for g in grids):
            raise ConfigError("grids: must be a list of positive integers")
        if mode == "convergence" and not grids:
            raise ConfigError("grids: required (non-empty) for convergence mode")
        bands = raw.get("bands", {})
        if not isinstance(bands, dict):
            raise ConfigError("bands: must be an object")
        sigmas = bands.get("sigmas", 4.0)
        if not isinstance(sigmas, (int, float)) or sigmas <= 0:
            raise ConfigError("bands.sigmas: must be a positive number")
        allow_broken = raw.get("allow_broken", False)
        if not isinstance(allow_broken, bool):
            raise ConfigError("allow_broken: must be true or false")
        burn_in = raw.get("burn_in", 10_000)
        if burn_in is not None and (not isinstance(burn_in, int) or burn_in < 1):
            raise ConfigError("burn_in: must be a positive integer or null")
        stderr_method = raw.get("stderr_method", "jackknife")
        if stderr_method not in ("jackknife", "batch_means"):
            raise ConfigError("stderr_method: must be 'jackknife' or 'batch_means'")
        return cls(raw=raw, model=model, protocol=protocol, kernel=kernel, mode=mode,
                   N=_int_field(raw, "N", 10_000), grid_steps=_int_field(raw, "grid_steps", 100),
                   master_seed=seed, substeps_per_segment=_int_field(raw, "substeps_per_segment", 1),
                   grids=grids, sigmas=float(sigmas), allow_broken=allow_broken, burn_in=burn_in,
                   stderr_method=stderr_method)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_json(path))

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(kernel=self.kernel, grid_steps=self.grid_steps, master_seed=self.master_seed,
                             substeps_per_segment=self.substeps_per_segment, burn_in=self.burn_in)

    @property
    def digest(self) -> str:
        return digest(self.raw)


def observable_from_spec(spec: Optional[dict], model):
    """``(f, bound, vectorized)`` for a corollary-mode observable.

    Kinds: ``{"kind": "indicator", "state": s}`` (finite models),
    ``{"kind": "clip", "bound": M}`` (``f(x) = clip(x_0, -M, M)``),
    ``{"kind": "constant", "value": c}``.
    """
    if spec is None:
        spec = {"kind": "indicator", "state": 0} if model.is_finite else {"kind": "clip", "bound": 10.0}
    kind = spec.get("kind")
    if kind == "indicator":
        if not model.is_finite:
            raise ConfigError("observable.indicator: only for finite-state models")
        s = spec.get("state", 0)
        if not isinstance(s, int) or not 0 <= s < model.n_states:
            raise ConfigError(f"observable.state: must be a state index in [0, {model.n_states})")
        return (lambda x: 1.0 if int(x) == s else 0.0), 1.0, False
    if kind == "clip":
        if model.is_finite:
            raise ConfigError("observable.clip: only for continuous models")
        m = float(spec.get("bound", 10.0))
        if model.dim == 1:
            return (lambda x: np.clip(x, -m, m)), m, True
        return (lambda x: float(np.clip(np.asarray(x)[0], -m, m))), m, False
    if kind == "constant":
        c = float(spec.get("value", 1.0))
        return (lambda x: c), abs(c), False
    raise ConfigError(f"observable.kind: unknown '{kind}'")
