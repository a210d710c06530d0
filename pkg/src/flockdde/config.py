"""Scenario configuration: JSON schema, validation, presets.

A run config is a single JSON document with a ``schema_version`` field.  It
is parsed into a :class:`RunConfig` holding live kernel/datum objects plus
the normalized dict (used for deterministic echoes into summaries).  Sweep
configs wrap a base run config with parameter axes addressed by dotted paths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import kernel_from_config
from .state import (
    BoxDomain,
    ConstantVelocity,
    InitialDatum,
    LinearVelocity,
    NodeSet,
    SineVelocity,
    SliceTableVelocity,
)

__all__ = ["ConfigError", "RunConfig", "SweepConfig", "PRESETS",
           "load_run_config", "load_sweep_config", "run_config_from_dict",
           "sweep_config_from_dict", "preset_dict"]

SCHEMA_VERSION = 1
DEFAULT_MAX_CELLS = 1024


class ConfigError(Exception):
    """Malformed configuration; the message names the offending field."""


def _need(mapping, key, path):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping")
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: missing required field")
    return mapping[key]


def _real(value, path, minimum=None):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a real number, got {value!r}") from None
    if not math.isfinite(out):
        raise ConfigError(f"{path}: must be finite")
    if minimum is not None and out < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {out}")
    return out


def _build_density(spec, path):
    if spec is None:
        return None
    family = _need(spec, "family", path)
    if family == "uniform":
        return None
    if family == "gaussian":
        center = np.asarray(_need(spec, "center", path), dtype=float)
        sigma = _real(_need(spec, "sigma", path), f"{path}.sigma", minimum=0.0)
        if sigma <= 0:
            raise ConfigError(f"{path}.sigma: must be positive")

        def gaussian(x, center=center, sigma=sigma):
            d2 = ((x - center[None, :]) ** 2).sum(axis=1)
            return np.exp(-d2 / (2 * sigma * sigma))

        return gaussian
    if family == "table":
        return np.asarray(_need(spec, "values", path), dtype=float)
    raise ConfigError(f"{path}.family: unknown density family {family!r}")


def _build_velocity(spec, path, seed, dim):
    family = _need(spec, "family", path)
    if family == "constant":
        return ConstantVelocity(_need(spec, "value", path))
    if family == "linear":
        return LinearVelocity(_need(spec, "matrix", path), spec.get("offset"))
    if family == "sine-perturbation":
        phase = spec.get("phase")
        if phase == "random":
            phase = np.random.default_rng(seed).uniform(0.0, 2 * np.pi, dim)
        return SineVelocity(_need(spec, "base", path),
                            _need(spec, "amplitude", path),
                            _need(spec, "wavenumber", path), phase,
                            omega=_real(spec.get("omega", 0.0), f"{path}.omega"))
    if family == "table-of-slices":
        times = _need(spec, "times", path)
        fields = [_build_velocity(s, f"{path}.fields[{i}]", seed, dim)
                  for i, s in enumerate(_need(spec, "fields", path))]
        try:
            return SliceTableVelocity(times, fields)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.family: unknown velocity family {family!r}")


def _build_datum(spec, path, seed):
    domain_spec = _need(spec, "domain", path)
    if "box" in domain_spec:
        box = np.asarray(domain_spec["box"], dtype=float)
        if box.ndim != 2 or box.shape[1] != 2:
            raise ConfigError(f"{path}.domain.box: expected [[lo, hi], ...] per axis")
        counts = _need(domain_spec, "counts", f"{path}.domain")
        try:
            domain = BoxDomain(box[:, 0], box[:, 1], counts)
        except ValueError as exc:
            raise ConfigError(f"{path}.domain: {exc}") from None
        dim = box.shape[0]
    elif "nodes" in domain_spec:
        try:
            domain = NodeSet(np.asarray(domain_spec["nodes"], dtype=float),
                             np.asarray(_need(domain_spec, "weights", f"{path}.domain"),
                                        dtype=float))
        except ValueError as exc:
            raise ConfigError(f"{path}.domain: {exc}") from None
        dim = domain.nodes.shape[1]
    else:
        raise ConfigError(f"{path}.domain: needs either 'box' or 'nodes'")
    density = _build_density(spec.get("density"), f"{path}.density")
    velocity = _build_velocity(_need(spec, "velocity", path),
                               f"{path}.velocity", seed, dim)
    return InitialDatum(domain, velocity, density)


@dataclass
class RunConfig:
    """Validated scenario: live objects plus the normalized config dict."""

    kernel: object
    datum: InitialDatum
    tau: float
    step: float
    t_end: float
    output_every: float
    interpolation: str = "cubic-hermite"
    seed: int = 0
    n_history_slices: int | None = None
    detj_tolerance: float = 1e-6
    snapshot_csv: bool = False
    raw: dict = field(default_factory=dict)


def _is_multiple(value, unit):
    k = round(value / unit)
    return k >= 1 and abs(k * unit - value) <= 1e-9 * max(1.0, abs(value))


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root: expected a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    try:
        kernel = kernel_from_config(_need(doc, "kernel", "config"))
    except ValueError as exc:
        raise ConfigError(f"kernel: {exc}") from None
    tau = _real(_need(doc, "tau", "config"), "tau", minimum=0.0)
    step = _real(_need(doc, "step", "config"), "step")
    if step <= 0:
        raise ConfigError("step: must be positive")
    t_end = _real(_need(doc, "t_end", "config"), "t_end", minimum=0.0)
    output_every = _real(doc.get("output_every", step), "output_every")
    seed = int(doc.get("seed", 0))
    datum = _build_datum(_need(doc, "datum", "config"), "datum", seed)
    if tau > 0 and not _is_multiple(tau, step):
        raise ConfigError("tau: must be a positive integer multiple of step")
    if not _is_multiple(output_every, step):
        raise ConfigError("output_every: must be a positive multiple of step")
    if t_end > 0 and not _is_multiple(t_end, step):
        raise ConfigError("t_end: must be a multiple of step")
    interpolation = doc.get("interpolation", "cubic-hermite")
    if interpolation not in ("cubic-hermite", "linear"):
        raise ConfigError(f"interpolation: unknown mode {interpolation!r}")
    n_hist = doc.get("n_history_slices")
    if n_hist is not None:
        n_hist = int(n_hist)
        if tau > 0 and n_hist < 2:
            raise ConfigError("n_history_slices: need at least 2 when tau > 0")
    return RunConfig(
        kernel=kernel, datum=datum, tau=tau, step=step, t_end=t_end,
        output_every=output_every, interpolation=interpolation, seed=seed,
        n_history_slices=n_hist,
        detj_tolerance=_real(doc.get("detj_tolerance", 1e-6), "detj_tolerance",
                             minimum=0.0),
        snapshot_csv=bool(doc.get("snapshot_csv", False)),
        raw=json.loads(json.dumps(doc)),
    )


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return run_config_from_dict(doc)


@dataclass
class SweepConfig:
    base: dict
    axes: list           # [(dotted path, [values...]), ...]
    max_workers: int
    max_cells: int

    def grid(self):
        """Cell dicts in row-major axis order, paired with their coordinates."""
        from itertools import product

        cells = []
        for combo in product(*(values for _, values in self.axes)):
            doc = json.loads(json.dumps(self.base))
            for (path, _), value in zip(self.axes, combo):
                _set_by_path(doc, path, value)
            cells.append((dict(zip((p for p, _ in self.axes), combo)), doc))
        return cells


def _set_by_path(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"axes path {dotted!r}: {key!r} not found in base config")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"axes path {dotted!r}: leaf {keys[-1]!r} not found in base config")
    node[keys[-1]] = value


def sweep_config_from_dict(doc: dict) -> SweepConfig:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}")
    base = _need(doc, "base", "sweep")
    run_config_from_dict(base)  # validate the base eagerly
    axes_spec = _need(doc, "axes", "sweep")
    if not isinstance(axes_spec, list) or not axes_spec:
        raise ConfigError("axes: must be a non-empty list")
    axes = []
    for i, axis in enumerate(axes_spec):
        path = _need(axis, "path", f"axes[{i}]")
        values = _need(axis, "values", f"axes[{i}]")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axes[{i}].values: must be a non-empty list")
        axes.append((path, values))
    max_cells = int(doc.get("max_cells", DEFAULT_MAX_CELLS))
    total = math.prod(len(v) for _, v in axes)
    if total > max_cells:
        raise ConfigError(f"axes: grid size {total} exceeds max_cells {max_cells}")
    max_workers = int(doc.get("max_workers", 1))
    if max_workers < 1:
        raise ConfigError("max_workers: must be >= 1")
    sweep = SweepConfig(base=base, axes=axes, max_workers=max_workers,
                        max_cells=max_cells)
    for coords, cell in sweep.grid():
        try:
            run_config_from_dict(cell)
        except ConfigError as exc:
            raise ConfigError(f"cell {coords}: {exc}") from None
    return sweep


def load_sweep_config(path) -> SweepConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read sweep config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return sweep_config_from_dict(doc)


PRESETS = {
    # flat kernel: velocity differences obey y' = -y, so the fitted decay
    # rate is 1 and the final d_V matches d_V(0) e^{-t_end}
    "flat-kernel-decay": {
        "schema_version": 1,
        "kernel": {"family": "cucker-smale", "beta": 0.0},
        "datum": {
            "domain": {"box": [[0.0, 1.0]], "counts": [64]},
            "density": {"family": "uniform"},
            "velocity": {"family": "linear", "matrix": [[0.5]], "offset": [0.0]},
        },
        "tau": 0.5, "step": 0.001, "t_end": 5.0, "output_every": 0.01,
        "interpolation": "cubic-hermite", "seed": 0,
    },
    # heavy tail (beta <= 1/2): the certificate holds for any datum and delay
    "unconditional-beta025": {
        "schema_version": 1,
        "kernel": {"family": "cucker-smale", "beta": 0.25},
        "datum": {
            "domain": {"box": [[0.0, 1.0]], "counts": [32]},
            "density": {"family": "uniform"},
            "velocity": {"family": "sine-perturbation", "base": [0.0],
                          "amplitude": [0.4], "wavenumber": [1.5], "phase": [0.4]},
        },
        "tau": 0.2, "step": 0.002, "t_end": 5.0, "output_every": 0.01,
        "interpolation": "cubic-hermite", "seed": 0,
    },
    # steep negative slope: Jacobian hits zero at ln 2, inside the classifier
    # bound 1/(w2_minus - w0) = 1
    "riccati-blowup": {
        "schema_version": 1,
        "kernel": {"family": "cucker-smale", "beta": 0.0},
        "datum": {
            "domain": {"box": [[0.0, 1.0]], "counts": [64]},
            "density": {"family": "uniform"},
            "velocity": {"family": "linear", "matrix": [[-2.0]], "offset": [0.0]},
        },
        "tau": 0.1, "step": 0.001, "t_end": 2.0, "output_every": 0.005,
        "interpolation": "cubic-hermite", "seed": 0,
    },
}


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return json.loads(json.dumps(PRESETS[name]))
