"""Experiment configuration: a single YAML tree, strictly validated.

Unknown keys are rejected (no silent defaults for misspellings), seeds are
mandatory wherever a seeded recipe is referenced, and epsilon targets are
normalized to decreasing order.  The full grammar is documented in the
README; every shipped experiment under ``configs/`` is an instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from . import bundles as bd
from . import geometry as geo
from . import subobjects as so
from .flow import FlowControls


class ConfigError(ValueError):
    """Schema violation; the message lists every offense found."""


_BASE_KEYS = {"kind", "n", "tau", "n_r", "n_theta", "r_overlap", "equator_split"}
_BUNDLE_KEYS = {"name", "rank", "alpha", "a", "k", "k1", "k2"}
_METRIC_KEYS = {"recipe", "base_recipe", "seed", "amplitude", "kind", "chart"}
_INCLUSION_KEYS = {"name"}
_FLOW_KEYS = {"dt0", "t_max", "eps_targets", "stop_at_target", "m_stop",
              "blowup_logh", "cfl_safety", "trace_stride",
              "checkpoint_stride", "normalize", "det_project", "flag"}
_FUNCTIONAL_KEYS = {"paths", "n_t"}
_OUTPUT_KEYS = {"directory", "formats"}
_TOP_KEYS = {"base", "bundle", "initial_metric", "reference_metric",
             "inclusion", "flow", "functional", "outputs", "label"}


@dataclass
class ExperimentConfig:
    base: dict
    bundle: dict
    initial_metric: dict
    reference_metric: dict | None
    inclusion: dict | None
    flow: dict
    functional: dict
    outputs: dict
    label: str = ""

    def build_geometry(self) -> geo.BaseGeometry:
        b = self.base
        if b["kind"] == "torus":
            return geo.build_torus(complex(b["tau"][0], b["tau"][1]), b["n"])
        return geo.build_sphere(b["n_r"], b["n_theta"],
                                b.get("r_overlap", 1.2),
                                b.get("equator_split", 1.0))

    def build_bundle(self) -> bd.BundleSpec:
        params = {k: v for k, v in self.bundle.items() if k != "name"}
        if "a" in params:
            params["a"] = complex(params["a"][0], params["a"][1])
        return bd.make_bundle(self.bundle["name"], self.base["kind"], **params)

    def build_metric(self, geom, spec, which: str = "initial_metric") -> bd.MetricField:
        m = dict(getattr(self, which) or {"recipe": "identity"})
        return _build_metric(geom, spec, m)

    def build_inclusion(self, geom, spec):
        if not self.inclusion:
            raise ConfigError("this subcommand needs an 'inclusion' section")
        name = self.inclusion["name"]
        if name == "euler":
            return so.make_inclusion("euler", geom)
        return so.make_inclusion(name, geom, amb_spec=spec)

    def flow_controls(self, out_dir=None) -> FlowControls:
        f = dict(self.flow)
        eps = tuple(sorted(set(f.get("eps_targets", ())), reverse=True))
        return FlowControls(
            dt0=float(f.get("dt0", 1e-4)),
            t_max=float(f.get("t_max", 1.0)),
            eps_targets=eps,
            stop_at_target=bool(f.get("stop_at_target", False)),
            m_stop=f.get("m_stop"),
            blowup_logh=float(f.get("blowup_logh", 50.0)),
            cfl_safety=float(f.get("cfl_safety", 0.2)),
            normalize=bool(f.get("normalize", True)),
            det_project=bool(f.get("det_project", False)),
            trace_stride=int(f.get("trace_stride", 100)),
            checkpoint_stride=int(f.get("checkpoint_stride", 0)),
            out_dir=out_dir,
        )


def _build_metric(geom, spec, m: dict) -> bd.MetricField:
    recipe = m.get("recipe", "identity")
    if recipe in ("identity", "fs", "atiyah-default"):
        return bd.make_metric(geom, spec, recipe)
    if recipe == "conformal":
        base = bd.make_metric(geom, spec, m.get("base_recipe", _default_base(spec)))
        seed = m.get("seed")
        if seed is None:
            raise ConfigError("conformal recipe with a seeded scalar needs 'seed'")
        rng = np.random.default_rng(int(seed))
        amp = float(m.get("amplitude", 0.2))
        w = rng.standard_normal(3)
        if geom.kind == "torus":
            tau = geom.params["tau"]

            def phi(z, w=w, tau=tau):
                x = np.real(z) - tau.real * np.imag(z) / tau.imag
                y = np.imag(z) / tau.imag
                return amp * (w[0] * np.cos(2 * np.pi * x) + w[1] * np.sin(2 * np.pi * y)
                              + w[2] * np.cos(2 * np.pi * (x + y)))
        else:
            def phi(z, w=w):
                rho = np.abs(z) ** 2
                return amp * (w[0] * np.real(z) + w[1] * np.imag(z)
                              + w[2] * (1 - rho)) / (1 + rho)
        return bd.make_metric(geom, spec, "conformal", base=base, phi=phi)
    if recipe == "exp_perturb":
        base = bd.make_metric(geom, spec, m.get("base_recipe", _default_base(spec)))
        seed = m.get("seed")
        if seed is None:
            raise ConfigError("exp_perturb needs 'seed'")
        amp = float(m.get("amplitude", 0.2))
        kind = m.get("kind", "bump")
        if kind == "bump":
            eta = bd.bump_endo(geom, spec, base, seed=int(seed), amplitude=amp,
                               chart=int(m.get("chart", 0)))
        elif kind == "bump_offdiag":
            eta = bd.bump_endo(geom, spec, base, seed=int(seed), amplitude=amp,
                               chart=int(m.get("chart", 0)), off_diagonal=True)
        elif kind == "trig":
            eta = bd.trig_endo(geom, spec, base, seed=int(seed), amplitude=amp)
        elif kind == "holo_offdiag":
            eta = bd.holo_offdiag_endo(geom, spec, base, seed=int(seed), amplitude=amp)
        else:
            raise ConfigError(f"unknown perturbation kind {kind!r}")
        return bd.make_metric(geom, spec, "exp_perturb", base=base, eta=eta)
    raise ConfigError(f"unknown metric recipe {recipe!r}")


def _default_base(spec) -> str:
    if spec.base_kind == "sphere":
        return "fs"
    if spec.descriptor.get("name") == "atiyah":
        return "atiyah-default"
    return "identity"


def _check_keys(section: str, given: dict, allowed: set, errors: list) -> None:
    unknown = set(given) - allowed
    if unknown:
        errors.append(f"{section}: unknown keys {sorted(unknown)} "
                      f"(allowed: {sorted(allowed)})")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML experiment configuration."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")

    errors: list[str] = []
    _check_keys("top level", raw, _TOP_KEYS, errors)

    base = raw.get("base")
    if not isinstance(base, dict):
        errors.append("missing 'base' section")
        base = {}
    else:
        _check_keys("base", base, _BASE_KEYS, errors)
        kind = base.get("kind")
        if kind == "torus":
            if "n" not in base:
                errors.append("base: torus needs 'n'")
            tau = base.get("tau")
            if not (isinstance(tau, list) and len(tau) == 2):
                errors.append("base: torus needs tau: [re, im]")
            elif tau[1] <= 0:
                errors.append("base: Im(tau) must be positive")
        elif kind == "sphere":
            for key in ("n_r", "n_theta"):
                if key not in base:
                    errors.append(f"base: sphere needs '{key}'")
        else:
            errors.append(f"base: kind must be 'torus' or 'sphere', got {kind!r}")

    bundle = raw.get("bundle")
    if not isinstance(bundle, dict) or "name" not in bundle:
        errors.append("missing 'bundle' section with a 'name'")
        bundle = {"name": "?"}
    else:
        _check_keys("bundle", bundle, _BUNDLE_KEYS, errors)
        known = {"torus": ["trivial", "flat_line", "atiyah"],
                 "sphere": ["o", "sum", "euler_ambient"]}
        kind = base.get("kind")
        if kind in known and bundle["name"] not in known[kind]:
            errors.append(f"bundle: unknown name {bundle['name']!r} for {kind}; "
                          f"catalog: {known[kind]}")
        if "a" in bundle and not (isinstance(bundle["a"], list) and len(bundle["a"]) == 2):
            errors.append("bundle: 'a' must be [re, im]")

    for sec_name in ("initial_metric", "reference_metric"):
        sec = raw.get(sec_name)
        if sec is not None:
            if not isinstance(sec, dict):
                errors.append(f"{sec_name} must be a mapping")
            else:
                _check_keys(sec_name, sec, _METRIC_KEYS, errors)
                if sec.get("recipe") == "exp_perturb" and "seed" not in sec:
                    errors.append(f"{sec_name}: exp_perturb requires a 'seed'")

    inclusion = raw.get("inclusion")
    if inclusion is not None:
        if not isinstance(inclusion, dict) or "name" not in inclusion:
            errors.append("inclusion must be a mapping with a 'name'")
        else:
            _check_keys("inclusion", inclusion, _INCLUSION_KEYS, errors)
            if inclusion["name"] not in ("euler", "coordinate", "atiyah_sub"):
                errors.append(f"inclusion: unknown name {inclusion['name']!r}; "
                              "catalog: euler, coordinate, atiyah_sub")

    flow = raw.get("flow", {})
    if flow is not None and not isinstance(flow, dict):
        errors.append("flow must be a mapping")
        flow = {}
    elif flow:
        _check_keys("flow", flow, _FLOW_KEYS, errors)

    functional = raw.get("functional", {}) or {}
    if functional:
        _check_keys("functional", functional, _FUNCTIONAL_KEYS, errors)
        bad = set(functional.get("paths", [])) - {"exp", "linear", "eigen"}
        if bad:
            errors.append(f"functional: unknown paths {sorted(bad)}")

    outputs = raw.get("outputs", {}) or {}
    if outputs:
        _check_keys("outputs", outputs, _OUTPUT_KEYS, errors)

    if errors:
        raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(errors))

    return ExperimentConfig(
        base=base, bundle=bundle,
        initial_metric=raw.get("initial_metric") or {"recipe": _guess_default(base, bundle)},
        reference_metric=raw.get("reference_metric"),
        inclusion=inclusion,
        flow=flow or {}, functional=functional, outputs=outputs,
        label=str(raw.get("label", "")),
    )


def _guess_default(base, bundle) -> str:
    if base.get("kind") == "sphere":
        return "fs"
    if bundle.get("name") == "atiyah":
        return "atiyah-default"
    return "identity"


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
