"""Pipeline configuration: one JSON document, every field defaulted.

Unknown keys are rejected with their dotted path so typos never pass
silently. ``PipelineConfig.defaults()`` is the documented default; the CLI
prints it with ``widearea pipeline --print-default-config``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

CONTROLLER_CASES = ("exciter_only", "pss", "wadc_strong", "wadc_weak", "pss_wadc")
MODEL_NAMES = ("two_area", "chain")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "model": {"name": "two_area", "n_areas": 4, "gens_per_area": 2, "seed": 0},
    # disturbance used for coherency windows and for every closed-loop case
    "scenario": {
        "disturbances": [{"kind": "pulse", "target": "gen1.u", "t_start": 1.0,
                          "duration": 0.1, "magnitude": 0.2}],
        "t_end": 20.0,
        "sample_hz": 50.0,
        "dt_internal": 0.001,
    },
    # identification experiment: one pulse per generator input
    "probe": {"t_first": 2.0, "spacing": 6.0, "duration": 0.1, "magnitude": 0.1, "noise_std": 0.0},
    "sysid": {"k": 8, "N": 250, "detrend": False, "decimate": 1, "ridge": 1e-8},
    "admm": {"rho": 1.0, "eps_abs": 1e-8, "eps_rel": 1e-6, "max_iter": 500, "metric": "curvature"},
    "coherency": {"k": None, "sigma": None, "landmarks": None, "seed": 0, "window_s": 10.0, "exact": False},
    "wadc": {"zeta_target": 0.15, "Tw": 10.0, "phi_max_deg": 60.0, "m_max": 4, "vmin": -0.15, "vmax": 0.15},
    "pss": {"gain": 0.01, "Tw": 10.0, "T1": 0.15, "T2": 0.05},
    "delay_ms": 200.0,
    "robustness_delays_ms": [400.0],
    "controllers": list(CONTROLLER_CASES),
    "relative_speed": None,
    "seed": None,
    "timeout_ms": 20000.0,
    "out": "run",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and key != "scenario":
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], val, where + ".")
        elif key == "scenario":
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            allowed = set(base[key]) | {"noise_std", "noise_seed"}
            for sk in val:
                if sk not in allowed:
                    raise ConfigError(f"unknown config key '{where}.{sk}'")
            out[key] = {**base[key], **copy.deepcopy(val)}
        else:
            out[key] = copy.deepcopy(val)
    return out


def _num(d: dict, key: str, path: str, lo=None, hi=None, integer=False, allow_none=False):
    v = d[key]
    if v is None and allow_none:
        return
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if integer:
        ok = ok and float(v) == int(v)
    if not ok:
        raise ConfigError(f"config key '{path}{key}' must be {'an integer' if integer else 'a number'}")
    if lo is not None and v < lo:
        raise ConfigError(f"config key '{path}{key}'={v} below minimum {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"config key '{path}{key}'={v} above maximum {hi}")


@dataclass
class PipelineConfig:
    data: dict

    @staticmethod
    def defaults() -> dict:
        return copy.deepcopy(DEFAULTS)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineConfig":
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls.from_dict({})
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def __getitem__(self, key):
        return self.data[key]

    def override(self, **kw) -> "PipelineConfig":
        d = copy.deepcopy(self.data)
        for k, v in kw.items():
            if v is not None:
                d[k] = v
        out = PipelineConfig(d)
        out.validate()
        return out

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True)

    def validate(self) -> None:
        d = self.data
        m = d["model"]
        if m["name"] not in MODEL_NAMES:
            raise ConfigError(f"config key 'model.name' must be one of {MODEL_NAMES}")
        _num(m, "n_areas", "model.", 2, 64, integer=True)
        _num(m, "gens_per_area", "model.", 1, 64, integer=True)
        _num(m, "seed", "model.", 0, integer=True)
        sc = d["scenario"]
        if not isinstance(sc["disturbances"], list) or not sc["disturbances"]:
            raise ConfigError("config key 'scenario.disturbances' must be a non-empty list")
        _num(sc, "t_end", "scenario.", 1.0)
        _num(sc, "sample_hz", "scenario.", 1.0)
        _num(sc, "dt_internal", "scenario.", 1e-6, 1.0)
        p = d["probe"]
        for key in ("t_first", "spacing", "duration", "magnitude"):
            _num(p, key, "probe.", 0.0)
        if not p["spacing"] > 0 or not p["duration"] > 0:
            raise ConfigError("config keys 'probe.spacing' and 'probe.duration' must be positive")
        _num(p, "noise_std", "probe.", 0.0)
        s = d["sysid"]
        _num(s, "k", "sysid.", 2, 64, integer=True)
        _num(s, "N", "sysid.", 4, integer=True)
        _num(s, "decimate", "sysid.", 1, 100, integer=True)
        _num(s, "ridge", "sysid.", 0.0)
        if not isinstance(s["detrend"], bool):
            raise ConfigError("config key 'sysid.detrend' must be true or false")
        a = d["admm"]
        _num(a, "rho", "admm.", 1e-12)
        _num(a, "eps_abs", "admm.", 0.0)
        _num(a, "eps_rel", "admm.", 0.0)
        _num(a, "max_iter", "admm.", 1, integer=True)
        if a["metric"] not in ("curvature", "identity"):
            raise ConfigError("config key 'admm.metric' must be 'curvature' or 'identity'")
        c = d["coherency"]
        _num(c, "k", "coherency.", 1, integer=True, allow_none=True)
        _num(c, "sigma", "coherency.", 1e-300, allow_none=True)
        _num(c, "landmarks", "coherency.", 1, integer=True, allow_none=True)
        _num(c, "seed", "coherency.", 0, integer=True)
        _num(c, "window_s", "coherency.", 0.1)
        w = d["wadc"]
        _num(w, "zeta_target", "wadc.", 1e-6, 0.999)
        _num(w, "Tw", "wadc.", 1e-3)
        _num(w, "phi_max_deg", "wadc.", 1.0, 89.0)
        _num(w, "m_max", "wadc.", 1, 10, integer=True)
        _num(w, "vmin", "wadc.", hi=-1e-12)
        _num(w, "vmax", "wadc.", lo=1e-12)
        ps = d["pss"]
        _num(ps, "gain", "pss.", 0.0)
        for key in ("Tw", "T1", "T2"):
            _num(ps, key, "pss.", 1e-6)
        _num(d, "delay_ms", "", 0.0, 5000.0)
        if not isinstance(d["robustness_delays_ms"], list):
            raise ConfigError("config key 'robustness_delays_ms' must be a list")
        for x in d["robustness_delays_ms"]:
            if not isinstance(x, (int, float)) or isinstance(x, bool) or not 0 <= x <= 5000:
                raise ConfigError("config key 'robustness_delays_ms' entries must lie in [0, 5000]")
        cases = d["controllers"]
        if not isinstance(cases, list) or not cases:
            raise ConfigError("config key 'controllers' must be a non-empty list")
        for cname in cases:
            if cname not in CONTROLLER_CASES:
                raise ConfigError(f"config key 'controllers' has unknown case {cname!r}")
        rs = d["relative_speed"]
        if rs is not None and not (isinstance(rs, list) and len(rs) == 2 and all(isinstance(x, str) for x in rs)):
            raise ConfigError("config key 'relative_speed' must be null or [gen, gen]")
        _num(d, "seed", "", 0, integer=True, allow_none=True)
        _num(d, "timeout_ms", "", 1.0)
        if not isinstance(d["out"], str) or not d["out"]:
            raise ConfigError("config key 'out' must be a non-empty string")
