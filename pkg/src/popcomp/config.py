"""JSON run configurations with strict key checking and ``"auto"`` expansion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .engine import ALL_NEUTRAL, ARBITRARY, SwitchEvent
from .harness import METRICS, SweepConfig
from .protocol import (
    GenericLeak,
    LeakPolicy,
    ProtocolParams,
    Variant,
    default_counter_bound,
    default_level_cap,
)

RUN_KEYS = {
    "n", "x0", "y0", "variant", "s", "m", "p", "zeta", "generic_leak", "parallel_time",
    "snapshot_every_ptime", "switches", "rest_policy", "seed", "replications", "metrics",
    "window_fraction", "ratio_threshold",
}
COUPLE_KEYS = RUN_KEYS | {"steps", "properties", "check_every", "neutral_color", "populations"}

_REST_ALIASES = {
    "all_neutral": ALL_NEUTRAL,
    "allneutral": ALL_NEUTRAL,
    "arbitrary": ARBITRARY,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    params: ProtocolParams
    x0: int
    y0: int
    parallel_time: float = 0.0
    snapshot_every_ptime: float = 1.0
    switches: tuple[SwitchEvent, ...] = ()
    rest_policy: str = ALL_NEUTRAL
    seed: int = 0
    replications: int = 1
    metrics: tuple[str, ...] = ("ratio_end",)
    window_fraction: float = 0.25
    ratio_threshold: float = 1.5
    extra: dict = field(default_factory=dict)

    def expanded(self) -> dict:
        """Every setting with ``"auto"`` values resolved, for provenance records."""
        d = {
            **self.params.as_dict(),
            "x0": self.x0,
            "y0": self.y0,
            "parallel_time": self.parallel_time,
            "snapshot_every_ptime": self.snapshot_every_ptime,
            "switches": [
                {"at": sw.at_parallel_time, "x0": sw.new_x0, "y0": sw.new_y0} for sw in self.switches
            ],
            "rest_policy": self.rest_policy,
            "seed": self.seed,
            "replications": self.replications,
            "metrics": list(self.metrics),
            "window_fraction": self.window_fraction,
            "ratio_threshold": self.ratio_threshold,
        }
        d.update(self.extra)
        return d

    def sweep(self) -> SweepConfig:
        return SweepConfig(
            params=self.params,
            x0=self.x0,
            y0=self.y0,
            parallel_time=self.parallel_time,
            seed=self.seed,
            replications=self.replications,
            switches=self.switches,
            metrics=self.metrics,
            window_fraction=self.window_fraction,
            snapshot_every_ptime=self.snapshot_every_ptime,
            rest_policy=self.rest_policy,
            ratio_threshold=self.ratio_threshold,
        )


def _int(d: dict, key: str, default=None) -> int:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key} must be an integer, got {v!r}")
    return v


def _num(d: dict, key: str, default=None) -> float:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number, got {v!r}")
    return float(v)


def _auto(d: dict, key: str, fallback: int) -> int:
    v = d.get(key, "auto")
    if v == "auto":
        return fallback
    return _int(d, key)


def parse_config(raw: dict, allowed: set[str] = RUN_KEYS) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    if "n" not in raw:
        raise ConfigError("configuration needs n")
    try:
        n = _int(raw, "n")
        variant = Variant.parse(raw.get("variant", "comparison"))
        s = _auto(raw, "s", default_level_cap(n) if n >= 2 else 1)
        m = _auto(raw, "m", default_counter_bound(n) if n >= 2 else 0) if variant.has_counter else 0
        leak = None
        if raw.get("generic_leak") is not None:
            gl = raw["generic_leak"]
            if not isinstance(gl, dict) or set(gl) - {"rate", "policy"}:
                raise ConfigError("generic_leak must be an object with keys rate and policy")
            leak = GenericLeak(_num(gl, "rate"), LeakPolicy.parse(str(gl.get("policy", "worst_case"))))
        params = ProtocolParams(
            n=n, s=s, variant=variant, m=m,
            p=_num(raw, "p", 1.0), zeta=_num(raw, "zeta", 0.0), generic_leak=leak,
        )
        x0 = _int(raw, "x0", 0)
        y0 = _int(raw, "y0", 0)
        if x0 < 0 or y0 < 0 or x0 + y0 > n:
            raise ConfigError(f"x0 + y0 must fit in n (x0={x0}, y0={y0}, n={n})")
        switches = []
        for sw in raw.get("switches", []):
            if not isinstance(sw, dict) or set(sw) != {"at", "x0", "y0"}:
                raise ConfigError("each switch needs exactly the keys at, x0, y0")
            ev = SwitchEvent(_num(sw, "at"), _int(sw, "x0"), _int(sw, "y0"))
            if ev.new_x0 + ev.new_y0 > n:
                raise ConfigError("switch baseline counts exceed n")
            switches.append(ev)
        rest = str(raw.get("rest_policy", ALL_NEUTRAL)).lower()
        if rest not in _REST_ALIASES:
            raise ConfigError(f"unknown rest_policy {raw.get('rest_policy')!r}")
        metrics = raw.get("metrics", ["ratio_end"])
        if not isinstance(metrics, list) or any(mt not in METRICS for mt in metrics):
            raise ConfigError(f"metrics must be a list drawn from {sorted(METRICS)}")
        cfg = RunConfig(
            params=params,
            x0=x0,
            y0=y0,
            parallel_time=_num(raw, "parallel_time", 0.0),
            snapshot_every_ptime=_num(raw, "snapshot_every_ptime", 1.0),
            switches=tuple(switches),
            rest_policy=_REST_ALIASES[rest],
            seed=_int(raw, "seed", 0),
            replications=_int(raw, "replications", 1),
            metrics=tuple(metrics),
            window_fraction=_num(raw, "window_fraction", 0.25),
            ratio_threshold=_num(raw, "ratio_threshold", 1.5),
            extra={k: raw[k] for k in raw if k in allowed - RUN_KEYS},
        )
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.parallel_time < 0 or cfg.snapshot_every_ptime <= 0:
        raise ConfigError("parallel_time must be >= 0 and snapshot_every_ptime > 0")
    if cfg.replications < 1:
        raise ConfigError("replications must be at least 1")
    if not 0.0 < cfg.window_fraction <= 1.0:
        raise ConfigError("window_fraction must lie in (0, 1]")
    return cfg


def load_config(path: str | Path, allowed: set[str] = RUN_KEYS) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(raw, allowed)
