"""Batch experiment runner: repeated episodes, coupling and delay sweeps.

An experiment spec (JSON file or dict) names a world, a policy, a command
protocol and trial count; the runner executes the trials with per-trial
seeds derived from the spec seed, aggregates the episode metrics and writes
deterministic summary files (same spec and seed give byte-identical
outputs). Worker processes only change wall time, never results: trials are
merged in trial order.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .metrics import EpisodeMetrics
from .policies import load_weights, scripted_policy, zero_lstm, zero_mlp
from .simulation import CommandSource, EpisodeConfig, run_episode
from .terrain import (
    Heightmap,
    corridor_world,
    flat_world,
    generate_terrain,
    navigation_world,
)

COUPLING_SWEEP_DEFAULT = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DELAY_SWEEP_DEFAULT_MS = (0.0, 30.0, 60.0, 90.0)

_WORLD_KINDS = ("flat", "corridor", "navigation", "generated", "file")
_POLICY_KINDS = ("constant", "vprop", "velocity-proportional", "mlp", "lstm")

_SUMMARY_FIELDS = (
    "success_rate", "cost_of_transport", "mean_velocity", "mean_frequency_hz",
    "mean_amplitude_rx", "mean_angular_velocity", "mean_joint_acceleration",
    "mean_power",
)


class SpecError(ValueError):
    """The experiment spec is invalid; raised before any episode runs."""


@dataclass
class ExperimentSpec:
    """Declarative description of a batch of identical-condition episodes."""

    name: str = "experiment"
    world: dict = field(default_factory=lambda: {"kind": "flat"})
    policy: dict = field(default_factory=lambda: {"kind": "constant"})
    commands: dict = field(default_factory=lambda: {"mode": "fixed", "value": [0.35, 0.0, 0.0]})
    coupling_weight: float | None = None
    delay_ms: float = 0.0
    extero_delay_ms: float | None = None
    extero_rate_hz: float | None = None
    trials: int = 1
    seed: int = 0
    episode_length: float | None = None
    config: dict = field(default_factory=dict)
    record_traces: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise SpecError("trial count must be >= 1")
        if self.workers < 1:
            raise SpecError("workers must be >= 1")
        kind = self.world.get("kind")
        if kind not in _WORLD_KINDS:
            raise SpecError(f"unknown world kind '{kind}' (choose from {_WORLD_KINDS})")
        pk = self.policy.get("kind")
        if pk not in _POLICY_KINDS:
            raise SpecError(f"unknown policy kind '{pk}' (choose from {_POLICY_KINDS})")
        if pk in ("mlp", "lstm") and not self.policy.get("weights"):
            raise SpecError(f"policy kind '{pk}' requires a 'weights' file path")
        mode = self.commands.get("mode")
        if mode not in ("fixed", "resample", "schedule"):
            raise SpecError(f"unknown command mode '{mode}'")
        if self.delay_ms < 0.0:
            raise SpecError("delay must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f_.name for f_ in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise SpecError(str(e)) from e

    @classmethod
    def from_json(cls, path) -> "ExperimentSpec":
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise SpecError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "world": self.world, "policy": self.policy,
            "commands": self.commands, "coupling_weight": self.coupling_weight,
            "delay_ms": self.delay_ms, "extero_delay_ms": self.extero_delay_ms,
            "extero_rate_hz": self.extero_rate_hz, "trials": self.trials,
            "seed": self.seed, "episode_length": self.episode_length,
            "config": self.config, "record_traces": self.record_traces,
            "workers": self.workers,
        }


def build_world(spec: ExperimentSpec) -> Heightmap:
    w = dict(spec.world)
    kind = w.pop("kind")
    if kind == "flat":
        return flat_world(**w)
    if kind == "corridor":
        return corridor_world(**w)
    if kind == "navigation":
        w.setdefault("seed", spec.seed)
        return navigation_world(**w)
    if kind == "generated":
        w.setdefault("seed", spec.seed)
        w.setdefault("difficulty", 1.0)
        return generate_terrain(**w)
    if kind == "file":
        path = w.get("path")
        if not path or not os.path.exists(path):
            raise SpecError(f"world file '{path}' does not exist")
        return Heightmap.load(path)
    raise SpecError(f"unknown world kind '{kind}'")


def build_policy(spec: ExperimentSpec, cfg: EpisodeConfig):
    p = dict(spec.policy)
    kind = p.pop("kind")
    if kind == "constant":
        return scripted_policy("constant", p.get("params"))
    if kind in ("vprop", "velocity-proportional"):
        params = dict(p.get("params") or {})
        params.setdefault("d_step", cfg.gait.d_step)
        return scripted_policy("velocity-proportional", params)
    path = p.get("weights")
    if not path or not os.path.exists(path):
        raise SpecError(f"policy weights file '{path}' does not exist")
    return load_weights(path, expect=kind)


def build_config(spec: ExperimentSpec) -> EpisodeConfig:
    try:
        cfg = EpisodeConfig.from_dict(spec.config)
    except ValueError as e:
        raise SpecError(str(e)) from e
    if spec.coupling_weight is not None:
        cfg.cpg.coupling_weight = float(spec.coupling_weight)
    cfg.sensing.proprio_delay = spec.delay_ms / 1000.0
    extero_ms = spec.extero_delay_ms if spec.extero_delay_ms is not None else spec.delay_ms
    cfg.sensing.extero_delay = extero_ms / 1000.0
    if spec.extero_rate_hz is not None:
        cfg.sensing.extero_update_period = 1.0 / spec.extero_rate_hz
    if spec.episode_length is not None:
        cfg.episode.length = float(spec.episode_length)
    return cfg


def build_command_source(spec: ExperimentSpec, cfg: EpisodeConfig) -> CommandSource:
    c = spec.commands
    mode = c["mode"]
    if mode == "fixed":
        return CommandSource("fixed", cfg, value=c.get("value", [0.0, 0.0, 0.0]))
    if mode == "schedule":
        return CommandSource("schedule", cfg, schedule=c.get("entries", []))
    return CommandSource("resample", cfg)


def _run_trial(spec_dict: dict, trial: int, trace_path: str | None):
    spec = ExperimentSpec.from_dict(spec_dict)
    cfg = build_config(spec)
    world = build_world(spec)
    policy = build_policy(spec, cfg)
    result = run_episode(
        world, cfg, policy, np.random.SeedSequence([spec.seed, trial]),
        command_source=build_command_source(spec, cfg),
        record_trace=trace_path is not None,
    )
    if trace_path is not None and result.trace is not None:
        result.trace.to_csv(trace_path)
    return result.metrics


@dataclass
class BatchResult:
    spec: ExperimentSpec
    episodes: list[EpisodeMetrics]
    summary: dict


def _nan_mean(values) -> float:
    vals = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return math.nan
    return float(np.mean(vals))


def summarize(episodes: list[EpisodeMetrics]) -> dict:
    return {
        "trials": len(episodes),
        "success_rate": float(np.mean([1.0 if m.success else 0.0 for m in episodes])),
        "cost_of_transport": _nan_mean([m.cost_of_transport for m in episodes]),
        "mean_velocity": _nan_mean([m.mean_velocity for m in episodes]),
        "mean_frequency_hz": _nan_mean([m.mean_frequency_hz for m in episodes]),
        "mean_amplitude_rx": _nan_mean([m.mean_amplitude_rx for m in episodes]),
        "mean_angular_velocity": _nan_mean([m.mean_angular_velocity for m in episodes]),
        "mean_joint_acceleration": _nan_mean([m.mean_joint_acceleration for m in episodes]),
        "mean_power": _nan_mean([m.mean_power for m in episodes]),
        "terminations": {
            status: sum(1 for m in episodes if m.termination == status)
            for status in ("timeout", "collision", "running")
        },
    }


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_experiment(spec: ExperimentSpec, out_dir: str | None = None) -> BatchResult:
    """Run all trials of one spec; optionally write summary files to out_dir.

    Outputs: episodes.jsonl (one metrics object per trial), summary.json,
    summary.csv, and trace_<trial>.csv files when the spec records traces.
    """
    cfg = build_config(spec)       # validates config
    build_world(spec)              # validates world before any episode runs
    build_policy(spec, cfg)        # validates policy/weights
    spec_dict = spec.to_dict()

    trace_paths: list[str | None] = [None] * spec.trials
    if spec.record_traces:
        if out_dir is None:
            raise SpecError("record_traces requires an output directory")
        os.makedirs(out_dir, exist_ok=True)
        trace_paths = [os.path.join(out_dir, f"trace_{t:03d}.csv")
                       for t in range(spec.trials)]

    if spec.workers > 1 and spec.trials > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            episodes = list(pool.map(_run_trial, [spec_dict] * spec.trials,
                                     range(spec.trials), trace_paths))
    else:
        episodes = [_run_trial(spec_dict, t, trace_paths[t]) for t in range(spec.trials)]

    summary = summarize(episodes)
    result = BatchResult(spec=spec, episodes=episodes, summary=summary)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "episodes.jsonl"), "w") as f:
            for t, m in enumerate(episodes):
                row = {"trial": t, "seed": [spec.seed, t]}
                row.update(m.to_dict())
                f.write(json.dumps(_json_safe(row)) + "\n")
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(_json_safe({"name": spec.name, "spec": spec.to_dict(),
                                  "summary": summary}), f, indent=2)
            f.write("\n")
        _write_summary_csv(os.path.join(out_dir, "summary.csv"),
                           [("name", spec.name)], summary)
    return result


def _write_summary_csv(path: str, key_cols: list[tuple[str, object]], summary: dict,
                       append: bool = False) -> None:
    header = [k for k, _ in key_cols] + ["trials"] + list(_SUMMARY_FIELDS)
    line = [_fmt(v) for _, v in key_cols] + [str(summary["trials"])]
    line += [_fmt(summary[k]) for k in _SUMMARY_FIELDS]
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w") as f:
        if not exists:
            f.write(",".join(header) + "\n")
        f.write(",".join(line) + "\n")


def sweep_coupling(spec: ExperimentSpec, weights=COUPLING_SWEEP_DEFAULT,
                   out_dir: str | None = None) -> list[tuple[float, dict]]:
    """Run the spec once per coupling weight; one summary row per weight."""
    rows = []
    for w in weights:
        d = spec.to_dict()
        d["coupling_weight"] = float(w)
        d["name"] = f"{spec.name}_w{w}"
        sub = ExperimentSpec.from_dict(d)
        sub_dir = os.path.join(out_dir, f"w_{w}") if out_dir is not None else None
        res = run_experiment(sub, out_dir=sub_dir)
        rows.append((float(w), res.summary))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "sweep_coupling.csv")
        if os.path.exists(path):
            os.remove(path)
        for w, summary in rows:
            _write_summary_csv(path, [("coupling_weight", w)], summary, append=True)
    return rows


def sweep_delay(spec: ExperimentSpec, delays_ms=DELAY_SWEEP_DEFAULT_MS,
                out_dir: str | None = None) -> list[tuple[float, dict]]:
    """Run the spec once per sensory delay; one summary row per delay.

    The delay applies to both the proprioceptive and exteroceptive streams
    (the default binding) unless the spec pins extero_delay_ms separately.
    """
    rows = []
    for d_ms in delays_ms:
        d = spec.to_dict()
        d["delay_ms"] = float(d_ms)
        d["name"] = f"{spec.name}_delay{d_ms}ms"
        sub = ExperimentSpec.from_dict(d)
        sub_dir = os.path.join(out_dir, f"delay_{d_ms}ms") if out_dir is not None else None
        res = run_experiment(sub, out_dir=sub_dir)
        rows.append((float(d_ms), res.summary))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "sweep_delay.csv")
        if os.path.exists(path):
            os.remove(path)
        for d_ms, summary in rows:
            _write_summary_csv(path, [("delay_ms", d_ms)], summary, append=True)
    return rows
