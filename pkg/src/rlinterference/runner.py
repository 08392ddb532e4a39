"""Experiment orchestration and run-directory persistence.

Every run is described by a ``RunSpec``; its JSON form is written to
``config.json`` and is enough to re-execute the run.  Runs live under
``<out>/<experiment>/<config-hash>/<seed>/`` next to ``series.csv`` (one row
per measurement step) and ``summary.json`` (metrics recomputed from the rows).
A run directory holding ``summary.json`` counts as complete and is skipped on
resume.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tabular
from .agents import (BATCH_SIZES, BUFFER_SIZES, HIDDEN_SIZES, TARGET_FREQS, AgentConfig,
                     DQNAgent, make_agent)
from .approx import MlpQ
from .envs import CartPole, Env, TwoRooms
from .measures import (STRATEGIES, EvalSet, aei, default_horizon, estimate_or, eti,
                       interference_dispersion, mean_std_err, offline_return, sample_pairs)
from .metrics import (aer, consecutive_stable, kendall_tau, pearson_r, sample_efficiency,
                      stable_aer)

log = logging.getLogger(__name__)

SERIES_COLUMNS = ("step", "online_return", "offline_return", "ei", "aei_buffer",
                  "aei_reservoir", "aei_discounted")
ROOM_COLUMNS = ("step", "stage", "room", "online_return", "ei_room0", "ei_room1",
                  "eti_room0", "eti_room1")
THRESHOLDS = {"two_rooms": -60.0, "cartpole": 200.0}
FULL_STEPS = {"two_rooms": 90_000, "cartpole": 20_000}
DESK_STEPS = {"two_rooms": 18_000, "cartpole": 10_000}
RETURN_WEIGHT = 0.1
EFFICIENCY_STEPS = 500
ETI_WINDOW = 10
OUT_ENV_VAR = "RLINTERFERENCE_OUT"


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


def stage_schedule(total: int) -> list[tuple[int, int]]:
    """(room, steps) triples in the 1 : 7 : 1 proportion of a 10k / 70k / 10k split."""
    first = total // 9
    second = 7 * total // 9
    return [(0, first), (1, second), (0, total - first - second)]


# ------------------------------------------------------------------ configs


@dataclass
class RunSpec:
    """Everything needed to reproduce one training run."""

    env: str
    agent: AgentConfig
    seed: int
    steps: int
    cadence: int = 100
    stages: Optional[list] = None  # [[room, steps], ...] for two_rooms
    n_pairs: int = 50
    n_rollouts: int = 10
    horizon: Optional[int] = None
    gamma: float = 0.99
    offline_rollouts: int = 10
    eval_capacity: int = 1000
    per_room: bool = False
    block_ei: bool = False

    def __post_init__(self):
        if isinstance(self.agent, dict):
            self.agent = AgentConfig.from_dict(self.agent)
        if self.env not in THRESHOLDS:
            raise ValueError(f"unknown environment {self.env!r}")
        if self.cadence < 1 or self.steps < self.cadence:
            raise ValueError("need steps >= cadence >= 1")
        if self.env == "two_rooms":
            if self.stages is None:
                self.stages = [list(s) for s in stage_schedule(self.steps)]
            self.stages = [[int(r), int(n)] for r, n in self.stages]
            if sum(n for _, n in self.stages) != self.steps:
                raise ValueError("stage lengths must add up to steps")
        elif self.stages is not None:
            raise ValueError("stages only apply to two_rooms")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["agent"] = self.agent.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunSpec":
        return cls(**data)

    def config_hash(self) -> str:
        body = self.to_dict()
        body.pop("seed")
        text = json.dumps(body, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    @property
    def resolved_horizon(self) -> int:
        return self.horizon if self.horizon is not None else default_horizon(self.gamma)

    def stage_bounds(self) -> list[tuple[int, int, int]]:
        """(room, first_step, last_step) with 1-based inclusive step numbers."""
        if self.stages is None:
            return [(0, 1, self.steps)]
        out, start = [], 1
        for room, n in self.stages:
            out.append((room, start, start + n - 1))
            start += n
        return out


def _seed_for(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _make_env(spec: RunSpec, room: int, stream: int) -> Env:
    seed = _seed_for(spec.seed, stream, room)
    if spec.env == "two_rooms":
        return TwoRooms(room, seed=seed)
    return CartPole(seed=seed)


# ------------------------------------------------------------------ training


@dataclass
class RunResult:
    spec: RunSpec
    rows: list[dict]
    extra: list[dict] = field(default_factory=list)  # per-room or per-block columns
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0


class OnlineReturn:
    """Exponential average of completed episodic returns (weight 0.1).

    Until the first episode completes the running return of the current
    episode is reported instead.
    """

    def __init__(self, weight: float = RETURN_WEIGHT):
        self.weight = weight
        self.value: Optional[float] = None

    def update(self, episode_return: float) -> None:
        if self.value is None:
            self.value = episode_return
        else:
            self.value += self.weight * (episode_return - self.value)

    def current(self, in_progress: float) -> float:
        return in_progress if self.value is None else self.value


class _BlockRecorder:
    """Captures parameter checkpoints after each SBCD block when armed."""

    def __init__(self):
        self.armed = False
        self.snaps: dict[str, MlpQ] = {}

    def __call__(self, block: str, q: MlpQ) -> None:
        if self.armed:
            self.snaps[block] = q.copy()


def _or(q, env, pairs, spec: RunSpec, seed: int) -> float:
    return estimate_or(q, env, pairs, spec.n_rollouts, spec.resolved_horizon, spec.gamma, seed).or_proxy


def train_run(spec: RunSpec) -> RunResult:
    """Train one agent under spec, measuring every ``cadence`` steps."""
    t0 = time.perf_counter()
    rooms = sorted({r for r, _ in spec.stages}) if spec.stages else [0]
    envs = {r: _make_env(spec, r, 1) for r in rooms}
    meas_envs = {r: _make_env(spec, r, 2) for r in rooms}
    pairs = {r: sample_pairs(meas_envs[r], spec.n_pairs, _seed_for(spec.seed, 3, r)) for r in rooms}
    agent = make_agent(spec.agent, envs[rooms[0]], _seed_for(spec.seed, 0))
    evals = {s: EvalSet(s, envs[rooms[0]].obs_dim, spec.eval_capacity, spec.gamma,
                        _seed_for(spec.seed, 4, i)) for i, s in enumerate(STRATEGIES)}
    recorder = None
    if spec.block_ei:
        if not isinstance(agent, DQNAgent) or spec.agent.kind != "sbcd":
            raise ValueError("block_ei needs an sbcd agent")
        recorder = _BlockRecorder()
        agent.on_block_update = recorder
    online = OnlineReturn()
    rows: list[dict] = []
    extra: list[dict] = []
    step = 0
    for stage_idx, (room, first, last) in enumerate(spec.stage_bounds()):
        env = envs[room]
        agent.attach(env)
        for step in range(first, last + 1):
            measure = step % spec.cadence == 0
            q_before = agent.q.copy() if measure else None
            if recorder is not None:
                recorder.armed = measure
                recorder.snaps.clear()
            n_done = len(agent.completed_returns)
            agent.step(env)
            for s in evals.values():
                s.add(agent.last_transition)
            for ret in agent.completed_returns[n_done:]:
                online.update(ret)
            if not measure:
                continue
            rseed = _seed_for(spec.seed, 5, step)
            or_before = {r: _or(q_before, meas_envs[r], pairs[r], spec, rseed) for r in rooms}
            or_after = {r: _or(agent.q, meas_envs[r], pairs[r], spec, rseed) for r in rooms}
            row = {
                "step": step,
                "online_return": online.current(agent.episode_return),
                "offline_return": offline_return(agent.q, meas_envs[room], spec.offline_rollouts,
                                                 rseed, gamma=1.0),
                "ei": or_after[room] - or_before[room],
            }
            for s, eval_set in evals.items():
                row[f"aei_{s}"] = aei(q_before, agent.q, eval_set, spec.gamma)
            rows.append(row)
            if spec.per_room:
                ex = {"step": step, "stage": stage_idx, "room": room,
                      "online_return": row["online_return"]}
                for r in (0, 1):
                    ex[f"ei_room{r}"] = or_after[r] - or_before[r]
                extra.append(ex)
            if recorder is not None:
                # telescoping split: RLN move from theta_0, then VLN move from the post-RLN point
                mid = recorder.snaps.get("rln")
                if mid is None:
                    ei_rln = ei_vln = 0.0
                else:
                    or_mid = _or(mid, meas_envs[room], pairs[room], spec, rseed)
                    ei_rln = or_mid - or_before[room]
                    ei_vln = or_after[room] - or_mid
                extra.append({"step": step, "ei_rln": ei_rln, "ei_vln": ei_vln})
    if spec.per_room:
        _add_trailing_eti(extra)
    result = RunResult(spec, rows, extra)
    result.summary = summarize(spec, rows)
    result.seconds = time.perf_counter() - t0
    return result


def _add_trailing_eti(extra: list[dict], window: int = ETI_WINDOW) -> None:
    for r in (0, 1):
        values = [e[f"ei_room{r}"] for e in extra]
        for i, e in enumerate(extra):
            e[f"eti_room{r}"] = eti(values[max(0, i - window + 1):i + 1])


# ------------------------------------------------------------------ summaries


def performance_rows(spec: RunSpec, rows: list[dict]) -> list[dict]:
    """Rows that performance metrics are computed over.

    Two-Rooms uses the long second stage (the room-2 phase); Cart-pole uses the
    whole run.
    """
    if spec.env == "two_rooms" and spec.stages and len(spec.stages) > 1:
        _, first, last = spec.stage_bounds()[1]
        return [r for r in rows if first <= r["step"] <= last]
    return rows


def second_half(rows: list) -> list:
    return rows[len(rows) // 2:]


def summarize(spec: RunSpec, rows: list[dict]) -> dict:
    perf = performance_rows(spec, rows)
    if not perf:
        raise ValueError("no measurement rows inside the performance window")
    thr = THRESHOLDS[spec.env]
    k = math.ceil(EFFICIENCY_STEPS / spec.cadence)
    out: dict = {}
    for mode in ("online", "offline"):
        g = [r[f"{mode}_return"] for r in perf]
        out[f"aer_{mode}"] = aer(g)
        out[f"stable_{mode}"] = consecutive_stable(g, thr)
        out[f"efficiency_{mode}"] = sample_efficiency(g, thr, k)
        out[f"stable_aer_{mode}_b0"] = stable_aer(g, 0.0)
        out[f"stable_aer_{mode}_b0.5"] = stable_aer(g, 0.5)
    tail = second_half(perf)
    ei = [r["ei"] for r in tail]
    out["eti"] = eti(ei)
    out["dispersion"] = interference_dispersion(ei)
    for s in STRATEGIES:
        out[f"approximate_eti_{s}"] = eti([r[f"aei_{s}"] for r in tail])
    return out


# ------------------------------------------------------------------ persistence


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _csv_text(columns, rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k in ("step", "stage", "room") else float(v)) for k, v in row.items()}
                for row in reader]


def run_dir(out: Path, experiment: str, spec: RunSpec) -> Path:
    return Path(out) / experiment / spec.config_hash() / str(spec.seed)


def write_run(path: Path, result: RunResult) -> None:
    _atomic_write(path / "config.json", json.dumps(result.spec.to_dict(), indent=2, sort_keys=True))
    _atomic_write(path / "series.csv", _csv_text(SERIES_COLUMNS, result.rows))
    if result.extra:
        columns = tuple(result.extra[0])
        name = "rooms.csv" if "ei_room0" in columns else "blocks.csv"
        _atomic_write(path / name, _csv_text(columns, result.extra))
    # summary last: its presence marks the run complete
    _atomic_write(path / "summary.json", json.dumps(result.summary, indent=2, sort_keys=True))


def load_run(path: Path | str) -> RunResult:
    path = Path(path)
    spec = RunSpec.from_dict(json.loads((path / "config.json").read_text()))
    rows = read_csv(path / "series.csv")
    extra = []
    for name in ("rooms.csv", "blocks.csv"):
        if (path / name).exists():
            extra = read_csv(path / name)
    summary = json.loads((path / "summary.json").read_text())
    return RunResult(spec, rows, extra, summary)


def _execute(args: tuple[str, str, dict]) -> tuple[str, Optional[str]]:
    out, experiment, spec_dict = args
    spec = RunSpec.from_dict(spec_dict)
    path = run_dir(Path(out), experiment, spec)
    try:
        result = train_run(spec)
        write_run(path, result)
        log.info("run %s done in %.1fs", path, result.seconds)
        return str(path), None
    except Exception as exc:  # a failed run is flagged and the batch continues
        log.error("run %s failed: %s", path, exc)
        _atomic_write(path / "FAILED", f"{type(exc).__name__}: {exc}\n")
        return str(path), f"{type(exc).__name__}: {exc}"


def execute_runs(specs: list[RunSpec], out: Path, experiment: str, workers: int = 1
                 ) -> tuple[list[RunResult], list[tuple[str, str]]]:
    """Run every spec not already complete; return loaded results and failures."""
    todo = [s for s in specs if not (run_dir(out, experiment, s) / "summary.json").exists()]
    jobs = [(str(out), experiment, s.to_dict()) for s in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute, jobs))
    else:
        outcomes = [_execute(j) for j in jobs]
    failures = [(p, err) for p, err in outcomes if err is not None]
    results = []
    for s in specs:
        path = run_dir(out, experiment, s)
        if (path / "summary.json").exists():
            results.append(load_run(path))
    return results, failures


def write_report(path: Path, rows: list[dict], columns=None, payload: Optional[dict] = None) -> None:
    """CSV table plus a JSON mirror."""
    if rows:
        columns = columns or tuple(rows[0])
        _atomic_write(path.with_suffix(".csv"), _csv_text(columns, rows))
    _atomic_write(path.with_suffix(".json"),
                  json.dumps(payload if payload is not None else rows, indent=2, sort_keys=True))


# ------------------------------------------------------------------ experiments


@dataclass
class ExperimentConfig:
    """User-facing experiment settings (JSON file plus CLI overrides)."""

    env: str = "cartpole"
    seeds: list = field(default_factory=lambda: list(range(10)))
    steps: Optional[int] = None
    cadence: int = 100
    desk: bool = False
    agent: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    n_pairs: int = 50
    n_rollouts: int = 10
    horizon: Optional[int] = None
    offline_rollouts: int = 10
    workers: int = 1
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if len(set(cfg.seeds)) != len(cfg.seeds):
            raise ValueError("seeds must be distinct")
        return cfg

    def total_steps(self, env: Optional[str] = None) -> int:
        env = env or self.env
        if self.steps is not None:
            return self.steps
        return (DESK_STEPS if self.desk else FULL_STEPS)[env]

    @property
    def out_dir(self) -> Path:
        return Path(self.out) if self.out else default_out()

    def spec(self, env: str, agent: AgentConfig, seed: int, **kw) -> RunSpec:
        return RunSpec(env=env, agent=agent, seed=seed, steps=self.total_steps(env),
                       cadence=self.cadence, n_pairs=self.n_pairs, n_rollouts=self.n_rollouts,
                       horizon=self.horizon, offline_rollouts=self.offline_rollouts, **kw)


# tc_step 0.2 had the best online AER of the searched set; lr 1e-2 lets DQN learn
# room 0 inside the short desk-scale first stage
DEMO_AGENTS = {
    "tile": AgentConfig(kind="tile", tc_step=0.2),
    "dqn_adam": AgentConfig(kind="dqn", optimizer="adam", lr=1e-2),
    "dqn_rmsprop": AgentConfig(kind="dqn", optimizer="rmsprop", lr=1e-2),
}


def demo_outcomes(spec: RunSpec, extra: list[dict]) -> dict:
    """Figure-1 direction checks for one run."""
    (_, _, end1), (_, start2, end2), (_, start3, _) = spec.stage_bounds()
    stage1 = [e for e in extra if e["step"] <= end1]
    stage2_full = [e for e in extra if e["step"] - (ETI_WINDOW - 1) * spec.cadence >= start2
                   and e["step"] <= end2]
    early3 = [e for e in extra if start3 <= e["step"] < start3 + EFFICIENCY_STEPS]
    final1 = stage1[-1]["online_return"]
    peak1 = max(e["eti_room0"] for e in stage1)
    peak2 = max(e["eti_room0"] for e in stage2_full) if stage2_full else math.nan
    low3 = min(e["online_return"] for e in early3)
    high3 = max(e["online_return"] for e in early3)
    return {
        "stage1_final_return": final1,
        "stage1_peak_eti_room0": peak1,
        "stage2_max_eti_room0": peak2,
        "eti_ratio": peak2 / peak1 if peak1 > 0 else math.inf,
        "stage3_min_return": low3,
        "stage3_max_return": high3,
        "drop_fraction": (final1 - low3) / abs(final1) if final1 != 0 else math.inf,
        "recovered": high3 >= final1 - 0.1 * abs(final1),
    }


def run_demo_two_rooms(cfg: ExperimentConfig) -> dict:
    out = cfg.out_dir
    specs = {name: [cfg.spec("two_rooms", replace(a, **cfg.agent), seed, per_room=True) for seed in cfg.seeds]
             for name, a in DEMO_AGENTS.items()}
    report: dict = {"agents": {}, "failures": []}
    for name, ss in specs.items():
        results, failures = execute_runs(ss, out, f"demo-two-rooms/{name}", cfg.workers)
        report["failures"] += failures
        report["agents"][name] = {str(r.spec.seed): demo_outcomes(r.spec, r.extra) for r in results}
    bounds = specs["tile"][0].stage_bounds()
    report["stage_boundaries"] = [b[1] - 1 for b in bounds[1:]]
    write_report(out / "demo-two-rooms" / "report", [], payload=report)
    return report


def sweep_grid(cfg: ExperimentConfig) -> list[AgentConfig]:
    """Cartesian product of the hyperparameter sets (one value each under --desk)."""
    full = {"buffer_size": BUFFER_SIZES, "batch_size": BATCH_SIZES,
            "hidden": HIDDEN_SIZES, "target_freq": TARGET_FREQS}
    if cfg.desk:
        full = {"buffer_size": (1000,), "batch_size": (64,), "hidden": (128,), "target_freq": (0,)}
    full.update({k: tuple(v) for k, v in cfg.grid.items()})
    keys = sorted(full)
    base = AgentConfig.from_dict(cfg.agent)
    return [replace(base, **dict(zip(keys, vals))) for vals in itertools.product(*(full[k] for k in keys))]


def sweep_specs(cfg: ExperimentConfig) -> list[RunSpec]:
    return [cfg.spec(cfg.env, a, seed) for a in sweep_grid(cfg) for seed in cfg.seeds]


def run_sweep(cfg: ExperimentConfig) -> dict:
    specs = sweep_specs(cfg)
    results, failures = execute_runs(specs, cfg.out_dir, f"sweep/{cfg.env}", cfg.workers)
    report = {"env": cfg.env, "configs": len(sweep_grid(cfg)), "runs": len(specs),
              "completed": len(results), "failures": failures}
    write_report(cfg.out_dir / "sweep" / cfg.env / "report", [], payload=report)
    return report


PERF_METRICS = {"aer": "aer", "stability": "stable", "efficiency": "efficiency"}


def correlation_table(results: list[RunResult]) -> list[dict]:
    """Kendall tau between per-config means of each performance metric and statistic."""
    by_config: dict[str, list[dict]] = {}
    for r in results:
        by_config.setdefault(r.spec.config_hash(), []).append(r.summary)
    agg = {h: {k: float(np.mean([s[k] for s in ss])) for k in ss[0]} for h, ss in by_config.items()}
    rows = []
    for mode in ("online", "offline"):
        for statistic in ("eti", "dispersion"):
            for metric, key in PERF_METRICS.items():
                pairs = [(a[f"{key}_{mode}"], a[statistic]) for a in agg.values()]
                rows.append({"metric": metric, "statistic": statistic, "mode": mode,
                             "tau": kendall_tau(pairs)})
            # self-check column: a metric defined as -statistic must give tau = -1
            pairs = [(-a[statistic], a[statistic]) for a in agg.values()]
            rows.append({"metric": f"neg_{statistic}", "statistic": statistic, "mode": mode,
                         "tau": kendall_tau(pairs)})
    return rows


def run_correlation(cfg: ExperimentConfig) -> list[dict]:
    specs = sweep_specs(cfg)
    results, missing = [], []
    for s in specs:
        path = run_dir(cfg.out_dir, f"sweep/{cfg.env}", s)
        if (path / "summary.json").exists():
            results.append(load_run(path))
        else:
            missing.append(str(path))
    if missing:
        log.warning("%d sweep runs missing, e.g. %s", len(missing), missing[0])
    if len({r.spec.config_hash() for r in results}) < 2:
        raise ValueError(f"correlation needs at least 2 completed configs; missing {len(missing)} runs")
    rows = correlation_table(results)
    base = cfg.out_dir / "sweep" / cfg.env
    write_report(base / "correlations", rows, ("metric", "statistic", "mode", "tau"))
    if missing:
        _atomic_write(base / "missing.txt", "\n".join(missing) + "\n")
    return rows


REFERENCE_AGENT = AgentConfig(kind="dqn", optimizer="adam", lr=1e-3, hidden=128, batch_size=64,
                              buffer_size=1000, target_freq=0)


def _pearson_entry(xs, ys) -> dict:
    try:
        r, p = pearson_r(xs, ys)
    except ValueError as exc:
        return {"r": math.nan, "p": math.nan, "n": len(xs), "error": str(exc)}
    return {"r": r, "p": p, "n": len(xs)}


def _standardize(xs: np.ndarray) -> Optional[np.ndarray]:
    sd = xs.std()
    return None if sd == 0.0 else (xs - xs.mean()) / sd


def aei_report(results: list[RunResult], seed: int = 0) -> dict:
    """Pearson r (and p) between EI and AEI over second-half steps of every seed.

    ``per_step`` z-scores both series within each seed before pooling, so that
    seeds whose TD errors live on very different scales weigh alike; seeds with a
    constant series are left out and counted.  ``per_step_raw`` pools raw values.
    A constant pooled series leaves r undefined; such entries carry NaN and an
    ``error`` note.
    """
    out: dict = {"per_step": {}, "per_step_raw": {}, "eti_level": {}, "shuffled": {}}
    rng = np.random.default_rng(seed)
    tails = [second_half(r.rows) for r in results]
    eis = [np.array([row["ei"] for row in t]) for t in tails]
    for s in STRATEGIES:
        approx = [np.array([row[f"aei_{s}"] for row in t]) for t in tails]
        out["per_step_raw"][s] = _pearson_entry(np.concatenate(eis), np.concatenate(approx))
        xs, ys, shuffled, dropped = [], [], [], 0
        for e, a in zip(eis, approx):
            ze, za = _standardize(e), _standardize(a)
            if ze is None or za is None:
                dropped += 1
                continue
            xs.append(ze)
            ys.append(za)
            shuffled.append(rng.permutation(za))
        xs_all = np.concatenate(xs) if xs else np.zeros(0)
        out["per_step"][s] = {**_pearson_entry(xs_all, np.concatenate(ys) if ys else xs_all),
                              "excluded_seeds": dropped}
        out["shuffled"][s] = _pearson_entry(xs_all, np.concatenate(shuffled) if shuffled else xs_all)
        if len(results) >= 3:
            xs_eti = [r_.summary["eti"] for r_ in results]
            ys_eti = [r_.summary[f"approximate_eti_{s}"] for r_ in results]
            out["eti_level"][s] = _pearson_entry(xs_eti, ys_eti)
    return out


def run_aei_validation(cfg: ExperimentConfig) -> dict:
    agent = replace(REFERENCE_AGENT, **cfg.agent) if cfg.agent else REFERENCE_AGENT
    specs = [cfg.spec(cfg.env, agent, seed) for seed in cfg.seeds]
    results, failures = execute_runs(specs, cfg.out_dir, "validate-aei", cfg.workers)
    report = aei_report(results)
    report["failures"] = failures
    rows = [{"strategy": s, "pooling": pooling, "r": v["r"], "p": v["p"], "n": v["n"]}
            for pooling, key in (("within_seed", "per_step"), ("raw", "per_step_raw"))
            for s, v in report[key].items()]
    base = cfg.out_dir / "validate-aei"
    write_report(base / "pearson", rows)
    _atomic_write(base / "report.json", json.dumps(report, indent=2, sort_keys=True))
    return report


SBCD_VARIANTS = {
    "SBCD": AgentConfig(kind="sbcd", lr_rln=1e-3, lr_vln=1e-3),
    "SBCD smaller alpha2": AgentConfig(kind="sbcd", lr_rln=1e-3, lr_vln=1e-4),
    "SBCD+SR-NN": AgentConfig(kind="sbcd", lr_rln=1e-3, lr_vln=1e-3, srnn_lambda=1e-3),
}


def block_etis(result: RunResult) -> tuple[float, float]:
    tail = second_half(result.extra)
    return eti([e["ei_rln"] for e in tail]), eti([e["ei_vln"] for e in tail])


def run_sbcd_study(cfg: ExperimentConfig, variants: Optional[dict] = None) -> dict:
    """Table of per-block ETI and online AER per variant; ``cfg.agent`` overrides every variant."""
    variants = variants or SBCD_VARIANTS
    rows, failures = [], []
    for name, agent in variants.items():
        agent = replace(agent, **cfg.agent)
        specs = [cfg.spec(cfg.env, agent, seed, block_ei=True) for seed in cfg.seeds]
        results, failed = execute_runs(specs, cfg.out_dir, f"sbcd/{name.replace(' ', '_')}", cfg.workers)
        failures += failed
        per_seed = [block_etis(r) for r in results]
        rln, rln_se = mean_std_err(p[0] for p in per_seed)
        vln, vln_se = mean_std_err(p[1] for p in per_seed)
        perf, perf_se = mean_std_err(r.summary["aer_online"] for r in results)
        rows.append({"variant": name, "eti_rln": rln, "eti_rln_se": rln_se, "eti_vln": vln,
                     "eti_vln_se": vln_se, "performance": perf, "performance_se": perf_se,
                     "seeds_vln_above_rln": int(sum(v > r for r, v in per_seed)), "n_seeds": len(per_seed)})
    write_report(cfg.out_dir / "sbcd" / "layers", rows)
    return {"table": rows, "failures": failures}


def verify_bounds(n_mdps: int = 200, seed: int = 0, max_states: int = 10, max_actions: int = 4,
                  gammas=(0.9, 0.99)) -> dict:
    """Numerical certificates for the Bellman-error bounds on seeded random MDPs."""
    rng = np.random.default_rng(seed)
    worst = {"lemma_violation": 0.0, "stochastic_error": 0.0, "identity_residual": 0.0,
             "theorem_violation": 0.0, "bias_variance_residual": 0.0}
    failures = 0
    vacuous = 0
    for _ in range(n_mdps):
        n_s = int(rng.integers(1, max_states + 1))
        n_a = int(rng.integers(1, max_actions + 1))
        mdp = tabular.random_mdp(rng, n_s, n_a, float(rng.choice(gammas)))
        q = rng.normal(0.0, 3.0, size=(n_s, n_a))
        nu = rng.dirichlet(np.ones(n_s))
        mu = rng.dirichlet(np.ones(n_s))
        b = rng.dirichlet(np.ones(n_a), size=n_s)
        lemma = tabular.verify_lemma1(mdp, q, nu[:, None] * b)
        worst["lemma_violation"] = max(worst["lemma_violation"], lemma.max_violation,
                                       lemma.componentwise_violation)
        worst["stochastic_error"] = max(worst["stochastic_error"], lemma.stochastic_error)
        worst["identity_residual"] = max(worst["identity_residual"], lemma.identity_residual)
        conc = tabular.concentration_C(mdp, nu, mu, b)
        ok = lemma.holds
        for p in (1, 2):
            rep = tabular.verify_theorem1(mdp, q, nu, mu, b, p, concentration=conc)
            vacuous += rep.vacuous
            worst["theorem_violation"] = max(worst["theorem_violation"], rep.max_violation)
            ok = ok and rep.holds
        bv = tabular.verify_bias_variance(mdp, q, nu[:, None] * b)
        worst["bias_variance_residual"] = max(worst["bias_variance_residual"], bv.residual)
        failures += not ok
    return {"n_mdps": n_mdps, "seed": seed, "failures": failures, "vacuous": vacuous, **worst}


EXPERIMENTS: dict[str, Callable] = {
    "demo-two-rooms": run_demo_two_rooms,
    "sweep": run_sweep,
    "correlate": run_correlation,
    "validate-aei": run_aei_validation,
    "sbcd": run_sbcd_study,
}
