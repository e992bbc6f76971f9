"""Experiment orchestration: config, A/B split, metrics, traces and embeddings."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import jsonschema

from . import encoder, qnet
from .agent import BASELINE, LADDER, AgentConfig, LadderAgent, Served, Session
from .baseline import CoefSchedule, CtrEstimator, EcpmPolicy
from .simenv import (
    World,
    WorldConfig,
    default_world_config,
    degenerate_world_config,
    dumps_record,
    outcome_record,
    to_cents,
)

CONFIG_FORMAT = 1
METRICS_HEADER = "# format=ladder-rtb-metrics/1"
NORMALIZED_HEADER = "# format=ladder-rtb-metrics/1 normalization=min-max per column over all rows"
TRACE_FORMAT = "ladder-rtb-trace/1"
EMBEDDING_HEADER = "# format=ladder-rtb-embeddings/1"
METRIC_COLUMNS = [
    "day", "arm", "auctions", "impressions", "clicks",
    "revenue", "expense", "profit", "ctr", "roi", "mean_q",
]
_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


def load_schema() -> dict:
    text = resources.files("ladder_rtb").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


@dataclass
class BaselineConfig:
    ctr_alpha: float = 1.0
    ctr_beta: float = 99.0
    bucket_width: int = 25
    coef_schedule: Optional[list] = None

    def build(self, max_action: int, day_length: float) -> EcpmPolicy:
        est = CtrEstimator(self.ctr_alpha, self.ctr_beta, self.bucket_width)
        if self.coef_schedule is None:
            sched = CoefSchedule.constant(1.0, day_length)
        else:
            sched = CoefSchedule(self.coef_schedule, day_length)
        return EcpmPolicy(max_action, est, sched)


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=default_world_config)
    agent: AgentConfig = field(default_factory=AgentConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    split_fraction: float = 0.1
    split_schedule: dict = field(default_factory=dict)
    seed: int = 0
    days: int = 1
    output_dir: str = "out"
    normalize: bool = False
    write_traces: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.split_fraction <= 1.0:
            raise ConfigError("split_fraction must be in [0, 1]")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        self.split_schedule = {int(k): float(v) for k, v in self.split_schedule.items()}
        if any(not 0.0 <= v <= 1.0 for v in self.split_schedule.values()):
            raise ConfigError("split_schedule fractions must be in [0, 1]")
        if any(k < 1 for k in self.split_schedule):
            raise ConfigError("split_schedule days are 1-based")

    def split_for_day(self, day: int) -> float:
        """Split fraction on 1-based ``day``: the latest schedule entry at or before it."""
        frac = self.split_fraction
        for d in sorted(self.split_schedule):
            if d <= day:
                frac = self.split_schedule[d]
        return frac

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(d, load_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
        try:
            world = _world_from_dict(dict(d.get("world", {})))
            agent = AgentConfig(**d.get("agent", {}))
            base = BaselineConfig(**d.get("baseline", {}))
            return cls(
                world=world,
                agent=agent,
                baseline=base,
                split_fraction=d.get("split_fraction", 0.1),
                split_schedule=d.get("split_schedule", {}),
                seed=d.get("seed", 0),
                days=d.get("days", 1),
                output_dir=d.get("output_dir", "out"),
                normalize=d.get("normalize", False),
                write_traces=d.get("write_traces", True),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "format_version": CONFIG_FORMAT,
            "seed": self.seed,
            "days": self.days,
            "split_fraction": self.split_fraction,
            "split_schedule": {str(k): v for k, v in self.split_schedule.items()},
            "output_dir": self.output_dir,
            "normalize": self.normalize,
            "write_traces": self.write_traces,
            "world": _jsonable(self.world.to_dict()),
            "agent": self.agent.to_dict(),
            "baseline": {
                "ctr_alpha": self.baseline.ctr_alpha,
                "ctr_beta": self.baseline.ctr_beta,
                "bucket_width": self.baseline.bucket_width,
                **(
                    {"coef_schedule": self.baseline.coef_schedule}
                    if self.baseline.coef_schedule is not None
                    else {}
                ),
            },
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _world_from_dict(d: dict) -> WorldConfig:
    preset = d.pop("preset", "default")
    base = (degenerate_world_config() if preset == "degenerate" else default_world_config()).to_dict()
    base.update(d)
    return WorldConfig.from_dict(base)


def desk_experiment_config(seed: int = 0, days: int = 4) -> ExperimentConfig:
    """Four-day 50/50 A/B on the default world; about two minutes on one core."""
    agent = AgentConfig(
        capacity=50_000,
        imitation_fill=2000,
        learning_rate=3e-4,
        serve_chunk=64,
        train_steps_per_tick=30,
    )
    return ExperimentConfig(
        world=default_world_config(4000),
        agent=agent,
        split_fraction=0.5,
        seed=seed,
        days=days,
        write_traces=False,
    )


def quick_experiment_config(seed: int = 0) -> ExperimentConfig:
    """Small run used when the CLI gets no config file."""
    agent = AgentConfig(
        capacity=10_000,
        imitation_fill=500,
        learning_rate=3e-4,
        serve_chunk=64,
        train_steps_per_tick=2,
    )
    return ExperimentConfig(
        world=default_world_config(1500),
        agent=agent,
        split_fraction=0.5,
        seed=seed,
        days=2,
    )


PRESETS = {"desk": desk_experiment_config, "quick": quick_experiment_config}


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(data)


# ----------------------------------------------------------------------------
# A/B split
# ----------------------------------------------------------------------------


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def ab_assign(auction_id: int, split_fraction: float) -> str:
    u = splitmix64(int(auction_id) & _MASK64) / 2.0**64
    return LADDER if u < split_fraction else BASELINE


# ----------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------


@dataclass
class MetricsSnapshot:
    day: int
    arm: str
    auctions: int = 0
    impressions: int = 0
    clicks: int = 0
    revenue_cents: int = 0
    expense_cents: int = 0
    conversion_value: float = 0.0
    q_sum: float = 0.0
    q_count: int = 0

    @property
    def profit_cents(self) -> int:
        return self.revenue_cents - self.expense_cents

    @property
    def ctr(self) -> float:
        return self.clicks / self.impressions if self.impressions else 0.0

    @property
    def roi(self) -> float:
        return self.conversion_value / (self.revenue_cents / 100) if self.revenue_cents else 0.0

    @property
    def mean_q(self) -> Optional[float]:
        return self.q_sum / self.q_count if self.q_count else None

    def add(self, rec: dict) -> None:
        self.auctions += 1
        if rec["won"]:
            self.impressions += 1
            self.expense_cents += to_cents(rec["expense"])
        if rec["click_timestamp"] is not None:
            self.clicks += 1
            self.revenue_cents += to_cents(rec["income"])
            self.conversion_value += rec["conversion_value"]
        if rec.get("q_max") is not None:
            self.q_sum += rec["q_max"]
            self.q_count += 1

    def row(self) -> list:
        mq = self.mean_q
        return [
            self.day, self.arm, self.auctions, self.impressions, self.clicks,
            _money(self.revenue_cents), _money(self.expense_cents), _money(self.profit_cents),
            f"{self.ctr:.6f}", f"{self.roi:.6f}", "" if mq is None else f"{mq:.6f}",
        ]


def _money(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    c = abs(cents)
    return f"{sign}{c // 100}.{c % 100:02d}"


class MetricsBook:
    """Per (day, arm) aggregation of trace records."""

    def __init__(self, days: int):
        self.snaps = {
            (d, arm): MetricsSnapshot(d, arm) for d in range(1, days + 1) for arm in (LADDER, BASELINE)
        }

    def add(self, rec: dict) -> None:
        key = (rec["day"], rec["arm"])
        if key not in self.snaps:
            self.snaps[key] = MetricsSnapshot(*key)
        self.snaps[key].add(rec)

    def rows(self) -> list[MetricsSnapshot]:
        return [self.snaps[k] for k in sorted(self.snaps, key=lambda k: (k[0], k[1] != LADDER))]

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(METRICS_HEADER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for snap in self.rows():
                w.writerow(snap.row())

    def write_normalized(self, path: str | Path) -> None:
        rows = [s.row() for s in self.rows()]
        cols = list(zip(*rows)) if rows else [[] for _ in METRIC_COLUMNS]
        out_cols = []
        for name, col in zip(METRIC_COLUMNS, cols):
            if name in ("day", "arm"):
                out_cols.append(list(col))
                continue
            vals = [float(v) if v != "" else None for v in col]
            present = [v for v in vals if v is not None]
            lo, hi = (min(present), max(present)) if present else (0.0, 0.0)
            span = hi - lo
            out_cols.append(
                ["" if v is None else f"{(v - lo) / span if span else 0.0:.6f}" for v in vals]
            )
        with open(path, "w", newline="") as fh:
            fh.write(NORMALIZED_HEADER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for row in zip(*out_cols):
                w.writerow(row)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def served_record(s: Served) -> dict:
    rec = outcome_record(s.request, s.action, s.outcome, s.click)
    rec["day"] = s.request.episode + 1
    rec["arm"] = s.arm
    rec["q_max"] = s.q_max
    return rec


# ----------------------------------------------------------------------------
# Running
# ----------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    metrics_path: Path
    book: MetricsBook
    agent: LadderAgent
    trace_path: Optional[Path] = None
    normalized_path: Optional[Path] = None
    stats: dict = field(default_factory=dict)


def run_experiment(
    config: ExperimentConfig, out_dir: Optional[str | Path] = None, deterministic: bool = True
) -> ExperimentResult:
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    agent = LadderAgent(config.agent, seed=config.seed)
    world = World(config.world, seed=config.seed, max_action=config.agent.max_action)
    baseline = config.baseline.build(config.agent.max_action, config.world.day_length)
    book = MetricsBook(config.days)
    trace_path = out / "trace.jsonl" if config.write_traces else None
    trace_fh = open(trace_path, "w") if trace_path else None
    if trace_fh:
        trace_fh.write(json.dumps({"format": TRACE_FORMAT, "days": config.days}) + "\n")

    def assign(req, _agent):
        return ab_assign(req.auction_id, config.split_for_day(req.episode + 1))

    def on_served(s: Served) -> None:
        rec = served_record(s)
        book.add(rec)
        if trace_fh:
            trace_fh.write(dumps_record(rec) + "\n")

    try:
        sess = Session(agent, world, baseline, config.days, assign, on_served)
        stats = sess.run_deterministic() if deterministic else sess.run_threaded()
    finally:
        if trace_fh:
            trace_fh.close()
    metrics_path = out / "metrics.csv"
    book.write(metrics_path)
    norm = None
    if config.normalize:
        norm = out / "metrics_normalized.csv"
        book.write_normalized(norm)
    stats = {k: v for k, v in stats.items() if k not in ("latencies", "versions")}
    return ExperimentResult(metrics_path, book, agent, trace_path, norm, stats)


def replay_trace(trace_path: str | Path, out_path: str | Path) -> MetricsBook:
    """Recompute the metrics CSV from a JSONL trace."""
    with open(trace_path) as fh:
        head = json.loads(fh.readline())
        if head.get("format") != TRACE_FORMAT:
            raise ValueError(f"unsupported trace format {head.get('format')!r}")
        book = MetricsBook(int(head["days"]))
        for line in fh:
            if line.strip():
                book.add(json.loads(line))
    book.write(out_path)
    return book


def export_embeddings(
    params: qnet.NetworkParams, requests: Iterable, path: str | Path, catalog=None
) -> int:
    """Hidden-layer activations per request as CSV; returns the row count."""
    reqs = list(requests)
    n_hidden = params.spec.hidden
    with open(path, "w", newline="") as fh:
        fh.write(EMBEDDING_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["auction_id", "publisher"] + [f"h{i}" for i in range(n_hidden)])
        for r in reqs:
            # One row per call: batched BLAS can round a row differently
            # depending on its position, and equal requests must give equal rows.
            codes = encoder.encode_request(r, catalog)[None]
            _, trace = qnet.forward_codes(params, codes)
            w.writerow([r.auction_id, r.publisher.id] + [repr(float(v)) for v in trace.hidden_embedding[0]])
    return len(reqs)
