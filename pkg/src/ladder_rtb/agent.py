"""The bidding agent: epsilon-greedy serving, reward observation and Q training.

Three activities share state through narrow channels:

* serving reads an immutable parameter snapshot from :class:`SnapshotBox`;
* observing finalizes rewards and appends to the experience memory;
* training samples the memory, regresses all C+1 action values at once and
  publishes a fresh snapshot every ``snapshot_interval`` steps.

:class:`Session` drives them either in a fixed round-robin schedule
(deterministic) or on three threads.
"""

from __future__ import annotations

import csv
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import encoder, qnet
from .baseline import EcpmPolicy
from .qnet import Divergence, NetSpec, NetworkParams, OptimizerState
from .replay import (
    DEFAULT_CLICK_WINDOW,
    ExperienceMemory,
    Pending,
    RewardObserver,
    StochasticTransition,
    Transition,
    batch_codes,
    compact,
)
from .simenv import AuctionRequest, World, to_cents

IMITATION = "imitation"
INTROSPECTION = "introspection"
LADDER = "ladder"
BASELINE = "baseline"


@dataclass
class AgentConfig:
    gamma: float = 0.95
    epsilon: float = 1e-3
    pi: float = 0.6
    transition_interval: float = 60.0
    target_sync: int = 500
    batch_size: int = 32
    bid_ceiling: float = 2.00
    snapshot_interval: int = 100
    imitation_fill: Optional[int] = None  # None means capacity // 2
    capacity: int = 100_000
    learning_rate: float = 1e-4
    rms_decay: float = 0.95
    rms_eps: float = 1e-8
    click_window: float = DEFAULT_CLICK_WINDOW
    min_memory: int = 32
    serve_chunk: int = 64
    train_steps_per_tick: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if not 0.0 < self.pi <= 1.0:
            raise ValueError("pi must be in (0, 1]")
        if self.target_sync < 1 or self.snapshot_interval < 1:
            raise ValueError("target_sync and snapshot_interval must be >= 1")
        if self.batch_size < 1 or self.capacity < 1:
            raise ValueError("batch_size and capacity must be >= 1")
        if self.bid_ceiling < 0:
            raise ValueError("bid_ceiling must be nonnegative")
        if self.transition_interval <= 0 or self.click_window <= 0:
            raise ValueError("intervals must be positive")
        if self.imitation_fill is not None and self.imitation_fill < 0:
            raise ValueError("imitation_fill must be nonnegative")
        if self.serve_chunk < 1 or self.train_steps_per_tick < 0:
            raise ValueError("bad round-robin schedule")

    @property
    def max_action(self) -> int:
        return to_cents(self.bid_ceiling)

    @property
    def n_actions(self) -> int:
        return self.max_action + 1

    @property
    def fill_target(self) -> int:
        return self.capacity // 2 if self.imitation_fill is None else self.imitation_fill

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        return cls(**d)


@dataclass
class PhaseState:
    phase: str = IMITATION
    imitation_count: int = 0
    self_generated_count: int = 0

    def accepts(self, source: str) -> bool:
        return source == (BASELINE if self.phase == IMITATION else LADDER)

    def record(self, source: str, fill_target: int) -> None:
        if self.phase == IMITATION:
            self.imitation_count += 1
        else:
            self.self_generated_count += 1
        self.maybe_switch(fill_target)

    def maybe_switch(self, fill_target: int) -> None:
        if self.phase == IMITATION and self.imitation_count >= fill_target:
            self.phase = INTROSPECTION


# ----------------------------------------------------------------------------
# Formulas
# ----------------------------------------------------------------------------


def greedy(q: np.ndarray) -> int:
    """Index of the largest value; ties go to the lowest index (cheapest bid)."""
    return int(np.argmax(q))


def select_action(snapshot: NetworkParams, codes: np.ndarray, epsilon: float, rng) -> int:
    explore = rng.random() < epsilon
    if explore:
        return int(rng.integers(snapshot.spec.n_actions))
    return greedy(qnet.q_values(snapshot, codes))


def augment_rewards(action: int, reward: float, n_actions: int) -> np.ndarray:
    """Reward credited to every action: zero below the taken bid, ``reward`` from it up."""
    if not 0 <= action < n_actions:
        raise ValueError(f"action {action} outside 0..{n_actions - 1}")
    out = np.zeros(n_actions)
    out[action:] = reward
    return out


def augment_matrix(actions: np.ndarray, rewards: np.ndarray, n_actions: int) -> np.ndarray:
    mask = np.arange(n_actions)[None, :] >= np.asarray(actions)[:, None]
    return np.where(mask, np.asarray(rewards, dtype=np.float64)[:, None], 0.0)


def compute_targets(
    batch: list[StochasticTransition], target_params: NetworkParams, gamma: float, n_actions: int
) -> np.ndarray:
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    y = augment_matrix(actions, rewards, n_actions)
    live = [i for i, t in enumerate(batch) if not t.terminal]
    if live and gamma != 0.0:
        q_plus = qnet.q_values(target_params, batch_codes([batch[i].state_plus for i in live]))
        y[live] += gamma * q_plus.max(axis=1)[:, None]
    return y


def ladder_loss(q_row: np.ndarray, y_row: np.ndarray) -> float:
    q_row, y_row = np.asarray(q_row), np.asarray(y_row)
    if q_row.shape != y_row.shape:
        raise ValueError("Q and target rows differ in length")
    d = y_row - q_row
    return float(np.dot(d, d) / d.shape[-1])


def ladder_loss_grad(q: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dL/dQ of the per-row loss; rows are independent."""
    return -2.0 * (y - q) / q.shape[-1]


# ----------------------------------------------------------------------------
# Snapshots and training
# ----------------------------------------------------------------------------


class SnapshotBox:
    """Latest published serving parameters.

    A snapshot is a frozen copy built before the single reference assignment
    that exposes it, so readers get either the old or the new one whole.
    """

    def __init__(self, params: NetworkParams):
        self._registry: dict[int, float] = {}
        self._current: Optional[NetworkParams] = None
        self.publications = 0
        self.publish(params)

    def publish(self, params: NetworkParams) -> NetworkParams:
        snap = params.frozen()
        self._registry[snap.version] = snap.checksum()
        self._current = snap
        self.publications += 1
        return snap

    def read(self) -> NetworkParams:
        return self._current

    def verify(self, snap: NetworkParams) -> bool:
        """True when ``snap`` is exactly what was published under its version."""
        return self._registry.get(snap.version) == snap.checksum()


@dataclass
class StepReport:
    step: int
    loss: float
    mean_abs_td: float
    mean_q: float
    target_synced: bool
    published: bool


class Trainer:
    def __init__(
        self,
        params: NetworkParams,
        memory: ExperienceMemory,
        cfg: AgentConfig,
        rng: np.random.Generator,
    ):
        if params.spec.n_actions != cfg.n_actions:
            raise ValueError(
                f"network has {params.spec.n_actions} actions, config needs {cfg.n_actions}"
            )
        self.params = params
        self.target = params.copy()
        self.memory = memory
        self.cfg = cfg
        self.rng = rng
        self.opt = OptimizerState.for_params(
            params, lr=cfg.learning_rate, rho=cfg.rms_decay, eps=cfg.rms_eps
        )
        self.snapshots = SnapshotBox(params)
        self.steps = 0

    def training_step(self) -> StepReport:
        cfg = self.cfg
        batch = self.memory.sample_minibatch(
            cfg.batch_size, cfg.pi, cfg.transition_interval, self.rng
        )
        y = compute_targets(batch, self.target, cfg.gamma, cfg.n_actions)
        q, trace = qnet.forward_codes(self.params, batch_codes([t.state_minus for t in batch]))
        diff = y - q
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise Divergence(
                f"non-finite loss at step {self.steps + 1} "
                f"(max |Q| {np.nanmax(np.abs(q)):.3g}, max |y| {np.nanmax(np.abs(y)):.3g})"
            )
        dq = ladder_loss_grad(q, y) / len(batch)
        grads = qnet.backward(self.params, trace, dq)
        qnet.rmsprop_step(self.params, self.opt, grads)
        self.steps += 1
        synced = self.steps % cfg.target_sync == 0
        if synced:
            qnet.clone_into(self.params, self.target)
        published = self.steps % cfg.snapshot_interval == 0
        if published:
            self.snapshots.publish(self.params)
        return StepReport(
            self.steps,
            loss,
            float(np.mean(np.abs(diff))),
            float(np.mean(q.max(axis=1))),
            synced,
            published,
        )


# ----------------------------------------------------------------------------
# Agent
# ----------------------------------------------------------------------------


class LadderAgent:
    def __init__(
        self,
        cfg: AgentConfig,
        seed: int = 0,
        spec: Optional[NetSpec] = None,
        params: Optional[NetworkParams] = None,
    ):
        self.cfg = cfg
        ss = np.random.SeedSequence([seed, 0x1ADDE5])
        init_rng, train_rng, serve_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        if params is None:
            params = qnet.init(cfg.n_actions, init_rng, spec)
        self.memory = ExperienceMemory(cfg.capacity)
        self.trainer = Trainer(params, self.memory, cfg, train_rng)
        self.serve_rng = serve_rng
        self.phase = PhaseState()
        self.phase.maybe_switch(cfg.fill_target)
        self.train_log: list[tuple[int, float, float, float, str]] = []

    @property
    def snapshots(self) -> SnapshotBox:
        return self.trainer.snapshots

    @property
    def params(self) -> NetworkParams:
        return self.trainer.params

    def act(self, codes: np.ndarray, snapshot: Optional[NetworkParams] = None) -> tuple[int, float]:
        """Epsilon-greedy bid for one encoded state, plus the max Q value."""
        acts, qmax = self.act_batch(codes[None, :], snapshot)
        return int(acts[0]), float(qmax[0])

    def act_batch(
        self, codes: np.ndarray, snapshot: Optional[NetworkParams] = None
    ) -> tuple[np.ndarray, np.ndarray]:
        snap = snapshot if snapshot is not None else self.snapshots.read()
        q = qnet.q_values(snap, codes)
        acts = q.argmax(axis=1)
        for i in range(len(acts)):
            if self.serve_rng.random() < self.cfg.epsilon:
                acts[i] = self.serve_rng.integers(self.cfg.n_actions)
        return acts, q.max(axis=1)

    def observe(self, tr: Transition, source: str) -> bool:
        """Store a finalized transition if the current phase takes ``source``."""
        if not self.phase.accepts(source):
            return False
        self.memory.store(tr)
        self.phase.record(source, self.cfg.fill_target)
        return True

    def ready(self) -> bool:
        return len(self.memory) >= max(self.cfg.min_memory, 1)

    def train(self, steps: int = 1) -> list[StepReport]:
        out = []
        for _ in range(steps):
            rep = self.trainer.training_step()
            self.train_log.append((rep.step, rep.loss, rep.mean_q, self.cfg.epsilon, self.phase.phase))
            out.append(rep)
        return out

    def write_train_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "mean_q", "epsilon", "phase"])
            for step, loss, mq, eps, phase in self.train_log:
                w.writerow([step, repr(loss), repr(mq), repr(eps), phase])

    def save(self, path: str | Path) -> None:
        qnet.save_checkpoint(self.params, path, {"agent": self.cfg.to_dict()})

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "LadderAgent":
        params, hyper = qnet.load_checkpoint(path)
        cfg = AgentConfig.from_dict(hyper.get("agent", {"bid_ceiling": (params.spec.n_actions - 1) / 100}))
        return cls(cfg, seed=seed, params=params)


# ----------------------------------------------------------------------------
# Driving an environment
# ----------------------------------------------------------------------------


@dataclass
class Served:
    """One resolved auction as seen by the driver."""

    request: AuctionRequest
    arm: str
    action: int
    q_max: Optional[float]
    outcome: object
    click: object


Assign = Callable[[AuctionRequest, "LadderAgent"], str]


def imitation_assign(request: AuctionRequest, agent: LadderAgent) -> str:
    """Agent-only routing: the ECPM policy bids until the imitation fill is reached."""
    return BASELINE if agent.phase.phase == IMITATION else LADDER


@dataclass
class Session:
    """Serving, observing and training over ``days`` episodes of ``world``."""

    agent: LadderAgent
    world: World
    baseline: EcpmPolicy
    days: int = 1
    assign: Assign = imitation_assign
    on_served: Optional[Callable[[Served], None]] = None
    max_train_steps: Optional[int] = None
    stall_hook: Optional[Callable[[int], None]] = None
    shared_ctr_logs: bool = True  # the CTR calibrator learns from every won impression
    stats: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.observer = RewardObserver(self.world.cfg.day_length, self.agent.cfg.click_window)

    # -- shared pieces --------------------------------------------------------

    def _finalize(self, items) -> None:
        for p, tr in items:
            if p.tag == BASELINE or self.shared_ctr_logs:
                clicked = p.click is not None and (
                    p.click.click_timestamp <= p.request.timestamp + self.observer.click_window
                )
                self.baseline.feedback(p.request, p.outcome.won, clicked)
            self.agent.observe(tr, p.tag)

    def _resolve(self, req: AuctionRequest, codes, arm: str, action: int, q_max) -> Pending:
        world = self.world
        outcome = world.resolve_auction(req, action)
        click = world.schedule_click(req, outcome)
        if self.on_served is not None:
            self.on_served(Served(req, arm, action, q_max, outcome, click))
        return Pending(req, compact(codes), action, outcome, click, world.is_terminal(), arm)

    def _training_allowed(self) -> bool:
        return self.max_train_steps is None or self.agent.trainer.steps < self.max_train_steps

    def _day_requests(self, limit: int) -> list[AuctionRequest]:
        out = []
        while len(out) < limit and not self.world.is_terminal():
            out.append(self.world.next_auction())
        return out

    # -- deterministic round robin ------------------------------------------

    def run_deterministic(self) -> dict:
        agent, cfg = self.agent, self.agent.cfg
        served = 0
        for day in range(self.days):
            if day:
                self.world.reset()
            while not self.world.is_terminal():
                reqs = self._day_requests(cfg.serve_chunk)
                codes = [encoder.encode_request(r, self.world.catalog) for r in reqs]
                arms = [self.assign(r, agent) for r in reqs]
                ladder = [i for i, a in enumerate(arms) if a == LADDER]
                acts: dict[int, tuple[int, float]] = {}
                if ladder:
                    a, q = agent.act_batch(np.stack([codes[i] for i in ladder]))
                    acts = {i: (int(a[j]), float(q[j])) for j, i in enumerate(ladder)}
                for i, req in enumerate(reqs):
                    if i in acts:
                        action, q_max = acts[i]
                    else:
                        action, q_max = self.baseline.bid(req), None
                    self.observer.add(self._resolve(req, codes[i], arms[i], action, q_max))
                    served += 1
                # observing
                self._finalize(self.observer.due(reqs[-1].timestamp))
                # training
                if agent.ready():
                    for _ in range(cfg.train_steps_per_tick):
                        if not self._training_allowed():
                            break
                        agent.train(1)
            self._finalize(self.observer.flush())
        self.stats.update(served=served, train_steps=agent.trainer.steps)
        return self.stats

    # -- threaded -------------------------------------------------------------

    def run_threaded(self, serve_delay: float = 0.0) -> dict:
        """Serving, observing and training on separate threads.

        ``serve_delay`` paces serving in wall-clock seconds per auction.
        """
        agent = self.agent
        handoff: queue.Queue = queue.Queue()
        serving_done = threading.Event()
        errors: list[BaseException] = []
        latencies: list[float] = []
        versions: list[int] = []
        torn = 0

        def serving():
            nonlocal torn
            try:
                for day in range(self.days):
                    if day:
                        self.world.reset()
                    while not self.world.is_terminal():
                        req = self.world.next_auction()
                        codes = encoder.encode_request(req, self.world.catalog)
                        arm = self.assign(req, agent)
                        if arm == LADDER:
                            t0 = time.perf_counter()
                            snap = agent.snapshots.read()
                            action, q_max = agent.act(codes, snap)
                            latencies.append(time.perf_counter() - t0)
                            versions.append(snap.version)
                            if not agent.snapshots.verify(snap):
                                torn += 1
                        else:
                            action, q_max = self.baseline.bid(req), None
                        handoff.put(self._resolve(req, codes, arm, action, q_max))
                        if serve_delay:
                            time.sleep(serve_delay)
                    handoff.put(None)  # end of day marker
            except BaseException as exc:  # pragma: no cover - surfaced below
                errors.append(exc)
            finally:
                serving_done.set()
                handoff.put(StopIteration)

        def observing():
            while True:
                item = handoff.get()
                if item is StopIteration:
                    break
                if item is None:
                    self._finalize(self.observer.flush())
                    continue
                self.observer.add(item)
                self._finalize(self.observer.due(item.request.timestamp))

        def training():
            try:
                while not serving_done.is_set():
                    if not agent.ready() or not self._training_allowed():
                        time.sleep(0.001)
                        continue
                    if self.stall_hook is not None:
                        self.stall_hook(agent.trainer.steps)
                    agent.train(1)
            except BaseException as exc:  # pragma: no cover - surfaced below
                errors.append(exc)
                serving_done.set()

        threads = [
            threading.Thread(target=serving, name="serving"),
            threading.Thread(target=observing, name="observing"),
            threading.Thread(target=training, name="training"),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        self.stats.update(
            served=len(latencies),
            train_steps=agent.trainer.steps,
            max_latency=max(latencies, default=0.0),
            latencies=latencies,
            versions=versions,
            torn_reads=torn,
        )
        return self.stats


def run(
    agent: LadderAgent,
    world: World,
    days: int = 1,
    deterministic: bool = True,
    baseline: Optional[EcpmPolicy] = None,
    max_train_steps: Optional[int] = None,
    on_served: Optional[Callable[[Served], None]] = None,
) -> dict:
    """Agent-only run: ECPM bids during imitation, the agent afterwards."""
    baseline = baseline or EcpmPolicy(agent.cfg.max_action)
    sess = Session(
        agent, world, baseline, days, imitation_assign, on_served, max_train_steps=max_train_steps
    )
    return sess.run_deterministic() if deterministic else sess.run_threaded()
