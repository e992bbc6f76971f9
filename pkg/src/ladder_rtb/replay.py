"""Experience memory with publisher-constrained stochastic successors.

Transitions are stored once their reward is final.  A minibatch draws t- uniformly,
keeps it with probability ``pi`` when its reward is negative (rejection
repeats until the batch is full), then draws the successor uniformly among
same-publisher, same-episode transitions timed in ``(t-, t- + I_transition]``.
With no such transition, or when t- ended its episode, the successor is
terminal.
"""

from __future__ import annotations

import bisect
import heapq
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import encoder
from .encoder import NULL
from .simenv import AuctionOutcome, AuctionRequest, ClickEvent, World, reward_of

DEFAULT_CLICK_WINDOW = 3600.0


class RewardNotFinal(ValueError):
    pass


class EmptyMemory(RuntimeError):
    pass


def compact(codes: np.ndarray) -> np.ndarray:
    """Trim trailing padding from a code array (positions stay implicit)."""
    nz = np.flatnonzero(codes != NULL)
    n = int(nz[-1]) + 1 if nz.size else 0
    return np.array(codes[:n], dtype=np.int16)


def expand(state: np.ndarray, length: int = encoder.MAX_LEN) -> np.ndarray:
    out = np.full(length, NULL, dtype=np.int16)
    out[: len(state)] = state
    return out


def to_pairs(state: np.ndarray) -> list[tuple[int, int]]:
    return [(int(p), int(state[p])) for p in np.flatnonzero(state != NULL)]


def from_pairs(pairs: Iterable) -> np.ndarray:
    pairs = [(int(p), int(c)) for p, c in pairs]
    n = max((p for p, _ in pairs), default=-1) + 1
    return compact(encoder.codes_from_sparse(pairs, max(n, 1)))[:n] if n else np.zeros(0, np.int16)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # compact codes of phi_t
    action: int
    reward: float
    publisher: str
    timestamp: float  # absolute simulated seconds
    terminal: bool = False
    reward_final: bool = True
    episode: int = 0

    def to_json(self) -> dict:
        return {
            "state": to_pairs(self.state),
            "action": self.action,
            "reward": self.reward,
            "publisher": self.publisher,
            "timestamp": self.timestamp,
            "terminal": self.terminal,
            "episode": self.episode,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Transition":
        return cls(
            from_pairs(d["state"]),
            int(d["action"]),
            float(d["reward"]),
            str(d["publisher"]),
            float(d["timestamp"]),
            bool(d["terminal"]),
            True,
            int(d.get("episode", 0)),
        )


@dataclass(frozen=True)
class StochasticTransition:
    state_minus: np.ndarray
    action: int
    reward: float
    state_plus: Optional[np.ndarray]  # None marks a terminal successor
    publisher: str
    t_minus: float
    t_plus: Optional[float] = None
    publisher_plus: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.state_plus is None


class ExperienceMemory:
    """Ring buffer of capacity N with a per-publisher time index.

    ``store`` and ``sample_minibatch`` hold one lock, so a single writer and a
    single reader may run concurrently.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._slots: list[Optional[Transition]] = [None] * capacity
        self._seq_of_slot = [-1] * capacity
        self._next_seq = 0
        self._size = 0
        self._index: dict[str, list[tuple[float, int]]] = {}
        self._lock = threading.Lock()
        self.attempts = 0
        self.accepted = 0
        self.negative_attempts = 0
        self.negative_accepted = 0

    def __len__(self) -> int:
        return self._size

    def _key(self, tr: Transition) -> float:
        return tr.timestamp

    def store(self, tr: Transition) -> None:
        if not tr.reward_final:
            raise RewardNotFinal("only transitions with final rewards are sampleable")
        with self._lock:
            seq = self._next_seq
            slot = seq % self.capacity
            old = self._slots[slot]
            if old is not None:
                idx = self._index[old.publisher]
                pos = bisect.bisect_left(idx, (old.timestamp, self._seq_of_slot[slot]))
                del idx[pos]
            else:
                self._size += 1
            self._slots[slot] = tr
            self._seq_of_slot[slot] = seq
            bisect.insort(self._index.setdefault(tr.publisher, []), (tr.timestamp, seq))
            self._next_seq += 1

    def transitions(self) -> list[Transition]:
        """Contents, oldest first."""
        with self._lock:
            start = self._next_seq - self._size
            return [self._slots[s % self.capacity] for s in range(start, self._next_seq)]

    def by_timestamp(self, publisher: str, timestamp: float) -> list[Transition]:
        with self._lock:
            idx = self._index.get(publisher, [])
            lo = bisect.bisect_left(idx, (timestamp, -1))
            out = []
            while lo < len(idx) and idx[lo][0] == timestamp:
                out.append(self._slots[idx[lo][1] % self.capacity])
                lo += 1
            return out

    def successor_candidates(self, tr: Transition, window: float) -> list[Transition]:
        with self._lock:
            return [self._slots[s % self.capacity] for s in self._window(tr, window)]

    def _window(self, tr: Transition, window: float) -> list[int]:
        idx = self._index.get(tr.publisher, [])
        lo = bisect.bisect_right(idx, (tr.timestamp, float("inf")))
        hi = bisect.bisect_right(idx, (tr.timestamp + window, float("inf")))
        return [
            seq for _, seq in idx[lo:hi] if self._slots[seq % self.capacity].episode == tr.episode
        ]

    def sample_minibatch(
        self, batch_size: int, pi: float, window: float, rng: np.random.Generator
    ) -> list[StochasticTransition]:
        if not 0.0 < pi <= 1.0:
            raise ValueError("pi must be in (0, 1]")
        with self._lock:
            if self._size == 0:
                raise EmptyMemory("cannot sample from an empty memory")
            start = self._next_seq - self._size
            batch = []
            while len(batch) < batch_size:
                seq = start + int(rng.integers(self._size))
                tr = self._slots[seq % self.capacity]
                negative = tr.reward < 0
                self.attempts += 1
                self.negative_attempts += negative
                if negative and rng.random() >= pi:
                    continue
                self.accepted += 1
                self.negative_accepted += negative
                batch.append(self._successor(tr, window, rng))
            return batch

    def _successor(self, tr: Transition, window: float, rng) -> StochasticTransition:
        if not tr.terminal:
            cands = self._window(tr, window)
            if cands:
                nxt = self._slots[cands[int(rng.integers(len(cands)))] % self.capacity]
                return StochasticTransition(
                    tr.state, tr.action, tr.reward, nxt.state, tr.publisher,
                    tr.timestamp, nxt.timestamp, nxt.publisher,
                )
        return StochasticTransition(tr.state, tr.action, tr.reward, None, tr.publisher, tr.timestamp)

    def acceptance_rate(self, negative_only: bool = True) -> float:
        if negative_only:
            return self.negative_accepted / max(self.negative_attempts, 1)
        return self.accepted / max(self.attempts, 1)

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for tr in self.transitions():
                fh.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")

    @classmethod
    def restore(cls, path: str | Path, capacity: int = 100_000) -> "ExperienceMemory":
        mem = cls(capacity)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    mem.store(Transition.from_json(json.loads(line)))
        return mem


def batch_codes(states: list[np.ndarray], length: int = encoder.MAX_LEN) -> np.ndarray:
    out = np.full((len(states), length), NULL, dtype=np.int16)
    for i, s in enumerate(states):
        out[i, : len(s)] = s
    return out


# ----------------------------------------------------------------------------
# Reward finalization
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Pending:
    request: AuctionRequest
    state: np.ndarray
    action: int
    outcome: AuctionOutcome
    click: Optional[ClickEvent]
    terminal: bool
    tag: str = ""


class RewardObserver:
    """Holds resolved auctions until their reward is known.

    Lost auctions are final at once; won auctions become final when their click
    arrives or when the click window closes, whichever comes first.
    """

    def __init__(self, day_length: float, click_window: float = DEFAULT_CLICK_WINDOW):
        self.day_length = day_length
        self.click_window = click_window
        self._heap: list[tuple[float, int, Pending]] = []
        self._n = 0

    def __len__(self) -> int:
        return len(self._heap)

    def add(self, p: Pending) -> None:
        if not p.outcome.won:
            due = p.request.timestamp
        elif p.click is not None:
            due = min(p.click.click_timestamp, p.request.timestamp + self.click_window)
        else:
            due = p.request.timestamp + self.click_window
        heapq.heappush(self._heap, (due, self._n, p))
        self._n += 1

    def due(self, now: float) -> list[tuple[Pending, Transition]]:
        out = []
        while self._heap and self._heap[0][0] <= now:
            _, _, p = heapq.heappop(self._heap)
            out.append((p, self.finalize(p)))
        return out

    def flush(self) -> list[tuple[Pending, Transition]]:
        return self.due(float("inf"))

    def finalize(self, p: Pending) -> Transition:
        click = p.click
        if click is not None and click.click_timestamp > p.request.timestamp + self.click_window:
            click = None
        req = p.request
        return Transition(
            state=p.state,
            action=p.action,
            reward=reward_of(p.outcome, click),
            publisher=req.publisher.id,
            timestamp=req.episode * self.day_length + req.timestamp,
            terminal=p.terminal,
            reward_final=True,
            episode=req.episode,
        )


Policy = Callable[[AuctionRequest, np.ndarray], int]


def fill_from_policy(
    memory: ExperienceMemory,
    world: World,
    policy: Policy,
    count: int,
    click_window: float = DEFAULT_CLICK_WINDOW,
    on_final: Optional[Callable[[Pending, Transition], None]] = None,
) -> int:
    """Bid ``world`` auctions with ``policy`` until ``count`` transitions are stored."""
    if count <= 0:
        return 0
    obs = RewardObserver(world.cfg.day_length, click_window)
    stored = 0

    def drain(items) -> bool:
        nonlocal stored
        for p, tr in items:
            if on_final is not None:
                on_final(p, tr)
            memory.store(tr)
            stored += 1
            if stored >= count:
                return True
        return False

    while True:
        if world.is_terminal():
            if drain(obs.flush()):
                return stored
            world.reset()
        req = world.next_auction()
        codes = encoder.encode_request(req, world.catalog)
        action = int(policy(req, codes))
        outcome = world.resolve_auction(req, action)
        click = world.schedule_click(req, outcome)
        obs.add(Pending(req, compact(codes), action, outcome, click, world.is_terminal()))
        if drain(obs.due(req.timestamp)):
            return stored
