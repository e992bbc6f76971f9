"""ECPM bidding: coefficient x calibrated CTR x click bid."""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .simenv import DAY_SECONDS, AuctionRequest


@dataclass
class CtrEstimator:
    """Beta-smoothed click rate per (publisher, sku bucket)."""

    alpha: float = 1.0
    beta: float = 99.0
    bucket_width: int = 25
    counts: dict = field(default_factory=dict)  # key -> [impressions, clicks]

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("smoothing pseudo-counts must be positive")
        if self.bucket_width < 1:
            raise ValueError("bucket_width must be >= 1")
        self._lock = threading.Lock()

    def bucket(self, publisher: str, sku: int) -> tuple[str, int]:
        return publisher, int(sku) // self.bucket_width

    def estimate(self, publisher: str, sku: int) -> float:
        imps, clicks = self.counts.get(self.bucket(publisher, sku), (0, 0))
        return (clicks + self.alpha) / (imps + self.alpha + self.beta)

    def observe(self, publisher: str, sku: int, impressions: int = 1, clicks: int = 0) -> None:
        if impressions < 0 or clicks < 0:
            raise ValueError("counts must be nonnegative")
        key = self.bucket(publisher, sku)
        with self._lock:
            # Replace rather than mutate so concurrent readers see a consistent pair.
            imps, clk = self.counts.get(key, (0, 0))
            self.counts[key] = (imps + impressions, clk + clicks)

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["publisher", "bucket", "impressions", "clicks", "estimate"])
            for (pub, b), (imps, clk) in sorted(self.counts.items()):
                est = (clk + self.alpha) / (imps + self.alpha + self.beta)
                w.writerow([pub, b, imps, clk, repr(est)])


def estimate_ctr(estimator: CtrEstimator, publisher: str, sku: int) -> float:
    return estimator.estimate(publisher, sku)


@dataclass
class CoefSchedule:
    """Step function of the time of day: ``[(start, end, coef), ...]`` in seconds."""

    steps: list = field(default_factory=lambda: [(0.0, DAY_SECONDS, 1.0)])
    day_length: float = DAY_SECONDS

    def __post_init__(self) -> None:
        self.steps = sorted((float(a), float(b), float(c)) for a, b, c in self.steps)
        edge = 0.0
        for a, b, c in self.steps:
            if abs(a - edge) > 1e-9:
                raise ValueError(f"schedule gap or overlap at {edge}")
            if b <= a:
                raise ValueError("empty schedule range")
            if c <= 0:
                raise ValueError("coefficients must be > 0")
            edge = b
        if abs(edge - self.day_length) > 1e-9:
            raise ValueError("schedule must cover the whole day")

    @classmethod
    def constant(cls, coef: float = 1.0, day_length: float = DAY_SECONDS) -> "CoefSchedule":
        return cls([(0.0, day_length, coef)], day_length)

    def at(self, timestamp: float) -> float:
        t = timestamp % self.day_length
        for a, b, c in self.steps:
            if a <= t < b:
                return c
        return self.steps[-1][2]

    def to_list(self) -> list:
        return [list(s) for s in self.steps]


def ecpm_bid(coef: float, ctr: float, bid_click: float, max_action: int) -> int:
    """Action index of ``coef * ctr * bid_click``, rounded to the cent, clamped to [0, C]."""
    cents = math.floor(coef * ctr * bid_click * 100.0 + 0.5 + 1e-9)
    return int(min(max(cents, 0), max_action))


class EcpmPolicy:
    """Callable bidder usable by the harness and by memory filling."""

    def __init__(
        self,
        max_action: int,
        estimator: Optional[CtrEstimator] = None,
        schedule: Optional[CoefSchedule] = None,
        learn: bool = True,
    ):
        self.max_action = max_action
        self.estimator = estimator or CtrEstimator()
        self.schedule = schedule or CoefSchedule()
        self.learn = learn

    def bid(self, request: AuctionRequest) -> int:
        ctr = self.estimator.estimate(request.publisher.id, request.ad_sku)
        coef = self.schedule.at(request.timestamp)
        return ecpm_bid(coef, ctr, request.bid_click, self.max_action)

    def __call__(self, request: AuctionRequest, codes=None) -> int:
        return self.bid(request)

    def feedback(self, request: AuctionRequest, won: bool, clicked: bool) -> None:
        if self.learn and won:
            self.estimator.observe(request.publisher.id, request.ad_sku, 1, int(clicked))
