"""GSP auction world: request generation, second-price resolution, delayed clicks.

All money handled by the simulator lives on the 0.01 CNY grid.  Bids are
action indices (integer hundredths); rival bids are quantized to the same
grid before comparison so ties are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

CENT = 0.01
MINUTE = 60.0
DAY_SECONDS = 86400.0


class EpisodeExhausted(RuntimeError):
    """Raised by next_auction once the simulated day is over."""


class InvalidAction(ValueError):
    pass


class OracleUnavailable(RuntimeError):
    pass


def to_cents(x: float) -> int:
    return int(round(x * 100))


def from_cents(c: int) -> float:
    return c / 100.0


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


@dataclass
class RivalBidDist:
    """Distribution of the highest competing bid.

    ``kind="lognormal"``: each of ``n_rivals`` rivals bids a lognormal draw
    whose arithmetic mean is ``mean`` and log-space std is ``sigma``, scaled by
    ``1 + tod_amplitude*cos(2*pi*(t - tod_peak)/day)`` and by
    ``(true_ctr / ctr_reference) ** ctr_elasticity`` (informed rivals).
    ``kind="fixed"``: the rivals bid exactly ``values``.
    """

    kind: str = "lognormal"
    mean: float = 0.05
    sigma: float = 0.6
    tod_amplitude: float = 0.0
    tod_peak: float = 0.5 * DAY_SECONDS
    ctr_elasticity: float = 0.0
    ctr_reference: float = 0.01
    values: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("lognormal", "fixed"):
            raise ValueError(f"unknown rival distribution kind {self.kind!r}")
        if self.kind == "fixed" and not self.values:
            raise ValueError("fixed rival distribution needs values")
        if any(v < 0 for v in self.values):
            raise ValueError("rival bids must be nonnegative")
        if self.mean <= 0 or self.sigma < 0:
            raise ValueError("lognormal rival parameters must be positive")
        if not 0.0 <= self.tod_amplitude < 1.0:
            raise ValueError("tod_amplitude must be in [0, 1)")

    @property
    def mu(self) -> float:
        return math.log(self.mean) - 0.5 * self.sigma**2


@dataclass
class PublisherProfile:
    id: str
    arrival_weight: float
    rival_bid_dist: RivalBidDist = field(default_factory=RivalBidDist)
    base_ctr_bias: float = -4.6
    label: str = ""

    def __post_init__(self) -> None:
        if isinstance(self.rival_bid_dist, dict):
            self.rival_bid_dist = RivalBidDist(**self.rival_bid_dist)
        if not self.label:
            self.label = self.id
        if self.arrival_weight < 0:
            raise ValueError("arrival_weight must be nonnegative")


@dataclass
class WorldConfig:
    publishers: list[PublisherProfile]
    n_rivals: int = 10
    n_users: int = 2000
    catalog_size: int = 500
    sku_id_base: int = 3133000
    latent_dim: int = 8
    latent_period_range: tuple[float, float] = (40.0, 400.0)
    affinity_strength: float = 2.0
    anonymous_fraction: float = 0.0  # users with no history and no affinity
    ad_relevance: float = 0.5
    history_spread: int = 20
    max_history: int = 5
    max_days_ago: int = 30
    price_range: tuple[int, int] = (20, 8000)
    jdln_fraction: float = 0.6
    bid_click_range: tuple[float, float] = (1.0, 20.0)
    click_delay_minutes: tuple[float, float] = (10.0, 40.0)
    day_length: float = DAY_SECONDS
    auctions_per_day: int = 50_000
    ctr_override: Optional[float] = None
    conversion_rate: float = 0.05
    conversion_value_multiple: float = 1.0

    def __post_init__(self) -> None:
        self.publishers = [
            p if isinstance(p, PublisherProfile) else PublisherProfile(**p) for p in self.publishers
        ]
        self.latent_period_range = tuple(self.latent_period_range)
        self.price_range = tuple(self.price_range)
        self.bid_click_range = tuple(self.bid_click_range)
        self.click_delay_minutes = tuple(self.click_delay_minutes)
        self.validate()

    def validate(self) -> None:
        if not self.publishers:
            raise ValueError("world needs at least one publisher")
        ids = [p.id for p in self.publishers]
        if len(set(ids)) != len(ids):
            raise ValueError("publisher ids must be unique")
        total = sum(p.arrival_weight for p in self.publishers)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"publisher arrival weights sum to {total}, expected 1")
        if self.n_users < 1 or self.catalog_size < 1 or self.latent_dim < 1:
            raise ValueError("pool sizes and latent_dim must be >= 1")
        if self.n_rivals < 1:
            raise ValueError("n_rivals must be >= 1")
        lo, hi = self.bid_click_range
        if not 0 < lo <= hi:
            raise ValueError("bid_click_range must satisfy 0 < lo <= hi")
        dlo, dhi = self.click_delay_minutes
        if not 0 < dlo <= dhi:
            raise ValueError("click delay must be positive")
        if self.day_length <= 0 or self.auctions_per_day < 1:
            raise ValueError("day_length and auctions_per_day must be positive")
        if not 0.0 <= self.anonymous_fraction <= 1.0:
            raise ValueError("anonymous_fraction must be in [0, 1]")
        if self.ctr_override is not None and not 0.0 <= self.ctr_override <= 1.0:
            raise ValueError("ctr_override must be a probability")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "WorldConfig":
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def default_world_config(auctions_per_day: int = 50_000) -> WorldConfig:
    """The 4-publisher desk-scale world used by the experiments.

    Half the users are anonymous: no history in the request text and no
    affinity, so they rarely click.  The rest click far more on ads close to
    their interests.  A calibrator keyed on (publisher, sku bucket) sees only
    the blend of the two.
    """
    pubs = [
        PublisherProfile("p1", 0.4, RivalBidDist(mean=0.32, sigma=0.6, tod_amplitude=0.2), base_ctr_bias=-5.7),
        PublisherProfile("p2", 0.3, RivalBidDist(mean=0.28, sigma=0.6, tod_amplitude=0.2), base_ctr_bias=-6.1),
        PublisherProfile("p3", 0.2, RivalBidDist(mean=0.40, sigma=0.6, tod_amplitude=0.2), base_ctr_bias=-5.9),
        PublisherProfile("p4", 0.1, RivalBidDist(mean=0.20, sigma=0.6, tod_amplitude=0.2), base_ctr_bias=-6.5),
    ]
    return WorldConfig(
        publishers=pubs,
        n_rivals=5,
        affinity_strength=6.0,
        anonymous_fraction=0.5,
        auctions_per_day=auctions_per_day,
    )


def degenerate_world_config(
    rival: float = 0.10, ctr: float = 0.01, bid_click: float = 20.00, auctions_per_day: int = 5000
) -> WorldConfig:
    """Single publisher, user and SKU; one deterministic rival; fixed CTR."""
    pub = PublisherProfile("p1", 1.0, RivalBidDist(kind="fixed", values=[rival]), base_ctr_bias=0.0)
    return WorldConfig(
        publishers=[pub],
        n_rivals=1,
        n_users=1,
        catalog_size=1,
        max_history=0,
        bid_click_range=(bid_click, bid_click),
        ctr_override=ctr,
        auctions_per_day=auctions_per_day,
    )


# ----------------------------------------------------------------------------
# Domain types
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SkuEntry:
    sku_id: int
    price: int
    jdln_flag: bool
    bid_click_cents: int
    latent: np.ndarray = field(repr=False, compare=False)


class SkuCatalog:
    """Contiguous block of SKU ids whose latent vectors vary smoothly with the id.

    latent_j(id) = sqrt(2/L) * sin(2*pi*id/period_j + phase_j), so neighbouring
    ids have nearby latents; see :meth:`locality_constant`.
    """

    def __init__(self, cfg: WorldConfig, rng: np.random.Generator):
        L = cfg.latent_dim
        self.periods = rng.uniform(*cfg.latent_period_range, size=L)
        self.phases = rng.uniform(0.0, 2 * np.pi, size=L)
        self.scale = math.sqrt(2.0 / L)
        self.base = cfg.sku_id_base
        n = cfg.catalog_size
        prices = rng.integers(cfg.price_range[0], cfg.price_range[1] + 1, size=n)
        jdln = rng.random(n) < cfg.jdln_fraction
        lo, hi = to_cents(cfg.bid_click_range[0]), to_cents(cfg.bid_click_range[1])
        cpc = rng.integers(lo, hi + 1, size=n)
        self.entries: list[SkuEntry] = []
        for i in range(n):
            sid = self.base + i
            self.entries.append(
                SkuEntry(sid, int(prices[i]), bool(jdln[i]), int(cpc[i]), self.latent_of(sid))
            )
        self._by_id = {e.sku_id: e for e in self.entries}

    def latent_of(self, sku_id: float) -> np.ndarray:
        return self.scale * np.sin(2 * np.pi * sku_id / self.periods + self.phases)

    def locality_constant(self) -> float:
        """k such that ||latent(a) - latent(b)|| <= k * |a - b| for all ids."""
        return float(self.scale * 2 * np.pi * np.sqrt(np.sum(1.0 / self.periods**2)))

    def __getitem__(self, sku_id: int) -> SkuEntry:
        return self._by_id[sku_id]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> range:
        return range(self.base, self.base + len(self.entries))


@dataclass(frozen=True)
class UserProfile:
    id: int
    bought: tuple[tuple[int, int], ...]
    browsed: tuple[tuple[int, int], ...]
    affinity_latent: np.ndarray = field(repr=False, compare=False)
    home_sku: int = 0


@dataclass(frozen=True)
class AuctionRequest:
    auction_id: int
    timestamp: float
    publisher: PublisherProfile
    user: UserProfile
    ad_sku: int
    bid_click_cents: int
    episode: int = 0

    @property
    def bid_click(self) -> float:
        return from_cents(self.bid_click_cents)


@dataclass(frozen=True)
class AuctionOutcome:
    auction_id: int
    won: bool
    expense: float
    winning_bid: float
    max_rival_bid: float
    true_ctr: float

    @property
    def expense_cents(self) -> int:
        return to_cents(self.expense)


@dataclass(frozen=True)
class ClickEvent:
    auction_id: int
    click_timestamp: float
    income: float
    conversion_value: float = 0.0


def reward_of(outcome: AuctionOutcome, click: Optional[ClickEvent]) -> float:
    """Net profit of one auction: click income minus impression expense."""
    income = click.income if click is not None else 0.0
    return income - outcome.expense


def reward_cents(outcome: AuctionOutcome, click: Optional[ClickEvent]) -> int:
    income = to_cents(click.income) if click is not None else 0
    return income - outcome.expense_cents


# ----------------------------------------------------------------------------
# World
# ----------------------------------------------------------------------------


class World:
    """One simulated auction environment; a day is an episode.

    Separate generator streams drive arrivals, auction resolution and clicks,
    so the sequence of requests does not depend on the bids placed.
    """

    def __init__(self, cfg: WorldConfig, seed: int = 0, max_action: Optional[int] = None):
        self.cfg = cfg
        self.seed = seed
        self.max_action = max_action
        ss = np.random.SeedSequence(seed)
        build, arrivals, outcomes, clicks = (np.random.default_rng(s) for s in ss.spawn(4))
        self.rng_arrivals = arrivals
        self.rng_outcomes = outcomes
        self.rng_clicks = clicks
        self.catalog = SkuCatalog(cfg, build)
        self.users = self._build_users(build)
        self._pub_cum = np.cumsum([p.arrival_weight for p in cfg.publishers])
        self._pub_cum[-1] = 1.0
        self._mean_gap = cfg.day_length / cfg.auctions_per_day
        self.episode = -1
        self.reset()

    def _build_users(self, rng: np.random.Generator) -> list[UserProfile]:
        cfg = self.cfg
        users = []
        ids = self.catalog.ids
        for uid in range(cfg.n_users):
            home = int(rng.integers(ids.start, ids.stop))
            anonymous = cfg.anonymous_fraction > 0 and rng.random() < cfg.anonymous_fraction
            hist = []
            for _ in range(2):
                n = int(rng.integers(0, cfg.max_history + 1)) if cfg.max_history else 0
                if anonymous:
                    n = 0
                items = []
                for _ in range(n):
                    sid = self._near(home, rng)
                    items.append((sid, int(rng.integers(0, cfg.max_days_ago + 1))))
                items.sort(key=lambda x: x[1])
                hist.append(tuple(items))
            strength = 0.0 if anonymous else cfg.affinity_strength
            aff = strength * self.catalog.latent_of(home)
            users.append(UserProfile(uid, hist[0], hist[1], aff, home))
        return users

    def _near(self, home: int, rng: np.random.Generator) -> int:
        ids = self.catalog.ids
        s = self.cfg.history_spread
        sid = home + int(rng.integers(-s, s + 1))
        return min(max(sid, ids.start), ids.stop - 1)

    # -- episode control --------------------------------------------------

    def reset(self) -> None:
        self.episode += 1
        self.clock = 0.0
        self.auction_index = 0
        self._next_arrival = float(self.rng_arrivals.exponential(self._mean_gap))

    def is_terminal(self) -> bool:
        return self.clock >= self.cfg.day_length or self._next_arrival > self.cfg.day_length

    # -- operations ---------------------------------------------------------

    def next_auction(self, rng: Optional[np.random.Generator] = None) -> AuctionRequest:
        if self.is_terminal():
            raise EpisodeExhausted(f"episode {self.episode} exhausted")
        rng = rng or self.rng_arrivals
        cfg = self.cfg
        self.clock = self._next_arrival
        pub = cfg.publishers[int(np.searchsorted(self._pub_cum, rng.random(), side="right"))]
        user = self.users[int(rng.integers(len(self.users)))]
        if len(self.catalog) > 1 and rng.random() < cfg.ad_relevance:
            sku = self._near(user.home_sku, rng)
        else:
            sku = self.catalog.base + int(rng.integers(len(self.catalog)))
        req = AuctionRequest(
            auction_id=self.episode * 1_000_000_000 + self.auction_index,
            timestamp=self.clock,
            publisher=pub,
            user=user,
            ad_sku=sku,
            bid_click_cents=self.catalog[sku].bid_click_cents,
            episode=self.episode,
        )
        self.auction_index += 1
        self._next_arrival = self.clock + float(rng.exponential(self._mean_gap))
        return req

    def true_ctr(self, request: AuctionRequest) -> float:
        if self.cfg.ctr_override is not None:
            return self.cfg.ctr_override
        sku = self.catalog[request.ad_sku]
        z = float(np.dot(request.user.affinity_latent, sku.latent)) + request.publisher.base_ctr_bias
        return logistic(z)

    def rival_bids_cents(self, request: AuctionRequest, rng: np.random.Generator) -> np.ndarray:
        d = request.publisher.rival_bid_dist
        if d.kind == "fixed":
            return np.array([to_cents(v) for v in d.values], dtype=np.int64)
        bids = rng.lognormal(d.mu, d.sigma, size=self.cfg.n_rivals)
        mult = 1.0
        if d.tod_amplitude:
            phase = 2 * np.pi * (request.timestamp - d.tod_peak) / self.cfg.day_length
            mult *= 1.0 + d.tod_amplitude * math.cos(phase)
        if d.ctr_elasticity:
            mult *= (self.true_ctr(request) / d.ctr_reference) ** d.ctr_elasticity
        return np.rint(bids * mult * 100).astype(np.int64)

    def resolve_auction(
        self, request: AuctionRequest, our_bid: int, rng: Optional[np.random.Generator] = None
    ) -> AuctionOutcome:
        """Second-price resolution; ``our_bid`` is an action index (hundredths)."""
        if isinstance(our_bid, bool) or int(our_bid) != our_bid or our_bid < 0:
            raise InvalidAction(f"bid {our_bid!r} is not an action index")
        our_bid = int(our_bid)
        if self.max_action is not None and our_bid > self.max_action:
            raise InvalidAction(f"bid {our_bid} above ceiling {self.max_action}")
        rng = rng or self.rng_outcomes
        top = int(self.rival_bids_cents(request, rng).max())
        won = our_bid > top  # rivals win ties
        return AuctionOutcome(
            auction_id=request.auction_id,
            won=won,
            expense=from_cents(top) if won else 0.0,
            winning_bid=from_cents(our_bid),
            max_rival_bid=from_cents(top),
            true_ctr=self.true_ctr(request),
        )

    def schedule_click(
        self,
        request: AuctionRequest,
        outcome: AuctionOutcome,
        rng: Optional[np.random.Generator] = None,
    ) -> Optional[ClickEvent]:
        if not outcome.won:
            return None
        rng = rng or self.rng_clicks
        if rng.random() >= outcome.true_ctr:
            return None
        lo, hi = self.cfg.click_delay_minutes
        delay = float(rng.uniform(lo, hi)) * MINUTE
        price = self.catalog[request.ad_sku].price
        value = self.cfg.conversion_value_multiple * price * self.cfg.conversion_rate
        return ClickEvent(request.auction_id, request.timestamp + delay, request.bid_click, value)


def oracle_expected_profit(world: World, action: int) -> float:
    """Exact expected profit of ``action`` in a degenerate world.

    Degenerate means: one publisher with fixed rival bids, forced CTR and a
    single bid_click value across the catalog.
    """
    cfg = world.cfg
    if len(cfg.publishers) != 1:
        raise OracleUnavailable("oracle needs a single publisher")
    d = cfg.publishers[0].rival_bid_dist
    if d.kind != "fixed" or cfg.ctr_override is None:
        raise OracleUnavailable("oracle needs deterministic rivals and a forced CTR")
    cpcs = {e.bid_click_cents for e in world.catalog.entries}
    if len(cpcs) != 1:
        raise OracleUnavailable("oracle needs a single bid_click value")
    b = max(to_cents(v) for v in d.values)
    if action <= b:
        return 0.0
    return cfg.ctr_override * from_cents(cpcs.pop()) - from_cents(b)


def outcome_record(
    request: AuctionRequest, action: int, outcome: AuctionOutcome, click: Optional[ClickEvent]
) -> dict[str, Any]:
    """Flat JSON-ready description of one resolved auction (trace line)."""
    return {
        "auction_id": request.auction_id,
        "episode": request.episode,
        "timestamp": request.timestamp,
        "publisher": request.publisher.id,
        "user": request.user.id,
        "ad_sku": request.ad_sku,
        "bid_click": request.bid_click,
        "action": action,
        "won": outcome.won,
        "expense": outcome.expense,
        "max_rival_bid": outcome.max_rival_bid,
        "true_ctr": outcome.true_ctr,
        "click_timestamp": click.click_timestamp if click else None,
        "income": click.income if click else 0.0,
        "conversion_value": click.conversion_value if click else 0.0,
    }


def dumps_record(rec: dict[str, Any]) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))
