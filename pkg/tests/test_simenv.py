import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladder_rtb import simenv
from ladder_rtb.simenv import (
    AuctionOutcome,
    ClickEvent,
    EpisodeExhausted,
    InvalidAction,
    OracleUnavailable,
    PublisherProfile,
    RivalBidDist,
    World,
    WorldConfig,
)


def fixed_world(values, ctr=0.05, **kw):
    pub = PublisherProfile("p1", 1.0, RivalBidDist(kind="fixed", values=list(values)))
    cfg = WorldConfig(publishers=[pub], ctr_override=ctr, **kw)
    return World(cfg, seed=0, max_action=200)


def four_publishers(**kw):
    pubs = [
        PublisherProfile(f"p{i + 1}", w, RivalBidDist(mean=0.05))
        for i, w in enumerate([0.4, 0.3, 0.2, 0.1])
    ]
    return WorldConfig(publishers=pubs, **kw)


# -- configuration ----------------------------------------------------------


def test_arrival_weights_must_sum_to_one():
    pubs = [PublisherProfile("a", 0.5), PublisherProfile("b", 0.4)]
    with pytest.raises(ValueError):
        WorldConfig(publishers=pubs)


def test_publisher_ids_unique():
    pubs = [PublisherProfile("a", 0.5), PublisherProfile("a", 0.5)]
    with pytest.raises(ValueError):
        WorldConfig(publishers=pubs)


def test_config_round_trip():
    cfg = simenv.default_world_config()
    again = WorldConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_default_world_has_four_publishers():
    cfg = simenv.default_world_config()
    assert [p.id for p in cfg.publishers] == ["p1", "p2", "p3", "p4"]
    assert cfg.auctions_per_day == 50_000


# -- next_auction -----------------------------------------------------------


def test_single_entity_world_carries_those_ids():
    w = World(simenv.degenerate_world_config(), seed=3)
    req = w.next_auction()
    assert req.publisher.id == "p1"
    assert req.user.id == 0
    assert req.ad_sku == w.catalog.base


def test_same_seed_same_requests():
    cfg = four_publishers(auctions_per_day=500)
    a, b = World(cfg, seed=11), World(cfg, seed=11)
    for _ in range(200):
        ra, rb = a.next_auction(), b.next_auction()
        assert (ra.auction_id, ra.timestamp, ra.publisher.id, ra.user.id, ra.ad_sku) == (
            rb.auction_id, rb.timestamp, rb.publisher.id, rb.user.id, rb.ad_sku,
        )


def test_publisher_frequencies_follow_weights():
    cfg = four_publishers(auctions_per_day=1_000_000, day_length=1e12)
    w = World(cfg, seed=5)
    counts = {p.id: 0 for p in cfg.publishers}
    n = 1_000_000
    for _ in range(n):
        counts[w.next_auction().publisher.id] += 1
    for p in cfg.publishers:
        assert abs(counts[p.id] / n - p.arrival_weight) <= 0.01


def test_timestamps_nondecreasing_and_bid_click_positive():
    w = World(four_publishers(auctions_per_day=2000), seed=1)
    last = -1.0
    while not w.is_terminal():
        req = w.next_auction()
        assert req.timestamp >= last
        assert req.bid_click > 0
        last = req.timestamp


def test_episode_exhaustion_and_reset():
    w = World(four_publishers(auctions_per_day=50), seed=2)
    assert not w.is_terminal()
    n = 0
    while not w.is_terminal():
        w.next_auction()
        n += 1
    assert n > 0
    with pytest.raises(EpisodeExhausted):
        w.next_auction()
    w.reset()
    assert not w.is_terminal()
    req = w.next_auction()
    assert req.episode == 1 and req.auction_id == 1_000_000_000


def test_user_history_bounds():
    cfg = four_publishers()
    w = World(cfg, seed=4)
    for u in w.users:
        assert len(u.bought) <= cfg.max_history and len(u.browsed) <= cfg.max_history
        assert all(d >= 0 for _, d in u.bought + u.browsed)


def test_anonymous_users_have_no_history_or_affinity():
    cfg = four_publishers(anonymous_fraction=1.0)
    w = World(cfg, seed=4)
    for u in w.users:
        assert not u.bought and not u.browsed
        assert not np.any(u.affinity_latent)


# -- catalog -----------------------------------------------------------------


def test_latent_locality_bound():
    w = World(four_publishers(), seed=8)
    k = w.catalog.locality_constant()
    rng = np.random.default_rng(0)
    ids = w.catalog.ids
    for _ in range(2000):
        a = int(rng.integers(ids.start, ids.stop))
        b = a + int(rng.integers(-5, 6))
        dist = np.linalg.norm(w.catalog.latent_of(a) - w.catalog.latent_of(b))
        assert dist <= k * abs(a - b) + 1e-12


# -- resolve_auction ------------------------------------------------------------


def test_zero_bid_never_wins():
    w = fixed_world([0.0])
    out = w.resolve_auction(w.next_auction(), 0)
    assert not out.won and out.expense == 0.0


def test_second_price():
    w = fixed_world([0.10, 0.30])
    out = w.resolve_auction(w.next_auction(), 50)
    assert out.won and out.expense == 0.30


def test_tie_loses():
    w = fixed_world([0.30])
    out = w.resolve_auction(w.next_auction(), 30)
    assert not out.won and out.expense == 0.0


@pytest.mark.parametrize("bad", [-1, 201, 1.5, True])
def test_invalid_action(bad):
    w = fixed_world([0.1])
    with pytest.raises(InvalidAction):
        w.resolve_auction(w.next_auction(), bad)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**16), low=st.integers(0, 200), high=st.integers(0, 200))
def test_raising_bid_keeps_wins_and_expense(seed, low, high):
    low, high = min(low, high), max(low, high)
    w = World(four_publishers(), seed=seed, max_action=200)
    req = w.next_auction()
    a = w.resolve_auction(req, low, np.random.default_rng(seed))
    b = w.resolve_auction(req, high, np.random.default_rng(seed))
    if a.won:
        assert b.won and b.expense == a.expense
    assert a.max_rival_bid == b.max_rival_bid


def test_ctr_elasticity_scales_rival_bids():
    def rivals(elasticity):
        pub = PublisherProfile("p1", 1.0, RivalBidDist(mean=0.5, tod_amplitude=0.0, ctr_elasticity=elasticity,
                                                        ctr_reference=0.01))
        w = World(WorldConfig(publishers=[pub], ctr_override=0.04), seed=0)
        return w.rival_bids_cents(w.next_auction(), np.random.default_rng(1))

    plain, informed = rivals(0.0), rivals(1.0)
    assert np.abs(informed - np.rint(plain * 4)).max() <= 2


# -- clicks and rewards -------------------------------------------------------


def test_lost_auction_never_clicks():
    w = fixed_world([1.0], ctr=1.0)
    req = w.next_auction()
    out = w.resolve_auction(req, 10)
    assert all(w.schedule_click(req, out) is None for _ in range(100))


def test_zero_ctr_never_clicks():
    w = fixed_world([0.0], ctr=0.0)
    for _ in range(1000):
        req = w.next_auction()
        assert w.schedule_click(req, w.resolve_auction(req, 5)) is None


def test_click_rate_matches_ctr():
    w = fixed_world([0.0], ctr=0.05, auctions_per_day=200_000)
    clicks = 0
    n = 100_000
    for _ in range(n):
        req = w.next_auction()
        out = w.resolve_auction(req, 1)
        c = w.schedule_click(req, out)
        if c is not None:
            clicks += 1
            assert c.income == req.bid_click
            delay = c.click_timestamp - req.timestamp
            assert 600.0 <= delay <= 2400.0
    assert abs(clicks / n - 0.05) <= 0.003


def _outcome(won, expense):
    return AuctionOutcome(1, won, expense, 0.5, expense, 0.01)


def test_reward_examples():
    assert simenv.reward_of(_outcome(False, 0.0), None) == 0.0
    assert simenv.reward_of(_outcome(True, 0.0003), None) == -0.0003
    click = ClickEvent(1, 10.0, 10.00)
    assert math.isclose(simenv.reward_of(_outcome(True, 0.0003), click), 9.9997, abs_tol=1e-12)


def test_reward_cents_exact():
    click = ClickEvent(1, 10.0, 0.30)
    assert simenv.reward_cents(_outcome(True, 0.10), click) == 20


# -- oracle --------------------------------------------------------------------


def test_oracle_examples():
    w = World(simenv.degenerate_world_config(), seed=0, max_action=200)
    assert simenv.oracle_expected_profit(w, 0) == 0.0
    assert simenv.oracle_expected_profit(w, 10) == 0.0
    assert math.isclose(simenv.oracle_expected_profit(w, 11), 0.10, abs_tol=1e-12)


def test_oracle_against_monte_carlo():
    w = World(simenv.degenerate_world_config(auctions_per_day=10**6), seed=1, max_action=200)
    total = 0.0
    n = 10**6
    for _ in range(n):
        if w.is_terminal():
            w.reset()
        req = w.next_auction()
        out = w.resolve_auction(req, 11)
        total += simenv.reward_of(out, w.schedule_click(req, out))
    assert abs(total / n - simenv.oracle_expected_profit(w, 11)) <= 0.01


def test_oracle_unavailable():
    w = World(four_publishers(), seed=0)
    with pytest.raises(OracleUnavailable):
        simenv.oracle_expected_profit(w, 5)


def test_trace_determinism():
    def trace(seed):
        w = World(four_publishers(auctions_per_day=300), seed=seed, max_action=200)
        lines = []
        while not w.is_terminal():
            req = w.next_auction()
            out = w.resolve_auction(req, 7)
            lines.append(simenv.dumps_record(simenv.outcome_record(req, 7, out, w.schedule_click(req, out))))
        return lines

    assert trace(9) == trace(9)
