import random

import pytest

from fedledger.errors import ContractFailure
from fedledger.market import (DAY_MS, EvProfile, PowerForecast,
                              delivery_meets_floor, detect_reverse_power_flow,
                              haversine_m, match_candidates, pick_winner,
                              plan_day_ahead)


def forecast(production, consumption, day_start=DAY_MS, slot_ms=3_600_000):
    return PowerForecast(day_start=day_start, slot_ms=slot_ms,
                         production_wh=production, consumption_wh=consumption)


# --- reverse power flow ---------------------------------------------------

def test_surplus_slots_reported():
    f = forecast([10000, 50000, 80000, 30000], [40000] * 4)
    # oracle: per-slot subtraction
    assert detect_reverse_power_flow(f) == [
        {"slot": 1, "surplus_wh": 10000},
        {"slot": 2, "surplus_wh": 40000},
    ]


def test_no_surplus_is_empty_and_equality_not_reported():
    # equality at a slot is not a surplus (strict inequality)
    f = forecast([10, 20, 30], [10, 25, 30])
    assert detect_reverse_power_flow(f) == []


def test_mismatched_series_rejected():
    with pytest.raises(ValueError):
        detect_reverse_power_flow(forecast([1, 2], [1]))


# --- planning ----------------------------------------------------------

def test_plan_one_request_per_surplus_slot():
    f = forecast([10000, 50000, 80000, 30000], [40000] * 4)
    drafts = plan_day_ahead(f, 42_560_000, 12_646_000, 5000, 1, 1000)
    assert [(d["energy_wh"], d["incentive_tokens"]) for d in drafts] == \
        [(10000, 10), (40000, 40)]
    assert drafts[0]["start"] == DAY_MS + 3_600_000
    assert drafts[0]["end"] == DAY_MS + 7_200_000
    assert all(d["scenario"] == "day_ahead" for d in drafts)
    # deterministic ids
    again = plan_day_ahead(f, 42_560_000, 12_646_000, 5000, 1, 1000)
    assert [d["id"] for d in drafts] == [d["id"] for d in again]


def test_plan_no_surplus_no_requests():
    assert plan_day_ahead(forecast([5, 5], [9, 5]), 0, 0, 100, 1, 1000) == []


def test_plan_one_wh_surplus_rounds_up_to_one_token():
    drafts = plan_day_ahead(forecast([41], [40]), 0, 0, 100, 1, 1000)
    assert drafts[0]["incentive_tokens"] == 1


def test_plan_empty_forecast_rejected():
    with pytest.raises(ContractFailure) as e:
        plan_day_ahead(forecast([], []), 0, 0, 100, 1, 1000)
    assert e.value.code == "EmptyForecast"


# --- auction -------------------------------------------------------------

def offer(fleet, price, t=0, committed=1000):
    return {"fleet_manager": fleet, "price_tokens": price,
            "submitted_at": t, "committed_wh": committed}


def test_lowest_price_wins():
    winner = pick_winner([offer("A", 12), offer("B", 9), offer("C", 15)])
    assert winner["fleet_manager"] == "B"


def test_price_tie_breaks_on_submission_time():
    winner = pick_winner([offer("A", 9, t=100), offer("B", 9, t=90)])
    assert winner["fleet_manager"] == "B"


def test_full_tie_breaks_on_address():
    winner = pick_winner([offer("bb", 9, t=5), offer("aa", 9, t=5)])
    assert winner["fleet_manager"] == "aa"


def test_no_offers_no_winner():
    assert pick_winner([]) is None


def test_auction_oracle_equivalence_small():
    rng = random.Random(1234)
    for _ in range(200):
        offers = [offer(f"{rng.randrange(16):02x}", rng.randrange(1, 50),
                        t=rng.randrange(100)) for _ in range(rng.randrange(1, 8))]
        best = pick_winner(offers)
        brute = sorted(offers, key=lambda o: (o["price_tokens"],
                                              o["submitted_at"],
                                              o["fleet_manager"]))[0]
        assert best == brute


# --- matching -----------------------------------------------------------

TERNI = {"lat": 42_560_000, "lon": 12_646_000, "radius_m": 1000}


def ev(ev_id, lat_offset_microdeg, status="idle", autonomy=10_000):
    return EvProfile(ev=ev_id, user_type="commuter",
                     lat=TERNI["lat"] + lat_offset_microdeg,
                     lon=TERNI["lon"], residual_autonomy_m=autonomy,
                     status=status, battery_capacity_wh=50_000,
                     owner="00" * 32).to_state()


def request_at(radius=1000):
    return {"lat": TERNI["lat"], "lon": TERNI["lon"], "radius_m": radius}


def test_matching_filters_status_radius_autonomy():
    # ~500 m idle with 10 km autonomy; ~100 m but driving; ~900 m idle but
    # can only reach 600 m
    fleet = [ev("ev-1", 4500), ev("ev-2", 900, status="driving"),
             ev("ev-3", 8100, autonomy=600)]
    matched = match_candidates(request_at(), fleet)
    assert [m["ev"] for m in matched] == ["ev-1"]


def test_matching_empty_fleet():
    assert match_candidates(request_at(), []) == []


def test_matching_equidistant_ties_break_on_ev_id():
    fleet = [ev("ev-b", 2000), ev("ev-a", 2000)]
    matched = match_candidates(request_at(), fleet)
    assert [m["ev"] for m in matched] == ["ev-a", "ev-b"]


def test_haversine_zero_and_symmetry():
    assert haversine_m(42_560_000, 12_646_000, 42_560_000, 12_646_000) == 0
    d1 = haversine_m(42_560_000, 12_646_000, 42_570_000, 12_650_000)
    d2 = haversine_m(42_570_000, 12_650_000, 42_560_000, 12_646_000)
    assert d1 == d2 > 0
    # one degree of latitude is about 111 km
    assert abs(haversine_m(0, 0, 1_000_000, 0) - 111_195) < 100


# --- settlement floor --------------------------------------------------------

def test_delivery_floor_boundary():
    assert delivery_meets_floor(40_000, 40_000, 5)
    assert delivery_meets_floor(38_000, 40_000, 5)  # exactly the floor pays
    assert not delivery_meets_floor(37_999, 40_000, 5)
    assert not delivery_meets_floor(37_000, 40_000, 5)
