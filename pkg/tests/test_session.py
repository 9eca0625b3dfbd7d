import pytest
from hypothesis import given, settings, strategies as st

from surroconf.session import (
    ClockSync, Gateway, SessionConfig, SessionProtocol, SessionState, calibrate_clock, failover, heartbeat_tick,
    join, join_many, leave, record_heartbeat,
)
from surroconf.sim.engine import EventLoop


def session_of(*ids, now=0.0):
    s = SessionState()
    join_many(s, {i: f"host-{i}" for i in ids}, now)
    return s


def test_first_joiner_hosts():
    s = SessionState()
    ev = join(s, 4, "x", 0)
    assert s.initiator == 4 and ev.kind == "join" and ev.members == (4,)


def test_join_is_idempotent():
    s = session_of(1)
    assert join(s, 1, "again", 5) is None
    assert s.members() == (1,)


def test_same_tick_joins_in_id_order():
    s = SessionState()
    evs = join_many(s, {9: "a", 3: "b", 5: "c"}, 0)
    assert [e.surrogate for e in evs] == [3, 5, 9]
    assert s.initiator == 3


def test_responsive_members_not_expired():
    s = session_of(1, 2, 3)
    for t in range(1000, 10_001, 1000):
        for m in (1, 2, 3):
            record_heartbeat(s, m, t)
        assert heartbeat_tick(s, t).expired == []


def test_silent_member_expires():
    s = session_of(1, 2, 3)
    for t in (1000, 2000, 3000, 4000):
        record_heartbeat(s, 1, t)
        record_heartbeat(s, 2, t)
    res = heartbeat_tick(s, 3001)
    assert res.expired == [3]
    assert s.members() == (1, 2) and s.epoch == 0
    assert res.events[0].kind == "expire"


def test_silent_initiator_triggers_failover():
    s = session_of(1, 2, 3)
    for t in (1000, 2000, 3000, 4000):
        record_heartbeat(s, 2, t)
        record_heartbeat(s, 3, t)
    res = heartbeat_tick(s, 4000)
    assert res.expired == [1]
    assert s.initiator == 2 and s.epoch == 1
    assert [e.kind for e in res.events] == ["expire", "failover"]


def test_exactly_three_periods_is_not_expiry():
    s = session_of(1, 2)
    record_heartbeat(s, 1, 3000)
    assert heartbeat_tick(s, 3000).expired == []


def test_initiator_leave_hands_over_to_lowest():
    s = session_of(5, 2, 8)
    assert s.initiator == 2
    leave(s, 2)
    assert s.initiator == 5 and s.epoch == 1


def test_failover_then_join_uses_new_epoch():
    s = session_of(1, 2, 3)
    assert failover(s) == 2
    ev = join(s, 4, "late", 10)
    assert ev.epoch == 1 and s.initiator == 2


def test_last_member_closes_and_returns_vm():
    gw = Gateway({"eu": [10, 11]})
    vm = gw.assign("alice", "eu")
    s = session_of(vm)
    evs = leave(s, vm)
    assert s.closed and evs[-1].kind == "closed"
    gw.release(vm)
    assert gw.free["eu"] == [10, 11]
    with pytest.raises(RuntimeError):
        join(s, 12, "x", 0)


def test_gateway_exhausted():
    gw = Gateway({"eu": [10]})
    gw.assign("a", "eu")
    with pytest.raises(LookupError):
        gw.assign("b", "eu")


# -- clock calibration


def test_calibrate_examples():
    assert calibrate_clock(0, 20, 20, 40) == 0
    assert calibrate_clock(0, 70, 70, 40) == 50
    assert calibrate_clock(0, 10, 10, 40) == -10


def test_calibrate_rejects_inconsistent():
    assert calibrate_clock(10, 0, 0, 5) is None


@given(st.floats(-500, 500), st.floats(0, 300), st.floats(0, 50), st.floats(0, 1e6))
def test_symmetric_exchange_recovers_skew(skew, delay, hold, t1):
    # local clock = true time; initiator clock = true time + skew
    t2 = t1 + delay + skew
    t3 = t2 + hold
    t4 = t1 + 2 * delay + hold
    assert calibrate_clock(t1, t2, t3, t4) == pytest.approx(skew, abs=1e-6)


@given(st.floats(0, 200), st.floats(0, 200))
def test_asymmetry_error_is_half_the_difference(up, down):
    assert calibrate_clock(0, up, up, up + down) == pytest.approx((up - down) / 2)


def test_clock_sync_smooths():
    c = ClockSync(0.5)
    c.update(0, 70, 70, 40)
    assert c.offset == 50
    c.update(0, 30, 30, 40)  # one sample at 10
    assert c.offset == 30
    assert c.to_initiator(100) == 130
    c.reset()
    assert c.offset is None and c.to_initiator(5) == 5


# -- protocol on the event loop


def protocol(skew=None, lat=20.0, n=3):
    loop = EventLoop()
    p = SessionProtocol(loop, {i: f"h{i}" for i in range(n)}, lambda a, b: lat, initiator=0, skew=skew)
    p.start()
    return loop, p


def test_protocol_recovers_skew():
    loop, p = protocol(skew={0: 0.0, 1: -50.0, 2: 30.0})
    loop.run(30_000)
    # offset = initiator clock - local clock
    assert p.views[1].clock.offset == pytest.approx(50, abs=1e-6)
    assert p.views[2].clock.offset == pytest.approx(-30, abs=1e-6)
    assert p.converged()


def test_protocol_failover_converges():
    loop, p = protocol(n=4)
    loop.run(6000)
    p.kill(0)
    loop.run(6000 + 2 * p.cfg.roster_period_ms)
    assert p.converged()
    assert p.initiators() == {1}
    v = p.views[1]
    assert v.epoch == 1 and v.roster == (1, 2, 3)


def test_protocol_member_loss_removed_from_roster():
    loop, p = protocol(n=4)
    loop.run(3000)
    p.kill(3)
    loop.run(3000 + 3 * p.cfg.heartbeat_period_ms + 2 * p.cfg.roster_period_ms)
    assert p.converged()
    assert p.views[0].roster == (0, 1, 2)


def test_protocol_join_adopted():
    loop, p = protocol(n=3)
    loop.run(4000)
    p.add(7, "h7")
    loop.run(4000 + p.cfg.roster_period_ms + 100)
    assert p.converged()
    assert 7 in p.views[0].roster


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 6), st.floats(1, 80))
def test_failover_any_size(n, lat):
    loop = EventLoop()
    p = SessionProtocol(loop, {i: f"h{i}" for i in range(n)}, lambda a, b: lat, skew={})
    p.start()
    loop.run(5000)
    p.kill(0)
    loop.run(5000 + 2 * SessionConfig().roster_period_ms)
    assert p.converged() and p.initiators() == {1}
