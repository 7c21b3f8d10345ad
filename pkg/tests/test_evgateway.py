from datetime import datetime, timedelta, timezone

import pytest

from reccontrol.errors import (AlreadyLinked, ConsentRefused, GatewayError, InvalidCode,
                               NonceMismatch, NotLinked, RefreshFailed, Unauthorized)
from reccontrol.evgateway import (LEGAL_EDGES, Canned, EvPoller, EvSnapshot, GatewayClient,
                                  Linked, MockManufacturerServer, SimClock, snapshot_readings)

T0 = datetime(2024, 5, 6, tzinfo=timezone.utc)


def make(expires_in_s=3600, **vehicle):
    clock = SimClock(T0)
    server = MockManufacturerServer(clock, expires_in_s, vehicle or None)
    return GatewayClient("B1", "acme", server, clock)


def linked(**kw):
    c = make(**kw)
    c.link()
    return c


class TestAuthorization:
    def test_begin(self):
        c = make()
        p = c.begin_authorization()
        assert c.state.kind == "PendingAuth"
        assert p.state_nonce in p.auth_url and p.auth_url.startswith("https://auth.acme.example/")

    def test_begin_when_linked(self):
        with pytest.raises(AlreadyLinked):
            linked().begin_authorization()

    def test_fresh_nonces(self):
        c = make()
        a = c.begin_authorization().state_nonce
        c.unlink()
        assert c.begin_authorization().state_nonce != a

    def test_valid_code_links(self):
        c = linked()
        assert isinstance(c.state, Linked)
        assert c.state.expiry == T0 + timedelta(hours=1)

    def test_reused_nonce(self):
        c = make()
        p = c.begin_authorization()
        c.exchange_code(c.server.authorize(p.state_nonce), p.state_nonce)
        c.unlink()
        c.begin_authorization()
        with pytest.raises(NonceMismatch):
            c.exchange_code("code-x", p.state_nonce)

    def test_scripted_refusal(self):
        c = make()
        c.server.script("authorize", Canned("refused"))
        with pytest.raises(ConsentRefused):
            c.link()
        assert c.state.kind == "Unlinked"

    def test_bad_code(self):
        c = make()
        p = c.begin_authorization()
        with pytest.raises(InvalidCode):
            c.exchange_code("forged", p.state_nonce)
        assert c.state.kind == "Unlinked"


class TestRefresh:
    def test_expired_with_valid_refresh(self):
        c = linked()
        c.clock.advance(3601)
        old = c.state.expiry
        st = c.refresh_token()
        assert isinstance(st, Linked) and st.expiry > old
        assert [t[2] for t in c.transitions[-2:]] == ["expiry", "refresh"]

    def test_revoked(self):
        c = linked()
        c.clock.advance(3601)
        c.server.script("refresh", Canned("revoked"))
        with pytest.raises(RefreshFailed):
            c.refresh_token()
        assert c.state.kind == "Unlinked"
        assert isinstance(c.last_error, RefreshFailed)

    def test_far_from_expiry_is_noop(self):
        c = linked()
        before = c.state
        assert c.refresh_token() is before
        assert "refresh" not in c.server.calls

    def test_near_expiry_refreshes(self):
        c = linked()
        c.clock.advance(3600 - 30)
        c.refresh_token()
        assert c.server.calls.count("refresh") == 1

    def test_one_attempt_per_expiry_event(self):
        c = linked()
        c.clock.advance(3600 - 30)
        c.server.script("refresh", Canned("timeout", latency_s=5.0))
        with pytest.raises(RefreshFailed):
            c.refresh_token()
        with pytest.raises(NotLinked):
            c.refresh_token()
        assert c.server.calls.count("refresh") == 1

    def test_expiry_never_moves_backwards(self):
        c = make(expires_in_s=3600)
        c.link()
        first = c.state.expiry
        c.server.expires_in_s = 10
        c.refresh_token(force=True)
        assert c.state.expiry >= first

    def test_unlinked_has_no_refresh(self):
        with pytest.raises(NotLinked):
            make().refresh_token()


class TestPoll:
    def test_healthy(self):
        c = linked(soc=0.42, charging_power_kw=7.4, expected_departure="2024-05-07T07:30:00Z")
        s = c.poll_snapshot()
        assert (s.soc, s.charging_power_kw, s.stale) == (0.42, 7.4, False)
        assert s.expected_departure == datetime(2024, 5, 7, 7, 30, tzinfo=timezone.utc)

    def test_timeout_returns_prior_marked_stale(self):
        c = linked()
        first = c.poll_snapshot()
        c.clock.advance(60)
        c.server.script("data", Canned("timeout", latency_s=2.5))
        s = c.poll_snapshot()
        assert s.stale and s.ts == first.ts

    def test_slow_answer_counts_as_timeout(self):
        c = linked()
        c.server.script("data", Canned("ok", latency_s=2.5))
        assert c.poll_snapshot() is None

    def test_expired_access_refreshes_once_then_succeeds(self):
        c = linked()
        c.clock.advance(3601)
        before = len(c.server.calls)
        s = c.poll_snapshot()
        assert c.server.calls[before:] == ["refresh", "data"]
        assert s is not None and not s.stale

    def test_server_side_rejection_retries_once(self):
        c = linked()
        c.server.script("data", Canned("unauthorized"), Canned("unauthorized"))
        with pytest.raises(Unauthorized):
            c.poll_snapshot()
        assert c.server.calls.count("data") == 2
        assert c.server.calls.count("refresh") == 1

    def test_not_linked(self):
        with pytest.raises(NotLinked):
            make().poll_snapshot()

    def test_staleness_rule(self):
        c = linked()
        s = c.poll_snapshot()
        c.clock.advance(120)
        assert not c.is_stale(s)
        c.clock.advance(1)
        assert c.is_stale(s)

    def test_snapshot_soc_range(self):
        with pytest.raises(ValueError):
            EvSnapshot(T0, 1.2, 0.0)


class TestPoller:
    def test_deliveries_monotone_and_periodic(self):
        c = linked()
        q = []
        p = EvPoller(c, q)
        c.server.script("data", Canned("ok"), Canned("timeout", latency_s=3.0), Canned("ok"))
        p.run_until(600)
        ts = [s.ts for s in p.delivered]
        assert ts == sorted(set(ts))
        assert len(ts) == 10  # 11 polls at t=0..600, one timed out
        assert len(q) == 2 * len(ts)
        assert q[0].source_id == "B1.charger"

    def test_failed_refresh_surfaces_and_stops_delivery(self):
        c = linked(expires_in_s=300)
        c.server.script("refresh", Canned("revoked"))
        p = EvPoller(c, [])
        p.run_until(900)
        assert isinstance(c.last_error, (RefreshFailed, NotLinked))
        assert c.state.kind == "Unlinked"
        assert all(s.ts < T0 + timedelta(seconds=300) for s in p.delivered)

    def test_readings_carry_snapshot_time(self):
        s = EvSnapshot(T0, 0.5, 3.0)
        assert [r.metric for r in snapshot_readings(s, "B2")] == ["ev_soc", "ev_power_kw"]


# ---------------------------------------------------------------------------
# small-model enumeration of scripted event sequences


def _begin(c):
    c.begin_authorization()


def _exchange(c):
    st = c.state
    nonce = getattr(st, "state_nonce", "no-pending-nonce")
    c.exchange_code(c.server.authorize(nonce), nonce)


def _refuse(c):
    c.server.script("authorize", Canned("refused"))
    _exchange(c)


def _expire(c):
    c.clock.advance(c.server.expires_in_s + 1)


def _refresh(c):
    c.refresh_token(force=True)


def _revoke(c):
    c.server.script("refresh", Canned("revoked"))
    c.refresh_token(force=True)


def _poll(c):
    c.poll_snapshot()


def _poll_timeout(c):
    c.server.script("data", Canned("timeout", latency_s=3.0))
    c.poll_snapshot()


def _poll_rejected(c):
    c.server.script("data", Canned("unauthorized"))
    c.poll_snapshot()


def _unlink(c):
    c.unlink()


EVENTS = [_begin, _exchange, _refuse, _expire, _refresh, _revoke, _poll, _poll_timeout,
          _poll_rejected, _unlink]


def _check(before, c, snaps):
    assert all((a, b) in LEGAL_EDGES for a, b, _ in c.transitions)
    if isinstance(before, Linked) and isinstance(c.state, Linked):
        assert c.state.expiry >= before.expiry
    ts = [s.ts for s in snaps]
    assert ts == sorted(ts)


def explore(depth):
    """Run every event sequence up to ``depth``; returns (sequences, edges seen)."""
    visited = 0
    edges = set()

    def dfs(client, left, snaps):
        nonlocal visited
        visited += 1
        edges.update((a, b) for a, b, _ in client.transitions)
        if left == 0:
            return
        for ev in EVENTS:
            c = client.clone()
            n_refresh = c.server.calls.count("refresh")
            snap_list = list(snaps)
            last, before = c.last_snapshot, c.state
            try:
                ev(c)
            except GatewayError:
                pass
            # one refresh for the clock expiry, one for a server-side rejection
            assert c.server.calls.count("refresh") - n_refresh <= 2
            if c.last_snapshot is not None and c.last_snapshot is not last:
                snap_list.append(c.last_snapshot)
            _check(before, c, snap_list)
            dfs(c, left - 1, snap_list)

    dfs(make(expires_in_s=600), depth, [])
    return visited, edges


def test_short_event_sequences():
    visited, edges = explore(4)
    assert visited == sum(len(EVENTS) ** k for k in range(5))
    assert edges == LEGAL_EDGES  # every legal edge is reachable, nothing else
