"""EV data gateway: account linking, token lifecycle and snapshot polling.

The manufacturer side is an in-process mock driven by a script of canned
responses, and time is a simulated clock, so every path (consent refusal,
revoked refresh token, timeouts, expired access) can be exercised
deterministically.  Wire bodies are JSON strings:

* token endpoint: ``{"access": str, "refresh": str, "expires_in_s": int}``
* data endpoint:  ``{"soc": float, "charging_power_kw": float,
  "expected_departure": ISO-8601 str | null}``
"""

from __future__ import annotations

import copy
import hashlib
import json
from collections import deque
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

from .errors import (AlreadyLinked, ConsentRefused, InvalidCode, NonceMismatch, NotLinked,
                     RefreshFailed, Unauthorized)
from .scenario import format_utc, parse_utc
from .telemetry import RawReading

POLL_PERIOD_S = 60.0
TIMEOUT_S = 2.0
REFRESH_MARGIN_S = 60.0


class SimClock:
    def __init__(self, start: datetime):
        self.start = start
        self.elapsed_s = 0.0

    def now(self) -> datetime:
        return self.start + timedelta(seconds=self.elapsed_s)

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("the clock only moves forward")
        self.elapsed_s += seconds


# ---------------------------------------------------------------------------
# token states


@dataclass(frozen=True)
class Unlinked:
    kind = "Unlinked"


@dataclass(frozen=True)
class PendingAuth:
    auth_url: str
    state_nonce: str
    kind = "PendingAuth"


@dataclass(frozen=True)
class Linked:
    access: str
    refresh: str
    expiry: datetime
    kind = "Linked"


@dataclass(frozen=True)
class Expired:
    refresh: str
    kind = "Expired"


# every edge the client may take; anything else is a bug
LEGAL_EDGES = frozenset({
    ("Unlinked", "PendingAuth"),
    ("PendingAuth", "Linked"),
    ("PendingAuth", "Unlinked"),
    ("Linked", "Linked"),
    ("Linked", "Expired"),
    ("Linked", "Unlinked"),
    ("Expired", "Linked"),
    ("Expired", "Unlinked"),
})


@dataclass(frozen=True)
class EvSnapshot:
    ts: datetime
    soc: float
    charging_power_kw: float
    expected_departure: datetime | None = None
    stale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc {self.soc} outside [0, 1]")


# ---------------------------------------------------------------------------
# mock manufacturer server


@dataclass(frozen=True)
class Canned:
    """A scripted response: ``status`` is ok | refused | invalid | revoked | unauthorized | timeout."""

    status: str = "ok"
    body: dict | None = None
    latency_s: float = 0.1


class MockManufacturerServer:
    """Authorization, token and vehicle-data endpoints backed by per-endpoint scripts.

    When an endpoint's script is empty it answers normally: valid codes are
    exchanged, unexpired access tokens are served data.
    """

    ENDPOINTS = ("authorize", "token", "refresh", "data")

    def __init__(self, clock: SimClock, expires_in_s: int = 3600, vehicle: dict | None = None):
        self.clock = clock
        self.expires_in_s = expires_in_s
        self.vehicle = vehicle or {"soc": 0.5, "charging_power_kw": 0.0, "expected_departure": None}
        self.scripts = {e: deque() for e in self.ENDPOINTS}
        self.calls: list[str] = []
        self._issued = 0
        self._codes: set[str] = set()
        self._access: dict[str, datetime] = {}
        self._refresh: set[str] = set()

    def script(self, endpoint: str, *responses: Canned) -> None:
        self.scripts[endpoint].extend(responses)

    def _next(self, endpoint: str) -> Canned | None:
        q = self.scripts[endpoint]
        return q.popleft() if q else None

    def _issue(self) -> dict:
        self._issued += 1
        access = f"at-{self._issued}"
        refresh = f"rt-{self._issued}"
        self._access[access] = self.clock.now() + timedelta(seconds=self.expires_in_s)
        self._refresh.add(refresh)
        return {"access": access, "refresh": refresh, "expires_in_s": self.expires_in_s}

    # the user's consent step: returns the code the redirect carries
    def authorize(self, nonce: str) -> str:
        self.calls.append("authorize")
        c = self._next("authorize")
        if c is not None and c.status == "refused":
            return ""
        code = "code-" + hashlib.sha256(nonce.encode()).hexdigest()[:12]
        self._codes.add(code)
        return code

    def token(self, code: str):
        self.calls.append("token")
        c = self._next("token")
        if c is not None and c.status != "ok":
            return c.status, None, c.latency_s
        if code not in self._codes:
            return "invalid", None, 0.1
        self._codes.discard(code)
        return "ok", json.dumps(self._issue()), 0.1

    def refresh(self, refresh_token: str):
        self.calls.append("refresh")
        c = self._next("refresh")
        if c is not None and c.status != "ok":
            self._refresh.discard(refresh_token)
            return c.status, None, c.latency_s
        if refresh_token not in self._refresh:
            return "revoked", None, 0.1
        self._refresh.discard(refresh_token)
        return "ok", json.dumps(self._issue()), 0.1

    def data(self, access: str):
        self.calls.append("data")
        c = self._next("data")
        if c is not None and c.status != "ok":
            return c.status, None, c.latency_s
        exp = self._access.get(access)
        if exp is None or self.clock.now() >= exp:
            return "unauthorized", None, 0.1
        body = dict(self.vehicle)
        if c is not None and c.body:
            body.update(c.body)
        return "ok", json.dumps(body), (c.latency_s if c is not None else 0.1)

    def clone(self) -> "MockManufacturerServer":
        new = copy.copy(self)
        new.scripts = {k: deque(v) for k, v in self.scripts.items()}
        new.calls = list(self.calls)
        new._codes = set(self._codes)
        new._access = dict(self._access)
        new._refresh = set(self._refresh)
        return new


# ---------------------------------------------------------------------------
# client


class GatewayClient:
    """Token lifecycle for one (building, manufacturer) link."""

    def __init__(self, building: str, manufacturer: str, server: MockManufacturerServer,
                 clock: SimClock, poll_period_s: float = POLL_PERIOD_S, timeout_s: float = TIMEOUT_S):
        self.building = building
        self.manufacturer = manufacturer
        self.server = server
        self.clock = clock
        self.poll_period_s = poll_period_s
        self.timeout_s = timeout_s
        self.state = Unlinked()
        self.transitions: list[tuple[str, str, str]] = []
        self.last_snapshot: EvSnapshot | None = None
        self.last_error: Exception | None = None
        self._nonces_issued = 0
        self._used_nonces: set[str] = set()
        self._refreshed_expiry: datetime | None = None

    # -- bookkeeping --------------------------------------------------------

    def _move(self, new, event: str) -> None:
        edge = (self.state.kind, new.kind)
        if edge not in LEGAL_EDGES:
            raise AssertionError(f"illegal transition {edge} on {event}")
        self.transitions.append((self.state.kind, new.kind, event))
        self.state = new

    def _sync_expiry(self) -> None:
        st = self.state
        if isinstance(st, Linked) and self.clock.now() >= st.expiry:
            self._move(Expired(st.refresh), "expiry")

    def _link(self, body: str, event: str) -> None:
        doc = json.loads(body)
        expiry = self.clock.now() + timedelta(seconds=float(doc["expires_in_s"]))
        old = self.state
        prev_exp = old.expiry if isinstance(old, Linked) else None
        if prev_exp is not None and expiry <= prev_exp:
            expiry = prev_exp  # expiry never moves backwards
        self._move(Linked(doc["access"], doc["refresh"], expiry), event)

    # -- operations ---------------------------------------------------------

    def begin_authorization(self) -> PendingAuth:
        if not isinstance(self.state, Unlinked):
            raise AlreadyLinked(f"{self.building} is {self.state.kind}")
        self._nonces_issued += 1
        seed = f"{self.building}|{self.manufacturer}|{self._nonces_issued}"
        nonce = hashlib.sha256(seed.encode()).hexdigest()[:16]
        url = (f"https://auth.{self.manufacturer}.example/authorize?client_id=rec-gateway"
               f"&building={self.building}&state={nonce}")
        self._move(PendingAuth(url, nonce), "begin")
        return self.state

    def exchange_code(self, code: str, nonce: str) -> Linked:
        st = self.state
        if not isinstance(st, PendingAuth):
            raise NotLinked(f"no authorization in progress for {self.building}")
        if nonce in self._used_nonces or nonce != st.state_nonce:
            raise NonceMismatch("state nonce does not match the pending authorization")
        self._used_nonces.add(nonce)
        if not code:
            self._move(Unlinked(), "consent_refused")
            raise ConsentRefused(f"user refused consent for {self.building}")
        status, body, _ = self.server.token(code)
        if status == "refused":
            self._move(Unlinked(), "consent_refused")
            raise ConsentRefused(f"user refused consent for {self.building}")
        if status != "ok":
            self._move(Unlinked(), "invalid_code")
            raise InvalidCode(f"authorization code rejected ({status})")
        self._link(body, "exchange")
        return self.state

    def link(self) -> Linked:
        """Convenience: the whole redirect round trip against the mock."""
        pending = self.begin_authorization()
        code = self.server.authorize(pending.state_nonce)
        return self.exchange_code(code, pending.state_nonce)

    def refresh_token(self, force: bool = False):
        """Refresh when expired or within the margin of expiry; otherwise a no-op.

        Only one attempt is made per expiry event; a failure unlinks.
        """
        self._sync_expiry()
        st = self.state
        if isinstance(st, Linked):
            near = (st.expiry - self.clock.now()).total_seconds() <= REFRESH_MARGIN_S
            if not (near or force):
                return st
            expiry_event = st.expiry
        elif isinstance(st, Expired):
            expiry_event = None
        else:
            raise NotLinked(f"{self.building} has no refresh token")
        key = expiry_event or ("expired", st.refresh)
        if self._refreshed_expiry == key:
            return st
        self._refreshed_expiry = key
        status, body, latency = self.server.refresh(st.refresh)
        if status != "ok" or latency > self.timeout_s:
            self._move(Unlinked(), "refresh_failed")
            self.last_error = RefreshFailed(f"refresh failed for {self.building}: {status}")
            raise self.last_error
        self._link(body, "refresh")
        return self.state

    def unlink(self) -> None:
        if not isinstance(self.state, Unlinked):
            self._move(Unlinked(), "unlink")

    def poll_snapshot(self) -> EvSnapshot | None:
        """Fetch one snapshot; on timeout return the previous one marked stale."""
        self._sync_expiry()
        if isinstance(self.state, (Unlinked, PendingAuth)):
            raise NotLinked(f"{self.building} is not linked")
        if isinstance(self.state, Expired):
            self._refresh_for_poll()
        status, body, latency = self.server.data(self.state.access)
        if status == "unauthorized":
            # the server disagrees with our clock: one refresh, one retry
            st = self.state
            self._move(Expired(st.refresh), "unauthorized")
            self._refresh_for_poll()
            status, body, latency = self.server.data(self.state.access)
            if status == "unauthorized":
                self._move(Expired(self.state.refresh), "unauthorized")
                raise Unauthorized(f"data endpoint rejected a fresh token for {self.building}")
        if status == "timeout" or latency > self.timeout_s or status != "ok":
            return self._stale()
        doc = json.loads(body)
        now = self.clock.now()
        if self.last_snapshot is not None and now <= self.last_snapshot.ts:
            return self.last_snapshot  # keep downstream timestamps monotone
        dep = doc.get("expected_departure")
        snap = EvSnapshot(now, float(doc["soc"]), float(doc["charging_power_kw"]),
                          parse_utc(dep) if dep else None, False)
        self.last_snapshot = snap
        return snap

    def _refresh_for_poll(self) -> None:
        self.refresh_token()
        if not isinstance(self.state, Linked):
            # this expiry event already had its one refresh attempt
            raise Unauthorized(f"no valid access token for {self.building}")

    def _stale(self) -> EvSnapshot | None:
        if self.last_snapshot is None:
            return None
        return replace(self.last_snapshot, stale=True)

    def is_stale(self, snap: EvSnapshot) -> bool:
        return snap.stale or (self.clock.now() - snap.ts).total_seconds() > 2 * self.poll_period_s

    def clone(self) -> "GatewayClient":
        new = copy.copy(self)
        new.clock = SimClock(self.clock.start)
        new.clock.elapsed_s = self.clock.elapsed_s
        new.server = self.server.clone()
        new.server.clock = new.clock
        new.transitions = list(self.transitions)
        new._used_nonces = set(self._used_nonces)
        return new


# ---------------------------------------------------------------------------
# delivery to telemetry


def snapshot_readings(snap: EvSnapshot, building: str) -> list[RawReading]:
    """Turn a fresh snapshot into telemetry readings from the building's charger."""
    src = f"{building}.charger"
    return [RawReading(src, "ev_soc", snap.ts, snap.soc),
            RawReading(src, "ev_power_kw", snap.ts, snap.charging_power_kw)]


class EvPoller:
    """Polls one linked vehicle every period and forwards fresh snapshots to a queue."""

    def __init__(self, client: GatewayClient, queue):
        self.client = client
        self.queue = queue
        self.next_poll = client.clock.elapsed_s
        self.delivered: list[EvSnapshot] = []

    def run_until(self, elapsed_s: float) -> None:
        clock = self.client.clock
        while self.next_poll <= elapsed_s:
            if self.next_poll > clock.elapsed_s:
                clock.advance(self.next_poll - clock.elapsed_s)
            try:
                snap = self.client.poll_snapshot()
            except (RefreshFailed, Unauthorized, NotLinked) as exc:
                self.client.last_error = exc
                snap = None
            if snap is not None and not snap.stale:
                last = self.delivered[-1].ts if self.delivered else None
                if last is None or snap.ts > last:
                    self.delivered.append(snap)
                    self.queue.extend(snapshot_readings(snap, self.client.building))
            self.next_poll += self.client.poll_period_s


def snapshot_to_dict(s: EvSnapshot) -> dict:
    return {"ts": format_utc(s.ts), "soc": s.soc, "charging_power_kw": s.charging_power_kw,
            "expected_departure": format_utc(s.expected_departure) if s.expected_departure else None,
            "stale": s.stale}
