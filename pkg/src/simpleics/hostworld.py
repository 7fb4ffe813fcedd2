"""Hosts, credentials, authentication and non-player-character schedules.

Hosts emit Windows-style security events into telemetry. NPC activity is
drawn from a per-role daily schedule so that long runs reproduce configured
frequencies exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from . import US_PER_H, US_PER_DAY
from .netfabric import Dropped, Packet
from .telemetry import Cause, Telemetry

EVENT_CATALOGUE = {
    4624: "An account was successfully logged on",
    4625: "An account failed to log on",
    4672: "Special privileges assigned to new logon",
    4688: "A new process has been created",
    5140: "A network share object was accessed",
    7045: "A service was installed in the system",
}

GRADES = ("user", "service", "domain_admin")
ROLES = ("normal_it", "victim_it", "engineering", "normal_ot", "victim_ot")

# actions per working day
DEFAULT_FREQUENCIES = {
    "normal_it": {"web": 5, "documents": 3, "email": 10},
    "victim_it": {"web": 5, "documents": 3, "email": 10},
    "engineering": {"rdp_jump": 2},
    "normal_ot": {"hmi_monitor": 32},
    "victim_ot": {"hmi_monitor": 32},
}

SERVICE_PORTS = {"rdp": 3389, "smb": 445, "ldap": 389, "http": 80}


class HostError(ValueError):
    pass


class Unreachable(HostError):
    """Authentication target is not reachable from the source host."""

    def __init__(self, drop: Dropped):
        super().__init__(f"unreachable: {drop.reason}")
        self.drop = drop


@dataclass(frozen=True)
class Credential:
    principal: str
    domain: str
    secret: str
    grade: str = "user"
    stored_on: tuple[str, ...] = ()

    def __post_init__(self):
        if self.grade not in GRADES:
            raise HostError(f"unknown credential grade {self.grade!r}")


@dataclass
class Mail:
    sender: str
    recipient: str
    subject: str
    attachment: str | None = None
    malicious: bool = False
    cause: Cause | None = None
    forwarded: bool = False


@dataclass
class Host:
    id: str
    endpoint: str
    os: str = "windows"
    domain: str = "corp.local"
    role: str | None = None
    user: str | None = None
    services: dict[str, int] = field(default_factory=dict)
    allowed_principals: tuple[str, ...] | None = None
    susceptibility: tuple[str, ...] = ()
    mailbox: list[Mail] = field(default_factory=list)
    implants: list[str] = field(default_factory=list)
    suppressed_until: int = -1


@dataclass
class AuthResult:
    ok: bool
    events: list[int]
    reason: str = ""
    sport: int = 0


def daily_schedule(frequencies: dict[str, float], rng, day: int,
                   work_start_us: int, work_len_us: int) -> list[tuple[int, str]]:
    """Stratified sampling of one day's NPC actions.

    The working window is split into ``n`` equal slots per action and one
    instant is drawn uniformly inside each slot, so integer frequencies are
    reproduced exactly and arrivals stay spread over the day. Fractional
    parts become a Bernoulli extra action.
    """
    out = []
    base = day * US_PER_DAY + work_start_us
    for action in sorted(frequencies):
        f = frequencies[action]
        if f < 0:
            raise HostError(f"negative frequency for {action}")
        n = int(f)
        if rng.random() < f - n:
            n += 1
        if n == 0:
            continue
        slot = work_len_us // n
        for i in range(n):
            out.append((base + i * slot + rng.randrange(slot), action))
    out.sort()
    return out


class HostWorld:
    """Directory, hosts and the event log writer."""

    def __init__(self, kernel, fabric, telemetry: Telemetry, realm: str = "corp.local"):
        self.kernel = kernel
        self.fabric = fabric
        self.telemetry = telemetry
        self.realm = realm
        self.hosts: dict[str, Host] = {}
        self.credentials: dict[str, Credential] = {}
        self.directory: dict[str, str] = {}
        self.trusts: set[tuple[str, str]] = set()
        self.event_counts: dict[int, int] = {k: 0 for k in EVENT_CATALOGUE}
        self.npc_actions: dict[tuple[str, int], int] = {}
        self._sport: dict[str, int] = {}
        self._reserved: dict[str, set[int]] = {}

    def add_host(self, h: Host) -> Host:
        if h.id in self.hosts:
            raise HostError(f"duplicate host {h.id}")
        self.fabric.endpoint(h.endpoint)
        self.hosts[h.id] = h
        return h

    def add_credential(self, c: Credential) -> Credential:
        self.credentials[c.principal] = c
        self.directory[c.principal] = c.secret
        return c

    def host(self, ref: str) -> Host:
        if ref in self.hosts:
            return self.hosts[ref]
        for h in self.hosts.values():
            if h.endpoint == ref:
                return h
        raise HostError(f"unknown host {ref!r}")

    def host_by_address(self, addr) -> Host | None:
        try:
            ep = self.fabric.endpoint(addr)
        except ValueError:
            return None
        for h in self.hosts.values():
            if h.endpoint == ep.name:
                return h
        return None

    def ephemeral_port(self, host: str = "", reserve: bool = False) -> int:
        """Next source port for ``host``; reserved ports (long-lived
        connections) are never handed out again."""
        taken = self._reserved.setdefault(host, set())
        port = self._sport.get(host, 49151)
        while True:
            port = 49152 + (port - 49152 + 1) % 16384
            if port not in taken:
                break
        self._sport[host] = port
        if reserve:
            taken.add(port)
        return port

    def log_event(self, host: Host | str, event_id: int, cause: Cause, **fields) -> bool:
        """Write a security event; returns False when audit is suppressed."""
        if event_id not in EVENT_CATALOGUE:
            raise HostError(f"event id {event_id} not in catalogue")
        h = self.host(host) if isinstance(host, str) else host
        t = self.kernel.now
        if t < h.suppressed_until:
            return False
        ep = self.fabric.endpoint(h.endpoint)
        body = {"event_id": event_id, "host": h.id, "description": EVENT_CATALOGUE[event_id]}
        body.update(fields)
        self.telemetry.emit(t, "host_event", h.id, body, cause, segment=ep.segment)
        self.event_counts[event_id] += 1
        return True

    def suppress(self, host: str, until: int) -> None:
        self.host(host).suppressed_until = until

    def rotate_secret(self, principal: str, new_secret: str) -> None:
        if principal not in self.directory:
            raise HostError(f"unknown principal {principal!r}")
        self.directory[principal] = new_secret

    def harvest(self, host: str) -> list[Credential]:
        """Credentials cached in memory on ``host`` (what an LSASS dump yields)."""
        return sorted((c for c in self.credentials.values() if host in c.stored_on),
                      key=lambda c: (GRADES.index(c.grade), c.principal))

    def send(self, src: Host, dst: Host, transport: str, port: int, cause: Cause,
             protocol: str = "", payload: bytes = b"", info: dict | None = None,
             on_drop: Callable | None = None, sport: int | None = None):
        dst_ep = self.fabric.endpoint(dst.endpoint)
        src_ep = self.fabric.endpoint(src.endpoint)
        sport = self.ephemeral_port(src.id) if sport is None else sport
        p = Packet(src_ep.address, dst_ep.address, transport, sport, port,
                   payload, self.kernel.now, protocol=protocol, cause=cause, info=info or {})
        return self.fabric.deliver(p, on_drop)

    def authenticate(self, src: str, target: str, cred: Credential, service: str,
                     cause: Cause, secret: str | None = None) -> AuthResult:
        """Network logon from ``src`` to ``target`` with ``cred``.

        Reachability goes through the fabric first; an unreachable target
        raises ``Unreachable`` and produces no host events. Otherwise the
        outcome depends only on the presented secret matching the directory,
        domain trust and the target's allow list.
        """
        s, t = self.host(src), self.host(target)
        port = SERVICE_PORTS[service]
        sport = self.ephemeral_port(s.id)
        outcome = self.send(s, t, "tcp", port, cause, protocol=service,
                            payload=b"\x00" * 64, info={"auth": cred.principal}, sport=sport)
        if isinstance(outcome, Dropped):
            raise Unreachable(outcome)
        presented = cred.secret if secret is None else secret
        reason = ""
        if self.directory.get(cred.principal) != presented:
            reason = "bad_secret"
        elif cred.domain != t.domain and (t.domain, cred.domain) not in self.trusts:
            reason = "untrusted_domain"
        elif (t.allowed_principals is not None and cred.principal not in t.allowed_principals
              and cred.grade != "domain_admin"):
            reason = "not_permitted"
        logon_type = 10 if service == "rdp" else 3
        if reason:
            self.log_event(t, 4625, cause, account=cred.principal, source=s.id,
                           logon_type=logon_type, failure=reason)
            return AuthResult(False, [4625], reason, sport)
        events = [4624]
        self.log_event(t, 4624, cause, account=cred.principal, source=s.id, logon_type=logon_type)
        if cred.grade in ("domain_admin", "service"):
            self.log_event(t, 4672, cause, account=cred.principal)
            events.append(4672)
        return AuthResult(True, events, "", sport)

    def deliver_mail(self, mail: Mail) -> None:
        self.host(mail.recipient).mailbox.append(mail)

    def open_mail(self, host: str, mail: Mail, cause: Cause) -> bool:
        """The user opens ``mail``; returns True when an attachment runs.

        A malicious attachment runs when the user clicks phish, or when it
        was forwarded internally to a user who runs binaries handed to them.
        Opening always creates the mail client process.
        """
        h = self.host(host)
        self.log_event(h, 4688, cause, process="outlook.exe", user=h.user, subject=mail.subject)
        if mail.attachment is None:
            return False
        if mail.malicious and not ("clicks_phish" in h.susceptibility
                                   or (mail.forwarded and "runs_binary" in h.susceptibility)):
            return False
        self.log_event(h, 4688, cause, process=mail.attachment, parent="outlook.exe", user=h.user)
        return mail.malicious

    def note_npc_action(self, role: str, t: int) -> None:
        key = (role, t // US_PER_DAY)
        self.npc_actions[key] = self.npc_actions.get(key, 0) + 1


def working_window(work_start_h: int, work_end_h: int, clock_origin_h: int) -> tuple[int, int]:
    """Offset of the working day start from virtual t=0 and its length."""
    if not 0 <= work_start_h < work_end_h <= 24:
        raise HostError("working hours must satisfy 0 <= start < end <= 24")
    start = ((work_start_h - clock_origin_h) % 24) * US_PER_H
    return start, (work_end_h - work_start_h) * US_PER_H
