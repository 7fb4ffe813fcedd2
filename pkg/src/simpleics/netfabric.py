"""Segmented L3/L4 network: segments, latency links, ordered-rule firewalls,
per-segment taps.

Packets are routed over a small graph whose nodes are segments and firewalls;
segments never act as transit. Every firewall on the path evaluates its rule
list (first match wins, implicit deny at the end). Replies on a session that
was already let through are passed as ``established``.
"""
from __future__ import annotations

import ipaddress
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .simkernel import Kernel

SEGMENT_IDS = ("EXTERNAL", "IT_DMZ", "IT_LAN", "OT_DMZ", "OT", "IIOT", "SOC_TAP")
IT_SEGMENTS = ("IT_DMZ", "IT_LAN")
OT_SEGMENTS = ("OT_DMZ", "OT", "IIOT")
MTU = 1500
IMPLICIT_DENY = "implicit-deny"
ESTABLISHED = "established"


class FabricError(ValueError):
    pass


@dataclass
class Segment:
    id: str
    cidr: ipaddress.IPv4Network
    vlans: list[ipaddress.IPv4Network] = field(default_factory=list)
    monitor: bool = False

    def __post_init__(self):
        if self.id not in SEGMENT_IDS:
            raise FabricError(f"unknown segment id {self.id}")
        self.cidr = ipaddress.IPv4Network(self.cidr)
        self.vlans = [ipaddress.IPv4Network(v) for v in self.vlans]
        for v in self.vlans:
            if not v.subnet_of(self.cidr):
                raise FabricError(f"VLAN {v} is not inside {self.id} {self.cidr}")


@dataclass
class Endpoint:
    name: str
    address: ipaddress.IPv4Address
    segment: str
    open_ports: set[tuple[str, int]] = field(default_factory=set)
    up: bool = True
    handlers: dict[tuple[str, int], Callable[["Packet"], Any]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.address = ipaddress.IPv4Address(self.address)


@dataclass
class Link:
    a: str
    b: str
    latency_us: int
    jitter_us: int
    bandwidth_kbps: int = 1_000_000

    def __post_init__(self):
        if self.latency_us <= 0:
            raise FabricError(f"link {self.a}-{self.b}: latency must be positive")
        if not 0 <= self.jitter_us < self.latency_us:
            raise FabricError(f"link {self.a}-{self.b}: jitter must be below latency")
        if self.bandwidth_kbps <= 0:
            raise FabricError(f"link {self.a}-{self.b}: bandwidth must be positive")

    @property
    def key(self) -> str:
        return "~".join(sorted((self.a, self.b)))


@dataclass(frozen=True)
class FirewallRule:
    rule_id: str
    src: ipaddress.IPv4Network
    dst: ipaddress.IPv4Network
    transport: str = "tcp"
    dst_port: int | None = None
    action: str = "allow"

    def matches(self, src, dst, transport: str, dst_port: int) -> bool:
        return (src in self.src and dst in self.dst
                and self.transport in (transport, "any")
                and (self.dst_port is None or self.dst_port == dst_port))


@dataclass
class Firewall:
    id: str
    rules: list[FirewallRule] = field(default_factory=list)

    def evaluate(self, src, dst, transport: str, dst_port: int) -> tuple[str, str]:
        for rule in self.rules:
            if rule.matches(src, dst, transport, dst_port):
                return rule.action, rule.rule_id
        return "deny", IMPLICIT_DENY


_ADDR_STR: dict[ipaddress.IPv4Address, str] = {}


def _addr_str(a: ipaddress.IPv4Address) -> str:
    s = _ADDR_STR.get(a)
    if s is None:
        s = _ADDR_STR[a] = str(a)
    return s


@dataclass
class Packet:
    src: ipaddress.IPv4Address
    dst: ipaddress.IPv4Address
    transport: str
    src_port: int
    dst_port: int
    payload: bytes = b""
    sent_at: int = 0
    protocol: str | None = None
    cause: Any = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if type(self.src) is not ipaddress.IPv4Address:
            self.src = ipaddress.IPv4Address(self.src)
        if type(self.dst) is not ipaddress.IPv4Address:
            self.dst = ipaddress.IPv4Address(self.dst)
        self._tuple = None

    @property
    def five_tuple(self) -> tuple:
        if self._tuple is None:
            self._tuple = (_addr_str(self.src), self.src_port, _addr_str(self.dst),
                           self.dst_port, self.transport)
        return self._tuple

    @property
    def fragments(self) -> int:
        return max(1, math.ceil(len(self.payload) / MTU))


@dataclass(frozen=True)
class Delivered:
    at: int
    path: tuple[str, ...] = ()

    ok = True


@dataclass(frozen=True)
class Dropped:
    reason: str
    rule_id: str | None = None
    path: tuple[str, ...] = ()

    ok = False


@dataclass
class LatencyStats:
    mean_us: float
    min_us: int
    max_us: int
    loss_fraction: float
    count: int
    samples: list[int] = field(default_factory=list, repr=False)


TapObserver = Callable[[str, Packet, Any, int], None]


class Fabric:
    def __init__(self, kernel: Kernel, segments: list[Segment], endpoints: list[Endpoint],
                 links: list[Link], firewalls: list[Firewall]):
        self.kernel = kernel
        self.segments = {s.id: s for s in segments}
        nets = sorted(self.segments.values(), key=lambda s: s.id)
        for i, s in enumerate(nets):
            for t in nets[i + 1:]:
                if s.cidr.overlaps(t.cidr):
                    raise FabricError(f"segments {s.id} and {t.id} overlap")
        self.endpoints: dict[ipaddress.IPv4Address, Endpoint] = {}
        self.by_name: dict[str, Endpoint] = {}
        for ep in endpoints:
            self.add_endpoint(ep)
        self.firewalls = {f.id: f for f in firewalls}
        self.links: dict[tuple[str, str], Link] = {}
        self._adj: dict[str, list[str]] = {}
        for ln in links:
            for n in (ln.a, ln.b):
                if n not in self.segments and n not in self.firewalls:
                    raise FabricError(f"link endpoint {n} is neither segment nor firewall")
            self.links[(ln.a, ln.b)] = ln
            self.links[(ln.b, ln.a)] = ln
            if ln.a != ln.b:
                self._adj.setdefault(ln.a, []).append(ln.b)
                self._adj.setdefault(ln.b, []).append(ln.a)
        for n in self._adj:
            self._adj[n].sort()
        self._rngs = {}
        for ln in sorted({ln.key: ln for ln in links}.values(), key=lambda x: x.key):
            self._rngs[ln.key] = kernel.fork_rng(f"link.{ln.key}")
        self._paths: dict[tuple[str, str], list[str] | None] = {}
        self._conntrack: set[tuple] = set()
        self._fifo: dict[tuple, int] = {}
        self.taps: dict[str, int] = {}
        self.observers: list[TapObserver] = []
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    # -- topology ---------------------------------------------------------

    def add_endpoint(self, ep: Endpoint) -> None:
        seg = self.segment_of(ep.address)
        if seg is None or seg != ep.segment:
            raise FabricError(f"{ep.name} {ep.address} is not inside segment {ep.segment}")
        if ep.address in self.endpoints:
            raise FabricError(f"duplicate address {ep.address}")
        self.endpoints[ep.address] = ep
        self.by_name[ep.name] = ep

    def segment_of(self, addr) -> str | None:
        addr = ipaddress.IPv4Address(addr)
        hits = [s.id for s in self.segments.values() if addr in s.cidr]
        return hits[0] if len(hits) == 1 else None

    def endpoint(self, ref) -> Endpoint:
        if isinstance(ref, Endpoint):
            return ref
        if isinstance(ref, str) and ref in self.by_name:
            return self.by_name[ref]
        try:
            return self.endpoints[ipaddress.IPv4Address(ref)]
        except (KeyError, ValueError):
            raise FabricError(f"unknown endpoint {ref!r}") from None

    def path(self, src_seg: str, dst_seg: str) -> list[str] | None:
        """Node path between two segments, or None if unroutable."""
        key = (src_seg, dst_seg)
        if key in self._paths:
            return self._paths[key]
        if src_seg == dst_seg:
            result = [src_seg] if (src_seg, src_seg) in self.links else None
        else:
            prev = {src_seg: None}
            q = deque([src_seg])
            while q:
                n = q.popleft()
                if n == dst_seg:
                    break
                if n != src_seg and n in self.segments:
                    continue
                for m in self._adj.get(n, ()):
                    if m not in prev:
                        prev[m] = n
                        q.append(m)
            if dst_seg not in prev:
                result = None
            else:
                result, n = [], dst_seg
                while n is not None:
                    result.append(n)
                    n = prev[n]
                result.reverse()
        self._paths[key] = result
        return result

    def path_links(self, nodes: list[str]) -> list[Link]:
        if len(nodes) == 1:
            return [self.links[(nodes[0], nodes[0])]]
        return [self.links[(a, b)] for a, b in zip(nodes, nodes[1:])]

    def mean_latency_us(self, src_seg: str, dst_seg: str) -> int:
        nodes = self.path(src_seg, dst_seg)
        if nodes is None:
            raise FabricError(f"no route {src_seg} -> {dst_seg}")
        return sum(ln.latency_us for ln in self.path_links(nodes))

    def tap_register(self, segment: str) -> str:
        if segment not in self.segments:
            raise FabricError(f"unknown segment {segment}")
        if segment in self.taps:
            raise FabricError(f"tap already registered on {segment}")
        self.taps[segment] = 0
        return f"tap.{segment}"

    # -- forwarding -------------------------------------------------------

    def evaluate(self, p: Packet) -> tuple[Any, list[str], bool]:
        """Policy verdict for ``p`` without side effects.

        Returns (verdict, node path or [], is_reply).
        """
        src = self.endpoints.get(p.src)
        if src is None or not src.up:
            raise FabricError(f"source {p.src} is not a live endpoint")
        dst = self.endpoints.get(p.dst)
        if dst is None or not dst.up:
            return Dropped("no_route", None, (src.segment,)), [src.segment], False
        nodes = self.path(src.segment, dst.segment)
        if nodes is None:
            return Dropped("no_route", None, (src.segment,)), [src.segment], False
        ft = p.five_tuple
        reverse = (ft[2], ft[3], ft[0], ft[1], ft[4])
        is_reply = reverse in self._conntrack
        if not is_reply:
            for n in nodes:
                fw = self.firewalls.get(n)
                if fw is None:
                    continue
                action, rule_id = fw.evaluate(p.src, p.dst, p.transport, p.dst_port)
                if action != "allow":
                    reached = nodes[:nodes.index(n) + 1]
                    return Dropped("firewall", rule_id, tuple(reached)), reached, False
            if (p.transport, p.dst_port) not in dst.open_ports:
                return Dropped("closed_port", None, tuple(nodes)), nodes, False
        return Delivered(0, tuple(nodes)), nodes, is_reply

    def sample_latency(self, nodes: list[str], payload_len: int) -> int:
        total = 0
        for ln in self.path_links(nodes):
            jitter = self._rngs[ln.key].randint(-ln.jitter_us, ln.jitter_us) if ln.jitter_us else 0
            total += ln.latency_us + jitter + (payload_len * 8 * 1000) // ln.bandwidth_kbps
        return total

    def deliver(self, p: Packet, on_drop: Callable[[Packet, Dropped], Any] | None = None):
        """Route ``p`` now; schedules arrival at the destination handler."""
        now = self.kernel.now
        p.sent_at = now
        self.sent += 1
        verdict, nodes, is_reply = self.evaluate(p)
        if not verdict.ok:
            self.dropped += 1
            self._observe(p, verdict, nodes, now)
            if on_drop is not None:
                on_drop(p, verdict)
            return verdict
        if not is_reply:
            self._conntrack.add(p.five_tuple)
        arrival = now + self.sample_latency(nodes, len(p.payload))
        key = (p.src, p.dst)
        arrival = max(arrival, self._fifo.get(key, -1))
        self._fifo[key] = arrival
        outcome = Delivered(arrival, tuple(nodes))
        self.delivered += 1
        self._observe(p, outcome, nodes, now)
        self.kernel.schedule(arrival, f"net.{self.endpoints[p.dst].name}", self._arrive, p)
        return outcome

    def _arrive(self, p: Packet) -> None:
        ep = self.endpoints[p.dst]
        handler = ep.handlers.get((p.transport, p.dst_port))
        if handler is not None and ep.up:
            handler(p)

    def _observe(self, p: Packet, outcome, nodes: list[str], t: int) -> None:
        for seg in dict.fromkeys(n for n in nodes if n in self.segments):
            if seg in self.taps:
                self.taps[seg] += 1
                for obs in self.observers:
                    obs(seg, p, outcome, t)

    def bind(self, endpoint, transport: str, port: int, handler: Callable[[Packet], Any],
             listen: bool = True) -> None:
        ep = self.endpoint(endpoint)
        ep.handlers[(transport, port)] = handler
        if listen:
            ep.open_ports.add((transport, port))

    def ping(self, a, b, count: int, port: int | None = None) -> LatencyStats:
        """TCP-style reachability probes; RTT is two independent one-way samples."""
        ea, eb = self.endpoint(a), self.endpoint(b)
        if not ea.up or not eb.up:
            raise FabricError("ping endpoints must be up")
        if port is None:
            tcp = sorted(pt for tr, pt in eb.open_ports if tr == "tcp")
            port = tcp[0] if tcp else 7
        probe = Packet(ea.address, eb.address, "tcp", 40000, port)
        verdict, nodes, _ = self.evaluate(probe)
        samples, lost = [], 0
        back = self.path(eb.segment, ea.segment)
        for _ in range(count):
            if not verdict.ok:
                lost += 1
                continue
            samples.append(self.sample_latency(nodes, 0) + self.sample_latency(back, 0))
        if not samples:
            return LatencyStats(math.nan, 0, 0, lost / count if count else 0.0, count)
        return LatencyStats(sum(samples) / len(samples), min(samples), max(samples),
                            lost / count, count, samples)
