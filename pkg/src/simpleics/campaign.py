"""Adversary emulation: abilities, an append-only fact store, implants and
a phase-ordered operation with an abort policy.

Each ability is tied to one technique. It runs from a host that holds a
live implant (or from the external attacker), and every packet, host event
or process effect it causes carries a ``Cause`` labelled with that
technique.
"""
from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from . import US_PER_MS, US_PER_S
from .hostworld import Mail, Unreachable
from .netfabric import Packet
from .protocols import modbus as mb
from .protocols import mqtt
from .protocols.broker import SYS_TOPICS
from .telemetry import Cause, Label

SUCCESS = "success"
BLOCKED = "blocked"

# telemetry category each technique is expected to surface in
TECHNIQUE_CATEGORY = {
    "T1566.001": "host_event", "T1071.001": "network_flow", "T1082": "host_event",
    "T1046": "network_flow", "T1562": "host_event", "T1003.001": "host_event",
    "T1087.002": "host_event", "T1135": "host_event", "T1021.002": "network_flow",
    "T1078": "host_event", "T0808": "packet_payload", "T0813": "packet_payload",
    "T0807": "host_event", "T1547": "host_event", "T0801": "operational",
    "T0892": "host_event", "T0836": "packet_payload", "T0832": "packet_payload",
    "T0831": "operational",
}

SCAN_PORTS = (22, 25, 80, 389, 443, 445, 3389)
SCAN_SUBNETS = ("10.10.0.0/24", "10.20.0.0/24", "10.20.1.0/24", "10.30.0.0/24")
OT_SUBNETS = ("10.40.0.0/24", "10.50.0.0/24")
SWEEP_HOSTS = 40


class CampaignError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ability:
    id: str
    technique: str
    name: str
    tactic: str
    requires: tuple[str, ...] = ()


ABILITIES = {a.technique: a for a in (
    Ability("A01", "T1566.001", "spearphishing attachment", "initial-access"),
    Ability("A02", "T1071.001", "https command and control", "command-and-control", ("implant.foothold",)),
    Ability("A03", "T1082", "system information discovery", "discovery", ("implant.foothold",)),
    Ability("A04", "T1046", "network service discovery", "discovery", ("implant.foothold",)),
    Ability("A05", "T1562", "impair defenses", "defense-evasion", ("implant.foothold",)),
    Ability("A06", "T1003.001", "lsass memory", "credential-access", ("implant.foothold",)),
    Ability("A07", "T1087.002", "domain account discovery", "discovery", ("implant.foothold",)),
    Ability("A08", "T1135", "network share discovery", "discovery", ("implant.foothold", "svc.445")),
    Ability("A09", "T1021.002", "smb admin shares", "lateral-movement",
            ("implant.foothold", "cred.domain_admin", "share.admin")),
    Ability("A10", "T1078", "valid accounts to jump host", "lateral-movement",
            ("implant.engineering", "cred.domain_admin", "svc.3389")),
    Ability("A11", "T0808", "control device identification", "discovery", ("implant.jump",)),
    Ability("A12", "T0813", "process discovery", "discovery", ("implant.jump", "ot.modbus")),
    Ability("A13", "T0807", "command-line interface", "execution", ("implant.jump",)),
    Ability("A14", "T1547", "autostart persistence", "persistence", ("implant.jump",)),
    Ability("A15", "T0801", "monitor process state", "collection", ("implant.jump", "ot.plc")),
    Ability("A16", "T0892", "change credential", "inhibit-response", ("implant.jump", "cred.domain_admin")),
    Ability("A17", "T0836", "modify parameter", "impair-process-control",
            ("implant.jump", "iiot.broker", "iiot.cmd_prefix")),
    Ability("A18", "T0832", "manipulation of view", "impact", ("implant.jump", "ot.plc")),
    Ability("A19", "T0831", "manipulation of control", "impact", ("implant.jump", "ot.plc")),
)}


@dataclass(frozen=True)
class Fact:
    key: str
    value: Any
    source: str
    t: int


class FactStore:
    """Append-only store; a key may accumulate several values."""

    def __init__(self) -> None:
        self._facts: list[Fact] = []

    def add(self, key: str, value, source: str, t: int) -> Fact | None:
        if any(f.key == key and f.value == value for f in self._facts):
            return None
        f = Fact(key, value, source, t)
        self._facts.append(f)
        return f

    def has(self, key: str) -> bool:
        return any(f.key == key or f.key.startswith(key + ".") for f in self._facts)

    def values(self, key: str) -> list:
        return [f.value for f in self._facts if f.key == key]

    def first(self, key: str, default=None):
        vals = self.values(key)
        return vals[0] if vals else default

    def __iter__(self):
        return iter(tuple(self._facts))

    def __len__(self) -> int:
        return len(self._facts)


@dataclass
class Implant:
    id: str
    host: str
    installed_at: int
    via: str
    # C2 over a session we already hold: (peer address, peer port, local port)
    session: tuple | None = None
    alive: bool = True


@dataclass
class Step:
    ability: str
    technique: str
    phase: str
    attempt: int
    start: int
    end: int = -1
    outcome: str = ""
    reason: str = ""
    host: str = ""
    facts: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"ability": self.ability, "technique": self.technique, "phase": self.phase,
                "attempt": self.attempt, "start_us": self.start, "end_us": self.end,
                "outcome": self.outcome, "reason": self.reason, "host": self.host,
                "facts": self.facts}


class Campaign:
    """Runs the configured phases in order inside a ``World``."""

    def __init__(self, world, cfg: dict):
        self.world = world
        self.cfg = cfg
        self.id = cfg["id"]
        self.kernel = world.kernel
        self.rng = world.kernel.fork_rng("campaign")
        self.forward_rng = world.kernel.fork_rng("campaign.forward")
        self._phish_mail = None
        self.facts = FactStore()
        self.implants: dict[str, Implant] = {}
        self.steps: list[Step] = []
        self.phases = [(p["name"], list(p["abilities"])) for p in cfg["phases"]]
        self.phase_status = {name: "not_started" for name, _ in self.phases}
        self.phase_times: dict[str, list[int]] = {}
        self.status = "pending"
        self.attacker = cfg.get("attacker", "attacker")
        self.victim = cfg.get("victim", "ws-bob")
        self.targets = {"engineering": cfg.get("lateral_target", "eng-ws"),
                        "jump": cfg.get("jump_host", "jump01"),
                        "ot_dc": cfg.get("ot_dc", "otdc01"),
                        "historian": cfg.get("historian", "hist01"),
                        "dc": cfg.get("dc", "dc01"),
                        "mail": cfg.get("mail", "mail01")}
        self.gap = tuple(int(x * US_PER_S) for x in cfg.get("ability_gap_s", (20, 60)))
        self.phase_gap = int(cfg.get("phase_gap_s", 120) * US_PER_S)
        self.retries = cfg.get("retries", 2)
        self.retry_delay = int(cfg.get("retry_delay_s", 60) * US_PER_S)
        self.beacon = int(cfg.get("beacon_s", 30) * US_PER_S)
        self.suppress = int(cfg.get("suppress_s", 60) * US_PER_S)
        self.collect = int(cfg.get("collect_s", 5) * US_PER_S)
        self.thresholds = cfg.get("malicious_thresholds", [28800, 32000])
        self._cursor = (0, 0)
        self._attempt = 1
        self._current: Step | None = None
        self._pending_phish = None
        self._sport = 30000
        self.beacons_sent = 0
        self.kernel.schedule(int(cfg.get("start_s", 300) * US_PER_S), "campaign.start", self._start)

    # -- helpers -------------------------------------------------------

    def cause(self, technique: str) -> Cause:
        a = ABILITIES[technique]
        return Cause(f"ability:{self.id}.{a.id}", Label(self.id, technique, a.id))

    @property
    def now(self) -> int:
        return self.kernel.now

    def _fact(self, key: str, value) -> None:
        tech = self._current.technique if self._current else "setup"
        f = self.facts.add(key, value, tech, self.now)
        if f is not None and self._current is not None:
            self._current.facts.append({"key": key, "value": value})

    def _ports(self) -> int:
        self._sport = 30000 + (self._sport - 29999) % 10000
        return self._sport

    def send(self, src: str, dst_addr, port: int, technique: str, payload: bytes = b"",
             protocol: str = "", info: dict | None = None, on_reply: Callable | None = None,
             sport: int | None = None, transport: str = "tcp"):
        """Raw packet from a host the campaign controls."""
        if src != self.attacker and not any(i.host == src and i.alive for i in self.implants.values()):
            raise CampaignError(f"no live implant on {src}")
        fab = self.world.fabric
        ep = fab.endpoint(src)
        sport = self._ports() if sport is None else sport
        if on_reply is not None:
            fab.bind(ep, transport, sport, on_reply, listen=False)
        info = dict(info or {})
        info.setdefault("dir", "request")
        p = Packet(ep.address, ipaddress.IPv4Address(dst_addr), transport, sport, port, payload,
                   protocol=protocol or None, cause=self.cause(technique), info=info)
        return fab.deliver(p)

    def addr(self, host: str):
        return self.world.fabric.endpoint(host).address

    def host_event(self, host: str, event_id: int, technique: str, **fields) -> bool:
        return self.world.hosts.log_event(host, event_id, self.cause(technique), **fields)

    def implant_on(self, role: str) -> Implant | None:
        return self.implants.get(role)

    def install(self, role: str, host: str, via: str, session: tuple | None = None) -> Implant:
        imp = Implant(f"imp-{len(self.implants) + 1}", host, self.now, via, session)
        self.implants[role] = imp
        self.world.hosts.host(host).implants.append(imp.id)
        self._fact(f"implant.{role}", host)
        return imp

    # -- beacons -------------------------------------------------------

    def _start_beacon(self, imp: Implant) -> None:
        def fire():
            if not imp.alive:
                return
            self._beacon(imp)
            jitter = self.rng.randint(-self.beacon // 5, self.beacon // 5)
            self.kernel.schedule_in(self.beacon + jitter, f"campaign.beacon.{imp.id}", fire)
        fire()

    def _beacon(self, imp: Implant):
        self.beacons_sent += 1
        payload = b"\x17\x03\x03" + b"\x00" * 197
        if imp.session is None:
            return self.send(imp.host, self.addr(self.attacker), 443, "T1071.001", payload,
                             protocol="https", sport=self._ports())
        peer, peer_port, local_port = imp.session
        return self.send(imp.host, peer, peer_port, "T1071.001", payload, protocol="rdp",
                         sport=local_port, info={"dir": "response"})

    # -- scheduling ----------------------------------------------------

    def _start(self) -> None:
        self.status = "running"
        self._run_current()

    def _ability_at(self, cursor):
        pi, ai = cursor
        name, abilities = self.phases[pi]
        return name, ABILITIES[abilities[ai]]

    def _run_current(self) -> None:
        phase, ability = self._ability_at(self._cursor)
        if self.phase_status[phase] == "not_started":
            self.phase_status[phase] = "running"
            self.phase_times[phase] = [self.now, -1]
        step = Step(ability.id, ability.technique, phase, self._attempt, self.now)
        self._current = step
        self.steps.append(step)
        missing = [r for r in ability.requires if not self.facts.has(r)]
        if missing:
            self._complete(BLOCKED, "unmet_precondition:" + ",".join(missing))
            return
        try:
            getattr(self, "_x_" + ability.technique.replace(".", "_"))(step)
        except Unreachable:
            self._complete(BLOCKED, "network_denied")

    def _complete(self, outcome: str, reason: str = "") -> None:
        step = self._current
        if step is None or step.end >= 0:
            return
        step.end = self.now
        step.outcome = outcome
        step.reason = reason
        self._current = None
        pi, ai = self._cursor
        phase = self.phases[pi][0]
        if outcome != SUCCESS:
            if self._attempt <= self.retries:
                self._attempt += 1
                self.kernel.schedule_in(self.retry_delay, "campaign.retry", self._run_current)
                return
            self.phase_status[phase] = "aborted"
            self.phase_times[phase][1] = self.now
            self.status = "aborted"
            return
        self._attempt = 1
        if ai + 1 < len(self.phases[pi][1]):
            self._cursor = (pi, ai + 1)
            delay = self.rng.randint(*self.gap)
        else:
            self.phase_status[phase] = "completed"
            self.phase_times[phase][1] = self.now
            if pi + 1 == len(self.phases):
                self.status = "completed"
                return
            self._cursor = (pi + 1, 0)
            delay = self.phase_gap + self.rng.randint(*self.gap)
        self.kernel.schedule_in(delay, "campaign.next", self._run_current)

    def _after(self, delay_us: int, fn) -> None:
        self.kernel.schedule_in(delay_us, "campaign.collect", fn)

    # -- abilities -----------------------------------------------------

    def _x_T1566_001(self, step: Step) -> None:
        mail_host = self.targets["mail"]
        out = self.send(self.attacker, self.addr(mail_host), 25, "T1566.001",
                        b"EHLO\r\n" + b"\x00" * 400, protocol="smtp")
        if not out.ok:
            self._complete(BLOCKED, "network_denied")
            return
        step.host = self.victim
        mail = Mail("billing@203.0.113.10", self.victim, "Invoice overdue",
                    attachment="invoice.docm", malicious=True, cause=self.cause("T1566.001"))
        self._phish_mail = mail
        self.world.deliver_phish(mail)
        self._pending_phish = self.kernel.schedule_in(
            self.world.read_delay[1] + 60 * US_PER_S, "campaign.phish_timeout",
            lambda: self._complete(BLOCKED, "not_executed"))

    def on_phish_executed(self, host: str) -> None:
        if self._current is None or self._current.technique != "T1566.001":
            return
        if self._pending_phish is not None:
            self.kernel.cancel(self._pending_phish)
        self.install("foothold", host, "T1566.001")
        mail = self._phish_mail
        if mail is not None and self.world.forward_attachment(host, mail, self.forward_rng):
            self._phish_mail = None
        self._complete(SUCCESS)

    def on_forward_executed(self, host: str) -> None:
        # the forwarded binary runs inside OT but never gets a channel out
        self.facts.add("host.ot_binary", host, "T1566.001", self.now)

    def _x_T1071_001(self, step: Step) -> None:
        imp = self.implants["foothold"]
        step.host = imp.host
        out = self._beacon(imp)
        if not out.ok:
            self._complete(BLOCKED, "network_denied")
            return
        self._fact("c2.channel", "https")
        self._start_beacon(imp)
        self._complete(SUCCESS)

    def _x_T1082(self, step: Step) -> None:
        host = step.host = self.implants["foothold"].host
        self.host_event(host, 4688, "T1082", process="systeminfo.exe", parent="rundll32.exe")
        h = self.world.hosts.host(host)
        self._fact(f"host.{host}.os", h.os)
        self._fact(f"host.{host}.domain", h.domain)
        self._complete(SUCCESS)

    def _x_T1046(self, step: Step) -> None:
        host = step.host = self.implants["foothold"].host
        self.host_event(host, 4688, "T1046", process="scan.exe", parent="rundll32.exe")
        own = self.addr(host)
        found = []

        def reply(p: Packet):
            found.append((str(p.src), p.src_port))

        for net in SCAN_SUBNETS:
            hosts = list(ipaddress.IPv4Network(net).hosts())[:SWEEP_HOSTS]
            for a in hosts:
                if a == own:
                    continue
                for port in SCAN_PORTS:
                    self.send(host, a, port, "T1046", b"", protocol="scan", on_reply=reply)

        def done():
            for addr, port in sorted(set(found)):
                self._fact(f"svc.{port}", addr)
            if found:
                self._complete(SUCCESS)
            else:
                self._complete(BLOCKED, "no_services")

        self._after(self.collect, done)

    def _x_T1562(self, step: Step) -> None:
        host = step.host = self.implants["foothold"].host
        self.host_event(host, 4688, "T1562", process="auditpol.exe",
                        command="auditpol /set /category:* /success:disable")
        self.world.hosts.suppress(host, self.now + self.suppress)
        self._fact(f"defense.{host}", "audit_suppressed")
        self._complete(SUCCESS)

    def _x_T1003_001(self, step: Step) -> None:
        host = step.host = self.implants["foothold"].host
        self.host_event(host, 4688, "T1003.001", process="rundll32.exe",
                        command="comsvcs.dll MiniDump lsass.exe")
        creds = self.world.hosts.harvest(host)
        for c in creds:
            self._fact(f"cred.{c.grade}", c.principal)
        self._complete(SUCCESS if creds else BLOCKED, "" if creds else "no_credentials")

    def _x_T1087_002(self, step: Step) -> None:
        host = step.host = self.implants["foothold"].host
        self.host_event(host, 4688, "T1087.002", process="net.exe", command="net group \"Domain Admins\" /domain")
        out = self.send(host, self.addr(self.targets["dc"]), 389, "T1087.002", b"\x30" * 80, protocol="ldap")
        if not out.ok:
            self._complete(BLOCKED, "network_denied")
            return
        admins = sorted(c.principal for c in self.world.hosts.credentials.values()
                        if c.grade == "domain_admin" and c.domain == self.world.hosts.host(host).domain)
        for a in admins:
            self._fact("domain.admin", a)
        self._complete(SUCCESS)

    def _x_T1135(self, step: Step) -> None:
        host = step.host = self.implants["foothold"].host
        self.host_event(host, 4688, "T1135", process="net.exe", command="net view /all")
        hits = 0
        for addr in self.facts.values("svc.445"):
            target = self.world.hosts.host_by_address(addr)
            out = self.send(host, addr, 445, "T1135", b"\x00" * 120, protocol="smb")
            if out.ok and target is not None:
                hits += 1
                self._fact("share.admin", target.id)
                self.host_event(target, 5140, "T1135", share=f"\\\\{target.id}\\IPC$", source=host)
        self._complete(SUCCESS if hits else BLOCKED, "" if hits else "no_shares")

    def _x_T1021_002(self, step: Step) -> None:
        src = self.implants["foothold"].host
        target = step.host = self.targets["engineering"]
        if target not in self.facts.values("share.admin"):
            self._complete(BLOCKED, "unmet_precondition:share.admin")
            return
        cred = self.world.hosts.credentials[self.facts.first("cred.domain_admin")]
        res = self.world.hosts.authenticate(src, target, cred, "smb", self.cause("T1021.002"))
        if not res.ok:
            self._complete(BLOCKED, f"auth_failed:{res.reason}")
            return
        self.send(src, self.addr(target), 445, "T1021.002", b"\x00" * 1400, protocol="smb")
        self.host_event(target, 5140, "T1021.002", share=f"\\\\{target}\\ADMIN$", account=cred.principal)
        self.host_event(target, 7045, "T1021.002", service="PSEXESVC", image="%SystemRoot%\\PSEXESVC.exe")
        imp = self.install("engineering", target, "T1021.002")
        self._start_beacon(imp)
        self._complete(SUCCESS)

    def _x_T1078(self, step: Step) -> None:
        src = self.implants["engineering"].host
        jump = step.host = self.targets["jump"]
        if str(self.addr(jump)) not in self.facts.values("svc.3389"):
            self._complete(BLOCKED, "unmet_precondition:svc.3389")
            return
        cred = self.world.hosts.credentials[self.facts.first("cred.domain_admin")]
        res = self.world.hosts.authenticate(src, jump, cred, "rdp", self.cause("T1078"))
        if not res.ok:
            self._complete(BLOCKED, f"auth_failed:{res.reason}")
            return
        imp = self.install("jump", jump, "T1078", session=(self.addr(src), res.sport, 3389))
        self._start_beacon(imp)
        self._complete(SUCCESS)

    def _x_T0808(self, step: Step) -> None:
        jump = step.host = self.implants["jump"].host
        found_mb, found_mqtt = [], []

        def mb_reply(p: Packet):
            found_mb.append(str(p.src))

        def mqtt_reply(p: Packet):
            found_mqtt.append(str(p.src))

        txn = 0
        for net in OT_SUBNETS:
            for a in list(ipaddress.IPv4Network(net).hosts())[:SWEEP_HOSTS]:
                txn += 1
                f = mb.read_request(txn, 1, 3, 0, 1)
                self.send(jump, a, 502, "T0808", mb.modbus_encode(f), protocol="modbus",
                          info={"function": 3, "address": 0, "quantity": 1}, on_reply=mb_reply)
                self.send(jump, a, 1883, "T0808", mqtt.mqtt_encode(mqtt.connect(f"probe{txn}")),
                          protocol="mqtt", info={"kind": "CONNECT"}, on_reply=mqtt_reply)

        def done():
            for a in sorted(set(found_mb)):
                self._fact("ot.modbus", a)
            for a in sorted(set(found_mqtt)):
                self._fact("iiot.broker", a)
            ok = bool(found_mb or found_mqtt)
            self._complete(SUCCESS if ok else BLOCKED, "" if ok else "no_devices")

        self._after(self.collect, done)

    def _x_T0813(self, step: Step) -> None:
        jump = step.host = self.implants["jump"].host
        coils: dict[str, tuple] = {}
        topics: list[str] = []
        reads = [(1, 800, 16), (3, 100, 4), (4, 100, 4)]
        for n, addr in enumerate(self.facts.values("ot.modbus")):
            for k, (fc, start, qty) in enumerate(reads):
                def reply(p: Packet, addr=addr, fc=fc):
                    try:
                        r = mb.modbus_decode(p.payload, response=True)
                    except mb.ModbusError:
                        return
                    if fc == 1 and not r.is_exception:
                        coils[addr] = r.values
                f = mb.read_request(100 + 3 * n + k, 1, fc, start, qty)
                self.send(jump, addr, 502, "T0813", mb.modbus_encode(f), protocol="modbus",
                          info={"function": fc, "address": start, "quantity": qty}, on_reply=reply)
        for broker in self.facts.values("iiot.broker"):
            sport = self._ports()

            def reply(p: Packet):
                try:
                    pkt = mqtt.mqtt_decode(p.payload)
                except mqtt.MqttError:
                    return
                if pkt.kind == mqtt.Kind.PUBLISH and pkt.topic == SYS_TOPICS:
                    topics.extend(json.loads(pkt.payload))

            self.send(jump, broker, 1883, "T0813", mqtt.mqtt_encode(mqtt.connect("diag")),
                      protocol="mqtt", info={"kind": "CONNECT"}, on_reply=reply, sport=sport)
            sub = mqtt.subscribe(1, (SYS_TOPICS, 0))
            self._after(50 * US_PER_MS, lambda b=broker, s=sport, sub=sub: self.send(
                jump, b, 1883, "T0813", mqtt.mqtt_encode(sub), protocol="mqtt",
                info={"kind": "SUBSCRIBE", "topic": SYS_TOPICS}, sport=s))

        def done():
            for addr in sorted(coils):
                # the controller is the device whose run command coil (%QX101.0) is set
                if len(coils[addr]) > 8 and coils[addr][8]:
                    self._fact("ot.plc", addr)
                else:
                    self._fact("ot.io_device", addr)
            for t in sorted(set(topics)):
                self._fact("iiot.topic", t)
                if t.endswith("/cmd/#"):
                    self._fact("iiot.cmd_prefix", t[:-2])
            ok = bool(coils or topics)
            self._complete(SUCCESS if ok else BLOCKED, "" if ok else "no_process_data")

        self._after(self.collect, done)

    def _x_T0807(self, step: Step) -> None:
        jump = step.host = self.implants["jump"].host
        self.host_event(jump, 4688, "T0807", process="cmd.exe", command="cmd.exe /c whoami & ipconfig /all")
        self.host_event(jump, 4688, "T0807", process="powershell.exe",
                        command="powershell -nop -w hidden -enc ...")
        self._complete(SUCCESS)

    def _x_T1547(self, step: Step) -> None:
        jump = step.host = self.implants["jump"].host
        self.host_event(jump, 4688, "T1547", process="reg.exe",
                        command="reg add HKLM\\Software\\Microsoft\\Windows\\CurrentVersion\\Run /v Updater")
        self.host_event(jump, 7045, "T1547", service="UpdaterSvc", start_type="auto")
        self._fact(f"persistence.{jump}", "run_key")
        self._complete(SUCCESS)

    def _x_T0801(self, step: Step) -> None:
        jump = step.host = self.implants["jump"].host
        hist = self.targets["historian"]
        answered = []
        self.send(jump, self.addr(hist), 8086, "T0801", b"SELECT * FROM line" + b"\x00" * 40,
                  protocol="historian", info={"query": "SELECT * FROM line, sorter"},
                  on_reply=lambda p: answered.append(p))
        plc = self.facts.first("ot.plc")
        for i in range(5):
            f = mb.read_request(200 + i, 1, 3, 120, 3)
            self._after(i * US_PER_S, lambda f=f: self.send(
                jump, plc, 502, "T0801", mb.modbus_encode(f), protocol="modbus",
                info={"function": 3, "address": 120, "quantity": 3}))

        def done():
            if answered:
                self._fact("ot.history", hist)
                self._complete(SUCCESS)
            else:
                self._complete(BLOCKED, "network_denied")

        self._after(self.collect, done)

    def _x_T0892(self, step: Step) -> None:
        jump = self.implants["jump"].host
        dc = step.host = self.targets["ot_dc"]
        cred = self.world.hosts.credentials[self.facts.first("cred.domain_admin")]
        res = self.world.hosts.authenticate(jump, dc, cred, "smb", self.cause("T0892"))
        if not res.ok:
            self._complete(BLOCKED, f"auth_failed:{res.reason}")
            return
        self.host_event(dc, 4688, "T0892", process="net.exe", command="net user svc-hmi ******** /domain",
                        account=cred.principal)
        self.world.hosts.rotate_secret("svc-hmi", f"pwned-{self.rng.randrange(1 << 32):08x}")
        self._fact("cred.changed", "svc-hmi")
        self._complete(SUCCESS)

    def _x_T0836(self, step: Step) -> None:
        jump = step.host = self.implants["jump"].host
        broker = self.facts.first("iiot.broker")
        topic = self.facts.first("iiot.cmd_prefix") + "/threshold"
        acked = []
        sport = self._ports()

        def reply(p: Packet):
            try:
                pkt = mqtt.mqtt_decode(p.payload)
            except mqtt.MqttError:
                return
            if pkt.kind == mqtt.Kind.PUBACK:
                acked.append(pkt)

        self.send(jump, broker, 1883, "T0836", mqtt.mqtt_encode(mqtt.connect("maint")),
                  protocol="mqtt", info={"kind": "CONNECT"}, on_reply=reply, sport=sport)
        low, high = self.thresholds
        payload = json.dumps({"low": low, "high": high}).encode()
        pub = mqtt.publish(topic, payload, qos=1, packet_id=1)
        self._after(50 * US_PER_MS, lambda: self.send(
            jump, broker, 1883, "T0836", mqtt.mqtt_encode(pub), protocol="mqtt",
            info={"kind": "PUBLISH", "topic": topic}, sport=sport))

        def done():
            if acked:
                self._fact("impact.thresholds", [low, high])
                self._complete(SUCCESS)
            else:
                self._complete(BLOCKED, "no_ack")

        self._after(self.collect, done)

    def _modbus_write(self, technique: str, frame: mb.ModbusFrame, fact: tuple) -> None:
        jump = self._current.host = self.implants["jump"].host
        plc = self.facts.first("ot.plc")
        ok = []

        def reply(p: Packet):
            try:
                r = mb.modbus_decode(p.payload, response=True)
            except mb.ModbusError:
                return
            ok.append(not r.is_exception)

        from .world import frame_info
        self.send(jump, plc, 502, technique, mb.modbus_encode(frame), protocol="modbus",
                  info=frame_info(frame), on_reply=reply)

        def done():
            if ok and all(ok):
                self._fact(*fact)
                self._complete(SUCCESS)
            else:
                self._complete(BLOCKED, "write_rejected" if ok else "no_response")

        self._after(self.collect, done)

    def _x_T0832(self, step: Step) -> None:
        from .world import OVERRIDE_REGISTER
        self._modbus_write("T0832", mb.write_registers(300, 1, OVERRIDE_REGISTER, [1]),
                           ("impact.view", "override_armed"))

    def _x_T0831(self, step: Step) -> None:
        from .world import RUN_COIL
        self._modbus_write("T0831", mb.write_coil(301, 1, RUN_COIL, False),
                           ("impact.control", "line_stopped"))

    # -- reporting -----------------------------------------------------

    def trace(self) -> dict:
        return {
            "campaign_id": self.id,
            "enabled": True,
            "status": self.status,
            "phases": [{"name": n, "status": self.phase_status[n],
                        "start_us": self.phase_times.get(n, [-1, -1])[0],
                        "end_us": self.phase_times.get(n, [-1, -1])[1],
                        "abilities": abilities} for n, abilities in self.phases],
            "steps": [s.as_dict() for s in self.steps],
            "implants": [{"id": i.id, "role": r, "host": i.host, "installed_us": i.installed_at,
                          "via": i.via} for r, i in self.implants.items()],
            "facts": [{"key": f.key, "value": f.value, "source": f.source, "t": f.t} for f in self.facts],
        }
