"""Assemble a runnable range from a scenario document and drive it.

Everything that moves is a kernel event: PLC scans, physics ticks, Modbus
polls, MQTT traffic, NPC actions, latency probes and campaign steps.
"""
from __future__ import annotations

import ipaddress
import json
from collections import deque
from dataclasses import dataclass

from . import US_PER_DAY, US_PER_MS, US_PER_S
from .hostworld import Credential, Host, HostWorld, Mail, daily_schedule, working_window, Unreachable
from .netfabric import Dropped, Endpoint, Fabric, Firewall, FirewallRule, Link, Packet, Segment
from .protocols import modbus as mb
from .protocols import mqtt
from .protocols.broker import Broker, ProtocolViolation
from .scenario import Settings, npc_frequencies, program_source
from .simkernel import Kernel
from .softplc.image import RegisterBank, serve_modbus
from .softplc.ladder import LadderProgram
from .telemetry import Cause, Telemetry
from .twins import Historian, ProductionLineScene, SorterScene

WRITE_FUNCTIONS = (5, 6, 15, 16)
OVERRIDE_REGISTER = 900
RUN_COIL = 808
RESET_COIL = 809
MODBUS_PORT = 502
MQTT_PORT = 1883
HISTORIAN_PORT = 8086
IO_TABLES = {2: "discrete_inputs", 4: "input_registers"}


def frame_info(f: mb.ModbusFrame) -> dict:
    info = {"function": f.function, "unit": f.unit_id, "txn": f.txn_id,
            "dir": "response" if f.response else "request"}
    if f.address is not None:
        info["address"] = f.address
    if f.quantity is not None:
        info["quantity"] = f.quantity
    if f.function in WRITE_FUNCTIONS and not f.response:
        info["values"] = list(f.values)
    if f.is_exception:
        info["exception"] = f.exception_code
    return info


class ModbusClient:
    """One persistent Modbus/TCP connection from ``src`` to ``dst``."""

    def __init__(self, world: "World", src: str, dst: str, unit_id: int = 1):
        self.world = world
        self.src = world.fabric.endpoint(world.hosts.host(src).endpoint)
        self.dst = world.fabric.endpoint(world.hosts.host(dst).endpoint)
        self.unit_id = unit_id
        self.sport = world.hosts.ephemeral_port(self.src.name, reserve=True)
        self._txn = 0
        self._pending: dict[int, object] = {}
        world.fabric.bind(self.src, "tcp", self.sport, self._on_packet, listen=False)

    def next_txn(self) -> int:
        self._txn = self._txn % 0xFFFF + 1
        return self._txn

    def request(self, frame: mb.ModbusFrame, cause: Cause, on_reply=None) -> bool:
        """Send ``frame``; ``on_reply(response_or_None)`` fires on answer or drop."""
        p = Packet(self.src.address, self.dst.address, "tcp", self.sport, MODBUS_PORT,
                   mb.modbus_encode(frame), protocol="modbus", cause=cause, info=frame_info(frame))
        self._pending[frame.txn_id] = on_reply

        def dropped(_p, _d):
            cb = self._pending.pop(frame.txn_id, None)
            if cb is not None:
                cb(None)

        out = self.world.fabric.deliver(p, dropped)
        return out.ok

    def _on_packet(self, p: Packet) -> None:
        try:
            resp = mb.modbus_decode(p.payload, response=True)
        except mb.ModbusError:
            self.world.diagnostics.append(f"{self.src.name}: undecodable Modbus response")
            return
        cb = self._pending.pop(resp.txn_id, None)
        if cb is not None:
            cb(resp)


class ModbusServer:
    """Serves a register bank on tcp/502 of a host."""

    def __init__(self, world: "World", host: str, bank: RegisterBank, on_write=None, on_read=None):
        self.world = world
        self.ep = world.fabric.endpoint(world.hosts.host(host).endpoint)
        self.bank = bank
        self.on_write = on_write
        self.on_read = on_read
        self.requests = 0
        world.fabric.bind(self.ep, "tcp", MODBUS_PORT, self._on_packet)

    def _on_packet(self, p: Packet) -> None:
        try:
            req = mb.modbus_decode(p.payload)
        except mb.ModbusError as exc:
            self.world.diagnostics.append(f"{self.ep.name}: rejected Modbus request ({exc.reason})")
            return
        self.requests += 1
        resp = serve_modbus(req, self.bank)
        cause = p.cause
        if not resp.is_exception:
            if req.function in WRITE_FUNCTIONS and self.on_write is not None:
                self.on_write(req, p)
            elif self.on_read is not None:
                resp, cause = self.on_read(req, resp, cause)
        reply = Packet(self.ep.address, p.src, "tcp", MODBUS_PORT, p.src_port,
                       mb.modbus_encode(resp), protocol="modbus", cause=cause, info=frame_info(resp))
        self.world.fabric.deliver(reply)


class TwinDevice:
    def __init__(self, world: "World", cfg: dict):
        self.world = world
        self.id = cfg["id"]
        self.host = cfg["host"]
        tick = world.doc.get("run", {}).get("physics_tick_ms", 100)
        rng = world.kernel.fork_rng(f"twin.{self.id}")
        hist = Historian(sink=self._historian_sink)
        params = cfg.get("params", {})
        if cfg["scene"] == "sorter":
            from .twins import SorterParams
            self.scene = SorterScene(rng, SorterParams(**params), tick, hist, name="sorter")
        else:
            from .twins import LineParams
            self.scene = ProductionLineScene(rng, LineParams(**params), tick, hist, name="line")
        self.tick_us = tick * US_PER_MS
        self.cause = Cause(f"physics:{self.id}")
        self.segment = world.fabric.endpoint(world.hosts.host(self.host).endpoint).segment
        self.server = ModbusServer(world, self.host, self.scene.bank, on_write=self._on_write)
        self._next = None
        self.ticks = 0
        self._schedule(0)

    def _historian_sink(self, s) -> None:
        body = {"tag": s.tag, "value": s.value, **s.attrs}
        self.world.telemetry.emit(s.t, "operational", f"historian.{self.id}", body, self.cause,
                                  self.segment)

    def _schedule(self, t: int) -> None:
        t = -(-t // self.tick_us) * self.tick_us
        if self._next is None:
            self._next = self.world.kernel.schedule(t, f"twin.{self.id}", self._tick)

    def _on_write(self, req, p) -> None:
        if self._next is None:
            self._schedule(self.world.kernel.now + 1)

    def _idle(self) -> bool:
        coils = self.scene.bank.coils
        if any(coils[800:806]):
            return False
        if isinstance(self.scene, ProductionLineScene):
            return all(st.cnc is None for st in self.scene.stations)
        return True

    def _tick(self) -> None:
        self._next = None
        self.scene.t_us = self.world.kernel.now - self.tick_us
        self.scene.step(self.scene.tick_ms)
        self.ticks += 1
        if not (self.world.skip_idle and self._idle()):
            self._schedule(self.world.kernel.now + self.tick_us)


class PlcDevice:
    """Soft PLC: scan cycle, Modbus server, and I/O exchange with its twin."""

    def __init__(self, world: "World", cfg: dict, twin: TwinDevice):
        self.world = world
        self.id = cfg["id"]
        self.host = cfg["host"]
        self.bank = RegisterBank()
        for k, v in cfg.get("holding", {}).items():
            self.bank.holding_registers[int(k)] = v
        self.program = LadderProgram.parse(program_source(cfg))
        self.scan_ms = world.doc.get("run", {}).get("plc_scan_ms", 50)
        self.scan_us = self.scan_ms * US_PER_MS
        self.segment = world.fabric.endpoint(world.hosts.host(self.host).endpoint).segment
        self.server = ModbusServer(world, self.host, self.bank, on_write=self._on_write,
                                   on_read=self._on_read)
        self.io = ModbusClient(world, self.host, twin.host)
        self.io_period = max(1, int(cfg["io_poll_ms"] * US_PER_MS / world.settings.poll_scale))
        self.io_cause = Cause(f"poll:{self.id}.io")
        self.io_reads = [tuple(r) for r in cfg.get("io_reads", [[2, 800, 8], [4, 100, 4]])]
        self.io_busy = False
        self.io_overruns = 0
        self.override: dict | None = None
        self.override_cause: Cause | None = None
        self._next = None
        self._dirty = True
        self.scans = 0
        self._wake()
        world.every(self.io_period, f"plc.{self.id}.io", self._io_cycle, offset=world.offset())

    # scan loop
    def _wake(self) -> None:
        self._dirty = True
        if self._next is None:
            now = self.world.kernel.now
            t = -(-now // self.scan_us) * self.scan_us
            self._next = self.world.kernel.schedule(t, f"plc.{self.id}.scan", self._scan)

    def _scan(self) -> None:
        self._next = None
        self._dirty = False
        self.program.scan(self.bank, self.scan_ms)
        self.scans += 1
        if (not self.world.skip_idle or self.program.last_scan_changed or self.program.timing()
                or self._dirty):
            self._next = self.world.kernel.schedule(self.world.kernel.now + self.scan_us,
                                                    f"plc.{self.id}.scan", self._scan)

    # I/O exchange
    def _io_cycle(self) -> None:
        if self.io_busy:
            self.io_overruns += 1
            return
        self.io_busy = True
        self._io_read(0)

    def _io_read(self, i: int) -> None:
        c = self.io
        if i == len(self.io_reads):
            bits = list(self.bank.coils[800:808])
            c.request(mb.write_coils(c.next_txn(), 1, 800, bits), self.io_cause, self._wrote)
            return
        fc, addr, qty = self.io_reads[i]

        def got(resp):
            if resp is None or resp.is_exception:
                self.io_busy = False
                return
            self._store(IO_TABLES[fc], addr, resp.values[:qty])
            self._io_read(i + 1)

        c.request(mb.read_request(c.next_txn(), 1, fc, addr, qty), self.io_cause, got)

    def _wrote(self, resp) -> None:
        self.io_busy = False

    def _store(self, table: str, start: int, values) -> None:
        tab = getattr(self.bank, table)
        values = list(values)
        if list(tab[start:start + len(values)]) != values:
            tab[start:start + len(values)] = bytearray(values) if table == "discrete_inputs" else values
            self._wake()

    # server hooks
    def _on_write(self, req: mb.ModbusFrame, p: Packet) -> None:
        src = self.world.hosts.host_by_address(p.src)
        body = {"event": "external_write", "plc": self.id, "function": req.function,
                "address": req.address, "values": list(req.values),
                "client": src.id if src else str(p.src)}
        self.world.telemetry.emit(self.world.kernel.now, "operational", f"plc.{self.id}", body,
                                  p.cause, self.segment)
        if req.function in (6, 16) and req.address <= OVERRIDE_REGISTER < req.address + len(req.values):
            if self.bank.holding_registers[OVERRIDE_REGISTER]:
                self.override = {"coils": bytes(self.bank.coils),
                                 "holding": tuple(self.bank.holding_registers)}
                self.override_cause = p.cause
            else:
                self.override = None
        self._wake()

    def _on_read(self, req: mb.ModbusFrame, resp: mb.ModbusFrame, cause):
        """Forced values: while an override is armed, coil and holding
        register reads report the snapshot taken when it was armed."""
        if self.override is None or req.function not in (1, 3):
            return resp, cause
        a, q = req.address, req.quantity
        if req.function == 1:
            vals = tuple(self.override["coils"][a:a + q])
        else:
            vals = self.override["holding"][a:a + q]
        if vals == resp.values:
            return resp, cause
        return mb.ModbusFrame(resp.txn_id, resp.unit_id, resp.function, values=vals,
                              response=True), self.override_cause


class HmiDevice:
    def __init__(self, world: "World", cfg: dict, plc: PlcDevice):
        self.world = world
        self.id = cfg["id"]
        self.host = cfg["host"]
        self.plc = plc
        self.client = ModbusClient(world, self.host, plc.host)
        self.reads = [tuple(r) for r in cfg.get("reads", [[1, 800, 16]])]
        self.display: dict[tuple[int, int], tuple] = {}
        self.cause = Cause(f"poll:{self.id}")
        self.busy = False
        period = max(1, int(cfg["poll_ms"] * US_PER_MS / world.settings.poll_scale))
        world.every(period, f"hmi.{self.id}", self._cycle, offset=world.offset())

    def _cycle(self) -> None:
        if self.busy:
            return
        self.busy = True
        self._read(0)

    def _read(self, i: int) -> None:
        if i >= len(self.reads):
            self.busy = False
            return
        fc, addr, qty = self.reads[i]
        c = self.client

        def done(resp):
            if resp is not None and not resp.is_exception:
                self.display[(fc, addr)] = resp.values
            self._read(i + 1)
            if resp is None:
                self.busy = False

        c.request(mb.read_request(c.next_txn(), 1, fc, addr, qty), self.cause, done)

    def command(self, cmd: str, cause: Cause) -> None:
        """Operator start/stop/reset, written to the PLC command coils."""
        c = self.client
        if cmd in ("start", "stop"):
            f = mb.write_coil(c.next_txn(), 1, RUN_COIL, cmd == "start")
        elif cmd == "reset":
            f = mb.write_coil(c.next_txn(), 1, RESET_COIL, True)
        else:
            raise ValueError(f"unknown HMI command {cmd!r}")
        c.request(f, cause)


class BrokerService:
    """MQTT broker bound to tcp/1883; local in-process sessions are allowed."""

    def __init__(self, world: "World", host: str):
        self.world = world
        self.ep = world.fabric.endpoint(world.hosts.host(host).endpoint)
        self.broker = Broker()
        self.remote: dict[str, tuple] = {}
        self.local: dict[str, object] = {}
        world.fabric.bind(self.ep, "tcp", MQTT_PORT, self._on_packet)

    def _on_packet(self, p: Packet) -> None:
        sid = f"{p.src}:{p.src_port}"
        self.remote[sid] = (p.src, p.src_port)
        try:
            pkt = mqtt.mqtt_decode(p.payload)
        except mqtt.MqttError as exc:
            self.world.diagnostics.append(f"broker: malformed packet from {sid} ({exc.reason})")
            return
        self.inject(sid, pkt, p.cause)

    def inject(self, sid: str, pkt, cause: Cause) -> None:
        try:
            out = self.broker.handle(sid, pkt)
        except ProtocolViolation as exc:
            self.world.diagnostics.append(f"broker: {exc}")
            return
        for target, reply in out:
            if target in self.local:
                self.local[target](reply, cause)
            elif target in self.remote:
                addr, port = self.remote[target]
                self.world.fabric.deliver(Packet(
                    self.ep.address, addr, "tcp", MQTT_PORT, port, mqtt.mqtt_encode(reply),
                    protocol="mqtt", cause=cause, info=_mqtt_info(reply)))

    def attach_local(self, sid: str, client_id: str, callback) -> None:
        self.local[sid] = callback
        self.inject(sid, mqtt.connect(client_id), Cause(f"service:{client_id}"))


def _mqtt_info(p) -> dict:
    info = {"kind": p.kind.name}
    if p.topic is not None:
        info["topic"] = p.topic
    return info


class MqttClient:
    """Network MQTT client on a host (the IIoT platform or an implant)."""

    def __init__(self, world: "World", src: str, broker_host: str, client_id: str, cause: Cause,
                 keepalive_s: int = 60, on_message=None, ping: bool = True):
        self.world = world
        self.src = world.fabric.endpoint(world.hosts.host(src).endpoint)
        self.dst = world.fabric.endpoint(world.hosts.host(broker_host).endpoint)
        self.sport = world.hosts.ephemeral_port(self.src.name, reserve=True)
        self.cause = cause
        self.on_message = on_message
        self.received: deque = deque(maxlen=256)
        self.connected = False
        self._pid = 0
        world.fabric.bind(self.src, "tcp", self.sport, self._on_packet, listen=False)
        self.send(mqtt.connect(client_id, keepalive_s))
        if ping:
            world.every(int(keepalive_s * US_PER_S), f"mqtt.{client_id}.ping",
                        lambda: self.send(mqtt.PINGREQ), offset=world.kernel.now)

    def send(self, pkt, cause: Cause | None = None):
        p = Packet(self.src.address, self.dst.address, "tcp", self.sport, MQTT_PORT,
                   mqtt.mqtt_encode(pkt), protocol="mqtt", cause=cause or self.cause,
                   info=_mqtt_info(pkt))
        return self.world.fabric.deliver(p)

    def subscribe(self, *filters: str, cause: Cause | None = None):
        self._pid += 1
        return self.send(mqtt.subscribe(self._pid, *[(f, 0) for f in filters]), cause)

    def publish(self, topic: str, payload: bytes, cause: Cause | None = None, qos: int = 0):
        pid = None
        if qos:
            self._pid += 1
            pid = self._pid
        return self.send(mqtt.publish(topic, payload, qos=qos, packet_id=pid), cause)

    def _on_packet(self, p: Packet) -> None:
        try:
            pkt = mqtt.mqtt_decode(p.payload)
        except mqtt.MqttError:
            self.world.diagnostics.append(f"{self.src.name}: malformed MQTT packet")
            return
        if pkt.kind == mqtt.Kind.CONNACK:
            self.connected = pkt.return_code == 0
        elif pkt.kind == mqtt.Kind.PUBLISH:
            self.received.append(pkt)
            if self.on_message is not None:
                self.on_message(pkt, p.cause)


class Gateway:
    """Node-RED style bridge: polls the sorter PLC, publishes status, and
    turns command topics into Modbus writes."""

    def __init__(self, world: "World", cfg: dict, plc: PlcDevice, broker: BrokerService):
        self.world = world
        self.prefix = cfg.get("topic_prefix", "factory/sorter")
        self.client = ModbusClient(world, cfg["host"], plc.host)
        self.broker = broker
        self.cause = Cause("service:gateway")
        self.status: tuple = ()
        self.busy = False
        broker.attach_local("local:gateway", "gateway", self._on_broker)
        broker.inject("local:gateway", mqtt.subscribe(1, (f"{self.prefix}/cmd/#", 0)), self.cause)
        scale = world.settings.poll_scale
        world.every(max(1, int(cfg["poll_ms"] * US_PER_MS / scale)), "gw.poll", self._poll,
                    offset=world.offset())
        world.every(max(1, int(cfg["publish_ms"] * US_PER_MS / scale)), "gw.publish",
                    self._publish, offset=world.offset())

    def _poll(self) -> None:
        if self.busy:
            return
        self.busy = True
        c = self.client

        def done(resp):
            self.busy = False
            if resp is not None and not resp.is_exception:
                self.status = resp.values

        c.request(mb.read_request(c.next_txn(), 1, 4, 100, 4), self.cause, done)

    def _publish(self) -> None:
        if not self.status:
            return
        payload = json.dumps({"weight": self.status[0], "exits": list(self.status[1:])},
                             separators=(",", ":")).encode()
        self.broker.inject("local:gateway", mqtt.publish(f"{self.prefix}/status", payload), self.cause)

    def _on_broker(self, pkt, cause: Cause) -> None:
        if pkt.kind != mqtt.Kind.PUBLISH or not pkt.topic.startswith(f"{self.prefix}/cmd/"):
            return
        cmd = pkt.topic[len(self.prefix) + 5:]
        try:
            data = json.loads(pkt.payload)
        except ValueError:
            self.world.diagnostics.append(f"gateway: bad payload on {pkt.topic}")
            return
        c = self.client
        if cmd == "threshold":
            f = mb.write_registers(c.next_txn(), 1, 100, [int(data["low"]), int(data["high"])])
        elif cmd == "run":
            f = mb.write_coil(c.next_txn(), 1, RUN_COIL, bool(data.get("on")))
        else:
            return
        c.request(f, cause)


@dataclass
class NpcAction:
    host: str
    role: str
    action: str


class World:
    def __init__(self, doc: dict, settings: Settings, skip_idle: bool = True,
                 telemetry: Telemetry | None = None):
        self.doc = doc
        self.settings = settings
        self.skip_idle = skip_idle
        self.kernel = Kernel(settings.seed)
        self.telemetry = telemetry or Telemetry(doc["campaign"]["id"])
        self.diagnostics: list[str] = []
        self._offsets = self.kernel.fork_rng("world.offsets")
        self._build_network()
        self.hosts = HostWorld(self.kernel, self.fabric, self.telemetry)
        self._build_hosts()
        self._build_process()
        self._build_npcs()
        self._build_probes()
        self.campaign = None
        if settings.campaign:
            from .campaign import Campaign
            self.campaign = Campaign(self, doc["campaign"])

    # helpers
    def offset(self) -> int:
        """Small start offset so periodic tasks do not all fire in lockstep."""
        return self._offsets.randrange(1, 200) * US_PER_MS

    def every(self, period: int, target: str, fn, offset: int = 0) -> None:
        def fire():
            fn()
            self.kernel.schedule(self.kernel.now + period, target, fire)

        self.kernel.schedule(max(offset, self.kernel.now), target, fire)

    # construction
    def _build_network(self) -> None:
        d = self.doc
        segs = [Segment(s["id"], s["cidr"], s.get("vlans", []), s.get("monitor", False))
                for s in d["segments"]]
        eps = [Endpoint(h["id"], h["address"], h["segment"],
                        {(t, p) for t, p in h.get("open_ports", [])}) for h in d["hosts"]]
        links = [Link(ln["a"], ln["b"], ln["latency_us"], ln.get("jitter_us", 0),
                      ln.get("bandwidth_kbps", 1_000_000)) for ln in d["links"]]
        fws = [Firewall(f["id"], [FirewallRule(r["rule_id"], _net(r["src"]), _net(r["dst"]),
                                               r.get("transport", "tcp"), r.get("dst_port"),
                                               r.get("action", "allow")) for r in f["rules"]])
               for f in d["firewalls"]]
        self.fabric = Fabric(self.kernel, segs, eps, links, fws)
        for seg in d.get("taps", []):
            self.fabric.tap_register(seg)
        self.fabric.observers.append(self.telemetry.on_tap)

    def _build_hosts(self) -> None:
        d = self.doc
        for h in d["hosts"]:
            ap = h.get("allowed_principals")
            self.hosts.add_host(Host(h["id"], h["id"], h.get("os", "windows"),
                                     h.get("domain", "corp.local"), h.get("role"), h.get("user"),
                                     allowed_principals=tuple(ap) if ap is not None else None,
                                     susceptibility=tuple(h.get("susceptibility", ()))))
        for c in d["credentials"]:
            self.hosts.add_credential(Credential(c["principal"], c["domain"], c["secret"],
                                                 c.get("grade", "user"), tuple(c.get("stored_on", ()))))
        for a, b in d.get("trusts", []):
            self.hosts.trusts.add((a, b))
        for h in d["hosts"]:
            ep = self.fabric.endpoint(h["id"])
            for transport, port in sorted(ep.open_ports):
                if (transport, port) not in ep.handlers:
                    self.fabric.bind(ep, transport, port, self._echo)
        hist = self.doc["process"].get("historian")
        if hist:
            ep = self.fabric.endpoint(hist.get("host", "hist01"))
            self.fabric.bind(ep, "tcp", HISTORIAN_PORT, self._historian_query)

    def _echo(self, p: Packet) -> None:
        """Generic service: answer every request with a short response."""
        self.fabric.deliver(Packet(p.dst, p.src, p.transport, p.dst_port, p.src_port,
                                   b"\x00" * 48, protocol=p.protocol, cause=p.cause,
                                   info={"dir": "response"}))

    def _historian_query(self, p: Packet) -> None:
        src = self.hosts.host_by_address(p.src)
        hist = self.hosts.host_by_address(p.dst)
        body = {"event": "query", "client": src.id if src else str(p.src),
                "query": p.info.get("query", "")}
        self.telemetry.emit(self.kernel.now, "operational", f"historian.{hist.id}", body, p.cause,
                            self.fabric.endpoints[p.dst].segment)
        self._echo(p)

    def _build_process(self) -> None:
        proc = self.doc["process"]
        self.twins = {t["id"]: TwinDevice(self, t) for t in proc["twins"]}
        self.plcs = {p["id"]: PlcDevice(self, p, self.twins[p["twin"]]) for p in proc["plcs"]}
        self.hmis = {h["id"]: HmiDevice(self, h, self.plcs[h["plc"]]) for h in proc.get("hmis", [])}
        self.broker = None
        self.gateway = None
        self.platform = None
        gw = proc.get("gateway")
        plat = proc.get("platform")
        if gw:
            self.broker = BrokerService(self, gw["host"])
            self.gateway = Gateway(self, gw, self.plcs[gw["plc"]], self.broker)
        if plat and self.broker is not None:
            def start_platform():
                self.platform = MqttClient(self, plat["host"], plat["broker"], "iiot-platform",
                                           Cause("service:iiot-platform"),
                                           keepalive_s=plat["keepalive_s"])
                self.platform.subscribe(plat.get("subscribe", "#"))
            self.kernel.schedule(500 * US_PER_MS, "platform.start", start_platform)
        hist = proc.get("historian")
        if hist:
            period = int(hist.get("sample_s", 60) * US_PER_S)
            self.every(period, "historian.sample", self._sample_counters, offset=period)
        if proc.get("autostart", True):
            cause = Cause("service:hmi.autostart")
            for hmi in self.hmis.values():
                self.kernel.schedule(US_PER_S, f"hmi.{hmi.id}.start", lambda h=hmi: h.command("start", cause))

    def _sample_counters(self) -> None:
        t = self.kernel.now
        for tw in self.twins.values():
            sc = tw.scene
            if isinstance(sc, SorterScene):
                vals = {f"exit{k + 1}": c for k, c in enumerate(sc.exit_counts)}
            else:
                vals = {"line1": sc.stations[0].count, "line2": sc.stations[1].count, "exit": sc.exit_count}
            body = {"tag": f"{sc.name}.counters", **vals, "created": sc.created, "in_flight": sc.in_flight()}
            self.telemetry.emit(t, "operational", f"historian.{tw.id}", body, tw.cause, tw.segment)

    # NPCs
    def _build_npcs(self) -> None:
        run = self.doc.get("run", {})
        wh = run.get("work_hours", [8, 16])
        self.work_start, self.work_len = working_window(wh[0], wh[1], run.get("clock_origin_h", 8))
        self.frequencies = npc_frequencies(self.doc, self.settings.npc_scale)
        self.npc_hosts = [h for h in self.hosts.hosts.values() if h.role]
        self.npc_rngs = {h.id: self.kernel.fork_rng(f"npc.{h.id}") for h in self.npc_hosts}
        rd = self.doc.get("npc", {}).get("read_delay_s", [30, 300])
        self.read_delay = (int(rd[0] * US_PER_S), int(rd[1] * US_PER_S))
        self.kernel.schedule(0, "npc.plan", self._plan_day, 0)

    def _plan_day(self, day: int = 0) -> None:
        for h in self.npc_hosts:
            sched = daily_schedule(self.frequencies.get(h.role, {}), self.npc_rngs[h.id], day,
                                   self.work_start, self.work_len)
            for t, action in sched:
                if t >= self.kernel.now:
                    self.kernel.schedule(t, f"npc.{h.id}", self._npc_act, NpcAction(h.id, h.role, action))
        self.kernel.schedule((day + 1) * US_PER_DAY, "npc.plan", self._plan_day, day + 1)

    def _npc_act(self, a: NpcAction) -> None:
        h = self.hosts.host(a.host)
        cause = Cause(f"npc:{a.host}.{a.action}")
        rng = self.npc_rngs[a.host]
        self.hosts.note_npc_action(a.role, self.kernel.now)
        process = {"web": "msedge.exe", "documents": "winword.exe", "email": "outlook.exe",
                   "rdp_jump": "mstsc.exe", "hmi_monitor": "firefox.exe"}[a.action]
        self.hosts.log_event(h, 4688, cause, process=process, user=h.user, npc_action=a.action,
                             role=a.role)
        if a.action == "web":
            dst = self.hosts.host("inet-sim" if rng.random() < 0.6 else "mail01")
            self.hosts.send(h, dst, "tcp", 443 if dst.id == "inet-sim" else 80, cause, protocol="http")
        elif a.action == "documents":
            dc = self.hosts.host("dc01")
            self.hosts.send(h, dc, "tcp", 445, cause, protocol="smb")
            self.hosts.log_event(dc, 5140, cause, share="\\\\dc01\\shared", account=h.user, source=h.id)
        elif a.action == "email":
            mail = self.hosts.host("mail01")
            self.hosts.send(h, mail, "tcp", 25, cause, protocol="smtp")
            peers = [x.id for x in self.npc_hosts if x.role in ("normal_it", "victim_it", "engineering")
                     and x.id != h.id]
            rcpt = peers[rng.randrange(len(peers))]
            m = Mail(h.id, rcpt, "status update", cause=cause)
            self.hosts.deliver_mail(m)
            delay = rng.randint(*self.read_delay)
            self.kernel.schedule_in(delay, f"npc.{rcpt}.read", lambda: self.hosts.open_mail(rcpt, m, cause))
        elif a.action == "rdp_jump":
            cred = self.hosts.credentials[h.user]
            try:
                self.hosts.authenticate(h.id, "jump01", cred, "rdp", cause)
            except Unreachable:
                pass
        elif a.action == "hmi_monitor":
            cred = self.hosts.credentials["svc-hmi"]
            stale = self.doc_secret("svc-hmi")
            try:
                self.hosts.authenticate(h.id, "hmi-line", cred, "http", cause, secret=stale)
            except Unreachable:
                pass

    def doc_secret(self, principal: str) -> str:
        """The secret as configured on operator machines (never rotated)."""
        for c in self.doc["credentials"]:
            if c["principal"] == principal:
                return c["secret"]
        raise KeyError(principal)

    def deliver_phish(self, mail: Mail) -> None:
        """Victim reads the attacker's mail after a random delay."""
        self.hosts.deliver_mail(mail)
        if mail.recipient not in self.npc_rngs:
            self.npc_rngs[mail.recipient] = self.kernel.fork_rng(f"npc.{mail.recipient}")
        rng = self.npc_rngs[mail.recipient]
        delay = rng.randint(*self.read_delay)

        def read():
            if self.hosts.open_mail(mail.recipient, mail, mail.cause) and self.campaign is not None:
                self.campaign.on_phish_executed(mail.recipient)

        self.kernel.schedule_in(delay, f"npc.{mail.recipient}.read", read)

    def forward_attachment(self, src: str, mail: Mail, rng) -> str | None:
        """The compromised IT user forwards ``mail`` once to the victim OT user."""
        rcpt = next((h.id for h in self.npc_hosts if h.role == "victim_ot"), None)
        if rcpt is None:
            return None
        cause = mail.cause
        fwd = Mail(src, rcpt, "FW: " + mail.subject, mail.attachment, mail.malicious, cause, forwarded=True)

        def send():
            self.hosts.log_event(src, 4688, cause, process="outlook.exe", user=self.hosts.host(src).user,
                                 subject=fwd.subject, recipient=rcpt)
            self.hosts.send(self.hosts.host(src), self.hosts.host("mail01"), "tcp", 25, cause, protocol="smtp")
            self.hosts.deliver_mail(fwd)
            self.kernel.schedule_in(rng.randint(*self.read_delay), f"npc.{rcpt}.read", read)

        def read():
            if self.hosts.open_mail(rcpt, fwd, cause) and self.campaign is not None:
                self.campaign.on_forward_executed(rcpt)

        self.kernel.schedule_in(rng.randint(*self.read_delay), f"npc.{src}.forward", send)
        return rcpt

    # latency probes
    def _build_probes(self) -> None:
        probes = self.doc.get("probes", [])
        if not probes:
            return
        period = int(self.doc.get("run", {}).get("probe_interval_s", 10) * US_PER_S)
        cause = Cause("probe:netperf")

        def run_probes():
            for pr in probes:
                st = self.fabric.ping(pr["src"], pr["dst"], 1, pr.get("port"))
                body = {"tag": f"netperf.{pr['name']}", "src": pr["src"], "dst": pr["dst"],
                        "rtt_us": st.min_us if st.samples else None,
                        "one_way_us": st.samples[0] / 2 if st.samples else None,
                        "lost": st.loss_fraction}
                seg = self.fabric.endpoint(pr["src"]).segment
                self.telemetry.emit(self.kernel.now, "operational", "netperf", body, cause, seg)

        self.every(period, "netperf", run_probes, offset=period)

    # running
    def run(self, duration_us: int | None = None) -> None:
        self.kernel.run_until(duration_us if duration_us is not None else self.settings.duration_us)

    def finish(self) -> None:
        self.telemetry.finalize()

    def trace(self) -> dict:
        if self.campaign is None:
            return {"campaign_id": self.doc["campaign"]["id"], "enabled": False, "status": "disabled",
                    "steps": [], "phases": []}
        return self.campaign.trace()


def _net(text: str) -> ipaddress.IPv4Network:
    return ipaddress.IPv4Network(text)


def run_info(world: World) -> dict:
    """Deterministic run metadata for the bundle manifest (no wall-clock fields)."""
    from . import __version__
    s = world.settings
    counts = {f"{role}/{day}": n for (role, day), n in sorted(world.hosts.npc_actions.items())}
    return {
        "package_version": __version__,
        "scenario_name": world.doc.get("name", ""),
        "scenario": world.doc,
        "seed": s.seed,
        "duration_us": s.duration_us,
        "profile": s.profile,
        "npc_scale": s.npc_scale,
        "poll_scale": s.poll_scale,
        "campaign_enabled": s.campaign,
        "campaign_status": world.trace()["status"],
        "npc_actions": counts,
        "events_dispatched": world.kernel.dispatched,
        "packets": {"sent": world.fabric.sent, "delivered": world.fabric.delivered,
                    "dropped": world.fabric.dropped},
        "diagnostics": world.diagnostics[:100],
    }


def run_to_bundle(doc: dict, settings: Settings, out_dir) -> dict:
    """Build, run and stream a scenario straight into a bundle directory."""
    from .telemetry import BundleWriter
    writer = BundleWriter(out_dir)
    world = World(doc, settings, telemetry=Telemetry(doc["campaign"]["id"], writer=writer))
    world.run()
    world.finish()
    return writer.close(world.trace(), run_info(world))
