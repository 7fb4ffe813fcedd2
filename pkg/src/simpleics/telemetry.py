"""Labelled multi-source observation pipeline and dataset bundle export.

Labels are resolved from causes, never from time windows: every packet, host
event and operational sample carries the ``Cause`` that produced it, and a
record is attack-labelled exactly when that cause roots in a campaign
ability.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .netfabric import SEGMENT_IDS, Delivered, Packet

SCHEMA_VERSION = "1.0"
CATEGORIES = ("network_flow", "packet_payload", "host_event", "operational")
FLOW_ACTIVE_TIMEOUT_US = 60_000_000
FLOW_IDLE_TIMEOUT_US = 60_000_000
FLOW_SWEEP_EVERY = 4096
PAYLOAD_PROTOCOLS = ("modbus", "mqtt")
PCAP_EPOCH_S = 1_700_000_000
LINKTYPE_RAW = 101

BUNDLE_FILES = {
    "network_flow": "flows.jsonl",
    "packet_payload": "packets.jsonl",
    "host_event": "host_events.jsonl",
    "operational": "operational.jsonl",
}


class TelemetrySchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Label:
    campaign: str
    technique: str
    ability: str

    def as_dict(self) -> dict:
        return {"campaign": self.campaign, "technique": self.technique, "ability": self.ability}


@dataclass(frozen=True)
class Cause:
    """Causal root of an observation.

    ``root`` names the originating NPC action, physics tick, poll cycle or
    ability instance; ``label`` is set only for ability roots.
    """
    root: str
    label: Label | None = None

    @property
    def kind(self) -> str:
        return self.root.split(":", 1)[0]


BENIGN_KINDS = ("npc", "physics", "poll", "probe", "service")


@dataclass
class TelemetryRecord:
    t: int
    category: str
    source: str
    body: dict
    segment: str | None = None
    label: Label | None = None
    cause: str = ""
    seq: int = 0

    def as_dict(self) -> dict:
        return {
            "t": self.t, "seq": self.seq, "category": self.category, "segment": self.segment,
            "source": self.source, "cause": self.cause,
            "label": self.label.as_dict() if self.label else "benign", "body": self.body,
        }


def _validate(rec: TelemetryRecord) -> None:
    if rec.category not in CATEGORIES:
        raise TelemetrySchemaError(f"unknown category {rec.category!r}")
    if not isinstance(rec.t, int) or rec.t < 0:
        raise TelemetrySchemaError(f"bad timestamp {rec.t!r}")
    if rec.segment is not None and rec.segment not in SEGMENT_IDS:
        raise TelemetrySchemaError(f"bad segment {rec.segment!r}")
    if not rec.source or not isinstance(rec.body, dict):
        raise TelemetrySchemaError("record needs a source and a dict body")
    if not rec.cause:
        raise TelemetrySchemaError("record without a causal root")
    kind = rec.cause.split(":", 1)[0]
    if rec.label is not None and kind != "ability":
        raise TelemetrySchemaError(f"labelled record rooted in {rec.cause}")
    if rec.label is None and kind not in BENIGN_KINDS:
        raise TelemetrySchemaError(f"benign record rooted in {rec.cause}")
    if rec.category == "network_flow":
        b = rec.body
        if b["packets"] <= 0 or b["bytes"] < 0 or b["first_seen"] > b["last_seen"]:
            raise TelemetrySchemaError("inconsistent flow counters")


@dataclass
class _Flow:
    segment: str
    key: tuple
    protocol: str | None
    cause: Cause
    verdict: str
    rule_id: str | None
    first_seen: int
    last_seen: int
    packets: int = 0
    bytes: int = 0


@dataclass
class PcapEntry:
    t: int
    packet: Packet
    seq: int
    ack: int


class Telemetry:
    """Collects labelled records.

    With no ``writer`` records are kept in memory (tests, small runs). With a
    ``BundleWriter`` every record is streamed to disk as it is produced and
    only summary counters stay in memory, which keeps multi-day runs bounded.
    """

    def __init__(self, campaign_id: str = "campaign", writer: "BundleWriter | None" = None) -> None:
        self.campaign_id = campaign_id
        self.writer = writer
        self.records: list[TelemetryRecord] = []
        self._seq = 0
        self._flows: dict[tuple, _Flow] = {}
        self._taps_seen = 0
        self.pcap: list[PcapEntry] = []
        self.pcap_count = 0
        self._tcp_seq: dict[tuple, int] = {}
        self.counts = {c: 0 for c in CATEGORIES}
        self.labelled: dict[str, set[str]] = {}
        self.active = True

    # -- intake -----------------------------------------------------------

    def observe(self, rec: TelemetryRecord) -> None:
        if not self.active:
            raise TelemetrySchemaError("run is not active")
        _validate(rec)
        rec.seq = self._seq
        self._seq += 1
        self.counts[rec.category] += 1
        if rec.label is not None:
            self.labelled.setdefault(rec.label.technique, set()).add(rec.category)
        if self.writer is None:
            self.records.append(rec)
        else:
            self.writer.write(rec)

    def emit(self, t: int, category: str, source: str, body: dict, cause: Cause,
             segment: str | None = None) -> TelemetryRecord:
        rec = TelemetryRecord(t, category, source, body, segment, cause.label, cause.root)
        self.observe(rec)
        return rec

    def on_tap(self, segment: str, p: Packet, outcome, t: int) -> None:
        """Tap observer: one call per tapped segment the packet crosses."""
        cause = p.cause if isinstance(p.cause, Cause) else Cause("service:unattributed")
        verdict = "delivered" if outcome.ok else f"dropped:{outcome.reason}"
        rule_id = None if outcome.ok else outcome.rule_id
        key = (segment, p.five_tuple, verdict, rule_id, cause)
        flow = self._flows.get(key)
        if flow is not None and t - flow.first_seen >= FLOW_ACTIVE_TIMEOUT_US:
            self._emit_flow(flow)
            flow = None
        if flow is None:
            flow = _Flow(segment, p.five_tuple, p.protocol, cause, verdict, rule_id, t, t)
            self._flows[key] = flow
        flow.last_seen = t
        flow.packets += p.fragments
        flow.bytes += len(p.payload)
        if p.protocol in PAYLOAD_PROTOCOLS and outcome.ok and "_first_tap" not in p.info:
            p.info["_first_tap"] = segment
            self._payload_record(segment, p, t)
        self._taps_seen += 1
        if self._taps_seen % FLOW_SWEEP_EVERY == 0:
            self._sweep(t)

    def _sweep(self, t: int) -> None:
        """Export flows idle for longer than the inactive timeout."""
        idle = [f for f in self._flows.values() if t - f.last_seen >= FLOW_IDLE_TIMEOUT_US]
        for f in idle:
            self._emit_flow(f)

    def _emit_flow(self, f: _Flow) -> None:
        src, sport, dst, dport, transport = f.key
        body = {"src": src, "src_port": sport, "dst": dst, "dst_port": dport,
                "transport": transport, "protocol": f.protocol, "packets": f.packets,
                "bytes": f.bytes, "first_seen": f.first_seen, "last_seen": f.last_seen,
                "verdict": f.verdict, "rule_id": f.rule_id}
        self.emit(f.first_seen, "network_flow", f"tap.{f.segment}", body, f.cause, f.segment)
        self._flows.pop((f.segment, f.key, f.verdict, f.rule_id, f.cause), None)

    def _payload_record(self, segment: str, p: Packet, t: int) -> None:
        cause = p.cause if isinstance(p.cause, Cause) else Cause("service:unattributed")
        fwd = p.five_tuple
        seq = self._tcp_seq.get(fwd, 1)
        self._tcp_seq[fwd] = seq + len(p.payload)
        rev = (fwd[2], fwd[3], fwd[0], fwd[1], fwd[4])
        ack = self._tcp_seq.get(rev, 1)
        index = self.pcap_count
        self.pcap_count += 1
        entry = PcapEntry(t, p, seq, ack)
        if self.writer is None:
            self.pcap.append(entry)
        else:
            self.writer.write_frame(entry)
        body = {"src": fwd[0], "src_port": p.src_port, "dst": fwd[2],
                "dst_port": p.dst_port, "protocol": p.protocol, "length": len(p.payload),
                "pcap_index": index}
        for k, v in p.info.items():
            if k[0] != "_":
                body[k] = v
        self.emit(t, "packet_payload", f"tap.{segment}", body, cause, segment)

    def finalize(self) -> None:
        for flow in sorted(self._flows.values(), key=lambda f: (f.first_seen, repr(f.key))):
            self._emit_flow(flow)
        self._flows.clear()
        self.active = False

    # -- queries ----------------------------------------------------------

    def by_category(self, category: str) -> list[TelemetryRecord]:
        """In-memory records of one category, in emission order."""
        return [r for r in self.records if r.category == category]

    def labelled_techniques(self) -> set[str]:
        return set(self.labelled)


# -- export ---------------------------------------------------------------

def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f">{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def ipv4_tcp_frame(p: Packet, seq: int, ack: int) -> bytes:
    """Raw IPv4 + TCP (or UDP) headers around the application payload."""
    src, dst = p.src.packed, p.dst.packed
    if p.transport == "udp":
        l4 = struct.pack(">HHHH", p.src_port, p.dst_port, 8 + len(p.payload), 0) + p.payload
        proto = 17
    else:
        hdr = struct.pack(">HHIIBBHHH", p.src_port, p.dst_port, seq & 0xFFFFFFFF,
                          ack & 0xFFFFFFFF, 5 << 4, 0x18, 65535, 0, 0)
        pseudo = src + dst + struct.pack(">BBH", 0, 6, len(hdr) + len(p.payload))
        csum = _checksum(pseudo + hdr + p.payload)
        l4 = hdr[:16] + struct.pack(">H", csum) + hdr[18:] + p.payload
        proto = 6
    ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(l4), 0, 0x4000, 64, proto, 0, src, dst)
    ip = ip[:10] + struct.pack(">H", _checksum(ip)) + ip[12:]
    return ip + l4


PCAP_HEADER = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, LINKTYPE_RAW)


def _pcap_record(e: PcapEntry) -> bytes:
    frame = ipv4_tcp_frame(e.packet, e.seq, e.ack)
    sec, usec = divmod(e.t, 1_000_000)
    return struct.pack("<IIII", PCAP_EPOCH_S + sec, usec, len(frame), len(frame)) + frame


def write_pcap(path: Path, entries: list[PcapEntry]) -> int:
    with open(path, "wb") as fh:
        fh.write(PCAP_HEADER)
        for e in entries:
            fh.write(_pcap_record(e))
    return len(entries)


def read_pcap(path: Path) -> list[tuple[int, bytes]]:
    """(virtual microseconds, raw IPv4 frame) for every record in a bundle PCAP."""
    data = Path(path).read_bytes()
    magic, _, _, _, _, _, linktype = struct.unpack_from("<IHHiIII", data)
    if magic != 0xA1B2C3D4 or linktype != LINKTYPE_RAW:
        raise ValueError("not a bundle pcap")
    out, pos = [], 24
    while pos < len(data):
        sec, usec, incl, _ = struct.unpack_from("<IIII", data, pos)
        pos += 16
        out.append(((sec - PCAP_EPOCH_S) * 1_000_000 + usec, data[pos:pos + incl]))
        pos += incl
    return out


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class BundleWriter:
    """Streams a dataset bundle to ``out_dir``.

    A ``PARTIAL`` marker exists from open until the manifest lands, so an
    interrupted run or export is recognisable.
    """

    def __init__(self, out_dir) -> None:
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.marker = self.out / "PARTIAL"
        self.marker.write_text("export in progress\n")
        self._fh = {c: open(self.out / name, "w", encoding="utf-8", newline="\n")
                    for c, name in BUNDLE_FILES.items()}
        self._hash = {c: hashlib.sha256() for c in BUNDLE_FILES}
        self._n = {c: 0 for c in BUNDLE_FILES}
        self._pcap = open(self.out / "packets.pcap", "wb")
        self._pcap_hash = hashlib.sha256()
        self._pcap_n = 0
        self._write_pcap_bytes(PCAP_HEADER)

    def write(self, rec: TelemetryRecord) -> None:
        line = (_dump(rec.as_dict()) + "\n").encode()
        self._fh[rec.category].write(line.decode())
        self._hash[rec.category].update(line)
        self._n[rec.category] += 1

    def _write_pcap_bytes(self, b: bytes) -> None:
        self._pcap.write(b)
        self._pcap_hash.update(b)

    def write_frame(self, e: PcapEntry) -> None:
        self._write_pcap_bytes(_pcap_record(e))
        self._pcap_n += 1

    def close(self, trace: dict, run_info: dict) -> dict:
        files: dict[str, dict] = {}
        for c, name in BUNDLE_FILES.items():
            self._fh[c].close()
            files[name] = {"records": self._n[c], "sha256": self._hash[c].hexdigest()}
        self._pcap.close()
        files["packets.pcap"] = {"records": self._pcap_n, "sha256": self._pcap_hash.hexdigest()}
        tpath = self.out / "campaign_trace.json"
        tpath.write_text(json.dumps(trace, sort_keys=True, indent=1) + "\n")
        files["campaign_trace.json"] = {"records": len(trace.get("steps", [])),
                                        "sha256": sha256_file(tpath)}
        manifest = {
            "schema_version": SCHEMA_VERSION,
            **run_info,
            "record_counts": dict(self._n),
            "files": files,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        os.remove(self.marker)
        return manifest


def export(out_dir, telemetry: Telemetry, trace: dict, run_info: dict) -> dict:
    """Write an in-memory run as a bundle; returns the manifest."""
    if telemetry.writer is not None:
        return telemetry.writer.close(trace, run_info)
    w = BundleWriter(out_dir)
    for r in telemetry.records:
        w.write(r)
    for e in telemetry.pcap:
        w.write_frame(e)
    return w.close(trace, run_info)


def iter_records(bundle_dir, category: str):
    """Stream one category of a bundle without loading it whole."""
    with open(Path(bundle_dir) / BUNDLE_FILES[category], encoding="utf-8") as fh:
        for line in fh:
            yield json.loads(line)


class BundleIntegrityError(ValueError):
    pass


def load_bundle(bundle_dir, verify: bool = True) -> dict:
    """Read a bundle back: manifest, per-category records, trace."""
    d = Path(bundle_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} missing")
    if (d / "PARTIAL").exists():
        raise BundleIntegrityError(f"{d} holds a partial export")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise BundleIntegrityError(f"corrupt manifest: {exc}") from None
    records: dict[str, list[dict]] = {}
    for category, name in BUNDLE_FILES.items():
        path = d / name
        if not path.exists():
            raise BundleIntegrityError(f"{name} missing")
        lines = path.read_text().splitlines()
        meta = manifest.get("files", {}).get(name)
        if verify:
            if meta is None or meta["records"] != len(lines) or manifest["record_counts"].get(category) != len(lines):
                raise BundleIntegrityError(f"{name}: {len(lines)} records, manifest disagrees")
            if meta["sha256"] != sha256_file(path):
                raise BundleIntegrityError(f"{name}: checksum mismatch")
        try:
            records[category] = [json.loads(line) for line in lines]
        except json.JSONDecodeError as exc:
            raise BundleIntegrityError(f"{name}: {exc}") from None
    if verify:
        for name in ("packets.pcap", "campaign_trace.json"):
            meta = manifest.get("files", {}).get(name)
            if not (d / name).exists() or meta is None or meta["sha256"] != sha256_file(d / name):
                raise BundleIntegrityError(f"{name}: missing or checksum mismatch")
    trace = json.loads((d / "campaign_trace.json").read_text())
    return {"manifest": manifest, "records": records, "trace": trace, "dir": d}
