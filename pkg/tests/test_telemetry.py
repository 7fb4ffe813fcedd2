import json

import pytest

from simpleics.netfabric import Delivered, Dropped, Packet
from simpleics.protocols import modbus as mb
from simpleics.telemetry import (FLOW_ACTIVE_TIMEOUT_US, BundleIntegrityError, Cause, Label, Telemetry,
                                 TelemetryRecord, TelemetrySchemaError, export, iter_records,
                                 load_bundle, read_pcap)

ATTACK = Cause("ability:c1.A05", Label("c1", "T1562", "A05"))
POLL = Cause("poll:hmi")


def _pkt(cause=POLL, sport=40000, payload=None):
    payload = payload if payload is not None else mb.modbus_encode(mb.read_request(1, 1, 3, 0, 2))
    return Packet("10.40.0.30", "10.40.0.10", "tcp", sport, 502, payload, protocol="modbus", cause=cause)


def test_label_must_match_cause_kind():
    t = Telemetry()
    with pytest.raises(TelemetrySchemaError):
        t.observe(TelemetryRecord(0, "host_event", "h", {}, None, ATTACK.label, "npc:x"))
    with pytest.raises(TelemetrySchemaError):
        t.observe(TelemetryRecord(0, "host_event", "h", {}, None, None, "ability:c1.A05"))
    with pytest.raises(TelemetrySchemaError):
        t.observe(TelemetryRecord(0, "nonsense", "h", {}, None, None, "npc:x"))
    with pytest.raises(TelemetrySchemaError):
        t.observe(TelemetryRecord(-1, "host_event", "h", {}, None, None, "npc:x"))


def test_emit_tracks_labelled_categories_and_sequence():
    t = Telemetry("c1")
    a = t.emit(5, "host_event", "ws", {"event_id": 4688}, ATTACK, "IT_LAN")
    b = t.emit(3, "operational", "plc", {}, POLL, "OT")
    assert (a.seq, b.seq) == (0, 1)
    assert t.labelled == {"T1562": {"host_event"}}
    assert a.as_dict()["label"] == {"campaign": "c1", "technique": "T1562", "ability": "A05"}
    assert b.as_dict()["label"] == "benign"


def test_flows_aggregate_per_tuple_and_cause():
    t = Telemetry()
    for i in range(3):
        t.on_tap("OT", _pkt(), Delivered(0), 1000 * i)
    t.on_tap("OT", _pkt(ATTACK), Delivered(0), 5000)
    t.on_tap("OT", _pkt(sport=40001), Dropped("firewall", "ot-03"), 6000)
    t.finalize()
    flows = t.by_category("network_flow")
    assert [f.body["packets"] for f in flows] == [3, 1, 1]
    assert flows[1].label.technique == "T1562"
    assert flows[2].body["verdict"] == "dropped:firewall" and flows[2].body["rule_id"] == "ot-03"
    # dropped packets produce no payload record
    assert len(t.by_category("packet_payload")) == 4


def test_active_timeout_splits_long_flows():
    t = Telemetry()
    t.on_tap("OT", _pkt(), Delivered(0), 0)
    t.on_tap("OT", _pkt(), Delivered(0), FLOW_ACTIVE_TIMEOUT_US + 1)
    t.finalize()
    assert len(t.by_category("network_flow")) == 2


def test_payload_recorded_once_per_packet_across_taps():
    t = Telemetry()
    p = _pkt()
    t.on_tap("OT_DMZ", p, Delivered(0), 0)
    t.on_tap("OT", p, Delivered(0), 0)
    assert len(t.by_category("packet_payload")) == 1
    assert t.by_category("packet_payload")[0].segment == "OT_DMZ"


def _small_bundle(tmp_path):
    t = Telemetry("c1")
    t.on_tap("OT", _pkt(), Delivered(0), 10)
    t.on_tap("OT", _pkt(ATTACK), Delivered(0), 20)
    t.emit(30, "host_event", "ws", {"event_id": 4624}, ATTACK, "IT_LAN")
    t.finalize()
    out = tmp_path / "bundle"
    export(out, t, {"steps": []}, {"seed": 1})
    return out


def test_bundle_roundtrip_and_pcap(tmp_path):
    out = _small_bundle(tmp_path)
    b = load_bundle(out)
    assert b["manifest"]["record_counts"]["packet_payload"] == 2
    assert not (out / "PARTIAL").exists()
    frames = read_pcap(out / "packets.pcap")
    assert [ts for ts, _ in frames] == [10, 20]
    raw = frames[0][1]
    assert raw[0] == 0x45 and raw[9] == 6
    assert raw[40:] == _pkt().payload
    assert list(iter_records(out, "host_event"))[0]["label"]["technique"] == "T1562"


@pytest.mark.parametrize("victim", ["flows.jsonl", "packets.pcap", "campaign_trace.json"])
def test_tampering_detected(tmp_path, victim):
    out = _small_bundle(tmp_path)
    with open(out / victim, "ab") as fh:
        fh.write(b"x")
    with pytest.raises(BundleIntegrityError):
        load_bundle(out)


def test_partial_marker_and_missing_files(tmp_path):
    out = _small_bundle(tmp_path)
    (out / "PARTIAL").write_text("x")
    with pytest.raises(BundleIntegrityError):
        load_bundle(out)
    (out / "PARTIAL").unlink()
    (out / "host_events.jsonl").unlink()
    with pytest.raises(BundleIntegrityError):
        load_bundle(out)
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "nothing")


def test_export_is_deterministic(tmp_path):
    a = _small_bundle(tmp_path / "a")
    b = _small_bundle(tmp_path / "b")
    for name in ("flows.jsonl", "packets.jsonl", "packets.pcap", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert json.loads((a / "manifest.json").read_text())["seed"] == 1
