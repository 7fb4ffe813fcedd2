import random

import pytest
from hypothesis import given, strategies as st

from simpleics import US_PER_DAY, US_PER_H
from simpleics.hostworld import (Credential, HostError, Mail, Unreachable, daily_schedule,
                                 working_window)
from simpleics.scenario import load, resolve
from simpleics.telemetry import Cause
from simpleics.world import World

NPC = Cause("npc:test")


@pytest.fixture
def world():
    doc = load()
    return World(doc, resolve(doc, duration="1m", campaign=False, env={}))


def _events(w, host):
    return [r.body for r in w.telemetry.records if r.category == "host_event" and r.source == host]


def test_valid_logon_emits_4624(world):
    hw = world.hosts
    res = hw.authenticate("ws-alice", "dc01", hw.credentials["alice"], "smb", NPC)
    assert res.ok and res.events == [4624]
    assert _events(world, "dc01")[-1]["account"] == "alice"


def test_admin_logon_adds_special_privileges(world):
    hw = world.hosts
    res = hw.authenticate("ws-bob", "ws-alice", hw.credentials["adm-helpdesk"], "smb", NPC)
    assert res.events == [4624, 4672]


def test_bad_secret_is_4625(world):
    hw = world.hosts
    res = hw.authenticate("ws-alice", "dc01", hw.credentials["alice"], "smb", NPC, secret="nope")
    assert not res.ok and res.reason == "bad_secret" and res.events == [4625]


def test_rotated_secret_breaks_stored_credential(world):
    hw = world.hosts
    hw.rotate_secret("alice", "new")
    assert hw.authenticate("ws-alice", "dc01", hw.credentials["alice"], "smb", NPC).reason == "bad_secret"
    with pytest.raises(HostError):
        hw.rotate_secret("mallory", "x")


def test_jump_host_trust_and_allow_list(world):
    hw = world.hosts
    ok = hw.authenticate("eng-ws", "jump01", hw.credentials["dave"], "rdp", NPC)
    assert ok.ok
    denied = hw.authenticate("eng-ws", "jump01", hw.credentials["carol"], "rdp", NPC)
    assert denied.reason == "not_permitted"


def test_untrusted_domain_rejected(world):
    hw = world.hosts
    hw.trusts.clear()
    res = hw.authenticate("eng-ws", "jump01", hw.credentials["dave"], "rdp", NPC)
    assert res.reason == "untrusted_domain"


def test_unreachable_target_raises_without_host_events(world):
    hw = world.hosts
    before = len(world.telemetry.records)
    with pytest.raises(Unreachable) as ei:
        hw.authenticate("ws-alice", "hmi-line", hw.credentials["alice"], "rdp", NPC)
    assert ei.value.drop.reason == "firewall"
    assert not any(r.category == "host_event" for r in world.telemetry.records[before:])


def test_suppressed_audit_drops_events(world):
    hw = world.hosts
    hw.suppress("ws-bob", 10**9)
    assert not hw.log_event("ws-bob", 4688, NPC, process="cmd.exe")
    assert hw.log_event("ws-alice", 4688, NPC, process="cmd.exe")
    with pytest.raises(HostError):
        hw.log_event("ws-alice", 1234, NPC)


def test_harvest_orders_by_grade(world):
    creds = world.hosts.harvest("ws-bob")
    assert [c.principal for c in creds] == ["bob", "adm-helpdesk"]


def test_phishing_runs_only_on_susceptible_host(world):
    hw = world.hosts
    mail = Mail("x@evil", "ws-bob", "invoice", attachment="invoice.exe", malicious=True)
    assert hw.open_mail("ws-bob", mail, NPC)
    assert not hw.open_mail("ws-alice", Mail("x@evil", "ws-alice", "invoice", "invoice.exe", True), NPC)
    procs = [e["process"] for e in _events(world, "ws-alice")]
    assert procs == ["outlook.exe"]


def test_credential_grade_validated():
    with pytest.raises(HostError):
        Credential("x", "corp.local", "s", grade="root")


def test_ephemeral_ports_skip_reserved():
    doc = load()
    w = World(doc, resolve(doc, duration="1m", campaign=False, env={}))
    hw = w.hosts
    first = hw.ephemeral_port("h", reserve=True)
    seen = {hw.ephemeral_port("h") for _ in range(16384)}
    assert first not in seen
    assert all(49152 <= p <= 65535 for p in seen)


@given(st.dictionaries(st.sampled_from(["web", "email", "documents", "rdp_jump"]),
                       st.floats(0, 40), min_size=1), st.integers(0, 10_000), st.integers(0, 30))
def test_daily_schedule_counts_and_window(freqs, seed, day):
    start, length = working_window(8, 17, 0)
    plan = daily_schedule(freqs, random.Random(seed), day, start, length)
    base = day * US_PER_DAY + start
    assert all(base <= t < base + length for t, _ in plan)
    assert [t for t, _ in plan] == sorted(t for t, _ in plan)
    for act, f in freqs.items():
        n = sum(1 for _, a in plan if a == act)
        assert int(f) <= n <= int(f) + 1


def test_working_window():
    assert working_window(8, 17, 8) == (0, 9 * US_PER_H)
    assert working_window(8, 17, 0) == (8 * US_PER_H, 9 * US_PER_H)
    with pytest.raises(HostError):
        working_window(17, 8, 0)


def test_runs_binary_only_for_forwarded_attachments(world):
    hw = world.hosts
    direct = Mail("x@evil", "ews02", "invoice", "invoice.docm", True)
    assert not hw.open_mail("ews02", direct, NPC)
    fwd = Mail("ws-bob", "ews02", "FW: invoice", "invoice.docm", True, forwarded=True)
    assert hw.open_mail("ews02", fwd, NPC)
    assert not hw.open_mail("ws-alice", Mail("ws-bob", "ws-alice", "FW", "invoice.docm", True, forwarded=True),
                            NPC)
