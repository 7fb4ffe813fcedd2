import ipaddress

import pytest
from hypothesis import given, strategies as st

from simpleics.netfabric import (IMPLICIT_DENY, Endpoint, Fabric, FabricError, Firewall, FirewallRule,
                                 Link, Packet, Segment)
from simpleics.simkernel import Kernel

N = ipaddress.IPv4Network


def build(kernel=None):
    k = kernel or Kernel(seed=5)
    segs = [Segment("IT_LAN", "10.20.0.0/16"), Segment("OT_DMZ", "10.30.0.0/24"),
            Segment("OT", "10.40.0.0/24")]
    eps = [Endpoint("ws", "10.20.0.11", "IT_LAN"),
           Endpoint("jump", "10.30.0.10", "OT_DMZ", {("tcp", 3389)}),
           Endpoint("plc", "10.40.0.10", "OT", {("tcp", 502)})]
    links = [Link("IT_LAN", "IT_LAN", 100, 10), Link("IT_LAN", "fw-it", 400, 20),
             Link("fw-it", "OT_DMZ", 400, 20), Link("OT_DMZ", "fw-ot", 300, 10),
             Link("fw-ot", "OT", 300, 10), Link("IT_LAN", "fw-ot", 900, 30)]
    fws = [Firewall("fw-it", [FirewallRule("r1", N("10.20.0.0/16"), N("10.30.0.10/32"), "tcp", 3389)]),
           Firewall("fw-ot", [FirewallRule("r2", N("10.30.0.0/24"), N("10.40.0.0/24"), "tcp")])]
    return k, Fabric(k, segs, eps, links, fws)


def test_allowed_path_is_delivered_and_reply_uses_conntrack():
    k, f = build()
    got = []
    f.bind("jump", "tcp", 3389, got.append)
    out = f.deliver(Packet("10.20.0.11", "10.30.0.10", "tcp", 50000, 3389))
    assert out.ok and out.path == ("IT_LAN", "fw-it", "OT_DMZ")
    # reply to an ephemeral port that is not open still passes as established
    back = f.deliver(Packet("10.30.0.10", "10.20.0.11", "tcp", 3389, 50000))
    assert back.ok
    k.run_until(10_000)
    assert len(got) == 1


def test_it_lan_cannot_reach_ot():
    _, f = build()
    out = f.deliver(Packet("10.20.0.11", "10.40.0.10", "tcp", 50000, 502))
    assert not out.ok
    assert out.reason == "firewall"
    assert out.rule_id == IMPLICIT_DENY
    assert out.path == ("IT_LAN", "fw-ot")


def test_closed_port_drop():
    _, f = build()
    out = f.deliver(Packet("10.30.0.10", "10.40.0.10", "tcp", 50000, 503))
    assert not out.ok and out.reason == "closed_port"


def test_unsolicited_reply_direction_is_not_established():
    _, f = build()
    out = f.deliver(Packet("10.30.0.10", "10.20.0.11", "tcp", 3389, 50000))
    assert not out.ok


def test_endpoint_outside_segment_rejected():
    k, f = build()
    with pytest.raises(FabricError):
        f.add_endpoint(Endpoint("bad", "10.40.0.99", "OT_DMZ"))
    with pytest.raises(FabricError):
        f.add_endpoint(Endpoint("dup", "10.40.0.10", "OT"))


def test_overlapping_segments_rejected():
    with pytest.raises(FabricError):
        Fabric(Kernel(), [Segment("IT_LAN", "10.0.0.0/8"), Segment("OT", "10.40.0.0/24")], [], [], [])


def test_link_validation():
    with pytest.raises(FabricError):
        Link("a", "b", 0, 0)
    with pytest.raises(FabricError):
        Link("a", "b", 10, 10)


def test_latency_is_sum_of_links_within_jitter():
    _, f = build()
    st_ = f.ping("ws", "jump", 200)
    assert st_.loss_fraction == 0
    assert f.mean_latency_us("IT_LAN", "OT_DMZ") == 800
    for s in st_.samples:
        assert 2 * (800 - 40) <= s <= 2 * (800 + 40)


def test_ping_through_denied_path_is_all_loss():
    _, f = build()
    assert f.ping("ws", "plc", 5).loss_fraction == 1.0


@given(st.lists(st.integers(0, 1400), min_size=2, max_size=30))
def test_fifo_per_pair_despite_jitter(sizes):
    k, f = build(Kernel(seed=11))
    order = []
    f.bind("jump", "tcp", 3389, lambda p: order.append(p.info["n"]))
    for i, n in enumerate(sizes):
        p = Packet("10.20.0.11", "10.30.0.10", "tcp", 50000, 3389, b"x" * n)
        p.info["n"] = i
        f.deliver(p)
    k.run_until(10**7)
    assert order == list(range(len(sizes)))


def test_taps_see_packets_on_traversed_segments():
    k, f = build()
    f.tap_register("OT_DMZ")
    seen = []
    f.observers.append(lambda seg, p, outcome, t: seen.append((seg, outcome.ok)))
    f.deliver(Packet("10.20.0.11", "10.30.0.10", "tcp", 1, 3389))
    f.deliver(Packet("10.20.0.11", "10.40.0.10", "tcp", 1, 502))
    assert seen == [("OT_DMZ", True)]
    with pytest.raises(FabricError):
        f.tap_register("OT_DMZ")


def test_same_seed_same_latencies():
    def lat():
        _, f = build(Kernel(seed=9))
        return f.ping("ws", "jump", 50).samples
    assert lat() == lat()
