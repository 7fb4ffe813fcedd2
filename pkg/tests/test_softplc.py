import pytest
from hypothesis import given, strategies as st

from simpleics.protocols import modbus as mb
from simpleics.scenario import program_source, load
from simpleics.softplc.image import (COIL, HOLDING_REGISTER, AddressError, LadderAddress, RegisterBank,
                                     map_address, serve_modbus, volts_to_counts)
from simpleics.softplc.ladder import LadderError, LadderProgram


def test_address_mapping():
    assert map_address("%QX100.0") == (COIL, 800)
    assert map_address("%IX101.3") == ("discrete_input", 811)
    assert map_address("%QW120") == (HOLDING_REGISTER, 120)
    assert str(LadderAddress.parse("%IW7")) == "%IW7"
    for bad in ("%QX100", "%IW3.1", "%QX99.0", "%QX100.8", "%MW1", "%QW2000"):
        with pytest.raises(AddressError):
            map_address(bad)


def test_volts_to_counts():
    assert volts_to_counts(0.0) == 0
    assert volts_to_counts(10.0) == 32000
    with pytest.raises(ValueError):
        volts_to_counts(10.5)


def test_ton_timing():
    prog = LadderProgram.parse("XIC(%IX100.0) TON(T1, 300) -> OTE(%QX100.0)")
    bank = RegisterBank()
    bank.set("%IX100.0", 1)
    outs = []
    for _ in range(5):
        prog.scan(bank, 100)
        outs.append(bank.get("%QX100.0"))
    assert outs == [0, 0, 1, 1, 1]
    bank.set("%IX100.0", 0)
    prog.scan(bank, 100)
    assert bank.get("%QX100.0") == 0 and prog.timers["T1"].acc == 0


def test_rungs_see_latched_image_not_earlier_outputs():
    prog = LadderProgram.parse("XIC(%IX100.0) -> OTE(%QX100.0)\nXIC(%QX100.0) -> OTE(%QX100.1)")
    bank = RegisterBank()
    bank.set("%IX100.0", 1)
    prog.scan(bank, 10)
    assert (bank.get("%QX100.0"), bank.get("%QX100.1")) == (1, 0)
    prog.scan(bank, 10)
    assert bank.get("%QX100.1") == 1


def test_rising_edge_counter_and_reset():
    prog = LadderProgram.parse("RE(%IX100.0) CTU(C1, 2) -> OTE(%QX100.0)\nXIC(%IX100.1) -> RES(C1)")
    bank = RegisterBank()
    for level in (1, 1, 0, 1):
        bank.set("%IX100.0", level)
        prog.scan(bank, 10)
    assert prog.counters["C1"].cv == 2 and bank.get("%QX100.0") == 1
    bank.set("%IX100.1", 1)
    prog.scan(bank, 10)
    assert prog.counters["C1"].cv == 0


def test_arithmetic_saturates_and_flags_overflow():
    prog = LadderProgram.parse("SUB(1, 5, %QW10) -> OTE(%QX100.0)\nMUL(%IW1, 3, %QW11) -> OTE(%QX100.1)")
    bank = RegisterBank()
    bank.write("input_register", 1, [30000])
    prog.scan(bank, 10)
    assert bank.holding_registers[10] == 0
    assert bank.holding_registers[11] == 0xFFFF
    assert prog.overflow


@pytest.mark.parametrize("src", [
    "XIC(%IX100.0) OTE(%QX100.0)",
    "XIC(%IX100.0) -> OTE(%IX100.1)",
    "XIC(T9.DN) -> OTE(%QX100.0)",
    "-> OTE(%QX100.0)\nXIC(%IX100.0) -> OTE(%QX100.0)",
    "TON(T1, 0) -> OTE(%QX100.0)",
    "TON(T1, 5) -> OTE(%QX100.0)\nTON(T1, 5) -> OTE(%QX100.1)",
    "-> MOV(%IW1, %IW2)",
    "[XIC(%IX100.0) -> OTE(%QX100.0)",
    "FOO(%IX100.0) -> OTE(%QX100.0)",
])
def test_static_errors(src):
    with pytest.raises(LadderError):
        LadderProgram.parse(src)


def test_error_reports_line_number():
    with pytest.raises(LadderError) as ei:
        LadderProgram.parse("# header\n-> OTE(%QX100.0)\nXIC(%QX100.0 -> OTE(%QX100.1)")
    assert ei.value.line == 3


def test_bundled_programs_parse():
    doc = load()
    for plc in doc["process"]["plcs"]:
        assert LadderProgram.parse(program_source(plc)).rungs


# random boolean networks against a direct evaluation oracle
_bits = st.integers(0, 7)
_contact = st.tuples(st.sampled_from(["XIC", "XIO"]), _bits)
_network = st.recursive(
    st.lists(_contact, min_size=1, max_size=3).map(lambda cs: ("series", cs)),
    lambda inner: st.lists(inner, min_size=2, max_size=3).map(lambda bs: ("par", bs)),
    max_leaves=8)


def _render(node):
    kind, items = node
    if kind == "series":
        return " ".join(f"{op}(%IX100.{b})" for op, b in items)
    return "[" + " | ".join(_render(i) for i in items) + "]"


def _oracle(node, inputs):
    kind, items = node
    if kind == "series":
        return all(inputs[b] if op == "XIC" else not inputs[b] for op, b in items)
    return any(_oracle(i, inputs) for i in items)


@given(_network, st.lists(st.integers(0, 1), min_size=8, max_size=8))
def test_boolean_network_matches_oracle(net, inputs):
    prog = LadderProgram.parse(f"{_render(net)} -> OTE(%QX100.0)")
    bank = RegisterBank()
    bank.write("discrete_input", 800, inputs)
    prog.scan(bank, 10)
    assert bank.get("%QX100.0") == int(_oracle(net, inputs))


def test_serve_modbus_reads_writes_and_exceptions():
    bank = RegisterBank()
    resp = serve_modbus(mb.write_registers(1, 1, 100, [7, 8]), bank)
    assert resp.quantity == 2 and bank.holding_registers[100:102] == [7, 8]
    assert list(bank.external_writes) == [(HOLDING_REGISTER, 100, (7, 8))]
    read = serve_modbus(mb.read_request(2, 1, 3, 100, 2), bank)
    assert read.values == (7, 8)
    coils = serve_modbus(mb.read_request(3, 1, 1, 0, 3), bank)
    assert len(coils.values) == 8
    bad = serve_modbus(mb.read_request(4, 1, 4, 1020, 10), bank)
    assert bad.exception_code == mb.ILLEGAL_DATA_ADDRESS
