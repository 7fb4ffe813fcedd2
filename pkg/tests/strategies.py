"""Hypothesis strategies producing only well-formed Modbus and MQTT frames."""
from hypothesis import strategies as st

from simpleics.protocols import modbus as mb
from simpleics.protocols import mqtt

u16 = st.integers(0, 0xFFFF)
unit = st.integers(0, 0xFF)
bit = st.integers(0, 1)


@st.composite
def modbus_request(draw):
    fn = draw(st.sampled_from(mb.FUNCTIONS))
    txn, uid = draw(u16), draw(unit)
    if fn in (1, 2, 3, 4):
        qty = draw(st.integers(1, mb.QUANTITY_LIMITS[fn]))
        addr = draw(st.integers(0, 0x10000 - qty))
        return mb.ModbusFrame(txn, uid, fn, addr, qty)
    if fn in (5, 6):
        return mb.ModbusFrame(txn, uid, fn, draw(u16), values=(draw(bit if fn == 5 else u16),))
    limit = 123 if fn == 16 else 200
    qty = draw(st.integers(1, limit))
    addr = draw(st.integers(0, 0x10000 - qty))
    vals = tuple(draw(st.lists(bit if fn == 15 else u16, min_size=qty, max_size=qty)))
    return mb.ModbusFrame(txn, uid, fn, addr, qty, vals)


@st.composite
def modbus_response(draw):
    fn = draw(st.sampled_from(mb.FUNCTIONS))
    txn, uid = draw(u16), draw(unit)
    if draw(st.booleans()) and draw(st.booleans()):
        return mb.ModbusFrame(txn, uid, fn, response=True, exception_code=draw(st.integers(1, 0xFF)))
    if fn in (1, 2):
        nbytes = draw(st.integers(1, 32))
        return mb.ModbusFrame(txn, uid, fn, values=tuple(draw(st.lists(bit, min_size=8 * nbytes,
                                                                      max_size=8 * nbytes))),
                              response=True)
    if fn in (3, 4):
        return mb.ModbusFrame(txn, uid, fn, values=tuple(draw(st.lists(u16, min_size=1, max_size=125))),
                              response=True)
    if fn in (5, 6):
        return mb.ModbusFrame(txn, uid, fn, draw(u16), values=(draw(bit if fn == 5 else u16),),
                              response=True)
    return mb.ModbusFrame(txn, uid, fn, draw(u16), draw(st.integers(1, mb.QUANTITY_LIMITS[fn])),
                          response=True)


_level = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=8)
topic_name = st.lists(_level, min_size=1, max_size=5).map("/".join)
topic_filter = st.lists(st.one_of(_level, st.just("+")), min_size=1, max_size=4).flatmap(
    lambda levels: st.sampled_from(["/".join(levels), "/".join(levels) + "/#"]))
client_id = st.text(alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E), min_size=1,
                    max_size=23)
pid = st.integers(1, 0xFFFF)


@st.composite
def mqtt_packet(draw):
    kind = draw(st.sampled_from(list(mqtt.Kind)))
    K = mqtt.Kind
    if kind == K.PUBLISH:
        qos = draw(st.integers(0, 1))
        return mqtt.MqttPacket(K.PUBLISH, topic=draw(topic_name), payload=draw(st.binary(max_size=300)),
                               qos=qos, retain=draw(st.booleans()),
                               dup=draw(st.booleans()) if qos else False,
                               packet_id=draw(pid) if qos else None)
    if kind == K.CONNECT:
        return mqtt.connect(draw(client_id), draw(u16))
    if kind == K.CONNACK:
        return mqtt.MqttPacket(K.CONNACK, session_present=draw(st.booleans()),
                               return_code=draw(st.integers(0, 5)))
    if kind == K.PUBACK:
        return mqtt.MqttPacket(K.PUBACK, packet_id=draw(pid))
    if kind == K.SUBSCRIBE:
        subs = draw(st.lists(st.tuples(topic_filter, st.integers(0, 1)), min_size=1, max_size=4))
        return mqtt.subscribe(draw(pid), *subs)
    if kind == K.SUBACK:
        granted = draw(st.lists(st.sampled_from([0, 1, mqtt.SUBACK_FAILURE]), min_size=1, max_size=4))
        return mqtt.MqttPacket(K.SUBACK, packet_id=draw(pid), granted=tuple(granted))
    return mqtt.MqttPacket(kind)
