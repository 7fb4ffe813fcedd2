"""Modbus TCP (MBAP + PDU) codec for function codes 1-6, 15 and 16.

Requests and responses share function codes but not body layouts, so a frame
records its direction and ``modbus_decode`` must be told which one to expect.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

READ_COILS = 1
READ_DISCRETE_INPUTS = 2
READ_HOLDING_REGISTERS = 3
READ_INPUT_REGISTERS = 4
WRITE_SINGLE_COIL = 5
WRITE_SINGLE_REGISTER = 6
WRITE_MULTIPLE_COILS = 15
WRITE_MULTIPLE_REGISTERS = 16

FUNCTIONS = (1, 2, 3, 4, 5, 6, 15, 16)

ILLEGAL_FUNCTION = 0x01
ILLEGAL_DATA_ADDRESS = 0x02
ILLEGAL_DATA_VALUE = 0x03
SERVER_DEVICE_FAILURE = 0x04

# per-function request quantity limits from the Modbus application protocol
QUANTITY_LIMITS = {1: 2000, 2: 2000, 3: 125, 4: 125, 15: 1968, 16: 123}

MBAP = struct.Struct(">HHHB")
MAX_ADU = 260
COIL_ON = 0xFF00
COIL_OFF = 0x0000


class ModbusError(ValueError):
    """Structured codec failure; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class ModbusFrame:
    txn_id: int
    unit_id: int
    function: int
    address: int | None = None
    quantity: int | None = None
    values: tuple[int, ...] = ()
    response: bool = False
    exception_code: int | None = None
    protocol_id: int = 0

    @property
    def is_exception(self) -> bool:
        return self.exception_code is not None

    @property
    def length(self) -> int:
        return len(_pdu(self)) + 1

    def exception(self, code: int) -> "ModbusFrame":
        """The exception response answering this request."""
        return ModbusFrame(self.txn_id, self.unit_id, self.function, response=True,
                           exception_code=code)


def read_request(txn_id: int, unit_id: int, function: int, address: int, quantity: int) -> ModbusFrame:
    return ModbusFrame(txn_id, unit_id, function, address, quantity)


def write_coil(txn_id: int, unit_id: int, address: int, on: bool) -> ModbusFrame:
    return ModbusFrame(txn_id, unit_id, WRITE_SINGLE_COIL, address, values=(1 if on else 0,))


def write_register(txn_id: int, unit_id: int, address: int, value: int) -> ModbusFrame:
    return ModbusFrame(txn_id, unit_id, WRITE_SINGLE_REGISTER, address, values=(value,))


def write_coils(txn_id: int, unit_id: int, address: int, bits) -> ModbusFrame:
    bits = tuple(1 if b else 0 for b in bits)
    return ModbusFrame(txn_id, unit_id, WRITE_MULTIPLE_COILS, address, len(bits), bits)


def write_registers(txn_id: int, unit_id: int, address: int, words) -> ModbusFrame:
    words = tuple(int(w) for w in words)
    return ModbusFrame(txn_id, unit_id, WRITE_MULTIPLE_REGISTERS, address, len(words), words)


def pack_bits(bits) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def unpack_bits(data: bytes, count: int | None = None) -> tuple[int, ...]:
    n = len(data) * 8 if count is None else count
    return tuple((data[i // 8] >> (i % 8)) & 1 for i in range(n))


def _u16(name: str, v) -> None:
    if not isinstance(v, int) or not 0 <= v <= 0xFFFF:
        raise ModbusError("invalid_field", f"{name}={v!r} is not a u16")


def _check_bits(values) -> None:
    if any(v not in (0, 1) for v in values):
        raise ModbusError("invalid_field", "bit values must be 0 or 1")


def _validate(f: ModbusFrame) -> None:
    _u16("txn_id", f.txn_id)
    if f.protocol_id != 0:
        raise ModbusError("bad_protocol_id", str(f.protocol_id))
    if not isinstance(f.unit_id, int) or not 0 <= f.unit_id <= 0xFF:
        raise ModbusError("invalid_field", f"unit_id={f.unit_id!r}")
    if f.function not in FUNCTIONS:
        raise ModbusError("unsupported_function", str(f.function))
    if f.exception_code is not None:
        if not f.response:
            raise ModbusError("invalid_field", "only responses carry exception codes")
        if not 1 <= f.exception_code <= 0xFF:
            raise ModbusError("invalid_field", f"exception_code={f.exception_code}")
        return
    fn = f.function
    if not f.response:
        _u16("address", f.address)
        if fn in (1, 2, 3, 4):
            _u16("quantity", f.quantity)
            if not 1 <= f.quantity <= QUANTITY_LIMITS[fn]:
                raise ModbusError("quantity_out_of_range", f"fc{fn} quantity={f.quantity}")
            if f.address + f.quantity > 0x10000:
                raise ModbusError("address_overflow", "address + quantity exceeds 65536")
            if f.values:
                raise ModbusError("invalid_field", "read requests carry no values")
        elif fn in (5, 6):
            if f.quantity is not None or len(f.values) != 1:
                raise ModbusError("invalid_field", "single writes carry exactly one value")
            if fn == 5:
                _check_bits(f.values)
            else:
                _u16("value", f.values[0])
        else:
            _u16("quantity", f.quantity)
            if not 1 <= f.quantity <= QUANTITY_LIMITS[fn] or len(f.values) != f.quantity:
                raise ModbusError("quantity_out_of_range", f"fc{fn} quantity={f.quantity}")
            if f.address + f.quantity > 0x10000:
                raise ModbusError("address_overflow", "address + quantity exceeds 65536")
            if fn == 15:
                _check_bits(f.values)
            else:
                for w in f.values:
                    _u16("value", w)
        return
    # responses
    if fn in (1, 2):
        if f.address is not None or f.quantity is not None:
            raise ModbusError("invalid_field", "bit read responses carry only values")
        if not f.values or len(f.values) % 8 or len(f.values) > 2000 + 7:
            raise ModbusError("invalid_field", "bit read responses carry whole bytes of bits")
        _check_bits(f.values)
    elif fn in (3, 4):
        if f.address is not None or f.quantity is not None:
            raise ModbusError("invalid_field", "register read responses carry only values")
        if not 1 <= len(f.values) <= 125:
            raise ModbusError("quantity_out_of_range", f"{len(f.values)} registers")
        for w in f.values:
            _u16("value", w)
    elif fn in (5, 6):
        _u16("address", f.address)
        if f.quantity is not None or len(f.values) != 1:
            raise ModbusError("invalid_field", "single write echo carries one value")
        if fn == 5:
            _check_bits(f.values)
        else:
            _u16("value", f.values[0])
    else:
        _u16("address", f.address)
        _u16("quantity", f.quantity)
        if f.values:
            raise ModbusError("invalid_field", "write-multiple responses carry no values")
        if not 1 <= f.quantity <= QUANTITY_LIMITS[fn]:
            raise ModbusError("quantity_out_of_range", f"fc{fn} quantity={f.quantity}")


def _pdu(f: ModbusFrame) -> bytes:
    fn = f.function
    if f.exception_code is not None:
        return bytes((fn | 0x80, f.exception_code))
    if not f.response:
        if fn in (1, 2, 3, 4):
            return struct.pack(">BHH", fn, f.address, f.quantity)
        if fn == 5:
            return struct.pack(">BHH", fn, f.address, COIL_ON if f.values[0] else COIL_OFF)
        if fn == 6:
            return struct.pack(">BHH", fn, f.address, f.values[0])
        if fn == 15:
            data = pack_bits(f.values)
            return struct.pack(">BHHB", fn, f.address, f.quantity, len(data)) + data
        data = struct.pack(f">{len(f.values)}H", *f.values)
        return struct.pack(">BHHB", fn, f.address, f.quantity, len(data)) + data
    if fn in (1, 2):
        data = pack_bits(f.values)
        return bytes((fn, len(data))) + data
    if fn in (3, 4):
        data = struct.pack(f">{len(f.values)}H", *f.values)
        return bytes((fn, len(data))) + data
    if fn == 5:
        return struct.pack(">BHH", fn, f.address, COIL_ON if f.values[0] else COIL_OFF)
    if fn == 6:
        return struct.pack(">BHH", fn, f.address, f.values[0])
    return struct.pack(">BHH", fn, f.address, f.quantity)


def modbus_encode(f: ModbusFrame) -> bytes:
    _validate(f)
    pdu = _pdu(f)
    return MBAP.pack(f.txn_id, 0, len(pdu) + 1, f.unit_id) + pdu


def frame_length(buf: bytes) -> int | None:
    """Total ADU size announced by the MBAP header, or None if not yet known."""
    if len(buf) < 6:
        return None
    return 6 + struct.unpack_from(">H", buf, 4)[0]


def modbus_decode(b: bytes, response: bool = False) -> ModbusFrame:
    b = bytes(b)
    if len(b) < 8:
        raise ModbusError("truncated", f"{len(b)} bytes is shorter than MBAP + function")
    if len(b) > MAX_ADU:
        raise ModbusError("too_long", f"{len(b)} bytes")
    txn, proto, length, unit = MBAP.unpack_from(b)
    if proto != 0:
        raise ModbusError("bad_protocol_id", str(proto))
    if length != len(b) - 6:
        raise ModbusError("length_mismatch", f"header says {length}, have {len(b) - 6}")
    pdu = b[7:]
    code = pdu[0]
    fn = code & 0x7F
    if fn not in FUNCTIONS:
        raise ModbusError("unsupported_function", str(code))
    body = pdu[1:]
    if code & 0x80:
        if not response:
            raise ModbusError("malformed", "exception function code in a request")
        if len(body) != 1:
            raise ModbusError("malformed", "exception body must be one byte")
        frame = ModbusFrame(txn, unit, fn, response=True, exception_code=body[0])
        _validate(frame)
        return frame

    def need(n: int) -> None:
        if len(body) != n:
            raise ModbusError("length_mismatch", f"fc{fn} body is {len(body)} bytes, expected {n}")

    if not response:
        if fn in (1, 2, 3, 4):
            need(4)
            addr, qty = struct.unpack(">HH", body)
            frame = ModbusFrame(txn, unit, fn, addr, qty)
        elif fn in (5, 6):
            need(4)
            addr, val = struct.unpack(">HH", body)
            if fn == 5:
                if val not in (COIL_ON, COIL_OFF):
                    raise ModbusError("invalid_coil_value", hex(val))
                val = 1 if val == COIL_ON else 0
            frame = ModbusFrame(txn, unit, fn, addr, values=(val,))
        else:
            if len(body) < 5:
                raise ModbusError("truncated", f"fc{fn} header")
            addr, qty, nbytes = struct.unpack_from(">HHB", body)
            need(5 + nbytes)
            data = body[5:]
            if fn == 15:
                if nbytes != (qty + 7) // 8:
                    raise ModbusError("length_mismatch", "byte count does not match quantity")
                if qty % 8 and data[-1] >> (qty % 8):
                    raise ModbusError("malformed", "non-zero padding bits")
                values = unpack_bits(data, qty)
            else:
                if nbytes != 2 * qty:
                    raise ModbusError("length_mismatch", "byte count does not match quantity")
                values = struct.unpack(f">{qty}H", data)
            frame = ModbusFrame(txn, unit, fn, addr, qty, tuple(values))
    else:
        if fn in (1, 2, 3, 4):
            if not body:
                raise ModbusError("truncated", "missing byte count")
            nbytes = body[0]
            need(1 + nbytes)
            data = body[1:]
            if fn in (1, 2):
                values = unpack_bits(data)
            else:
                if nbytes % 2:
                    raise ModbusError("malformed", "odd register byte count")
                values = struct.unpack(f">{nbytes // 2}H", data)
            frame = ModbusFrame(txn, unit, fn, values=tuple(values), response=True)
        elif fn in (5, 6):
            need(4)
            addr, val = struct.unpack(">HH", body)
            if fn == 5:
                if val not in (COIL_ON, COIL_OFF):
                    raise ModbusError("invalid_coil_value", hex(val))
                val = 1 if val == COIL_ON else 0
            frame = ModbusFrame(txn, unit, fn, addr, values=(val,), response=True)
        else:
            need(4)
            addr, qty = struct.unpack(">HH", body)
            frame = ModbusFrame(txn, unit, fn, addr, qty, response=True)
    _validate(frame)
    return frame
