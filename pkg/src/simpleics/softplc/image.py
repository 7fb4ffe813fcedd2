"""Process image of a soft PLC (or a twin acting as Modbus server) and the
OpenPLC-style located-variable addressing that maps onto it."""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass

from ..protocols import modbus as mb

BIT_BYTE_MIN = 100
BIT_BYTE_MAX = 199
BIT_TABLE_SIZE = 1600
WORD_TABLE_SIZE = 1024
WORD_MAX = 0xFFFF

COIL = "coil"
DISCRETE_INPUT = "discrete_input"
INPUT_REGISTER = "input_register"
HOLDING_REGISTER = "holding_register"

_KINDS = {"IX": DISCRETE_INPUT, "QX": COIL, "IW": INPUT_REGISTER, "QW": HOLDING_REGISTER}
_ADDR_RE = re.compile(r"^%(IX|QX|IW|QW)(\d+)(?:\.(\d+))?$")


class AddressError(ValueError):
    pass


@dataclass(frozen=True)
class LadderAddress:
    kind: str
    byte_index: int
    bit_index: int | None = None

    @classmethod
    def parse(cls, text: str) -> "LadderAddress":
        m = _ADDR_RE.match(text.strip())
        if not m:
            raise AddressError(f"not a located variable: {text!r}")
        prefix, idx, bit = m.group(1), int(m.group(2)), m.group(3)
        kind = _KINDS[prefix]
        if prefix.endswith("X"):
            if bit is None:
                raise AddressError(f"{text}: bit address needs .bit")
            return cls(kind, idx, int(bit))
        if bit is not None:
            raise AddressError(f"{text}: word address takes no bit")
        return cls(kind, idx)

    @property
    def is_bit(self) -> bool:
        return self.kind in (COIL, DISCRETE_INPUT)

    def __str__(self) -> str:
        prefix = {v: k for k, v in _KINDS.items()}[self.kind]
        if self.is_bit:
            return f"%{prefix}{self.byte_index}.{self.bit_index}"
        return f"%{prefix}{self.byte_index}"


def map_address(a: LadderAddress | str) -> tuple[str, int]:
    """Located variable -> (modbus table, modbus index).

    Bit variables live in %xX100.0-%xX199.7, so %QX100.0 is coil 800.
    Word variables map one-to-one onto register numbers.
    """
    if isinstance(a, str):
        a = LadderAddress.parse(a)
    if a.is_bit:
        if not BIT_BYTE_MIN <= a.byte_index <= BIT_BYTE_MAX or not 0 <= (a.bit_index or 0) <= 7:
            raise AddressError(f"{a} outside %X{BIT_BYTE_MIN}.0-%X{BIT_BYTE_MAX}.7")
        return a.kind, a.byte_index * 8 + a.bit_index
    if not 0 <= a.byte_index < WORD_TABLE_SIZE:
        raise AddressError(f"{a} outside word range 0-{WORD_TABLE_SIZE - 1}")
    return a.kind, a.byte_index


def volts_to_counts(v: float) -> int:
    """0-10 V analog value -> 0-32000 counts (ADC truncates)."""
    if not 0.0 <= v <= 10.0:
        raise ValueError(f"{v} V outside 0-10 V")
    return int(v * 3200)


def counts_to_volts(c: int) -> float:
    return c / 3200


class RegisterBank:
    """Bounds-checked bit and word tables. Writes arriving over Modbus are
    logged in ``external_writes`` (bounded; the oldest entries drop off) so
    telemetry can attribute them."""

    def __init__(self) -> None:
        self.coils = bytearray(BIT_TABLE_SIZE)
        self.discrete_inputs = bytearray(BIT_TABLE_SIZE)
        self.holding_registers = [0] * WORD_TABLE_SIZE
        self.input_registers = [0] * WORD_TABLE_SIZE
        self.external_writes: deque[tuple[str, int, tuple[int, ...]]] = deque(maxlen=1024)

    def table(self, name: str):
        return {COIL: self.coils, DISCRETE_INPUT: self.discrete_inputs,
                HOLDING_REGISTER: self.holding_registers, INPUT_REGISTER: self.input_registers}[name]

    def in_range(self, name: str, start: int, count: int = 1) -> bool:
        return start >= 0 and count >= 1 and start + count <= len(self.table(name))

    def read(self, name: str, start: int, count: int = 1) -> tuple[int, ...]:
        if not self.in_range(name, start, count):
            raise IndexError(f"{name}[{start}:{start + count}] out of range")
        return tuple(self.table(name)[start:start + count])

    def write(self, name: str, start: int, values) -> None:
        values = list(values)
        if not self.in_range(name, start, len(values)):
            raise IndexError(f"{name}[{start}:{start + len(values)}] out of range")
        tbl = self.table(name)
        limit = 1 if name in (COIL, DISCRETE_INPUT) else WORD_MAX
        for i, v in enumerate(values):
            if not 0 <= v <= limit:
                raise ValueError(f"{name} value {v} out of range")
            tbl[start + i] = v

    def get(self, addr: LadderAddress | str) -> int:
        name, idx = map_address(addr)
        return self.table(name)[idx]

    def set(self, addr: LadderAddress | str, value: int) -> None:
        name, idx = map_address(addr)
        self.write(name, idx, [value])

    def snapshot(self) -> tuple:
        return (bytes(self.coils), bytes(self.discrete_inputs),
                tuple(self.holding_registers), tuple(self.input_registers))


_READ_TABLES = {1: COIL, 2: DISCRETE_INPUT, 3: HOLDING_REGISTER, 4: INPUT_REGISTER}


def serve_modbus(f: mb.ModbusFrame, bank: RegisterBank) -> mb.ModbusFrame:
    """Answer one decoded request against ``bank``."""
    fn = f.function
    if f.response:
        raise ValueError("serve_modbus expects a request frame")
    if fn in _READ_TABLES:
        name = _READ_TABLES[fn]
        if not 1 <= f.quantity <= mb.QUANTITY_LIMITS[fn]:
            return f.exception(mb.ILLEGAL_DATA_VALUE)
        if not bank.in_range(name, f.address, f.quantity):
            return f.exception(mb.ILLEGAL_DATA_ADDRESS)
        values = bank.read(name, f.address, f.quantity)
        if fn in (1, 2):
            values = values + (0,) * (-len(values) % 8)
        return mb.ModbusFrame(f.txn_id, f.unit_id, fn, values=values, response=True)
    name = COIL if fn in (5, 15) else HOLDING_REGISTER
    if not bank.in_range(name, f.address, len(f.values)):
        return f.exception(mb.ILLEGAL_DATA_ADDRESS)
    bank.write(name, f.address, f.values)
    bank.external_writes.append((name, f.address, tuple(f.values)))
    if fn in (5, 6):
        return mb.ModbusFrame(f.txn_id, f.unit_id, fn, f.address, values=f.values, response=True)
    return mb.ModbusFrame(f.txn_id, f.unit_id, fn, f.address, f.quantity, response=True)
