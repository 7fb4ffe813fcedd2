"""Ladder Diagram programs: a small text grammar, static checks and the
snapshot scan cycle.

Grammar, one rung per line (``#`` starts a comment)::

    rung     := [series] "->" output
    series   := element { element }
    element  := instr | "[" series { "|" series } "]"
    instr    := NAME "(" arg { "," arg } ")"

Contacts: XIC(bit) normally open, XIO(bit) normally closed, RE(bit) rising
edge. A bit is a %IX/%QX variable or a timer/counter done bit (``T1.DN``).
Boxes: TON(name, preset_ms), CTU(name, preset), LT/LE/GT/GE/EQ(a, b),
ADD/SUB/MUL(a, b, dest), SCALE(src, in_lo, in_hi, out_lo, out_hi, dest).
Outputs: OTE(coil), OTL(coil), OTU(coil), MOV(src, dest), RES(name).
Word operands are %IW/%QW variables or integer literals.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .image import (COIL, HOLDING_REGISTER, WORD_MAX, AddressError,
                    LadderAddress, RegisterBank, map_address)


class LadderError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


_TOKEN = re.compile(r"\s*(->|\[|\]|\||\(|\)|,|[^\s\[\]|(),]+)")

CONTACTS = {"XIC", "XIO", "RE"}
COMPARATORS = {"LT": lambda a, b: a < b, "LE": lambda a, b: a <= b, "GT": lambda a, b: a > b,
               "GE": lambda a, b: a >= b, "EQ": lambda a, b: a == b}
ARITH = {"ADD", "SUB", "MUL"}
OUTPUTS = {"OTE", "OTL", "OTU", "MOV", "RES"}
ARITY = {"XIC": 1, "XIO": 1, "RE": 1, "TON": 2, "CTU": 2, "ADD": 3, "SUB": 3, "MUL": 3,
         "SCALE": 6, "OTE": 1, "OTL": 1, "OTU": 1, "MOV": 2, "RES": 1,
         **{k: 2 for k in COMPARATORS}}


@dataclass
class Instr:
    op: str
    args: tuple
    line: int
    slot: int = -1  # per-instance memory slot (edge contacts)


@dataclass
class Parallel:
    branches: list[list]


@dataclass
class Rung:
    network: list
    output: Instr
    line: int
    text: str


@dataclass
class TimerState:
    preset: int
    acc: int = 0
    dn: bool = False


@dataclass
class CounterState:
    preset: int
    cv: int = 0
    dn: bool = False
    prev_in: bool = False


def _tokenize(text: str, line: int) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise LadderError(f"cannot tokenize {text[pos:]!r}", line)
        out.append(m.group(1))
        pos = m.end()
    return out


def _operand(tok: str, line: int):
    if tok.lstrip("-").isdigit():
        return int(tok)
    if tok.startswith("%"):
        try:
            a = LadderAddress.parse(tok)
            map_address(a)
        except AddressError as exc:
            raise LadderError(str(exc), line) from None
        return a
    if re.fullmatch(r"[A-Za-z_]\w*(\.DN)?", tok):
        return tok
    raise LadderError(f"bad operand {tok!r}", line)


class _Parser:
    def __init__(self, tokens: list[str], line: int):
        self.toks, self.i, self.line = tokens, 0, line

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self, expect: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expect is not None and tok != expect):
            raise LadderError(f"expected {expect or 'token'}, got {tok!r}", self.line)
        self.i += 1
        return tok

    def instr(self) -> Instr:
        name = self.take().upper()
        if name not in ARITY:
            raise LadderError(f"unknown instruction {name}", self.line)
        self.take("(")
        args = [_operand(self.take(), self.line)]
        while self.peek() == ",":
            self.take(",")
            args.append(_operand(self.take(), self.line))
        self.take(")")
        if len(args) != ARITY[name]:
            raise LadderError(f"{name} takes {ARITY[name]} arguments", self.line)
        return Instr(name, tuple(args), self.line)

    def series(self, stop: set[str]) -> list:
        items = []
        while self.peek() is not None and self.peek() not in stop:
            if self.peek() == "[":
                self.take("[")
                branches = [self.series({"|", "]"})]
                while self.peek() == "|":
                    self.take("|")
                    branches.append(self.series({"|", "]"}))
                self.take("]")
                if any(not b for b in branches):
                    raise LadderError("empty parallel branch", self.line)
                items.append(Parallel(branches))
            else:
                ins = self.instr()
                if ins.op in OUTPUTS:
                    raise LadderError(f"{ins.op} is an output; place it after '->'", self.line)
                items.append(ins)
        return items


def _walk(network):
    for item in network:
        if isinstance(item, Parallel):
            for b in item.branches:
                yield from _walk(b)
        else:
            yield item


class LadderProgram:
    """Parsed, validated ladder program together with its runtime memory
    (timers, counters, edge detectors)."""

    def __init__(self, rungs: list[Rung], source: str = ""):
        self.rungs = rungs
        self.source = source
        self.timers: dict[str, TimerState] = {}
        self.counters: dict[str, CounterState] = {}
        self.edge_memory: list[int] = []
        self.overflow = False
        self.scans = 0
        self.last_scan_changed = True
        self.writers: dict[tuple[str, int], int] = {}
        self._validate()

    @classmethod
    def parse(cls, source: str) -> "LadderProgram":
        rungs = []
        for n, raw in enumerate(source.splitlines(), 1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            toks = _tokenize(text, n)
            if toks.count("->") != 1:
                raise LadderError("a rung needs exactly one '->'", n)
            p = _Parser(toks, n)
            network = p.series({"->"})
            p.take("->")
            out = p.instr()
            if out.op not in OUTPUTS:
                raise LadderError(f"{out.op} cannot terminate a rung", n)
            if p.peek() is not None:
                raise LadderError(f"trailing tokens {p.toks[p.i:]}", n)
            rungs.append(Rung(network, out, n, text))
        return cls(rungs, source)

    def _validate(self) -> None:
        boxes: dict[str, str] = {}
        for rung in self.rungs:
            for ins in _walk(rung.network):
                if ins.op in ("TON", "CTU"):
                    name, preset = ins.args
                    if not isinstance(name, str) or "." in name or not isinstance(preset, int) or preset <= 0:
                        raise LadderError(f"{ins.op}(name, positive preset)", ins.line)
                    if name in boxes:
                        raise LadderError(f"{name} declared twice", ins.line)
                    boxes[name] = ins.op
                    if ins.op == "TON":
                        self.timers[name] = TimerState(preset)
                    else:
                        self.counters[name] = CounterState(preset)
        for rung in self.rungs:
            for ins in [*_walk(rung.network), rung.output]:
                self._check_args(ins, boxes)
                if ins.op == "RE":
                    ins.slot = len(self.edge_memory)
                    self.edge_memory.append(0)
            for ins in [*_walk(rung.network), rung.output]:
                dest = self._dest(ins)
                if dest is None:
                    continue
                key = map_address(dest)
                prev = self.writers.get(key)
                if prev is not None and prev != rung.line:
                    raise LadderError(f"{dest} written by rungs on lines {prev} and {rung.line}",
                                      rung.line)
                self.writers[key] = rung.line

    @staticmethod
    def _dest(ins: Instr):
        if ins.op in ("OTE", "OTL", "OTU"):
            return ins.args[0]
        if ins.op in ARITH or ins.op in ("MOV", "SCALE"):
            return ins.args[-1]
        return None

    def _check_args(self, ins: Instr, boxes: dict[str, str]) -> None:
        op, args = ins.op, ins.args
        if op in CONTACTS:
            a = args[0]
            if isinstance(a, str):
                if not a.endswith(".DN") or a[:-3] not in boxes:
                    raise LadderError(f"undeclared bit {a}", ins.line)
            elif not isinstance(a, LadderAddress) or not a.is_bit:
                raise LadderError(f"{op} needs a bit operand", ins.line)
        elif op in ("OTE", "OTL", "OTU"):
            a = args[0]
            if not isinstance(a, LadderAddress) or a.kind != COIL:
                raise LadderError(f"{op} needs a %QX coil", ins.line)
        elif op == "RES":
            if args[0] not in boxes:
                raise LadderError(f"RES of undeclared {args[0]}", ins.line)
        elif op in COMPARATORS or op in ARITH or op in ("MOV", "SCALE"):
            operands = args if op in COMPARATORS else args[:-1]
            for a in operands:
                if not (isinstance(a, int) or (isinstance(a, LadderAddress) and not a.is_bit)):
                    raise LadderError(f"{op} needs word operands", ins.line)
            if op not in COMPARATORS:
                dest = args[-1]
                if not isinstance(dest, LadderAddress) or dest.kind != HOLDING_REGISTER:
                    raise LadderError(f"{op} destination must be a %QW register", ins.line)

    # -- scan -----------------------------------------------------------

    def scan(self, bank: RegisterBank, dt_ms: int) -> RegisterBank:
        """One scan: latch the image, evaluate rungs top to bottom against
        the latched copy, then commit every output at once."""
        coils = bytes(bank.coils)
        inputs = bytes(bank.discrete_inputs)
        holding = tuple(bank.holding_registers)
        iregs = tuple(bank.input_registers)
        done = {n: t.dn for n, t in self.timers.items()}
        done.update({n: c.dn for n, c in self.counters.items()})
        before = self._state_key()

        def bit(a) -> bool:
            if isinstance(a, str):
                return done[a[:-3]]
            idx = a.byte_index * 8 + a.bit_index
            return bool((coils if a.kind == COIL else inputs)[idx])

        def word(a) -> int:
            if isinstance(a, int):
                return a
            return (holding if a.kind == HOLDING_REGISTER else iregs)[a.byte_index]

        bit_writes: dict[int, int] = {}
        word_writes: dict[int, int] = {}
        new_edges = list(self.edge_memory)
        resets: list[str] = []

        def saturate(v: int) -> int:
            if v < 0 or v > WORD_MAX:
                self.overflow = True
                return min(max(v, 0), WORD_MAX)
            return v

        def ev(network, power: bool) -> bool:
            for item in network:
                if isinstance(item, Parallel):
                    power = any([ev(b, power) for b in item.branches])
                    continue
                op, args = item.op, item.args
                if op == "XIC":
                    power = power and bit(args[0])
                elif op == "XIO":
                    power = power and not bit(args[0])
                elif op == "RE":
                    cur = bit(args[0])
                    power = power and cur and not self.edge_memory[item.slot]
                    new_edges[item.slot] = int(cur)
                elif op in COMPARATORS:
                    power = power and COMPARATORS[op](word(args[0]), word(args[1]))
                elif op == "TON":
                    t = self.timers[args[0]]
                    t.acc = min(t.acc + dt_ms, t.preset) if power else 0
                    t.dn = t.acc >= t.preset
                    power = power and t.dn
                elif op == "CTU":
                    c = self.counters[args[0]]
                    if power and not c.prev_in:
                        if c.cv >= 32767:
                            self.overflow = True
                        else:
                            c.cv += 1
                    c.prev_in = power
                    c.dn = c.cv >= c.preset
                    power = c.dn
                elif op in ARITH:
                    if power:
                        a, b = word(args[0]), word(args[1])
                        r = a + b if op == "ADD" else a - b if op == "SUB" else a * b
                        word_writes[args[2].byte_index] = saturate(r)
                elif op == "SCALE":
                    if power:
                        src, ilo, ihi, olo, ohi = (word(x) for x in args[:5])
                        if ihi == ilo:
                            self.overflow = True
                            r = olo
                        else:
                            r = olo + (src - ilo) * (ohi - olo) // (ihi - ilo)
                        word_writes[args[5].byte_index] = saturate(r)
            return power

        for rung in self.rungs:
            power = ev(rung.network, True)
            out = rung.output
            op, args = out.op, out.args
            if op == "OTE":
                bit_writes[args[0].byte_index * 8 + args[0].bit_index] = int(power)
            elif op == "OTL" and power:
                bit_writes[args[0].byte_index * 8 + args[0].bit_index] = 1
            elif op == "OTU" and power:
                bit_writes[args[0].byte_index * 8 + args[0].bit_index] = 0
            elif op == "MOV" and power:
                word_writes[args[1].byte_index] = saturate(word(args[0]))
            elif op == "RES" and power:
                resets.append(args[0])

        for idx, v in bit_writes.items():
            bank.coils[idx] = v
        for idx, v in word_writes.items():
            bank.holding_registers[idx] = v
        self.edge_memory = new_edges
        for name in resets:
            if name in self.timers:
                t = self.timers[name]
                t.acc, t.dn = 0, False
            else:
                c = self.counters[name]
                c.cv, c.dn = 0, False
        self.scans += 1
        self.last_scan_changed = (
            before != self._state_key()
            or any(coils[i] != v for i, v in bit_writes.items())
            or any(holding[i] != v for i, v in word_writes.items()))
        return bank

    def _state_key(self) -> tuple:
        return (tuple((t.acc, t.dn) for t in self.timers.values()),
                tuple((c.cv, c.dn, c.prev_in) for c in self.counters.values()),
                tuple(self.edge_memory))

    def timing(self) -> bool:
        """True while some timer is accumulating (scans cannot be skipped)."""
        return any(0 < t.acc < t.preset for t in self.timers.values())


def scan(program: LadderProgram, bank: RegisterBank, dt_ms: int) -> RegisterBank:
    return program.scan(bank, dt_ms)


def referenced_inputs(program: LadderProgram) -> list[tuple[str, int]]:
    """Every (table, index) a program reads, for wiring polls."""
    out = set()
    for rung in program.rungs:
        for ins in [*_walk(rung.network), rung.output]:
            for a in ins.args:
                if isinstance(a, LadderAddress):
                    out.add(map_address(a))
    return sorted(out)

