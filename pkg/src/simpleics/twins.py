"""Kinematic digital twins of the two factory scenes.

Each scene owns a ``RegisterBank`` and is meant to be served over Modbus:
sensors appear as discrete inputs, analog values and counters as input
registers, actuators as coils. Positions are millimetres along a conveyor,
time steps are milliseconds.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .protocols import modbus as mb
from .softplc.image import RegisterBank, serve_modbus, volts_to_counts

LOW_THRESHOLD_V = 4.0
HIGH_THRESHOLD_V = 7.0
COUNTER_WRAP = 0x10000
EXIT_LOG = 10_000


class TwinError(ValueError):
    pass


def classify_weight(weight_v: float, low_v: float = LOW_THRESHOLD_V,
                    high_v: float = HIGH_THRESHOLD_V) -> int:
    """Exit conveyor for a box: 1 below ``low_v``, 2 up to ``high_v``, else 3.
    Boundary values go to the heavier exit."""
    if not 0.0 <= weight_v <= 10.0:
        raise TwinError(f"weight {weight_v} V outside 0-10 V")
    if weight_v < low_v:
        return 1
    if weight_v < high_v:
        return 2
    return 3


@dataclass
class ConveyorItem:
    id: int
    position_mm: float
    line: str
    weight_v: float = 0.0
    created_at: int = 0
    weighed: bool = False


@dataclass
class HistorianSample:
    t: int
    tag: str
    value: float
    attrs: dict = field(default_factory=dict)


class Historian:
    """Time series store; rejects samples that would break per-tag order.

    With a sink attached, samples are handed on and not kept (long runs
    would otherwise hold every sample in memory) unless ``retain`` is set.
    """

    def __init__(self, sink: Callable[[HistorianSample], None] | None = None,
                 retain: bool | None = None):
        self.samples: list[HistorianSample] = []
        self._last: dict[str, int] = {}
        self.sink = sink
        self.retain = sink is None if retain is None else retain

    def record(self, t: int, tag: str, value: float, **attrs) -> HistorianSample:
        last = self._last.get(tag)
        if last is not None and t <= last:
            raise TwinError(f"historian tag {tag}: sample at {t} not after {last}")
        self._last[tag] = t
        s = HistorianSample(t, tag, value, attrs)
        if self.retain:
            self.samples.append(s)
        if self.sink is not None:
            self.sink(s)
        return s

    def series(self, tag: str) -> list[HistorianSample]:
        return [s for s in self.samples if s.tag == tag]


class Scene:
    """Shared plumbing: clock, bank, historian, fault latch, reset edge."""

    RESET_COIL = 805

    def __init__(self, name: str, tick_ms: int, rng, historian: Historian | None = None):
        self.name = name
        self.tick_ms = tick_ms
        self.rng = rng
        self.bank = RegisterBank()
        self.historian = historian or Historian()
        self.t_us = 0
        self.fault = False
        self.fault_reason = ""
        self._reset_prev = 0
        self._next_id = 1

    def coil(self, idx: int) -> bool:
        return bool(self.bank.coils[idx])

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def _raise_fault(self, reason: str) -> None:
        if not self.fault:
            self.fault = True
            self.fault_reason = reason
            self.historian.record(self.t_us, f"{self.name}.fault", 1.0, reason=reason)

    def apply_controls(self) -> None:
        reset = self.bank.coils[self.RESET_COIL]
        if reset and not self._reset_prev:
            self.reset_counters()
        self._reset_prev = reset

    def reset_counters(self) -> None:
        raise NotImplementedError

    def step(self, dt_ms: int) -> "Scene":
        if dt_ms != self.tick_ms:
            raise TwinError(f"{self.name}: step must use the physics tick ({self.tick_ms} ms)")
        self.t_us += dt_ms * 1000
        self.apply_controls()
        self._advance(dt_ms / 1000.0)
        self._update_sensors()
        return self

    def _advance(self, dt_s: float) -> None:
        raise NotImplementedError

    def _update_sensors(self) -> None:
        raise NotImplementedError


def _move_queue(items: list[ConveyorItem], dist: float, end: float, gap: float) -> None:
    """Advance items (sorted front-most first) on an accumulating conveyor."""
    limit = end
    for it in items:
        it.position_mm = min(it.position_mm + dist, limit)
        limit = it.position_mm - gap


@dataclass
class SorterParams:
    infeed_length_mm: float = 1600.0
    scale_start_mm: float = 1000.0
    infeed_speed_mm_s: float = 400.0
    sort_length_mm: float = 1200.0
    diverter_mm: tuple[float, float] = (400.0, 800.0)
    sort_speed_mm_s: float = 1000.0
    item_length_mm: float = 200.0
    spawn_interval_ms: int = 3000
    weight_min_v: float = 1.0
    weight_max_v: float = 9.0


class SorterScene(Scene):
    """Weigh boxes on a scale conveyor and pop them off at one of three exits.

    Discrete inputs: 800 box at entry, 801 box on scale, 802/803 box at
    diverter A/B, 804 box at end. Input registers: 100 scale reading in
    counts, 101-103 exit counters. Coils: 800 infeed run, 801 sort run,
    802/803 pop-up wheels A/B, 805 counter reset.
    """

    INFEED, SORT, WHEEL_A, WHEEL_B = 800, 801, 802, 803

    def __init__(self, rng, params: SorterParams | None = None, tick_ms: int = 100,
                 historian: Historian | None = None, name: str = "sorter"):
        super().__init__(name, tick_ms, rng, historian)
        self.p = params or SorterParams()
        self.infeed: list[ConveyorItem] = []
        self.sort: list[ConveyorItem] = []
        self.exit_counts = [0, 0, 0]
        self.created = 0
        # most recent exits as (item, weight_v, exit); the historian has them all
        self.exited: deque[tuple[int, float, int]] = deque(maxlen=EXIT_LOG)
        self._since_spawn_ms = self.p.spawn_interval_ms

    def in_flight(self) -> int:
        return len(self.infeed) + len(self.sort)

    def reset_counters(self) -> None:
        self.exit_counts = [0, 0, 0]
        self.historian.record(self.t_us, f"{self.name}.reset", 1.0)

    def _spawn(self) -> None:
        if self.infeed and self.infeed[-1].position_mm < self.p.item_length_mm:
            self._raise_fault("collision at infeed entry")
            return
        v = self.rng.uniform(self.p.weight_min_v, self.p.weight_max_v)
        item = ConveyorItem(self._new_id(), 0.0, "infeed", round(v, 4), self.t_us)
        self.infeed.append(item)
        self.created += 1

    def _exit(self, item: ConveyorItem, k: int) -> None:
        self.exit_counts[k - 1] += 1
        self.exited.append((item.id, item.weight_v, k))
        self.historian.record(self.t_us, f"{self.name}.exit", float(k), item=item.id)

    def _advance(self, dt_s: float) -> None:
        p = self.p
        if self.coil(self.INFEED) and not self.fault:
            self._since_spawn_ms += self.tick_ms
            if self._since_spawn_ms >= p.spawn_interval_ms:
                self._since_spawn_ms = 0
                self._spawn()
        if self.coil(self.SORT) and not self.fault:
            dist = p.sort_speed_mm_s * dt_s
            remaining = []
            for it in self.sort:
                prev = it.position_mm
                it.position_mm = prev + dist
                a, b = p.diverter_mm
                if prev < a <= it.position_mm and self.coil(self.WHEEL_A):
                    self._exit(it, 1)
                elif prev < b <= it.position_mm and self.coil(self.WHEEL_B):
                    self._exit(it, 2)
                elif it.position_mm >= p.sort_length_mm:
                    self._exit(it, 3)
                else:
                    remaining.append(it)
            self.sort = remaining
        if self.coil(self.INFEED) and not self.fault:
            _move_queue(self.infeed, p.infeed_speed_mm_s * dt_s, p.infeed_length_mm,
                        p.item_length_mm)
            while self.infeed and self.infeed[0].position_mm >= p.infeed_length_mm:
                if not self.coil(self.SORT):
                    break
                if self.sort and self.sort[-1].position_mm < p.item_length_mm:
                    break
                it = self.infeed.pop(0)
                it.position_mm = 0.0
                it.line = "sort"
                self.sort.append(it)
        for it in self.infeed:
            if not it.weighed and it.position_mm >= p.scale_start_mm:
                it.weighed = True
                self.historian.record(self.t_us, f"{self.name}.weight_v", it.weight_v, item=it.id)

    def _update_sensors(self) -> None:
        p = self.p
        di = self.bank.discrete_inputs
        on_scale = [it for it in self.infeed if it.position_mm >= p.scale_start_mm]
        di[800] = int(any(it.position_mm < p.item_length_mm for it in self.infeed))
        di[801] = int(bool(on_scale))
        a, b = p.diverter_mm
        di[802] = int(any(abs(it.position_mm - a) < p.item_length_mm / 2 for it in self.sort))
        di[803] = int(any(abs(it.position_mm - b) < p.item_length_mm / 2 for it in self.sort))
        di[804] = int(any(it.position_mm > p.sort_length_mm - p.item_length_mm for it in self.sort))
        ir = self.bank.input_registers
        ir[100] = volts_to_counts(on_scale[0].weight_v) if on_scale else 0
        for k in range(3):
            ir[101 + k] = self.exit_counts[k] % COUNTER_WRAP


@dataclass
class LineParams:
    infeed_length_mm: float = 2000.0
    infeed_speed_mm_s: float = 250.0
    exit_length_mm: float = 1000.0
    merge_length_mm: float = 2000.0
    exit_speed_mm_s: float = 500.0
    item_length_mm: float = 300.0
    spawn_interval_ms: int = 6000
    cnc_cycle_ms: int = 4000


@dataclass
class _Station:
    name: str
    infeed: list[ConveyorItem] = field(default_factory=list)
    cnc: ConveyorItem | None = None
    cnc_left_ms: int = 0
    out: list[ConveyorItem] = field(default_factory=list)
    count: int = 0
    since_spawn_ms: int = 0


class ProductionLineScene(Scene):
    """Two slab-to-lid lines (infeed, robot-fed CNC, outfeed) merging into
    one exit conveyor.

    Discrete inputs: 800/802 slab waiting at line 1/2 CNC, 801/803 CNC 1/2
    busy, 804 lid at exit. Input registers: 100/101 lids produced per station,
    102 lids through the merged exit. Coils: 800/801 infeed run, 802/803 CNC
    load enable, 804 outfeed and merge conveyors, 805 counter reset.
    """

    def __init__(self, rng, params: LineParams | None = None, tick_ms: int = 100,
                 historian: Historian | None = None, name: str = "line"):
        super().__init__(name, tick_ms, rng, historian)
        self.p = params or LineParams()
        self.stations = [_Station("line1"), _Station("line2")]
        for i, st in enumerate(self.stations):
            st.since_spawn_ms = self.p.spawn_interval_ms - i * (self.p.spawn_interval_ms // 2)
        self.merge: list[ConveyorItem] = []
        self.exit_count = 0
        self.created = 0

    def in_flight(self) -> int:
        return sum(len(s.infeed) + len(s.out) + (s.cnc is not None) for s in self.stations) + len(self.merge)

    def reset_counters(self) -> None:
        for st in self.stations:
            st.count = 0
        self.exit_count = 0
        self.historian.record(self.t_us, f"{self.name}.reset", 1.0)

    def _advance(self, dt_s: float) -> None:
        p = self.p
        exit_run = self.coil(804) and not self.fault
        if exit_run:
            _move_queue(self.merge, p.exit_speed_mm_s * dt_s, p.merge_length_mm, p.item_length_mm)
            while self.merge and self.merge[0].position_mm >= p.merge_length_mm:
                self.merge.pop(0)
                self.exit_count += 1
                self.historian.record(self.t_us, f"{self.name}.exit.count", float(self.exit_count))
        for i, st in enumerate(self.stations):
            run = self.coil(800 + i) and not self.fault
            if exit_run:
                _move_queue(st.out, p.exit_speed_mm_s * dt_s, p.exit_length_mm, p.item_length_mm)
                while st.out and st.out[0].position_mm >= p.exit_length_mm:
                    if self.merge and self.merge[-1].position_mm < p.item_length_mm:
                        break
                    it = st.out.pop(0)
                    it.position_mm, it.line = 0.0, "merge"
                    self.merge.append(it)
            if st.cnc is not None:
                st.cnc_left_ms -= self.tick_ms
                if st.cnc_left_ms <= 0:
                    if st.out and st.out[-1].position_mm < p.item_length_mm:
                        st.cnc_left_ms = 0
                    else:
                        lid = st.cnc
                        lid.position_mm, lid.line = 0.0, f"{st.name}.out"
                        st.out.append(lid)
                        st.cnc = None
                        st.count += 1
                        self.historian.record(self.t_us, f"{self.name}.{st.name}.count", float(st.count))
            if run:
                st.since_spawn_ms += self.tick_ms
                if st.since_spawn_ms >= p.spawn_interval_ms:
                    st.since_spawn_ms = 0
                    if st.infeed and st.infeed[-1].position_mm < p.item_length_mm:
                        self._raise_fault(f"collision at {st.name} infeed")
                    else:
                        st.infeed.append(ConveyorItem(self._new_id(), 0.0, st.name, created_at=self.t_us))
                        self.created += 1
                _move_queue(st.infeed, p.infeed_speed_mm_s * dt_s, p.infeed_length_mm, p.item_length_mm)
            if (st.cnc is None and st.infeed and st.infeed[0].position_mm >= p.infeed_length_mm
                    and self.coil(802 + i) and not self.fault):
                st.cnc = st.infeed.pop(0)
                st.cnc.line = f"{st.name}.cnc"
                st.cnc_left_ms = p.cnc_cycle_ms

    def _update_sensors(self) -> None:
        p = self.p
        di = self.bank.discrete_inputs
        for i, st in enumerate(self.stations):
            di[800 + 2 * i] = int(bool(st.infeed) and st.infeed[0].position_mm >= p.infeed_length_mm)
            di[801 + 2 * i] = int(st.cnc is not None)
        di[804] = int(any(it.position_mm > p.merge_length_mm - p.item_length_mm for it in self.merge))
        ir = self.bank.input_registers
        ir[100] = self.stations[0].count % COUNTER_WRAP
        ir[101] = self.stations[1].count % COUNTER_WRAP
        ir[102] = self.exit_count % COUNTER_WRAP

    @property
    def station_counts(self) -> list[int]:
        return [st.count for st in self.stations]


RUN_COILS = {SorterScene: (800, 801), ProductionLineScene: (800, 801, 802, 803, 804)}


def hmi_command(cmd: str, scene: Scene, txn_id: int = 1) -> tuple[Scene, list[mb.ModbusFrame]]:
    """Apply an operator start/stop/reset through Modbus writes on the scene.

    Returns the scene and the request frames that were served, so callers can
    log them as externally written commands.
    """
    frames: list[mb.ModbusFrame] = []

    def send(f: mb.ModbusFrame) -> None:
        resp = serve_modbus(f, scene.bank)
        if resp.is_exception:
            raise TwinError(f"{cmd}: Modbus exception {resp.exception_code}")
        frames.append(f)
        scene.apply_controls()

    coils = RUN_COILS[type(scene)]
    if cmd in ("start", "stop"):
        bits = [1 if cmd == "start" else 0] * (coils[-1] - coils[0] + 1)
        send(mb.write_coils(txn_id, 1, coils[0], bits))
    elif cmd == "reset":
        send(mb.write_coil(txn_id, 1, Scene.RESET_COIL, True))
        send(mb.write_coil(txn_id + 1, 1, Scene.RESET_COIL, False))
    else:
        raise TwinError(f"unknown HMI command {cmd!r}")
    scene._update_sensors()
    return scene, frames
