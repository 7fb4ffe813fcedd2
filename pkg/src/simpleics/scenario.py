"""Scenario documents: load, validate, save, and resolve effective settings.

A scenario is a JSON document. Validation is total: every problem is
reported with its field path rather than stopping at the first one.
"""
from __future__ import annotations

import copy
import ipaddress
import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from . import US_PER_DAY, US_PER_H, US_PER_MS, US_PER_S
from .hostworld import DEFAULT_FREQUENCIES, GRADES, ROLES
from .netfabric import SEGMENT_IDS
from .softplc.ladder import LadderError, LadderProgram

SEED_ENV = "SIMPLEICS_SEED"
DEFAULT_SEED = 1
TECHNIQUES = ("T1566.001", "T1071.001", "T1082", "T1046", "T1562", "T1003.001", "T1087.002",
              "T1135", "T1021.002", "T1078", "T0808", "T0813", "T0807", "T1547", "T0801",
              "T0892", "T0836", "T0832", "T0831")
PROFILES = ("default", "stress")
SUSCEPTIBILITY = ("none", "clicks_phish", "runs_binary")

_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(us|ms|s|m|h|d)?\s*$")
_UNITS = {"us": 1, "ms": US_PER_MS, "s": US_PER_S, "m": 60 * US_PER_S, "h": US_PER_H, "d": US_PER_DAY}


class ScenarioError(ValueError):
    """Validation failure carrying every (path, message) pair found."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


def parse_duration(text) -> int:
    """'90s', '15m', '1h', '5d', '250ms' or bare seconds -> microseconds."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        if text <= 0:
            raise ValueError("duration must be positive")
        return int(text * US_PER_S)
    m = _DURATION.match(str(text))
    if not m:
        raise ValueError(f"bad duration {text!r}")
    us = int(float(m.group(1)) * _UNITS[m.group(2) or "s"])
    if us <= 0:
        raise ValueError("duration must be positive")
    return us


_port = {"type": "integer", "minimum": 1, "maximum": 65535}
_str = {"type": "string", "minLength": 1}
_strs = {"type": "array", "items": _str}

SCHEMA = {
    "type": "object",
    "required": ["segments", "links", "firewalls", "hosts", "credentials", "process", "campaign"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "run": {"type": "object", "properties": {
            "duration": {"type": ["string", "number"]},
            "physics_tick_ms": {"type": "integer", "minimum": 1},
            "plc_scan_ms": {"type": "integer", "minimum": 1},
            "work_hours": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
            "clock_origin_h": {"type": "integer", "minimum": 0, "maximum": 23},
            "probe_interval_s": {"type": "number", "exclusiveMinimum": 0}}},
        "segments": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["id", "cidr"],
            "properties": {"id": {"enum": list(SEGMENT_IDS)}, "cidr": _str,
                           "vlans": _strs, "monitor": {"type": "boolean"}}}},
        "links": {"type": "array", "items": {
            "type": "object", "required": ["a", "b", "latency_us"],
            "properties": {"a": _str, "b": _str,
                           "latency_us": {"type": "integer", "exclusiveMinimum": 0},
                           "jitter_us": {"type": "integer", "minimum": 0},
                           "bandwidth_kbps": {"type": "integer", "exclusiveMinimum": 0}}}},
        "firewalls": {"type": "array", "items": {
            "type": "object", "required": ["id", "rules"],
            "properties": {"id": _str, "rules": {"type": "array", "items": {
                "type": "object", "required": ["rule_id", "src", "dst"],
                "properties": {"rule_id": _str, "src": _str, "dst": _str,
                               "transport": {"enum": ["tcp", "udp", "any"]},
                               "dst_port": {"oneOf": [_port, {"type": "null"}]},
                               "action": {"enum": ["allow", "deny"]}}}}}}},
        "taps": {"type": "array", "items": {"enum": list(SEGMENT_IDS)}},
        "hosts": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["id", "address", "segment"],
            "properties": {"id": _str, "address": _str, "segment": {"enum": list(SEGMENT_IDS)},
                           "open_ports": {"type": "array", "items": {
                               "type": "array", "minItems": 2, "maxItems": 2,
                               "prefixItems": [{"enum": ["tcp", "udp"]}, _port]}},
                           "os": _str, "domain": _str, "role": {"enum": list(ROLES)},
                           "user": _str, "allowed_principals": _strs,
                           "susceptibility": {"type": "array", "items": {"enum": list(SUSCEPTIBILITY)}}}}},
        "trusts": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _str}},
        "credentials": {"type": "array", "items": {
            "type": "object", "required": ["principal", "domain", "secret"],
            "properties": {"principal": _str, "domain": _str, "secret": _str,
                           "grade": {"enum": list(GRADES)}, "stored_on": _strs}}},
        "npc": {"type": "object", "properties": {
            "frequencies": {"type": "object", "propertyNames": {"enum": list(ROLES)},
                            "additionalProperties": {"type": "object", "additionalProperties": {
                                "type": "number", "minimum": 0}}},
            "read_delay_s": {"type": "array", "items": {"type": "number", "minimum": 0},
                             "minItems": 2, "maxItems": 2}}},
        "process": {"type": "object", "required": ["plcs", "twins"], "properties": {
            "plcs": {"type": "array", "items": {"type": "object",
                     "required": ["id", "host", "twin", "io_poll_ms"],
                     "properties": {"id": _str, "host": _str, "twin": _str, "program": _str,
                                    "program_text": {"type": "string"},
                                    "io_poll_ms": {"type": "integer", "minimum": 1},
                                    "io_reads": {"type": "array", "minItems": 1, "items": {
                                        "type": "array", "minItems": 3, "maxItems": 3,
                                        "prefixItems": [{"enum": [2, 4]},
                                                        {"type": "integer", "minimum": 0},
                                                        {"type": "integer", "minimum": 1, "maximum": 125}]}},
                                    "holding": {"type": "object", "additionalProperties": {
                                        "type": "integer", "minimum": 0, "maximum": 65535}}}}},
            "twins": {"type": "array", "items": {"type": "object", "required": ["id", "host", "scene"],
                      "properties": {"id": _str, "host": _str,
                                     "scene": {"enum": ["production_line", "sorter"]},
                                     "params": {"type": "object"}}}},
            "hmis": {"type": "array", "items": {"type": "object", "required": ["id", "host", "plc", "poll_ms"],
                     "properties": {"poll_ms": {"type": "integer", "minimum": 1},
                                    "reads": {"type": "array", "items": {
                                        "type": "array", "minItems": 3, "maxItems": 3,
                                        "items": {"type": "integer", "minimum": 0}}}}}},
            "gateway": {"type": "object", "required": ["host", "plc", "poll_ms", "publish_ms"]},
            "platform": {"type": "object", "required": ["host", "broker", "keepalive_s"]},
            "historian": {"type": "object"},
            "autostart": {"type": "boolean"}}},
        "probes": {"type": "array", "items": {"type": "object", "required": ["name", "src", "dst"]}},
        "profiles": {"type": "object", "additionalProperties": {"type": "object", "properties": {
            "npc_scale": {"type": "number", "exclusiveMinimum": 0},
            "poll_scale": {"type": "number", "exclusiveMinimum": 0}}}},
        "campaign": {"type": "object", "required": ["id", "phases"], "properties": {
            "id": _str, "enabled": {"type": "boolean"},
            "start_s": {"type": "number", "minimum": 0},
            "ability_gap_s": {"type": "array", "minItems": 2, "maxItems": 2},
            "phase_gap_s": {"type": "number", "minimum": 0},
            "retries": {"type": "integer", "minimum": 0},
            "retry_delay_s": {"type": "number", "minimum": 0},
            "beacon_s": {"type": "number", "exclusiveMinimum": 0},
            "suppress_s": {"type": "number", "minimum": 0},
            "collect_s": {"type": "number", "exclusiveMinimum": 0},
            "attacker": _str, "victim": _str,
            "phases": {"type": "array", "minItems": 1, "items": {
                "type": "object", "required": ["name", "abilities"],
                "properties": {"name": _str, "abilities": {"type": "array", "items": {"enum": list(TECHNIQUES)}}}}},
            "malicious_thresholds": {"type": "array", "minItems": 2, "maxItems": 2,
                                     "items": {"type": "integer", "minimum": 0, "maximum": 65535}}}},
    },
}


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def program_source(plc: dict) -> str:
    if "program_text" in plc:
        return plc["program_text"]
    name = plc.get("program", "")
    return resources.files("simpleics").joinpath("data", name).read_text()


def _semantic(doc: dict) -> list[tuple[str, str]]:
    errs: list[tuple[str, str]] = []
    nets = {}
    for i, s in enumerate(doc.get("segments", [])):
        try:
            net = ipaddress.IPv4Network(s["cidr"])
        except ValueError as exc:
            errs.append((f"segments[{i}].cidr", str(exc)))
            continue
        if s["id"] in nets:
            errs.append((f"segments[{i}].id", f"duplicate segment {s['id']}"))
        for other, onet in nets.items():
            if net.overlaps(onet):
                errs.append((f"segments[{i}].cidr", f"overlaps {other}"))
        nets[s["id"]] = net
        for j, v in enumerate(s.get("vlans", [])):
            try:
                if not ipaddress.IPv4Network(v).subnet_of(net):
                    errs.append((f"segments[{i}].vlans[{j}]", f"not inside {s['cidr']}"))
            except ValueError as exc:
                errs.append((f"segments[{i}].vlans[{j}]", str(exc)))
    fw_ids = {f["id"] for f in doc.get("firewalls", [])}
    for i, ln in enumerate(doc.get("links", [])):
        for end in ("a", "b"):
            if ln[end] not in nets and ln[end] not in fw_ids:
                errs.append((f"links[{i}].{end}", f"unknown node {ln[end]}"))
        if ln.get("jitter_us", 0) >= ln["latency_us"]:
            errs.append((f"links[{i}].jitter_us", "jitter must be below latency"))
    for i, fw in enumerate(doc.get("firewalls", [])):
        ids = set()
        for j, r in enumerate(fw["rules"]):
            if r["rule_id"] in ids:
                errs.append((f"firewalls[{i}].rules[{j}].rule_id", "duplicate rule id"))
            ids.add(r["rule_id"])
            for k in ("src", "dst"):
                try:
                    ipaddress.IPv4Network(r[k])
                except ValueError as exc:
                    errs.append((f"firewalls[{i}].rules[{j}].{k}", str(exc)))
    hosts, addrs = {}, set()
    for i, h in enumerate(doc.get("hosts", [])):
        if h["id"] in hosts:
            errs.append((f"hosts[{i}].id", f"duplicate host {h['id']}"))
        hosts[h["id"]] = h
        try:
            a = ipaddress.IPv4Address(h["address"])
        except ValueError as exc:
            errs.append((f"hosts[{i}].address", str(exc)))
            continue
        if a in addrs:
            errs.append((f"hosts[{i}].address", f"duplicate address {a}"))
        addrs.add(a)
        net = nets.get(h["segment"])
        if net is not None and a not in net:
            errs.append((f"hosts[{i}].address", f"{a} not inside {h['segment']} {net}"))
        elif net is None and h["segment"] in SEGMENT_IDS:
            errs.append((f"hosts[{i}].segment", f"segment {h['segment']} not declared"))
    for i, t in enumerate(doc.get("taps", [])):
        if t not in nets:
            errs.append((f"taps[{i}]", f"segment {t} not declared"))
    if len(set(doc.get("taps", []))) != len(doc.get("taps", [])):
        errs.append(("taps", "a segment may carry only one tap"))
    for i, c in enumerate(doc.get("credentials", [])):
        for j, hid in enumerate(c.get("stored_on", [])):
            if hid not in hosts:
                errs.append((f"credentials[{i}].stored_on[{j}]", f"unknown host {hid}"))
    proc = doc.get("process", {})
    twins = {t["id"]: t for t in proc.get("twins", [])}
    plcs = {}
    for i, t in enumerate(proc.get("twins", [])):
        if t["host"] not in hosts:
            errs.append((f"process.twins[{i}].host", f"unknown host {t['host']}"))
    for i, p in enumerate(proc.get("plcs", [])):
        plcs[p["id"]] = p
        if p["host"] not in hosts:
            errs.append((f"process.plcs[{i}].host", f"unknown host {p['host']}"))
        if p["twin"] not in twins:
            errs.append((f"process.plcs[{i}].twin", f"unknown twin {p['twin']}"))
        if "program" not in p and "program_text" not in p:
            errs.append((f"process.plcs[{i}]", "needs program or program_text"))
            continue
        try:
            LadderProgram.parse(program_source(p))
        except LadderError as exc:
            errs.append((f"process.plcs[{i}].program", str(exc)))
        except (FileNotFoundError, OSError):
            errs.append((f"process.plcs[{i}].program", f"no bundled program {p.get('program')!r}"))
        for k in p.get("holding", {}):
            if not k.isdigit() or int(k) > 1023:
                errs.append((f"process.plcs[{i}].holding.{k}", "register index must be 0-1023"))
    for i, h in enumerate(proc.get("hmis", [])):
        if h["host"] not in hosts:
            errs.append((f"process.hmis[{i}].host", f"unknown host {h['host']}"))
        if h["plc"] not in plcs:
            errs.append((f"process.hmis[{i}].plc", f"unknown plc {h['plc']}"))
    for key in ("gateway", "platform"):
        g = proc.get(key)
        if g and g["host"] not in hosts:
            errs.append((f"process.{key}.host", f"unknown host {g['host']}"))
    if proc.get("gateway") and proc["gateway"]["plc"] not in plcs:
        errs.append(("process.gateway.plc", f"unknown plc {proc['gateway']['plc']}"))
    for i, p in enumerate(doc.get("probes", [])):
        for k in ("src", "dst"):
            if p[k] not in hosts:
                errs.append((f"probes[{i}].{k}", f"unknown host {p[k]}"))
    run = doc.get("run", {})
    if "duration" in run:
        try:
            parse_duration(run["duration"])
        except ValueError as exc:
            errs.append(("run.duration", str(exc)))
    wh = run.get("work_hours")
    if wh and not 0 <= wh[0] < wh[1] <= 24:
        errs.append(("run.work_hours", "need 0 <= start < end <= 24"))
    camp = doc.get("campaign", {})
    for k in ("attacker", "victim"):
        if k in camp and camp[k] not in hosts:
            errs.append((f"campaign.{k}", f"unknown host {camp[k]}"))
    seen = set()
    for i, ph in enumerate(camp.get("phases", [])):
        for j, a in enumerate(ph["abilities"]):
            if a in seen:
                errs.append((f"campaign.phases[{i}].abilities[{j}]", f"{a} scheduled twice"))
            seen.add(a)
    gap = camp.get("ability_gap_s")
    if gap and not 0 <= gap[0] <= gap[1]:
        errs.append(("campaign.ability_gap_s", "need 0 <= low <= high"))
    return errs


def validate(doc) -> list[tuple[str, str]]:
    """Every validation problem as (field path, message); empty when valid."""
    if not isinstance(doc, dict):
        return [("<root>", "scenario must be a JSON object")]
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = [(_path(e.absolute_path), e.message)
            for e in sorted(v.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))]
    if errs:
        return errs
    return _semantic(doc)


def load(path=None) -> dict:
    """Read and validate a scenario file; the bundled default when ``path`` is None."""
    if path is None:
        text = resources.files("simpleics").joinpath("data", "default_scenario.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([("<root>", f"invalid JSON: {exc}")]) from None
    errs = validate(doc)
    if errs:
        raise ScenarioError(errs)
    return doc


def save(doc: dict, path) -> None:
    errs = validate(doc)
    if errs:
        raise ScenarioError(errs)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass
class Settings:
    """Effective run settings after applying precedence rules."""
    seed: int
    duration_us: int
    profile: str = "default"
    campaign: bool = True
    npc_scale: float = 1.0
    poll_scale: float = 1.0


def resolve(doc: dict, seed: int | None = None, duration=None, profile: str | None = None,
            campaign: bool | None = None, env=None) -> Settings:
    """Flags beat the document, the document beats SIMPLEICS_SEED, which
    beats the built-in default."""
    env = os.environ if env is None else env
    if seed is None:
        if "seed" in doc:
            seed = doc["seed"]
        elif env.get(SEED_ENV):
            try:
                seed = int(env[SEED_ENV])
            except ValueError:
                raise ScenarioError([(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}")]) from None
        else:
            seed = DEFAULT_SEED
    dur = parse_duration(duration if duration is not None else doc.get("run", {}).get("duration", "1h"))
    profile = profile or "default"
    if profile not in PROFILES:
        raise ScenarioError([("profile", f"unknown profile {profile!r}")])
    scales = doc.get("profiles", {}).get(profile, {}) if profile != "default" else {}
    enabled = doc["campaign"].get("enabled", True) if campaign is None else campaign
    return Settings(int(seed), dur, profile, enabled,
                    float(scales.get("npc_scale", 1.0)), float(scales.get("poll_scale", 1.0)))


def npc_frequencies(doc: dict, scale: float = 1.0) -> dict[str, dict[str, float]]:
    freqs = copy.deepcopy(DEFAULT_FREQUENCIES)
    for role, acts in doc.get("npc", {}).get("frequencies", {}).items():
        freqs[role] = dict(acts)
    return {r: {a: f * scale for a, f in acts.items()} for r, acts in freqs.items()}
