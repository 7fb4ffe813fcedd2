"""Summaries of an exported bundle: latency, protocol mix and technique
coverage, as delimited tables plus matplotlib figures."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import US_PER_H, US_PER_MS, US_PER_S  # noqa: E402
from .campaign import TECHNIQUE_CATEGORY  # noqa: E402
from .scenario import TECHNIQUES  # noqa: E402
from .telemetry import iter_records  # noqa: E402

# one-way mean latency targets in milliseconds
LATENCY_TARGETS_MS = {"IT_LAN-IT_DMZ": 0.974, "OT_DMZ-OT": 1.290, "IT_LAN-OT_DMZ": 3.605}
MODBUS_MQTT_TARGET = 35.4


def read_manifest(bundle_dir) -> dict:
    path = Path(bundle_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing")
    return json.loads(path.read_text())


def latency_table(bundle_dir) -> list[dict]:
    samples: dict[str, list[float]] = defaultdict(list)
    lost: dict[str, list[float]] = defaultdict(list)
    for r in iter_records(bundle_dir, "operational"):
        b = r["body"]
        tag = b.get("tag", "")
        if r["source"] == "netperf" and tag.startswith("netperf."):
            name = tag[len("netperf."):]
            lost[name].append(b["lost"])
            if b["one_way_us"] is not None:
                samples[name].append(b["one_way_us"])
    rows = []
    for name in sorted(set(samples) | set(lost)):
        xs = samples.get(name, [])
        mean = sum(xs) / len(xs) / US_PER_MS if xs else math.nan
        target = LATENCY_TARGETS_MS.get(name)
        rows.append({
            "path": name, "probes": len(lost[name]),
            "mean_ms": round(mean, 4), "min_ms": round(min(xs) / US_PER_MS, 4) if xs else math.nan,
            "max_ms": round(max(xs) / US_PER_MS, 4) if xs else math.nan,
            "loss": round(sum(lost[name]) / len(lost[name]), 4) if lost[name] else math.nan,
            "target_ms": target if target is not None else "",
            "deviation_pct": round(100 * (mean - target) / target, 3) if target and xs else "",
        })
    return rows


def predicted_rates(doc: dict, poll_scale: float = 1.0) -> dict[str, float]:
    """Packets per second implied by the configured polling and publishing.

    Each Modbus transaction is a request and a response. MQTT counts the
    status publishes forwarded to each remote subscriber plus keepalive
    ping pairs; connection set-up is ignored.
    """
    proc = doc["process"]
    modbus = 0.0
    for p in proc["plcs"]:
        txns = len(p.get("io_reads", [[2, 800, 8], [4, 100, 4]])) + 1
        modbus += 2 * txns / (p["io_poll_ms"] / 1000 / poll_scale)
    for h in proc.get("hmis", []):
        modbus += 2 * len(h.get("reads", [[1, 800, 16]])) / (h["poll_ms"] / 1000 / poll_scale)
    mqtt = 0.0
    gw = proc.get("gateway")
    if gw:
        modbus += 2 / (gw["poll_ms"] / 1000 / poll_scale)
        plat = proc.get("platform")
        if plat:
            mqtt += 1 / (gw["publish_ms"] / 1000 / poll_scale)
            mqtt += 2 / plat["keepalive_s"]
    return {"modbus": modbus, "mqtt": mqtt, "ratio": modbus / mqtt if mqtt else math.inf}


def protocol_table(bundle_dir, window_us: int = US_PER_H) -> tuple[list[dict], dict]:
    """Modbus and MQTT packet counts per window, with the analytic
    prediction from the run's own scenario."""
    m = read_manifest(bundle_dir)
    duration = m["duration_us"]
    n = max(1, math.ceil(duration / window_us))
    counts = [{"modbus": 0, "mqtt": 0} for _ in range(n)]
    for r in iter_records(bundle_dir, "packet_payload"):
        proto = r["body"]["protocol"]
        if proto in ("modbus", "mqtt"):
            counts[min(r["t"] // window_us, n - 1)][proto] += 1
    pred = predicted_rates(m["scenario"], m.get("poll_scale", 1.0))
    rows = []
    for i, c in enumerate(counts):
        span = min(window_us, duration - i * window_us) / US_PER_S
        rows.append({"window": i, "start_s": i * window_us // US_PER_S, "modbus": c["modbus"],
                     "mqtt": c["mqtt"],
                     "ratio": round(c["modbus"] / c["mqtt"], 3) if c["mqtt"] else "",
                     "predicted_modbus": round(pred["modbus"] * span, 1),
                     "predicted_mqtt": round(pred["mqtt"] * span, 1)})
    tot_mb = sum(c["modbus"] for c in counts)
    tot_mq = sum(c["mqtt"] for c in counts)
    secs = duration / US_PER_S
    summary = {"modbus": tot_mb, "mqtt": tot_mq,
               "ratio": tot_mb / tot_mq if tot_mq else math.inf,
               "predicted_modbus": pred["modbus"] * secs, "predicted_mqtt": pred["mqtt"] * secs,
               "predicted_ratio": pred["ratio"], "target_ratio": MODBUS_MQTT_TARGET}
    return rows, summary


def coverage_table(bundle_dir) -> list[dict]:
    """Per technique: which categories carry its label and whether the
    expected category is among them."""
    seen: dict[str, dict[str, int]] = {t: defaultdict(int) for t in TECHNIQUES}
    for cat in ("network_flow", "packet_payload", "host_event", "operational"):
        for r in iter_records(bundle_dir, cat):
            lab = r["label"]
            if lab != "benign":
                seen.setdefault(lab["technique"], defaultdict(int))[cat] += 1
    rows = []
    for t in TECHNIQUES:
        cats = seen[t]
        rows.append({"technique": t, "expected": TECHNIQUE_CATEGORY[t],
                     "records": sum(cats.values()),
                     "categories": ";".join(sorted(cats)),
                     "covered": TECHNIQUE_CATEGORY[t] in cats})
    return rows


def to_delimited(rows: list[dict], delimiter: str = ",") -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter=delimiter, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def figures(out_dir, lat: list[dict], proto: list[dict], cov: list[dict]) -> list[Path]:
    out = Path(out_dir)
    paths = []
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["path"] for r in lat]
    ax.bar(names, [r["mean_ms"] for r in lat], label="measured")
    ax.scatter(names, [r["target_ms"] or math.nan for r in lat], color="k", marker="_", s=400,
               label="target", zorder=3)
    ax.set_ylabel("one-way latency (ms)")
    ax.legend()
    paths.append(out / "latency.png")
    _save(fig, paths[-1])

    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [r["window"] for r in proto]
    ax.plot(xs, [r["modbus"] for r in proto], marker="o", label="Modbus TCP")
    ax.plot(xs, [r["mqtt"] for r in proto], marker="s", label="MQTT")
    ax.set_yscale("log")
    ax.set_xlabel("window")
    ax.set_ylabel("packets")
    ax.legend()
    paths.append(out / "protocols.png")
    _save(fig, paths[-1])

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.barh([r["technique"] for r in cov], [r["records"] for r in cov],
            color=["tab:green" if r["covered"] else "tab:red" for r in cov])
    ax.set_xscale("symlog")
    ax.invert_yaxis()
    ax.set_xlabel("labelled records")
    paths.append(out / "coverage.png")
    _save(fig, paths[-1])
    return paths


def build_report(bundle_dir, out_dir=None, window_us: int = US_PER_H, delimiter: str = ",") -> dict:
    """Compute every table; write them (and figures) when ``out_dir`` is given."""
    lat = latency_table(bundle_dir)
    proto, summary = protocol_table(bundle_dir, window_us)
    cov = coverage_table(bundle_dir)
    result = {"latency": lat, "protocols": proto, "protocol_summary": summary, "coverage": cov}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ext = "tsv" if delimiter == "\t" else "csv"
        for name in ("latency", "protocols", "coverage"):
            (out / f"{name}.{ext}").write_text(to_delimited(result[name], delimiter))
        result["figures"] = [str(p) for p in figures(out, lat, proto, cov)]
    return result
