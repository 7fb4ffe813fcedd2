"""Deterministic virtual-time simulator of a segmented IT/OT/IIoT enterprise
network with an APT campaign engine and labelled telemetry export."""

__version__ = "0.1.0"

US_PER_MS = 1_000
US_PER_S = 1_000_000
US_PER_H = 3_600 * US_PER_S
US_PER_DAY = 24 * US_PER_H
