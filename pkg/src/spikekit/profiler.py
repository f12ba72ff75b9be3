"""Operation accounting and theoretical energy estimation.

Layers report into the active :class:`OpLedger` while a :func:`counting`
block is open. Float multiply-accumulates are booked as FLOPs, spike-driven
accumulates as SOPs; energy is ``FLOPs * e_mac + SOPs * e_ac``.

The default constants (4.6 pJ per MAC, 0.9 pJ per accumulate) are the
45 nm figures commonly used for SNN energy estimates, e.g.
77e6 FLOPs -> 354.2 uJ and 0.66e6 SOPs -> 0.594 uJ.
"""
from __future__ import annotations

import csv
import io
import json
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UsageError

# Ops excluded from energy totals unless include_norm_pool is set.
AUX_OPS = frozenset({"batch_norm", "maxpool"})


@dataclass
class OpRecord:
    layer: str
    op: str
    flops: int = 0
    sops: int = 0
    spikes: int = 0
    elements: int = 0
    calls: int = 0

    @property
    def firing_rate(self) -> float | None:
        if not self.elements:
            return None
        return self.spikes / self.elements


@dataclass
class OpLedger:
    """Per-layer FLOP/SOP counts accumulated over instrumented forwards.

    ``samples`` and ``time_steps`` describe the batch the counts cover so
    that reports can normalise to one image and to one time step.
    """

    records: dict = field(default_factory=dict)
    samples: int = 0
    time_steps: int = 1

    def add(self, layer: str, op: str, flops: int = 0, sops: int = 0,
            spikes: int = 0, elements: int = 0) -> OpRecord:
        key = (layer, op)
        rec = self.records.get(key)
        if rec is None:
            rec = self.records[key] = OpRecord(layer, op)
        rec.flops += int(flops)
        rec.sops += int(sops)
        rec.spikes += int(spikes)
        rec.elements += int(elements)
        rec.calls += 1
        return rec

    def __iter__(self):
        return iter(self.records.values())

    def __len__(self):
        return len(self.records)

    def find(self, layer_prefix: str = "", op: str | None = None) -> list:
        return [r for r in self if r.layer.startswith(layer_prefix) and (op is None or r.op == op)]

    def totals(self, include_aux: bool = False) -> tuple[int, int]:
        flops = sops = 0
        for r in self:
            if r.op in AUX_OPS and not include_aux:
                continue
            flops += r.flops
            sops += r.sops
        return flops, sops

    def scaled(self, c: float) -> "OpLedger":
        out = OpLedger(samples=self.samples, time_steps=self.time_steps)
        for (layer, op), r in self.records.items():
            out.records[(layer, op)] = OpRecord(layer, op, r.flops * c, r.sops * c,
                                                r.spikes, r.elements, r.calls)
        return out

    def to_dict(self) -> dict:
        return {"samples": self.samples, "time_steps": self.time_steps,
                "records": [asdict(r) for r in self]}

    @classmethod
    def from_dict(cls, d: dict) -> "OpLedger":
        out = cls(samples=d.get("samples", 0), time_steps=d.get("time_steps", 1))
        for r in d["records"]:
            out.records[(r["layer"], r["op"])] = OpRecord(**r)
        return out


_active = threading.local()


def active_ledger() -> OpLedger | None:
    return getattr(_active, "ledger", None)


@contextmanager
def counting(ledger: OpLedger | None = None):
    """Route layer op counts into ``ledger`` for the duration of the block."""
    ledger = ledger if ledger is not None else OpLedger()
    prev = active_ledger()
    _active.ledger = ledger
    try:
        yield ledger
    finally:
        _active.ledger = prev


def spike_count_input(x: np.ndarray) -> tuple[bool, int]:
    """Classify an activation as spike-driven and count its accumulate triggers.

    Non-negative integer-valued tensors (binary spikes, or spike sums from
    additive residuals) drive accumulates: each unit of value is one event.
    Anything else is a float activation.
    """
    if x.size == 0:
        return True, 0
    if x.min() < 0 or not np.all(x == np.round(x)):
        return False, 0
    return True, int(x.sum())


def book_weighted_layer(layer: str, op: str, x: np.ndarray, macs_dense: int, events_fanout: int):
    """Record a linear/conv layer: SOPs when ``x`` carries spikes, FLOPs otherwise.

    ``events_fanout`` is the number of accumulates triggered by a single
    input event (out-features for a linear layer).
    """
    ledger = active_ledger()
    if ledger is None:
        return
    is_spike, events = spike_count_input(x)
    nnz = int(np.count_nonzero(x))
    if is_spike:
        ledger.add(layer, op, sops=events * events_fanout, spikes=nnz, elements=x.size)
    else:
        ledger.add(layer, op, flops=macs_dense)


@dataclass(frozen=True)
class EnergyModel:
    e_mac: float = 4.6  # pJ per float multiply-accumulate
    e_ac: float = 0.9   # pJ per accumulate

    def __post_init__(self):
        if self.e_mac <= 0 or self.e_ac <= 0:
            raise ValueError("energy constants must be positive")


_UNITS = {"pJ": 1.0, "nJ": 1e3, "uJ": 1e6, "mJ": 1e9, "J": 1e12}


def energy_from_counts(flops: float, sops: float, model: EnergyModel = EnergyModel(),
                       unit: str = "uJ") -> float:
    return (flops * model.e_mac + sops * model.e_ac) / _UNITS[unit]


def estimate_energy(ledger: OpLedger, model: EnergyModel = EnergyModel(), unit: str = "uJ",
                    include_aux: bool = False) -> float:
    """Theoretical energy of everything booked in ``ledger``."""
    if not len(ledger):
        raise UsageError("estimate_energy needs a populated ledger")
    flops, sops = ledger.totals(include_aux)
    return energy_from_counts(flops, sops, model, unit)


def firing_stats(ledger: OpLedger) -> dict:
    """Per-layer firing rate of the spike inputs seen by each booked op."""
    return {f"{r.layer}:{r.op}": r.firing_rate for r in ledger if r.firing_rate is not None}


def report(ledger: OpLedger, model: EnergyModel = EnergyModel(), include_aux: bool = False) -> dict:
    """Per-layer table and totals, normalised per sample.

    Counts are given in units of 1e9 (``OPs (G)``) and power in mJ, both
    for the full T-step inference and for a single time step.
    """
    n = max(ledger.samples, 1)
    t = max(ledger.time_steps, 1)
    rows = []
    for r in ledger:
        if r.op in AUX_OPS and not include_aux:
            continue
        rows.append({
            "layer": r.layer,
            "op": r.op,
            "flops_g": r.flops / n / 1e9,
            "sops_g": r.sops / n / 1e9,
            "firing_rate": r.firing_rate,
            "energy_mj": energy_from_counts(r.flops / n, r.sops / n, model, "mJ"),
        })
    flops = sum(x["flops_g"] for x in rows)
    sops = sum(x["sops_g"] for x in rows)
    energy = sum(x["energy_mj"] for x in rows)
    totals = {
        "flops_g": flops, "sops_g": sops, "ops_g": flops + sops, "energy_mj": energy,
        "per_step_ops_g": (flops + sops) / t, "per_step_energy_mj": energy / t,
    }
    return {"samples": ledger.samples, "time_steps": t,
            "e_mac_pj": model.e_mac, "e_ac_pj": model.e_ac,
            "rows": rows, "totals": totals}


REPORT_COLUMNS = ("layer", "op", "flops_g", "sops_g", "firing_rate", "energy_mj")


def report_to_tsv(rep: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rep["rows"]:
        w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    tot = rep["totals"]
    w.writerow(["TOTAL", "", _fmt(tot["flops_g"]), _fmt(tot["sops_g"]), "", _fmt(tot["energy_mj"])])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_report_tsv(text: str) -> dict:
    """Parse :func:`report_to_tsv` output back into rows and totals."""
    lines = list(csv.reader(io.StringIO(text), delimiter="\t"))
    header, body = lines[0], lines[1:]
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report header {header}")
    rows, totals = [], None
    for line in body:
        if line[0] == "TOTAL":
            totals = {"flops_g": float(line[2]), "sops_g": float(line[3]), "energy_mj": float(line[5])}
            continue
        rows.append({
            "layer": line[0], "op": line[1], "flops_g": float(line[2]), "sops_g": float(line[3]),
            "firing_rate": float(line[4]) if line[4] else None, "energy_mj": float(line[5]),
        })
    return {"rows": rows, "totals": totals}


def write_report(rep: dict, tsv_path, json_path=None) -> None:
    with open(tsv_path, "w") as f:
        f.write(report_to_tsv(rep))
    if json_path is not None:
        with open(json_path, "w") as f:
            json.dump(rep, f, indent=2)
