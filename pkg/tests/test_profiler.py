import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikekit import tensor as T
from spikekit.architecture import ModelConfig, Spikformer
from spikekit.errors import UsageError
from spikekit.nn import Conv2d, Linear
from spikekit.profiler import (EnergyModel, OpLedger, counting, energy_from_counts,
                               estimate_energy, firing_stats, read_report_tsv, report,
                               report_to_tsv, write_report)
from spikekit.tensor import Tensor

from conftest import binary


def ledger(flops=0, sops=0):
    led = OpLedger(samples=1)
    led.add("x", "matmul", flops=flops, sops=sops)
    return led


@pytest.mark.parametrize("flops,sops,expected", [
    (77e6, 0, "354.2"), (0, 0.66e6, "0.594"), (0, 1.1e6, "0.990"), (0, 1.3e6, "1.170"),
])
def test_reference_energy_numbers(flops, sops, expected):
    e = estimate_energy(ledger(int(flops), int(sops)), EnergyModel(4.6, 0.9), "uJ")
    assert f"{e:.{len(expected.split('.')[1])}f}" == expected


def test_zero_ops_zero_energy_and_empty_error():
    assert estimate_energy(ledger()) == 0
    with pytest.raises(UsageError):
        estimate_energy(OpLedger())
    with pytest.raises(ValueError):
        EnergyModel(e_mac=0)


@given(st.integers(0, 10**9), st.integers(0, 10**9), st.floats(0.1, 10))
@settings(max_examples=50, deadline=None)
def test_energy_linear(f, s, c):
    base = energy_from_counts(f, s)
    assert energy_from_counts(f * c, s * c) == pytest.approx(base * c, rel=1e-12)
    led = ledger(f, s)
    if f or s:
        assert estimate_energy(led.scaled(c)) == pytest.approx(estimate_energy(led) * c, rel=1e-12)


def test_aux_ops_excluded_by_default():
    led = ledger(100, 10)
    led.add("bn", "batch_norm", flops=1000)
    assert led.totals() == (100, 10)
    assert led.totals(include_aux=True) == (1100, 10)


def test_linear_sops_rates():
    lin = Linear(6, 5)
    lin.name = "fc"
    with counting() as led:
        lin(Tensor(np.zeros((4, 6))))
    r = led.find("fc")[0]
    assert r.sops == 0 and r.firing_rate == 0
    with counting() as led:
        lin(Tensor(np.ones((4, 6))))
    r = led.find("fc")[0]
    assert r.sops == 4 * 6 * 5 and r.firing_rate == 1
    with counting() as led:
        lin(Tensor(np.full((4, 6), 0.5)))
    r = led.find("fc")[0]
    assert r.flops == 4 * 6 * 5 and r.sops == 0


def brute_conv_sops(x, out_ch, k, stride, pad):
    """Count accumulates executed by an event-driven conv: per spike, per output it reaches."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    count = 0
    for n in range(b):
        for ic in range(c):
            for i in range(h):
                for j in range(w):
                    if not x[n, ic, i, j]:
                        continue
                    for oi in range(ho):
                        for oj in range(wo):
                            di, dj = i + pad - oi * stride, j + pad - oj * stride
                            if 0 <= di < k and 0 <= dj < k:
                                count += int(x[n, ic, i, j]) * out_ch
    return count


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0)])
def test_conv_sops_brute_force(rng, stride, pad):
    conv = Conv2d(3, 4, 3 if stride == 1 else 2, stride, pad)
    conv.name = "c"
    x = binary(rng, (2, 3, 6, 6), 0.3)
    with counting() as led:
        conv(Tensor(x))
    assert led.find("c")[0].sops == brute_conv_sops(x, 4, conv.k, stride, pad)


def test_firing_stats_all_zero_all_one():
    lin = Linear(4, 2)
    lin.name = "fc"
    with counting() as led:
        lin(Tensor(np.zeros((3, 4))))
    assert firing_stats(led) == {"fc:linear": 0.0}


def test_report_totals_and_roundtrip(tmp_path, rng):
    m = Spikformer(ModelConfig(depth=1, dim=16, heads=2, time_steps=2))
    # train mode: batch statistics give the untrained model nonzero firing
    with T.no_grad(), counting(OpLedger(samples=2, time_steps=2)) as led:
        m(rng.standard_normal((2, 3, 32, 32)))
    rep = report(led)
    rows = rep["rows"]
    tot = rep["totals"]
    assert tot["sops_g"] == pytest.approx(sum(r["sops_g"] for r in rows))
    assert tot["energy_mj"] == pytest.approx(sum(r["energy_mj"] for r in rows))
    assert tot["per_step_ops_g"] == pytest.approx(tot["ops_g"] / 2)
    back = read_report_tsv(report_to_tsv(rep))
    assert back["rows"] == rows
    assert back["totals"]["energy_mj"] == tot["energy_mj"]
    write_report(rep, tmp_path / "r.tsv", tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["totals"] == tot
    assert OpLedger.from_dict(led.to_dict()).totals() == led.totals()


def test_ssa_cheaper_than_vsa_on_same_input(rng):
    x = rng.standard_normal((2, 3, 32, 32))
    totals = {}
    for variant in ("ssa", "vsa"):
        m = Spikformer(ModelConfig(depth=1, dim=32, heads=2, time_steps=2, variant=variant), seed=0)
        with T.no_grad(), counting() as led:
            m(x)
        qkv = [r for r in led if r.layer.endswith(".qkv")]
        totals[variant] = sum(r.flops + r.sops for r in qkv)
        rates = [r.firing_rate for r in qkv if r.firing_rate is not None]
        if variant == "ssa":
            assert rates and max(rates) < 1
    assert totals["ssa"] < totals["vsa"]
