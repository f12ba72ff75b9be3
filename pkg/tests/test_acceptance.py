"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line on completion and the run ends with a
summary block listing all of them.
"""
import functools
import sys
import time

import numpy as np
import pytest

from spikekit import tensor as T
from spikekit.architecture import (ModelConfig, Spikformer, analytic_param_count,
                                   config_from_name, imagenet_config)
from spikekit.attention import AttentionConfig, SpikingSelfAttention, ssa_product
from spikekit.gradcheck import check_gradients, check_input_gradient
from spikekit.harness.data import DatasetSpec, load_dataset
from spikekit.harness.tasks import load_classifier, save_model
from spikekit.neuron import LifConfig, lif_forward, relaxed, spike_fn
from spikekit.nn import activation_trace
from spikekit.pretrain import (MaskedAutoencoder, MaskPyramid, decoder_param_count, encode_visible,
                               finetune_handoff, fit_pretrain, sample_mask)
from spikekit.profiler import EnergyModel, OpLedger, counting, estimate_energy
from spikekit.tensor import Tensor
from spikekit.training import AdamW, evaluate, fit, predict

from conftest import ACCEPTANCE, binary
from test_tensor import PRIMITIVES

DESK = dict(depth=2, dim=64, heads=4, time_steps=4, img_size=32, patch_size=4, num_classes=3)


def criterion(num, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            ok, detail = False, ""
            try:
                detail = fn(*args, **kwargs) or ""
                ok = True
            except BaseException as exc:
                detail = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
                raise
            finally:
                secs = time.perf_counter() - start
                ACCEPTANCE.append((num, title, ok, secs, detail))
                print(f"criterion {num}: {'PASS' if ok else 'FAIL'} {title} ({secs:.1f}s) {detail}",
                      file=sys.stderr)
        return run
    return wrap


@criterion(1, "energy golden numbers")
def test_c01_energy_golden_numbers():
    start = time.perf_counter()
    cases = [(77e6, 0, "354.2"), (0, 0.66e6, "0.594"), (0, 1.1e6, "0.990"), (0, 1.3e6, "1.170")]
    got = []
    for flops, sops, expected in cases:
        led = OpLedger(samples=1)
        led.add("model", "matmul", flops=int(flops), sops=int(sops))
        uj = estimate_energy(led, EnergyModel(4.6, 0.9), "uJ")
        text = f"{uj:.{len(expected.split('.')[1])}f}"
        got.append(text)
        assert text == expected
    assert time.perf_counter() - start < 1.0
    return "uJ " + "/".join(got)


@criterion(2, "SSA order equivalence")
def test_c02_ssa_order_equivalence():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    for _ in range(1000):
        n, d = rng.integers(1, 33), rng.integers(1, 17)
        q, k, v = (binary(rng, (n, d), rng.random()) for _ in range(3))
        a = ssa_product(q, k, v, "qk_first")
        b = ssa_product(q, k, v, "kv_first")
        assert np.issubdtype(a.dtype, np.integer) and np.array_equal(a, b)
        ref = q.astype(np.int64) @ k.T.astype(np.int64) @ v.astype(np.int64)
        assert np.array_equal(a, ref)
    secs = time.perf_counter() - start
    assert secs < 10
    return "1000 instances"


class _Spy(np.ndarray):
    """ndarray that logs every ufunc applied to it or to arrays derived from it."""

    log: list = []

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raw = [np.asarray(x) if isinstance(x, _Spy) else x for x in inputs]
        if "out" in kwargs:
            kwargs["out"] = tuple(np.asarray(o) for o in kwargs["out"])
        _Spy.log.append((ufunc.__name__, method,
                         tuple(np.asarray(x).dtype.kind for x in raw if hasattr(x, "dtype"))))
        res = getattr(ufunc, method)(*raw, **kwargs)
        return res.view(_Spy) if isinstance(res, np.ndarray) else res


def _brute_sops(q, k, v):
    """Gated accumulates of (Q K^T) V done one scalar at a time."""
    n, d = q.shape
    count = 0
    for i in range(n):
        for j in range(n):
            for c in range(d):
                if q[i, c]:
                    count += 1  # adds k[j, c] into score[i, j]
    for i in range(n):
        for j in range(n):
            for e in range(d):
                if v[j, e]:
                    count += 1  # adds score[i, j] into out[i, e]
    return count


@criterion(3, "multiplication-free SSA")
def test_c03_multiplication_free_ssa(monkeypatch):
    import spikekit.attention as attention_mod
    import spikekit.spike as spike_mod

    captured = []
    real_pack, real_product = spike_mod.pack_bits, attention_mod.ssa_product

    def spy_pack(arr):
        return real_pack(arr).view(_Spy)

    def spy_product(q, k, v, order="qk_first"):
        captured.append((np.array(q), np.array(k), np.array(v)))
        out = real_product(q, k, v, order)
        assert np.asarray(out).dtype.kind in "iu"
        return out

    monkeypatch.setattr(spike_mod, "pack_bits", spy_pack)
    monkeypatch.setattr(attention_mod, "ssa_product", spy_product)
    _Spy.log = []
    m = Spikformer(ModelConfig(**{**DESK, "dim": 32, "heads": 2, "time_steps": 2}), seed=0)
    x = np.random.default_rng(3).standard_normal((2, 3, 32, 32))
    with T.no_grad(), counting() as led:
        m(x)  # train-mode batch statistics: the fresh model fires
    assert len(captured) == 2
    float_ops = [e for e in _Spy.log if "f" in e[2] or "c" in e[2]]
    mults = [e for e in _Spy.log if e[0] in ("multiply", "matmul", "true_divide", "divide", "power")]
    assert _Spy.log and not float_ops and not mults, (float_ops[:3], mults[:3])
    recorded = sum(r.sops for r in led if r.op.startswith("ssa_"))
    brute = 0
    for q, k, v in captured:
        for idx in np.ndindex(q.shape[:-2]):
            brute += _brute_sops(q[idx], k[idx], v[idx])
    assert recorded == brute and brute > 0
    kinds = sorted({e[0] for e in _Spy.log})
    return f"ufuncs={','.join(kinds)} sops={recorded}"


@criterion(4, "pre-SN SSA attention non-negative")
def test_c04_non_negative():
    rng = np.random.default_rng(4)
    attn = SpikingSelfAttention(AttentionConfig(32, 4), rng=rng)
    attn.keep_intermediates = True
    lowest = np.inf
    with T.no_grad():
        for i in range(1000):
            x = rng.standard_normal((2, 1, int(rng.integers(1, 33)), 32)) * rng.uniform(0.5, 4)
            if i % 2:
                attn.eval()
            else:
                attn.train()
            attn(Tensor(x))
            pre_sn = attn.last_product * attn.cfg.scale
            lowest = min(lowest, pre_sn.min())
            assert pre_sn.min() >= 0
    return f"min={lowest}"


def _network_gradcheck(stem, seed):
    cfg = ModelConfig(depth=2, dim=16, heads=2, time_steps=2, img_size=16, patch_size=4,
                      stem=stem, lif={"detach_reset": False})
    m = Spikformer(cfg, seed=seed)
    x = np.random.default_rng(seed).standard_normal((2, 3, 16, 16))
    labels = np.array([0, 2])
    with relaxed():
        return check_gradients(lambda: T.cross_entropy(m(x), labels), m.parameters(),
                               n_coords=50, eps=1e-5, seed=seed)


@criterion(5, "gradient checks")
def test_c05_gradient_checks():
    rng = np.random.default_rng(5)
    worst = {}
    with T.default_dtype(np.float64):
        for name, fn in PRIMITIVES.items():
            worst[name] = check_input_gradient(fn, rng.standard_normal((2, 4, 5)), n_coords=50).max_rel_error
        w = rng.standard_normal((4, 3, 3, 3))
        worst["conv2d"] = check_input_gradient(
            lambda x: T.conv2d(x, Tensor(w), stride=2, padding=1), rng.standard_normal((2, 3, 7, 7)),
            n_coords=50).max_rel_error
        g, b = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
        worst["batch_norm"] = check_input_gradient(
            lambda x: T.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True),
            rng.standard_normal((4, 3, 3, 3)), n_coords=50).max_rel_error
        lw, lb = Tensor(rng.standard_normal(5) + 1), Tensor(rng.standard_normal(5))
        worst["layer_norm"] = check_input_gradient(
            lambda x: T.layer_norm(x, lw, lb),
            rng.standard_normal((3, 4, 5)), n_coords=50).max_rel_error
        worst["maxpool2d"] = check_input_gradient(
            lambda x: T.maxpool2d(x, 2), rng.standard_normal((2, 2, 6, 6)), n_coords=50).max_rel_error
        lab = rng.integers(0, 5, 6)
        worst["cross_entropy"] = check_input_gradient(
            lambda x: T.cross_entropy(x, lab), rng.standard_normal((6, 5)), n_coords=30).max_rel_error
        with relaxed():
            worst["spike"] = check_input_gradient(
                spike_fn, rng.standard_normal((4, 5)), n_coords=20).max_rel_error
            for mode in ("hard", "soft"):
                cfg = LifConfig(reset_mode=mode, detach_reset=False)
                worst[f"lif_{mode}"] = check_input_gradient(
                    lambda x: lif_forward(x, cfg), rng.standard_normal((4, 3, 5)) * 2,
                    n_coords=50).max_rel_error
            for stem, seed in (("sps", 0), ("scs", 1)):
                r = _network_gradcheck(stem, seed)
                assert r.coords >= 50
                worst[f"network_{stem}"] = r.max_rel_error
    bad = {k: v for k, v in worst.items() if not v <= 1e-3}
    assert not bad, bad
    top = max(worst, key=worst.get)
    return f"{len(worst)} checks, worst {top}={worst[top]:.1e}"


@criterion(6, "mask leakage")
def test_c06_mask_leakage():
    cfg = ModelConfig(stem="scs", img_size=64, patch_size=16, dim=32, heads=2, depth=2, time_steps=1)
    enc = Spikformer(cfg, seed=6)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3, 64, 64))
    mask = sample_mask(16, 0.75, seed=6, batch=4)
    hidden = ~np.broadcast_to(mask.at_size(64)[:, None], x.shape)
    with T.no_grad():
        ref = encode_visible(x, mask, enc).data
        assert ref.any()
        for _ in range(5):
            x2 = x.copy()
            x2[hidden] = rng.standard_normal(int(hidden.sum())) * rng.uniform(1, 100)
            out = encode_visible(x2, mask, enc).data
            assert out.tobytes() == ref.tobytes()
    return f"{int(hidden.sum())} masked pixels perturbed x5"


@criterion(7, "mask arithmetic")
def test_c07_mask_arithmetic():
    mask = sample_mask(196, 0.75, seed=7)
    assert mask.num_masked == 147 and mask.num_visible == 49
    base = mask.base
    for factor, level in mask.levels(16).items():
        assert np.array_equal(level, np.kron(base, np.ones((factor, factor), dtype=bool)))
    batched = sample_mask(196, 0.75, seed=7, batch=3)
    assert (batched.base.reshape(3, -1).sum(1) == 49).all()
    return "147 masked / 49 visible"


def _desk_train(variant):
    data = load_dataset(DatasetSpec(samples=60, seed=8))
    m = Spikformer(ModelConfig(**{**DESK, "variant": variant}), seed=8)
    hist = fit(m, data.arrays(), 50, batch_size=10, lr=2e-3, warmup_epochs=2, target_acc=0.95, seed=8)
    return hist[-1]["eval_acc"], len(hist)


@criterion(8, "trainability sanity")
def test_c08_trainability():
    start = time.perf_counter()
    results = {v: _desk_train(v) for v in ("ssa", "a_softmax")}
    secs = time.perf_counter() - start
    assert all(acc >= 0.95 for acc, _ in results.values()), results
    assert secs < 30 * 60
    return " ".join(f"{v}: acc={a:.3f}@ep{e}" for v, (a, e) in results.items())


@criterion(9, "pretrain then finetune beats frozen random probe")
def test_c09_pretrain_finetune():
    cfg = ModelConfig(**{**DESK, "stem": "scs", "dim": 32, "heads": 2, "time_steps": 1})
    train = load_dataset(DatasetSpec(samples=60, seed=9))
    test = load_dataset(DatasetSpec(samples=60, seed=99))
    mae = MaskedAutoencoder(cfg, seed=9, decoder_dim=32, decoder_depth=1, decoder_heads=2)
    fit_pretrain(mae, train.images, 5, batch_size=10, lr=2e-3, warmup_epochs=1, seed=9)
    tuned = finetune_handoff(mae.state_dict(), cfg, cfg, seed=9)
    fit(tuned, train.arrays(), 10, batch_size=10, lr=2e-3, warmup_epochs=1, seed=9)
    probe = Spikformer(cfg, seed=9)
    head_only = AdamW(probe.head.parameters(), lr=2e-3, weight_decay=0.0)
    fit(probe, train.arrays(), 10, batch_size=10, lr=2e-3, warmup_epochs=1, seed=9, optim=head_only)
    a_ft, a_probe = evaluate(tuned, test.arrays()), evaluate(probe, test.arrays())
    assert a_ft > a_probe, (a_ft, a_probe)
    return f"finetune={a_ft:.3f} probe={a_probe:.3f}"


@criterion(10, "parameter-count oracle")
def test_c10_param_counts():
    big = analytic_param_count(imagenet_config("spikformer-8-512"))
    cifar = analytic_param_count(config_from_name("spikformer-4-384", num_classes=10,
                                                  img_size=32, patch_size=4))
    dec = decoder_param_count(512, 16)
    assert abs(big / 29.68e6 - 1) <= 0.02
    assert abs(cifar / 9.32e6 - 1) <= 0.02
    assert abs(dec / 3.41e6 - 1) <= 0.05
    return f"8-512={big:,} 4-384={cifar:,} decoder={dec:,}"


@criterion(11, "IAND binarity")
def test_c11_iand_binarity():
    cfg = ModelConfig(stem="scs", residual="iand", depth=8, dim=64, heads=8, time_steps=2,
                      img_size=32, patch_size=4)
    m = Spikformer(cfg, seed=11)
    rng = np.random.default_rng(11)
    layers, active = set(), 0
    with T.no_grad():
        for _ in range(4):
            x = rng.standard_normal((25, 3, 32, 32))
            with activation_trace() as rec:
                m.features(x)
            for name, a in rec:
                layers.add(name)
                assert np.isin(a, (0.0, 1.0)).all(), name
                active += int(a.any())
    assert len(layers) > 8 * 5 and active > 0
    return f"{len(layers)} traced layers over 100 inputs"


@criterion(12, "checkpoint round trip")
def test_c12_checkpoint_roundtrip(tmp_path):
    data = load_dataset(DatasetSpec(samples=20, seed=12))
    m = Spikformer(ModelConfig(**{**DESK, "dim": 32, "heads": 2}), seed=12)
    fit(m, data.arrays(), 1, batch_size=10)
    path = tmp_path / "model.ckpt"
    save_model(path, m, m.cfg, "classifier")
    back = load_classifier(path)
    a, b = predict(m, data.images), predict(back, data.images)
    assert a.tobytes() == b.tobytes()
    return f"{a.size} logits identical"
