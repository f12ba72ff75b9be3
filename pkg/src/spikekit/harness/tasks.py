"""Task runners behind the CLI subcommands. Each returns a result dict."""
from __future__ import annotations

import csv
import io
import os

import numpy as np

from .. import tensor as T
from ..architecture import ModelConfig, Spikformer
from ..errors import ConfigError, LoadError, UsageError
from ..pretrain import MaskedAutoencoder, finetune_handoff, fit_pretrain, sample_mask
from ..profiler import OpLedger, counting, report, write_report
from ..training import evaluate, fit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, make_run_dir
from .data import Dataset, load_dataset
from .plots import save_strip, write_svg

PROFILE_SAMPLES = 8


def _log_to(stream):
    if stream is None:
        return None
    return lambda row: print("  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                       for k, v in row.items()), file=stream, flush=True)


def save_model(path, model, cfg: ModelConfig, kind: str, extra: dict | None = None):
    meta = {"kind": kind, "gather_order": "row-major"}
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), cfg.to_dict(), meta)


def load_classifier(path, seed: int = 0) -> Spikformer:
    state, header = load_checkpoint(path)
    if header["meta"].get("kind") != "classifier":
        raise LoadError(f"{path} holds a {header['meta'].get('kind')!r} checkpoint, not a classifier")
    model = Spikformer(ModelConfig.from_dict(header["config"]), seed)
    model.load_state_dict(state)
    return model


def load_autoencoder(path, seed: int = 0) -> MaskedAutoencoder:
    state, header = load_checkpoint(path)
    if header["meta"].get("kind") != "pretrain":
        raise LoadError(f"{path} is not a pretraining checkpoint")
    meta = header["meta"]
    mae = MaskedAutoencoder(ModelConfig.from_dict(header["config"]), seed,
                            mask_ratio=meta.get("mask_ratio", 0.75))
    mae.load_state_dict(state)
    return mae


def profile_model(model: Spikformer, images: np.ndarray, time_steps: int | None = None,
                  batch_stats: bool = False) -> OpLedger:
    """Op ledger of one forward over ``images``.

    Eval mode by default. ``batch_stats`` normalises with the batch's own
    statistics instead, which gives realistic firing for an untrained
    model whose running statistics are still at their initial values.
    Running statistics are left untouched either way.
    """
    t = time_steps or model.cfg.time_steps
    ledger = OpLedger(samples=len(images), time_steps=t)
    was = model.training
    saved = {k: v.copy() for k, v in model.named_buffers()} if batch_stats else None
    model.train(batch_stats)
    try:
        with T.no_grad(), counting(ledger):
            model(images, t)
    finally:
        model.train(was)
        if saved is not None:
            for k, v in model.named_buffers():
                v[...] = saved[k]
    return ledger


def _data(cfg: RunConfig) -> Dataset:
    return load_dataset(cfg.dataset_spec())


def _train_model(cfg: RunConfig, ds: Dataset, run_dir, model=None, log=None):
    mcfg = cfg.model_config()
    model = model if model is not None else Spikformer(mcfg, cfg.seed)
    tc = cfg.train_config()
    metrics = os.path.join(run_dir, "metrics.tsv") if run_dir else None
    hist = fit(model, ds.arrays(), tc.epochs, tc.batch_size, tc.lr, tc.warmup_epochs,
               tc.weight_decay, cfg.time_steps[0], seed=cfg.seed, metrics_path=metrics,
               layer_decay=tc.layer_decay, target_acc=tc.target_acc, log=log)
    return model, hist


def run_train(cfg: RunConfig, stream=None) -> dict:
    run_dir = make_run_dir(cfg)
    ds = _data(cfg)
    model, hist = _train_model(cfg, ds, run_dir, log=_log_to(stream))
    ckpt = os.path.join(run_dir, "model.ckpt")
    save_model(ckpt, model, model.cfg, "classifier", {"seed": cfg.seed})
    return {"run_dir": run_dir, "checkpoint": ckpt, "history": hist,
            "train_acc": hist[-1]["eval_acc"] if hist else None}


def run_pretrain(cfg: RunConfig, stream=None) -> dict:
    mcfg = cfg.model_config()
    if mcfg.stem != "scs":
        # raises the unsupported-configuration error with the reason
        MaskedAutoencoder(mcfg, cfg.seed)
    run_dir = make_run_dir(cfg)
    ds = _data(cfg)
    mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "time_steps": 1})
    mae = MaskedAutoencoder(mcfg, cfg.seed, mask_ratio=cfg.mask_ratio)
    tc = cfg.train_config()
    hist = fit_pretrain(mae, ds.images, tc.epochs, tc.batch_size, tc.lr, tc.warmup_epochs,
                        tc.weight_decay, cfg.mask_ratio, cfg.seed,
                        metrics_path=os.path.join(run_dir, "metrics.tsv"), log=_log_to(stream))
    ckpt = os.path.join(run_dir, "pretrain.ckpt")
    save_model(ckpt, mae, mcfg, "pretrain", {"mask_ratio": cfg.mask_ratio, "seed": cfg.seed})
    return {"run_dir": run_dir, "checkpoint": ckpt, "history": hist}


def run_finetune(cfg: RunConfig, stream=None) -> dict:
    if not cfg.checkpoint:
        raise UsageError("finetune needs --checkpoint pointing at a pretraining checkpoint")
    state, header = load_checkpoint(cfg.checkpoint)
    if header["meta"].get("kind") != "pretrain":
        raise LoadError(f"{cfg.checkpoint} is not a pretraining checkpoint")
    src = header["config"]
    ds = _data(cfg)
    if "name" in cfg.model:
        mcfg = cfg.model_config()
    else:
        # architecture comes from the checkpoint; only explicit keys override it
        mcfg = ModelConfig.from_dict({**src, "num_classes": ds.classes, **cfg.model,
                                      "time_steps": cfg.time_steps[0]})
    model = finetune_handoff(state, mcfg, src, cfg.seed)
    run_dir = make_run_dir(cfg)
    model, hist = _train_model(cfg, ds, run_dir, model=model, log=_log_to(stream))
    ckpt = os.path.join(run_dir, "model.ckpt")
    save_model(ckpt, model, model.cfg, "classifier", {"seed": cfg.seed, "init": cfg.checkpoint})
    return {"run_dir": run_dir, "checkpoint": ckpt, "history": hist}


def run_eval(cfg: RunConfig, stream=None) -> dict:
    if not cfg.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model = load_classifier(cfg.checkpoint, cfg.seed)
    ds = _data(cfg)
    rows = []
    for t in cfg.time_steps:
        acc = evaluate(model, ds.arrays(), t)
        rows.append({"time_steps": t, "acc": acc})
        if stream is not None:
            print(f"T={t}\tacc={acc:.4f}", file=stream, flush=True)
    return {"rows": rows}


def run_profile(cfg: RunConfig, stream=None) -> dict:
    fresh = not cfg.checkpoint
    model = Spikformer(cfg.model_config(), cfg.seed) if fresh else load_classifier(cfg.checkpoint, cfg.seed)
    run_dir = make_run_dir(cfg)
    ds = _data(cfg)
    images = ds.images[:PROFILE_SAMPLES]
    out = {"run_dir": run_dir, "reports": {}}
    for t in cfg.time_steps:
        rep = report(profile_model(model, images, t, batch_stats=fresh))
        write_report(rep, os.path.join(run_dir, f"profile_T{t}.tsv"),
                     os.path.join(run_dir, f"profile_T{t}.json"))
        out["reports"][t] = rep
        if stream is not None:
            tot = rep["totals"]
            print(f"T={t}\tflops_g={tot['flops_g']:.6g}\tsops_g={tot['sops_g']:.6g}\t"
                  f"energy_mj={tot['energy_mj']:.6g}", file=stream, flush=True)
    return out


def run_reconstruct(cfg: RunConfig, stream=None, count: int = 4) -> dict:
    if not cfg.checkpoint:
        raise UsageError("reconstruct needs --checkpoint pointing at a pretraining checkpoint")
    mae = load_autoencoder(cfg.checkpoint, cfg.seed)
    run_dir = make_run_dir(cfg)
    ds = _data(cfg)
    images = ds.images[:count]
    mcfg = mae.cfg
    mask = sample_mask(mcfg.num_tokens, cfg.mask_ratio, cfg.seed, batch=len(images))
    mae.eval()
    recon = mae.reconstruct(images, mask)
    visible = np.broadcast_to(mask.at_size(mcfg.img_size)[:, None], images.shape)
    masked = np.where(visible, images, 0.0)
    mean, std = ds.meta["mean"], ds.meta["std"]
    paths = []
    for i in range(len(images)):
        p = os.path.join(run_dir, f"recon_{i:02d}.png")
        save_strip(p, [images[i], masked[i], recon[i]], mean, std)
        paths.append(p)
    if stream is not None:
        print(f"wrote {len(paths)} triplets to {run_dir}", file=stream)
    return {"run_dir": run_dir, "images": paths}


# sweeps

SWEEP_AXES = ("variant", "stem", "time_steps", "mask_ratio")
SWEEP_COLUMNS = ("axis", "value", "status", "acc", "flops_g", "sops_g", "ops_g", "energy_mj")


def _row(axis, value, acc, model, images, t):
    tot = report(profile_model(model, images, t))["totals"]
    return {"axis": axis, "value": value, "status": "ok", "acc": acc, "flops_g": tot["flops_g"],
            "sops_g": tot["sops_g"], "ops_g": tot["ops_g"], "energy_mj": tot["energy_mj"]}


def _parse_value(axis, v):
    if axis == "time_steps":
        return int(v)
    if axis == "mask_ratio":
        return float(v)
    return str(v)


def sweep(axis: str, values, base: RunConfig, log=None) -> list[dict]:
    """One row per value; a failing row is marked and the sweep continues.

    The time-step axis trains once at the first base T and evaluates and
    profiles the same weights at every T, which is how multi-step results
    are read off a single model.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = [_parse_value(axis, v) for v in values]
    if not values:
        return []
    ds = _data(base)
    images = ds.images[:PROFILE_SAMPLES]
    rows = []
    shared = None
    for v in values:
        try:
            if axis == "time_steps":
                if shared is None:
                    shared, _ = _train_model(base, ds, None)
                acc = evaluate(shared, ds.arrays(), v)
                row = _row(axis, v, acc, shared, images, v)
            elif axis == "mask_ratio":
                cfg = base.with_updates(mask_ratio=v, model={"stem": "scs"})
                mcfg = ModelConfig.from_dict({**cfg.model_config().to_dict(), "time_steps": 1})
                mae = MaskedAutoencoder(mcfg, cfg.seed, mask_ratio=v)
                tc = cfg.train_config()
                fit_pretrain(mae, ds.images, tc.epochs, tc.batch_size, tc.lr, tc.warmup_epochs,
                             tc.weight_decay, v, cfg.seed)
                ft = finetune_handoff(mae.state_dict(), cfg.model_config(), mcfg, cfg.seed)
                model, _ = _train_model(cfg, ds, None, model=ft)
                t = cfg.time_steps[0]
                row = _row(axis, v, evaluate(model, ds.arrays(), t), model, images, t)
            else:
                cfg = base.with_updates(model={axis: v})
                model, _ = _train_model(cfg, ds, None)
                t = cfg.time_steps[0]
                row = _row(axis, v, evaluate(model, ds.arrays(), t), model, images, t)
        except Exception as e:  # noqa: BLE001 - a failed row must not stop the sweep
            row = {"axis": axis, "value": v, "status": f"failed: {type(e).__name__}: {e}"}
        rows.append(row)
        if log:
            log(row)
    return rows


def sweep_to_tsv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in SWEEP_COLUMNS])
    return buf.getvalue()


def read_sweep_tsv(text: str) -> list[dict]:
    lines = list(csv.reader(io.StringIO(text), delimiter="\t"))
    if not lines or tuple(lines[0]) != SWEEP_COLUMNS:
        raise ValueError("not a sweep table")
    rows = []
    for line in lines[1:]:
        r = dict(zip(SWEEP_COLUMNS, line))
        for c in SWEEP_COLUMNS[3:]:
            r[c] = float(r[c]) if r[c] else None
        rows.append(r)
    return rows


def run_sweep(cfg: RunConfig, stream=None) -> dict:
    if not cfg.sweep_axis:
        raise UsageError("sweep needs --axis")
    run_dir = make_run_dir(cfg)
    rows = sweep(cfg.sweep_axis, cfg.sweep_values, cfg, log=_log_to(stream))
    with open(os.path.join(run_dir, "sweep.tsv"), "w") as f:
        f.write(sweep_to_tsv(rows))
    ok = [r for r in rows if r["status"] == "ok"]
    if ok:
        xs = [r["value"] for r in ok]
        write_svg(os.path.join(run_dir, "sweep_acc.svg"), xs, [r["acc"] for r in ok],
                  f"accuracy vs {cfg.sweep_axis}", cfg.sweep_axis, "accuracy", kind="bar")
        write_svg(os.path.join(run_dir, "sweep_ops.svg"), xs, [r["ops_g"] for r in ok],
                  f"ops vs {cfg.sweep_axis}", cfg.sweep_axis, "OPs (G)", kind="bar")
    return {"run_dir": run_dir, "rows": rows}


RUNNERS = {"train": run_train, "pretrain": run_pretrain, "finetune": run_finetune,
           "eval": run_eval, "profile": run_profile, "reconstruct": run_reconstruct,
           "sweep": run_sweep}
