"""Optimiser, learning-rate schedule and the supervised training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .nn import Module

BASE_LR = 5e-4
BASE_BATCH = 512
CLIP_NORM = 5.0


def scaled_lr(batch_size: int, base_lr: float = BASE_LR) -> float:
    """Linear scaling rule: ``base_lr * batch / 512``."""
    return base_lr * batch_size / BASE_BATCH


class AdamW:
    """Adam with decoupled weight decay.

    ``groups`` is a list of dicts with ``params``, and optionally
    ``weight_decay`` and ``lr_scale``. Passing a plain parameter list puts
    every parameter in one group with the default decay.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        params = list(params)
        if params and isinstance(params[0], dict):
            groups = params
        else:
            groups = [{"params": params}]
        self.groups = []
        for g in groups:
            self.groups.append({
                "params": list(g["params"]),
                "weight_decay": g.get("weight_decay", weight_decay),
                "lr_scale": g.get("lr_scale", 1.0),
            })
        self.lr, self.betas, self.eps = lr, betas, eps
        self.step_count = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    @property
    def params(self):
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for g in self.groups:
            glr = lr * g["lr_scale"]
            wd = g["weight_decay"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                grad = p.grad.astype(np.float64)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros(p.shape)
                    self.v[key] = np.zeros(p.shape)
                v = self.v[key]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                if glr == 0:
                    continue
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    p.data -= (glr * wd * p.data).astype(p.dtype)
                p.data -= (glr * update).astype(p.dtype)

    def state(self) -> dict:
        names = {id(p): i for i, p in enumerate(self.params)}
        return {"step": self.step_count,
                "m": {names[k]: v for k, v in self.m.items()},
                "v": {names[k]: v for k, v in self.v.items()}}


def param_groups(model: Module, weight_decay: float = 0.05, layer_decay: float | None = None):
    """Two decay groups (matrices decay; biases, norms and scalars do not).

    With ``layer_decay`` each group is further split by depth and its
    learning rate scaled by ``layer_decay ** (L + 1 - depth)``, where the
    stem counts as depth 0 and the head as depth L + 1.
    """
    depth_of = _depth_fn(model)
    groups: dict = {}
    for name, p in model.named_parameters():
        decay = weight_decay if p.ndim >= 2 else 0.0
        if layer_decay is None:
            key, scale = (decay, 0), 1.0
        else:
            d, top = depth_of(name)
            key, scale = (decay, d), layer_decay ** (top - d)
        g = groups.setdefault(key, {"params": [], "weight_decay": decay, "lr_scale": scale})
        g["params"].append(p)
    return list(groups.values())


def _depth_fn(model):
    n_blocks = len(getattr(model, "blocks", []) or [])
    top = n_blocks + 1

    def depth(name: str):
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1, top
        if name.startswith("head."):
            return top, top
        return 0, top

    return depth


def clip_grad_norm(params, max_norm: float = CLIP_NORM) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        coef = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * coef
    return total


@dataclass
class Schedule:
    """Linear warmup to ``base_lr`` then half-cosine down to ``floor``, per iteration."""

    base_lr: float
    warmup_iters: int
    total_iters: int
    floor: float = 0.0

    def __post_init__(self):
        if self.total_iters < 1 or self.warmup_iters < 0 or self.warmup_iters > self.total_iters:
            raise ConfigError("schedule needs 0 <= warmup_iters <= total_iters and total_iters >= 1")

    @classmethod
    def from_epochs(cls, base_lr, warmup_epochs, total_epochs, iters_per_epoch, floor=0.0):
        return cls(base_lr, int(warmup_epochs * iters_per_epoch),
                   int(total_epochs * iters_per_epoch), floor)


def lr_at(schedule: Schedule, iteration: float) -> float:
    s = schedule
    if iteration < s.warmup_iters:
        return s.base_lr * iteration / s.warmup_iters
    span = s.total_iters - s.warmup_iters
    progress = 1.0 if span == 0 else min(max((iteration - s.warmup_iters) / span, 0.0), 1.0)
    return s.floor + (s.base_lr - s.floor) * 0.5 * (1 + math.cos(math.pi * progress))


def train_step(model: Module, batch, optim: AdamW, lr: float | None = None,
               time_steps: int | None = None, clip: float | None = CLIP_NORM) -> float:
    """One forward/backward/update on ``(images, labels)``; returns the loss."""
    images, labels = batch
    optim.zero_grad()
    logits = model(images, time_steps)
    loss = T.cross_entropy(logits, labels)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NumericError(f"non-finite training loss {value} at step {optim.step_count}")
    loss.backward()
    if clip is not None:
        clip_grad_norm(optim.params, clip)
    optim.step(lr)
    return value


def predict(model: Module, images, time_steps: int | None = None, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for an image array, computed in batches without autodiff."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(model(images[i:i + batch_size], time_steps).data)
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(model: Module, data, time_steps: int | None = None, batch_size: int = 64) -> float:
    """Top-1 accuracy on ``data = (images, labels)``."""
    images, labels = data
    if len(labels) == 0:
        return 0.0
    logits = predict(model, images, time_steps, batch_size)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


METRIC_COLUMNS = ("epoch", "lr", "train_loss", "eval_acc")


def fit(model: Module, train, epochs: int, batch_size: int = 16, lr: float = 1e-3,
        warmup_epochs: float = 0, weight_decay: float = 0.05, time_steps: int | None = None,
        eval_data=None, seed: int = 0, metrics_path=None, layer_decay: float | None = None,
        target_acc: float | None = None, optim: AdamW | None = None, floor: float = 0.0,
        log=None) -> list[dict]:
    """Train for ``epochs`` and return one metrics dict per epoch.

    ``eval_data`` defaults to the training set. With ``target_acc`` the
    loop stops once eval accuracy reaches it.
    """
    images, labels = train
    rng = np.random.default_rng(seed)
    iters = max(1, math.ceil(len(labels) / batch_size))
    sched = Schedule.from_epochs(lr, min(warmup_epochs, epochs), epochs, iters, floor)
    if optim is None:
        optim = AdamW(param_groups(model, weight_decay, layer_decay), lr=lr, weight_decay=weight_decay)
    eval_data = eval_data if eval_data is not None else train
    history = []
    writer = None
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    try:
        if fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
        it = 0
        for epoch in range(epochs):
            model.train()
            losses = []
            cur = sched.base_lr
            for idx in iterate_batches(len(labels), batch_size, rng):
                cur = lr_at(sched, it)
                losses.append(train_step(model, (images[idx], labels[idx]), optim, cur, time_steps))
                it += 1
            acc = evaluate(model, eval_data, time_steps)
            row = {"epoch": epoch + 1, "lr": cur, "train_loss": float(np.mean(losses)), "eval_acc": acc}
            history.append(row)
            if writer:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
                fh.flush()
            if log:
                log(row)
            if target_acc is not None and acc >= target_acc:
                break
    finally:
        if fh:
            fh.close()
    return history
