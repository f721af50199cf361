"""RMSprop, the step-decay learning-rate schedule and the toy training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import metrics as M
from .model import ModelConfig, ModelParams, forward_model, init_params, loss_and_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerState:
    acc: Mapping[str, np.ndarray]
    lr: float
    rho: float = 0.9
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], lr: float, rho: float = 0.9,
              eps: float = 1e-8) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, lr, rho, eps, 0)


def rmsprop_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 state: OptimizerState):
    """One RMSprop update; returns new ``(params, state)`` and leaves inputs alone.

    acc' = rho * acc + (1 - rho) * g**2
    theta' = theta - lr * g / (sqrt(acc') + eps)
    """
    if set(params) != set(grads) or set(params) != set(state.acc):
        raise ValueError("params, grads and accumulators must share names")
    new_p, new_acc = {}, {}
    for k in params:
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(params[k]):
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {np.shape(params[k])}")
        a = state.rho * state.acc[k] + (1.0 - state.rho) * g * g
        new_acc[k] = a
        new_p[k] = params[k] - state.lr * g / (np.sqrt(a) + state.eps)
    return new_p, replace(state, acc=new_acc, step=state.step + 1)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    decay_factor: float = 10.0
    decay_every: int = 2            # epochs
    batch_size: int = 10
    steps: int = 200
    weights: M.LossWeights = field(default_factory=M.LossWeights)
    t_steps: int = 4
    seed: int = 0
    rho: float = 0.9
    eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)
    workers: int = 1

    def __post_init__(self):
        if not (self.lr > 0 and self.decay_factor > 0):
            raise ValueError("lr and decay_factor must be positive")
        for name in ("decay_every", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.model.t_steps != self.t_steps:
            object.__setattr__(self, "model", replace(self.model, t_steps=self.t_steps))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training config keys {sorted(extra)}")
        if "weights" in d:
            w = d["weights"]
            d["weights"] = M.LossWeights(*w) if isinstance(w, (list, tuple)) else M.LossWeights(**w)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate divided by ``decay_factor`` once per ``decay_every`` epochs."""
    return cfg.lr / cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    nss: float
    cc: float
    kl: float


HISTORY_FIELDS = ("step", "epoch", "lr", "loss", "nss", "cc", "kl")


def history_csv(history: Sequence[StepRecord]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(HISTORY_FIELDS)
    for r in history:
        wr.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss), repr(r.nss), repr(r.cc), repr(r.kl)])
    return buf.getvalue()


def _sample_grads(params, sample, w):
    image, den, fix = sample
    try:
        return loss_and_grads(params, image, den, fix, w)
    except M.DegenerateInputError as e:
        return e


def batch_gradient(params: ModelParams, batch: Sequence, w: M.LossWeights, workers: int = 1):
    """Per-sample mean of loss, components and gradients over usable samples.

    Samples run concurrently when ``workers > 1``; the reduction always
    follows batch order, so the result does not depend on scheduling.
    Returns None when every sample is degenerate.
    """
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _sample_grads(params, s, w), batch))
    else:
        results = [_sample_grads(params, s, w) for s in batch]
    loss, comps, grads, n = 0.0, {}, None, 0
    for k, res in enumerate(results):
        if isinstance(res, Exception):
            log.warning("skipping degenerate sample %d of batch: %s", k, res)
            continue
        l, c, g = res
        loss += l
        for name, v in c.items():
            comps[name] = comps.get(name, 0.0) + v
        grads = {n_: a.copy() for n_, a in g.items()} if grads is None else {
            n_: grads[n_] + g[n_] for n_ in grads}
        n += 1
    if n == 0:
        return None
    return loss / n, {k: v / n for k, v in comps.items()}, {k: v / n for k, v in grads.items()}


def train_loop(config: TrainConfig, dataset: Sequence, params: ModelParams | None = None):
    """Run ``config.steps`` RMSprop steps; returns ``(params, history)``.

    Each epoch visits the dataset in a seeded random order, cut into
    batches of ``min(batch_size, len(dataset))``.  The learning rate
    follows :func:`learning_rate` of the current epoch.  ``history``
    records the pre-update batch loss of every step.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training needs at least one sample")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config.seed, config.model)
    bs = min(config.batch_size, len(dataset))
    per_epoch = math.ceil(len(dataset) / bs)
    state = OptimizerState.fresh(params.tensors, config.lr, config.rho, config.eps)
    history: list[StepRecord] = []
    order = None
    for step in range(config.steps):
        epoch, slot = divmod(step, per_epoch)
        if slot == 0:
            order = rng.permutation(len(dataset))
        state = replace(state, lr=learning_rate(config, epoch))
        batch = [dataset[i] for i in order[slot * bs:(slot + 1) * bs]]
        res = batch_gradient(params, batch, config.weights, config.workers)
        if res is None:
            log.warning("step %d: every sample in the batch is degenerate; no update", step)
            history.append(StepRecord(step, epoch, state.lr, *(float("nan"),) * 4))
            continue
        loss, comps, grads = res
        history.append(StepRecord(step, epoch, state.lr, loss,
                                  comps.get("nss", float("nan")), comps.get("cc", float("nan")),
                                  comps.get("kl", float("nan"))))
        new, state = rmsprop_step(params.tensors, grads, state)
        params = params.replace(new)
    return params, history


def dataset_scores(params: ModelParams, dataset: Sequence) -> dict:
    """Mean NSS, CC and KL of the model's predictions over ``dataset``."""
    vals = {"nss": [], "cc": [], "kl": []}
    for image, den, fix in dataset:
        pred = forward_model(params, image)
        vals["nss"].append(M.nss(pred, fix))
        vals["cc"].append(M.cc(pred, den))
        vals["kl"].append(M.kl_div(pred, den))
    return {k: float(np.mean(v)) for k, v in vals.items()}
