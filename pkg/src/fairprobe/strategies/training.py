"""Seeded training loops and the trained-model container."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .._io import atomic_path
from ..dataio import DatasetBundle, class_weights, get_task, kfold_indices
from ..errors import ConfigError, DataError, DimensionError
from ..numerics import OptimizerState, Params, optimizer_step
from ..probes import (
    HeadKind,
    MoEParams,
    ProbeParams,
    ProjectionParams,
    init_moe,
    init_probe,
    init_projection,
    load_checkpoint,
    moe_forward,
    predict_labels,
    probe_forward,
    projection_forward,
    save_checkpoint,
)
from .config import BATCH_GRID, DOMAIN_AWARE, LR_GRID, StrategyConfig
from .objectives import ADVERSARIES, Batch, adversary_objective, encode, evaluate_objective

log = logging.getLogger(__name__)

KIND_OF = {"wce": HeadKind.PROBE, "groupdro": HeadKind.PROBE, "dann": HeadKind.PROJECTED,
           "fairdisco": HeadKind.PROJECTED, "fades": HeadKind.FADES, "moe": HeadKind.MOE}


@dataclass
class TrainedModel:
    strategy: str
    config: StrategyConfig
    params: dict[str, np.ndarray]
    domains: tuple[str, ...]
    feature_dim: int
    num_classes: int
    history: list[dict[str, float]] = field(default_factory=list)
    q_history: list[np.ndarray] = field(default_factory=list)
    scope: str | None = None  # dataset id for individual models

    @property
    def kind(self) -> HeadKind:
        return KIND_OF[self.strategy]

    @property
    def task(self) -> str:
        return self.config.task

    def _p64(self) -> Params:
        return {k: v.astype(np.float64) for k, v in self.params.items()}

    def representation(self, X: np.ndarray) -> np.ndarray:
        """Features the task head sees: z for projected heads, raw input otherwise."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.feature_dim:
            raise DimensionError(f"model expects {self.feature_dim}-dim features, got {X.shape[1]}")
        if self.kind in (HeadKind.PROJECTED, HeadKind.FADES):
            return projection_forward(ProjectionParams.from_dict(self._p64(), "proj"), X)
        return X

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = self._p64()
        z = self.representation(X)
        if self.kind == HeadKind.MOE:
            return moe_forward(MoEParams.from_dict(p, "moe"), z)[0]
        if self.kind == HeadKind.FADES:
            z = z[:, : z.shape[1] // 3]
        return probe_forward(ProbeParams.from_dict(p, "probe"), z)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict_labels(self.predict_proba(X))

    def metadata(self) -> dict:
        return {"strategy": self.strategy, "config": self.config.to_dict(),
                "domains": list(self.domains), "feature_dim": self.feature_dim,
                "num_classes": self.num_classes, "scope": self.scope}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.kind, self.params, self.metadata())

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        kind, params, meta = load_checkpoint(path)
        model = cls(strategy=meta["strategy"], config=StrategyConfig.from_dict(meta["config"]),
                    params=params, domains=tuple(meta["domains"]),
                    feature_dim=int(meta["feature_dim"]), num_classes=int(meta["num_classes"]),
                    scope=meta.get("scope"))
        if model.kind != kind:
            raise DataError(f"{path}: head kind {kind.name} does not match strategy {model.strategy}")
        return model


def init_params(config: StrategyConfig, rng: np.random.Generator, m: int, K: int, D: int) -> Params:
    s = config.strategy
    if s in ("wce", "groupdro"):
        return init_probe(rng, K, m).as_dict("probe")
    if s == "moe":
        return init_moe(rng, D, K, m).as_dict("moe")
    params = init_projection(rng, m, config.hidden_dim, config.z_dim).as_dict("proj")
    width = config.z_dim // 3 if s == "fades" else config.z_dim
    params.update(init_probe(rng, K, width).as_dict("probe"))
    params.update(init_probe(rng, D, width).as_dict("domain"))
    if s == "fades":
        params.update(init_probe(rng, K, width).as_dict("aux_y"))
        params.update(init_probe(rng, D, width).as_dict("aux_d"))
    return params


def _pooled_batches(rng: np.random.Generator, n: int, size: int,
                    min_size: int) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, size):
        idx = order[start:start + size]
        if len(idx) >= min_size:
            yield idx


class _DomainStream:
    """Endless reshuffled index stream for one domain (oversamples small domains)."""

    def __init__(self, rng: np.random.Generator, members: np.ndarray):
        self.rng, self.members, self.buf = rng, members, np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.buf.size == 0:
                self.buf = self.members[self.rng.permutation(self.members.size)]
            out.append(self.buf[:k])
            k -= len(out[-1])
            self.buf = self.buf[len(out[-1]):]
        return np.concatenate(out)


def _stratified_batches(streams: list[_DomainStream], n: int, size: int) -> Iterator[np.ndarray]:
    per = max(1, size // len(streams))
    for _ in range(math.ceil(n / size)):
        yield np.concatenate([s.take(per) for s in streams])


def train(bundle: DatasetBundle, config: StrategyConfig, *, scope: str | None = None) -> TrainedModel:
    """Fit one strategy on every record of ``bundle`` (pass the train split)."""
    task = get_task(config.task)
    y = bundle.labels(task)
    K = task.num_classes
    domains = tuple(bundle.dataset_ids)
    D = len(domains)
    if config.strategy in DOMAIN_AWARE and D < 2:
        raise DataError(f"{config.strategy} needs at least 2 domains, got {list(domains)}")
    d = bundle.domain_index(domains)
    X = bundle.features()
    weights = class_weights(y, K)
    n, m = X.shape

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng, m, K, D)
    opt = OptimizerState(config.learning_rate, kind=config.optimizer)
    adv_steps = config.adversary_steps if config.strategy in ADVERSARIES else 0
    adv_opt = OptimizerState(config.adversary_learning_rate, kind=config.optimizer)
    q = np.full(D, 1.0 / D)
    min_size = config.z_dim // 3 + 2 if config.strategy == "fades" else 1
    streams = ([_DomainStream(rng, np.flatnonzero(d == g)) for g in range(D)]
               if config.strategy == "groupdro" else None)
    warmup_epochs = math.floor(config.moe_warmup_fraction * config.epochs + 0.5)

    history, q_history = [], []
    for epoch in range(config.epochs):
        warm = config.strategy == "moe" and epoch < warmup_epochs
        batches = (_stratified_batches(streams, n, config.batch_size) if streams
                   else _pooled_batches(rng, n, config.batch_size, min_size))
        sums: dict[str, float] = {}
        steps = 0
        for idx in batches:
            batch = Batch(X[idx], y[idx], d[idx])
            if adv_steps:
                z = encode(params, batch.x)
                for _ in range(adv_steps):
                    adv = adversary_objective(config, batch, params, z)
                    params = optimizer_step(adv_opt, params, adv.grads)
            out = evaluate_objective(config, batch, params, weights, q=q, warmup=warm)
            params = optimizer_step(opt, params, out.grads)
            if "q" in out.state:
                q = out.state["q"]
            sums["loss"] = sums.get("loss", 0.0) + out.loss
            for k, v in out.terms.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        if steps == 0:
            raise DataError(f"training set of {n} rows yields no usable batch")
        row = {k: v / steps for k, v in sums.items()}
        row["epoch"] = epoch + 1
        history.append(row)
        if config.strategy == "groupdro":
            q_history.append(q.copy())
        log.debug("%s epoch %d loss %.5f", config.strategy, epoch + 1, row["loss"])

    final = {k: v.astype(np.float32) for k, v in params.items()}
    return TrainedModel(config.strategy, config, final, domains, m, K, history, q_history, scope)


def accuracy(model: TrainedModel, bundle: DatasetBundle) -> float:
    y = bundle.labels(model.task)
    return float(np.mean(model.predict(bundle.features()) == y))


@dataclass
class GridResult:
    config: StrategyConfig
    candidates: list[tuple[int, float, float]]  # (batch_size, learning_rate, mean CV accuracy)


def grid_search(bundle: DatasetBundle, config: StrategyConfig, *, folds: int = 3,
                search_epochs: int = 20) -> GridResult:
    """3x3 batch/lr grid scored by patient-level k-fold CV accuracy.

    Ties keep the earlier grid point. The returned config carries the winning
    batch size and learning rate with the caller's epoch count.
    """
    if config.strategy == "fades":
        raise ConfigError("FADES trains with fixed hyperparameters; grid search does not apply")
    fold_idx = kfold_indices(bundle.records, folds, config.seed)
    candidates = []
    best = None
    for bs in BATCH_GRID:
        for lr in LR_GRID:
            cand = config.replace(batch_size=bs, learning_rate=lr, epochs=search_epochs,
                                  off_grid=False)
            scores = []
            for f in range(folds):
                held = fold_idx[f]
                fit = np.concatenate([fold_idx[g] for g in range(folds) if g != f])
                model = train(bundle.subset(np.sort(fit)), cand)
                scores.append(accuracy(model, bundle.subset(np.sort(held))))
            score = float(np.mean(scores))
            candidates.append((bs, lr, score))
            if best is None or score > best[2]:
                best = (bs, lr, score)
    chosen = config.replace(batch_size=best[0], learning_rate=best[1], off_grid=False)
    return GridResult(chosen, candidates)


def write_history(path: str | Path, model: TrainedModel) -> None:
    """``epoch,loss,<aux terms...>,q_0..q_{D-1}`` with one row per epoch."""
    aux = sorted({k for row in model.history for k in row} - {"epoch", "loss"})
    qcols = [f"q_{i}" for i in range(len(model.domains))] if model.q_history else []
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", *aux, *qcols])
        for i, row in enumerate(model.history):
            vals = [row["epoch"], repr(row["loss"])] + [repr(row.get(k, 0.0)) for k in aux]
            if qcols:
                vals += [repr(float(v)) for v in model.q_history[i]]
            w.writerow(vals)
