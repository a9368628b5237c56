"""Seeded multi-domain synthetic embeddings with planted shift and bias.

A scan of latent class ``y`` from domain ``d`` is embedded as::

    x = a * s * ((1 - c) * mu[y] + c * nu[d, y]) + r * delta[d] + sigma * eps

where ``mu`` are shared class directions, ``nu`` domain-specific class
directions (the spurious channel), ``delta`` domain offsets and ``a`` is
``1 - subgroup_disparity`` for the disadvantaged density subgroup and 1
otherwise. Domains in ``label_flip_domains`` report label ``(y + 1) mod K``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .dataio import DENSITY_TOKENS, DIAGNOSIS_TOKENS, DatasetBundle, SampleRecord
from .errors import ConfigError
from .numerics import OptimizerState, optimizer_step, uniform_init
from .strategies.objectives import cross_entropy

REFERENCE_CONFIGS = ("S1", "S2", "S3")


@dataclass(frozen=True)
class SynthConfig:
    num_domains: int = 4
    num_classes: int = 3
    feature_dim: int = 32
    samples_per_domain: tuple[int, ...] | int = 600
    signal_strength: float = 2.0
    domain_strength: float = 3.0
    spurious_strength: float = 0.0
    class_priors: tuple[tuple[float, ...], ...] | None = None
    label_flip_domains: tuple[int, ...] = ()
    subgroup_disparity: float = 0.0
    disparity_subgroup: str = "D"
    density_priors: tuple[float, ...] = (0.1, 0.4, 0.4, 0.1)
    noise: float = 1.0
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        D, K = self.num_domains, self.num_classes
        if D < 1:
            raise ConfigError("num_domains must be >= 1")
        if K not in (3, 4):
            raise ConfigError("num_classes must be 3 (diagnosis) or 4 (density)")
        counts = self.samples_per_domain
        counts = (counts,) * D if isinstance(counts, int) else tuple(int(c) for c in counts)
        if len(counts) != D or min(counts) < 1:
            raise ConfigError("samples_per_domain needs one positive count per domain")
        object.__setattr__(self, "samples_per_domain", counts)
        priors = self.class_priors
        priors = ((1.0 / K,) * K,) * D if priors is None else tuple(tuple(map(float, p)) for p in priors)
        for p in priors:
            if len(p) != K or min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
                raise ConfigError(f"class prior {p} is not a distribution over {K} classes")
        if len(priors) != D:
            raise ConfigError("class_priors needs one row per domain")
        object.__setattr__(self, "class_priors", priors)
        object.__setattr__(self, "label_flip_domains", tuple(self.label_flip_domains))
        object.__setattr__(self, "density_priors", tuple(self.density_priors))
        if min(self.signal_strength, self.domain_strength, self.noise) < 0:
            raise ConfigError("signal, domain and noise strengths must be >= 0")
        if not 0.0 <= self.spurious_strength <= 1.0:
            raise ConfigError("spurious_strength must lie in [0, 1]")
        if not 0.0 <= self.subgroup_disparity <= 1.0:
            raise ConfigError("subgroup_disparity must lie in [0, 1]")
        if self.disparity_subgroup not in DENSITY_TOKENS:
            raise ConfigError("disparity_subgroup must be a density token")
        if any(not 0 <= d < D for d in self.label_flip_domains):
            raise ConfigError("label_flip_domains refers to a missing domain")
        if self.feature_dim < K + D:
            raise ConfigError(f"feature_dim {self.feature_dim} < classes + domains = {K + D}")

    @property
    def task(self) -> str:
        return "diagnosis" if self.num_classes == 3 else "density"

    @property
    def domain_names(self) -> list[str]:
        return [f"d{i}" for i in range(self.num_domains)]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def reference_config(name: str, **overrides) -> SynthConfig:
    """One of the committed fixtures S1, S2, S3, optionally with field overrides."""
    if name not in REFERENCE_CONFIGS:
        raise ConfigError(f"unknown reference config {name!r}")
    text = resources.files("fairprobe").joinpath("fixtures", f"{name.lower()}.json").read_text()
    data = json.loads(text)
    data.update(overrides)
    return SynthConfig.from_dict(data)


@dataclass
class PlantedDirections:
    class_dirs: np.ndarray     # K x m
    domain_dirs: np.ndarray    # D x m
    spurious_dirs: np.ndarray  # D x K x m


def planted_directions(config: SynthConfig, rng: np.random.Generator) -> PlantedDirections:
    m, K, D = config.feature_dim, config.num_classes, config.num_domains
    Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    basis = Q.T  # orthonormal rows
    mu, delta = basis[:K], basis[K:K + D]
    rest = basis[K + D:]
    if len(rest) >= D * K:
        nu = rest[:D * K].reshape(D, K, m)
    elif len(rest):
        # not enough room: random unit vectors inside the complement
        coef = rng.normal(size=(D * K, len(rest)))
        nu = coef @ rest
        nu /= np.linalg.norm(nu, axis=1, keepdims=True)
        nu = nu.reshape(D, K, m)
    else:
        if config.spurious_strength > 0:
            raise ConfigError("no room for spurious directions; raise feature_dim")
        nu = np.zeros((D, K, m))
    return PlantedDirections(mu, delta, nu)


def generate(config: SynthConfig) -> DatasetBundle:
    rng = np.random.default_rng(config.seed)
    dirs = planted_directions(config, rng)
    K, m = config.num_classes, config.feature_dim
    s, c, r, sigma = (config.signal_strength, config.spurious_strength,
                      config.domain_strength, config.noise)
    tokens = DIAGNOSIS_TOKENS if K == 3 else DENSITY_TOKENS
    records: list[SampleRecord] = []
    rows: list[np.ndarray] = []
    for dom, name in enumerate(config.domain_names):
        n = config.samples_per_domain[dom]
        made = 0
        patient = 0
        while made < n:
            scans = min(int(rng.integers(1, 5)), n - made)
            y = int(rng.choice(K, p=config.class_priors[dom]))
            label = (y + 1) % K if dom in config.label_flip_domains else y
            if K == 4:
                density = tokens[label]
            else:
                density = DENSITY_TOKENS[int(rng.choice(4, p=config.density_priors))]
            age = float(np.clip(np.rint(rng.normal(55.0, 12.0)), 25, 90))
            scale = 1.0 - config.subgroup_disparity if density == config.disparity_subgroup else 1.0
            mean = (scale * s * ((1.0 - c) * dirs.class_dirs[y] + c * dirs.spurious_dirs[dom, y])
                    + r * dirs.domain_dirs[dom])
            for _ in range(scans):
                rows.append(mean + sigma * rng.normal(size=m))
                records.append(SampleRecord(
                    sample_id=f"{name}-s{made:05d}",
                    patient_id=f"{name}-p{patient:04d}",
                    dataset_id=name,
                    diagnosis=tokens[label] if K == 3 else None,
                    density=density,
                    age=age,
                    view=("CC", "MLO")[int(rng.integers(0, 2))],
                ))
                made += 1
            patient += 1
    emb = np.asarray(rows, dtype=np.float32).reshape(len(rows), m)
    return DatasetBundle(tuple(records), emb, tuple(config.domain_names))


def chance_level(labels: Sequence) -> float:
    """Accuracy of always predicting the most frequent value."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return float(counts.max() / counts.sum())


def domain_probe_accuracy(features: np.ndarray, domains: Sequence, *, epochs: int = 200,
                          learning_rate: float = 1e-2, seed: int = 0) -> float:
    """Held-out accuracy of a fresh linear domain classifier.

    Fixed protocol: seeded 80/20 split, features standardised with training
    statistics, full-batch Adam for ``epochs`` steps. Measures how much domain
    information a representation still carries.
    """
    X = np.asarray(features, dtype=np.float64)
    labels, d = np.unique(np.asarray(domains), return_inverse=True)
    D = len(labels)
    if D < 2:
        raise ConfigError("domain probe needs at least 2 domains")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    cut = int(round(0.8 * len(X)))
    tr, te = order[:cut], order[cut:]
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Xs = (X - mu) / sd
    params = {"W": uniform_init(rng, (D, X.shape[1]), X.shape[1]), "b": np.zeros(D)}
    opt = OptimizerState(learning_rate)
    target = np.eye(D)[d[tr]]
    coef = np.full(len(tr), 1.0 / len(tr))
    for _ in range(epochs):
        logits = Xs[tr] @ params["W"].T + params["b"]
        _, dlog = cross_entropy(logits, target, coef)
        params = optimizer_step(opt, params, {"W": dlog.T @ Xs[tr], "b": dlog.sum(axis=0)})
    pred = np.argmax(Xs[te] @ params["W"].T + params["b"], axis=1)
    return float(np.mean(pred == d[te]))
