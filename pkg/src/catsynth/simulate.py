"""Draw categorical data from a known latent class model (test and demo harness)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataset import CategoricalDataset, Codebook, DataValidationError, VariableSpec, yrbs_codebook


@dataclass
class SimSpec:
    """A finite latent class model: class weights ``pi`` and per-variable kernels.

    ``theta[j]`` has shape ``(n_classes, d_j)``.
    """

    codebook: Codebook
    pi: np.ndarray
    theta: list[np.ndarray]
    n: int
    seed: int

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.theta = [np.asarray(th, dtype=float) for th in self.theta]
        C = self.pi.size
        if abs(self.pi.sum() - 1) > 1e-9 or np.any(self.pi < 0):
            raise DataValidationError("pi must be a probability vector")
        if len(self.theta) != self.codebook.r:
            raise DataValidationError("need one theta table per variable")
        for spec, th in zip(self.codebook.variables, self.theta):
            if th.shape != (C, spec.d):
                raise DataValidationError(
                    f"theta for '{spec.name}' has shape {th.shape}, expected {(C, spec.d)}")
            if np.any(th < 0) or np.any(np.abs(th.sum(axis=1) - 1) > 1e-9):
                raise DataValidationError(f"theta rows for '{spec.name}' must sum to 1")
        if self.n < 1:
            raise DataValidationError("n must be positive")

    @property
    def n_classes(self) -> int:
        return self.pi.size

    def to_dict(self) -> dict:
        variables = []
        for spec, th in zip(self.codebook.variables, self.theta):
            variables.append({"name": spec.name, "levels": list(spec.levels),
                              "sensitive": spec.sensitive, "theta": th.tolist()})
        return {"n": self.n, "seed": self.seed, "pi": self.pi.tolist(), "variables": variables}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SimSpec":
        try:
            cb = Codebook.from_dict(doc)
            theta = [it["theta"] for it in doc["variables"]]
            return cls(cb, doc["pi"], theta, int(doc["n"]), int(doc["seed"]))
        except KeyError as exc:
            raise DataValidationError(f"simulation spec is missing {exc}") from None


def simulate(spec: SimSpec, seed: int | None = None) -> tuple[CategoricalDataset, np.ndarray]:
    """Draw ``spec.n`` records: a class label from ``pi``, then each variable from its kernel.

    Returns the dataset and the 1-based true class labels.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    z = rng.choice(spec.n_classes, size=spec.n, p=spec.pi)
    cols = []
    for th in spec.theta:
        cum = np.cumsum(th[z], axis=1)
        u = rng.random(spec.n)
        cols.append(np.minimum((cum <= u[:, None]).sum(axis=1), th.shape[1] - 1) + 1)
    return CategoricalDataset(spec.codebook, np.column_stack(cols)), z + 1


def random_simspec(codebook: Codebook, pi, n: int, seed: int,
                   concentration: float = 0.5) -> SimSpec:
    """A spec whose kernels are Dirichlet(concentration) draws, seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    pi = np.asarray(pi, dtype=float)
    theta = [rng.dirichlet(np.full(d, concentration), size=pi.size) for d in codebook.arities]
    return SimSpec(codebook, pi, theta, n, seed)


def yrbs_like_simspec(n: int = 2000, seed: int = 2019) -> SimSpec:
    """Five-class model over the 13-variable demo codebook."""
    return random_simspec(yrbs_codebook(), [0.35, 0.25, 0.2, 0.12, 0.08], n, seed)


def small_simspec(n: int = 2000, seed: int = 11) -> SimSpec:
    """Three well-separated classes over six low-arity variables; the three sensitive ones are binary."""
    cb = Codebook((
        VariableSpec("region", ("north", "south")),
        VariableSpec("band", ("low", "mid", "high")),
        VariableSpec("sex", ("female", "male")),
        VariableSpec("smoker", ("yes", "no"), sensitive=True),
        VariableSpec("drinker", ("yes", "no"), sensitive=True),
        VariableSpec("exercise", ("yes", "no"), sensitive=True),
    ))
    theta = [
        [[0.85, 0.15], [0.2, 0.8], [0.5, 0.5]],
        [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.7]],
        [[0.6, 0.4], [0.4, 0.6], [0.5, 0.5]],
        [[0.8, 0.2], [0.15, 0.85], [0.4, 0.6]],
        [[0.7, 0.3], [0.2, 0.8], [0.9, 0.1]],
        [[0.75, 0.25], [0.3, 0.7], [0.1, 0.9]],
    ]
    return SimSpec(cb, [0.5, 0.3, 0.2], theta, n, seed)
