"""EM estimation of class proportions among unlabeled pixels.

The network posteriors at unlabeled pixels were produced under the labeled
class prior ``f``. Re-weighting each posterior by ``alpha / f`` and
renormalising gives the posterior under a candidate unlabeled prior
``alpha``; averaging those over the unlabeled pixels yields the next
``alpha``. Iterating to a fixed point is the classic prior-adjustment EM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLOOR = 1e-8


class EmError(ValueError):
    pass


@dataclass
class EmInputs:
    """Posteriors ``(n_u, m+1)`` at unlabeled pixels plus labeled class frequencies."""

    posteriors: np.ndarray
    labeled_freqs: np.ndarray
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
        if self.posteriors.ndim != 2:
            raise EmError(f"posteriors must be (n_u, m+1), got shape {self.posteriors.shape}")
        freqs = np.asarray(self.labeled_freqs, dtype=np.float64)
        if freqs.shape != (self.posteriors.shape[1],):
            raise EmError("labeled_freqs length must match the posterior class count")
        absent = np.flatnonzero(freqs <= 0)
        if absent.size:
            self.warnings.append(f"classes {absent.tolist()} absent from labels; frequency floored")
        self.labeled_freqs = em_init(freqs)

    @property
    def n_u(self) -> int:
        return self.posteriors.shape[0]

    @classmethod
    def from_counts(cls, posteriors, label_counts) -> "EmInputs":
        return cls(posteriors, np.asarray(label_counts, dtype=np.float64))


@dataclass
class EmResult:
    alpha: np.ndarray
    iterations: int
    converged: bool
    trajectory: list


def em_init(labeled_freqs) -> np.ndarray:
    """Floor at 1e-8 and renormalise; counts or frequencies both work."""
    f = np.asarray(labeled_freqs, dtype=np.float64)
    if np.any(f < 0) or not np.any(f > 0):
        raise EmError("labeled frequencies must be nonnegative and not all zero")
    f = f / f.sum()
    f = np.maximum(f, FLOOR)
    return f / f.sum()


def em_step(inputs: EmInputs, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    weighted = inputs.posteriors * (alpha / inputs.labeled_freqs)[None, :]
    denom = weighted.sum(axis=1)
    bad = np.flatnonzero(~(denom > 0))
    if bad.size:
        raise EmError(f"all weighted posteriors are zero at unlabeled pixel {int(bad[0])}")
    new = (weighted / denom[:, None]).mean(axis=0)
    return new / new.sum()


def em_estimate(inputs: EmInputs, tol: float = 1e-6, max_iters: int = 100) -> EmResult:
    """Iterate :func:`em_step` from the labeled frequencies until the largest change is below ``tol``."""
    if tol <= 0 or max_iters < 1:
        raise EmError("need tol > 0 and max_iters >= 1")
    alpha = inputs.labeled_freqs.copy()
    trajectory = [alpha]
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        new = em_step(inputs, alpha)
        trajectory.append(new)
        delta = np.max(np.abs(new - alpha))
        alpha = new
        if delta < tol:
            converged = True
            break
    return EmResult(alpha, it, converged, trajectory)
