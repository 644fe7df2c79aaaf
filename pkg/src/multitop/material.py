"""Multilevel SIMP interpolation for multi-thickness designs.

The admissible relative thicknesses split [0, 1] into equal intervals.
Within each interval the Young's modulus follows a power law between the
bracketing targets, so every target acts like the void/solid pair of
classic SIMP. With a single interval the law reduces to modified SIMP;
in free mode the interpolation is linear and the exponent is inert.
"""

from __future__ import annotations

import numpy as np

RHO_MIN = 1e-9


class TargetSet:
    """Admissible relative thickness values.

    Parameters
    ----------
    n : int or None
        Number of intervals; the targets are i/n for i = 0..n. ``None``
        selects the free mode (continuously variable thickness).
    """

    __slots__ = ("n",)

    def __init__(self, n: int | None):
        if n is not None:
            n = int(n)
            if n < 1:
                raise ValueError("interval count must be >= 1")
        self.n = n

    @classmethod
    def uniform(cls, n: int) -> "TargetSet":
        return cls(n)

    @classmethod
    def free(cls) -> "TargetSet":
        return cls(None)

    @property
    def is_free(self) -> bool:
        return self.n is None

    @property
    def spacing(self) -> float:
        if self.n is None:
            raise ValueError("free mode has no interval spacing")
        return 1.0 / self.n

    def targets(self) -> np.ndarray:
        if self.n is None:
            raise ValueError("free mode has no discrete targets")
        return np.arange(self.n + 1) / self.n

    def interval_index(self, rho):
        """Index of the interval containing each density.

        A density sitting exactly on a target belongs to the interval
        above it, except rho = 1 which belongs to the last one.
        """
        if self.n is None:
            raise ValueError("free mode has no intervals")
        rho = np.asarray(rho, dtype=float)
        return np.clip(np.floor(rho * self.n).astype(int), 0, self.n - 1)

    def local_coordinate(self, rho):
        """Map rho to [0, 1] within its interval."""
        i = self.interval_index(rho)
        return (np.asarray(rho, dtype=float) - i / self.n) * self.n, i

    def __repr__(self) -> str:
        return "TargetSet(free)" if self.n is None else f"TargetSet(n={self.n})"

    def __eq__(self, other) -> bool:
        return isinstance(other, TargetSet) and self.n == other.n


def interval_index(rho, targets: TargetSet):
    """Index of the thickness interval containing each density."""
    return targets.interval_index(rho)


def effective_modulus(rho, p: float, targets: TargetSet, e0: float = 1.0):
    """Interpolated Young's modulus.

    Piecewise power law: within interval i of width d = 1/n,

        E = [(1 - rho_min) * (local**p * d + i*d) + rho_min] * e0

    with local the normalized coordinate inside the interval. Free mode
    uses the linear law regardless of p.
    """
    rho = np.asarray(rho, dtype=float)
    if targets.is_free:
        return ((1.0 - RHO_MIN) * rho + RHO_MIN) * e0
    local, i = targets.local_coordinate(rho)
    d = targets.spacing
    return ((1.0 - RHO_MIN) * (local**p * d + i * d) + RHO_MIN) * e0


def modulus_derivative(rho, p: float, targets: TargetSet, e0: float = 1.0):
    """d(effective_modulus)/d(rho).

    The interval width cancels, leaving (1 - rho_min) * p * local**(p-1)
    * e0. At a target the upper interval's one-sided value is returned
    (zero for p > 1). Free mode gives the constant linear slope.
    """
    rho = np.asarray(rho, dtype=float)
    if targets.is_free:
        return np.full(rho.shape, (1.0 - RHO_MIN) * e0)
    local, _ = targets.local_coordinate(rho)
    return (1.0 - RHO_MIN) * p * local ** (p - 1.0) * e0
