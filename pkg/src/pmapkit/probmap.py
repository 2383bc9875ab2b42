"""Probability maps: simplex-projected grids with scaling and coverage queries.

A probability map is a nonnegative grid over an activation window that sums
to one. Normalization comes from Sparsemax, the Euclidean projection of raw
scores onto the probability simplex, which admits exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ActivationWindow

__all__ = [
    "ProbabilityMap",
    "PresenceProbability",
    "sparsemax",
    "sparsemax_jvp",
    "temperature_scale",
    "coverage_of_point",
]

# Construction renormalizes sums within RENORM_TOL of one and rejects beyond;
# valid maps afterwards hold the sum to SUM_TOL.
SUM_TOL = 1e-9
RENORM_TOL = 1e-6


@dataclass(frozen=True)
class PresenceProbability:
    """Probability that a keypoint lies inside the activation window at all."""

    value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"presence probability must be in [0, 1], got {self.value}")


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Immutable (grid_h, grid_w) distribution over an activation window."""

    window: ActivationWindow
    values: np.ndarray
    keypoint_type: int = 0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (self.window.grid_h, self.window.grid_w):
            raise ValueError(
                f"values shape {values.shape} does not match grid "
                f"{self.window.grid_h}x{self.window.grid_w}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("map values must be finite")
        if np.any(values < 0):
            raise ValueError("map values must be nonnegative")
        total = float(values.sum())
        if abs(total - 1.0) > RENORM_TOL:
            raise ValueError(f"map mass {total} too far from 1 to renormalize")
        values /= total
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not 0 <= self.keypoint_type:
            raise ValueError(f"keypoint_type must be nonnegative, got {self.keypoint_type}")

    @property
    def grid_w(self) -> int:
        return self.window.grid_w

    @property
    def grid_h(self) -> int:
        return self.window.grid_h

    def argmax_cell(self) -> tuple[int, int]:
        """(row, col) of the maximal cell; ties go to the lowest row-major index."""
        flat = int(np.argmax(self.values))
        return divmod(flat, self.grid_w)

    def entropy(self) -> float:
        p = self.values[self.values > 0]
        return float(-(p * np.log(p)).sum())

    def support_size(self) -> int:
        return int((self.values > 0).sum())


def sparsemax(logits: np.ndarray) -> np.ndarray:
    """Project raw scores onto the probability simplex (nearest point in L2).

    Accepts any shape; the projection is over all entries jointly and the
    output has the input's shape, sums to one, and may contain exact zeros.
    """
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("sparsemax input must be finite")
    flat = z.ravel()
    n = flat.size
    if n == 0:
        raise ValueError("sparsemax input must be nonempty")
    # work on differences from the max so a constant shift of the input
    # cancels exactly, bit for bit, not just to rounding
    v = flat - flat.max()
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, n + 1)
    support = 1.0 + ks * u > css
    k = int(ks[support][-1])
    tau = (css[k - 1] - 1.0) / k
    return np.maximum(v - tau, 0.0).reshape(z.shape)


def sparsemax_jvp(logits: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of sparsemax at ``logits`` along ``tangent``.

    On the support S of sparsemax(logits) the Jacobian acts as
    t -> t - mean(t over S); off-support coordinates map to exactly zero.
    The Jacobian is symmetric, so this is also the transpose product.
    """
    z = np.asarray(logits, dtype=float)
    t = np.asarray(tangent, dtype=float)
    if t.shape != z.shape:
        raise ValueError(f"tangent shape {t.shape} does not match logits {z.shape}")
    support = sparsemax(z) > 0
    out = np.zeros_like(t)
    out[support] = t[support] - t[support].mean()
    return out


def temperature_scale(pmap: ProbabilityMap, temperature: float) -> ProbabilityMap:
    """Rescale a map's concentration: values go to v**(1/T), renormalized.

    T=1 is the identity, T>1 flattens, T<1 sharpens. Zeros stay zero and the
    argmax cell set is preserved for any positive T. Computed in log space so
    extreme temperatures cannot underflow the whole map.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = scale_values(pmap.values, temperature)
    return ProbabilityMap(pmap.window, scaled, pmap.keypoint_type)


def scale_values(values: np.ndarray, temperature: float) -> np.ndarray:
    """Power-scale raw nonnegative grid values to a renormalized distribution."""
    values = np.asarray(values, dtype=float)
    positive = values > 0
    if not positive.any():
        raise ValueError("cannot temperature-scale an all-zero map")
    out = np.zeros_like(values)
    logs = np.log(values[positive]) / temperature
    logs -= logs.max()
    out[positive] = np.exp(logs)
    return out / out.sum()


def coverage_of_point(pmap: ProbabilityMap, gt_cell: tuple[int, int]) -> float:
    """Smallest top-mass level of the map that contains the given cell.

    Sums the mass of every cell whose value strictly exceeds the target
    cell's value plus all cells tied with it (ties included conservatively).
    """
    row, col = gt_cell
    if not (0 <= row < pmap.grid_h and 0 <= col < pmap.grid_w):
        raise ValueError(f"cell {gt_cell} outside {pmap.grid_h}x{pmap.grid_w} grid")
    v = pmap.values[row, col]
    return float(pmap.values[pmap.values >= v].sum())
