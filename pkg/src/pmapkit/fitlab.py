"""Synthetic optimization harness: fit a probability map to a target point.

Gradient descent runs on raw scores and reaches the map through the
simplex-projection Jacobian, imitating how a dense head would be trained.
The harness exists to demonstrate the qualitative behavior of the dense
loss: convergence onto the nearest cell, sharper maps for smaller keypoint
constants, and wider support as the smoothness weight grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .decoder import expected_oks_decode
from .geometry import ActivationWindow
from .oks import LossConfig, OksParams, default_window, dense_oks_loss_grad_values, dense_oks_loss_values
from .probmap import ProbabilityMap, sparsemax, sparsemax_jvp

__all__ = ["Normalizer", "FitConfig", "FitReport", "fit_map", "sharpness_report", "mass_radius"]

_MAX_HALVINGS = 40


class Normalizer(Enum):
    SPARSEMAX = "sparsemax"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class FitConfig:
    params: OksParams
    loss: LossConfig = LossConfig(alpha=0.0)
    window: ActivationWindow = field(default_factory=default_window)
    step: float = 0.5
    iterations: int = 500
    seed: int = 0
    normalizer: Normalizer = Normalizer.SPARSEMAX
    keypoint_type: int = 0
    report_mass: float = 0.9

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")
        if not 0.0 < self.report_mass <= 1.0:
            raise ValueError(f"report_mass must be in (0, 1], got {self.report_mass}")


@dataclass
class FitReport:
    final_loss: float
    decode_error_px: float
    support_size: int
    mass_radius_px: float  # radius holding cfg.report_mass of the map around the target
    entropy: float
    loss_trace: list[float]
    steps: list[float]


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _softmax_jvp(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    s = _softmax(z)
    return s * (t - (s * t).sum())


def fit_map(gt: tuple[float, float], cfg: FitConfig) -> tuple[ProbabilityMap, FitReport]:
    """Descend the dense loss from uniform scores until the budget runs out.

    Candidate steps that would increase the loss halve the step size
    (bounded); the recorded loss trace is therefore non-increasing. The map
    stays exactly on the simplex at every iteration.
    """
    window = cfg.window
    if not window.contains(gt):
        raise ValueError(f"target {gt} outside the fit window {window.rect}")
    if cfg.normalizer is Normalizer.SPARSEMAX:
        normalize, jvp = sparsemax, sparsemax_jvp
    else:
        normalize, jvp = _softmax, _softmax_jvp

    logits = np.zeros((window.grid_h, window.grid_w))
    values = normalize(logits)
    loss = dense_oks_loss_values(values, window, gt, cfg.params, cfg.loss)
    step = cfg.step
    trace = [loss]
    steps: list[float] = []

    for _ in range(cfg.iterations):
        grad_map = dense_oks_loss_grad_values(values, window, gt, cfg.params, cfg.loss)
        grad_logits = jvp(logits, grad_map)
        accepted = False
        for _ in range(_MAX_HALVINGS):
            candidate = logits - step * grad_logits
            cand_values = normalize(candidate)
            cand_loss = dense_oks_loss_values(cand_values, window, gt, cfg.params, cfg.loss)
            if cand_loss <= loss:
                logits, values, loss = candidate, cand_values, cand_loss
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise RuntimeError(
                f"fit diverged: no loss-reducing step after {_MAX_HALVINGS} halvings; "
                f"trace={trace[-5:]}"
            )
        trace.append(loss)
        steps.append(step)

    pmap = ProbabilityMap(window, values, cfg.keypoint_type)
    decoded = expected_oks_decode(pmap, cfg.params)
    err = math.hypot(decoded.x - gt[0], decoded.y - gt[1])
    report = FitReport(
        final_loss=loss,
        decode_error_px=err,
        support_size=int((values > 0).sum()),
        mass_radius_px=mass_radius(pmap, gt, cfg.report_mass),
        entropy=pmap.entropy(),
        loss_trace=trace,
        steps=steps,
    )
    return pmap, report


def _center_distances(pmap: ProbabilityMap, point: tuple[float, float]) -> np.ndarray:
    centers = pmap.window.cell_centers()
    return np.hypot(centers[..., 0] - point[0], centers[..., 1] - point[1])


def sharpness_report(
    pmap: ProbabilityMap, gt: tuple[float, float], radii: list[float]
) -> list[tuple[float, float]]:
    """Mass of cells whose centers lie within each radius (image px) of gt."""
    d = _center_distances(pmap, gt)
    return [(float(r), float(pmap.values[d <= r].sum())) for r in radii]


def mass_radius(pmap: ProbabilityMap, gt: tuple[float, float], mass: float) -> float:
    """Smallest cell-center radius around gt that holds at least ``mass``."""
    if not 0.0 < mass <= 1.0:
        raise ValueError(f"mass must be in (0, 1], got {mass}")
    d = _center_distances(pmap, gt).ravel()
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(pmap.values.ravel()[order])
    idx = int(np.searchsorted(cum, mass - 1e-12, side="left"))
    idx = min(idx, len(d) - 1)
    return float(d[order][idx])
