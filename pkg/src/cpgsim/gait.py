"""Mapping oscillator states to Cartesian foot targets in each leg frame.

The phase drives an ellipse-like path: the horizontal coordinates follow
-cos(theta) (x) and +cos(theta) (y) scaled by the normalized amplitudes, the
vertical coordinate lifts by up to g_c during swing (sin(theta) > 0) and
presses down by up to g_p during stance. All functions are stateless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .oscillators import NUM_LEGS, CpgState


@dataclass(frozen=True)
class GaitShapeParams:
    """Geometric parameters of the foot path.

    d_step is the maximum step length, h the body height over the support,
    g_c the maximum swing ground clearance and g_p the maximum stance ground
    penetration, all in meters. mu_min/mu_max bound the amplitude command
    range the normalization maps onto [-1, 1].
    """

    d_step: float = 0.15
    h: float = 0.3
    g_c: float = 0.05
    g_p: float = 0.01
    mu_min: float = 1.0
    mu_max: float = 2.0

    def __post_init__(self):
        if self.d_step <= 0.0:
            raise ValueError("d_step must be positive")
        if self.g_c < 0.0 or self.g_p < 0.0:
            raise ValueError("ground clearance and penetration must be non-negative")
        if self.h <= self.g_p:
            raise ValueError("body height must exceed the ground penetration")
        if self.mu_max <= self.mu_min:
            raise ValueError("mu_max must exceed mu_min")


@dataclass
class FootTarget:
    """Desired foot positions per leg in the hip-aligned frame (z up)."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def as_matrix(self) -> np.ndarray:
        """(4, 3) array of per-leg targets."""
        return np.stack([self.x, self.y, self.z], axis=1)


def normalize_amplitude(r, params: GaitShapeParams = GaitShapeParams()):
    """Affine map of an amplitude onto [-1, 1] over [mu_min, mu_max].

    Accepts scalars or arrays; values outside the range (transients) map
    outside [-1, 1] without clamping.
    """
    return 2.0 * (np.asarray(r, dtype=np.float64) - params.mu_min) / (
        params.mu_max - params.mu_min
    ) - 1.0


def swing_flag(theta: float) -> bool:
    """True while the leg is in swing.

    Swing covers the half cycle where sin(theta) > 0, evaluated on the
    wrapped phase so that the boundaries (sin = 0, including theta = pi)
    land in stance as the strict inequality demands.
    """
    return bool(K.is_swing(float(theta)))


def foot_targets(state: CpgState, params: GaitShapeParams = GaitShapeParams()) -> FootTarget:
    """Foot positions for all four legs from the oscillator state."""
    x = np.empty(NUM_LEGS)
    y = np.empty(NUM_LEGS)
    z = np.empty(NUM_LEGS)
    for i in range(NUM_LEGS):
        x[i], y[i], z[i] = K.foot_target(
            state.r_x[i], state.r_y[i], state.theta[i],
            params.d_step, params.h, params.g_c, params.g_p,
            params.mu_min, params.mu_max,
        )
    return FootTarget(x, y, z)
