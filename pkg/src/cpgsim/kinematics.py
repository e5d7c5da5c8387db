"""Leg kinematics and joint-level PD control.

Each leg is a 3-dof chain: hip abduction about the body x axis through a
lateral offset link, then hip pitch and knee about the leg y axis. The zero
pose points the leg straight down, foot at (0, +/-hip_offset, -(l_thigh +
l_calf)) in the hip frame. Inverse kinematics is closed form and always
selects the knee-backward branch (knee angle <= 0), matching the hardware
convention. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

DEFAULT_TAU_MAX = 23.7  # actuator torque limit, N*m


class WorkspaceError(ValueError):
    """Target outside the reachable workspace.

    Carries the nearest reachable solution (target pulled radially onto the
    workspace boundary) in the clamped attribute.
    """

    def __init__(self, message: str, clamped: "JointCommand"):
        super().__init__(message)
        self.clamped = clamped


@dataclass(frozen=True)
class LegGeometry:
    """Link lengths of one leg; left_right_sign is +1 for left legs, -1 for right."""

    hip_offset: float = 0.08
    l_thigh: float = 0.213
    l_calf: float = 0.213
    left_right_sign: int = 1

    def __post_init__(self):
        if self.hip_offset < 0.0 or self.l_thigh <= 0.0 or self.l_calf <= 0.0:
            raise ValueError("link lengths must be positive")
        if self.left_right_sign not in (-1, 1):
            raise ValueError("left_right_sign must be +1 or -1")

    @property
    def signed_offset(self) -> float:
        return self.left_right_sign * self.hip_offset


@dataclass
class JointCommand:
    """Desired joint state for one leg: (abduction, hip pitch, knee)."""

    q_d: np.ndarray
    qdot_d: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q_d = np.asarray(self.q_d, dtype=np.float64).reshape(3)
        self.qdot_d = np.asarray(self.qdot_d, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class PdGains:
    kp: float = 100.0
    kd: float = 2.0

    def __post_init__(self):
        if self.kp <= 0.0:
            raise ValueError("kp must be positive")
        if self.kd < 0.0:
            raise ValueError("kd must be non-negative")


def inverse_kinematics(target, geom: LegGeometry) -> JointCommand:
    """Joint angles placing the foot at target (x, y, z) in the hip frame.

    Raises WorkspaceError for unreachable targets; the exception carries the
    angles of the nearest reachable point, so callers that prefer clamping
    over failing can recover it.
    """
    x, y, z = (float(v) for v in np.asarray(target, dtype=np.float64).reshape(3))
    q1, q2, q3, clamped = K.leg_ik(x, y, z, geom.signed_offset, geom.l_thigh, geom.l_calf)
    cmd = JointCommand(np.array([q1, q2, q3]))
    if clamped:
        raise WorkspaceError(
            f"foot target ({x:.4f}, {y:.4f}, {z:.4f}) is outside the reachable workspace",
            cmd,
        )
    return cmd


def forward_kinematics(q: JointCommand | np.ndarray, geom: LegGeometry) -> np.ndarray:
    """Foot position (x, y, z) in the hip frame for the given joint angles."""
    angles = q.q_d if isinstance(q, JointCommand) else np.asarray(q, dtype=np.float64).reshape(3)
    return np.array(K.leg_fk(angles[0], angles[1], angles[2],
                             geom.signed_offset, geom.l_thigh, geom.l_calf))


def pd_torque(q_d, q, qdot, gains: PdGains, tau_max: float = DEFAULT_TAU_MAX) -> np.ndarray:
    """Joint torques tau = Kp*(q_d - q) - Kd*qdot, clamped to +/-tau_max.

    Desired velocity is zero; inputs are 12-vectors covering all four legs
    (any matching shapes work elementwise).
    """
    q_d = np.asarray(q_d, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    tau = gains.kp * (q_d - q) - gains.kd * qdot
    return np.clip(tau, -tau_max, tau_max)
