"""Amplitude-controlled phase oscillator network, one oscillator per leg.

Each leg i carries six state variables: swing-axis amplitudes r_x, r_y with
their rates, and an unwrapped phase theta with its rate. Amplitudes relax
toward commanded set points mu with critically damped second-order dynamics

    r'' = a * (a/4 * (mu - r) - r')

while the phase integrates the commanded frequency (Hz, converted to rad/s at
the integrator boundary) plus a synchronizing coupling over the other legs

    theta_i' = 2*pi*f_i + 1/2 * sum_j (r_x_j + r_y_j) * w_ij * sin(theta_j - theta_i - phi_ij).

w_ii = 0 and phi_ii = 0, so summing over all j or only j != i is equivalent.
Amplitudes advance with the exact one-step propagator of the linear
critically damped subsystem; the nonlinear phase coupling advances with
explicit Euler at the 1 kHz default rate (a*dt = 0.05, far inside the
stability margin).

States are plain float64 arrays ordered FL, FR, HL, HR. Stepping is a pure
function of (state, command, config): instances share no mutable state and
may be advanced in parallel freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

LEG_NAMES = ("FL", "FR", "HL", "HR")
NUM_LEGS = 4

MU_RANGE = (1.0, 2.0)
OMEGA_RANGE_HZ = (0.0, 4.5)

#: phase of each leg in a trot: diagonal pairs (FL, HR) and (FR, HL) in phase,
#: the two pairs half a cycle apart.
TROT_PHASES = (0.0, math.pi, math.pi, 0.0)


class StateCorruptionError(ValueError):
    """Raised when a non-finite oscillator state reaches the integrator."""


def _leg_array(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape == ():
        arr = np.full(NUM_LEGS, float(arr))
    if arr.shape != (NUM_LEGS,):
        raise ValueError(f"{name} must be a scalar or length-4 array, got shape {arr.shape}")
    return arr.copy()


@dataclass
class CpgState:
    """Per-leg oscillator state; theta is unwrapped."""

    r_x: np.ndarray
    rdot_x: np.ndarray
    r_y: np.ndarray
    rdot_y: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray

    def __post_init__(self):
        for name in ("r_x", "rdot_x", "r_y", "rdot_y", "theta", "theta_dot"):
            setattr(self, name, _leg_array(getattr(self, name), name))

    def to_array(self) -> np.ndarray:
        """Pack into the (6, 4) layout the kernels use."""
        return np.stack(
            [self.r_x, self.rdot_x, self.r_y, self.rdot_y, self.theta, self.theta_dot]
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "CpgState":
        return cls(arr[0], arr[1], arr[2], arr[3], arr[4], arr[5])

    def copy(self) -> "CpgState":
        return CpgState.from_array(self.to_array())

    def theta_wrapped(self) -> np.ndarray:
        """Phases reduced to [0, 2*pi)."""
        return np.mod(self.theta, 2.0 * math.pi)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.to_array()).all())


@dataclass
class ModulationCommand:
    """Per-leg set points; clamped to the action ranges on construction.

    mu_x, mu_y are dimensionless amplitudes in [1, 2]; omega_hz is the
    intrinsic frequency in [0, 4.5] Hz.
    """

    mu_x: np.ndarray
    mu_y: np.ndarray
    omega_hz: np.ndarray

    def __post_init__(self):
        self.mu_x = np.clip(_leg_array(self.mu_x, "mu_x"), *MU_RANGE)
        self.mu_y = np.clip(_leg_array(self.mu_y, "mu_y"), *MU_RANGE)
        self.omega_hz = np.clip(_leg_array(self.omega_hz, "omega_hz"), *OMEGA_RANGE_HZ)

    @classmethod
    def from_action(cls, action: np.ndarray) -> "ModulationCommand":
        """Split a 12-vector [mu_x(4), mu_y(4), omega(4)] into a command."""
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (12,):
            raise ValueError(f"action must have shape (12,), got {action.shape}")
        return cls(action[0:4], action[4:8], action[8:12])


def _check_square(name, arr):
    if arr.shape != (NUM_LEGS, NUM_LEGS):
        raise ValueError(f"{name} must be 4x4, got shape {arr.shape}")


@dataclass
class CpgNetworkConfig:
    """Convergence factors, coupling weights and phase biases of the network."""

    a_x: float = 50.0
    a_y: float = 50.0
    coupling_weights: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))
    phase_biases: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))
    dt: float = 0.001

    def __post_init__(self):
        self.coupling_weights = np.asarray(self.coupling_weights, dtype=np.float64).copy()
        self.phase_biases = np.asarray(self.phase_biases, dtype=np.float64).copy()
        _check_square("coupling_weights", self.coupling_weights)
        _check_square("phase_biases", self.phase_biases)
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.a_x <= 0.0 or self.a_y <= 0.0:
            raise ValueError("convergence factors must be positive")
        w = self.coupling_weights
        phi = self.phase_biases
        if (w < 0.0).any():
            raise ValueError("coupling weights must be non-negative")
        if np.diag(w).any():
            raise ValueError("self-coupling weights must be zero")
        if np.diag(phi).any():
            raise ValueError("self phase biases must be zero")
        # antisymmetry up to full turns: phi_ij + phi_ji must be a multiple of 2*pi
        s = phi + phi.T
        if not np.allclose(np.round(s / (2.0 * math.pi)) * 2.0 * math.pi, s, atol=1e-9):
            raise ValueError("phase biases must satisfy phi_ij = -phi_ji (mod 2*pi)")


def trot_config(weight: float, a: float = 50.0, dt: float = 0.001) -> CpgNetworkConfig:
    """All-to-all network with trot phase biases and uniform coupling weight.

    Diagonal leg pairs are in phase, lateral and front/hind neighbors are
    half a cycle apart. weight must lie in [0, 1]; weight 0 disables the
    coupling entirely.
    """
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"coupling weight must be in [0, 1], got {weight}")
    w = np.full((4, 4), float(weight))
    np.fill_diagonal(w, 0.0)
    p = np.asarray(TROT_PHASES)
    phi = p[None, :] - p[:, None]
    return CpgNetworkConfig(a_x=a, a_y=a, coupling_weights=w, phase_biases=phi, dt=dt)


def initial_state(rng: np.random.Generator | None = None,
                  theta: np.ndarray | None = None) -> CpgState:
    """Default start: amplitudes at the range bottom, at rest.

    Phases come from theta when given, otherwise each leg draws uniformly
    from [0, 2*pi) using rng (required in that case).
    """
    if theta is None:
        if rng is None:
            raise ValueError("provide either theta or an rng to draw phases from")
        theta = rng.uniform(0.0, 2.0 * math.pi, NUM_LEGS)
    zeros = np.zeros(NUM_LEGS)
    return CpgState(np.ones(NUM_LEGS), zeros.copy(), np.ones(NUM_LEGS), zeros.copy(),
                    np.asarray(theta, dtype=np.float64), zeros.copy())


def trot_locked_state() -> CpgState:
    """State already sitting on the trot phase relation."""
    return initial_state(theta=np.asarray(TROT_PHASES))


def step(state: CpgState, cmd: ModulationCommand, cfg: CpgNetworkConfig) -> CpgState:
    """Advance the network by one step of cfg.dt; returns a new state."""
    if not state.is_finite():
        raise StateCorruptionError("oscillator state contains non-finite values")
    arr = state.to_array()
    K.cpg_step(arr, cmd.mu_x, cmd.mu_y, cmd.omega_hz,
               cfg.coupling_weights, cfg.phase_biases, cfg.a_x, cfg.a_y, cfg.dt)
    return CpgState.from_array(arr)


def integrate(state: CpgState, cmd: ModulationCommand, cfg: CpgNetworkConfig,
              steps: int) -> CpgState:
    """Advance by a fixed number of steps under a constant command (fused loop)."""
    if not state.is_finite():
        raise StateCorruptionError("oscillator state contains non-finite values")
    arr = state.to_array()
    K.cpg_integrate(arr, cmd.mu_x, cmd.mu_y, cmd.omega_hz,
                    cfg.coupling_weights, cfg.phase_biases, cfg.a_x, cfg.a_y,
                    cfg.dt, int(steps))
    return CpgState.from_array(arr)


def phase_locking_residual(state: CpgState, cfg: CpgNetworkConfig) -> float:
    """Worst phase mismatch over the coupled pairs.

    Returns max over ordered pairs (i, j) with w_ij > 0 of
    |sin(theta_j - theta_i - phi_ij)|; 0 means every coupled pair sits exactly
    on its bias. By convention an uncoupled network (no pairs) returns 0.
    """
    w = cfg.coupling_weights
    worst = 0.0
    for i in range(NUM_LEGS):
        for j in range(NUM_LEGS):
            if w[i, j] > 0.0:
                v = abs(math.sin(state.theta[j] - state.theta[i] - cfg.phase_biases[i, j]))
                if v > worst:
                    worst = v
    return worst
