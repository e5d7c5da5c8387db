"""Policy observation assembly and sensory-delay injection.

The observation is a fixed 267-float vector: velocity commands, the 17 x 11
exteroceptive height grid, proprioception (orientation, base velocities,
joint state, foot contacts), the previous action, and the oscillator states.
The phase enters as (cos, sin) pairs to avoid wrap discontinuities, so the
six oscillator quantities contribute 28 entries. Oscillator states and
commands are generated, not sensed: they bypass the delay lines and are
always current.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .oscillators import CpgState

LAYOUT_VERSION = 1

#: (name, size) pairs in concatenation order.
BLOCKS = (
    ("commands", 3),
    ("heights", 187),
    ("orientation_rpy", 3),
    ("lin_vel", 3),
    ("ang_vel", 3),
    ("joint_pos", 12),
    ("joint_vel", 12),
    ("contacts", 4),
    ("last_action", 12),
    ("cpg_r_x", 4),
    ("cpg_rdot_x", 4),
    ("cpg_r_y", 4),
    ("cpg_rdot_y", 4),
    ("cpg_cos_theta", 4),
    ("cpg_sin_theta", 4),
    ("cpg_theta_dot", 4),
)

OBS_SIZE = sum(size for _, size in BLOCKS)


def _build_slices() -> dict[str, slice]:
    out = {}
    start = 0
    for name, size in BLOCKS:
        out[name] = slice(start, start + size)
        start += size
    return out


BLOCK_SLICES = _build_slices()

#: slices of the delayed sensor groups within the observation
PROPRIO_BLOCKS = ("orientation_rpy", "lin_vel", "ang_vel",
                  "joint_pos", "joint_vel", "contacts")
EXTERO_BLOCKS = ("heights",)
PROPRIO_SIZE = sum(BLOCK_SLICES[b].stop - BLOCK_SLICES[b].start for b in PROPRIO_BLOCKS)


class LayoutError(ValueError):
    """An input block does not match the documented observation layout."""


def layout_schema() -> dict:
    """JSON-serializable description of the observation layout."""
    return {
        "layout_version": LAYOUT_VERSION,
        "size": OBS_SIZE,
        "blocks": [
            {"name": name, "start": BLOCK_SLICES[name].start, "size": size}
            for name, size in BLOCKS
        ],
        "notes": {
            "theta_encoding": "cos/sin pairs of the wrapped oscillator phase",
            "heights": "17 x 11 grid, x-major, 0.1 m pitch, relative to the "
                       "terrain under the base",
            "last_action": "previous command in physical units "
                           "[mu_x(4), mu_y(4), omega_hz(4)]",
        },
    }


def layout_schema_json() -> str:
    return json.dumps(layout_schema(), indent=2) + "\n"


def _put(vec: np.ndarray, name: str, values) -> None:
    values = np.asarray(values, dtype=np.float64).ravel()
    sl = BLOCK_SLICES[name]
    if values.size != sl.stop - sl.start:
        raise LayoutError(
            f"block '{name}' expects {sl.stop - sl.start} values, got {values.size}"
        )
    vec[sl] = values


def assemble(commands, heights, orientation_rpy, lin_vel, ang_vel,
             joint_pos, joint_vel, contacts, last_action,
             cpg: CpgState, out: np.ndarray | None = None) -> np.ndarray:
    """Concatenate the observation blocks in layout order into a 267-vector."""
    vec = out if out is not None else np.empty(OBS_SIZE)
    _put(vec, "commands", commands)
    _put(vec, "heights", heights)
    _put(vec, "orientation_rpy", orientation_rpy)
    _put(vec, "lin_vel", lin_vel)
    _put(vec, "ang_vel", ang_vel)
    _put(vec, "joint_pos", joint_pos)
    _put(vec, "joint_vel", joint_vel)
    _put(vec, "contacts", contacts)
    _put(vec, "last_action", last_action)
    _put(vec, "cpg_r_x", cpg.r_x)
    _put(vec, "cpg_rdot_x", cpg.rdot_x)
    _put(vec, "cpg_r_y", cpg.r_y)
    _put(vec, "cpg_rdot_y", cpg.rdot_y)
    wrapped = cpg.theta_wrapped()
    _put(vec, "cpg_cos_theta", np.cos(wrapped))
    _put(vec, "cpg_sin_theta", np.sin(wrapped))
    _put(vec, "cpg_theta_dot", cpg.theta_dot)
    return vec


class Observation:
    """A fully assembled observation vector with named block access."""

    def __init__(self, vector: np.ndarray):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (OBS_SIZE,):
            raise LayoutError(f"observation must have shape ({OBS_SIZE},), got {vector.shape}")
        self.vector = vector

    def block(self, name: str) -> np.ndarray:
        if name not in BLOCK_SLICES:
            raise LayoutError(f"unknown observation block '{name}'")
        return self.vector[BLOCK_SLICES[name]]


def build_observation(robot, cpg: CpgState, commands, last_action, heights) -> Observation:
    """Assemble an observation from a robot state snapshot.

    The robot snapshot must already be from the correct (possibly delayed)
    policy tick; only the oscillator block is required to be live.
    """
    vec = assemble(
        commands, heights,
        (robot.roll, robot.pitch, robot.yaw),
        robot.lin_vel, robot.ang_vel,
        robot.joint_pos, robot.joint_vel,
        robot.contacts, last_action, cpg,
    )
    return Observation(vec)


class DelayLine:
    """Ring buffer of per-tick sensor frames read back with a fixed shift.

    Frames are recorded once per policy tick; a delay of k ticks makes
    read() return the frame recorded k ticks ago, exactly (a pure shift, no
    interpolation). Before enough frames exist the earliest frame is
    returned with fresh=False (startup, not an error).
    """

    def __init__(self, frame_size: int, delay_steps: int, capacity: int | None = None):
        if delay_steps < 0:
            raise ValueError("delay must be non-negative")
        self.frame_size = int(frame_size)
        self.delay_steps = int(delay_steps)
        self.capacity = int(capacity) if capacity is not None else max(16, self.delay_steps + 2)
        if self.capacity <= self.delay_steps:
            raise ValueError("capacity must exceed the delay")
        self._buf = np.zeros((self.capacity, self.frame_size))
        self._count = 0

    @classmethod
    def for_delay(cls, frame_size: int, delay_s: float, period_s: float) -> "DelayLine":
        """Build a line for a delay given in seconds at a fixed record period."""
        steps = int(round(delay_s / period_s))
        if abs(steps * period_s - delay_s) > 1e-9:
            raise ValueError(
                f"delay {delay_s} s is not a multiple of the record period {period_s} s"
            )
        return cls(frame_size, steps)

    def record(self, frame) -> None:
        frame = np.asarray(frame, dtype=np.float64).ravel()
        if frame.size != self.frame_size:
            raise LayoutError(f"frame expects {self.frame_size} values, got {frame.size}")
        self._buf[self._count % self.capacity] = frame
        self._count += 1

    def read(self) -> tuple[np.ndarray, bool]:
        """Delayed view at the latest tick: (frame, fresh)."""
        if self._count == 0:
            return np.zeros(self.frame_size), False
        return self.read_at(self._count - 1)

    def read_at(self, tick: int) -> tuple[np.ndarray, bool]:
        """Delayed view at a given record index (0-based)."""
        if self._count == 0:
            return np.zeros(self.frame_size), False
        if tick >= self._count:
            raise IndexError(f"tick {tick} has not been recorded yet")
        idx = tick - self.delay_steps
        fresh = idx >= 0
        if idx < 0:
            idx = 0
        if idx < self._count - self.capacity:
            raise IndexError("requested frame has been evicted from the ring buffer")
        return self._buf[idx % self.capacity].copy(), fresh


def delayed_read(line: DelayLine, t: float, period_s: float = 0.01) -> tuple[np.ndarray, bool]:
    """Frame recorded at t - delay, where t indexes records at period_s.

    The first record is taken to be at t = 0. Before t reaches the delay the
    earliest frame is returned and flagged stale.
    """
    tick = int(round(t / period_s))
    return line.read_at(tick)


def expected_sensorimotor_delay(mass_kg: float) -> float:
    """Mass-scaling estimate of animal sensorimotor latency, in milliseconds.

    Follows the empirical cross-species power law 31 * m^0.21 (stimulus onset
    to peak muscle force, m in kg).
    """
    if mass_kg <= 0.0:
        raise ValueError("mass must be positive")
    return 31.0 * math.pow(mass_kg, 0.21)
