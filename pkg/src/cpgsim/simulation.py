"""Closed-loop quadruped episode simulation.

The control stack runs at two rates, policy decisions at 100 Hz and
everything below (oscillators, foot mapping, inverse kinematics, PD control,
base update) at 1 kHz, ten substeps per policy tick.

Base motion uses a kinematic model instead of rigid-body dynamics: feet in
stance are treated as pinned to the terrain, and the base follows the planar
least-squares twist that explains the commanded stance-foot sweep, scaled by
a stance transmission factor (default 0.5) calibrated so a locked trot
yields the documented open-loop speed law v = 2 * d_step * f * omega. Base
height tracks the stance support through a first-order filter, roll and
pitch stay level, and external pushes enter as an exponentially decaying
planar velocity residual. Joints follow the torque-limited PD response with
a per-joint effective inertia, which yields meaningful power and
joint-acceleration measurements without contact-force resolution.

Episodes are independent state machines with per-episode random streams;
any number may run in parallel without shared mutable state. A fixed
(seed, config, policy) triple reproduces an episode bit for bit.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import _kernels as K
from .gait import FootTarget, GaitShapeParams, foot_targets
from .kinematics import LegGeometry
from .metrics import EpisodeMetrics, RewardWeights, cost_of_transport, reward_terms
from .observations import (
    DelayLine,
    OBS_SIZE,
    PROPRIO_SIZE,
    assemble,
)
from .oscillators import (
    CpgNetworkConfig,
    CpgState,
    ModulationCommand,
    StateCorruptionError,
    initial_state,
    trot_config,
    trot_locked_state,
)
from .terrain import GRID_SIZE, Heightmap, sample_height_grid


class Status(str, enum.Enum):
    RUNNING = "running"
    COLLISION = "collision"
    TIMEOUT = "timeout"


# ---------------------------------------------------------------------------
# configuration


def _range_pair(value, name: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in value)
    if hi < lo:
        raise ValueError(f"{name} range has hi < lo")
    return (lo, hi)


@dataclass
class CpgSettings:
    """Oscillator network block of the episode config."""

    a: float = 50.0
    coupling_weight: float = 1.0
    dt_cpg: float = 0.001
    w: list | None = None
    phi: list | None = None
    init_phases: str = "random"

    def network_config(self) -> CpgNetworkConfig:
        if (self.w is None) != (self.phi is None):
            raise ValueError("provide both w and phi matrices, or neither")
        if self.w is not None:
            return CpgNetworkConfig(a_x=self.a, a_y=self.a,
                                    coupling_weights=np.asarray(self.w, dtype=np.float64),
                                    phase_biases=np.asarray(self.phi, dtype=np.float64),
                                    dt=self.dt_cpg)
        return trot_config(self.coupling_weight, a=self.a, dt=self.dt_cpg)


@dataclass
class GaitSettings:
    d_step: float = 0.15
    h: float = 0.3
    g_c: float = 0.05
    g_p: float = 0.01
    h_range: tuple[float, float] | None = None
    gc_range: tuple[float, float] | None = None
    gp_range: tuple[float, float] | None = None

    def sample(self, rng: np.random.Generator | None) -> GaitShapeParams:
        """Fixed deployment values, or per-episode draws when ranges are set."""
        h, g_c, g_p = self.h, self.g_c, self.g_p
        if rng is not None:
            if self.h_range is not None:
                h = rng.uniform(*self.h_range)
            if self.gc_range is not None:
                g_c = rng.uniform(*self.gc_range)
            if self.gp_range is not None:
                g_p = rng.uniform(*self.gp_range)
        return GaitShapeParams(d_step=self.d_step, h=h, g_c=g_c, g_p=g_p)


@dataclass
class LegSettings:
    hip_offset: float = 0.08
    l_thigh: float = 0.213
    l_calf: float = 0.213
    hip_x: float = 0.1881
    hip_y: float = 0.04675

    def geometry(self, side: int) -> LegGeometry:
        return LegGeometry(self.hip_offset, self.l_thigh, self.l_calf, side)

    def hip_positions(self) -> np.ndarray:
        """(4, 2) hip mounting points in the body frame, FL FR HL HR."""
        return np.array([
            [self.hip_x, self.hip_y],
            [self.hip_x, -self.hip_y],
            [-self.hip_x, self.hip_y],
            [-self.hip_x, -self.hip_y],
        ])


LEG_SIDES = np.array([1.0, -1.0, 1.0, -1.0])


@dataclass
class ControlSettings:
    kp: float = 100.0
    kd: float = 2.0
    tau_max: float = 23.7
    joint_inertia: float = 0.05


@dataclass
class BodySettings:
    """Collision geometry: base box half extents and thigh capsule radius."""

    half_length: float = 0.23
    half_width: float = 0.09
    half_height: float = 0.08
    thigh_radius: float = 0.03


@dataclass
class BaseModelSettings:
    """Knobs of the kinematic base-motion model.

    transmission scales the stance-sweep twist into base motion; 0.5
    calibrates the locked trot to the open-loop speed law (an ideal
    no-slip pin over the full stance half would give twice that).
    """

    transmission: float = 0.5
    z_time_constant: float = 0.05
    push_decay_time: float = 0.3


@dataclass
class CommandSettings:
    vx: tuple[float, float] = (-0.6, 0.6)
    vy: tuple[float, float] = (-0.4, 0.4)
    wz: tuple[float, float] = (-0.8, 0.8)
    resample_period: float = 5.0

    def __post_init__(self):
        self.vx = _range_pair(self.vx, "vx")
        self.vy = _range_pair(self.vy, "vy")
        self.wz = _range_pair(self.wz, "wz")


@dataclass
class RandomizationSettings:
    """Per-episode physical randomization ranges (training-style)."""

    enabled: bool = False
    mass_scale: tuple[float, float] = (0.7, 1.3)
    added_base_mass: tuple[float, float] = (0.0, 5.0)
    friction: tuple[float, float] = (0.3, 1.0)
    kp: tuple[float, float] = (55.0, 100.0)
    kd: tuple[float, float] = (0.7, 2.5)


@dataclass
class SensingSettings:
    extero_noise_std: float = 0.1
    extero_update_period: float = 0.1
    proprio_delay: float = 0.0
    extero_delay: float = 0.0


@dataclass
class EpisodeSettings:
    length: float = 20.0
    policy_dt: float = 0.01
    push_magnitude: float = 0.5
    push_period: float = 15.0


@dataclass
class RobotSettings:
    nominal_mass: float = 12.0
    friction: float = 1.0


@dataclass
class EpisodeConfig:
    """Complete description of one episode's model and protocol parameters."""

    cpg: CpgSettings = field(default_factory=CpgSettings)
    gait: GaitSettings = field(default_factory=GaitSettings)
    leg_geometry: LegSettings = field(default_factory=LegSettings)
    control: ControlSettings = field(default_factory=ControlSettings)
    body: BodySettings = field(default_factory=BodySettings)
    base_model: BaseModelSettings = field(default_factory=BaseModelSettings)
    commands: CommandSettings = field(default_factory=CommandSettings)
    randomization: RandomizationSettings = field(default_factory=RandomizationSettings)
    sensing: SensingSettings = field(default_factory=SensingSettings)
    episode: EpisodeSettings = field(default_factory=EpisodeSettings)
    robot: RobotSettings = field(default_factory=RobotSettings)

    @property
    def substeps_per_tick(self) -> int:
        n = self.episode.policy_dt / self.cpg.dt_cpg
        if abs(n - round(n)) > 1e-9:
            raise ValueError("policy_dt must be an integer multiple of dt_cpg")
        return int(round(n))

    def to_dict(self) -> dict:
        return _dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        cfg = cls()
        _update_dataclass(cfg, d, "config")
        return cfg


def _dataclass_to_dict(obj):
    if is_dataclass(obj):
        return {f.name: _dataclass_to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _update_dataclass(obj, d: dict, path: str) -> None:
    names = {f.name: f for f in fields(obj)}
    for key, value in d.items():
        if key not in names:
            raise ValueError(f"unknown config key '{path}.{key}'")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            _update_dataclass(current, value, f"{path}.{key}")
        elif isinstance(current, tuple) and isinstance(value, (list, tuple)):
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)
    # re-run validation on dataclasses that define it in __post_init__
    post = getattr(obj, "__post_init__", None)
    if post is not None:
        post()


# ---------------------------------------------------------------------------
# robot state and module-level operations


@dataclass
class RobotState:
    """Base, joint and contact state of the robot at one instant."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_pos: np.ndarray = field(default_factory=lambda: np.zeros(12))
    joint_vel: np.ndarray = field(default_factory=lambda: np.zeros(12))
    contacts: np.ndarray = field(default_factory=lambda: np.zeros(4))
    energy: float = 0.0
    power: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
        self.lin_vel = np.asarray(self.lin_vel, dtype=np.float64).reshape(3).copy()
        self.ang_vel = np.asarray(self.ang_vel, dtype=np.float64).reshape(3).copy()
        self.joint_pos = np.asarray(self.joint_pos, dtype=np.float64).reshape(12).copy()
        self.joint_vel = np.asarray(self.joint_vel, dtype=np.float64).reshape(12).copy()
        self.contacts = np.asarray(self.contacts, dtype=np.float64).reshape(4).copy()

    def copy(self) -> "RobotState":
        return RobotState(self.position, self.roll, self.pitch, self.yaw,
                          self.lin_vel, self.ang_vel, self.joint_pos,
                          self.joint_vel, self.contacts, self.energy, self.power)

    def is_finite(self) -> bool:
        vals = np.concatenate([self.position, self.lin_vel, self.ang_vel,
                               self.joint_pos, self.joint_vel,
                               [self.roll, self.pitch, self.yaw, self.energy]])
        return bool(np.isfinite(vals).all())


@dataclass(frozen=True)
class DynamicsParams:
    """Per-episode physical parameters; nominal unless randomization is on."""

    mass_scale: float = 1.0
    added_base_mass: float = 0.0
    friction: float = 1.0
    kp: float = 100.0
    kd: float = 2.0

    def total_mass(self, nominal_mass: float) -> float:
        return nominal_mass * self.mass_scale + self.added_base_mass


def randomize_dynamics(rng: np.random.Generator, cfg: EpisodeConfig) -> DynamicsParams:
    """Draw the per-episode physical parameters.

    Randomization off returns the nominal robot: unit mass scale (nominal
    mass), configured friction and deployment gains.
    """
    r = cfg.randomization
    if not r.enabled:
        return DynamicsParams(friction=cfg.robot.friction,
                              kp=cfg.control.kp, kd=cfg.control.kd)
    return DynamicsParams(
        mass_scale=rng.uniform(*r.mass_scale),
        added_base_mass=rng.uniform(*r.added_base_mass),
        friction=rng.uniform(*r.friction),
        kp=rng.uniform(*r.kp),
        kd=rng.uniform(*r.kd),
    )


def resample_commands(rng: np.random.Generator, cfg: EpisodeConfig) -> np.ndarray:
    """Uniform draw of (vx*, vy*, wz*) from the configured command ranges."""
    c = cfg.commands
    return np.array([
        rng.uniform(*c.vx),
        rng.uniform(*c.vy),
        rng.uniform(*c.wz),
    ])


def sample_push(rng: np.random.Generator, magnitude: float) -> np.ndarray:
    """Planar velocity impulse: uniform direction, norm uniform in [0, magnitude]."""
    if magnitude < 0.0:
        raise ValueError("push magnitude must be non-negative")
    if magnitude == 0.0:
        return np.zeros(2)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    norm = rng.uniform(0.0, magnitude)
    return np.array([norm * math.cos(angle), norm * math.sin(angle)])


def apply_push(robot: RobotState, rng: np.random.Generator, magnitude: float,
               mass_ratio: float = 1.0) -> RobotState:
    """Return a copy of the robot with a random planar velocity impulse added.

    mass_ratio (nominal over actual mass) scales the effect of the impulse;
    the resulting velocity change never exceeds the nominal magnitude.
    """
    delta = sample_push(rng, magnitude) * mass_ratio
    norm = float(np.hypot(delta[0], delta[1]))
    if norm > magnitude > 0.0:
        delta *= magnitude / norm
    out = robot.copy()
    out.lin_vel[0] += delta[0]
    out.lin_vel[1] += delta[1]
    return out


def solve_base_twist(foot_positions, foot_velocities) -> tuple[float, float, float]:
    """Least-squares planar twist (vx, vy, wz) pinning the given feet.

    foot_positions and foot_velocities are (n, 2) body-frame arrays of the
    stance feet and their commanded velocities.
    """
    p = np.asarray(foot_positions, dtype=np.float64).reshape(-1, 2)
    v = np.asarray(foot_velocities, dtype=np.float64).reshape(-1, 2)
    if p.shape != v.shape or p.shape[0] == 0:
        raise ValueError("need matching, non-empty position/velocity arrays")
    px = np.ascontiguousarray(p[:, 0])
    py = np.ascontiguousarray(p[:, 1])
    vx = np.ascontiguousarray(v[:, 0])
    vy = np.ascontiguousarray(v[:, 1])
    out = K.solve_base_twist(px, py, vx, vy, p.shape[0])
    return (float(out[0]), float(out[1]), float(out[2]))


def _par_vector(cfg: EpisodeConfig, dynamics: DynamicsParams,
                gait: GaitShapeParams, world: Heightmap) -> np.ndarray:
    par = np.zeros(K.PAR_SIZE)
    par[K.P_AX] = cfg.cpg.a
    par[K.P_AY] = cfg.cpg.a
    par[K.P_DT] = cfg.cpg.dt_cpg
    par[K.P_MU_MIN] = gait.mu_min
    par[K.P_MU_MAX] = gait.mu_max
    par[K.P_D_STEP] = gait.d_step
    par[K.P_H] = gait.h
    par[K.P_GC] = gait.g_c
    par[K.P_GP] = gait.g_p
    par[K.P_HIP_OFFSET] = cfg.leg_geometry.hip_offset
    par[K.P_L_THIGH] = cfg.leg_geometry.l_thigh
    par[K.P_L_CALF] = cfg.leg_geometry.l_calf
    par[K.P_KP] = dynamics.kp
    par[K.P_KD] = dynamics.kd
    par[K.P_TAU_MAX] = cfg.control.tau_max
    par[K.P_JOINT_INERTIA] = cfg.control.joint_inertia
    par[K.P_TRANSMISSION] = cfg.base_model.transmission
    par[K.P_Z_TAU] = cfg.base_model.z_time_constant
    par[K.P_PUSH_TAU] = cfg.base_model.push_decay_time
    par[K.P_SLIP_ACC_MAX] = dynamics.friction * 9.81
    par[K.P_BASE_HALF_LEN] = cfg.body.half_length
    par[K.P_BASE_HALF_WID] = cfg.body.half_width
    par[K.P_BASE_HALF_HEIGHT] = cfg.body.half_height
    par[K.P_THIGH_RADIUS] = cfg.body.thigh_radius
    par[K.P_MAP_X0] = world.x0
    par[K.P_MAP_Y0] = world.y0
    par[K.P_MAP_RES] = world.resolution
    return par


def check_termination(robot: RobotState, world: Heightmap,
                      cfg: EpisodeConfig | None = None,
                      t: float | None = None) -> Status:
    """Collision when the base box or a thigh capsule meets the terrain,
    Timeout once t reaches the episode length, Running otherwise."""
    cfg = cfg if cfg is not None else EpisodeConfig()
    base = np.zeros(K.BASE_SIZE)
    base[K.B_X], base[K.B_Y], base[K.B_Z] = robot.position
    base[K.B_YAW] = robot.yaw
    par = _par_vector(cfg, DynamicsParams(), GaitShapeParams(
        d_step=cfg.gait.d_step, h=cfg.gait.h, g_c=cfg.gait.g_c, g_p=cfg.gait.g_p), world)
    hips = cfg.leg_geometry.hip_positions()
    hit = K.check_collision(robot.joint_pos, base, hips, LEG_SIDES, par, world.heights)
    if hit:
        return Status.COLLISION
    if t is not None and t >= cfg.episode.length:
        return Status.TIMEOUT
    return Status.RUNNING


@dataclass
class StepEvents:
    """Side information from one 1 kHz substep."""

    contacts: np.ndarray
    collision: bool
    power: float


def simulate_step_1khz(robot: RobotState, cpg: CpgState, cmd: ModulationCommand,
                       world: Heightmap, cfg: EpisodeConfig | None = None,
                       dynamics: DynamicsParams | None = None
                       ) -> tuple[RobotState, CpgState, StepEvents]:
    """Advance the full model one 1 kHz substep (stateless convenience API).

    The robot's current planar velocity is treated as the held twist for the
    no-stance case; the persistent Episode runner keeps this state internally
    and should be preferred for whole episodes.
    """
    cfg = cfg if cfg is not None else EpisodeConfig()
    dynamics = dynamics if dynamics is not None else DynamicsParams(
        friction=cfg.robot.friction, kp=cfg.control.kp, kd=cfg.control.kd)
    if not robot.is_finite() or not cpg.is_finite():
        raise StateCorruptionError("non-finite simulation state")
    gait = GaitShapeParams(d_step=cfg.gait.d_step, h=cfg.gait.h,
                           g_c=cfg.gait.g_c, g_p=cfg.gait.g_p)
    par = _par_vector(cfg, dynamics, gait, world)
    cs = cpg.to_array()
    q = robot.joint_pos.copy()
    qd = robot.joint_vel.copy()
    base = np.zeros(K.BASE_SIZE)
    base[K.B_X], base[K.B_Y], base[K.B_Z] = robot.position
    base[K.B_YAW] = robot.yaw
    base[K.B_TVX], base[K.B_TVY] = robot.lin_vel[0], robot.lin_vel[1]
    base[K.B_VX], base[K.B_VY] = robot.lin_vel[0], robot.lin_vel[1]
    base[K.B_VZ] = robot.lin_vel[2]
    base[K.B_WZ] = robot.ang_vel[2]
    acc = np.zeros(K.ACC_SIZE)
    contacts = np.zeros(4)
    hips = cfg.leg_geometry.hip_positions()
    net = cfg.cpg.network_config()
    hit = K.run_substeps(1, cs, q, qd, base, acc, contacts,
                         cmd.mu_x, cmd.mu_y, cmd.omega_hz,
                         net.coupling_weights, net.phase_biases,
                         hips, LEG_SIDES, par, world.heights)
    out = RobotState(
        position=np.array([base[K.B_X], base[K.B_Y], base[K.B_Z]]),
        roll=0.0, pitch=0.0, yaw=base[K.B_YAW],
        lin_vel=np.array([base[K.B_VX], base[K.B_VY], base[K.B_VZ]]),
        ang_vel=np.array([0.0, 0.0, base[K.B_WZ]]),
        joint_pos=q, joint_vel=qd, contacts=contacts,
        energy=robot.energy + acc[K.A_ENERGY],
        power=acc[K.A_SUM_POWER],
    )
    events = StepEvents(contacts=contacts.copy(), collision=bool(hit),
                        power=acc[K.A_SUM_POWER])
    return out, CpgState.from_array(cs), events


# ---------------------------------------------------------------------------
# command scheduling


class CommandSource:
    """Produces the commanded (vx*, vy*, wz*) per policy tick.

    Modes: 'fixed' holds one command, 'resample' redraws from the config
    ranges every resample period, 'schedule' follows a list of timed entries
    {start, end, vx, vy, wz} (first match wins, zeros outside).
    """

    def __init__(self, mode: str, cfg: EpisodeConfig,
                 value=None, schedule: list[dict] | None = None):
        if mode not in ("fixed", "resample", "schedule"):
            raise ValueError(f"unknown command mode '{mode}'")
        self.mode = mode
        self.cfg = cfg
        self.value = np.zeros(3) if value is None else np.asarray(value, dtype=np.float64)
        self.schedule = schedule or []
        self.resample_ticks = max(
            1, int(round(cfg.commands.resample_period / cfg.episode.policy_dt)))

    def at_tick(self, tick: int, rng: np.random.Generator) -> np.ndarray:
        if self.mode == "fixed":
            return self.value
        if self.mode == "resample":
            if tick % self.resample_ticks == 0:
                self.value = resample_commands(rng, self.cfg)
            return self.value
        t = tick * self.cfg.episode.policy_dt
        for entry in self.schedule:
            if entry["start"] <= t < entry["end"]:
                return np.array([entry.get("vx", 0.0), entry.get("vy", 0.0),
                                 entry.get("wz", 0.0)])
        return np.zeros(3)


# ---------------------------------------------------------------------------
# traces


_CPG_COLS = [f"{name}_{leg}" for name in
             ("r_x", "rdot_x", "r_y", "rdot_y", "theta", "theta_dot")
             for leg in ("FL", "FR", "HL", "HR")]
_TERM_COLS = ["track_vx", "track_vy", "track_wz",
              "penalty_vz", "penalty_wxy", "penalty_power"]


@dataclass
class Trace:
    """Policy-rate recording of one episode.

    cpg rows follow the packed layout [r_x(4), rdot_x(4), r_y(4), rdot_y(4),
    theta(4), theta_dot(4)]. joint_vel_khz optionally carries the full 1 kHz
    joint velocity stream for acceleration analysis.
    """

    times: np.ndarray
    commands: np.ndarray
    base_pos: np.ndarray
    base_rpy: np.ndarray
    lin_vel: np.ndarray
    ang_vel: np.ndarray
    actions: np.ndarray
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    contacts: np.ndarray
    cpg: np.ndarray
    reward_total: np.ndarray
    reward_terms: np.ndarray
    power: np.ndarray
    dt: float
    mass: float
    status: str
    khz_dt: float = 0.001
    joint_vel_khz: np.ndarray | None = None
    observations: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.times)

    def column_names(self) -> list[str]:
        cols = ["time", "cmd_vx", "cmd_vy", "cmd_wz",
                "pos_x", "pos_y", "pos_z", "roll", "pitch", "yaw",
                "vel_x", "vel_y", "vel_z", "ang_x", "ang_y", "ang_z"]
        cols += [f"action_{i}" for i in range(12)]
        cols += [f"q_{i}" for i in range(12)]
        cols += [f"qd_{i}" for i in range(12)]
        cols += [f"contact_{leg}" for leg in ("FL", "FR", "HL", "HR")]
        cols += _CPG_COLS
        cols += ["reward_total"] + [f"reward_{t}" for t in _TERM_COLS]
        cols += ["power"]
        return cols

    def _row_matrix(self) -> np.ndarray:
        rpy = self.base_rpy
        return np.column_stack([
            self.times, self.commands, self.base_pos, rpy,
            self.lin_vel, self.ang_vel, self.actions,
            self.joint_pos, self.joint_vel, self.contacts, self.cpg,
            self.reward_total[:, None], self.reward_terms, self.power[:, None],
        ])

    def to_csv(self, path) -> None:
        mat = self._row_matrix()
        buf = io.StringIO()
        buf.write(",".join(self.column_names()) + "\n")
        for row in mat:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        with open(path, "w") as f:
            f.write(buf.getvalue())

    def to_jsonl(self, path) -> None:
        names = self.column_names()
        mat = self._row_matrix()
        with open(path, "w") as f:
            for row in mat:
                f.write(json.dumps({k: float(v) for k, v in zip(names, row)}) + "\n")


# ---------------------------------------------------------------------------
# episode runner


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    status: Status
    trace: Trace | None
    robot: RobotState


class Episode:
    """One closed-loop episode; single use (construct, run, read results).

    Random streams (initial phases, command draws, pushes, dynamics
    randomization, exteroceptive noise, gait sampling) derive from the one
    seed in a fixed order, so a seed fully determines the episode.
    """

    def __init__(self, world: Heightmap, config: EpisodeConfig, policy,
                 seed, command_source: CommandSource | None = None,
                 spawn=(0.0, 0.0, 0.0), reward_weights: RewardWeights | None = None):
        self.world = world
        self.cfg = config
        self.policy = policy
        self.spawn = spawn
        self.reward_weights = reward_weights if reward_weights is not None \
            else RewardWeights(dt=config.episode.policy_dt)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        (self._rng_phases, self._rng_commands, self._rng_push,
         self._rng_dynamics, self._rng_extero, self._rng_gait) = (
            np.random.default_rng(c) for c in ss.spawn(6))
        self.command_source = command_source if command_source is not None \
            else CommandSource("resample", config)
        self._reset()

    def _reset(self) -> None:
        cfg = self.cfg
        self.dynamics = randomize_dynamics(self._rng_dynamics, cfg)
        self.gait = cfg.gait.sample(
            self._rng_gait if (cfg.gait.h_range or cfg.gait.gc_range or cfg.gait.gp_range)
            else None)
        net = cfg.cpg.network_config()
        self._w = net.coupling_weights
        self._phi = net.phase_biases
        if cfg.cpg.init_phases == "trot":
            cpg0 = trot_locked_state()
        elif cfg.cpg.init_phases == "random":
            cpg0 = initial_state(self._rng_phases)
        else:
            raise ValueError(f"unknown init_phases mode '{cfg.cpg.init_phases}'")
        self.cs = cpg0.to_array()

        self.par = _par_vector(cfg, self.dynamics, self.gait, self.world)
        self.hips = cfg.leg_geometry.hip_positions()

        # joints start on the commanded targets, at rest
        targets = foot_targets(cpg0, self.gait)
        self.q = np.empty(12)
        for i in range(4):
            q1, q2, q3, _ = K.leg_ik(targets.x[i], targets.y[i], targets.z[i],
                                     LEG_SIDES[i] * cfg.leg_geometry.hip_offset,
                                     cfg.leg_geometry.l_thigh, cfg.leg_geometry.l_calf)
            self.q[3 * i:3 * i + 3] = (q1, q2, q3)
        self.qd = np.zeros(12)

        self.base = np.zeros(K.BASE_SIZE)
        self.base[K.B_X], self.base[K.B_Y], yaw0 = (float(v) for v in self.spawn)
        self.base[K.B_YAW] = yaw0
        self.base[K.B_Z] = self._initial_height(cpg0, targets)
        self.acc = np.zeros(K.ACC_SIZE)
        self.contacts = np.zeros(4)

        ticks = int(round(cfg.sensing.proprio_delay / cfg.episode.policy_dt))
        ext_ticks = int(round(cfg.sensing.extero_delay / cfg.episode.policy_dt))
        self._proprio_line = DelayLine(PROPRIO_SIZE, ticks)
        self._extero_line = DelayLine(GRID_SIZE, ext_ticks)
        self._extero_every = max(
            1, int(round(cfg.sensing.extero_update_period / cfg.episode.policy_dt)))
        self._heights_cache = np.zeros(GRID_SIZE)
        self.last_action = np.zeros(12)
        self.commands = np.zeros(3)
        self.tick = 0
        self.status = Status.RUNNING
        self._push_every = int(round(cfg.episode.push_period / cfg.episode.policy_dt))
        self._n_ticks = int(round(cfg.episode.length / cfg.episode.policy_dt))
        self._n_sub = cfg.substeps_per_tick
        self._obs_buf = np.empty(OBS_SIZE)
        self._mass = self.dynamics.total_mass(cfg.robot.nominal_mass)
        self._khz_sink: list | None = None
        self._tick_power = 0.0
        if self.policy.is_recurrent:
            self.policy.reset_state()

    def _initial_height(self, cpg0: CpgState, targets: FootTarget) -> float:
        """Support-consistent starting height for the spawn pose."""
        bx, by, yaw = (float(v) for v in self.spawn)
        c, s = math.cos(yaw), math.sin(yaw)
        z_sum, n = 0.0, 0
        for i in range(4):
            if K.is_swing(cpg0.theta[i]):
                continue
            fx = self.hips[i, 0] + targets.x[i]
            fy = self.hips[i, 1] + LEG_SIDES[i] * self.cfg.leg_geometry.hip_offset \
                + targets.y[i]
            h = self.world.height_at(bx + c * fx - s * fy, by + s * fx + c * fy)
            z_sum += h - targets.z[i]
            n += 1
        if n == 0:
            return self.world.height_at(bx, by) + self.gait.h
        return z_sum / n

    # -- per-tick pieces ----------------------------------------------------

    def _proprio_frame(self) -> np.ndarray:
        b = self.base
        return np.concatenate([
            (0.0, 0.0, b[K.B_YAW]),
            (b[K.B_VX], b[K.B_VY], b[K.B_VZ]),
            (0.0, 0.0, b[K.B_WZ]),
            self.q, self.qd, self.contacts,
        ])

    def _observation(self) -> np.ndarray:
        if self.tick % self._extero_every == 0:
            self._heights_cache = sample_height_grid(
                self.world,
                (self.base[K.B_X], self.base[K.B_Y], self.base[K.B_YAW]),
                self.cfg.sensing.extero_noise_std, self._rng_extero)
        self._proprio_line.record(self._proprio_frame())
        self._extero_line.record(self._heights_cache)
        proprio, _ = self._proprio_line.read()
        heights, _ = self._extero_line.read()
        cpg = CpgState.from_array(self.cs)
        return assemble(
            self.commands, heights,
            proprio[0:3], proprio[3:6], proprio[6:9],
            proprio[9:21], proprio[21:33], proprio[33:37],
            self.last_action, cpg, out=self._obs_buf,
        )

    def step_tick(self) -> Status:
        """Advance one policy tick: events, sensing, policy, ten substeps."""
        cfg = self.cfg
        self.commands = np.asarray(
            self.command_source.at_tick(self.tick, self._rng_commands), dtype=np.float64)
        if self.tick > 0 and self._push_every > 0 and self.tick % self._push_every == 0:
            delta = sample_push(self._rng_push, cfg.episode.push_magnitude)
            ratio = cfg.robot.nominal_mass / self._mass
            delta = delta * ratio
            norm = float(np.hypot(delta[0], delta[1]))
            if norm > cfg.episode.push_magnitude > 0.0:
                delta *= cfg.episode.push_magnitude / norm
            self.base[K.B_PUSH_X] += delta[0]
            self.base[K.B_PUSH_Y] += delta[1]

        obs = self._observation()
        action = self.policy.act(obs)
        cmd = ModulationCommand.from_action(action)
        self.last_action = np.concatenate([cmd.mu_x, cmd.mu_y, cmd.omega_hz])

        power_before = self.acc[K.A_SUM_POWER]
        if self._khz_sink is None:
            hit = K.run_substeps(
                self._n_sub, self.cs, self.q, self.qd, self.base, self.acc, self.contacts,
                cmd.mu_x, cmd.mu_y, cmd.omega_hz, self._w, self._phi,
                self.hips, LEG_SIDES, self.par, self.world.heights)
        else:
            # slow path: one substep per call so the 1 kHz joint stream is visible
            for _ in range(self._n_sub):
                hit = K.run_substeps(
                    1, self.cs, self.q, self.qd, self.base, self.acc, self.contacts,
                    cmd.mu_x, cmd.mu_y, cmd.omega_hz, self._w, self._phi,
                    self.hips, LEG_SIDES, self.par, self.world.heights)
                self._khz_sink.append(self.qd.copy())
        self._tick_power = (self.acc[K.A_SUM_POWER] - power_before) / self._n_sub
        self.tick += 1
        if hit:
            self.status = Status.COLLISION
        elif self.tick >= self._n_ticks:
            self.status = Status.TIMEOUT
        return self.status

    def robot_state(self) -> RobotState:
        b = self.base
        return RobotState(
            position=np.array([b[K.B_X], b[K.B_Y], b[K.B_Z]]),
            roll=0.0, pitch=0.0, yaw=b[K.B_YAW],
            lin_vel=np.array([b[K.B_VX], b[K.B_VY], b[K.B_VZ]]),
            ang_vel=np.array([0.0, 0.0, b[K.B_WZ]]),
            joint_pos=self.q.copy(), joint_vel=self.qd.copy(),
            contacts=self.contacts.copy(),
            energy=float(self.acc[K.A_ENERGY]),
            power=float(getattr(self, "_tick_power", 0.0)),
        )

    def run(self, record_trace: bool = False, record_joint_khz: bool = False,
            record_observations: bool = False) -> EpisodeResult:
        cfg = self.cfg
        n = self._n_ticks
        rec = None
        if record_trace:
            rec = {
                "times": np.empty(n), "commands": np.empty((n, 3)),
                "base_pos": np.empty((n, 3)), "base_rpy": np.empty((n, 3)),
                "lin_vel": np.empty((n, 3)), "ang_vel": np.empty((n, 3)),
                "actions": np.empty((n, 12)), "joint_pos": np.empty((n, 12)),
                "joint_vel": np.empty((n, 12)), "contacts": np.empty((n, 4)),
                "cpg": np.empty((n, 24)), "reward_total": np.empty(n),
                "reward_terms": np.empty((n, 6)), "power": np.empty(n),
            }
            if record_observations:
                rec["observations"] = np.empty((n, OBS_SIZE))
        khz: list | None = [] if record_joint_khz else None
        self._khz_sink = khz

        k = 0
        while self.status == Status.RUNNING and k < n:
            status = self.step_tick()
            if rec is not None:
                b = self.base
                rec["times"][k] = k * cfg.episode.policy_dt
                rec["commands"][k] = self.commands
                rec["base_pos"][k] = (b[K.B_X], b[K.B_Y], b[K.B_Z])
                rec["base_rpy"][k] = (0.0, 0.0, b[K.B_YAW])
                rec["lin_vel"][k] = (b[K.B_VX], b[K.B_VY], b[K.B_VZ])
                rec["ang_vel"][k] = (0.0, 0.0, b[K.B_WZ])
                rec["actions"][k] = self.last_action
                rec["joint_pos"][k] = self.q
                rec["joint_vel"][k] = self.qd
                rec["contacts"][k] = self.contacts
                rec["cpg"][k] = self.cs.ravel()
                total, terms = reward_terms(
                    rec["lin_vel"][k], rec["ang_vel"][k], self.commands,
                    self._tick_power, self.reward_weights)
                rec["reward_total"][k] = total
                rec["reward_terms"][k] = [terms[t2] for t2 in (
                    "track_vx", "track_vy", "track_wz",
                    "penalty_vz", "penalty_wxy", "penalty_power")]
                rec["power"][k] = self._tick_power
                if record_observations:
                    rec["observations"][k] = self._obs_buf
            k += 1
            if status != Status.RUNNING:
                break

        trace = None
        if rec is not None:
            obs = rec.get("observations")
            trace = Trace(
                times=rec["times"][:k], commands=rec["commands"][:k],
                base_pos=rec["base_pos"][:k], base_rpy=rec["base_rpy"][:k],
                lin_vel=rec["lin_vel"][:k], ang_vel=rec["ang_vel"][:k],
                actions=rec["actions"][:k], joint_pos=rec["joint_pos"][:k],
                joint_vel=rec["joint_vel"][:k], contacts=rec["contacts"][:k],
                cpg=rec["cpg"][:k], reward_total=rec["reward_total"][:k],
                reward_terms=rec["reward_terms"][:k], power=rec["power"][:k],
                dt=cfg.episode.policy_dt, mass=self._mass, status=self.status.value,
                joint_vel_khz=np.asarray(khz) if khz else None,
                khz_dt=cfg.cpg.dt_cpg,
                observations=obs[:k] if obs is not None else None,
            )
        return EpisodeResult(metrics=self._metrics(), status=self.status,
                             trace=trace, robot=self.robot_state())

    def _metrics(self) -> EpisodeMetrics:
        n = max(self.acc[K.A_N_SUB], 1.0)
        mean_power = float(self.acc[K.A_SUM_POWER] / n)
        mean_speed = float(self.acc[K.A_SUM_SPEED] / n)
        return EpisodeMetrics(
            cost_of_transport=cost_of_transport(mean_power, self._mass, mean_speed),
            mean_velocity=mean_speed,
            mean_frequency_hz=float(self.acc[K.A_SUM_THDOT] / n) / (2.0 * math.pi),
            mean_amplitude_rx=float(self.acc[K.A_SUM_RX] / n),
            success=self.status == Status.TIMEOUT,
            mean_angular_velocity=float(self.acc[K.A_SUM_ABS_WZ] / n),
            mean_joint_acceleration=float(self.acc[K.A_SUM_ABS_QDD] / n),
            mean_power=mean_power,
            duration=self.tick * self.cfg.episode.policy_dt,
            termination=self.status.value,
        )


def run_episode(world: Heightmap, config: EpisodeConfig, policy, seed,
                command_source: CommandSource | None = None,
                spawn=(0.0, 0.0, 0.0), record_trace: bool = False,
                record_joint_khz: bool = False,
                record_observations: bool = False) -> EpisodeResult:
    """Construct and run a single episode to completion."""
    ep = Episode(world, config, policy, seed, command_source=command_source, spawn=spawn)
    return ep.run(record_trace=record_trace, record_joint_khz=record_joint_khz,
                  record_observations=record_observations)
