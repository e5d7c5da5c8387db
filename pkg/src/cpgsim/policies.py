"""Control policies mapping observations to per-leg modulation commands.

Two network shapes are supported for inference: a feedforward net with
hidden layers [512, 256, 128] and a recurrent net with one 512-unit LSTM
layer followed by dense layers [256, 128]. Both squash their 12 outputs with
tanh and scale them linearly onto the command ranges (amplitudes to [1, 2],
frequencies to [0, 4.5] Hz), so the midpoint command corresponds to a zero
raw output. Scripted open-loop policies cover testing and baseline runs.

Weights live in a self-describing binary file: a JSON header declaring the
architecture and tensor list, followed by the raw float32 tensors and a
CRC-32 of the payload. Network arithmetic is float32 end to end, which makes
save/load round trips bit-exact.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from .observations import OBS_SIZE, LayoutError, Observation
from .oscillators import MU_RANGE, OMEGA_RANGE_HZ, ModulationCommand

ACTION_SIZE = 12
MLP_HIDDEN = (512, 256, 128)
LSTM_UNITS = 512
LSTM_HIDDEN = (256, 128)

_MAGIC = b"CPGW"
_FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Weight file rejected: bad container, shape mismatch, or corruption."""


@dataclass(frozen=True)
class ActionScaler:
    """Per-channel linear map from squashed outputs in [-1, 1] to commands."""

    lows: np.ndarray
    highs: np.ndarray

    @classmethod
    def default(cls) -> "ActionScaler":
        lows = np.array([MU_RANGE[0]] * 8 + [OMEGA_RANGE_HZ[0]] * 4, dtype=np.float64)
        highs = np.array([MU_RANGE[1]] * 8 + [OMEGA_RANGE_HZ[1]] * 4, dtype=np.float64)
        return cls(lows, highs)

    def __post_init__(self):
        object.__setattr__(self, "lows", np.asarray(self.lows, dtype=np.float64))
        object.__setattr__(self, "highs", np.asarray(self.highs, dtype=np.float64))
        if self.lows.shape != (ACTION_SIZE,) or self.highs.shape != (ACTION_SIZE,):
            raise ValueError("scaler bounds must be 12-vectors")
        if not (self.lows < self.highs).all():
            raise ValueError("each channel needs low < high")

    def scale(self, raw: np.ndarray) -> np.ndarray:
        """Map raw in [-1, 1] to the command ranges (inputs are clamped)."""
        raw = np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)
        return self.lows + (raw + 1.0) * 0.5 * (self.highs - self.lows)


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.float32(1.0) / (np.float32(1.0) + np.exp(-x))


def _as_f32(name: str, value, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float32)
    if arr.shape != shape:
        raise WeightFormatError(f"tensor '{name}' must have shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise WeightFormatError(f"tensor '{name}' contains non-finite values")
    return arr


class MlpPolicy:
    """Feedforward policy; evaluation is a pure function of the observation."""

    kind = "mlp"
    is_recurrent = False

    def __init__(self, weights: dict[str, np.ndarray], obs_size: int = OBS_SIZE,
                 scaler: ActionScaler | None = None):
        self.obs_size = int(obs_size)
        self.scaler = scaler if scaler is not None else ActionScaler.default()
        sizes = (self.obs_size,) + MLP_HIDDEN + (ACTION_SIZE,)
        self.weights = {}
        names = [f"fc{i}" for i in range(len(MLP_HIDDEN))] + ["head"]
        for li, name in enumerate(names):
            self.weights[f"{name}.w"] = _as_f32(
                f"{name}.w", weights[f"{name}.w"], (sizes[li + 1], sizes[li]))
            self.weights[f"{name}.b"] = _as_f32(
                f"{name}.b", weights[f"{name}.b"], (sizes[li + 1],))

    def reset_state(self) -> None:
        pass

    def raw_output(self, obs: np.ndarray) -> np.ndarray:
        h = np.asarray(obs, dtype=np.float32)
        for i in range(len(MLP_HIDDEN)):
            h = _elu(self.weights[f"fc{i}.w"] @ h + self.weights[f"fc{i}.b"])
        return np.tanh(self.weights["head.w"] @ h + self.weights["head.b"])

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.scaler.scale(self.raw_output(obs))


class LstmPolicy:
    """Recurrent policy; carries (hidden, cell) state across calls.

    Gate layout in the stacked kernels is [input, forget, cell, output].
    reset_state() must be called at episode starts; each act() advances the
    recurrent state exactly once.
    """

    kind = "lstm"
    is_recurrent = True

    def __init__(self, weights: dict[str, np.ndarray], obs_size: int = OBS_SIZE,
                 scaler: ActionScaler | None = None):
        self.obs_size = int(obs_size)
        self.scaler = scaler if scaler is not None else ActionScaler.default()
        g = 4 * LSTM_UNITS
        self.weights = {
            "lstm.w_ih": _as_f32("lstm.w_ih", weights["lstm.w_ih"], (g, self.obs_size)),
            "lstm.w_hh": _as_f32("lstm.w_hh", weights["lstm.w_hh"], (g, LSTM_UNITS)),
            "lstm.b": _as_f32("lstm.b", weights["lstm.b"], (g,)),
        }
        sizes = (LSTM_UNITS,) + LSTM_HIDDEN + (ACTION_SIZE,)
        names = [f"fc{i}" for i in range(len(LSTM_HIDDEN))] + ["head"]
        for li, name in enumerate(names):
            self.weights[f"{name}.w"] = _as_f32(
                f"{name}.w", weights[f"{name}.w"], (sizes[li + 1], sizes[li]))
            self.weights[f"{name}.b"] = _as_f32(
                f"{name}.b", weights[f"{name}.b"], (sizes[li + 1],))
        self.hidden = np.zeros(LSTM_UNITS, dtype=np.float32)
        self.cell = np.zeros(LSTM_UNITS, dtype=np.float32)

    def reset_state(self) -> None:
        self.hidden[:] = 0.0
        self.cell[:] = 0.0

    def raw_output(self, obs: np.ndarray) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float32)
        gates = self.weights["lstm.w_ih"] @ x + self.weights["lstm.w_hh"] @ self.hidden \
            + self.weights["lstm.b"]
        n = LSTM_UNITS
        i = _sigmoid(gates[0:n])
        f = _sigmoid(gates[n:2 * n])
        g = np.tanh(gates[2 * n:3 * n])
        o = _sigmoid(gates[3 * n:4 * n])
        self.cell = f * self.cell + i * g
        self.hidden = o * np.tanh(self.cell)
        h = self.hidden
        for li in range(len(LSTM_HIDDEN)):
            h = _elu(self.weights[f"fc{li}.w"] @ h + self.weights[f"fc{li}.b"])
        return np.tanh(self.weights["head.w"] @ h + self.weights["head.b"])

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.scaler.scale(self.raw_output(obs))


def _mlp_tensor_shapes(obs_size: int) -> list[tuple[str, tuple[int, ...]]]:
    sizes = (obs_size,) + MLP_HIDDEN + (ACTION_SIZE,)
    names = [f"fc{i}" for i in range(len(MLP_HIDDEN))] + ["head"]
    out = []
    for li, name in enumerate(names):
        out.append((f"{name}.w", (sizes[li + 1], sizes[li])))
        out.append((f"{name}.b", (sizes[li + 1],)))
    return out


def _lstm_tensor_shapes(obs_size: int) -> list[tuple[str, tuple[int, ...]]]:
    g = 4 * LSTM_UNITS
    out = [("lstm.w_ih", (g, obs_size)), ("lstm.w_hh", (g, LSTM_UNITS)), ("lstm.b", (g,))]
    sizes = (LSTM_UNITS,) + LSTM_HIDDEN + (ACTION_SIZE,)
    names = [f"fc{i}" for i in range(len(LSTM_HIDDEN))] + ["head"]
    for li, name in enumerate(names):
        out.append((f"{name}.w", (sizes[li + 1], sizes[li])))
        out.append((f"{name}.b", (sizes[li + 1],)))
    return out


def zero_mlp(obs_size: int = OBS_SIZE) -> MlpPolicy:
    return MlpPolicy({n: np.zeros(s, np.float32) for n, s in _mlp_tensor_shapes(obs_size)},
                     obs_size=obs_size)


def zero_lstm(obs_size: int = OBS_SIZE) -> LstmPolicy:
    return LstmPolicy({n: np.zeros(s, np.float32) for n, s in _lstm_tensor_shapes(obs_size)},
                      obs_size=obs_size)


def random_mlp(rng: np.random.Generator, obs_size: int = OBS_SIZE,
               scale: float = 0.1) -> MlpPolicy:
    w = {n: (rng.standard_normal(s) * scale).astype(np.float32)
         for n, s in _mlp_tensor_shapes(obs_size)}
    return MlpPolicy(w, obs_size=obs_size)


def random_lstm(rng: np.random.Generator, obs_size: int = OBS_SIZE,
                scale: float = 0.1) -> LstmPolicy:
    w = {n: (rng.standard_normal(s) * scale).astype(np.float32)
         for n, s in _lstm_tensor_shapes(obs_size)}
    return LstmPolicy(w, obs_size=obs_size)


class ConstantPolicy:
    """Emits one fixed modulation command every tick."""

    kind = "constant"
    is_recurrent = False

    def __init__(self, mu_x: float = 2.0, mu_y: float = 1.5, omega_hz: float = 2.0,
                 obs_size: int = OBS_SIZE):
        self.obs_size = int(obs_size)
        cmd = ModulationCommand(mu_x, mu_y, omega_hz)
        self._action = np.concatenate([cmd.mu_x, cmd.mu_y, cmd.omega_hz])

    def reset_state(self) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self._action.copy()


class VelocityProportionalPolicy:
    """Open-loop tracking of the commanded forward velocity.

    On flat ground a locked trot covers 2 * d_step * f per cycle, so the mean
    speed is v = 2 * d_step * f * omega. Among the (f, omega) pairs solving
    that for the commanded v, the lowest-frequency branch uses the full
    amplitude |f| = 1; the sign of f selects the direction. A zero command
    parks the gait: amplitude at the range bottom and zero frequency.
    """

    kind = "vprop"
    is_recurrent = False

    def __init__(self, d_step: float = 0.15, mu_y: float = 1.5,
                 obs_size: int = OBS_SIZE):
        if d_step <= 0.0:
            raise ValueError("d_step must be positive")
        self.d_step = float(d_step)
        self.mu_y = float(mu_y)
        self.obs_size = int(obs_size)

    def reset_state(self) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        v_cmd = float(np.asarray(obs).ravel()[0])
        if v_cmd == 0.0:
            mu_x, omega = MU_RANGE[0], 0.0
        else:
            mu_x = MU_RANGE[1] if v_cmd > 0.0 else MU_RANGE[0]
            omega = min(abs(v_cmd) / (2.0 * self.d_step), OMEGA_RANGE_HZ[1])
        out = np.empty(ACTION_SIZE)
        out[0:4] = mu_x
        out[4:8] = self.mu_y
        out[8:12] = omega
        return out


def scripted_policy(kind: str, params: dict | None = None):
    """Factory for the open-loop baselines: 'constant' or 'velocity-proportional'."""
    params = dict(params or {})
    if kind == "constant":
        return ConstantPolicy(**params)
    if kind in ("velocity-proportional", "vprop"):
        return VelocityProportionalPolicy(**params)
    raise ValueError(f"unknown scripted policy kind '{kind}'")


def evaluate(policy, obs) -> ModulationCommand:
    """Run one policy evaluation and split the action into a command.

    Recurrent policies advance their carried state exactly once per call.
    """
    vec = obs.vector if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
    expected = getattr(policy, "obs_size", OBS_SIZE)
    if vec.shape != (expected,):
        raise LayoutError(f"policy expects observation of shape ({expected},), got {vec.shape}")
    return ModulationCommand.from_action(policy.act(vec))


def save_weights(policy, path) -> None:
    """Write a policy's tensors in the self-describing binary format."""
    if policy.kind == "mlp":
        shapes = _mlp_tensor_shapes(policy.obs_size)
    elif policy.kind == "lstm":
        shapes = _lstm_tensor_shapes(policy.obs_size)
    else:
        raise WeightFormatError(f"policy kind '{policy.kind}' has no weight file form")
    header = {
        "format_version": _FORMAT_VERSION,
        "kind": policy.kind,
        "obs_size": policy.obs_size,
        "action_size": ACTION_SIZE,
        "activation": "elu",
        "squash": "tanh",
        "tensors": [{"name": n, "shape": list(s)} for n, s in shapes],
    }
    payload = b"".join(policy.weights[n].tobytes() for n, _ in shapes)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(head).to_bytes(4, "little"))
        f.write(head)
        f.write(payload)
        f.write(zlib.crc32(payload).to_bytes(4, "little"))


def load_weights(path, expect: str | None = None):
    """Load a policy from a weight file, validating layout and checksum.

    expect, when given ('mlp' or 'lstm'), rejects files of the other kind;
    the error names the first missing tensor so mixups are easy to spot.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise WeightFormatError(f"{path}: not a policy weight file")
    head_len = int.from_bytes(blob[4:8], "little")
    if len(blob) < 8 + head_len + 4:
        raise WeightFormatError(f"{path}: file truncated inside the header")
    try:
        header = json.loads(blob[8:8 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFormatError(f"{path}: unreadable header ({e})") from e
    if header.get("format_version") != _FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version "
                                f"{header.get('format_version')}")
    kind = header.get("kind")
    if kind not in ("mlp", "lstm"):
        raise WeightFormatError(f"{path}: unknown policy kind '{kind}'")
    obs_size = int(header.get("obs_size", OBS_SIZE))
    if expect is not None and expect != kind:
        expected_shapes = _lstm_tensor_shapes(obs_size) if expect == "lstm" \
            else _mlp_tensor_shapes(obs_size)
        present = {t["name"] for t in header.get("tensors", [])}
        missing = [n for n, _ in expected_shapes if n not in present]
        first = missing[0] if missing else expected_shapes[0][0]
        raise WeightFormatError(
            f"{path}: expected a '{expect}' policy but file holds '{kind}' "
            f"(missing tensor '{first}')"
        )
    shapes = _mlp_tensor_shapes(obs_size) if kind == "mlp" else _lstm_tensor_shapes(obs_size)
    declared = [(t["name"], tuple(t["shape"])) for t in header.get("tensors", [])]
    if declared != shapes:
        for (dn, ds), (en, es) in zip(declared, shapes):
            if dn != en or ds != es:
                raise WeightFormatError(
                    f"{path}: tensor '{dn}' has shape {list(ds)}, expected "
                    f"'{en}' with shape {list(es)}"
                )
        raise WeightFormatError(f"{path}: tensor list does not match the '{kind}' layout")
    payload_len = sum(int(np.prod(s)) for _, s in shapes) * 4
    body = blob[8 + head_len:]
    if len(body) != payload_len + 4:
        raise WeightFormatError(
            f"{path}: file truncated (payload {len(body) - 4} bytes, expected {payload_len})"
        )
    payload, crc_bytes = body[:payload_len], body[payload_len:]
    if zlib.crc32(payload) != int.from_bytes(crc_bytes, "little"):
        raise WeightFormatError(f"{path}: payload checksum mismatch")
    weights = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        weights[name] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset
        ).reshape(shape).copy()
        offset += count * 4
    cls = MlpPolicy if kind == "mlp" else LstmPolicy
    return cls(weights, obs_size=obs_size)
