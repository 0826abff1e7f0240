"""Procedural generator of paired human/robot motion trials, plus dataset IO.

The generator stands in for a motion-capture corpus of collaborative table
work.  Each trial is a sequence of segments: idle rests at a canonical pose
interleaved with activities drawn from {reach, handover, avoid, idle}.  The
robot is a serial kinematic chain following waypoint programs with
minimum-jerk joint profiles; the human skeleton is animated by keypose
interpolation and reacts to the robot:

* handover — the robot parks its end effector in a shared zone and the human
  wrist converges onto it (within 8 cm) after a reaction delay, so observed
  robot motion predicts human motion before the human starts moving;
* avoid — the robot sweeps into the human's workspace and a repulsion field
  pushes the upper body away, with a hard floor on the torso clearance.

Because every activity starts and ends at the same rest pose, observation
windows ending during rests look alike while their futures differ by the next
sampled activity — this is what makes the dataset genuinely multi-modal.

Everything is a pure function of (config seed, trial seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .motion import MotionSequence

MODES = ("reach", "handover", "avoid", "idle")
MODE_IDS = {m: i for i, m in enumerate(MODES)}

JOINT_NAMES = (
    "head", "neck", "torso", "pelvis",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

DEFAULT_LINKS = (0.16, 0.30, 0.28, 0.12, 0.10, 0.08)

# Workspace zones in the robot-base frame (x toward the human, z up), meters.
_ROBOT_ZONE = (np.array([0.15, -0.45, 0.00]), np.array([0.55, 0.45, 0.50]))
_HANDOVER_ZONE = (np.array([0.58, -0.25, 0.15]), np.array([0.82, 0.25, 0.40]))
_INTRUDE_ZONE = (np.array([0.85, -0.30, 0.10]), np.array([1.10, 0.30, 0.50]))

_SOFT_RADIUS = 0.35   # repulsion starts inside this end-effector distance
_HARD_FLOOR = 0.22    # torso clearance enforced exactly
_HANDOVER_REACH = 0.08


@dataclass
class ScenarioConfig:
    """Knobs of the procedural generator."""

    J: int = 16
    K: int = 7
    link_lengths: tuple = DEFAULT_LINKS
    trial_length: int = 600
    mode_probs: dict = field(default_factory=lambda: {
        "reach": 0.35, "handover": 0.30, "avoid": 0.20, "idle": 0.15,
    })
    noise_scale: float = 0.008
    seed: int = 0

    def __post_init__(self):
        self.link_lengths = tuple(float(x) for x in self.link_lengths)
        if self.J != len(JOINT_NAMES):
            raise ConfigError(f"this generator models J={len(JOINT_NAMES)} joints")
        if self.K != len(self.link_lengths) + 1:
            raise ConfigError("K must equal len(link_lengths) + 1")
        if any(l <= 0 for l in self.link_lengths):
            raise ConfigError("link lengths must be positive")
        if set(self.mode_probs) != set(MODES):
            raise ConfigError(f"mode_probs must cover exactly {MODES}")
        total = sum(self.mode_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mode_probs sum to {total}, expected 1")
        if self.trial_length < 1:
            raise ConfigError("trial_length must be positive")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")


@dataclass
class Segment:
    start: int
    end: int  # exclusive
    mode: str


@dataclass
class Trial:
    human: MotionSequence
    robot: MotionSequence
    segments: list

    def __len__(self):
        return len(self.human)

    def mode_at(self, frame: int) -> str:
        for seg in self.segments:
            if seg.start <= frame < seg.end:
                return seg.mode
        raise ConfigError(f"frame {frame} outside trial of length {len(self)}")


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    @staticmethod
    def default(n_trials: int) -> "DatasetSplit":
        """24/4/4 proportions, scaled to n_trials; indices stay disjoint."""
        n_train = max(1, n_trials * 24 // 32)
        n_val = max(1, n_trials * 4 // 32)
        if n_train + n_val >= n_trials:
            raise ConfigError(f"cannot split {n_trials} trials into train/val/test")
        return DatasetSplit(
            train=list(range(n_train)),
            val=list(range(n_train, n_train + n_val)),
            test=list(range(n_train + n_val, n_trials)),
        )


# -- robot kinematics -----------------------------------------------------------
def _rot_z(t: float) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(t: float) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def robot_fk(joint_angles: np.ndarray, link_lengths) -> np.ndarray:
    """Keypoints of a serial chain with alternating yaw/pitch joints.

    Keypoint 0 sits at the origin (robot base); keypoint i+1 extends from
    keypoint i by link i along the chain's cumulatively rotated x axis.
    """
    angles = np.asarray(joint_angles, dtype=np.float64)
    K = len(link_lengths) + 1
    pts = np.zeros((K, 3))
    R = np.eye(3)
    for i in range(K - 1):
        R = R @ (_rot_z(angles[i]) if i % 2 == 0 else _rot_y(angles[i]))
        pts[i + 1] = pts[i] + R @ np.array([link_lengths[i], 0.0, 0.0])
    return pts


def robot_fk_trajectory(angle_traj: np.ndarray, link_lengths) -> np.ndarray:
    """(L, K-1) joint angles -> (L, K, 3) keypoint trajectory."""
    return np.stack([robot_fk(q, link_lengths) for q in angle_traj])


def _min_jerk(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


def _min_jerk_move(q0: np.ndarray, q1: np.ndarray, n: int) -> np.ndarray:
    s = _min_jerk(np.linspace(0.0, 1.0, n, endpoint=False))
    return q0[None, :] + s[:, None] * (q1 - q0)[None, :]


_Q_HOME = np.array([0.0, 0.55, -0.95, 0.35, 0.45, 0.0])
_Q_LIMIT = 2.6


def _sample_config_in_zone(rng, link_lengths, zone, tries: int = 60) -> np.ndarray:
    """Rejection-sample joint angles whose end effector lands inside a box zone."""
    lo, hi = zone
    center = 0.5 * (lo + hi)
    best_q, best_d = None, np.inf
    n_joints = len(link_lengths)
    for _ in range(tries):
        q = rng.uniform(-_Q_LIMIT, _Q_LIMIT, size=n_joints)
        ee = robot_fk(q, link_lengths)[-1]
        if np.all(ee >= lo) and np.all(ee <= hi):
            return q
        d = np.linalg.norm(ee - center)
        if d < best_d:
            best_q, best_d = q, d
    return best_q


# -- human skeleton ---------------------------------------------------------------
def _rest_pose() -> np.ndarray:
    pelvis = np.array([1.05, 0.0, 0.0])
    offsets = {
        "head": (-0.03, 0.0, 0.64),
        "neck": (-0.03, 0.0, 0.50),
        "torso": (-0.02, 0.0, 0.28),
        "pelvis": (0.0, 0.0, 0.0),
        "l_shoulder": (-0.03, 0.21, 0.46),
        "l_elbow": (-0.06, 0.27, 0.20),
        "l_wrist": (-0.18, 0.25, 0.02),
        "r_shoulder": (-0.03, -0.21, 0.46),
        "r_elbow": (-0.06, -0.27, 0.20),
        "r_wrist": (-0.18, -0.25, 0.02),
        "l_hip": (0.0, 0.10, -0.05),
        "l_knee": (0.02, 0.11, -0.45),
        "l_ankle": (0.04, 0.12, -0.85),
        "r_hip": (0.0, -0.10, -0.05),
        "r_knee": (0.02, -0.11, -0.45),
        "r_ankle": (0.04, -0.12, -0.85),
    }
    return np.stack([pelvis + np.array(offsets[n]) for n in JOINT_NAMES])


# Follow-through coupling: how much of the active wrist's displacement each
# joint inherits, and how much of that leaks into the vertical axis.
_FOLLOW = {
    "elbow": 0.55, "shoulder": 0.28, "torso": 0.10, "neck": 0.08, "head": 0.07,
    "pelvis": 0.04, "hip": 0.03, "knee": 0.015,
}
_VERTICAL_DAMP = np.array([1.0, 1.0, 0.35])


def _idx(name: str) -> int:
    return JOINT_NAMES.index(name)


def _arm_reach_motion(frames: np.ndarray, rest: np.ndarray, side: str, target: np.ndarray,
                      f_start: int, f_arrive: int, f_leave: int, f_end: int):
    """Animate one arm reaching a point, with whole-body follow-through.

    frames: (n, J, 3) array, modified in place; indices are segment-local.
    """
    wrist = _idx(f"{side}_wrist")
    rest_wrist = rest[wrist]
    n = frames.shape[0]
    t = np.arange(n, dtype=np.float64)

    progress = np.zeros(n)
    go = (t >= f_start) & (t < f_arrive)
    progress[go] = _min_jerk((t[go] - f_start) / max(f_arrive - f_start, 1))
    progress[(t >= f_arrive) & (t < f_leave)] = 1.0
    back = (t >= f_leave) & (t < f_end)
    progress[back] = 1.0 - _min_jerk((t[back] - f_leave) / max(f_end - f_leave, 1))

    disp = progress[:, None] * (target - rest_wrist)[None, :]
    frames[:, wrist] += disp
    for joint, factor in (
        (f"{side}_elbow", _FOLLOW["elbow"]),
        (f"{side}_shoulder", _FOLLOW["shoulder"]),
        ("torso", _FOLLOW["torso"]),
        ("neck", _FOLLOW["neck"]),
        ("head", _FOLLOW["head"]),
        ("pelvis", _FOLLOW["pelvis"]),
        (f"{side}_hip", _FOLLOW["hip"]),
        (f"{side}_knee", _FOLLOW["knee"]),
    ):
        frames[:, _idx(joint)] += factor * disp * _VERTICAL_DAMP[None, :]


def _smooth_noise(rng, shape, scale: float, sigma: float = 5.0) -> np.ndarray:
    """Low-pass-filtered Gaussian noise with per-sample std ~= scale."""
    if scale == 0.0:
        return np.zeros(shape)
    half = int(3 * sigma)
    kernel = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    kernel /= np.linalg.norm(kernel)
    white = rng.standard_normal((shape[0] + 2 * half,) + shape[1:])
    out = np.empty(shape)
    flat_in = white.reshape(white.shape[0], -1)
    flat_out = out.reshape(shape[0], -1)
    for c in range(flat_in.shape[1]):
        flat_out[:, c] = np.convolve(flat_in[:, c], kernel, mode="valid")
    return out * scale


# -- trial generation ----------------------------------------------------------------
def _plan_segments(rng, L: int, mode_probs: dict) -> list:
    segments = []
    cursor = 0
    names = list(MODES)
    probs = np.array([mode_probs[m] for m in names])
    while cursor < L:
        rest_len = int(rng.integers(55, 76))
        rest_end = min(cursor + rest_len, L)
        segments.append(Segment(cursor, rest_end, "idle"))
        cursor = rest_end
        if cursor >= L:
            break
        mode = names[int(rng.choice(len(names), p=probs))]
        act_len = int(rng.integers(130, 161))
        act_end = min(cursor + act_len, L)
        segments.append(Segment(cursor, act_end, mode))
        cursor = act_end
    return segments


def generate_trial(cfg: ScenarioConfig, trial_seed: int, min_length: int | None = None) -> Trial:
    """One paired human/robot trial, bit-deterministic per (cfg.seed, trial_seed)."""
    if min_length is not None and cfg.trial_length < min_length:
        raise ConfigError(
            f"trial_length {cfg.trial_length} shorter than required {min_length}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, int(trial_seed)]))
    L = cfg.trial_length
    links = cfg.link_lengths
    segments = _plan_segments(rng, L, cfg.mode_probs)

    # --- robot joint program: per segment, a waypoint move + hold -------------
    q_traj = np.zeros((L, len(links)))
    q_cur = _Q_HOME + rng.uniform(-0.08, 0.08, size=len(links))
    for seg in segments:
        n = seg.end - seg.start
        if seg.mode == "idle":
            q_target = _Q_HOME + rng.uniform(-0.15, 0.15, size=len(links))
            move = max(int(n * 0.6), 1)
        elif seg.mode == "reach":
            q_target = _sample_config_in_zone(rng, links, _ROBOT_ZONE)
            move = max(int(n * 0.5), 1)
        elif seg.mode == "handover":
            q_target = _sample_config_in_zone(rng, links, _HANDOVER_ZONE)
            move = max(int(n * 0.45), 1)
        else:  # avoid
            q_target = _sample_config_in_zone(rng, links, _INTRUDE_ZONE)
            move = max(int(n * 0.5), 1)
        q_traj[seg.start:seg.start + move] = _min_jerk_move(q_cur, q_target, move)
        q_traj[seg.start + move:seg.end] = q_target
        q_cur = q_target
        if seg.mode == "avoid":
            # retreat over the last fifth so the intrusion is an in-and-out sweep
            retreat = max(int(n * 0.2), 1)
            q_back = q_target + 0.5 * (_Q_HOME - q_target)
            q_traj[seg.end - retreat:seg.end] = _min_jerk_move(q_target, q_back, retreat)
            q_cur = q_traj[seg.end - 1]

    q_traj += _smooth_noise(rng, q_traj.shape, cfg.noise_scale * 1.5, sigma=7.0)
    robot_pts = robot_fk_trajectory(q_traj, links)          # (L, K, 3)
    ee = robot_pts[:, -1, :]

    # --- human skeleton ---------------------------------------------------------
    rest = _rest_pose()
    human = np.tile(rest[None, :, :], (L, 1, 1))
    for seg in segments:
        n = seg.end - seg.start
        if seg.mode == "idle" or n < 20:
            continue
        view = human[seg.start:seg.end]
        if seg.mode == "reach":
            side = "l" if rng.random() < 0.5 else "r"
            y_sign = 1.0 if side == "l" else -1.0
            target = np.array([
                rng.uniform(0.55, 0.95),
                y_sign * rng.uniform(0.0, 0.35),
                rng.uniform(0.0, 0.20),
            ])
            _arm_reach_motion(view, rest, side, target,
                              int(n * 0.05), int(n * 0.45), int(n * 0.65), n - 1)
        elif seg.mode == "handover":
            f_arrive = int(n * 0.70)                       # handover instant
            ee_at_handover = ee[seg.start + f_arrive]
            side = "l" if ee_at_handover[1] > 0 else "r"
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            offset = direction * rng.uniform(0.015, 0.035)
            target = ee_at_handover + offset
            # reaction delay: the human only moves once the robot is underway
            _arm_reach_motion(view, rest, side, target,
                              int(n * 0.30), f_arrive, int(n * 0.80), n - 1)
        # avoid: baseline stays at rest; the repulsion below shapes the motion

    human += _smooth_noise(rng, human.shape, cfg.noise_scale)

    # --- repulsion in avoid segments ---------------------------------------------
    avoid_mask = np.zeros(L, dtype=bool)
    for seg in segments:
        if seg.mode == "avoid":
            avoid_mask[seg.start:seg.end] = True
    if avoid_mask.any():
        upper = [_idx(n) for n in (
            "torso", "neck", "head", "l_shoulder", "l_elbow", "l_wrist",
            "r_shoulder", "r_elbow", "r_wrist",
        )]
        diff = human[:, upper, :] - ee[:, None, :]
        dist = np.linalg.norm(diff, axis=2)
        push_mag = np.clip(_SOFT_RADIUS - dist, 0.0, None) * avoid_mask[:, None]
        push = diff / np.maximum(dist[:, :, None], 1e-6) * push_mag[:, :, None]
        # temporal smoothing keeps the reaction from looking instantaneous
        kernel = np.ones(9) / 9.0
        for j in range(push.shape[1]):
            for c in range(3):
                push[:, j, c] = np.convolve(push[:, j, c], kernel, mode="same")
        human[:, upper, :] += 1.1 * push

        # hard floor on torso clearance, exact by projection
        torso = _idx("torso")
        diff_t = human[:, torso, :] - ee
        dist_t = np.linalg.norm(diff_t, axis=1)
        close = avoid_mask & (dist_t < _HARD_FLOOR)
        if close.any():
            correction = (_HARD_FLOOR - dist_t[close])[:, None] * (
                diff_t[close] / np.maximum(dist_t[close], 1e-6)[:, None]
            )
            human[close, torso, :] += correction
            for name, w in (("neck", 0.7), ("l_shoulder", 0.5), ("r_shoulder", 0.5)):
                human[close, _idx(name), :] += w * correction

    human_seq = MotionSequence(
        human.reshape(L, 3 * cfg.J).astype(np.float32), agent="human"
    )
    robot_seq = MotionSequence(
        robot_pts.reshape(L, 3 * cfg.K).astype(np.float32), agent="robot"
    )
    return Trial(human_seq, robot_seq, segments)


def generate_dataset(cfg: ScenarioConfig, n_trials: int = 32, min_length: int | None = None) -> list:
    return [generate_trial(cfg, i, min_length=min_length) for i in range(n_trials)]


# -- windows and similarity -------------------------------------------------------------
@dataclass
class Window:
    """One (observation, future) sample cut from a trial."""

    trial_index: int
    start: int
    obs_human: np.ndarray   # (T, 3J)
    fut_human: np.ndarray   # (F, 3J)
    obs_robot: np.ndarray   # (T, 3K)

    @property
    def full_human(self) -> np.ndarray:
        return np.concatenate([self.obs_human, self.fut_human], axis=0)

    @property
    def last_obs_frame(self) -> np.ndarray:
        return self.obs_human[-1]


def window_samples(trials, T: int, F: int, stride: int) -> list:
    """Sliding windows; never crosses a trial boundary."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    windows = []
    for ti, trial in enumerate(trials):
        L = len(trial)
        hv = trial.human.values
        rv = trial.robot.values
        for start in range(0, L - (T + F) + 1, stride):
            windows.append(Window(
                trial_index=ti,
                start=start,
                obs_human=hv[start:start + T],
                fut_human=hv[start + T:start + T + F],
                obs_robot=rv[start:start + T],
            ))
    return windows


def window_future_mode(window: Window, trials) -> str:
    """Mode label of the segment holding the middle future frame."""
    trial = trials[window.trial_index]
    T = window.obs_human.shape[0]
    F = window.fut_human.shape[0]
    return trial.mode_at(window.start + T + F // 2)


def find_similar(windows, threshold: float = 0.2) -> list:
    """For each window, indices (self included) whose final observed human
    frames lie within ``threshold`` in L2."""
    if threshold <= 0:
        raise ConfigError("similarity threshold must be positive")
    if not windows:
        return []
    last = np.stack([w.last_obs_frame for w in windows]).astype(np.float64)
    sq = (last * last).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (last @ last.T)
    np.clip(d2, 0.0, None, out=d2)
    hits = d2 < threshold * threshold
    np.fill_diagonal(hits, True)
    return [np.nonzero(row)[0] for row in hits]


# -- binary container ("HRCD") -------------------------------------------------------------
_HRCD_MAGIC = b"HRCD"
_HRCD_VERSION = 1


def write_dataset(trials, path, cfg: ScenarioConfig):
    path = Path(path)
    blob = bytearray()
    blob += _HRCD_MAGIC
    blob += struct.pack("<IIIfI", _HRCD_VERSION, cfg.J, cfg.K, 60.0, len(trials))
    for trial in trials:
        L = len(trial)
        blob += struct.pack("<I", L)
        blob += np.ascontiguousarray(trial.human.values, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(trial.robot.values, dtype="<f4").tobytes()
        blob += struct.pack("<I", len(trial.segments))
        for seg in trial.segments:
            blob += struct.pack("<IIB", seg.start, seg.end, MODE_IDS[seg.mode])
    path.write_bytes(bytes(blob))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))


def read_dataset(path) -> tuple[list, ScenarioConfig]:
    path = Path(path)
    raw = path.read_bytes()
    off = 0

    def need(n: int, what: str):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated dataset while reading {what}", offset=off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if need(4, "magic") != _HRCD_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    version, J, K, rate, n_trials = struct.unpack("<IIIfI", need(20, "header"))
    if version != _HRCD_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)

    trials = []
    for _ in range(n_trials):
        (L,) = struct.unpack("<I", need(4, "trial length"))
        human = np.frombuffer(need(4 * L * 3 * J, "human frames"), dtype="<f4")
        robot = np.frombuffer(need(4 * L * 3 * K, "robot frames"), dtype="<f4")
        (n_seg,) = struct.unpack("<I", need(4, "segment count"))
        segments = []
        for _ in range(n_seg):
            s, e, m = struct.unpack("<IIB", need(9, "segment"))
            if m >= len(MODES):
                raise FormatError(f"unknown mode id {m}", offset=off - 1)
            segments.append(Segment(s, e, MODES[m]))
        trials.append(Trial(
            MotionSequence(human.reshape(L, 3 * J).astype(np.float32), rate, "human"),
            MotionSequence(robot.reshape(L, 3 * K).astype(np.float32), rate, "robot"),
            segments,
        ))
    if off != len(raw):
        raise FormatError("trailing bytes after last trial", offset=off)

    sidecar = path.with_name(path.name + ".json")
    if sidecar.exists():
        cfg = ScenarioConfig(**json.loads(sidecar.read_text()))
    else:
        cfg = ScenarioConfig(J=J, K=K)
    return trials, cfg


def zero_velocity_baseline(windows) -> np.ndarray:
    """ADE of holding the last observed frame still, averaged over windows."""
    if not windows:
        raise DataError("no windows to evaluate")
    total = 0.0
    for w in windows:
        pred = np.repeat(w.last_obs_frame[None, :], w.fut_human.shape[0], axis=0)
        total += float(np.linalg.norm(pred - w.fut_human, axis=1).mean())
    return total / len(windows)
