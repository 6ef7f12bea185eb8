"""Episode data model and the "RM2L" single-file episode container.

One container file packages one or more demonstration episodes with their
annotations. The byte layout is fixed and fully documented in
docs/container_format.md; writing the same episodes twice yields identical
bytes, and read(write(episodes)) reproduces the episodes field-for-field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable

from .binio import (
    FormatError,
    Reader,
    TruncatedPayload,
    Writer,
    pack_text_map,
    unpack_text_map,
)

MAGIC = b"RM2L"
VERSION = 1

ROBOT_KINDS = ("fixed_dual_arm", "mobile_dual_arm", "carrier")
GRIPPER_STATES = ("open", "closed")
GRIPPER_CMDS = ("open", "close", "hold")
OUTCOMES = ("success", "failure")
SEGMENT_KINDS = ("navigation", "manipulation")
VERDICTS = ("keep", "discard", "recollect")

# contact normal force this high marks a collision event at that step
# (5.0 N is the steady holding force; see simworld contact proxies)
COLLISION_FORCE = 10.0
HOLD_FORCE = 5.0


class TrajStoreError(Exception):
    pass


class BadMagic(TrajStoreError):
    pass


class UnsupportedVersion(TrajStoreError):
    pass


class CorruptIndex(TrajStoreError):
    pass


class ValidationFailed(TrajStoreError):
    def __init__(self, episode_id: str, violations: list["Violation"]):
        self.episode_id = episode_id
        self.violations = violations
        first = violations[0]
        super().__init__(f"episode {episode_id!r}: {first.field}: {first.message}")


@dataclass(frozen=True)
class RobotProfile:
    robot_id: str
    kind: str
    num_effectors: int
    has_tactile: bool
    control_dt: float


@dataclass(frozen=True)
class ActionCommand:
    """Per-tick command: base twist, per-effector deltas, gripper commands."""

    base_cmd: tuple[float, float]  # (v, omega)
    effector_cmd: tuple[tuple[float, float], ...]  # (dx, dy) per effector
    gripper_cmd: tuple[str, ...]  # open | close | hold per effector

    @staticmethod
    def zero(num_effectors: int) -> "ActionCommand":
        return ActionCommand(
            base_cmd=(0.0, 0.0),
            effector_cmd=tuple((0.0, 0.0) for _ in range(num_effectors)),
            gripper_cmd=tuple("hold" for _ in range(num_effectors)),
        )


@dataclass(frozen=True)
class Step:
    t: int
    timestamp: float
    base_pose: tuple[float, float, float]  # x, y, theta
    base_twist: tuple[float, float]  # v, omega
    effector_pos: tuple[tuple[float, float], ...]  # world frame
    gripper_state: tuple[str, ...]
    held_object: tuple[str | None, ...]
    contact: tuple[tuple[float, float, float], ...]  # normal N, tangential N, direction rad
    action: ActionCommand
    object_poses: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        # dict breaks frozen hashing; we never hash Steps
        pass

    def __eq__(self, other):
        if not isinstance(other, Step):
            return NotImplemented
        return (
            self.t == other.t
            and self.timestamp == other.timestamp
            and self.base_pose == other.base_pose
            and self.base_twist == other.base_twist
            and self.effector_pos == other.effector_pos
            and self.gripper_state == other.gripper_state
            and self.held_object == other.held_object
            and self.contact == other.contact
            and self.action == other.action
            and self.object_poses == other.object_poses
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SubtaskSegment:
    """A [t_start, t_end] stage of an episode, 1-indexed to match the task list."""

    index: int
    t_start: int
    t_end: int
    instruction: str
    kind: str  # navigation | manipulation


@dataclass(frozen=True)
class RewardTrace:
    gamma: float
    sign: int  # +1 success, -1 failure
    values: tuple[float, ...]  # r_t for t = 1..T


@dataclass(frozen=True)
class Finding:
    criterion: str
    t_start: int
    t_end: int
    description: str


@dataclass(frozen=True)
class InspectionReport:
    episode_id: str
    findings: tuple[Finding, ...]
    verdict: str  # keep | discard | recollect
    not_evaluable: tuple[str, ...] = ()


@dataclass
class EpisodeRecord:
    episode_id: str
    profile: RobotProfile
    task_id: str
    seed: int
    steps: list[Step]
    outcome: str  # success | failure
    segments: list[SubtaskSegment] | None = None
    rewards: RewardTrace | None = None
    inspection: InspectionReport | None = None

    @property
    def T(self) -> int:
        """Number of transitions; steps has length T+1."""
        return len(self.steps) - 1

    def __eq__(self, other):
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return (
            self.episode_id == other.episode_id
            and self.profile == other.profile
            and self.task_id == other.task_id
            and self.seed == other.seed
            and self.steps == other.steps
            and self.outcome == other.outcome
            and (self.segments or None) == (other.segments or None)
            and self.rewards == other.rewards
            and self.inspection == other.inspection
        )


@dataclass(frozen=True)
class Violation:
    field: str
    step: int | None
    message: str


def validate_episode(ep: EpisodeRecord) -> list[Violation]:
    """Structural invariant check. Empty list means the episode is well-formed.

    Exact timestamp spacing is deliberately not enforced here: fault-injected
    episodes with timestamp gaps are valid data (the DataAnomalies inspection
    criterion owns that check).
    """
    out: list[Violation] = []
    p = ep.profile
    if not p.robot_id:
        out.append(Violation("profile.robot_id", None, "robot_id empty"))
    if p.kind not in ROBOT_KINDS:
        out.append(Violation("profile.kind", None, f"unknown kind {p.kind!r}"))
    if p.num_effectors < 1:
        out.append(Violation("profile.num_effectors", None, "num_effectors < 1"))
    if not (p.control_dt > 0):
        out.append(Violation("profile.control_dt", None, "control_dt must be > 0"))
    if ep.outcome not in OUTCOMES:
        out.append(Violation("outcome", None, f"unknown outcome {ep.outcome!r}"))
    if len(ep.steps) < 2:
        out.append(Violation("steps", None, "episode needs T >= 1 (at least 2 steps)"))
        return out

    E = p.num_effectors
    prev_ts = None
    for i, s in enumerate(ep.steps):
        if s.t != i:
            out.append(Violation("t", i, f"steps not contiguous: expected t={i}, got {s.t}"))
        if prev_ts is not None and not (s.timestamp > prev_ts):
            out.append(Violation("timestamp", i, "timestamps not strictly increasing"))
        prev_ts = s.timestamp
        for name, seq in (
            ("effector_pos", s.effector_pos),
            ("gripper_state", s.gripper_state),
            ("held_object", s.held_object),
            ("contact", s.contact),
        ):
            if len(seq) != E:
                out.append(Violation(name, i, f"length {len(seq)} != num_effectors {E}"))
        for g in s.gripper_state:
            if g not in GRIPPER_STATES:
                out.append(Violation("gripper_state", i, f"bad state {g!r}"))
        for c in s.contact:
            if len(c) != 3 or not all(math.isfinite(x) for x in c):
                out.append(Violation("contact", i, "non-finite contact triple"))
            elif c[0] < 0 or c[1] < 0:
                out.append(Violation("contact", i, "negative contact force"))
        a = s.action
        if len(a.effector_cmd) != E or len(a.gripper_cmd) != E:
            out.append(Violation("action", i, "action effector arity mismatch"))
        for g in a.gripper_cmd:
            if g not in GRIPPER_CMDS:
                out.append(Violation("action.gripper_cmd", i, f"bad command {g!r}"))

    if ep.segments is not None:
        segs = ep.segments
        T = ep.T
        for j, seg in enumerate(segs):
            if seg.t_start >= seg.t_end:
                out.append(Violation("segments", None, f"segment {j}: t_start >= t_end"))
            if seg.kind not in SEGMENT_KINDS:
                out.append(Violation("segments", None, f"segment {j}: bad kind {seg.kind!r}"))
        if segs:
            if segs[0].t_start != 0 or segs[-1].t_end != T:
                out.append(Violation("segments", None, "segments do not cover [0, T]"))
            for a_, b_ in zip(segs, segs[1:]):
                if a_.t_end != b_.t_start:
                    out.append(Violation("segments", None, "segments not contiguous"))
    if ep.rewards is not None:
        r = ep.rewards
        if not (0 < r.gamma <= 1):
            out.append(Violation("rewards.gamma", None, "gamma out of (0, 1]"))
        if r.sign not in (1, -1):
            out.append(Violation("rewards.sign", None, "sign must be +1 or -1"))
        if len(r.values) != ep.T:
            out.append(Violation("rewards.values", None, f"expected T={ep.T} values"))
    return out


def slice_episode(ep: EpisodeRecord, t0: int, t1: int) -> EpisodeRecord:
    """Steps t0..t1 (inclusive) re-indexed from 0; timestamps preserved.

    Annotations are dropped; they refer to the original index range and must
    be recomputed on the slice.
    """
    if not (0 <= t0 < t1 <= ep.T):
        raise IndexError(f"slice bounds ({t0}, {t1}) outside [0, {ep.T}]")
    steps = [replace(s, t=i) for i, s in enumerate(ep.steps[t0 : t1 + 1])]
    return EpisodeRecord(
        episode_id=f"{ep.episode_id}[{t0}:{t1}]",
        profile=ep.profile,
        task_id=ep.task_id,
        seed=ep.seed,
        steps=steps,
        outcome=ep.outcome,
    )


# ---------------------------------------------------------------------------
# container serialization
# ---------------------------------------------------------------------------

_GRIP_STATE_CODE = {g: i for i, g in enumerate(GRIPPER_STATES)}
_GRIP_CMD_CODE = {g: i for i, g in enumerate(GRIPPER_CMDS)}
_KIND_CODE = {k: i for i, k in enumerate(SEGMENT_KINDS)}
_VERDICT_CODE = {v: i for i, v in enumerate(VERDICTS)}

_FLAG_SEGMENTS = 1
_FLAG_REWARDS = 2
_FLAG_INSPECTION = 4


def _pack_episode(ep: EpisodeRecord) -> bytes:
    w = Writer()
    p = ep.profile
    meta = {
        "episode_id": ep.episode_id,
        "task_id": ep.task_id,
        "seed": str(ep.seed),
        "outcome": ep.outcome,
        "robot_id": p.robot_id,
        "kind": p.kind,
        "num_effectors": str(p.num_effectors),
        "has_tactile": "1" if p.has_tactile else "0",
        "control_dt": p.control_dt.hex(),
    }
    mb = pack_text_map(meta)
    w.u64(len(mb))
    w.raw(mb)
    w.u64(len(ep.steps))
    E = p.num_effectors
    for s in ep.steps:
        w.u64(s.t)
        w.f64(s.timestamp)
        w.f64s(s.base_pose)
        w.f64s(s.base_twist)
        for e in range(E):
            w.f64s(s.effector_pos[e])
        for e in range(E):
            w.u8(_GRIP_STATE_CODE[s.gripper_state[e]])
        for e in range(E):
            w.opt_string(s.held_object[e])
        for e in range(E):
            w.f64s(s.contact[e])
        w.f64s(s.action.base_cmd)
        for e in range(E):
            w.f64s(s.action.effector_cmd[e])
        for e in range(E):
            w.u8(_GRIP_CMD_CODE[s.action.gripper_cmd[e]])
        w.u64(len(s.object_poses))
        for oid in sorted(s.object_poses):
            w.string(oid)
            w.f64s(s.object_poses[oid])
    flags = 0
    if ep.segments is not None:
        flags |= _FLAG_SEGMENTS
    if ep.rewards is not None:
        flags |= _FLAG_REWARDS
    if ep.inspection is not None:
        flags |= _FLAG_INSPECTION
    w.u8(flags)
    if ep.segments is not None:
        w.u64(len(ep.segments))
        for seg in ep.segments:
            w.u64(seg.index)
            w.u64(seg.t_start)
            w.u64(seg.t_end)
            w.u8(_KIND_CODE[seg.kind])
            w.string(seg.instruction)
    if ep.rewards is not None:
        w.f64(ep.rewards.gamma)
        w.i64(ep.rewards.sign)
        w.u64(len(ep.rewards.values))
        w.f64s(ep.rewards.values)
    if ep.inspection is not None:
        rep = ep.inspection
        w.string(rep.episode_id)
        w.u8(_VERDICT_CODE[rep.verdict])
        w.u64(len(rep.findings))
        for f in rep.findings:
            w.string(f.criterion)
            w.u64(f.t_start)
            w.u64(f.t_end)
            w.string(f.description)
        w.u64(len(rep.not_evaluable))
        for c in rep.not_evaluable:
            w.string(c)
    return w.getvalue()


def _unpack_episode(data: bytes) -> EpisodeRecord:
    r = Reader(data)
    meta_len = r.u64()
    meta = unpack_text_map(r.take(meta_len))
    try:
        profile = RobotProfile(
            robot_id=meta["robot_id"],
            kind=meta["kind"],
            num_effectors=int(meta["num_effectors"]),
            has_tactile=meta["has_tactile"] == "1",
            control_dt=float.fromhex(meta["control_dt"]),
        )
        episode_id = meta["episode_id"]
        task_id = meta["task_id"]
        seed = int(meta["seed"])
        outcome = meta["outcome"]
    except KeyError as e:
        raise FormatError(f"episode metadata missing key {e}") from None
    E = profile.num_effectors
    n_steps = r.u64()
    steps: list[Step] = []
    for _ in range(n_steps):
        t = r.u64()
        ts = r.f64()
        base_pose = r.f64s(3)
        base_twist = r.f64s(2)
        eff = tuple(r.f64s(2) for _ in range(E))
        grip = tuple(GRIPPER_STATES[r.u8()] for _ in range(E))
        held = tuple(r.opt_string() for _ in range(E))
        contact = tuple(r.f64s(3) for _ in range(E))
        base_cmd = r.f64s(2)
        eff_cmd = tuple(r.f64s(2) for _ in range(E))
        grip_cmd = tuple(GRIPPER_CMDS[r.u8()] for _ in range(E))
        n_obj = r.u64()
        poses: dict[str, tuple[float, float]] = {}
        for _ in range(n_obj):
            oid = r.string()
            poses[oid] = r.f64s(2)
        steps.append(
            Step(
                t=t,
                timestamp=ts,
                base_pose=base_pose,
                base_twist=base_twist,
                effector_pos=eff,
                gripper_state=grip,
                held_object=held,
                contact=contact,
                action=ActionCommand(base_cmd=base_cmd, effector_cmd=eff_cmd, gripper_cmd=grip_cmd),
                object_poses=poses,
            )
        )
    flags = r.u8()
    segments = None
    rewards = None
    inspection = None
    if flags & _FLAG_SEGMENTS:
        n = r.u64()
        segments = [
            SubtaskSegment(
                index=r.u64(),
                t_start=r.u64(),
                t_end=r.u64(),
                kind=SEGMENT_KINDS[r.u8()],
                instruction=r.string(),
            )
            for _ in range(n)
        ]
    if flags & _FLAG_REWARDS:
        gamma = r.f64()
        sign = r.i64()
        n = r.u64()
        rewards = RewardTrace(gamma=gamma, sign=sign, values=r.f64s(n))
    if flags & _FLAG_INSPECTION:
        rep_id = r.string()
        verdict = VERDICTS[r.u8()]
        n = r.u64()
        findings = tuple(
            Finding(criterion=r.string(), t_start=r.u64(), t_end=r.u64(), description=r.string())
            for _ in range(n)
        )
        n_ne = r.u64()
        not_evaluable = tuple(r.string() for _ in range(n_ne))
        inspection = InspectionReport(
            episode_id=rep_id, findings=findings, verdict=verdict, not_evaluable=not_evaluable
        )
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes in episode chunk")
    return EpisodeRecord(
        episode_id=episode_id,
        profile=profile,
        task_id=task_id,
        seed=seed,
        steps=steps,
        outcome=outcome,
        segments=segments,
        rewards=rewards,
        inspection=inspection,
    )


def container_bytes(episodes: Iterable[EpisodeRecord], header: dict[str, str] | None = None) -> bytes:
    """Serialize episodes to canonical container bytes (see docs).

    Raises ValidationFailed naming the first violating episode and field.
    """
    eps = list(episodes)
    if not eps:
        raise ValidationFailed("<none>", [Violation("episodes", None, "episode list empty")])
    seen_profiles: dict[str, RobotProfile] = {}
    for ep in eps:
        v = validate_episode(ep)
        if v:
            raise ValidationFailed(ep.episode_id, v)
        prev = seen_profiles.get(ep.profile.robot_id)
        if prev is None:
            seen_profiles[ep.profile.robot_id] = ep.profile
        elif prev != ep.profile:
            raise ValidationFailed(
                ep.episode_id,
                [Violation("profile", None, f"conflicting profile for robot {ep.profile.robot_id!r}")],
            )
    hb = pack_text_map(header or {})
    chunks = [_pack_episode(ep) for ep in eps]
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.u64(len(hb))
    w.raw(hb)
    w.u64(len(chunks))
    base = len(MAGIC) + 4 + 8 + len(hb) + 8 + 16 * len(chunks)
    off = base
    for c in chunks:
        w.u64(off)
        w.u64(len(c))
        off += len(c)
    for c in chunks:
        w.raw(c)
    return w.getvalue()


def write_container(episodes: Iterable[EpisodeRecord], destination: IO[bytes], header: dict[str, str] | None = None) -> int:
    data = container_bytes(episodes, header)
    destination.write(data)
    return len(data)


def write_container_file(episodes: Iterable[EpisodeRecord], path, header: dict[str, str] | None = None) -> int:
    with open(path, "wb") as f:
        return write_container(episodes, f, header)


def read_container(source) -> list[EpisodeRecord]:
    """Parse a container from bytes, a binary file-like, or a path."""
    eps, _ = read_container_with_header(source)
    return eps


def read_container_with_header(source) -> tuple[list[EpisodeRecord], dict[str, str]]:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as f:
            data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    r = Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version} not supported (expected {VERSION})")
    try:
        header_len = r.u64()
        header = unpack_text_map(r.take(header_len))
        count = r.u64()
        index = [(r.u64(), r.u64()) for _ in range(count)]
    except TruncatedPayload as e:
        raise CorruptIndex(str(e)) from None
    end = r.pos
    episodes = []
    for i, (off, length) in enumerate(index):
        if off < r.pos or off + length > len(data) or off != end:
            raise CorruptIndex(
                f"index entry {i}: offset {off} length {length} out of bounds or non-contiguous"
            )
        episodes.append(_unpack_episode(data[off : off + length]))
        end = off + length
    if end != len(data):
        raise CorruptIndex(f"{len(data) - end} trailing bytes after last episode chunk")
    return episodes, header
