"""Automated quality inspection: twelve criteria, three-stage workflow.

Each detector emits maximal [t_start, t_end] intervals where its predicate
holds. Collision events are recovered from the contact proxies (a collision
marks that step's contact normal force at 10.0 N; steady holding is 5.0 N).
Default thresholds are calibrated so zero-fault expert rollouts on the
single-robot task suite produce zero findings (enforced by tests).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .simworld import TaskSpec
from .tasksuite import parse_instruction
from .trajstore import EpisodeRecord, Finding, InspectionReport

CRITERIA = (
    "UnintendedContact",
    "UnsmoothMotion",
    "ReGrasping",
    "PreGraspCollision",
    "DataAnomalies",
    "FailedPlacement",
    "TrajectoryAbnormality",
    "ExcessiveSpeed",
    "VisualArtifacts",
    "ArmAbnormality",
    "NonStandardOperation",
    "TargetDisplacement",
)

COLLISION_MARK = 8.0  # contact normal force at or above this marks a collision
SIGN_EPS = 1e-6
STILL_EPS = 1e-9


class InspectionError(Exception):
    pass


@dataclass(frozen=True)
class Thresholds:
    v_limit: float = 1.2  # m/s, 1.2x the expert speed cap
    jerk_limit: float = 50.0  # m/s^3 on the third difference of effector position
    path_ratio_limit: float = 2.0  # traveled / straight-line within a navigation segment
    home_radius: float = 0.1  # m, terminal distance to the t=0 base position
    pause_min: int = 5  # steps of terminal stillness required
    pause_max: int = 50
    oscillation_rate: float = 8.0  # effector velocity sign changes per second
    gap_factor: float = 1.5  # timestamp gap threshold in units of control_dt

    def __post_init__(self):
        for name in ("v_limit", "jerk_limit", "path_ratio_limit", "home_radius", "oscillation_rate", "gap_factor"):
            if getattr(self, name) <= 0:
                raise InspectionError(f"threshold {name} must be positive")
        if not (0 < self.pause_min < self.pause_max):
            raise InspectionError("need 0 < pause_min < pause_max")


def _intervals(flags: list[bool]) -> list[tuple[int, int]]:
    out = []
    start = None
    for t, f in enumerate(flags):
        if f and start is None:
            start = t
        elif not f and start is not None:
            out.append((start, t - 1))
            start = None
    if start is not None:
        out.append((start, len(flags) - 1))
    return out


def _collision_steps(ep: EpisodeRecord) -> list[bool]:
    return [any(c[0] >= COLLISION_MARK for c in s.contact) for s in ep.steps]


def _manip_ranges(ep: EpisodeRecord) -> list[tuple[int, int, str]]:
    return [
        (seg.t_start, seg.t_end, seg.instruction)
        for seg in (ep.segments or [])
        if seg.kind == "manipulation"
    ]


def _in_any(t: int, ranges) -> bool:
    return any(a <= t <= b for a, b, *_ in ranges)


def _d_excessive_speed(ep, th):
    dt = ep.profile.control_dt
    T = ep.T
    flags = [False] * (T + 1)
    for t in range(T + 1):
        if abs(ep.steps[t].base_twist[0]) > th.v_limit:
            flags[t] = True
    for e in range(ep.profile.num_effectors):
        for t in range(1, T + 1):
            p0 = ep.steps[t - 1].effector_pos[e]
            p1 = ep.steps[t].effector_pos[e]
            if math.dist(p0, p1) / dt > 2 * th.v_limit:
                flags[t] = True
    return [
        Finding("ExcessiveSpeed", a, b, "speed above limit")
        for a, b in _intervals(flags)
    ]


def _d_unsmooth(ep, th):
    dt = ep.profile.control_dt
    T = ep.T
    flags = [False] * (T + 1)
    for e in range(ep.profile.num_effectors):
        xs = [s.effector_pos[e] for s in ep.steps]
        for t in range(3, T + 1):
            d3x = xs[t][0] - 3 * xs[t - 1][0] + 3 * xs[t - 2][0] - xs[t - 3][0]
            d3y = xs[t][1] - 3 * xs[t - 1][1] + 3 * xs[t - 2][1] - xs[t - 3][1]
            if math.hypot(d3x, d3y) / dt**3 > th.jerk_limit:
                flags[t] = True
    return [
        Finding("UnsmoothMotion", a, b, "effector jerk above limit")
        for a, b in _intervals(flags)
    ]


def _d_regrasping(ep, th):
    out = []
    for a, b, _ in _manip_ranges(ep):
        for e in range(ep.profile.num_effectors):
            failed = 0
            first_failed_t = None
            attach_t = None
            in_empty_close = False
            for t in range(a, b + 1):
                s = ep.steps[t]
                closed = s.gripper_state[e] == "closed"
                held = s.held_object[e] is not None
                if held:
                    attach_t = t
                    break
                if closed and not in_empty_close:
                    in_empty_close = True
                    failed += 1
                    if first_failed_t is None:
                        first_failed_t = t
                elif not closed:
                    in_empty_close = False
            if failed >= 2:
                end = attach_t if attach_t is not None else b
                out.append(
                    Finding("ReGrasping", first_failed_t, end, f"{failed} grasp attempts before attach")
                )
    return out


def _d_pregrasp_collision(ep, th):
    coll = _collision_steps(ep)
    flags = [False] * len(coll)
    for a, b, instruction in _manip_ranges(ep):
        if "Pick up [" not in instruction:
            continue  # nothing to grasp in this segment
        first_attach = None
        for t in range(a, b + 1):
            s = ep.steps[t]
            prev = ep.steps[t - 1] if t > 0 else None
            newly = any(
                h is not None and (prev is None or prev.held_object[e] != h)
                for e, h in enumerate(s.held_object)
            )
            if newly:
                first_attach = t
                break
        stop = first_attach if first_attach is not None else b + 1
        for t in range(a, min(stop, b + 1)):
            if coll[t]:
                flags[t] = True
    return [
        Finding("PreGraspCollision", a, b, "collision before first grasp")
        for a, b in _intervals(flags)
    ]


def _d_data_anomalies(ep, th):
    dt = ep.profile.control_dt
    flags = [False] * (ep.T + 1)
    for t in range(1, ep.T + 1):
        gap = ep.steps[t].timestamp - ep.steps[t - 1].timestamp
        if gap > th.gap_factor * dt or abs(gap) < 1e-12:
            flags[t] = True
    return [
        Finding("DataAnomalies", a, b, "timestamp gap or duplicate")
        for a, b in _intervals(flags)
    ]


def _d_failed_placement(ep, th, task: TaskSpec | None):
    if task is None or ep.segments is None:
        return None  # not evaluable
    out = []
    for seg in ep.segments:
        if seg.kind != "manipulation" or "Place [" not in seg.instruction:
            continue
        prims = parse_instruction(seg.instruction, task, actor=ep.profile.robot_id)
        end_step = ep.steps[seg.t_end]
        for p in prims:
            if not p.instruction.startswith("Place"):
                continue
            pos = end_step.object_poses.get(p.obj)
            if pos is None:
                return None
            held = p.obj in end_step.held_object
            if p.target in [z.zone_id for z in task.zones]:
                ok = task.zone(p.target).contains(pos) and not held
            else:
                # container destination: judged by proximity to it
                dest = end_step.object_poses.get(p.target)
                if dest is None:
                    return None
                ok = (math.dist(pos, dest) <= 0.25) and not held
            if not ok:
                out.append(
                    Finding("FailedPlacement", seg.t_end, seg.t_end, f"{p.obj} not placed in {p.target}")
                )
    return out


def _d_trajectory_abnormality(ep, th):
    out = []
    for seg in ep.segments or []:
        if seg.kind != "navigation":
            continue
        pts = [ep.steps[t].base_pose[:2] for t in range(seg.t_start, seg.t_end + 1)]
        straight = math.dist(pts[0], pts[-1])
        if straight < 0.2:
            continue
        path = sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))
        if path / straight > th.path_ratio_limit:
            out.append(
                Finding(
                    "TrajectoryAbnormality", seg.t_start, seg.t_end,
                    f"path ratio {path / straight:.2f}",
                )
            )
    return out


def _d_arm_abnormality(ep, th):
    dt = ep.profile.control_dt
    window = max(2, round(1.0 / dt))
    T = ep.T
    flags = [False] * (T + 1)
    for e in range(ep.profile.num_effectors):
        for axis in (0, 1):
            vel = [
                (ep.steps[t + 1].effector_pos[e][axis] - ep.steps[t].effector_pos[e][axis]) / dt
                for t in range(T)
            ]
            sgn = [1 if v > SIGN_EPS else (-1 if v < -SIGN_EPS else 0) for v in vel]
            for t0 in range(0, len(sgn) - window + 1):
                changes = 0
                last = 0
                for s in sgn[t0 : t0 + window]:
                    if s != 0:
                        if last != 0 and s != last:
                            changes += 1
                        last = s
                if changes / (window * dt) > th.oscillation_rate:
                    flags[t0 + window] = True
    return [
        Finding("ArmAbnormality", a, b, "effector oscillation")
        for a, b in _intervals(flags)
    ]


def _d_nonstandard(ep, th):
    out = []
    T = ep.T
    home = ep.steps[0].base_pose[:2]
    final = ep.steps[T].base_pose[:2]
    if math.dist(home, final) > th.home_radius:
        out.append(Finding("NonStandardOperation", T, T, "did not return to home pose"))
    still = 0
    for s in reversed(ep.steps):
        if abs(s.base_twist[0]) < STILL_EPS and abs(s.base_twist[1]) < STILL_EPS:
            still += 1
        else:
            break
    if not (th.pause_min <= still <= th.pause_max):
        out.append(
            Finding("NonStandardOperation", max(0, T - still), T, f"terminal pause {still} steps")
        )
    return out


def _d_target_displacement(ep, th, task: TaskSpec | None):
    if ep.segments is None:
        return None
    if not ep.steps[0].object_poses:
        return None
    flags = [False] * (ep.T + 1)
    for t in range(1, ep.T + 1):
        seg = None
        for sg in ep.segments:
            if sg.t_start <= t <= sg.t_end:
                seg = sg
                break
        instruction = seg.instruction if seg else ""
        held_now = set(h for h in ep.steps[t].held_object if h)
        held_prev = set(h for h in ep.steps[t - 1].held_object if h)
        for oid, pos in ep.steps[t].object_poses.items():
            prev = ep.steps[t - 1].object_poses.get(oid)
            if prev is None:
                continue
            if oid in held_now or oid in held_prev:
                continue
            if f"[{oid}]" in instruction:
                continue
            if math.dist(prev, pos) > 0.02:
                flags[t] = True
    return [
        Finding("TargetDisplacement", a, b, "bystander object moved")
        for a, b in _intervals(flags)
    ]


def _d_unintended_contact(ep, th):
    coll = _collision_steps(ep)
    manip = _manip_ranges(ep)
    flags = [c and not _in_any(t, manip) for t, c in enumerate(coll)]
    return [
        Finding("UnintendedContact", a, b, "contact outside manipulation")
        for a, b in _intervals(flags)
    ]


def detect_with_status(
    criterion: str, ep: EpisodeRecord, th: Thresholds, task: TaskSpec | None = None
) -> tuple[list[Finding], bool]:
    """(findings, evaluable). Not-evaluable criteria return ([], False)."""
    if criterion not in CRITERIA:
        raise InspectionError(f"unknown criterion {criterion!r}")
    needs_segments = criterion in (
        "ReGrasping", "PreGraspCollision", "FailedPlacement",
        "TrajectoryAbnormality", "UnintendedContact", "TargetDisplacement",
    )
    if needs_segments and ep.segments is None:
        return [], False
    if criterion == "ExcessiveSpeed":
        return _d_excessive_speed(ep, th), True
    if criterion == "UnsmoothMotion":
        return _d_unsmooth(ep, th), True
    if criterion == "ReGrasping":
        return _d_regrasping(ep, th), True
    if criterion == "PreGraspCollision":
        return _d_pregrasp_collision(ep, th), True
    if criterion == "DataAnomalies":
        return _d_data_anomalies(ep, th), True
    if criterion == "FailedPlacement":
        res = _d_failed_placement(ep, th, task)
        return ([], False) if res is None else (res, True)
    if criterion == "TrajectoryAbnormality":
        return _d_trajectory_abnormality(ep, th), True
    if criterion == "VisualArtifacts":
        return [], True  # requires real imagery; structurally present
    if criterion == "ArmAbnormality":
        return _d_arm_abnormality(ep, th), True
    if criterion == "NonStandardOperation":
        return _d_nonstandard(ep, th), True
    if criterion == "TargetDisplacement":
        res = _d_target_displacement(ep, th, task)
        return ([], False) if res is None else (res, True)
    if criterion == "UnintendedContact":
        return _d_unintended_contact(ep, th), True
    raise InspectionError(f"unhandled criterion {criterion!r}")


def detect(criterion: str, ep: EpisodeRecord, th: Thresholds, task: TaskSpec | None = None) -> list[Finding]:
    findings, _ = detect_with_status(criterion, ep, th, task)
    return findings


# ---------------------------------------------------------------------------
# three-stage workflow
# ---------------------------------------------------------------------------


@dataclass
class InitialReport:
    """Daily issue report from the quick scan stage."""

    sampled_ids: list[str]
    flagged_ids: list[str]
    counts: dict[str, int] = field(default_factory=dict)


def initial_inspection(
    episodes: list[EpisodeRecord], sample_frac: float, th: Thresholds, seed: int = 0
) -> InitialReport:
    """Quick scan: DataAnomalies + ExcessiveSpeed on a seeded random sample."""
    if not episodes:
        raise InspectionError("no episodes to inspect")
    if not (0 < sample_frac <= 1):
        raise InspectionError(f"sample_frac={sample_frac} outside (0, 1]")
    rng = random.Random(seed)
    n = max(1, math.ceil(sample_frac * len(episodes)))
    idx = sorted(rng.sample(range(len(episodes)), n))
    counts = {"DataAnomalies": 0, "ExcessiveSpeed": 0}
    flagged = []
    sampled = []
    for i in idx:
        ep = episodes[i]
        sampled.append(ep.episode_id)
        hit = False
        for crit in ("DataAnomalies", "ExcessiveSpeed"):
            f = detect(crit, ep, th)
            counts[crit] += len(f)
            hit = hit or bool(f)
        if hit:
            flagged.append(ep.episode_id)
    return InitialReport(sampled_ids=sampled, flagged_ids=flagged, counts=counts)


def detailed_inspection(
    episodes: list[EpisodeRecord], th: Thresholds, tasks: dict[str, TaskSpec] | None = None
) -> list[InspectionReport]:
    """Full pass over all twelve criteria.

    Verdict policy: no findings -> keep; only ReGrasping findings ->
    recollect; anything else -> discard.
    """
    reports = []
    for ep in episodes:
        task = tasks.get(ep.task_id) if tasks else None
        findings: list[Finding] = []
        not_evaluable = []
        for crit in CRITERIA:
            f, ok = detect_with_status(crit, ep, th, task)
            findings.extend(f)
            if not ok:
                not_evaluable.append(crit)
        if not findings:
            verdict = "keep"
        elif all(f.criterion == "ReGrasping" for f in findings):
            verdict = "recollect"
        else:
            verdict = "discard"
        reports.append(
            InspectionReport(
                episode_id=ep.episode_id,
                findings=tuple(findings),
                verdict=verdict,
                not_evaluable=tuple(not_evaluable),
            )
        )
    return reports


def filter_dataset(
    episodes: list[EpisodeRecord], reports: list[InspectionReport]
) -> tuple[list[EpisodeRecord], list[str]]:
    """Partition by verdict; the issue log lists one line per finding."""
    if len(episodes) != len(reports):
        raise InspectionError(f"{len(episodes)} episodes but {len(reports)} reports")
    kept = []
    log = []
    for ep, rep in zip(episodes, reports):
        if ep.episode_id != rep.episode_id:
            raise InspectionError(f"report mismatch: {ep.episode_id!r} vs {rep.episode_id!r}")
        if rep.verdict == "keep":
            kept.append(ep)
        for f in rep.findings:
            log.append(f"{ep.episode_id}\t{f.criterion}\t{f.t_start}\t{f.t_end}\t{f.description}")
    return kept, log
