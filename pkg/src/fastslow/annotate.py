"""Annotation layer: subtask segmentation, progress labels, discounted
reward traces, and planner/executor training datasets.

Segmentation rule: navigation subtasks are their own segments; every run of
consecutive manipulation subtasks between two navigations is merged into a
single segment whose instruction joins the parts with "; ". Progress within
a segment is (t - t_start) / (t_end - t_start). Rewards are sign * gamma^(T-t)
with +1/-1 at the terminal step of success/failure episodes.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from .simworld import TaskSpec, observation_dim
from .tasksuite import merged_stages, stage_instructions
from .trajstore import EpisodeRecord, RewardTrace, Step, SubtaskSegment

DEFAULT_GAMMA = 0.999
DEFAULT_STRIDE = 5
MAX_SUBTASKS = 8

GRIP_CMD_VALUE = {"open": -1.0, "close": 1.0, "hold": 0.0}


class AnnotationError(Exception):
    pass


def segment_episode(ep: EpisodeRecord, task: TaskSpec) -> list[SubtaskSegment]:
    """Merge the episode's executed subtask spans into planner-facing segments.

    Requires the raw scheduler trace (ep.segments as recorded by the expert
    rollout, one span per executed subtask, indexed into task.subtasks).
    """
    if ep.segments is None:
        raise AnnotationError(f"episode {ep.episode_id!r} has no scheduler trace to segment")
    stages = merged_stages(task)
    stage_of_subtask = {}
    for st in stages:
        for prim in st.primitives:
            stage_of_subtask[prim.index] = st
    out: list[SubtaskSegment] = []
    for span in ep.segments:
        st = stage_of_subtask.get(span.index)
        if st is None:
            raise AnnotationError(
                f"episode {ep.episode_id!r} span index {span.index} not in task {task.task_id!r}"
            )
        if out and out[-1].index == st.index:
            prev = out[-1]
            if prev.t_end != span.t_start:
                raise AnnotationError(f"episode {ep.episode_id!r}: non-contiguous spans")
            out[-1] = SubtaskSegment(
                index=st.index, t_start=prev.t_start, t_end=span.t_end,
                instruction=st.instruction, kind=st.kind,
            )
        else:
            out.append(
                SubtaskSegment(
                    index=st.index, t_start=span.t_start, t_end=span.t_end,
                    instruction=st.instruction, kind=st.kind,
                )
            )
    return out


def progress_label(t: int, seg: SubtaskSegment) -> float:
    if seg.t_start >= seg.t_end:
        raise AnnotationError(f"zero-length segment {seg.index}")
    if not (seg.t_start <= t <= seg.t_end):
        raise AnnotationError(f"t={t} outside segment [{seg.t_start}, {seg.t_end}]")
    return (t - seg.t_start) / (seg.t_end - seg.t_start)


def segment_at(segments: list[SubtaskSegment], t: int, boundary: str = "earlier") -> SubtaskSegment:
    """Segment containing t. Shared boundary frames resolve to the earlier
    segment for labels ("earlier") or the later one for action conditioning
    ("later")."""
    for i, seg in enumerate(segments):
        if seg.t_start <= t <= seg.t_end:
            if boundary == "later" and t == seg.t_end and i + 1 < len(segments):
                return segments[i + 1]
            return seg
    raise AnnotationError(f"t={t} outside all segments")


def annotate_rewards(ep: EpisodeRecord, gamma: float = DEFAULT_GAMMA) -> RewardTrace:
    """r_t = sign * gamma^(T-t) for t = 1..T, sign +1 for success, -1 for failure."""
    if not (0.0 < gamma <= 1.0):
        raise AnnotationError(f"gamma={gamma} outside (0, 1]")
    if ep.outcome not in ("success", "failure"):
        raise AnnotationError(f"episode {ep.episode_id!r} has no outcome")
    sign = 1 if ep.outcome == "success" else -1
    T = ep.T
    values = tuple(sign * gamma ** (T - t) for t in range(1, T + 1))
    return RewardTrace(gamma=gamma, sign=sign, values=values)


def annotate_episode(ep: EpisodeRecord, task: TaskSpec, gamma: float = DEFAULT_GAMMA) -> EpisodeRecord:
    """Segment + reward-annotate in place; returns the episode."""
    ep.segments = segment_episode(ep, task)
    ep.rewards = annotate_rewards(ep, gamma)
    return ep


# ---------------------------------------------------------------------------
# feature encoding shared by training data and live evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    """Observation post-processing for dataset building and rollout wrappers.
    include_contact=False drops the simulated tactile triples (ablation)."""

    include_contact: bool = True

    def dim(self, profile, k: int = 6) -> int:
        d = observation_dim(profile, k)
        if not self.include_contact:
            d -= 3 * profile.num_effectors
        return d

    def apply(self, obs: np.ndarray, num_effectors: int) -> np.ndarray:
        if self.include_contact:
            return obs
        e = num_effectors
        start = 5 + 4 * e  # pose(3) twist(2) offsets(2e) gripper(2e)
        return np.concatenate([obs[:start], obs[start + 3 * e :]])


def features_from_step(step: Step, profile, task: TaskSpec) -> np.ndarray:
    """Rebuild the observation vector from a stored step (same layout as
    simworld.observe)."""
    x, y, th = step.base_pose
    out = [x, y, th, step.base_twist[0], step.base_twist[1]]
    c, s = math.cos(-th), math.sin(-th)
    for e in range(profile.num_effectors):
        ex, ey = step.effector_pos[e]
        dx, dy = ex - x, ey - y
        out.extend((c * dx - s * dy, s * dx + c * dy))
    for e in range(profile.num_effectors):
        out.extend((1.0, 0.0) if step.gripper_state[e] == "open" else (0.0, 1.0))
    for e in range(profile.num_effectors):
        out.extend(step.contact[e])
    entities: list[tuple[str, tuple[float, float]]] = []
    for ent in task.relevant_entities:
        if ent in step.object_poses:
            entities.append((ent, step.object_poses[ent]))
        else:
            entities.append((ent, task.zone(ent).center()))
    entities.sort(key=lambda kv: (math.dist((x, y), kv[1]), kv[0]))
    from .simworld import K_ENTITIES, PAD_SENTINEL

    chosen = sorted(entities[:K_ENTITIES], key=lambda kv: kv[0])
    for _, (ex, ey) in chosen:
        dx, dy = ex - x, ey - y
        out.extend((c * dx - s * dy, s * dx + c * dy))
    for _ in range(K_ENTITIES - len(chosen)):
        out.extend((PAD_SENTINEL, PAD_SENTINEL))
    return np.array(out, dtype=np.float64)


def subtask_onehot(index: int | None, prev_index: int | None) -> np.ndarray:
    """Conditioning vector: current stage one-hot (MAX_SUBTASKS) then previous
    stage one-hot with a leading none slot (MAX_SUBTASKS + 1)."""
    cur = np.zeros(MAX_SUBTASKS)
    if index is not None:
        if not (1 <= index <= MAX_SUBTASKS):
            raise AnnotationError(f"stage index {index} outside 1..{MAX_SUBTASKS}")
        cur[index - 1] = 1.0
    prev = np.zeros(MAX_SUBTASKS + 1)
    if prev_index is None:
        prev[0] = 1.0
    else:
        if not (1 <= prev_index <= MAX_SUBTASKS):
            raise AnnotationError(f"prev index {prev_index} outside 1..{MAX_SUBTASKS}")
        prev[prev_index] = 1.0
    return np.concatenate([cur, prev])


def flatten_action(action, num_effectors: int) -> np.ndarray:
    out = [action.base_cmd[0], action.base_cmd[1]]
    for e in range(num_effectors):
        out.extend(action.effector_cmd[e])
    for e in range(num_effectors):
        out.append(GRIP_CMD_VALUE[action.gripper_cmd[e]])
    return np.array(out, dtype=np.float64)


def action_dim(num_effectors: int) -> int:
    return 2 + 3 * num_effectors


def unflatten_action(vec: np.ndarray, num_effectors: int):
    from .trajstore import ActionCommand

    e = num_effectors
    eff = tuple((float(vec[2 + 2 * i]), float(vec[3 + 2 * i])) for i in range(e))
    grips = []
    for i in range(e):
        g = vec[2 + 2 * e + i]
        grips.append("close" if g > 0.5 else "open" if g < -0.5 else "hold")
    return ActionCommand(base_cmd=(float(vec[0]), float(vec[1])), effector_cmd=eff, gripper_cmd=tuple(grips))


# ---------------------------------------------------------------------------
# planner dataset
# ---------------------------------------------------------------------------


@dataclass
class PlannerSample:
    features: np.ndarray
    subtask_list: list[str]
    prev_index: int | None
    label_index: int
    label_progress: float
    time_frac: float = 0.0


def _sample_indices(T: int, stride: int, phase: int) -> list[int]:
    n = T + 1
    count = -(-n // stride)  # ceil
    return sorted((phase + k * stride) % n for k in range(count))


def build_planner_dataset(
    episodes: list[EpisodeRecord],
    task: TaskSpec,
    stride: int = DEFAULT_STRIDE,
    jitter: bool = True,
    seed: int = 0,
) -> list[PlannerSample]:
    """One sample per subsampled frame; exactly ceil((T+1)/stride) samples per
    episode (the jittered phase wraps so the count is invariant)."""
    rng = random.Random(seed)
    subtask_list = stage_instructions(task)
    out: list[PlannerSample] = []
    for ep in episodes:
        if ep.segments is None or not ep.segments or ep.segments[0].index < 1:
            raise AnnotationError(f"episode {ep.episode_id!r} is not segmented")
        segs = ep.segments
        phase = rng.randrange(stride) if jitter else 0
        prev: int | None = None
        for t in _sample_indices(ep.T, stride, phase):
            seg = segment_at(segs, t, boundary="earlier")
            out.append(
                PlannerSample(
                    features=features_from_step(ep.steps[t], ep.profile, task),
                    subtask_list=subtask_list,
                    prev_index=prev,
                    label_index=seg.index,
                    label_progress=progress_label(t, seg),
                    time_frac=min(1.0, t / task.time_limit),
                )
            )
            prev = seg.index
    return out


# ---------------------------------------------------------------------------
# executor dataset
# ---------------------------------------------------------------------------


@dataclass
class TransitionDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    success_transitions: int = 0
    failure_transitions: int = 0
    episode_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.r)

    def concat(self, other: "TransitionDataset") -> "TransitionDataset":
        return TransitionDataset(
            s=np.concatenate([self.s, other.s]),
            a=np.concatenate([self.a, other.a]),
            r=np.concatenate([self.r, other.r]),
            s_next=np.concatenate([self.s_next, other.s_next]),
            done=np.concatenate([self.done, other.done]),
            success_transitions=self.success_transitions + other.success_transitions,
            failure_transitions=self.failure_transitions + other.failure_transitions,
            episode_ids=self.episode_ids + other.episode_ids,
        )


def executor_state(
    features: np.ndarray, index: int, cfg: FeatureConfig, num_effectors: int, prev_index: int | None = None
) -> np.ndarray:
    if prev_index is None:
        prev_index = index - 1 if index > 1 else None
    return np.concatenate([cfg.apply(features, num_effectors), subtask_onehot(index, prev_index)])


def build_executor_dataset(
    episodes: list[EpisodeRecord],
    task: TaskSpec,
    gamma: float = DEFAULT_GAMMA,
    feature_cfg: FeatureConfig = FeatureConfig(),
    success_only: bool = False,
) -> TransitionDataset:
    """Transitions (s, a, r, s', done) with stage conditioning; r = values[t+1].

    Includes successes and failures; success_only restricts to success
    episodes (behavior-cloning training data).
    """
    s_rows, a_rows, r_rows, sn_rows, d_rows = [], [], [], [], []
    n_succ = n_fail = 0
    ids = []
    for ep in episodes:
        if ep.segments is None:
            raise AnnotationError(f"episode {ep.episode_id!r} is not segmented")
        if ep.rewards is None:
            raise AnnotationError(f"episode {ep.episode_id!r} has no reward trace")
        if success_only and ep.outcome != "success":
            continue
        E = ep.profile.num_effectors
        segs = ep.segments
        feats = [features_from_step(st, ep.profile, task) for st in ep.steps]
        ids.append(ep.episode_id)
        for t in range(ep.T):
            seg = segment_at(segs, t, boundary="later")
            seg_next = segment_at(segs, t + 1, boundary="later")
            s_rows.append(executor_state(feats[t], seg.index, feature_cfg, E))
            a_rows.append(flatten_action(ep.steps[t].action, E))
            r_rows.append(ep.rewards.values[t])
            sn_rows.append(executor_state(feats[t + 1], seg_next.index, feature_cfg, E))
            d_rows.append(t + 1 == ep.T)
            if ep.outcome == "success":
                n_succ += 1
            else:
                n_fail += 1
    if not s_rows:
        raise AnnotationError("no transitions (empty or filtered-out episode list)")
    return TransitionDataset(
        s=np.array(s_rows),
        a=np.array(a_rows),
        r=np.array(r_rows),
        s_next=np.array(sn_rows),
        done=np.array(d_rows, dtype=bool),
        success_transitions=n_succ,
        failure_transitions=n_fail,
        episode_ids=ids,
    )


def terminal_only_rewards(ds: TransitionDataset) -> TransitionDataset:
    """Alternative reward scheme: +/-1 at the terminal transition, 0 elsewhere.
    Exposed for comparison with the dense discounted scheme."""
    r = np.where(ds.done, np.sign(ds.r), 0.0)
    return TransitionDataset(
        s=ds.s, a=ds.a, r=r, s_next=ds.s_next, done=ds.done,
        success_transitions=ds.success_transitions,
        failure_transitions=ds.failure_transitions,
        episode_ids=list(ds.episode_ids),
    )
