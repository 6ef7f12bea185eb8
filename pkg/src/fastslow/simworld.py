"""Deterministic planar mobile-manipulation world.

Kinematic disc-base robots with planar effectors, graspable disc objects,
rectangular named zones, a scripted expert with configurable fault injection,
and simulated contact-force proxies. Identical (task, seed, faults, actions)
always reproduce identical trajectories bit-for-bit.

Units: meters, seconds, radians. Fixed control step DT = 0.1 s.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .trajstore import (
    ActionCommand,
    EpisodeRecord,
    RobotProfile,
    Step,
    SubtaskSegment,
    COLLISION_FORCE,
    HOLD_FORCE,
)

DT = 0.1
V_MAX = 1.0
OMEGA_MAX = 1.5
DELTA_MAX = 0.1
GRASP_RADIUS = 0.05
ARM_REACH = 0.5
BASE_RADIUS = 0.15
CONTAIN_RADIUS = 0.18
WIPE_RADIUS = 0.08

# scripted-expert motion caps (inside the environment limits, smooth enough
# that clean rollouts stay below every inspection threshold)
EXPERT_V = 0.8
EXPERT_ACCEL = 0.04  # max |dv| per step
EXPERT_BRAKE = 0.3  # m/s^2 used for the braking-distance speed profile
EXPERT_OMEGA = 1.2
EXPERT_OMEGA_ACCEL = 0.1
EXPERT_EFF_STEP = 0.08  # max effector delta per step
EXPERT_EFF_SLEW = 0.012  # max change of effector delta per step
EXPERT_EFF_BRAKE = 0.009  # braking constant for the effector delta profile
STANDOFF = 0.32
CLOSE_RADIUS = 0.12  # expert commands close throughout the final approach
RELEASE_RADIUS = 0.10
HOME_PAUSE_STEPS = 10

K_ENTITIES = 6
PAD_SENTINEL = -10.0


class SimError(Exception):
    pass


class LayoutInfeasible(SimError):
    pass


class UnknownId(SimError):
    pass


def wrap_angle(a: float) -> float:
    while a > math.pi:
        a -= 2 * math.pi
    while a < -math.pi:
        a += 2 * math.pi
    return a


@dataclass(frozen=True)
class SubtaskSpec:
    """One scripted stage. Instructions use the five fixed templates:
    "Go to [x]", "Stop in front of [x]" (navigation), "Pick up [x]",
    "Place [x] in [y]", "Wipe [x]" (manipulation)."""

    index: int  # 1-based position in the task's subtask list
    kind: str  # navigation | manipulation
    instruction: str
    actor: str  # robot_id
    target: str  # zone_id or object_id (destination for place)
    obj: str | None = None  # manipulated object for place


@dataclass(frozen=True)
class ZoneDef:
    zone_id: str
    rect: tuple[float, float, float, float]  # x0, y0, x1, y1 (closed)
    hazard: bool = False

    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.rect
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)

    def contains(self, p: tuple[float, float]) -> bool:
        x0, y0, x1, y1 = self.rect
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


@dataclass(frozen=True)
class ObjectDef:
    object_id: str
    radius: float
    spawn: tuple[float, float]
    jitter: float = 0.0
    rides: str | None = None  # robot this object is rigidly attached to
    ride_offset: tuple[float, float] = (0.0, 0.0)
    is_container: bool = False  # released objects nearby board the same robot


@dataclass(frozen=True)
class RobotStart:
    pose: tuple[float, float, float]
    jitter: float = 0.0


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    robots: tuple[RobotProfile, ...]
    starts: dict[str, RobotStart]
    zones: tuple[ZoneDef, ...]
    objects: tuple[ObjectDef, ...]
    subtasks: tuple[SubtaskSpec, ...]
    success: tuple[tuple[str, str, str], ...]  # ("in_zone", obj, zone) | ("in_container", obj, robot)
    time_limit: int
    critical_objects: tuple[str, ...] = ()  # in a hazard zone -> immediate failure
    relevant_entities: tuple[str, ...] = ()  # object/zone ids exposed in observations
    bounds: tuple[float, float] = (4.0, 3.0)

    def zone(self, zone_id: str) -> ZoneDef:
        for z in self.zones:
            if z.zone_id == zone_id:
                return z
        raise UnknownId(f"zone {zone_id!r} not in task {self.task_id!r}")

    def object_def(self, object_id: str) -> ObjectDef:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise UnknownId(f"object {object_id!r} not in task {self.task_id!r}")

    def profile(self, robot_id: str) -> RobotProfile:
        for p in self.robots:
            if p.robot_id == robot_id:
                return p
        raise UnknownId(f"robot {robot_id!r} not in task {self.task_id!r}")


@dataclass
class FaultConfig:
    grasp_slip_prob: float = 0.0
    overshoot_sigma: float = 0.0
    premature_release_prob: float = 0.0
    timestamp_gap_prob: float = 0.0
    speed_spike_prob: float = 0.0
    action_noise: float = 0.0  # extra N(0, sigma) on expert commands

    def __post_init__(self):
        for name in ("grasp_slip_prob", "premature_release_prob", "timestamp_gap_prob", "speed_spike_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def any_active(self) -> bool:
        return any(
            getattr(self, n) > 0
            for n in (
                "grasp_slip_prob",
                "overshoot_sigma",
                "premature_release_prob",
                "timestamp_gap_prob",
                "speed_spike_prob",
                "action_noise",
            )
        )


ZERO_FAULTS = FaultConfig()


@dataclass
class RobotState:
    profile: RobotProfile
    base: tuple[float, float, float]
    twist: tuple[float, float] = (0.0, 0.0)
    eff_offset: list[tuple[float, float]] = field(default_factory=list)  # base frame
    gripper: list[str] = field(default_factory=list)
    held: list[str | None] = field(default_factory=list)
    last_eff_world: list[tuple[float, float]] = field(default_factory=list)
    contact: list[tuple[float, float, float]] = field(default_factory=list)

    def eff_world(self, e: int) -> tuple[float, float]:
        x, y, th = self.base
        ox, oy = self.eff_offset[e]
        c, s = math.cos(th), math.sin(th)
        return (x + c * ox - s * oy, y + s * ox + c * oy)


@dataclass
class ObjState:
    pos: tuple[float, float]
    radius: float
    held_by: tuple[str, int] | None = None
    rides: str | None = None
    ride_offset: tuple[float, float] = (0.0, 0.0)
    is_container: bool = False


@dataclass
class WorldState:
    task: TaskSpec
    time: float
    robots: dict[str, RobotState]
    objects: dict[str, ObjState]
    rng: random.Random
    wipe_done: dict[str, set[int]] = field(default_factory=dict)
    collision_flags: set[str] = field(default_factory=set)  # robots that collided this step
    home_pose: dict[str, tuple[float, float]] = field(default_factory=dict)  # t=0 base positions

    def object_world_pos(self, oid: str) -> tuple[float, float]:
        return self.objects[oid].pos


def _default_offsets(profile: RobotProfile) -> list[tuple[float, float]]:
    if profile.num_effectors == 1:
        return [(0.25, 0.0)]
    spread = 0.12
    return [(0.25, spread if e == 0 else -spread) for e in range(profile.num_effectors)]


def _mix_seed(seed: int, tag: int) -> int:
    return (seed * 1000003 + tag * 7919 + 12345) % (2**63)


def reset(task: TaskSpec, seed: int) -> WorldState:
    """Deterministic initial state for (task, seed)."""
    rng = random.Random(_mix_seed(seed, 1))
    robots: dict[str, RobotState] = {}
    for prof in task.robots:
        start = task.starts[prof.robot_id]
        jx = rng.uniform(-start.jitter, start.jitter)
        jy = rng.uniform(-start.jitter, start.jitter)
        x, y, th = start.pose
        st = RobotState(profile=prof, base=(x + jx, y + jy, th))
        st.eff_offset = _default_offsets(prof)
        st.gripper = ["open"] * prof.num_effectors
        st.held = [None] * prof.num_effectors
        st.contact = [(0.0, 0.0, 0.0)] * prof.num_effectors
        st.last_eff_world = [st.eff_world(e) for e in range(prof.num_effectors)]
        robots[prof.robot_id] = st

    objects: dict[str, ObjState] = {}
    for attempt in range(40):
        objects = {}
        ok = True
        for od in task.objects:
            if od.rides is not None:
                rs = robots[od.rides]
                x, y, th = rs.base
                ox, oy = od.ride_offset
                c, s = math.cos(th), math.sin(th)
                pos = (x + c * ox - s * oy, y + s * ox + c * oy)
                objects[od.object_id] = ObjState(
                    pos=pos, radius=od.radius, rides=od.rides,
                    ride_offset=od.ride_offset, is_container=od.is_container,
                )
                continue
            px = od.spawn[0] + rng.uniform(-od.jitter, od.jitter)
            py = od.spawn[1] + rng.uniform(-od.jitter, od.jitter)
            for other in objects.values():
                if other.rides is None and math.dist((px, py), other.pos) < od.radius + other.radius + 0.02:
                    ok = False
            objects[od.object_id] = ObjState(pos=(px, py), radius=od.radius, is_container=od.is_container)
        if ok:
            break
    else:
        raise LayoutInfeasible(f"could not place objects for task {task.task_id!r} seed {seed}")

    state = WorldState(task=task, time=0.0, robots=robots, objects=objects, rng=rng)
    for z in task.zones:
        state.wipe_done[z.zone_id] = set()
    state.home_pose = {rid: rs.base[:2] for rid, rs in robots.items()}
    return state


def wipe_waypoints(zone: ZoneDef) -> list[tuple[float, float]]:
    x0, y0, x1, y1 = zone.rect
    ym = (y0 + y1) / 2.0
    return [(x0 + (x1 - x0) * f, ym) for f in (0.25, 0.5, 0.75)]


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def step(state: WorldState, actions: dict[str, ActionCommand]) -> tuple[WorldState, list[tuple]]:
    """Advance the world by one control period.

    Kinematic integration, command clipping (with events), gripper
    attach/release, rigid carried objects, base collisions resolved to the
    last non-penetrating configuration, and contact-force proxies.
    """
    task = state.task
    events: list[tuple] = []
    for rid in state.robots:
        if rid not in actions:
            raise SimError(f"missing action for robot {rid!r}")

    new_robots: dict[str, RobotState] = {}
    prev_eff_world: dict[str, list[tuple[float, float]]] = {}
    eff_deltas: dict[str, list[tuple[float, float]]] = {}
    collided: set[str] = set()

    order = sorted(state.robots)
    for rid in order:
        rs = state.robots[rid]
        cmd = actions[rid]
        v, om = cmd.base_cmd
        cv = _clip(v, -V_MAX, V_MAX)
        com = _clip(om, -OMEGA_MAX, OMEGA_MAX)
        if rs.profile.kind == "fixed_dual_arm":
            cv, com = 0.0, 0.0
        if cv != v or com != om:
            events.append(("clipped", rid, "base_cmd"))
        x, y, th = rs.base
        nx = x + cv * math.cos(th) * DT
        ny = y + cv * math.sin(th) * DT
        nth = wrap_angle(th + com * DT)
        W, H = task.bounds
        bx = _clip(nx, BASE_RADIUS, W - BASE_RADIUS)
        by = _clip(ny, BASE_RADIUS, H - BASE_RADIUS)
        if bx != nx or by != ny:
            events.append(("collision_wall", rid))
            collided.add(rid)
        new = RobotState(profile=rs.profile, base=(bx, by, nth), twist=(cv, com))
        new.gripper = list(rs.gripper)
        new.held = list(rs.held)
        prev_eff_world[rid] = [rs.eff_world(e) for e in range(rs.profile.num_effectors)]
        offs = []
        deltas = []
        for e in range(rs.profile.num_effectors):
            dx, dy = cmd.effector_cmd[e]
            cdx = _clip(dx, -DELTA_MAX, DELTA_MAX)
            cdy = _clip(dy, -DELTA_MAX, DELTA_MAX)
            if cdx != dx or cdy != dy:
                events.append(("clipped", rid, f"effector_cmd[{e}]"))
            ox, oy = rs.eff_offset[e]
            nox, noy = ox + cdx, oy + cdy
            norm = math.hypot(nox, noy)
            if norm > ARM_REACH:
                nox *= ARM_REACH / norm
                noy *= ARM_REACH / norm
                events.append(("clipped", rid, f"effector_reach[{e}]"))
            offs.append((nox, noy))
            deltas.append((cdx, cdy))
        new.eff_offset = offs
        eff_deltas[rid] = deltas
        new_robots[rid] = new

    # base-disc collisions between robots: both revert to previous pose
    for i, ra in enumerate(order):
        for rb in order[i + 1 :]:
            a, b = new_robots[ra], new_robots[rb]
            if math.dist(a.base[:2], b.base[:2]) < 2 * BASE_RADIUS:
                pa, pb = state.robots[ra], state.robots[rb]
                new_robots[ra] = replace(a, base=pa.base, twist=(0.0, 0.0))
                new_robots[ra].gripper, new_robots[ra].held = a.gripper, a.held
                new_robots[ra].eff_offset = a.eff_offset
                new_robots[rb] = replace(b, base=pb.base, twist=(0.0, 0.0))
                new_robots[rb].gripper, new_robots[rb].held = b.gripper, b.held
                new_robots[rb].eff_offset = b.eff_offset
                events.append(("collision", ra, rb))
                collided.add(ra)
                collided.add(rb)

    new_objects = {oid: replace(o) for oid, o in state.objects.items()}

    # gripper transitions
    for rid in order:
        rs = new_robots[rid]
        cmd = actions[rid]
        for e in range(rs.profile.num_effectors):
            g = cmd.gripper_cmd[e]
            if g == "open":
                if rs.gripper[e] == "closed":
                    rs.gripper[e] = "open"
                    held = rs.held[e]
                    if held is not None:
                        rs.held[e] = None
                        obj = new_objects[held]
                        obj.held_by = None
                        obj.pos = rs.eff_world(e)
                        events.append(("release", rid, e, held))
                        # boarding: released next to a container object joins its robot
                        for cid, cobj in sorted(new_objects.items()):
                            if cobj.is_container and cid != held and cobj.rides is not None:
                                if math.dist(obj.pos, cobj.pos) <= CONTAIN_RADIUS:
                                    carrier = new_robots[cobj.rides]
                                    cx, cy, cth = carrier.base
                                    cw, sw = math.cos(-cth), math.sin(-cth)
                                    dx, dy = obj.pos[0] - cx, obj.pos[1] - cy
                                    obj.rides = cobj.rides
                                    obj.ride_offset = (cw * dx - sw * dy, sw * dx + cw * dy)
                                    events.append(("board", held, cobj.rides))
                                    break
            elif g == "close":
                rs.gripper[e] = "closed"

    # attachment: a closed empty gripper within grasp radius of a free object
    for rid in order:
        rs = new_robots[rid]
        for e in range(rs.profile.num_effectors):
            if rs.gripper[e] != "closed" or rs.held[e] is not None:
                continue
            ew = rs.eff_world(e)
            best = None
            best_d = GRASP_RADIUS
            for oid in sorted(new_objects):
                obj = new_objects[oid]
                if obj.held_by is not None or obj.is_container:
                    continue
                d = math.dist(ew, obj.pos)
                if d < best_d:
                    best, best_d = oid, d
            if best is not None:
                rs.held[e] = best
                obj = new_objects[best]
                obj.held_by = (rid, e)
                obj.rides = None
                events.append(("attach", rid, e, best))

    # carried object kinematics
    for oid in sorted(new_objects):
        obj = new_objects[oid]
        if obj.held_by is not None:
            rid, e = obj.held_by
            obj.pos = new_robots[rid].eff_world(e)
        elif obj.rides is not None:
            carrier = new_robots[obj.rides]
            x, y, th = carrier.base
            ox, oy = obj.ride_offset
            c, s = math.cos(th), math.sin(th)
            obj.pos = (x + c * ox - s * oy, y + s * ox + c * oy)

    # base pushes free objects out of its disc
    for rid in order:
        rs = new_robots[rid]
        bx, by, _ = rs.base
        for oid in sorted(new_objects):
            obj = new_objects[oid]
            if obj.held_by is not None or obj.rides is not None:
                continue
            d = math.dist((bx, by), obj.pos)
            min_d = BASE_RADIUS + obj.radius
            if d < min_d:
                if d < 1e-9:
                    nxv, nyv = 1.0, 0.0
                else:
                    nxv, nyv = (obj.pos[0] - bx) / d, (obj.pos[1] - by) / d
                # separate with a margin so a parked robot does not re-collide
                obj.pos = (bx + nxv * (min_d + 0.005), by + nyv * (min_d + 0.005))
                events.append(("collision_object", rid, oid))
                collided.add(rid)

    # wipe progress: any effector brushing a waypoint of any zone marks it
    new_wipe = {z: set(v) for z, v in state.wipe_done.items()}
    for z in task.zones:
        wps = wipe_waypoints(z)
        for rid in order:
            rs = new_robots[rid]
            for e in range(rs.profile.num_effectors):
                ew = rs.eff_world(e)
                for k, wp in enumerate(wps):
                    if k not in new_wipe[z.zone_id] and math.dist(ew, wp) <= WIPE_RADIUS:
                        new_wipe[z.zone_id].add(k)

    # contact proxies
    for rid in order:
        rs = new_robots[rid]
        v = abs(rs.twist[0])
        contact = []
        for e in range(rs.profile.num_effectors):
            ew = rs.eff_world(e)
            px, py = prev_eff_world[rid][e]
            vx, vy = (ew[0] - px) / DT, (ew[1] - py) / DT
            speed = math.hypot(vx, vy)
            direction = math.atan2(vy, vx) if speed > 1e-9 else 0.0
            ddx, ddy = eff_deltas[rid][e]
            eff_rate = math.hypot(ddx, ddy) / DT
            if rid in collided:
                normal = COLLISION_FORCE
            elif rs.held[e] is not None:
                normal = HOLD_FORCE
            else:
                normal = 0.0
            tangential = (2.0 * v + 1.0 * eff_rate) if normal > 0.0 else 0.0
            contact.append((normal, tangential, direction if normal > 0.0 else 0.0))
        rs.contact = contact
        rs.last_eff_world = [rs.eff_world(e) for e in range(rs.profile.num_effectors)]

    new_state = WorldState(
        task=task,
        time=state.time + DT,
        robots=new_robots,
        objects=new_objects,
        rng=state.rng,
        wipe_done=new_wipe,
        collision_flags=collided,
        home_pose=state.home_pose,
    )
    return new_state, events


def check_success(state: WorldState, task: TaskSpec) -> bool:
    """True iff every success atom holds (zone rectangles are closed)."""
    for kind, obj, target in task.success:
        if obj not in state.objects:
            raise UnknownId(f"success predicate references unknown object {obj!r}")
        o = state.objects[obj]
        if kind == "in_zone":
            z = task.zone(target)
            if not z.contains(o.pos):
                return False
        elif kind == "in_container":
            if target not in state.robots:
                raise UnknownId(f"success predicate references unknown robot {target!r}")
            if o.rides != target or o.held_by is not None:
                return False
        else:
            raise UnknownId(f"unknown success atom kind {kind!r}")
    return True


def object_in_hazard(state: WorldState, task: TaskSpec) -> bool:
    for oid in task.critical_objects:
        o = state.objects[oid]
        if o.held_by is not None or o.rides is not None:
            continue
        for z in task.zones:
            if z.hazard and z.contains(o.pos):
                return True
    return False


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


def observation_dim(profile: RobotProfile, k: int = K_ENTITIES) -> int:
    e = profile.num_effectors
    return 5 + 7 * e + 2 * k


def observe(state: WorldState, robot_id: str):
    """Fixed-length observation vector for one robot.

    Layout: base pose (3), base twist (2), effector offsets in the base frame
    (2E), gripper one-hots (2E), contact triples (3E), egocentric deltas to
    the K nearest task-relevant entities selected by distance and ordered by
    id (2K), padded with -10.0. Pure function of the state.
    """
    if robot_id not in state.robots:
        raise UnknownId(f"unknown robot {robot_id!r}")
    rs = state.robots[robot_id]
    task = state.task
    x, y, th = rs.base
    out = [x, y, th, rs.twist[0], rs.twist[1]]
    for e in range(rs.profile.num_effectors):
        out.extend(rs.eff_offset[e])
    for e in range(rs.profile.num_effectors):
        out.extend((1.0, 0.0) if rs.gripper[e] == "open" else (0.0, 1.0))
    for e in range(rs.profile.num_effectors):
        out.extend(rs.contact[e])
    entities: list[tuple[str, tuple[float, float]]] = []
    for ent in task.relevant_entities:
        if ent in state.objects:
            entities.append((ent, state.objects[ent].pos))
        else:
            entities.append((ent, task.zone(ent).center()))
    entities.sort(key=lambda kv: (math.dist((x, y), kv[1]), kv[0]))
    chosen = sorted(entities[:K_ENTITIES], key=lambda kv: kv[0])
    c, s = math.cos(-th), math.sin(-th)
    for _, (ex, ey) in chosen:
        dx, dy = ex - x, ey - y
        out.extend((c * dx - s * dy, s * dx + c * dy))
    for _ in range(K_ENTITIES - len(chosen)):
        out.extend((PAD_SENTINEL, PAD_SENTINEL))
    return np.array(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------


def _is_home_return(state: WorldState, sub: SubtaskSpec, task: TaskSpec) -> bool:
    home = state.home_pose.get(sub.actor)
    return home is not None and task.zone(sub.target).contains(home)


def subtask_done(state: WorldState, sub: SubtaskSpec, task: TaskSpec) -> bool:
    rs = state.robots[sub.actor]
    if sub.kind == "navigation":
        if sub.instruction.startswith("Go to"):
            if _is_home_return(state, sub, task):
                # demonstration protocol: finish parked on the start pose
                home = state.home_pose[sub.actor]
                return math.dist(rs.base[:2], home) <= 0.06 and abs(rs.twist[0]) < 0.02
            # arrive braked so the next stage starts from a controlled speed
            return task.zone(sub.target).contains(rs.base[:2]) and abs(rs.twist[0]) <= 0.3
        # Stop in front of [object]
        d = math.dist(rs.base[:2], state.objects[sub.target].pos)
        return d <= STANDOFF + 0.06 and abs(rs.twist[0]) < 0.02
    if sub.instruction.startswith("Pick up"):
        return sub.target in rs.held
    if sub.instruction.startswith("Place"):
        obj = state.objects[sub.obj]
        if obj.held_by is not None:
            return False
        if sub.target in state.robots:
            return obj.rides == sub.target
        dest = state.objects.get(sub.target)
        if dest is not None and dest.is_container:
            return obj.rides == dest.rides and obj.rides is not None
        return task.zone(sub.target).contains(obj.pos)
    if sub.instruction.startswith("Wipe"):
        return len(state.wipe_done[sub.target]) == len(wipe_waypoints(task.zone(sub.target)))
    raise UnknownId(f"unrecognized instruction template: {sub.instruction!r}")


class ExpertController:
    """Proportional controller executing one subtask for one robot.

    Holds smoothing state (previous commands) and per-subtask fault noise; a
    fresh controller given the same (state, rng state) emits the same action.
    """

    def __init__(self, robot_id: str, faults: FaultConfig, rng: random.Random):
        self.robot_id = robot_id
        self.faults = faults
        self.rng = rng
        self.prev_v = 0.0
        self.prev_om = 0.0
        self.v_cap = EXPERT_V
        self.prev_deltas: dict[int, tuple[float, float]] = {}
        self.bias = (0.0, 0.0)
        self.bias_key: tuple | None = None
        self.bias_age = 0
        self.slip_pending: dict[str, int] = {}  # object -> steps until forced release

    def _waypoint_bias(self, key: tuple) -> tuple[float, float]:
        sig = self.faults.overshoot_sigma
        if sig <= 0:
            return (0.0, 0.0)
        if key != self.bias_key or self.bias_age >= 20:
            self.bias = (self.rng.gauss(0.0, sig), self.rng.gauss(0.0, sig))
            self.bias_key = key
            self.bias_age = 0
        self.bias_age += 1
        return self.bias

    def _drive(self, rs: RobotState, target: tuple[float, float], stop_dist: float = 0.0) -> tuple[float, float]:
        x, y, th = rs.base
        dx, dy = target[0] - x, target[1] - y
        dist = math.hypot(dx, dy)
        gap = dist - stop_dist
        self.near_target = gap < 0.35  # precision zone: exploration noise off
        if gap < -0.04:
            # overshot the standoff: back out slowly
            heading = math.atan2(dy, dx)
            err = wrap_angle(heading - th)
            om_des = _clip(1.5 * err, -EXPERT_OMEGA, EXPERT_OMEGA)
            v_des = max(-0.3, 2.0 * gap) if abs(err) < 1.2 else 0.0
        elif gap < 0.02:
            v_des, om_des = 0.0, 0.0
        else:
            heading = math.atan2(dy, dx)
            err = wrap_angle(heading - th)
            om_des = _clip(2.0 * err, -EXPERT_OMEGA, EXPERT_OMEGA)
            # blend turning with driving (carrot following): keeps speed up
            # under moderate misalignment so demonstrations cover the
            # (moving, turning) regime a learned policy needs
            align = max(0.0, math.cos(err))
            # braking-distance profile: never faster than the accel slew can shed
            v_des = min(EXPERT_V, math.sqrt(2.0 * EXPERT_BRAKE * gap), self.v_cap) * align
        v = _clip(v_des, self.prev_v - EXPERT_ACCEL, self.prev_v + EXPERT_ACCEL)
        om = _clip(om_des, self.prev_om - EXPERT_OMEGA_ACCEL, self.prev_om + EXPERT_OMEGA_ACCEL)
        return v, om

    def _object_speed_cap(self, state: WorldState, rs: RobotState) -> float:
        """Keep enough braking room to never plow into a free object."""
        cap = EXPERT_V
        for oid in sorted(state.objects):
            obj = state.objects[oid]
            if obj.held_by is not None or obj.rides is not None:
                continue
            d = math.dist(rs.base[:2], obj.pos)
            cap = min(cap, 0.05 + math.sqrt(2.0 * EXPERT_BRAKE * max(0.0, d - 0.26)))
        return cap

    def _step_towards(self, e: int, ox: float, oy: float, want: tuple[float, float]) -> tuple[float, float]:
        rx, ry = want[0] - ox, want[1] - oy
        dist = math.hypot(rx, ry)
        if dist < 1e-12:
            mag = 0.0
        else:
            mag = min(EXPERT_EFF_STEP, math.sqrt(2.0 * EXPERT_EFF_BRAKE * dist), dist)
        ddx = rx / dist * mag if dist > 1e-12 else 0.0
        ddy = ry / dist * mag if dist > 1e-12 else 0.0
        px, py = self.prev_deltas.get(e, (0.0, 0.0))
        ddx = _clip(ddx, px - EXPERT_EFF_SLEW, px + EXPERT_EFF_SLEW)
        ddy = _clip(ddy, py - EXPERT_EFF_SLEW, py + EXPERT_EFF_SLEW)
        return ddx, ddy

    def _reach(self, rs: RobotState, e: int, target_world: tuple[float, float]) -> tuple[float, float]:
        x, y, th = rs.base
        c, s = math.cos(-th), math.sin(-th)
        dx, dy = target_world[0] - x, target_world[1] - y
        want = (c * dx - s * dy, s * dx + c * dy)
        ox, oy = rs.eff_offset[e]
        return self._step_towards(e, ox, oy, want)

    def _retract(self, rs: RobotState, e: int) -> tuple[float, float]:
        home = _default_offsets(rs.profile)[e]
        ox, oy = rs.eff_offset[e]
        return self._step_towards(e, ox, oy, home)

    def _decay(self, e: int) -> tuple[float, float]:
        px, py = self.prev_deltas.get(e, (0.0, 0.0))
        return (_clip(0.0, px - EXPERT_EFF_SLEW, px + EXPERT_EFF_SLEW),
                _clip(0.0, py - EXPERT_EFF_SLEW, py + EXPERT_EFF_SLEW))

    def idle(self, state: WorldState) -> ActionCommand:
        """Smoothly brake to a stop and hold (used off-turn and during the
        terminal pause)."""
        rs = state.robots[self.robot_id]
        E = rs.profile.num_effectors
        self.allow_arm = True
        self.near_target = True
        return self._emit(rs, 0.0, 0.0, [self._decay(e) for e in range(E)], ["hold"] * E)

    def act(self, state: WorldState, sub: SubtaskSpec) -> ActionCommand:
        task = state.task
        rs = state.robots[self.robot_id]
        E = rs.profile.num_effectors
        # arm moves only when the base is nearly still: keeps world-frame
        # effector jerk well under the inspection threshold
        self.allow_arm = abs(rs.twist[0]) < 0.25 and abs(rs.twist[1]) < 0.3
        self.v_cap = self._object_speed_cap(state, rs)
        self.near_target = True  # set False by _drive on long hauls
        v, om = 0.0, 0.0
        deltas = [(0.0, 0.0)] * E
        grips = ["hold"] * E
        f = self.faults

        # forced release: a slipping grasp lets go a moment after attach
        for e in range(E):
            held = rs.held[e]
            if held is not None and held in self.slip_pending:
                self.slip_pending[held] -= 1
                if self.slip_pending[held] <= 0:
                    del self.slip_pending[held]
                    grips[e] = "open"
                    for j in range(E):
                        deltas[j] = self._retract(rs, j) if j == e else deltas[j]
                    return self._emit(rs, v, om, deltas, grips)

        if sub.kind == "navigation":
            if sub.instruction.startswith("Go to"):
                if _is_home_return(state, sub, task):
                    target = state.home_pose[self.robot_id]
                else:
                    target = task.zone(sub.target).center()
                if math.dist(rs.base[:2], target) > 0.5:
                    # detour noise applies en route, not on final approach
                    bias = self._waypoint_bias(("nav", sub.index))
                    target = (target[0] + bias[0], target[1] + bias[1])
                v, om = self._drive(rs, target)
            else:  # Stop in front of [object]
                target = state.objects[sub.target].pos
                v, om = self._drive(rs, target, stop_dist=STANDOFF)
            if f.speed_spike_prob > 0 and self.rng.random() < f.speed_spike_prob:
                v *= 3.0
            for e in range(E):
                deltas[e] = self._retract(rs, e)
        elif sub.instruction.startswith("Pick up"):
            v, om, deltas, grips = self._do_pick(state, rs, sub.target, deltas, grips)
        elif sub.instruction.startswith("Place"):
            v, om, deltas, grips = self._do_place(state, rs, sub, deltas, grips)
        elif sub.instruction.startswith("Wipe"):
            zone = task.zone(sub.target)
            wps = wipe_waypoints(zone)
            pending = [k for k in range(len(wps)) if k not in state.wipe_done[sub.target]]
            if pending:
                wp = wps[pending[0]]
                d = math.dist(rs.base[:2], wp)
                if d > ARM_REACH - 0.14:
                    v, om = self._drive(rs, wp, stop_dist=STANDOFF)
                else:
                    deltas[0] = self._reach(rs, 0, wp)
        else:
            raise UnknownId(f"unrecognized instruction template: {sub.instruction!r}")

        return self._emit(rs, v, om, deltas, grips)

    def _do_pick(self, state, rs, obj_id, deltas, grips, eff: int | None = None):
        obj = state.objects[obj_id]
        v, om = 0.0, 0.0
        if obj_id in rs.held:
            return v, om, deltas, grips
        d = math.dist(rs.base[:2], obj.pos)
        if d > STANDOFF + 0.08:
            target = obj.pos
            if d > 0.5:
                bias = self._waypoint_bias(("pick", obj_id))
                target = (obj.pos[0] + bias[0], obj.pos[1] + bias[1])
            v, om = self._drive(rs, target, stop_dist=STANDOFF)
            for e in range(rs.profile.num_effectors):
                deltas[e] = self._retract(rs, e)
            return v, om, deltas, grips
        if eff is None:
            free = [e for e in range(rs.profile.num_effectors) if rs.held[e] is None]
            if not free:
                return v, om, deltas, grips
            eff = free[0]
        v, om = self._drive(rs, obj.pos, stop_dist=STANDOFF)  # hold position / back out
        if d - STANDOFF < -0.04:
            return v, om, deltas, grips  # overshot: reposition before reaching
        deltas[eff] = self._reach(rs, eff, obj.pos)
        ew = rs.eff_world(eff)
        if math.dist(ew, obj.pos) < CLOSE_RADIUS:
            # close through the whole final approach; the grasp itself engages
            # within GRASP_RADIUS (wide close region keeps the skill learnable)
            grips[eff] = "close"
            if self.faults.grasp_slip_prob > 0 and obj_id not in self.slip_pending:
                if self.rng.random() < self.faults.grasp_slip_prob:
                    # weak grasp: lets go a little later, often mid-transport
                    self.slip_pending[obj_id] = 2 + int(self.rng.random() * 14)
        elif rs.gripper[eff] == "closed":
            grips[eff] = "open"  # empty closed hand far from the target: retry
        return v, om, deltas, grips

    def _do_place(self, state, rs, sub, deltas, grips):
        task = state.task
        obj = state.objects[sub.obj]
        v, om = 0.0, 0.0
        if obj.held_by is None or obj.held_by[0] != self.robot_id:
            return self._do_pick(state, rs, sub.obj, deltas, grips)
        eff = obj.held_by[1]
        if sub.target in state.robots or (
            sub.target in state.objects and state.objects[sub.target].is_container
        ):
            dest_pos = (
                state.objects[sub.target].pos
                if sub.target in state.objects
                else state.robots[sub.target].base[:2]
            )
            release_r = 0.12  # inside the basket boarding radius
        else:
            dest_pos = task.zone(sub.target).center()
            release_r = RELEASE_RADIUS
        d = math.dist(rs.base[:2], dest_pos)
        if d > STANDOFF + 0.08:
            target = dest_pos
            if d > 0.5:
                bias = self._waypoint_bias(("place", sub.index))
                target = (dest_pos[0] + bias[0], dest_pos[1] + bias[1])
            v, om = self._drive(rs, target, stop_dist=STANDOFF)
            if self.faults.premature_release_prob > 0 and self.rng.random() < self.faults.premature_release_prob:
                grips[eff] = "open"
            return v, om, deltas, grips
        v, om = self._drive(rs, dest_pos, stop_dist=STANDOFF)
        if d - STANDOFF < -0.04:
            return v, om, deltas, grips  # overshot: reposition before reaching
        deltas[eff] = self._reach(rs, eff, dest_pos)
        ew = rs.eff_world(eff)
        if math.dist(ew, dest_pos) < release_r:
            grips[eff] = "open"
        return v, om, deltas, grips

    def _emit(self, rs, v, om, deltas, grips) -> ActionCommand:
        f = self.faults
        if not getattr(self, "allow_arm", True):
            deltas = [self._decay(e) for e in range(len(deltas))]
        # slew applies globally, including branches that went idle this step
        v = _clip(v, self.prev_v - EXPERT_ACCEL, self.prev_v + EXPERT_ACCEL)
        om = _clip(om, self.prev_om - EXPERT_OMEGA_ACCEL, self.prev_om + EXPERT_OMEGA_ACCEL)
        slewed = []
        for e, (dx, dy) in enumerate(deltas):
            px, py = self.prev_deltas.get(e, (0.0, 0.0))
            slewed.append(
                (_clip(dx, px - EXPERT_EFF_SLEW, px + EXPERT_EFF_SLEW),
                 _clip(dy, py - EXPERT_EFF_SLEW, py + EXPERT_EFF_SLEW))
            )
        deltas = slewed
        if f.action_noise > 0:
            # exploration jitter the closed-loop expert then corrects; widens
            # state coverage so learned policies see recovery data. Hard-gated
            # off during precision approaches and parking, where jitter would
            # keep re-energizing the base and block terminal conditions.
            if not getattr(self, "near_target", True) and abs(v) > 0.12:
                v += self.rng.gauss(0.0, f.action_noise)
                om += self.rng.gauss(0.0, f.action_noise)
            noisy = []
            for dx, dy in deltas:
                if abs(dx) + abs(dy) > 0.008:
                    dx += self.rng.gauss(0.0, f.action_noise * 0.05)
                    dy += self.rng.gauss(0.0, f.action_noise * 0.05)
                noisy.append((dx, dy))
            deltas = noisy
        v = _clip(v, -V_MAX, V_MAX)
        om = _clip(om, -OMEGA_MAX, OMEGA_MAX)
        deltas = [(_clip(dx, -DELTA_MAX, DELTA_MAX), _clip(dy, -DELTA_MAX, DELTA_MAX)) for dx, dy in deltas]
        self.prev_v, self.prev_om = v, om
        self.prev_deltas = {e: d for e, d in enumerate(deltas)}
        return ActionCommand(base_cmd=(v, om), effector_cmd=tuple(deltas), gripper_cmd=tuple(grips))


def expert_action(
    state: WorldState,
    robot_id: str,
    subtask: SubtaskSpec,
    faults: FaultConfig,
    rng: random.Random,
) -> ActionCommand:
    """Single-step expert interface: one proportional-control action toward the
    subtask's target with fault injection. Deterministic in (state, rng state)."""
    if subtask.actor != robot_id:
        raise SimError(f"subtask actor {subtask.actor!r} != robot {robot_id!r}")
    ctl = ExpertController(robot_id, faults, rng)
    rs = state.robots[robot_id]
    ctl.prev_v, ctl.prev_om = rs.twist
    return ctl.act(state, subtask)


# ---------------------------------------------------------------------------
# expert rollouts
# ---------------------------------------------------------------------------


def _rollout(task: TaskSpec, seed: int, faults: FaultConfig) -> tuple[list[dict], str, list[tuple[int, int, SubtaskSpec]]]:
    """Run the scripted schedule; returns per-step records, outcome, and the
    executed (t_start, t_end, subtask) spans."""
    state = reset(task, seed)
    fault_rng = random.Random(_mix_seed(seed, 2))
    gap_rng = random.Random(_mix_seed(seed, 3))
    controllers = {p.robot_id: ExpertController(p.robot_id, faults, fault_rng) for p in task.robots}

    spans: list[tuple[int, int, SubtaskSpec]] = []
    records: list[dict] = []
    sub_i = 0
    span_start = 0
    pause_left: int | None = None
    timestamp = 0.0
    outcome = "failure"
    t = 0
    while True:
        if sub_i >= len(task.subtasks) and pause_left is None:
            pause_left = HOME_PAUSE_STEPS
        if pause_left is not None and pause_left <= 0:
            outcome = "success" if check_success(state, task) else "failure"
            break
        if t >= task.time_limit:
            outcome = "failure"
            break
        if object_in_hazard(state, task):
            outcome = "failure"
            break

        actions: dict[str, ActionCommand] = {}
        if pause_left is not None:
            for p in task.robots:
                actions[p.robot_id] = controllers[p.robot_id].idle(state)
            pause_left -= 1
        else:
            sub = task.subtasks[sub_i]
            for p in task.robots:
                if p.robot_id == sub.actor:
                    actions[p.robot_id] = controllers[p.robot_id].act(state, sub)
                else:
                    actions[p.robot_id] = controllers[p.robot_id].idle(state)

        records.append({"state": state, "actions": actions, "timestamp": timestamp})
        state, _events = step(state, actions)
        if faults.timestamp_gap_prob > 0 and gap_rng.random() < faults.timestamp_gap_prob:
            timestamp += 2.5 * DT
        else:
            timestamp += DT
        t += 1

        if pause_left is None:
            sub = task.subtasks[sub_i]
            if subtask_done(state, sub, task):
                spans.append((span_start, t, sub))
                span_start = t
                sub_i += 1

    # terminal record (no action applied)
    zero = {p.robot_id: ActionCommand.zero(p.num_effectors) for p in task.robots}
    records.append({"state": state, "actions": zero, "timestamp": timestamp})
    T = len(records) - 1
    if sub_i < len(task.subtasks) and span_start < T:
        # truncated mid-subtask
        spans.append((span_start, T, task.subtasks[sub_i]))
    if spans and spans[-1][1] < T:
        # trailing steps (home pause) extend the last span
        s0, _, sub = spans[-1]
        spans[-1] = (s0, T, sub)
    if not spans:
        spans.append((0, T, task.subtasks[0]))
    return records, outcome, spans


def _contact_of(rs: RobotState) -> tuple:
    return tuple(rs.contact)


def _records_to_episode(
    task: TaskSpec, seed: int, records: list[dict], outcome: str,
    spans: list[tuple[int, int, SubtaskSpec]], robot_id: str, episode_id: str,
) -> EpisodeRecord:
    profile = task.profile(robot_id)
    steps = []
    for t, rec in enumerate(records):
        state: WorldState = rec["state"]
        rs = state.robots[robot_id]
        act: ActionCommand = rec["actions"][robot_id]
        steps.append(
            Step(
                t=t,
                timestamp=rec["timestamp"],
                base_pose=rs.base,
                base_twist=rs.twist,
                effector_pos=tuple(rs.eff_world(e) for e in range(profile.num_effectors)),
                gripper_state=tuple(rs.gripper),
                held_object=tuple(rs.held),
                contact=_contact_of(rs),
                action=act,
                object_poses={oid: o.pos for oid, o in sorted(state.objects.items())},
            )
        )
    segments = [
        SubtaskSegment(index=sub.index, t_start=a, t_end=b, instruction=sub.instruction, kind=sub.kind)
        for a, b, sub in spans
    ]
    return EpisodeRecord(
        episode_id=episode_id,
        profile=profile,
        task_id=task.task_id,
        seed=seed,
        steps=steps,
        outcome=outcome,
        segments=segments,
    )


def rollout_expert(task: TaskSpec, seed: int, faults: FaultConfig = ZERO_FAULTS) -> EpisodeRecord:
    """Scripted-expert episode for a single-robot task."""
    if len(task.robots) != 1:
        raise SimError(f"task {task.task_id!r} has {len(task.robots)} robots; use rollout_expert_multi")
    records, outcome, spans = _rollout(task, seed, faults)
    rid = task.robots[0].robot_id
    return _records_to_episode(task, seed, records, outcome, spans, rid, f"{task.task_id}-{seed:08d}")


def rollout_expert_multi(task: TaskSpec, seed: int, faults: FaultConfig = ZERO_FAULTS) -> list[EpisodeRecord]:
    """Scripted-expert episode for any task: one record per robot, shared
    schedule, outcome, and seed."""
    records, outcome, spans = _rollout(task, seed, faults)
    return [
        _records_to_episode(
            task, seed, records, outcome, spans, p.robot_id,
            f"{task.task_id}-{seed:08d}/{p.robot_id}",
        )
        for p in task.robots
    ]
