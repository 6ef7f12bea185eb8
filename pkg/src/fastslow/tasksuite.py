"""Shipped task suite and the declarative task-file format.

Five tasks: four single-robot (navigate-pick-navigate-place, wipe, two-object
sort, shelf pull-place-push analog) and one two-robot collaborative task
(picker loads a carrier's basket; the carrier drives to the counter). The
textual grammar is documented in docs/task_format.md; `load_task_file` /
`dump_task` round-trip it.
"""

from __future__ import annotations

from .simworld import (
    DT,
    ObjectDef,
    RobotStart,
    SubtaskSpec,
    TaskSpec,
    UnknownId,
    ZoneDef,
)
from .trajstore import RobotProfile


def _nav_goto(index: int, actor: str, zone: str) -> SubtaskSpec:
    return SubtaskSpec(index, "navigation", f"Go to [{zone}]", actor, zone)


def _nav_stop(index: int, actor: str, obj: str) -> SubtaskSpec:
    return SubtaskSpec(index, "navigation", f"Stop in front of [{obj}]", actor, obj)


def _pick(index: int, actor: str, obj: str) -> SubtaskSpec:
    return SubtaskSpec(index, "manipulation", f"Pick up [{obj}]", actor, obj, obj=obj)


def _place(index: int, actor: str, obj: str, dest: str) -> SubtaskSpec:
    return SubtaskSpec(index, "manipulation", f"Place [{obj}] in [{dest}]", actor, dest, obj=obj)


def _wipe(index: int, actor: str, zone: str) -> SubtaskSpec:
    return SubtaskSpec(index, "manipulation", f"Wipe [{zone}]", actor, zone)


def _mobile(robot_id: str = "r1") -> RobotProfile:
    return RobotProfile(robot_id, "mobile_dual_arm", 2, True, DT)


def make_pickplace() -> TaskSpec:
    r = "r1"
    return TaskSpec(
        task_id="pickplace",
        robots=(_mobile(r),),
        starts={r: RobotStart((0.55, 0.55, 0.0), 0.08)},
        zones=(
            ZoneDef("home", (0.2, 0.2, 0.9, 0.9)),
            ZoneDef("table", (2.6, 0.3, 3.8, 1.3)),
            ZoneDef("dropoff", (2.6, 1.9, 3.8, 2.9)),
            ZoneDef("bin", (2.9, 2.2, 3.5, 2.8)),
            ZoneDef("gap", (2.7, 1.45, 3.7, 1.75), hazard=True),
        ),
        objects=(ObjectDef("cube", 0.04, (3.2, 0.8), 0.22),),
        subtasks=(
            _nav_goto(1, r, "table"),
            _pick(2, r, "cube"),
            _nav_goto(3, r, "dropoff"),
            _place(4, r, "cube", "bin"),
            _nav_goto(5, r, "home"),
        ),
        success=(("in_zone", "cube", "bin"),),
        time_limit=320,
        critical_objects=("cube",),
        relevant_entities=("cube", "bin", "table", "home", "gap"),
    )


def make_wipe() -> TaskSpec:
    r = "r1"
    return TaskSpec(
        task_id="wipe",
        robots=(_mobile(r),),
        starts={r: RobotStart((0.55, 0.55, 0.0), 0.08)},
        zones=(
            ZoneDef("home", (0.2, 0.2, 0.9, 0.9)),
            ZoneDef("prep", (2.6, 0.2, 3.8, 1.2)),
            ZoneDef("counter", (2.7, 1.8, 3.7, 2.6)),
            ZoneDef("trayside", (0.2, 1.9, 1.1, 2.9)),
            ZoneDef("tray", (0.3, 2.2, 0.9, 2.8)),
        ),
        objects=(ObjectDef("sponge", 0.035, (3.1, 0.7), 0.15),),
        subtasks=(
            _nav_goto(1, r, "prep"),
            _pick(2, r, "sponge"),
            _nav_goto(3, r, "counter"),
            _wipe(4, r, "counter"),
            _nav_goto(5, r, "trayside"),
            _place(6, r, "sponge", "tray"),
            _nav_goto(7, r, "home"),
        ),
        success=(("in_zone", "sponge", "tray"),),
        time_limit=430,
        critical_objects=("sponge",),
        relevant_entities=("sponge", "counter", "tray", "prep", "home"),
    )


def make_sort() -> TaskSpec:
    r = "r1"
    return TaskSpec(
        task_id="sort",
        robots=(_mobile(r),),
        starts={r: RobotStart((0.55, 0.55, 0.0), 0.08)},
        zones=(
            ZoneDef("home", (0.2, 0.2, 0.9, 0.9)),
            ZoneDef("table", (2.6, 0.3, 3.8, 1.4)),
            ZoneDef("red_corner", (0.2, 2.1, 1.0, 2.9)),
            ZoneDef("red_bin", (0.35, 2.3, 0.85, 2.8)),
            ZoneDef("blue_corner", (1.5, 2.1, 2.5, 2.9)),
            ZoneDef("blue_bin", (1.7, 2.3, 2.3, 2.8)),
        ),
        objects=(
            ObjectDef("red_block", 0.04, (2.95, 0.7), 0.15),
            ObjectDef("blue_block", 0.04, (3.45, 0.95), 0.15),
        ),
        subtasks=(
            _nav_goto(1, r, "table"),
            _pick(2, r, "red_block"),
            _pick(3, r, "blue_block"),
            _nav_goto(4, r, "red_corner"),
            _place(5, r, "red_block", "red_bin"),
            _nav_goto(6, r, "blue_corner"),
            _place(7, r, "blue_block", "blue_bin"),
            _nav_goto(8, r, "home"),
        ),
        success=(("in_zone", "red_block", "red_bin"), ("in_zone", "blue_block", "blue_bin")),
        time_limit=520,
        critical_objects=("red_block", "blue_block"),
        relevant_entities=("red_block", "blue_block", "red_bin", "blue_bin", "table", "home"),
    )


def make_shelf() -> TaskSpec:
    r = "r1"
    return TaskSpec(
        task_id="shelf",
        robots=(_mobile(r),),
        starts={r: RobotStart((0.55, 0.55, 0.0), 0.08)},
        zones=(
            ZoneDef("home", (0.2, 0.2, 0.9, 0.9)),
            ZoneDef("staging", (2.5, 0.25, 3.1, 0.85)),
            ZoneDef("slot", (3.15, 1.25, 3.75, 1.85)),
        ),
        objects=(
            ObjectDef("tray", 0.05, (3.45, 1.55), 0.07),
            ObjectDef("box", 0.04, (2.8, 0.95), 0.06),
        ),
        subtasks=(
            _nav_stop(1, r, "tray"),
            _pick(2, r, "tray"),
            _place(3, r, "tray", "staging"),
            _pick(4, r, "box"),
            _place(5, r, "box", "slot"),
            _nav_goto(6, r, "home"),
        ),
        success=(("in_zone", "tray", "staging"), ("in_zone", "box", "slot")),
        time_limit=400,
        critical_objects=("tray", "box"),
        relevant_entities=("tray", "box", "staging", "slot", "home"),
    )


def make_collab() -> TaskSpec:
    p, c = "picker", "carrier"
    return TaskSpec(
        task_id="collab",
        robots=(
            _mobile(p),
            RobotProfile(c, "carrier", 1, False, DT),
        ),
        starts={
            p: RobotStart((0.6, 0.6, 0.0), 0.07),
            c: RobotStart((2.3, 1.45, 0.0), 0.05),
        },
        zones=(
            ZoneDef("picker_home", (0.3, 0.3, 0.9, 0.9)),
            ZoneDef("shelf_area", (2.7, 0.3, 3.9, 1.5)),
            ZoneDef("counter_park", (0.5, 2.45, 1.0, 2.9)),
            ZoneDef("counter", (0.2, 1.9, 1.5, 2.9)),
        ),
        objects=(
            ObjectDef("banana", 0.04, (3.2, 0.75), 0.12),
            ObjectDef("pepper", 0.04, (3.5, 1.15), 0.12),
            ObjectDef("basket", 0.12, (0.0, 0.0), 0.0, rides=c, ride_offset=(0.25, 0.0), is_container=True),
        ),
        subtasks=(
            _nav_goto(1, p, "shelf_area"),
            _pick(2, p, "banana"),
            _place(3, p, "banana", "basket"),
            _pick(4, p, "pepper"),
            _place(5, p, "pepper", "basket"),
            _nav_goto(6, c, "counter_park"),
            _nav_goto(7, p, "picker_home"),
        ),
        success=(
            ("in_container", "banana", c),
            ("in_container", "pepper", c),
            ("in_zone", "basket", "counter"),
        ),
        time_limit=480,
        critical_objects=("banana", "pepper"),
        relevant_entities=("banana", "pepper", "basket", "shelf_area", "counter_park", "picker_home"),
    )


_BUILDERS = {
    "pickplace": make_pickplace,
    "wipe": make_wipe,
    "sort": make_sort,
    "shelf": make_shelf,
    "collab": make_collab,
}

SINGLE_ROBOT_TASKS = ("pickplace", "wipe", "sort", "shelf")
ALL_TASKS = ("pickplace", "wipe", "sort", "shelf", "collab")


def get_task(task_id: str) -> TaskSpec:
    try:
        return _BUILDERS[task_id]()
    except KeyError:
        raise UnknownId(f"unknown task {task_id!r}") from None


# ---------------------------------------------------------------------------
# merged stages (the planner-facing subtask list)
# ---------------------------------------------------------------------------


class MergedStage:
    """A planner-visible stage: a navigation subtask, or a run of consecutive
    manipulation subtasks joined into one instruction with '; '."""

    def __init__(self, index: int, kind: str, primitives: list[SubtaskSpec]):
        self.index = index
        self.kind = kind
        self.primitives = primitives
        self.instruction = "; ".join(p.instruction for p in primitives)
        actors = {p.actor for p in primitives}
        if len(actors) != 1:
            raise UnknownId(f"merged stage {index} mixes actors {sorted(actors)}")
        self.actor = primitives[0].actor


def merged_stages(task: TaskSpec) -> list[MergedStage]:
    stages: list[MergedStage] = []
    run: list[SubtaskSpec] = []
    for sub in task.subtasks:
        if sub.kind == "manipulation" and run and run[-1].actor == sub.actor:
            run.append(sub)
            continue
        if run:
            stages.append(MergedStage(len(stages) + 1, "manipulation", run))
            run = []
        if sub.kind == "manipulation":
            run = [sub]
        else:
            stages.append(MergedStage(len(stages) + 1, "navigation", [sub]))
    if run:
        stages.append(MergedStage(len(stages) + 1, "manipulation", run))
    return stages


def stage_instructions(task: TaskSpec) -> list[str]:
    return [st.instruction for st in merged_stages(task)]


def parse_instruction(instr: str, task: TaskSpec, actor: str, index: int = 0) -> list[SubtaskSpec]:
    """Parse a (possibly '; '-merged) instruction back into subtask specs."""
    out: list[SubtaskSpec] = []
    for part in instr.split("; "):
        part = part.strip()
        if part.startswith("Go to [") and part.endswith("]"):
            out.append(_nav_goto(index, actor, part[len("Go to [") : -1]))
        elif part.startswith("Stop in front of [") and part.endswith("]"):
            out.append(_nav_stop(index, actor, part[len("Stop in front of [") : -1]))
        elif part.startswith("Pick up [") and part.endswith("]"):
            out.append(_pick(index, actor, part[len("Pick up [") : -1]))
        elif part.startswith("Place [") and part.endswith("]") and "] in [" in part:
            inner = part[len("Place [") : -1]
            obj, dest = inner.split("] in [", 1)
            out.append(_place(index, actor, obj, dest))
        elif part.startswith("Wipe [") and part.endswith("]"):
            out.append(_wipe(index, actor, part[len("Wipe [") : -1]))
        else:
            raise UnknownId(f"unparseable instruction {part!r}")
    return out


# ---------------------------------------------------------------------------
# task files
# ---------------------------------------------------------------------------


def dump_task(task: TaskSpec) -> str:
    lines = [f"task {task.task_id}"]
    lines.append(f"bounds {task.bounds[0]} {task.bounds[1]}")
    lines.append(f"time_limit {task.time_limit}")
    for p in task.robots:
        lines.append(
            f"robot {p.robot_id} {p.kind} {p.num_effectors} {1 if p.has_tactile else 0} {p.control_dt}"
        )
        st = task.starts[p.robot_id]
        lines.append(
            f"start {p.robot_id} {st.pose[0]} {st.pose[1]} {st.pose[2]} {st.jitter}"
        )
    for z in task.zones:
        hz = " hazard" if z.hazard else ""
        lines.append(f"zone {z.zone_id} {z.rect[0]} {z.rect[1]} {z.rect[2]} {z.rect[3]}{hz}")
    for o in task.objects:
        extra = ""
        if o.rides is not None:
            extra = f" rides={o.rides} ox={o.ride_offset[0]} oy={o.ride_offset[1]}"
            if o.is_container:
                extra += " container"
        lines.append(f"object {o.object_id} {o.radius} {o.spawn[0]} {o.spawn[1]} {o.jitter}{extra}")
    for s in task.subtasks:
        if s.instruction.startswith("Go to"):
            lines.append(f"subtask {s.index} {s.actor} nav_goto {s.target}")
        elif s.instruction.startswith("Stop in front of"):
            lines.append(f"subtask {s.index} {s.actor} nav_stop {s.target}")
        elif s.instruction.startswith("Pick up"):
            lines.append(f"subtask {s.index} {s.actor} pick {s.target}")
        elif s.instruction.startswith("Place"):
            lines.append(f"subtask {s.index} {s.actor} place {s.obj} {s.target}")
        else:
            lines.append(f"subtask {s.index} {s.actor} wipe {s.target}")
    for kind, obj, target in task.success:
        lines.append(f"success {kind} {obj} {target}")
    if task.critical_objects:
        lines.append("critical " + " ".join(task.critical_objects))
    if task.relevant_entities:
        lines.append("relevant " + " ".join(task.relevant_entities))
    return "\n".join(lines) + "\n"


class TaskParseError(Exception):
    pass


def load_task_text(text: str) -> TaskSpec:
    task_id = None
    bounds = (4.0, 3.0)
    time_limit = None
    robots: list[RobotProfile] = []
    starts: dict[str, RobotStart] = {}
    zones: list[ZoneDef] = []
    objects: list[ObjectDef] = []
    subtasks: list[SubtaskSpec] = []
    success: list[tuple[str, str, str]] = []
    critical: tuple[str, ...] = ()
    relevant: tuple[str, ...] = ()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kw = tok[0]
        try:
            if kw == "task":
                task_id = tok[1]
            elif kw == "bounds":
                bounds = (float(tok[1]), float(tok[2]))
            elif kw == "time_limit":
                time_limit = int(tok[1])
            elif kw == "robot":
                robots.append(RobotProfile(tok[1], tok[2], int(tok[3]), tok[4] == "1", float(tok[5])))
            elif kw == "start":
                jitter = float(tok[5]) if len(tok) > 5 else 0.0
                starts[tok[1]] = RobotStart((float(tok[2]), float(tok[3]), float(tok[4])), jitter)
            elif kw == "zone":
                hazard = len(tok) > 6 and tok[6] == "hazard"
                zones.append(ZoneDef(tok[1], (float(tok[2]), float(tok[3]), float(tok[4]), float(tok[5])), hazard))
            elif kw == "object":
                jitter = float(tok[5]) if len(tok) > 5 else 0.0
                rides = None
                ox = oy = 0.0
                container = False
                for extra in tok[6:]:
                    if extra.startswith("rides="):
                        rides = extra[6:]
                    elif extra.startswith("ox="):
                        ox = float(extra[3:])
                    elif extra.startswith("oy="):
                        oy = float(extra[3:])
                    elif extra == "container":
                        container = True
                    else:
                        raise TaskParseError(f"line {ln}: unknown object attribute {extra!r}")
                objects.append(
                    ObjectDef(tok[1], float(tok[2]), (float(tok[3]), float(tok[4])), jitter,
                              rides=rides, ride_offset=(ox, oy), is_container=container)
                )
            elif kw == "subtask":
                idx, actor, op = int(tok[1]), tok[2], tok[3]
                if op == "nav_goto":
                    subtasks.append(_nav_goto(idx, actor, tok[4]))
                elif op == "nav_stop":
                    subtasks.append(_nav_stop(idx, actor, tok[4]))
                elif op == "pick":
                    subtasks.append(_pick(idx, actor, tok[4]))
                elif op == "place":
                    subtasks.append(_place(idx, actor, tok[4], tok[5]))
                elif op == "wipe":
                    subtasks.append(_wipe(idx, actor, tok[4]))
                else:
                    raise TaskParseError(f"line {ln}: unknown subtask op {op!r}")
            elif kw == "success":
                success.append((tok[1], tok[2], tok[3]))
            elif kw == "critical":
                critical = tuple(tok[1:])
            elif kw == "relevant":
                relevant = tuple(tok[1:])
            else:
                raise TaskParseError(f"line {ln}: unknown keyword {kw!r}")
        except (IndexError, ValueError) as e:
            raise TaskParseError(f"line {ln}: {e}") from None
    if task_id is None or time_limit is None or not robots or not subtasks:
        raise TaskParseError("task file missing required sections (task/time_limit/robot/subtask)")
    return TaskSpec(
        task_id=task_id,
        robots=tuple(robots),
        starts=starts,
        zones=tuple(zones),
        objects=tuple(objects),
        subtasks=tuple(subtasks),
        success=tuple(success),
        time_limit=time_limit,
        critical_objects=critical,
        relevant_entities=relevant,
    )


def load_task_file(path) -> TaskSpec:
    with open(path, "r", encoding="utf-8") as f:
        return load_task_text(f.read())
