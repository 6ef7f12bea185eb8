"""Fast/slow orchestration: slow planner queries at a fixed step period, fast
policy actions at control rate, and a monotone subtask-switching rule.

The planner is reachable two ways with identical semantics: in-process or as
a socket service ("cloud brain") speaking length-prefixed canonical text
frames (docs/protocol.md). Both paths share the PlannerSession logic and the
episode driver, and both move the planner's answer through format/parse, so
command sequences are identical for identical seeds.
"""

from __future__ import annotations

import logging
import math
import random
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import simworld as sw
from .annotate import FeatureConfig, executor_state, unflatten_action
from .binio import escape_value, format_float, unescape_value
from .planner import (
    LocalizerParams,
    PlannerInput,
    PlannerOutput,
    format_answer,
    parse_answer,
    predict,
)
from .simworld import ExpertController, TaskSpec, WorldState
from .tasksuite import merged_stages, parse_instruction, stage_instructions
from .trajstore import ActionCommand, EpisodeRecord, Step, SubtaskSegment

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20  # 1 MiB
MESSAGE_TYPES = ("hello", "observation", "command", "episode_end", "error")


class ProtocolError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class Hello:
    robot_id: str
    seq: int
    kind: str
    num_effectors: int
    has_tactile: bool
    control_dt: float


@dataclass(frozen=True)
class Observation:
    robot_id: str
    seq: int
    t: int
    features: tuple[float, ...]
    prev_index: int | None = None


@dataclass(frozen=True)
class Command:
    robot_id: str
    seq: int
    answer: str  # verbatim planner answer string; always parses
    instruction: str


@dataclass(frozen=True)
class EpisodeEnd:
    robot_id: str
    seq: int
    outcome: str


@dataclass(frozen=True)
class ErrorMsg:
    seq: int
    code: str
    detail: str


Message = Hello | Observation | Command | EpisodeEnd | ErrorMsg


def _body_lines(msg: Message) -> dict[str, str]:
    if isinstance(msg, Hello):
        return {
            "type": "hello", "robot_id": msg.robot_id, "seq": str(msg.seq),
            "kind": msg.kind, "num_effectors": str(msg.num_effectors),
            "has_tactile": "1" if msg.has_tactile else "0",
            "control_dt": format_float(msg.control_dt),
        }
    if isinstance(msg, Observation):
        d = {
            "type": "observation", "robot_id": msg.robot_id, "seq": str(msg.seq),
            "t": str(msg.t), "features": ",".join(format_float(v) for v in msg.features),
        }
        if msg.prev_index is not None:
            d["prev_index"] = str(msg.prev_index)
        return d
    if isinstance(msg, Command):
        return {
            "type": "command", "robot_id": msg.robot_id, "seq": str(msg.seq),
            "answer": escape_value(msg.answer), "instruction": escape_value(msg.instruction),
        }
    if isinstance(msg, EpisodeEnd):
        return {"type": "episode_end", "robot_id": msg.robot_id, "seq": str(msg.seq), "outcome": msg.outcome}
    if isinstance(msg, ErrorMsg):
        return {"type": "error", "seq": str(msg.seq), "code": msg.code, "detail": escape_value(msg.detail)}
    raise ProtocolError("unknown_tag", f"cannot encode {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    body = "".join(f"{k}={v}\n" for k, v in sorted(_body_lines(msg).items())).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise ProtocolError("oversize", f"body of {len(body)} bytes")
    return struct.pack("<I", len(body)) + body


def _require(d: dict[str, str], key: str) -> str:
    if key not in d:
        raise ProtocolError("malformed", f"missing field {key!r}")
    return d[key]


def _parse_int(d: dict[str, str], key: str) -> int:
    try:
        return int(_require(d, key))
    except ValueError:
        raise ProtocolError("malformed", f"field {key!r} is not an integer") from None


def decode(frame: bytes) -> Message:
    """Parse one full frame (length prefix + body). Only ProtocolError escapes."""
    if len(frame) < 4:
        raise ProtocolError("truncated", "frame shorter than the length prefix")
    (n,) = struct.unpack("<I", frame[:4])
    if n > MAX_FRAME:
        raise ProtocolError("oversize", f"declared length {n}")
    body = frame[4:]
    if len(body) != n:
        raise ProtocolError("truncated", f"declared {n} bytes, got {len(body)}")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProtocolError("malformed", f"not UTF-8: {e}") from None
    fields: dict[str, str] = {}
    for line in text.split("\n"):
        if not line:
            continue
        if "=" not in line:
            raise ProtocolError("malformed", f"line without '=': {line[:40]!r}")
        k, v = line.split("=", 1)
        if k in fields:
            raise ProtocolError("malformed", f"duplicate field {k!r}")
        fields[k] = v
    mtype = _require(fields, "type")
    try:
        if mtype == "hello":
            return Hello(
                robot_id=_require(fields, "robot_id"), seq=_parse_int(fields, "seq"),
                kind=_require(fields, "kind"), num_effectors=_parse_int(fields, "num_effectors"),
                has_tactile=_require(fields, "has_tactile") == "1",
                control_dt=float(_require(fields, "control_dt")),
            )
        if mtype == "observation":
            raw = _require(fields, "features")
            try:
                feats = tuple(float(x) for x in raw.split(",")) if raw else ()
            except ValueError:
                raise ProtocolError("malformed", "features are not floats") from None
            prev = fields.get("prev_index")
            return Observation(
                robot_id=_require(fields, "robot_id"), seq=_parse_int(fields, "seq"),
                t=_parse_int(fields, "t"), features=feats,
                prev_index=int(prev) if prev is not None else None,
            )
        if mtype == "command":
            answer = unescape_value(_require(fields, "answer"))
            parse_answer(answer)  # invariant: the carried answer always parses
            return Command(
                robot_id=_require(fields, "robot_id"), seq=_parse_int(fields, "seq"),
                answer=answer, instruction=unescape_value(_require(fields, "instruction")),
            )
        if mtype == "episode_end":
            return EpisodeEnd(
                robot_id=_require(fields, "robot_id"), seq=_parse_int(fields, "seq"),
                outcome=_require(fields, "outcome"),
            )
        if mtype == "error":
            return ErrorMsg(
                seq=_parse_int(fields, "seq"), code=_require(fields, "code"),
                detail=unescape_value(fields.get("detail", "")),
            )
    except ProtocolError:
        raise
    except Exception as e:
        raise ProtocolError("malformed", str(e)) from None
    raise ProtocolError("unknown_tag", mtype)


def read_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame from a stream socket."""
    head = _recv_exact(sock, 4)
    (n,) = struct.unpack("<I", head)
    if n > MAX_FRAME:
        raise ProtocolError("oversize", f"declared length {n}")
    return head + _recv_exact(sock, n)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("truncated", "connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


# ---------------------------------------------------------------------------
# sessions and the switching rule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoopConfig:
    planner_period: int = 10  # slow ticks, in control steps
    p_switch: float = 0.95
    max_steps: int = 400
    timeout_s: float = 5.0

    def __post_init__(self):
        if self.planner_period < 1:
            raise ValueError("planner_period must be >= 1")
        if not (0.0 < self.p_switch <= 1.0):
            raise ValueError("p_switch must be in (0, 1]")


@dataclass
class SessionState:
    robot_id: str
    subtask_list: list[str]
    current_index: int = 1
    last_progress: float = 0.0
    phase: str = "awaiting_hello"  # awaiting_hello | running | done
    p_switch: float = 0.95
    client_seq: int = 0
    server_seq: int = 0


def switching_rule(session: SessionState, planner_out: PlannerOutput) -> int:
    """Monotone stage switching: forward index jumps are adopted; a confirmed
    current stage with progress >= p_switch advances by one; never regress."""
    cur = session.current_index
    idx = planner_out.task_index
    if idx > cur:
        return min(idx, len(session.subtask_list))
    if idx == cur and planner_out.progress >= session.p_switch and cur < len(session.subtask_list):
        return cur + 1
    return cur


class PlannerSession:
    """Server-side logic for one robot: localizer query through the answer
    contract, then the switching rule."""

    def __init__(self, localizer, subtask_list: list[str], cfg: LoopConfig):
        self.localizer = localizer
        self.cfg = cfg
        self.state = SessionState(robot_id="", subtask_list=subtask_list, p_switch=cfg.p_switch)

    def hello(self, robot_id: str) -> tuple[str, str]:
        if self.state.phase != "awaiting_hello":
            raise ProtocolError("malformed", "duplicate hello")
        self.state.robot_id = robot_id
        self.state.phase = "running"
        answer = format_answer(PlannerOutput(task_index=1, progress=0.0))
        return answer, self.state.subtask_list[0]

    def observe(self, t: int, features, prev_index: int | None) -> tuple[str, str]:
        if self.state.phase != "running":
            raise ProtocolError("malformed", f"observation in phase {self.state.phase}")
        inp = PlannerInput(
            features=np.asarray(features, dtype=np.float64),
            subtask_list=self.state.subtask_list,
            prev_index=prev_index,
            time_frac=min(1.0, t / self.cfg.max_steps),
        )
        _, answer = self.localizer.predict(inp)
        out = parse_answer(answer)  # the contract is on the hot path by design
        new_index = switching_rule(self.state, out)
        self.state.current_index = new_index
        self.state.last_progress = out.progress
        return answer, self.state.subtask_list[new_index - 1]

    def end(self):
        self.state.phase = "done"


# ---------------------------------------------------------------------------
# localizers
# ---------------------------------------------------------------------------


class LearnedLocalizer:
    def __init__(self, params: LocalizerParams):
        self.params = params

    def predict(self, inp: PlannerInput) -> tuple[PlannerOutput, str]:
        return predict(self.params, inp)


class WorldRef:
    """Mutable handle to the live world, updated by the episode driver; lets
    the oracle localizer read ground truth (in-process test plumbing)."""

    def __init__(self):
        self.state: WorldState | None = None


class OracleLocalizer:
    """Ground-truth stage localizer: index = first incomplete merged stage,
    progress = completed fraction of that stage's primitives.

    Completion is remembered across queries: a navigation predicate is only
    transiently true (inside the zone), so without memory the pointer would
    regress as soon as the robot drives on. One instance per episode.
    """

    def __init__(self, task: TaskSpec, world_ref: WorldRef):
        self.task = task
        self.ref = world_ref
        self.stages = merged_stages(task)
        self._done: set[tuple[int, int]] = set()  # (stage index, primitive position)

    def predict(self, inp: PlannerInput) -> tuple[PlannerOutput, str]:
        state = self.ref.state
        if state is None:
            raise RuntimeError("oracle localizer has no world state")
        index = len(self.stages)
        progress = 1.0
        for st in self.stages:
            done = []
            for j, prim in enumerate(st.primitives):
                key = (st.index, j)
                if key not in self._done and sw.subtask_done(state, prim, self.task):
                    self._done.add(key)
                done.append(key in self._done)
            if not all(done):
                index = st.index
                progress = sum(done) / len(done)
                break
        out = PlannerOutput(task_index=index, progress=round(progress, 3))
        return out, format_answer(out)


# ---------------------------------------------------------------------------
# executor policies
# ---------------------------------------------------------------------------


class LearnedPolicy:
    """Mean action of a trained Gaussian policy, conditioned on the commanded
    stage index (and its predecessor).

    The continuous gripper channel maps to discrete commands with hysteresis:
    a state change needs a strong signal (|g| > 0.6), so transient regression
    ringing cannot latch the gripper into an off-distribution state.
    """

    def __init__(self, net_params, feature_cfg: FeatureConfig = FeatureConfig()):
        self.net = net_params
        self.feature_cfg = feature_cfg

    def act(self, state: WorldState, robot_id: str, stage_index: int, instruction: str) -> ActionCommand:
        from .iql import policy_mean_action

        rs = state.robots[robot_id]
        obs = sw.observe(state, robot_id)
        s = executor_state(obs, stage_index, self.feature_cfg, rs.profile.num_effectors)
        a = policy_mean_action(self.net, s)
        cmd = unflatten_action(a, rs.profile.num_effectors)
        e = rs.profile.num_effectors
        grips = []
        for i in range(e):
            g = a[2 + 2 * e + i]
            if rs.gripper[i] == "open":
                grips.append("close" if g > 0.6 else "hold")
            else:
                grips.append("open" if g < -0.6 else "hold")
        return ActionCommand(base_cmd=cmd.base_cmd, effector_cmd=cmd.effector_cmd, gripper_cmd=tuple(grips))


class ScriptedExpertPolicy:
    """Instruction-driven scripted controller: executes the first incomplete
    primitive of the commanded stage (needs ground-truth state; used for
    loop-isolation tests and oracle evaluations).

    Primitive completion is remembered: "Pick up [x]" is only transiently
    true while holding, and without memory the policy would re-pick an
    object it has already placed. One instance per episode.
    """

    def __init__(self, task: TaskSpec, robot_id: str, seed: int = 0):
        self.task = task
        self.robot_id = robot_id
        self.controller = ExpertController(robot_id, sw.ZERO_FAULTS, random.Random(seed))
        self._done: set[tuple[str, int]] = set()

    def act(self, state: WorldState, robot_id: str, stage_index: int, instruction: str) -> ActionCommand:
        prims = parse_instruction(instruction, self.task, actor=self.robot_id, index=stage_index)
        for j, prim in enumerate(prims):
            if prim.actor != self.robot_id:
                continue
            key = (instruction, j)
            if key not in self._done and sw.subtask_done(state, prim, self.task):
                self._done.add(key)
            if key not in self._done:
                return self.controller.act(state, prim)
        return self.controller.idle(state)

    def idle(self, state: WorldState, robot_id: str) -> ActionCommand:
        return self.controller.idle(state)


class RandomPolicy:
    def __init__(self, num_effectors: int, seed: int = 0):
        self.rng = random.Random(seed)
        self.e = num_effectors

    def act(self, state: WorldState, robot_id: str, stage_index: int, instruction: str) -> ActionCommand:
        r = self.rng
        return ActionCommand(
            base_cmd=(r.uniform(-1, 1), r.uniform(-1.5, 1.5)),
            effector_cmd=tuple((r.uniform(-0.1, 0.1), r.uniform(-0.1, 0.1)) for _ in range(self.e)),
            gripper_cmd=tuple(r.choice(("open", "close", "hold")) for _ in range(self.e)),
        )


# ---------------------------------------------------------------------------
# planner transports
# ---------------------------------------------------------------------------


class InProcessTransport:
    """Direct PlannerSession calls (still through format/parse)."""

    def __init__(self, localizer, task: TaskSpec, cfg: LoopConfig):
        self.sessions = {
            p.robot_id: PlannerSession(localizer, stage_instructions(task), cfg) for p in task.robots
        }

    def hello(self, robot_id: str, profile) -> tuple[str, str]:
        return self.sessions[robot_id].hello(robot_id)

    def observe(self, robot_id: str, t: int, features, prev_index) -> tuple[str, str]:
        return self.sessions[robot_id].observe(t, features, prev_index)

    def end(self, robot_id: str, outcome: str):
        self.sessions[robot_id].end()

    def close(self):
        pass


class SocketTransport:
    """One TCP connection per robot to a serve_planner endpoint."""

    def __init__(self, endpoint: tuple[str, int], robot_ids: list[str], profiles, timeout_s: float):
        self.socks: dict[str, socket.socket] = {}
        self.seq: dict[str, int] = {}
        self.profiles = profiles
        for rid in robot_ids:
            s = socket.create_connection(endpoint, timeout=timeout_s)
            s.settimeout(timeout_s)
            self.socks[rid] = s
            self.seq[rid] = 0

    def _roundtrip(self, rid: str, msg: Message) -> Command:
        sock = self.socks[rid]
        sock.sendall(encode(msg))
        reply = decode(read_frame(sock))
        if isinstance(reply, ErrorMsg):
            raise ProtocolError(reply.code, reply.detail)
        if not isinstance(reply, Command):
            raise ProtocolError("malformed", f"expected command, got {type(reply).__name__}")
        return reply

    def hello(self, robot_id: str, profile) -> tuple[str, str]:
        self.seq[robot_id] += 1
        cmd = self._roundtrip(
            robot_id,
            Hello(
                robot_id=robot_id, seq=self.seq[robot_id], kind=profile.kind,
                num_effectors=profile.num_effectors, has_tactile=profile.has_tactile,
                control_dt=profile.control_dt,
            ),
        )
        return cmd.answer, cmd.instruction

    def observe(self, robot_id: str, t: int, features, prev_index) -> tuple[str, str]:
        self.seq[robot_id] += 1
        cmd = self._roundtrip(
            robot_id,
            Observation(
                robot_id=robot_id, seq=self.seq[robot_id], t=t,
                features=tuple(float(v) for v in features), prev_index=prev_index,
            ),
        )
        return cmd.answer, cmd.instruction

    def end(self, robot_id: str, outcome: str):
        self.seq[robot_id] += 1
        try:
            self.socks[robot_id].sendall(
                encode(EpisodeEnd(robot_id=robot_id, seq=self.seq[robot_id], outcome=outcome))
            )
        except OSError:
            pass

    def close(self):
        for s in self.socks.values():
            try:
                s.close()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# the dual-system episode driver
# ---------------------------------------------------------------------------


@dataclass
class CommandLogEntry:
    t: int
    robot_id: str
    answer: str
    instruction: str


@dataclass
class HierarchicalResult:
    episodes: list[EpisodeRecord]
    command_log: list[CommandLogEntry]
    outcome: str


def run_episode_with_transport(
    task: TaskSpec,
    transport,
    policies: dict[str, object],
    cfg: LoopConfig,
    seed: int,
    world_ref: WorldRef | None = None,
) -> HierarchicalResult:
    """Shared fast/slow loop. The slow tick is step-indexed: the planner is
    queried at t=0 (hello) and every planner_period control steps."""
    state = sw.reset(task, seed)
    if world_ref is not None:
        world_ref.state = state
    stages = merged_stages(task)
    order = sorted(state.robots)
    for rid in order:
        if rid not in policies:
            raise ValueError(f"no policy for robot {rid!r}")

    current: dict[str, int] = {}
    instruction: dict[str, str] = {}
    prev_index: dict[str, int | None] = {rid: None for rid in order}
    command_log: list[CommandLogEntry] = []
    records: dict[str, list[dict]] = {rid: [] for rid in order}
    span_track: dict[str, list[tuple[int, int, int]]] = {rid: [] for rid in order}  # (start, end, stage)

    for rid in order:
        answer, instr = transport.hello(rid, state.robots[rid].profile)
        out = parse_answer(answer)
        current[rid] = out.task_index
        instruction[rid] = instr
        command_log.append(CommandLogEntry(0, rid, answer, instr))

    outcome = "failure"
    t = 0
    while True:
        if sw.check_success(state, task):
            outcome = "success"
            break
        if t >= cfg.max_steps:
            outcome = "failure"
            break
        if sw.object_in_hazard(state, task):
            outcome = "failure"
            break
        if t > 0 and t % cfg.planner_period == 0:
            for rid in order:
                feats = sw.observe(state, rid)
                answer, instr = transport.observe(rid, t, feats, current[rid])
                out = parse_answer(answer)
                sess = SessionState(
                    robot_id=rid, subtask_list=[s.instruction for s in stages],
                    current_index=current[rid], p_switch=cfg.p_switch,
                )
                new_index = switching_rule(sess, out)
                if new_index != current[rid]:
                    prev_index[rid] = current[rid]
                current[rid] = new_index
                instruction[rid] = instr
                command_log.append(CommandLogEntry(t, rid, answer, instr))

        actions: dict[str, ActionCommand] = {}
        for rid in order:
            stage = stages[current[rid] - 1]
            if stage.actor == rid or len(order) == 1:
                actions[rid] = policies[rid].act(state, rid, current[rid], instruction[rid])
            else:
                idle = getattr(policies[rid], "idle", None)
                if idle is not None:
                    actions[rid] = idle(state, rid)
                else:
                    actions[rid] = ActionCommand.zero(state.robots[rid].profile.num_effectors)
        for rid in order:
            records[rid].append({"state": state, "action": actions[rid], "stage": current[rid]})
        state, _events = sw.step(state, actions)
        if world_ref is not None:
            world_ref.state = state
        t += 1

    for rid in order:
        records[rid].append({"state": state, "action": ActionCommand.zero(state.robots[rid].profile.num_effectors), "stage": current[rid]})
        transport.end(rid, outcome)

    episodes = []
    for rid in order:
        episodes.append(_hierarchical_record(task, seed, rid, records[rid], outcome, stages))
    return HierarchicalResult(episodes=episodes, command_log=command_log, outcome=outcome)


def _hierarchical_record(task, seed, robot_id, recs, outcome, stages) -> EpisodeRecord:
    profile = task.profile(robot_id)
    steps = []
    for t, rec in enumerate(recs):
        state: WorldState = rec["state"]
        rs = state.robots[robot_id]
        steps.append(
            Step(
                t=t,
                timestamp=t * profile.control_dt,
                base_pose=rs.base,
                base_twist=rs.twist,
                effector_pos=tuple(rs.eff_world(e) for e in range(profile.num_effectors)),
                gripper_state=tuple(rs.gripper),
                held_object=tuple(rs.held),
                contact=tuple(rs.contact),
                action=rec["action"],
                object_poses={oid: o.pos for oid, o in sorted(state.objects.items())},
            )
        )
    T = len(steps) - 1
    # commanded-stage spans; the terminal record repeats the final stage
    segments = []
    start = 0
    for t in range(1, len(recs)):
        if recs[t]["stage"] != recs[start]["stage"]:
            st = stages[recs[start]["stage"] - 1]
            segments.append(
                SubtaskSegment(index=st.index, t_start=start, t_end=t, instruction=st.instruction, kind=st.kind)
            )
            start = t
    if start < T:
        st = stages[recs[start]["stage"] - 1]
        segments.append(
            SubtaskSegment(index=st.index, t_start=start, t_end=T, instruction=st.instruction, kind=st.kind)
        )
    return EpisodeRecord(
        episode_id=f"hier-{task.task_id}-{seed:08d}/{robot_id}",
        profile=profile,
        task_id=task.task_id,
        seed=seed,
        steps=steps,
        outcome=outcome,
        segments=segments or None,
    )


def run_hierarchical_episode(
    task: TaskSpec, localizer, policies: dict[str, object], cfg: LoopConfig, seed: int
) -> HierarchicalResult:
    """In-process dual-system episode (single- or multi-robot)."""
    transport = InProcessTransport(localizer, task, cfg)
    ref = getattr(localizer, "ref", None)
    return run_episode_with_transport(task, transport, policies, cfg, seed, world_ref=ref)


# ---------------------------------------------------------------------------
# the socket service
# ---------------------------------------------------------------------------


class _PlannerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class PlannerService:
    """Cloud-brain planner service: one session per connection, sessions
    fully independent; protocol violations answered with an error frame and
    the offending connection closed."""

    def __init__(self, endpoint: tuple[str, int], localizer, task: TaskSpec, cfg: LoopConfig):
        self.localizer = localizer
        self.task = task
        self.cfg = cfg
        service = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                session = PlannerSession(service.localizer, stage_instructions(service.task), service.cfg)
                last_seq = 0
                sock = self.request
                try:
                    while True:
                        try:
                            frame = read_frame(sock)
                        except ProtocolError:
                            return  # connection closed or unreadable
                        try:
                            msg = decode(frame)
                            if isinstance(msg, (Hello, Observation, EpisodeEnd)):
                                if msg.seq <= last_seq:
                                    raise ProtocolError("bad_sequence", f"seq {msg.seq} after {last_seq}")
                                last_seq = msg.seq
                            if isinstance(msg, Hello):
                                answer, instr = session.hello(msg.robot_id)
                            elif isinstance(msg, Observation):
                                answer, instr = session.observe(msg.t, msg.features, msg.prev_index)
                            elif isinstance(msg, EpisodeEnd):
                                session.end()
                                return
                            else:
                                raise ProtocolError("unknown_tag", type(msg).__name__)
                        except ProtocolError as e:
                            session.state.server_seq += 1
                            try:
                                sock.sendall(encode(ErrorMsg(seq=session.state.server_seq, code=e.code, detail=e.detail)))
                            except OSError:
                                pass
                            return
                        session.state.server_seq += 1
                        reply = Command(
                            robot_id=session.state.robot_id, seq=session.state.server_seq,
                            answer=answer, instruction=instr,
                        )
                        sock.sendall(encode(reply))
                except (OSError, ConnectionError):
                    return

        self._server = _PlannerServer(endpoint, Handler)
        self.endpoint = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def serve_planner(endpoint: tuple[str, int], localizer, task: TaskSpec, cfg: LoopConfig) -> PlannerService:
    """Start the planner service on endpoint (port 0 picks a free port)."""
    return PlannerService(endpoint, localizer, task, cfg)


def run_socket_episode(
    task: TaskSpec,
    endpoint: tuple[str, int],
    policies: dict[str, object],
    cfg: LoopConfig,
    seed: int,
    world_ref: WorldRef | None = None,
) -> HierarchicalResult:
    """Dual-system episode against a live planner service over sockets."""
    order = sorted(p.robot_id for p in task.robots)
    transport = SocketTransport(endpoint, order, {p.robot_id: p for p in task.robots}, cfg.timeout_s)
    try:
        return run_episode_with_transport(task, transport, policies, cfg, seed, world_ref=world_ref)
    except (socket.timeout, TimeoutError):
        log.warning("planner service timed out after %.1fs; aborting episode as failure", cfg.timeout_s)
        raise PlannerTimeout(f"no reply within {cfg.timeout_s}s")
    finally:
        transport.close()


class PlannerTimeout(Exception):
    pass


def executor_client(
    endpoint: tuple[str, int], robot_id: str, policy, task: TaskSpec, cfg: LoopConfig, seed: int
) -> EpisodeRecord:
    """Single-robot socket executor: Hello, then an Observation every
    planner_period steps; the fast policy runs at every control step. A
    server timeout aborts the episode with a failure outcome."""
    try:
        result = run_socket_episode(task, endpoint, {robot_id: policy}, cfg, seed)
    except PlannerTimeout as e:
        state = sw.reset(task, seed)
        profile = task.profile(robot_id)
        rs = state.robots[robot_id]
        step0 = Step(
            t=0, timestamp=0.0, base_pose=rs.base, base_twist=rs.twist,
            effector_pos=tuple(rs.eff_world(e) for e in range(profile.num_effectors)),
            gripper_state=tuple(rs.gripper), held_object=tuple(rs.held),
            contact=tuple(rs.contact), action=ActionCommand.zero(profile.num_effectors),
            object_poses={oid: o.pos for oid, o in sorted(state.objects.items())},
        )
        step1 = Step(
            t=1, timestamp=profile.control_dt, base_pose=rs.base, base_twist=rs.twist,
            effector_pos=step0.effector_pos, gripper_state=step0.gripper_state,
            held_object=step0.held_object, contact=step0.contact,
            action=ActionCommand.zero(profile.num_effectors), object_poses=dict(step0.object_poses),
        )
        log.warning("executor %s aborted: %s", robot_id, e)
        return EpisodeRecord(
            episode_id=f"hier-{task.task_id}-{seed:08d}/{robot_id}",
            profile=profile, task_id=task.task_id, seed=seed,
            steps=[step0, step1], outcome="failure", segments=None,
        )
    return result.episodes[sorted(p.robot_id for p in task.robots).index(robot_id)]
