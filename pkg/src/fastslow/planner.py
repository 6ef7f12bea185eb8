"""Slow-system subtask localizer with a strict, parseable answer contract.

The canonical answer string is

    **Answer:** task_index: {i}\\nprogress: {p}

with i a decimal integer >= 1 and p in fixed 3-decimal notation. The parser
is tolerant (extra whitespace, one-or-more spaces after the colons, 1-6
progress decimals) and the writer is canonical, so parse(format(x)) == x and
format(parse(s)) canonicalizes tolerated variants.

The localizer is a small trunk network with an index head (masked logits
over MAX_SUBTASKS slots) and a progress head (logistic squash); it stands in
for a fine-tuned vision-language model while preserving the surrounding
contract: enumerated subtask list, execution-context features, previous
index (or none), and the deterministic output string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .annotate import MAX_SUBTASKS, PlannerSample
from .nets import Momentum, Params, init_mlp, mlp_backward, mlp_forward

NEG_MASK = -1e30  # effectively -inf; keeps exp() arithmetic NaN-free


class MalformedAnswer(Exception):
    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class OutOfRange(Exception):
    def __init__(self, fieldname: str, value):
        super().__init__(f"{fieldname} out of range: {value}")
        self.field = fieldname


@dataclass(frozen=True)
class PlannerOutput:
    task_index: int
    progress: float


@dataclass
class PlannerInput:
    features: np.ndarray
    subtask_list: list[str]
    prev_index: int | None = None
    time_frac: float = 0.0


def format_answer(out: PlannerOutput) -> str:
    if out.task_index < 1:
        raise OutOfRange("task_index", out.task_index)
    if not (0.0 <= out.progress <= 1.0):
        raise OutOfRange("progress", out.progress)
    return f"**Answer:** task_index: {out.task_index}\nprogress: {out.progress:.3f}"


_ANSWER_RE = re.compile(
    r"^\s*\*\*Answer:\*\*\s*task_index:\s+(\d+)[ \t]*\n?\s*progress:\s+(\d+\.\d{1,6})\s*$"
)


def parse_answer(s: str) -> PlannerOutput:
    m = _ANSWER_RE.match(s)
    if m is None:
        # locate the first divergence from the expected shape for the error
        probe = re.match(r"\s*\*\*Answer:\*\*\s*task_index:\s+(\d+)", s)
        pos = probe.end() if probe else 0
        raise MalformedAnswer("answer string does not match the contract", pos)
    index = int(m.group(1))
    progress = float(m.group(2))
    if index < 1:
        raise OutOfRange("task_index", index)
    if not (0.0 <= progress <= 1.0):
        raise OutOfRange("progress", progress)
    return PlannerOutput(task_index=index, progress=progress)


# ---------------------------------------------------------------------------
# localizer model
# ---------------------------------------------------------------------------


@dataclass
class LocalizerParams:
    trunk: Params  # features+context -> hidden
    index_head: tuple[np.ndarray, np.ndarray]
    progress_head: tuple[np.ndarray, np.ndarray]
    feature_dim: int
    max_subtasks: int = MAX_SUBTASKS
    # input standardization fitted on the training samples
    in_mu: np.ndarray | None = None
    in_sd: np.ndarray | None = None


def encode_input(inp: PlannerInput, feature_dim: int, max_subtasks: int = MAX_SUBTASKS) -> np.ndarray:
    if len(inp.features) != feature_dim:
        raise ValueError(f"feature dim {len(inp.features)} != model dim {feature_dim}")
    prev = np.zeros(max_subtasks + 1)
    if inp.prev_index is None:
        prev[0] = 1.0
    else:
        if not (1 <= inp.prev_index <= max_subtasks):
            raise OutOfRange("prev_index", inp.prev_index)
        prev[inp.prev_index] = 1.0
    extras = np.array([inp.time_frac, len(inp.subtask_list) / max_subtasks])
    return np.concatenate([np.asarray(inp.features, dtype=np.float64), prev, extras])


def init_localizer(feature_dim: int, hidden: int = 64, seed: int = 0) -> LocalizerParams:
    rng = np.random.default_rng(seed)
    in_dim = feature_dim + MAX_SUBTASKS + 1 + 2
    trunk = init_mlp([in_dim, hidden, hidden], rng)
    Wi = rng.standard_normal((hidden, MAX_SUBTASKS)) / np.sqrt(hidden)
    bi = np.zeros(MAX_SUBTASKS)
    Wp = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
    bp = np.zeros(1)
    return LocalizerParams(
        trunk=trunk, index_head=(Wi, bi), progress_head=(Wp, bp), feature_dim=feature_dim
    )


def _forward_batch(params: LocalizerParams, z: np.ndarray, n_valid: np.ndarray):
    """z: (B, in_dim); n_valid: (B,) number of valid subtask slots."""
    if params.in_mu is not None:
        z = (z - params.in_mu) / params.in_sd
    h = z
    caches = []
    for W, b in params.trunk:
        pre = h @ W + b
        act = np.tanh(pre)
        caches.append((h, act))
        h = act
    Wi, bi = params.index_head
    logits = h @ Wi + bi
    slot = np.arange(params.max_subtasks)[None, :]
    logits = np.where(slot < n_valid[:, None], logits, NEG_MASK)
    Wp, bp = params.progress_head
    prog = 1.0 / (1.0 + np.exp(-(h @ Wp + bp)))
    return logits, prog[:, 0], h, caches


def localizer_forward(params: LocalizerParams, inp: PlannerInput) -> tuple[np.ndarray, float]:
    """(masked logits over max_subtasks, progress in [0, 1]); deterministic."""
    if len(inp.subtask_list) > params.max_subtasks:
        raise OutOfRange("subtask_list", len(inp.subtask_list))
    if not inp.subtask_list:
        raise ValueError("subtask_list must be nonempty")
    z = encode_input(inp, params.feature_dim, params.max_subtasks)[None, :]
    logits, prog, _, _ = _forward_batch(params, z, np.array([len(inp.subtask_list)]))
    return logits[0], float(prog[0])


def predict(params: LocalizerParams, inp: PlannerInput) -> tuple[PlannerOutput, str]:
    """Argmax index (ties toward the lower index), progress rounded to the
    3 decimals the answer string carries; round-trips through the parser."""
    logits, prog = localizer_forward(params, inp)
    best = 0
    for i in range(1, len(inp.subtask_list)):
        if logits[i] > logits[best]:
            best = i
    progress = round(min(1.0, max(0.0, prog)), 3)
    out = PlannerOutput(task_index=best + 1, progress=progress)
    return out, format_answer(out)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalizerTrainConfig:
    hidden: int = 64
    lr: float = 3e-3
    steps: int = 4000
    batch_size: int = 128
    holdout_frac: float = 0.1
    progress_weight: float = 1.0  # lambda on the squared progress error
    seed: int = 0


@dataclass
class LocalizerMetrics:
    holdout_accuracy: float
    holdout_progress_mae: float
    train_losses: list[float] = field(default_factory=list)


def _samples_to_arrays(samples: list[PlannerSample], feature_dim: int):
    z = np.stack([
        encode_input(
            PlannerInput(s.features, s.subtask_list, s.prev_index, s.time_frac), feature_dim
        )
        for s in samples
    ])
    y_idx = np.array([s.label_index - 1 for s in samples], dtype=int)
    y_prog = np.array([s.label_progress for s in samples])
    n_valid = np.array([len(s.subtask_list) for s in samples], dtype=int)
    return z, y_idx, y_prog, n_valid


def train_localizer(
    samples: list[PlannerSample], cfg: LocalizerTrainConfig = LocalizerTrainConfig()
) -> tuple[LocalizerParams, LocalizerMetrics]:
    """Cross-entropy on the index head plus weighted squared error on the
    progress head; reports held-out accuracy and progress MAE."""
    if not samples:
        raise ValueError("no planner samples")
    feature_dim = len(samples[0].features)
    for s in samples:
        if s.label_index > MAX_SUBTASKS:
            raise OutOfRange("label_index", s.label_index)
    params = init_localizer(feature_dim, cfg.hidden, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 17)
    order = rng.permutation(len(samples))
    n_hold = max(1, int(len(samples) * cfg.holdout_frac))
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]
    if len(train_idx) == 0:
        raise ValueError("holdout leaves no training samples")
    z, y_idx, y_prog, n_valid = _samples_to_arrays(samples, feature_dim)
    params.in_mu = z[train_idx].mean(axis=0)
    params.in_sd = np.maximum(z[train_idx].std(axis=0), 1e-6)

    opt_trunk = Momentum(cfg.lr)
    opt_heads = Momentum(cfg.lr)
    losses = []
    lam = cfg.progress_weight
    for step in range(cfg.steps):
        sel = train_idx[rng.integers(0, len(train_idx), size=cfg.batch_size)]
        zb, yb, pb, nb = z[sel], y_idx[sel], y_prog[sel], n_valid[sel]
        logits, prog, h, caches = _forward_batch(params, zb, nb)
        B = len(sel)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(shifted)
        probs = expl / expl.sum(axis=1, keepdims=True)
        ce = -np.log(np.maximum(probs[np.arange(B), yb], 1e-300))
        mse = (prog - pb) ** 2
        loss = float(np.mean(ce) + lam * np.mean(mse))
        losses.append(loss)

        dlogits = probs.copy()
        dlogits[np.arange(B), yb] -= 1.0
        dlogits /= B
        dprog = (2.0 * lam * (prog - pb) * prog * (1.0 - prog) / B)[:, None]
        Wi, bi = params.index_head
        Wp, bp = params.progress_head
        gWi = h.T @ dlogits
        gbi = dlogits.sum(axis=0)
        gWp = h.T @ dprog
        gbp = dprog.sum(axis=0)
        dh = dlogits @ Wi.T + dprog @ Wp.T
        trunk_grads = []
        d = dh
        for i in range(len(params.trunk) - 1, -1, -1):
            W, _b = params.trunk[i]
            h_in, act = caches[i]
            d = d * (1.0 - act * act)
            trunk_grads.insert(0, (h_in.T @ d, d.sum(axis=0)))
            d = d @ W.T
        params.trunk = opt_trunk.step(params.trunk, trunk_grads)
        new_heads = opt_heads.step([params.index_head, params.progress_head], [(gWi, gbi), (gWp, gbp)])
        params.index_head, params.progress_head = new_heads[0], new_heads[1]

    logits, prog, _, _ = _forward_batch(params, z[hold_idx], n_valid[hold_idx])
    pred = logits.argmax(axis=1)
    acc = float(np.mean(pred == y_idx[hold_idx]))
    mae = float(np.mean(np.abs(prog - y_prog[hold_idx])))
    return params, LocalizerMetrics(holdout_accuracy=acc, holdout_progress_mae=mae, train_losses=losses)
