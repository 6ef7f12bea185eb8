"""Implicit Q-learning for the fast executor, plus tabular oracles.

Three decoupled updates per training step:
  V: minimize mean rho_tau(Q_target(s,a) - V(s)), the asymmetric quantile
     loss rho_tau(u) = u * (tau - 1{u<0}) (a squared-expectile variant is
     selectable via loss_variant);
  Q: minimize mean 1/2 (Q(s,a) - (r + gamma_rl * (1-done) * V(s')))^2 with
     V treated as a constant;
  pi: advantage-weighted regression, minimize -mean[w * log pi(a|s)] with
     w = clip(exp(beta * (Q(s,a) - V(s))), 0, weight_clip) detached.

The policy is a diagonal Gaussian with a state-dependent mean network and a
state-independent learned log-std. Q_target tracks Q by Polyak averaging.
Gradients are hand-derived (see nets) and finite-difference checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import (
    Momentum,
    Params,
    VectorMomentum,
    clone_params,
    init_mlp,
    mlp_backward,
    mlp_forward,
    params_finite,
    polyak_update,
)

SIGMA_FLOOR = 1e-4  # numeric guard inside the density
TRAIN_LOG_STD_MIN = float(np.log(0.05))  # keeps 1/sigma^2 NLL gradients bounded
LOG_2PI = float(np.log(2.0 * np.pi))


class IqlError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.7
    gamma_rl: float = 0.99
    beta: float = 3.0
    lr_v: float = 3e-4
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    target_update_period: int = 1
    polyak: float = 0.005
    batch_size: int = 256
    steps: int = 3000
    weight_clip: float = 100.0
    loss_variant: str = "linear_quantile"  # or "squared_expectile"
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise IqlError(f"tau={self.tau} outside (0, 1)")
        if not (0.0 <= self.gamma_rl < 1.0):
            raise IqlError(f"gamma_rl={self.gamma_rl} outside [0, 1)")
        if self.beta <= 0 or self.weight_clip <= 0:
            raise IqlError("beta and weight_clip must be positive")
        if not (0.0 < self.polyak <= 1.0):
            raise IqlError(f"polyak={self.polyak} outside (0, 1]")
        if self.loss_variant not in ("linear_quantile", "squared_expectile"):
            raise IqlError(f"unknown loss_variant {self.loss_variant!r}")


@dataclass
class NetParams:
    v: Params
    q: Params
    q_target: Params
    pi_mean: Params
    log_std: np.ndarray
    # input standardization fitted on the training set; applied by the
    # training entry points and by live policy wrappers, never inside losses
    obs_mu: np.ndarray | None = None
    obs_sd: np.ndarray | None = None
    act_scale: np.ndarray | None = None


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __post_init__(self):
        n = len(self.r)
        if not (len(self.s) == len(self.a) == len(self.s_next) == len(self.done) == n):
            raise IqlError("batch arrays have unequal lengths")


def init_params(obs_dim: int, act_dim: int, cfg: TrainConfig) -> NetParams:
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden
    v = init_mlp([obs_dim, h, h, 1], rng)
    q = init_mlp([obs_dim + act_dim, h, h, 1], rng)
    pi = init_mlp([obs_dim, h, h, act_dim], rng)
    return NetParams(
        v=v, q=q, q_target=clone_params(q), pi_mean=pi,
        log_std=np.full(act_dim, np.log(0.3)),
    )


# ---------------------------------------------------------------------------
# losses (each returns its own gradient only; detached inputs stay constants)
# ---------------------------------------------------------------------------


def rho_tau(u, tau: float):
    """Asymmetric quantile loss u * (tau - 1{u<0}); subgradient tau at 0."""
    u = np.asarray(u, dtype=np.float64)
    return u * (tau - (u < 0.0))


def rho_tau_sq(u, tau: float):
    """Squared-expectile variant |tau - 1{u<0}| * u^2."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0.0)) * u * u


def _rho_grad(u: np.ndarray, tau: float, variant: str) -> np.ndarray:
    if variant == "linear_quantile":
        return np.where(u >= 0.0, tau, tau - 1.0)
    return 2.0 * np.abs(tau - (u < 0.0)) * u


def v_loss(batch: Batch, params: NetParams, cfg: TrainConfig) -> tuple[float, Params]:
    """Quantile regression of V toward Q_target(s, a) over dataset actions."""
    sa = np.concatenate([batch.s, batch.a], axis=1)
    q_t, _ = mlp_forward(params.q_target, sa)  # constant
    v, cache = mlp_forward(params.v, batch.s)
    u = q_t - v
    if cfg.loss_variant == "linear_quantile":
        loss = float(np.mean(rho_tau(u, cfg.tau)))
    else:
        loss = float(np.mean(rho_tau_sq(u, cfg.tau)))
    if not np.isfinite(loss):
        raise IqlError("non-finite V loss")
    dv = -_rho_grad(u, cfg.tau, cfg.loss_variant) / len(u)  # d loss / d V(s)
    grads, _ = mlp_backward(params.v, cache, dv)
    return loss, grads


def q_loss(batch: Batch, params: NetParams, cfg: TrainConfig) -> tuple[float, Params]:
    """TD regression toward r + gamma_rl * (1 - done) * V(s'); V detached."""
    v_next, _ = mlp_forward(params.v, batch.s_next)  # constant
    target = batch.r[:, None] + cfg.gamma_rl * (1.0 - batch.done[:, None].astype(np.float64)) * v_next
    sa = np.concatenate([batch.s, batch.a], axis=1)
    q, cache = mlp_forward(params.q, sa)
    diff = q - target
    loss = float(np.mean(0.5 * diff * diff))
    if not np.isfinite(loss):
        raise IqlError("non-finite Q loss")
    grads, _ = mlp_backward(params.q, cache, diff / len(diff))
    return loss, grads


def advantage(s: np.ndarray, a: np.ndarray, params: NetParams) -> np.ndarray:
    """Implicit advantage Q(s,a) - V(s) with the online Q."""
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    q, _ = mlp_forward(params.q, np.concatenate([s, a], axis=1))
    v, _ = mlp_forward(params.v, s)
    return (q - v)[:, 0]


def gaussian_logp(mu: np.ndarray, log_std: np.ndarray, a: np.ndarray) -> np.ndarray:
    sigma = np.maximum(np.exp(log_std), SIGMA_FLOOR)
    z = (a - mu) / sigma
    return np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI, axis=1)


def awr_weights(batch: Batch, params: NetParams, cfg: TrainConfig) -> np.ndarray:
    """exp(beta * A) clipped to [0, weight_clip]; computed without gradient."""
    adv = advantage(batch.s, batch.a, params)
    return np.clip(np.exp(cfg.beta * adv), 0.0, cfg.weight_clip)


def awr_policy_loss(
    batch: Batch, params: NetParams, cfg: TrainConfig, weights: np.ndarray | None = None
) -> tuple[float, Params, np.ndarray]:
    """-mean[w * log pi(a|s)]; returns (loss, mean-net grads, log-std grad)."""
    if weights is None:
        weights = awr_weights(batch, params, cfg)
    mu, cache = mlp_forward(params.pi_mean, batch.s)
    sigma = np.maximum(np.exp(params.log_std), SIGMA_FLOOR)
    z = (batch.a - mu) / sigma
    logp = np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI, axis=1)
    n = len(logp)
    loss = float(-np.mean(weights * logp))
    if not np.isfinite(loss):
        raise IqlError("non-finite policy loss")
    # d loss / d mu = -w * z / sigma / n
    dmu = -(weights[:, None] * z / sigma) / n
    grads_mu, _ = mlp_backward(params.pi_mean, cache, dmu)
    # d logp / d log_std_d = z_d^2 - 1 where the floor is inactive
    floor_active = np.exp(params.log_std) < SIGMA_FLOOR
    dls = -(weights[:, None] * (z * z - 1.0)).sum(axis=0) / n
    dls = np.where(floor_active, 0.0, dls)
    return loss, grads_mu, dls


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    opt_v: Momentum
    opt_q: Momentum
    opt_pi: Momentum
    opt_ls: VectorMomentum
    step_count: int = 0


def make_optimizer(cfg: TrainConfig) -> OptimizerState:
    return OptimizerState(
        opt_v=Momentum(cfg.lr_v),
        opt_q=Momentum(cfg.lr_q),
        opt_pi=Momentum(cfg.lr_pi),
        opt_ls=VectorMomentum(cfg.lr_pi),
    )


def train_step(
    params: NetParams, batch: Batch, cfg: TrainConfig, opt: OptimizerState
) -> tuple[NetParams, OptimizerState, dict]:
    """One V, Q, pi update (in that order) plus periodic Polyak targeting."""
    lv, gv = v_loss(batch, params, cfg)
    new_v = opt.opt_v.step(params.v, gv)
    params = replace_params(params, v=new_v)

    lq, gq = q_loss(batch, params, cfg)
    new_q = opt.opt_q.step(params.q, gq)
    params = replace_params(params, q=new_q)

    weights = awr_weights(batch, params, cfg)
    lp, gpi, gls = awr_policy_loss(batch, params, cfg, weights)
    new_pi = opt.opt_pi.step(params.pi_mean, gpi)
    new_ls = np.maximum(opt.opt_ls.step(params.log_std, gls), TRAIN_LOG_STD_MIN)
    params = replace_params(params, pi_mean=new_pi, log_std=new_ls)

    opt.step_count += 1
    if opt.step_count % cfg.target_update_period == 0:
        params = replace_params(params, q_target=polyak_update(params.q_target, params.q, cfg.polyak))

    mean_adv = float(np.mean(np.log(np.maximum(weights, 1e-300))) / cfg.beta)
    metrics = {"v_loss": lv, "q_loss": lq, "pi_loss": lp, "mean_advantage": mean_adv}
    for k, val in metrics.items():
        if not np.isfinite(val):
            raise IqlError(f"non-finite metric {k}={val}")
    return params, opt, metrics


def replace_params(params: NetParams, **kw) -> NetParams:
    out = NetParams(
        v=params.v, q=params.q, q_target=params.q_target,
        pi_mean=params.pi_mean, log_std=params.log_std,
        obs_mu=params.obs_mu, obs_sd=params.obs_sd, act_scale=params.act_scale,
    )
    for k, v in kw.items():
        setattr(out, k, v)
    return out


def action_scale_vector(act_dim: int) -> np.ndarray:
    """Fixed per-dimension scale balancing the flattened action layout:
    base twist O(1), effector deltas O(0.01) scaled up 10x, gripper O(1)."""
    e = (act_dim - 2) // 3
    scale = np.ones(act_dim)
    scale[2 : 2 + 2 * e] = 10.0
    return scale


def fit_normalization(dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = dataset.s.mean(axis=0)
    sd = np.maximum(dataset.s.std(axis=0), 1e-6)
    return mu, sd, action_scale_vector(dataset.a.shape[1])


def normalized_views(dataset, mu: np.ndarray, sd: np.ndarray, act_scale: np.ndarray):
    """Standardized copy of a TransitionDataset (s and s_next share stats)."""
    from .annotate import TransitionDataset

    return TransitionDataset(
        s=(dataset.s - mu) / sd,
        a=dataset.a * act_scale,
        r=dataset.r,
        s_next=(dataset.s_next - mu) / sd,
        done=dataset.done,
        success_transitions=dataset.success_transitions,
        failure_transitions=dataset.failure_transitions,
        episode_ids=list(dataset.episode_ids),
    )


def sample_batch(dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    idx = rng.integers(0, len(dataset.r), size=batch_size)
    return Batch(
        s=dataset.s[idx], a=dataset.a[idx], r=dataset.r[idx],
        s_next=dataset.s_next[idx], done=dataset.done[idx],
    )


def train_iql(dataset, cfg: TrainConfig, params: NetParams | None = None) -> tuple[NetParams, list[dict]]:
    """Full offline IQL run over a TransitionDataset; returns params + metric log."""
    if len(dataset.r) == 0:
        raise IqlError("empty dataset")
    mu, sd, act_scale = fit_normalization(dataset)
    norm = normalized_views(dataset, mu, sd, act_scale)
    obs_dim = norm.s.shape[1]
    act_dim = norm.a.shape[1]
    if params is None:
        params = init_params(obs_dim, act_dim, cfg)
    params = replace_params(params, obs_mu=mu, obs_sd=sd, act_scale=act_scale)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    log = []
    for step in range(cfg.steps):
        batch = sample_batch(norm, cfg.batch_size, rng)
        params, opt, metrics = train_step(params, batch, cfg, opt)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.append({"step": step, **metrics})
    if not (params_finite(params.v) and params_finite(params.q) and params_finite(params.pi_mean)):
        raise IqlError("non-finite parameters after training")
    return params, log


def train_bc(dataset, cfg: TrainConfig) -> tuple[NetParams, list[dict]]:
    """Behavior cloning on success transitions: AWR with all weights 1.

    The dataset must already be success-only (build_executor_dataset with
    success_only=True); raises if it contains failure transitions.
    """
    if len(dataset.r) == 0:
        raise IqlError("empty dataset")
    if getattr(dataset, "failure_transitions", 0):
        raise IqlError("behavior cloning expects success-only transitions")
    mu, sd, act_scale = fit_normalization(dataset)
    norm = normalized_views(dataset, mu, sd, act_scale)
    obs_dim = norm.s.shape[1]
    act_dim = norm.a.shape[1]
    params = init_params(obs_dim, act_dim, cfg)
    params = replace_params(params, obs_mu=mu, obs_sd=sd, act_scale=act_scale)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    ones = np.ones(cfg.batch_size)
    log = []
    for step in range(cfg.steps):
        batch = sample_batch(norm, cfg.batch_size, rng)
        lp, gpi, gls = awr_policy_loss(batch, params, cfg, weights=ones)
        params = replace_params(
            params,
            pi_mean=opt.opt_pi.step(params.pi_mean, gpi),
            log_std=np.maximum(opt.opt_ls.step(params.log_std, gls), TRAIN_LOG_STD_MIN),
        )
        if step % 100 == 0 or step == cfg.steps - 1:
            log.append({"step": step, "pi_loss": lp})
    return params, log


def policy_mean_action(params: NetParams, s: np.ndarray) -> np.ndarray:
    """Mean action in environment units; applies the stored normalization."""
    s = np.atleast_2d(s)
    if params.obs_mu is not None:
        s = (s - params.obs_mu) / params.obs_sd
    mu, _ = mlp_forward(params.pi_mean, s)
    a = mu[0]
    if params.act_scale is not None:
        a = a / params.act_scale
    return a


# ---------------------------------------------------------------------------
# tabular mode and oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularMdp:
    """Finite deterministic MDP: next_state[s, a], reward[s, a], terminal[s]."""

    n_states: int
    n_actions: int
    next_state: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray
    gamma: float


def value_iteration(mdp: TabularMdp, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bellman optimality iteration; greedy ties break toward the lower action."""
    V = np.zeros(mdp.n_states)
    for _ in range(100000):
        cont = (~mdp.terminal[mdp.next_state]).astype(np.float64)
        Q = mdp.reward + mdp.gamma * cont * V[mdp.next_state]
        Q[mdp.terminal, :] = 0.0
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    cont = (~mdp.terminal[mdp.next_state]).astype(np.float64)
    Q = mdp.reward + mdp.gamma * cont * V[mdp.next_state]
    Q[mdp.terminal, :] = 0.0
    policy = Q.argmax(axis=1)  # argmax returns the first (lowest) maximizer
    return V, Q, policy


@dataclass
class TabularDataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


def dataset_from_policy(
    mdp: TabularMdp, behavior: np.ndarray | None, episodes: int, max_len: int, seed: int
) -> TabularDataset:
    """Roll a behavior policy (None = uniform) to build an offline dataset."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(episodes):
        s = int(rng.integers(0, mdp.n_states))
        for _ in range(max_len):
            if mdp.terminal[s]:
                break
            if behavior is None:
                a = int(rng.integers(0, mdp.n_actions))
            else:
                a = int(behavior[s])
            s2 = int(mdp.next_state[s, a])
            r = float(mdp.reward[s, a])
            d = bool(mdp.terminal[s2])
            rows.append((s, a, r, s2, d))
            s = s2
    if not rows:
        raise IqlError("behavior rollouts produced no transitions")
    arr = np.array(rows, dtype=np.float64)
    return TabularDataset(
        s=arr[:, 0].astype(int), a=arr[:, 1].astype(int), r=arr[:, 2],
        s_next=arr[:, 3].astype(int), done=arr[:, 4].astype(bool),
    )


def full_coverage_dataset(mdp: TabularMdp) -> TabularDataset:
    """Every non-terminal (s, a) exactly once."""
    rows = []
    for s in range(mdp.n_states):
        if mdp.terminal[s]:
            continue
        for a in range(mdp.n_actions):
            s2 = int(mdp.next_state[s, a])
            rows.append((s, a, float(mdp.reward[s, a]), s2, bool(mdp.terminal[s2])))
    arr = np.array(rows, dtype=np.float64)
    return TabularDataset(
        s=arr[:, 0].astype(int), a=arr[:, 1].astype(int), r=arr[:, 2],
        s_next=arr[:, 3].astype(int), done=arr[:, 4].astype(bool),
    )


def _weighted_quantile(values: np.ndarray, weights: np.ndarray, tau: float) -> float:
    """Minimizer of sum_i w_i * rho_tau(v_i - x): the weighted tau-quantile."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cum = np.cumsum(w)
    total = cum[-1]
    k = int(np.searchsorted(cum, tau * total, side="left"))
    return float(v[min(k, len(v) - 1)])


def _weighted_expectile(values: np.ndarray, weights: np.ndarray, tau: float) -> float:
    """Minimizer of sum_i w_i * |tau - 1{v_i<x}| (v_i - x)^2 by fixed point."""
    x = float(np.average(values, weights=weights))
    for _ in range(200):
        alpha = np.where(values >= x, tau, 1.0 - tau) * weights
        x_new = float(np.sum(alpha * values) / np.sum(alpha))
        if abs(x_new - x) < 1e-12:
            return x_new
        x = x_new
    return x


def tabular_iql(
    mdp: TabularMdp, dataset: TabularDataset, cfg: TrainConfig, iters: int = 2000, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed-point iteration of the IQL updates with table lookups.

    Q and the greedy policy are defined over covered (s, a) pairs; a
    non-terminal state with no coverage is an error.
    """
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    r_sum = np.zeros((mdp.n_states, mdp.n_actions))
    nxt = np.full((mdp.n_states, mdp.n_actions), -1, dtype=int)
    dn = np.zeros((mdp.n_states, mdp.n_actions), dtype=bool)
    for s, a, r, s2, d in zip(dataset.s, dataset.a, dataset.r, dataset.s_next, dataset.done):
        counts[s, a] += 1
        r_sum[s, a] += r
        nxt[s, a] = s2
        dn[s, a] = d
    covered = counts > 0
    for s in range(mdp.n_states):
        if not mdp.terminal[s] and not covered[s].any():
            raise IqlError(f"state {s} has no covered action in the dataset")
    r_mean = np.where(covered, r_sum / np.maximum(counts, 1), 0.0)

    V = np.zeros(mdp.n_states)
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(iters):
        Q_new = np.where(covered, r_mean + mdp.gamma * np.where(dn, 0.0, V[nxt]), 0.0)
        V_new = V.copy()
        for s in range(mdp.n_states):
            if mdp.terminal[s] or not covered[s].any():
                V_new[s] = 0.0
                continue
            vals = Q_new[s, covered[s]]
            w = counts[s, covered[s]]
            if cfg.loss_variant == "linear_quantile":
                V_new[s] = _weighted_quantile(vals, w, cfg.tau)
            else:
                V_new[s] = _weighted_expectile(vals, w, cfg.tau)
        if np.max(np.abs(V_new - V)) < tol and np.max(np.abs(Q_new - Q)) < tol:
            V, Q = V_new, Q_new
            break
        V, Q = V_new, Q_new

    policy = np.zeros(mdp.n_states, dtype=int)
    masked = np.where(covered, Q, -np.inf)
    for s in range(mdp.n_states):
        if covered[s].any():
            policy[s] = int(masked[s].argmax())
    return V, Q, policy
