"""Markov chains over lattice configurations.

Two samplers produce :class:`Ensemble` objects with the same bookkeeping:
hybrid Monte Carlo (the baseline) and independence Metropolis driven by
flow proposals. All densities are unnormalised log values; the partition
function never appears.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (InvalidInputError, InvalidProposalError, TrajectoryDivergenceError,
                     TuningError)
from .flow import FlowBatch, FlowWeights, sample_batch

log = logging.getLogger(__name__)

__all__ = [
    "HmcParams",
    "Ensemble",
    "leapfrog",
    "hamiltonian",
    "hmc_chain",
    "acceptance_probability",
    "mh_accept_sequence",
    "flow_mh_chain",
    "propose_and_sample",
]

LOG_RATIO_CLAMP = 700.0


@dataclass
class HmcParams:
    """HMC settings.

    ``n_samples`` counts trajectories after burn-in; ``n_samples // thin``
    configurations are retained. With ``tune`` the step size is adapted
    during burn-in (acceptance target ``[0.7, 0.9]``) and ``n_leapfrog``
    follows so that ``n_leapfrog * step_size`` stays near ``traj_length``.
    """

    step_size: float = 0.1
    n_leapfrog: int = 10
    n_samples: int = 2000
    burn_in: int = 500
    thin: int = 20
    seed: int = 0
    tune: bool = True
    traj_length: float = 1.0
    accept_window: int = 500
    min_accept: float = 0.05

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be > 0")
        if self.n_leapfrog < 1 or self.thin < 1 or self.n_samples < 1 or self.burn_in < 0:
            raise InvalidInputError("n_leapfrog, thin, n_samples must be >= 1; burn_in >= 0")


@dataclass
class Ensemble:
    """Ordered chain of configurations with per-entry bookkeeping."""

    configs: np.ndarray
    actions: np.ndarray
    accepted: np.ndarray
    proposal_index: np.ndarray
    log_q: np.ndarray | None = None
    sampler: str = "unknown"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.configs = np.asarray(self.configs, dtype=np.float64)
        if self.configs.ndim != 3:
            raise InvalidInputError("ensemble configs must have shape (n, L0, L1)")
        n = len(self.configs)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        self.proposal_index = np.asarray(self.proposal_index, dtype=np.int64)
        if self.log_q is not None:
            self.log_q = np.asarray(self.log_q, dtype=np.float64)
        for name in ("actions", "accepted", "proposal_index"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"{name} length != number of configs")

    def __len__(self):
        return len(self.configs)

    @property
    def geometry(self) -> tuple[int, int]:
        return tuple(self.configs.shape[1:])

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if len(self) else float("nan")

    def subset(self, idx) -> "Ensemble":
        return Ensemble(self.configs[idx], self.actions[idx], self.accepted[idx],
                        self.proposal_index[idx],
                        None if self.log_q is None else self.log_q[idx],
                        self.sampler, self.seed, dict(self.meta))

    @staticmethod
    def concatenate(parts: list["Ensemble"]) -> "Ensemble":
        lq = None if any(p.log_q is None for p in parts) else np.concatenate([p.log_q for p in parts])
        meta = dict(parts[0].meta, chains=[dict(p.meta, seed=p.seed, n=len(p)) for p in parts])
        return Ensemble(np.concatenate([p.configs for p in parts]),
                        np.concatenate([p.actions for p in parts]),
                        np.concatenate([p.accepted for p in parts]),
                        np.concatenate([p.proposal_index for p in parts]),
                        lq, parts[0].sampler, parts[0].seed, meta)


# ------------------------------------------------------------------------ HMC

def hamiltonian(phi, pi, action) -> float:
    return 0.5 * float(np.sum(pi**2)) + float(action(phi))


def leapfrog(phi, pi, eps: float, n: int, action):
    """Kick-drift-kick integration of ``n`` steps with force ``-dS/dphi``."""
    phi = np.array(phi, dtype=np.float64)
    pi = np.array(pi, dtype=np.float64)
    if phi.shape != pi.shape:
        raise InvalidInputError("field and momentum shapes differ")
    with np.errstate(over="ignore", invalid="ignore"):
        pi = pi - 0.5 * eps * action.grad(phi)
        for i in range(n):
            phi = phi + eps * pi
            if not np.all(np.isfinite(phi)):
                raise TrajectoryDivergenceError(f"leapfrog field became non-finite at step {i}")
            f = action.grad(phi)
            pi = pi - (eps if i < n - 1 else 0.5 * eps) * f
    if not np.all(np.isfinite(pi)):
        raise TrajectoryDivergenceError("leapfrog momentum became non-finite")
    return phi, pi


def _trajectory(phi, action, eps, n, rng, S0=None):
    pi = rng.standard_normal(phi.shape)
    S0 = float(action(phi)) if S0 is None else S0
    H0 = 0.5 * float(np.sum(pi**2)) + S0
    try:
        phi1, pi1 = leapfrog(phi, pi, eps, n, action)
        with np.errstate(over="ignore", invalid="ignore"):
            S1 = float(action(phi1))
            dH = 0.5 * float(np.sum(pi1**2)) + S1 - H0
    except (TrajectoryDivergenceError, FloatingPointError):
        return phi, S0, False, np.inf
    if not np.isfinite(dH):
        return phi, S0, False, np.inf
    acc = dH <= 0 or rng.random() < np.exp(-dH)
    return (phi1, S1, True, dH) if acc else (phi, S0, False, dH)


def hmc_chain(initial, action, params: HmcParams | None = None) -> Ensemble:
    """Run HMC and return the thinned post-burn-in chain.

    ``initial`` may be a configuration or a ``(L0, L1)`` shape tuple, in
    which case the chain starts from a standard-normal draw.
    """
    p = params or HmcParams()
    rng = np.random.default_rng(p.seed)
    if isinstance(initial, tuple) and all(isinstance(v, (int, np.integer)) for v in initial):
        phi = rng.standard_normal(initial)
    else:
        phi = np.array(initial, dtype=np.float64)
    eps, n = p.step_size, p.n_leapfrog
    S = float(action(phi))

    # burn-in with step-size adaptation by doubling/halving (factor shrinks on reversal)
    factor, last_dir, window, acc_count = 2.0, 0, 50, 0
    for i in range(p.burn_in):
        phi, S, acc, _ = _trajectory(phi, action, eps, n, rng, S)
        acc_count += acc
        if p.tune and (i + 1) % window == 0:
            rate = acc_count / window
            acc_count = 0
            d = 1 if rate > 0.9 else (-1 if rate < 0.7 else 0)
            if d:
                if last_dir and d != last_dir:
                    factor = max(factor**0.5, 1.05)
                eps = eps * factor if d > 0 else eps / factor
                n = max(1, int(round(p.traj_length / eps)))
                last_dir = d

    keep, actions, accepted, index = [], [], [], []
    win_acc = 0
    for i in range(p.n_samples):
        phi, S, acc, _ = _trajectory(phi, action, eps, n, rng, S)
        win_acc += acc
        if (i + 1) % p.accept_window == 0:
            if win_acc / p.accept_window < p.min_accept:
                raise TuningError(
                    f"HMC acceptance {win_acc / p.accept_window:.3f} < {p.min_accept} "
                    f"over steps {i + 1 - p.accept_window}..{i} (eps={eps:.4g}, n={n})")
            win_acc = 0
        if (i + 1) % p.thin == 0:
            keep.append(phi.copy())
            actions.append(S)
            accepted.append(acc)
            index.append(i)
    shape = phi.shape
    cfgs = np.array(keep).reshape((-1,) + shape)
    meta = {"action": getattr(action, "kind", "custom"),
            "action_params": _params_of(action), "step_size": eps, "n_leapfrog": n,
            "thin": p.thin, "burn_in": p.burn_in, "n_trajectories": p.n_samples}
    return Ensemble(cfgs, np.array(actions), np.array(accepted, dtype=bool),
                    np.array(index, dtype=np.int64), None, "hmc", p.seed, meta)


def _params_of(action):
    f = getattr(action, "params_dict", None)
    return f() if f else {}


# --------------------------------------------------------- flow Metropolis

def _log_ratio(lq_prev, S_prev, lq_new, S_new):
    r = (lq_prev + S_prev) - (lq_new + S_new)
    return float(np.clip(r, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def acceptance_probability(lq_prev, S_prev, lq_new, S_new) -> float:
    """Independence-Metropolis acceptance ``min(1, q(old) p(new) / (p(old) q(new)))``."""
    return float(min(1.0, np.exp(min(_log_ratio(lq_prev, S_prev, lq_new, S_new), 0.0))))


def mh_accept_sequence(log_q, actions, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Accept flags and the chain's state index for each step.

    Only the ``(log q, S)`` pairs and the seed enter; the first proposal is
    always accepted.
    """
    log_q = np.asarray(log_q, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    n = len(log_q)
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    accepted = np.zeros(n, dtype=bool)
    state = np.zeros(n, dtype=np.int64)
    cur = 0
    accepted[0] = True
    for i in range(1, n):
        r = _log_ratio(log_q[cur], actions[cur], log_q[i], actions[i])
        if r >= 0 or u[i] < np.exp(r):
            cur = i
            accepted[i] = True
        state[i] = cur
    return accepted, state


def flow_mh_chain(records, action, seed=None, actions=None) -> Ensemble:
    """Independence Metropolis over a sequence of flow proposals.

    ``records`` is a :class:`FlowBatch` or a list of ``FlowSampleRecord``.
    Rejected steps repeat the previous configuration, so the ensemble has
    one entry per proposal.
    """
    if isinstance(records, FlowBatch):
        phi, log_q = records.phi, records.log_q
    else:
        if not records:
            raise InvalidInputError("no proposals")
        if any(getattr(r, "log_q", None) is None for r in records):
            raise InvalidProposalError("every proposal needs log_q")
        phi = np.stack([r.phi for r in records])
        log_q = np.array([r.log_q for r in records])
    if log_q is None or np.any(~np.isfinite(log_q)):
        raise InvalidProposalError("proposals need finite log_q")
    S = action(phi) if actions is None else np.asarray(actions, dtype=np.float64)
    accepted, state = mh_accept_sequence(log_q, S, seed)
    meta = {"action": getattr(action, "kind", "custom"), "action_params": _params_of(action),
            "acceptance": float(accepted[1:].mean()) if len(accepted) > 1 else 1.0}
    return Ensemble(phi[state], S[state], accepted, state, log_q[state], "flow-mh", seed, meta)


def propose_and_sample(w: FlowWeights, action, n: int, seed=None) -> Ensemble:
    """Draw ``n`` flow proposals (vectorised) and run the sequential accept/reject scan."""
    ss = np.random.SeedSequence(seed)
    s_prop, s_mh = ss.spawn(2)
    batch = sample_batch(w, n, np.random.default_rng(s_prop))
    ens = flow_mh_chain(batch, action, np.random.default_rng(s_mh))
    ens.seed = seed
    return ens
