"""Action-guided reverse-KL training and LoRA-only fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DegenerateBatchError, InvalidInputError, TrainingDivergenceError
from .flow import DIGITAL, FlowWeights, calibrate_batchnorm, push_forward, sample_batch

log = logging.getLogger(__name__)

__all__ = [
    "TrainHyper",
    "TrainReport",
    "Adam",
    "action_node",
    "reverse_kl_loss",
    "ess",
    "evaluate_ess",
    "train",
    "finetune_lora",
]


@dataclass
class TrainHyper:
    batch_size: int = 256
    steps: int = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    ess_target: float = 1.0
    mode: str = "full"
    eval_every: int = 100
    eval_batch: int = 4096
    lr_floor: float = 1.0
    """Final learning-rate factor of a cosine schedule (1.0 keeps lr constant)."""

    def __post_init__(self):
        if self.batch_size < 2:
            raise InvalidInputError("batch_size must be >= 2 for batchnorm training")
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be > 0")
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if not 0 < self.ess_target <= 1:
            raise InvalidInputError("ess_target must lie in (0, 1]")
        if self.mode not in ("full", "lora_only"):
            raise InvalidInputError(f"unknown training mode {self.mode!r}")
        self.betas = tuple(self.betas)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    ess: list[tuple[int, float]] = field(default_factory=list)
    final_ess: float | None = None
    wall_clock: float = 0.0
    steps: int = 0

    def to_dict(self):
        return {"losses": self.losses, "ess": [list(e) for e in self.ess],
                "final_ess": self.final_ess, "wall_clock": self.wall_clock,
                "steps": self.steps}


class Adam:
    """Adaptive-moment optimizer over a fixed list of leaf tensors (updated in place)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def action_node(action, phi: Tensor) -> Tensor:
    """Per-sample action values as a tape node, differentiated analytically."""
    S = action(phi.data)
    return ad.custom((phi,), S, lambda g: (g[..., None, None] * action.grad(phi.data),))


def reverse_kl_loss(log_q: Tensor, actions: Tensor) -> Tensor:
    """Shifted reverse KL ``mean(log q + S)``; equals KL(q||p) - log Z."""
    terms = log_q + actions
    bad = np.flatnonzero(~np.isfinite(terms.data))
    if bad.size:
        raise TrainingDivergenceError(f"non-finite loss term at index {bad[0]}", index=int(bad[0]))
    return ad.mean(terms)


def ess(log_q, log_p) -> float:
    """Normalised effective sample size of importance weights ``p/q`` in ``(0, 1]``."""
    lw = np.asarray(log_p, dtype=np.float64) - np.asarray(log_q, dtype=np.float64)
    if lw.size == 0:
        raise InvalidInputError("empty batch")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise InvalidInputError("non-finite log weights")
    m = lw.max()
    if m == -np.inf:
        raise DegenerateBatchError("all importance weights are zero")
    wts = np.exp(lw - m)
    return float(wts.sum() ** 2 / (lw.size * (wts**2).sum()))


def evaluate_ess(w: FlowWeights, action, n: int = 4096, seed: int = 12345) -> float:
    b = sample_batch(w, n, seed)
    return ess(b.log_q, -action(b.phi))


def _trainable(w: FlowWeights, mode: str):
    names = w.names(DIGITAL) if mode == "lora_only" else w.names()
    return [w.tensors[n] for n in names]


def train(w: FlowWeights, action, hyper: TrainHyper | None = None, *, callback=None):
    """Minimise the shifted reverse KL by reparameterised gradient descent.

    Works on a copy of ``w``; returns ``(trained_weights, report)``. In
    ``lora_only`` mode only digital-tagged tensors (adapters, time
    embeddings, normalisation) change.
    """
    hyper = hyper or TrainHyper()
    t0 = time.perf_counter()
    w = w.copy()
    report = TrainReport()
    if hyper.steps == 0:
        report.wall_clock = time.perf_counter() - t0
        return w, report
    params = _trainable(w, hyper.mode)
    opt = Adam(params, hyper.lr, hyper.betas)
    rng = np.random.default_rng(hyper.seed)
    H, W = w.config.lattice
    last_good = w.copy()
    eval_seed = hyper.seed + 1_000_003
    for step in range(hyper.steps):
        w.set_mode("training")
        x = rng.standard_normal((hyper.batch_size, H, W))
        with Tape() as tape:
            phi, log_q, _ = push_forward(w, x)
            try:
                loss = reverse_kl_loss(log_q, action_node(action, phi))
            except TrainingDivergenceError as e:
                e.checkpoint = last_good
                raise
        if not np.isfinite(loss.data):
            raise TrainingDivergenceError(f"loss is {loss.data} at step {step}",
                                          checkpoint=last_good)
        grads = ad.backward(tape, loss, wrt=params)
        frac = step / max(hyper.steps - 1, 1)
        lr = hyper.lr * (hyper.lr_floor + (1 - hyper.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))
        opt.step(grads, lr)
        report.losses.append(float(loss.data))
        last = step == hyper.steps - 1
        if (step + 1) % hyper.eval_every == 0 or last:
            calibrate_batchnorm(w, hyper.eval_batch, eval_seed + 1)
            w.set_mode("inference")
            e = evaluate_ess(w, action, hyper.eval_batch, eval_seed)
            report.ess.append((step + 1, e))
            log.info("step %d loss %.4f ess %.3f", step + 1, float(loss.data), e)
            if np.isfinite(e):
                last_good = w.copy()
            if callback is not None:
                callback(step + 1, w, e)
            if e >= hyper.ess_target:
                report.steps = step + 1
                break
        report.steps = step + 1
    w.set_mode("inference")
    report.final_ess = report.ess[-1][1] if report.ess else None
    report.wall_clock = time.perf_counter() - t0
    w.provenance = dict(w.provenance, action=getattr(action, "kind", "custom"),
                        action_params=_params_of(action), train=hyper.to_dict(),
                        final_ess=report.final_ess)
    return w, report


def _params_of(action):
    f = getattr(action, "params_dict", None)
    return f() if f else {}


def finetune_lora(w: FlowWeights, new_action, hyper: TrainHyper | None = None):
    """LoRA-only adaptation of trained weights to a new action."""
    hyper = hyper or TrainHyper(steps=500)
    hyper = TrainHyper(**{**hyper.to_dict(), "mode": "lora_only"})
    return train(w, new_action, hyper)
