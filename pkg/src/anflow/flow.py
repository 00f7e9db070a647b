"""Adaptive normalizing flow with a LoRA-augmented MLP-mixer conditioner.

A flow is ``T`` inverse coupling layers that share one conditioner network;
only the per-timestep embedding ``e_t`` tells the layers apart. Layer ``t``
freezes the sites where the checkerboard mask ``M^t`` is 1 and updates the
rest as ``x' = (x - s1) * exp(-s2)``; the conditioner outputs are zeroed on
frozen sites so those stay bit-identical.

Conditioner pipeline (per sample)::

    patches (s, P*P) --embed--> X (s, C)
    m x [ U = X + W2 relu(W1 BN(X + e_t))   along tokens, per channel
          Y = U + W4 relu(W3 BN(U))         along channels, per token ]
    Y --transposed conv (kernel = stride = P)--> (H, W, 2) --per-pixel FC--> (s1, s2)

Every ``W_i`` carries a parallel low-rank adapter ``x -> (x A) B``. With
``B`` initialised to zero the adapters are exactly neutral.

The transposed convolution with kernel equal to stride is a per-patch linear
map ``C -> 2 P P``; the patch embedding is the matching strided linear map
``P P -> C`` (equivalent to a ``P x P`` convolution with stride ``P``), both
with bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import (InvalidInputError, InvalidShapeError, InvalidTimestepError,
                     NumericRangeError)
from .lattice import checkerboard_mask

__all__ = [
    "MixerConfig",
    "FlowWeights",
    "ConditionerOutput",
    "FlowSampleRecord",
    "init_weights",
    "mixer_forward",
    "coupling_inverse",
    "coupling_forward",
    "flow_sample",
    "sample_batch",
    "push_forward",
    "prior_log_density",
    "calibrate_batchnorm",
    "FlowBatch",
    "flow_log_density",
    "count_params_and_macs",
]

ANALOG = "analog"
DIGITAL = "digital"
S2_LIMIT = 700.0


@dataclass(frozen=True)
class MixerConfig:
    """Architecture hyperparameters.

    ``lora_rank`` is clipped per adapted layer to ``min(in, out) - 1`` (but
    never below 1) so tiny token dimensions stay genuinely low rank.
    """

    lattice: tuple[int, int] = (4, 4)
    patch_size: int = 2
    channels: int = 32
    blocks: int = 2
    token_hidden: int = 16
    channel_hidden: int = 128
    timesteps: int = 8
    lora_rank: int = 1
    lora_scale: float = 1.0
    z2_equivariant: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "lattice", tuple(int(v) for v in self.lattice))
        H, W = self.lattice
        P = self.patch_size
        if P < 1 or H % P or W % P:
            raise InvalidShapeError(f"patch size {P} must divide lattice {self.lattice}")
        if self.timesteps < 2 or self.timesteps % 2:
            raise InvalidInputError("timesteps must be even and >= 2")
        if self.lora_rank < 1:
            raise InvalidInputError("lora_rank must be >= 1")
        for name in ("channels", "blocks", "token_hidden", "channel_hidden"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")

    @property
    def n_patches(self) -> int:
        H, W = self.lattice
        return (H * W) // (self.patch_size**2)

    @property
    def volume(self) -> int:
        return self.lattice[0] * self.lattice[1]

    def rank_for(self, n_in: int, n_out: int) -> int:
        return max(1, min(self.lora_rank, min(n_in, n_out) - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lattice"] = list(self.lattice)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        d = dict(d)
        d["lattice"] = tuple(d["lattice"])
        return cls(**d)


def _layer_shapes(cfg: MixerConfig):
    """Yield ``(name, n_in, n_out, adapted)`` for every analog linear layer."""
    P2, C, s = cfg.patch_size**2, cfg.channels, cfg.n_patches
    yield "embed", P2, C, False
    for b in range(cfg.blocks):
        yield f"block{b}.tok1", s, cfg.token_hidden, True
        yield f"block{b}.tok2", cfg.token_hidden, s, True
        yield f"block{b}.ch1", C, cfg.channel_hidden, True
        yield f"block{b}.ch2", cfg.channel_hidden, C, True
    yield "out", C, 2 * P2, False
    yield "reg", 2, 2, False


@dataclass
class FlowWeights:
    """All flow parameters plus their analog/digital partition tags."""

    config: MixerConfig
    tensors: dict[str, Tensor]
    tags: dict[str, str]
    bn: dict[str, BatchNormState]
    provenance: dict = field(default_factory=dict)
    mode: str = "inference"
    vmm_quant: tuple[int, int] | None = None

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self, tag: str | None = None):
        return [n for n in self.tensors if tag is None or self.tags[n] == tag]

    def param_counts(self) -> dict:
        a = sum(self.tensors[n].data.size for n in self.names(ANALOG))
        d = sum(self.tensors[n].data.size for n in self.names(DIGITAL))
        return {"analog": a, "digital": d, "total": a + d,
                "digital_fraction": d / (a + d)}

    def set_mode(self, mode: str) -> "FlowWeights":
        if mode not in ("training", "inference"):
            raise InvalidInputError(f"unknown mode {mode!r}")
        self.mode = mode
        for st in self.bn.values():
            st.mode = mode
        return self

    def copy(self) -> "FlowWeights":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                   for k, v in self.tensors.items()}
        bn = {k: BatchNormState(v.num_features, v.momentum, v.eps,
                                v.running_mean.copy(), v.running_var.copy(), v.mode)
              for k, v in self.bn.items()}
        return FlowWeights(self.config, tensors, dict(self.tags), bn,
                           dict(self.provenance), self.mode, self.vmm_quant)

    def state_arrays(self) -> dict[str, tuple[np.ndarray, str]]:
        """Flat ``name -> (array, tag)`` view including batchnorm statistics."""
        out = {k: (v.data, self.tags[k]) for k, v in self.tensors.items()}
        for k, st in self.bn.items():
            out[f"{k}.running_mean"] = (st.running_mean, DIGITAL)
            out[f"{k}.running_var"] = (st.running_var, DIGITAL)
        return out

    @classmethod
    def from_state_arrays(cls, config: MixerConfig, arrays: dict, provenance=None):
        w = init_weights(config, seed=0)
        for k, (arr, tag) in arrays.items():
            if k.endswith(".running_mean"):
                w.bn[k[:-len(".running_mean")]].running_mean = np.array(arr, dtype=np.float64)
            elif k.endswith(".running_var"):
                w.bn[k[:-len(".running_var")]].running_var = np.array(arr, dtype=np.float64)
            else:
                if k not in w.tensors:
                    raise InvalidInputError(f"unexpected tensor {k!r} for this config")
                if w.tensors[k].shape != np.shape(arr):
                    raise InvalidShapeError(f"tensor {k!r}: shape {np.shape(arr)} "
                                            f"!= {w.tensors[k].shape}")
                w.tensors[k] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=k)
                w.tags[k] = tag
        w.provenance = dict(provenance or {})
        return w


def init_weights(config: MixerConfig, seed: int = 0, out_scale: float = 1e-2) -> FlowWeights:
    """Random initialisation.

    Base layers use ``U(-1/sqrt(in), 1/sqrt(in))``; LoRA ``A ~ N(0, 0.02²)``
    and ``B = 0``. The final per-pixel map starts at ``out_scale`` so the
    untrained flow is close to the identity.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    for name, n_in, n_out, adapted in _layer_shapes(config):
        bound = 1.0 / math.sqrt(n_in)
        scale = out_scale if name == "reg" else 1.0
        tensors[f"{name}.W"] = rng.uniform(-bound, bound, (n_in, n_out)) * scale
        tensors[f"{name}.b"] = np.zeros(n_out) if name == "reg" else \
            rng.uniform(-bound, bound, n_out)
        tags[f"{name}.W"] = tags[f"{name}.b"] = ANALOG
        if adapted:
            r = config.rank_for(n_in, n_out)
            tensors[f"{name}.lora.A"] = rng.normal(0.0, 0.02, (n_in, r))
            tensors[f"{name}.lora.B"] = np.zeros((r, n_out))
            tags[f"{name}.lora.A"] = tags[f"{name}.lora.B"] = DIGITAL
    # per-patch transposed convolution: stored as (C, 2 * P * P), channel-major
    bn = {}
    for b in range(config.blocks):
        for k in ("bn1", "bn2"):
            nm = f"block{b}.{k}"
            tensors[f"{nm}.gamma"] = np.ones(config.channels)
            tensors[f"{nm}.beta"] = np.zeros(config.channels)
            tags[f"{nm}.gamma"] = tags[f"{nm}.beta"] = DIGITAL
            # the network is shared across coupling layers but feature
            # statistics are not, so running estimates are kept per timestep
            for t in range(config.timesteps):
                bn[f"{nm}.t{t}"] = BatchNormState(config.channels, config.bn_momentum,
                                                  config.bn_eps)
    tensors["temb"] = rng.normal(0.0, 0.02, (config.timesteps, config.channels))
    tags["temb"] = DIGITAL
    ts = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    return FlowWeights(config, ts, tags, bn).set_mode("inference")


# ------------------------------------------------------------------ conditioner

def _quantize_rows(x: np.ndarray, bits: int) -> np.ndarray:
    levels = 2 ** (bits - 1) - 1
    scale = np.max(np.abs(x), axis=-1, keepdims=True)
    scale = np.where(scale > 0, scale, 1.0) / levels
    return np.round(x / scale) * scale


def _linear(w: FlowWeights, x: Tensor, name: str) -> Tensor:
    W, b = w[f"{name}.W"], w[f"{name}.b"]
    if w.vmm_quant is not None:
        dac, adc = w.vmm_quant
        xq = ad.straight_through(x, lambda v: _quantize_rows(v, dac))
        y = ad.straight_through(xq @ W, lambda v: _quantize_rows(v, adc)) + b
    else:
        y = ad.linear(x, W, b)
    if f"{name}.lora.A" in w.tensors:
        lora = (x @ w[f"{name}.lora.A"]) @ w[f"{name}.lora.B"]
        if w.config.lora_scale != 1.0:
            lora = lora * w.config.lora_scale
        y = y + lora
    return y


def _bn(w: FlowWeights, x: Tensor, name: str, t: int) -> Tensor:
    st = w.bn[f"{name}.t{t}"]
    return ad.batchnorm(x, w[f"{name}.gamma"], w[f"{name}.beta"], st,
                        training=(w.mode == "training"))


@dataclass
class ConditionerOutput:
    s1: Tensor
    s2: Tensor


def _check_t(w: FlowWeights, t: int):
    if not 0 <= t < w.config.timesteps:
        raise InvalidTimestepError(f"timestep {t} outside [0, {w.config.timesteps})")


def _mixer_net(w: FlowWeights, x: Tensor, t: int) -> Tensor:
    """Raw network output ``O`` of shape ``(N, H, W, 2)``."""
    cfg = w.config
    H, W = cfg.lattice
    N, P, s = x.shape[0], cfg.patch_size, cfg.n_patches
    hp, wp = H // P, W // P

    p = x.reshape((N, hp, P, wp, P)).transpose(0, 1, 3, 2, 4).reshape((N, s, P * P))
    X = _linear(w, p, "embed")
    e_t = w["temb"][t]
    for b in range(cfg.blocks):
        Z = _bn(w, X + e_t, f"block{b}.bn1", t).transpose(0, 2, 1)
        h = ad.relu(_linear(w, Z, f"block{b}.tok1"))
        U = X + _linear(w, h, f"block{b}.tok2").transpose(0, 2, 1)
        Z2 = _bn(w, U, f"block{b}.bn2", t)
        h2 = ad.relu(_linear(w, Z2, f"block{b}.ch1"))
        X = U + _linear(w, h2, f"block{b}.ch2")

    # transposed convolution: each patch feature -> (2, P, P) block of pixels
    Ye = _linear(w, X, "out").reshape((N, hp, wp, 2, P, P))
    Ye = Ye.transpose(0, 1, 4, 2, 5, 3).reshape((N, H, W, 2))
    return _linear(w, Ye, "reg")


def mixer_forward(x_a, t: int, w: FlowWeights, mode: str | None = None) -> ConditionerOutput:
    """Conditioner outputs ``(s1, s2)`` for frozen input ``x_a`` at layer ``t``.

    ``x_a`` has shape ``(N, H, W)`` (or ``(H, W)``); outputs match it and are
    exactly zero on the frozen sites of ``M^t``.  With
    ``config.z2_equivariant`` the network runs on ``x_a`` and ``-x_a`` in one
    batch and ``s1`` (``s2``) is taken as the odd (even) part, which makes
    the whole flow commute with ``phi -> -phi``.
    """
    cfg = w.config
    _check_t(w, t)
    if mode is not None and mode != w.mode:
        w.set_mode(mode)
    x = x_a if isinstance(x_a, Tensor) else Tensor(x_a)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    H, W = cfg.lattice
    if x.shape[-2:] != (H, W):
        raise InvalidShapeError(f"input lattice {x.shape[-2:]} != config {cfg.lattice}")
    N = x.shape[0]
    if cfg.z2_equivariant:
        O = _mixer_net(w, ad.concat([x, -x], axis=0), t)
        Op, Om = O[:N], O[N:]
        s1 = 0.5 * (Op[..., 0] - Om[..., 0])
        s2 = 0.5 * (Op[..., 1] + Om[..., 1])
    else:
        O = _mixer_net(w, x, t)
        s1, s2 = O[..., 0], O[..., 1]
    active = checkerboard_mask(cfg.lattice, t).complement
    s1 = ad.mask_apply(s1, active)
    s2 = ad.mask_apply(s2, active)
    if squeeze:
        s1, s2 = s1.reshape((H, W)), s2.reshape((H, W))
    return ConditionerOutput(s1, s2)


# --------------------------------------------------------------- coupling layers

def _check_s2(s2: Tensor):
    if np.any(np.abs(s2.data) > S2_LIMIT) or not np.all(np.isfinite(s2.data)):
        raise NumericRangeError("conditioner log-scale outside +-700")


def coupling_inverse(x, t: int, w: FlowWeights, conditioner=None):
    """Apply layer ``t`` in the sampling direction.

    Returns ``(x_next, logdet)`` where ``logdet`` (per sample) is the sum of
    ``s2`` over the updated sites.  ``conditioner(x_a, t, w)`` may replace
    the mixer network, which is how the layer is tested in isolation.
    """
    _check_t(w, t)
    conditioner = conditioner or mixer_forward
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise InvalidInputError("non-finite input to coupling layer")
    M = checkerboard_mask(w.config.lattice, t).bits
    x_a = ad.mask_apply(x, M)
    x_b = ad.mask_apply(x, 1.0 - M)
    out = conditioner(x_a, t, w)
    _check_s2(out.s2)
    x_next = (x_b - out.s1) * ad.exp(-out.s2) + x_a
    return x_next, out.s2.sum(axis=(-2, -1))


def coupling_forward(x_next, t: int, w: FlowWeights, conditioner=None):
    """Exact inverse of :func:`coupling_inverse` (density-evaluation direction)."""
    _check_t(w, t)
    conditioner = conditioner or mixer_forward
    y = x_next if isinstance(x_next, Tensor) else Tensor(x_next)
    M = checkerboard_mask(w.config.lattice, t).bits
    y_a = ad.mask_apply(y, M)
    y_b = ad.mask_apply(y, 1.0 - M)
    out = conditioner(y_a, t, w)
    _check_s2(out.s2)
    x = ad.mask_apply(y_b * ad.exp(out.s2) + out.s1, 1.0 - M) + y_a
    return x, out.s2.sum(axis=(-2, -1))


def prior_log_density(x) -> np.ndarray | Tensor:
    """Standard-normal log density summed over the lattice axes."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    V = xd.shape[-1] * xd.shape[-2]
    return -0.5 * (xd**2).sum(axis=(-2, -1)) - 0.5 * V * math.log(2 * math.pi)


def push_forward(w: FlowWeights, x, conditioner=None):
    """Map prior draws ``x`` through all layers.

    Returns ``(phi, log_q, logdets)`` as tensors; ``logdets`` has shape
    ``(T, N)``.  Under an active tape the whole computation is recorded.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    log_q = Tensor(prior_log_density(x))
    logdets = []
    for t in range(w.config.timesteps):
        x, ld = coupling_inverse(x, t, w, conditioner)
        # log|det dphi/dx| = -sum s2, so log q = log r + sum s2
        log_q = log_q + ld
        logdets.append(ld)
    return x, log_q, logdets


def flow_log_density(w: FlowWeights, phi, conditioner=None):
    """Pull ``phi`` back to the prior and return ``(x, log_q)`` (numpy, inference mode)."""
    y = phi if isinstance(phi, Tensor) else Tensor(phi)
    total = 0.0
    prev = w.mode
    w.set_mode("inference")
    try:
        for t in reversed(range(w.config.timesteps)):
            y, ld = coupling_forward(y, t, w, conditioner)
            total = total + ld.data
    finally:
        w.set_mode(prev)
    return y.data, prior_log_density(y.data) + total


@dataclass
class FlowSampleRecord:
    x: np.ndarray
    phi: np.ndarray
    log_r: float
    log_q: float
    logdets: list[float]


class FlowBatch:
    """Columnar batch of flow samples (``x``, ``phi``, ``log_r``, ``log_q``, ``logdets``)."""

    def __init__(self, x, phi, log_r, log_q, logdets):
        self.x, self.phi = x, phi
        self.log_r, self.log_q = log_r, log_q
        self.logdets = logdets  # (N, T)

    def __len__(self):
        return len(self.phi)

    def __getitem__(self, i) -> FlowSampleRecord:
        return FlowSampleRecord(self.x[i], self.phi[i], float(self.log_r[i]),
                                float(self.log_q[i]), [float(v) for v in self.logdets[i]])

    def records(self):
        return [self[i] for i in range(len(self))]


def sample_batch(w: FlowWeights, n: int, rng_seed=None, chunk: int = 4096,
                 conditioner=None) -> FlowBatch:
    """Draw ``n`` flow samples in inference mode (vectorised)."""
    if n < 1:
        raise InvalidInputError("need n >= 1 samples")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    prev = w.mode
    w.set_mode("inference")
    try:
        H, W = w.config.lattice
        xs, phis, lrs, lqs, lds = [], [], [], [], []
        done = 0
        while done < n:
            k = min(chunk, n - done)
            x = rng.standard_normal((k, H, W))
            phi, log_q, logdets = push_forward(w, x, conditioner)
            xs.append(x)
            phis.append(phi.data)
            lrs.append(prior_log_density(x))
            lqs.append(log_q.data)
            lds.append(np.stack([ld.data for ld in logdets], axis=1))
            done += k
    finally:
        w.set_mode(prev)
    return FlowBatch(np.concatenate(xs), np.concatenate(phis), np.concatenate(lrs),
                     np.concatenate(lqs), np.concatenate(lds))


def calibrate_batchnorm(w: FlowWeights, n: int = 4096, rng_seed=None) -> FlowWeights:
    """Replace running statistics by exact statistics of one large batch.

    The batch passes through the flow in training mode, so every timestep
    sees the same upstream inputs it was trained on. Returns ``w``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    prev = w.mode
    moms = {k: st.momentum for k, st in w.bn.items()}
    try:
        for st in w.bn.values():
            st.momentum = 1.0
        w.set_mode("training")
        push_forward(w, rng.standard_normal((n,) + tuple(w.config.lattice)))
    finally:
        for k, st in w.bn.items():
            st.momentum = moms[k]
        w.set_mode(prev)
    return w


def flow_sample(w: FlowWeights, n: int, rng_seed=None) -> list[FlowSampleRecord]:
    """``n`` independent samples with exact log densities, deterministic per seed."""
    return sample_batch(w, n, rng_seed).records()


# ----------------------------------------------------------------- accounting

def count_params_and_macs(config: MixerConfig) -> dict:
    """Parameter and per-inference MAC counts split by analog/digital tag.

    MACs cover one full sample (all ``T`` layers). Normalisation counts one
    MAC per element (scale-and-shift), and the digital coupling update one
    MAC per updated site.
    """
    from .hardware import layer_profiles  # local: hardware depends on flow

    w = init_weights(config, seed=0)
    counts = w.param_counts()
    profiles = layer_profiles(config)
    return {
        "analog_params": counts["analog"],
        "digital_params": counts["digital"],
        "analog_macs": int(sum(p.analog_macs for p in profiles)),
        "digital_macs": int(sum(p.digital_macs for p in profiles)),
        "digital_fraction": counts["digital_fraction"],
    }
