"""Analog in-memory-computing emulation of a trained flow.

Analog-tagged weights are mapped onto differential 1T1R conductance pairs
and perturbed by Gaussian programming noise, with DAC/ADC quantization of
every VMM. A noisy deployment can be repaired by LoRA-only training on the
digital side. The cost model charges energy per operation and time per
array read, with each layer's MACs tiled over 32 x 32 arrays.

Units: conductances in microsiemens, energies in joules, times in seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInputError
from .flow import ANALOG, FlowWeights, MixerConfig, _layer_shapes
from .training import TrainHyper, evaluate_ess, finetune_lora

__all__ = [
    "ConductanceMap",
    "NoiseModel",
    "CostConstants",
    "LayerProfile",
    "map_weights",
    "reconstruct_weights",
    "inject_noise",
    "degrade_weights",
    "degraded_inference",
    "lora_recovery",
    "layer_profiles",
    "vmm_energy",
    "energy_report",
    "latency_report",
    "hardware_report",
    "scaling_sweep",
    "default_sweep_config",
    "REPORT_SCHEMA_VERSION",
]

REPORT_SCHEMA_VERSION = 1
SIGMA_FIG2G = 0.54
SIGMA_FIG2H = 1.79


@dataclass(frozen=True)
class ConductanceMap:
    g_min: float = 20.0
    g_max: float = 80.0
    g_ref: float = 50.0
    v_min: float = -0.1
    v_max: float = 0.1
    dac_bits: int = 16
    adc_bits: int = 14

    def __post_init__(self):
        if not self.g_min < self.g_ref < self.g_max:
            raise InvalidInputError("need g_min < g_ref < g_max")
        if not math.isclose(self.v_min, -self.v_max):
            raise InvalidInputError("voltage range must be symmetric")


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = SIGMA_FIG2G
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidInputError("noise sigma must be >= 0")


@dataclass(frozen=True)
class CostConstants:
    e_digital_mac: float = 549e-15
    e_cell: float = 2.0e-15
    e_dac: float = 0.227e-12
    e_tia: float = 3e-12
    e_adc: float = 11.3e-12
    analog_tflops_mm2: float = 5.72
    digital_tflops_mm2: float = 0.14
    area_mm2: float = 1.0
    flops_per_mac: int = 2
    array_size: int = 32

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise InvalidInputError(f"cost constant {k} must be positive")


@dataclass
class LayerProfile:
    """MAC partition of one layer for one inference.

    ``vmms`` lists ``(n_in, n_out, count)``: ``count`` analog vector-matrix
    products of an ``n_in -> n_out`` weight.
    """

    layer: str
    analog_macs: int = 0
    digital_macs: int = 0
    vmms: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.analog_macs < 0 or self.digital_macs < 0:
            raise InvalidInputError("MAC counts must be >= 0")
        if sum(i * o * c for i, o, c in self.vmms) != self.analog_macs:
            raise InvalidInputError(f"{self.layer}: vmm shapes inconsistent with analog MACs")


# ------------------------------------------------------------ weight mapping

def map_weights(W, cmap: ConductanceMap = ConductanceMap()):
    """Differential conductance pair for a weight tensor.

    ``|w| / w_max`` is mapped affinely onto ``[g_ref, g_max]`` on ``G+`` for
    positive weights and ``G-`` for negative ones; the idle side sits at
    ``g_ref``.  Returns ``(G+, G-, w_max)``.
    """
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise InvalidInputError("non-finite weights")
    w_max = float(np.max(np.abs(W))) if W.size else 0.0
    span = cmap.g_max - cmap.g_ref
    if w_max == 0.0:
        g = np.full(W.shape, cmap.g_ref)
        return g, g.copy(), 0.0
    level = np.abs(W) / w_max * span
    gp = cmap.g_ref + np.where(W > 0, level, 0.0)
    gn = cmap.g_ref + np.where(W < 0, level, 0.0)
    return gp, gn, w_max


def reconstruct_weights(gp, gn, w_max: float, cmap: ConductanceMap = ConductanceMap()):
    return (np.asarray(gp) - np.asarray(gn)) / (cmap.g_max - cmap.g_ref) * w_max


def inject_noise(gp, gn, noise: NoiseModel, cmap: ConductanceMap = ConductanceMap(), rng=None):
    """Add iid ``N(0, sigma²)`` programming error per cell, clamped to the device range."""
    if noise.sigma == 0:
        return np.array(gp, dtype=np.float64), np.array(gn, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    gp = np.clip(gp + rng.normal(0.0, noise.sigma, np.shape(gp)), cmap.g_min, cmap.g_max)
    gn = np.clip(gn + rng.normal(0.0, noise.sigma, np.shape(gn)), cmap.g_min, cmap.g_max)
    return gp, gn


def degrade_weights(w: FlowWeights, noise: NoiseModel, cmap: ConductanceMap = ConductanceMap(),
                    tags=(ANALOG,), quantize: bool = True) -> FlowWeights:
    """Copy of ``w`` with the tensors in ``tags`` passed through map -> noise -> reconstruct.

    With ``quantize`` every analog VMM also sees DAC/ADC rounding of its
    input and output vectors.
    """
    out = w.copy()
    rng = np.random.default_rng(noise.seed)
    for name in sorted(out.tensors):
        if out.tags[name] not in tags:
            continue
        arr = out.tensors[name].data
        gp, gn, wm = map_weights(arr, cmap)
        gp, gn = inject_noise(gp, gn, noise, cmap, rng)
        out.tensors[name].data = reconstruct_weights(gp, gn, wm, cmap)
    out.vmm_quant = (cmap.dac_bits, cmap.adc_bits) if quantize else None
    out.provenance = dict(out.provenance, hardware={"sigma": noise.sigma, "seed": noise.seed,
                                                    "quantized": quantize})
    return out


@dataclass
class DegradationReport:
    clean_ess: float
    degraded_ess: float

    @property
    def ess_drop(self):
        return self.clean_ess - self.degraded_ess


def degraded_inference(w: FlowWeights, action, noise: NoiseModel = NoiseModel(),
                       cmap: ConductanceMap = ConductanceMap(), quantize: bool = True,
                       n_eval: int = 4096, eval_seed: int = 12345, tags=(ANALOG,)):
    """Noisy deployment of ``w`` plus clean-vs-degraded ESS on a fixed batch."""
    deg = degrade_weights(w, noise, cmap, tags=tags, quantize=quantize)
    rep = DegradationReport(evaluate_ess(w, action, n_eval, eval_seed),
                            evaluate_ess(deg, action, n_eval, eval_seed))
    return deg, rep


@dataclass
class RecoveryReport:
    clean_ess: float | None
    degraded_ess: float
    recovered_ess: float


def lora_recovery(degraded: FlowWeights, action, hyper: TrainHyper | None = None,
                  clean_ess: float | None = None, n_eval: int = 4096, eval_seed: int = 12345):
    """Repair a noisy deployment by LoRA-only fine-tuning on the digital side.

    The noisy analog tensors stay frozen; returns ``(recovered, report)``.
    """
    hyper = hyper or TrainHyper(steps=300)
    before = evaluate_ess(degraded, action, n_eval, eval_seed)
    rec, _ = finetune_lora(degraded, action, hyper)
    after = evaluate_ess(rec, action, n_eval, eval_seed)
    return rec, RecoveryReport(clean_ess, before, after)


# -------------------------------------------------------------- cost model

def layer_profiles(config: MixerConfig) -> list[LayerProfile]:
    """Per-layer MAC partition for one sample through all ``T`` layers."""
    T, C, s = config.timesteps, config.channels, config.n_patches
    H, W = config.lattice
    # vectors per analog layer per timestep
    count = {"embed": s, "out": s, "reg": H * W}
    profiles = []
    for name, n_in, n_out, adapted in _layer_shapes(config):
        if name.startswith("block") and name.endswith(("tok1", "tok2")):
            k = C
        elif name.startswith("block"):
            k = s
        else:
            k = count[name]
        if name.endswith(("tok1", "ch1")):
            b = name.split(".")[0]
            profiles.append(LayerProfile(f"{b}.bn{1 if name.endswith('tok1') else 2}",
                                         0, T * s * C))
        lora = 0
        if adapted:
            r = config.rank_for(n_in, n_out)
            lora = T * k * r * (n_in + n_out)
        profiles.append(LayerProfile(name, T * k * n_in * n_out, lora, [(n_in, n_out, T * k)]))
    profiles.append(LayerProfile("coupling_update", 0, T * H * W // 2))
    return profiles


def vmm_energy(n_in: int, n_out: int, c: CostConstants = CostConstants()) -> float:
    """Energy of one ``n_in -> n_out`` VMM tiled over ``array_size`` squares."""
    a = c.array_size
    e = 0.0
    for i0 in range(0, n_in, a):
        ti = min(a, n_in - i0)
        for j0 in range(0, n_out, a):
            tj = min(a, n_out - j0)
            e += ti * tj * c.e_cell + ti * c.e_dac + tj * (c.e_tia + c.e_adc)
    return e


def _layer_energy(p: LayerProfile, c: CostConstants):
    analog = sum(cnt * vmm_energy(i, o, c) for i, o, cnt in p.vmms)
    hybrid = analog + p.digital_macs * c.e_digital_mac
    digital = (p.analog_macs + p.digital_macs) * c.e_digital_mac
    return hybrid, digital


def _layer_time(p: LayerProfile, c: CostConstants):
    ta = p.analog_macs * c.flops_per_mac / (c.analog_tflops_mm2 * 1e12 * c.area_mm2)
    td = p.digital_macs * c.flops_per_mac / (c.digital_tflops_mm2 * 1e12 * c.area_mm2)
    dig = (p.analog_macs + p.digital_macs) * c.flops_per_mac / (
        c.digital_tflops_mm2 * 1e12 * c.area_mm2)
    return max(ta, td), dig


def energy_report(profiles, c: CostConstants = CostConstants()) -> dict:
    hybrid = digital = 0.0
    macs = 0
    for p in profiles:
        h, d = _layer_energy(p, c)
        hybrid += h
        digital += d
        macs += p.analog_macs + p.digital_macs
    return {
        "hybrid_J": hybrid,
        "digital_J": digital,
        "efficiency_ratio": digital / hybrid if hybrid > 0 else None,
        "macs_per_joule": macs / hybrid if hybrid > 0 else None,
        "digital_macs_per_joule": macs / digital if digital > 0 else None,
    }


def latency_report(profiles, c: CostConstants = CostConstants()) -> dict:
    hybrid = digital = 0.0
    for p in profiles:
        h, d = _layer_time(p, c)
        hybrid += h
        digital += d
    return {"hybrid_s": hybrid, "digital_s": digital,
            "speedup": digital / hybrid if hybrid > 0 else None}


def hardware_report(profiles, c: CostConstants = CostConstants(), extra: dict | None = None) -> dict:
    """JSON-ready report with per-layer rows and totals."""
    rows = []
    for p in profiles:
        eh, ed = _layer_energy(p, c)
        th, td = _layer_time(p, c)
        rows.append({"layer": p.layer, "analog_macs": p.analog_macs,
                     "digital_macs": p.digital_macs, "hybrid_J": eh, "digital_J": ed,
                     "hybrid_s": th, "digital_s": td})
    en, la = energy_report(profiles, c), latency_report(profiles, c)
    total_a = sum(p.analog_macs for p in profiles)
    total = total_a + sum(p.digital_macs for p in profiles)
    rep = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "per_layer": rows,
        "totals": {
            "hybrid_J": en["hybrid_J"], "digital_J": en["digital_J"],
            "hybrid_s": la["hybrid_s"], "digital_s": la["digital_s"],
            "speedup": la["speedup"], "macs_per_joule": en["macs_per_joule"],
            "energy_efficiency_ratio": en["efficiency_ratio"],
            "analog_mac_fraction": total_a / total if total else None,
        },
        "constants": asdict(c),
    }
    if extra:
        rep.update(extra)
    return rep


def default_sweep_config(L: int) -> MixerConfig:
    """Config family whose layers widen with the lattice (pushes analog share up)."""
    s = (L // 2) ** 2
    C = 8 * L
    return MixerConfig(lattice=(L, L), patch_size=2, channels=C, blocks=2,
                       token_hidden=4 * s, channel_hidden=4 * C, timesteps=8, lora_rank=1)


def scaling_sweep(sizes, config_for=default_sweep_config, c: CostConstants = CostConstants(),
                  check_monotone: bool = True) -> list[dict]:
    """Analog MAC share, speedup and energy ratio per lattice size."""
    rows = []
    for L in sizes:
        prof = layer_profiles(config_for(L))
        a = sum(p.analog_macs for p in prof)
        d = sum(p.digital_macs for p in prof)
        en, la = energy_report(prof, c), latency_report(prof, c)
        rows.append({"L": L, "analog_macs": a, "digital_macs": d,
                     "analog_mac_fraction": a / (a + d), "speedup": la["speedup"],
                     "energy_ratio": en["efficiency_ratio"],
                     "hybrid_J": en["hybrid_J"], "digital_J": en["digital_J"]})
    if check_monotone and len(rows) > 1:
        sp = [r["speedup"] for r in rows]
        if any(b < a for a, b in zip(sp, sp[1:])):
            raise AssertionError(f"speedup not nondecreasing in lattice size: {sp}")
    return rows
