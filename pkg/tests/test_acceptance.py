"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Trained flows are shared through module-scoped fixtures so every criterion
that needs the 4x4 flow reuses the same training run. The per-criterion
summary is printed at the end of the session by ``conftest.py``.
"""
import math
import time

import numpy as np
import pytest
from scipy import integrate, stats

from anflow.flow import ANALOG, MixerConfig, count_params_and_macs, flow_sample, init_weights
from anflow.hardware import (LayerProfile, NoiseModel, degrade_weights, energy_report,
                             latency_report, lora_recovery, scaling_sweep, vmm_energy)
from anflow.io import (decode_checkpoint, decode_ensemble, encode_checkpoint, encode_ensemble)
from anflow.lattice import GrapheneAction, Phi4Action
from anflow.observables import (OBSERVABLES, bootstrap_error, magnetization, mass_gap_fit,
                                susceptibility, tau_int, zero_momentum_correlator,
                                connected_two_point)
from anflow.samplers import HmcParams, hmc_chain, leapfrog, propose_and_sample
from anflow.training import TrainHyper, evaluate_ess, finetune_lora, train

pytestmark = pytest.mark.acceptance

# training budgets (single CPU core); batch 32 with a cosine schedule
PHI4_HYPER = dict(batch_size=32, lr=1e-2, lr_floor=0.05, eval_every=500, eval_batch=4096)
STEPS_4 = 6000
STEPS_6 = 6000
STEPS_GRAPHENE = 3000
STEPS_FT = 1000
ESS_N = 16384


def combined_sigma(*errs):
    return math.sqrt(sum(e * e for e in errs))


def phi4_config(L):
    return MixerConfig(lattice=(L, L))


# ------------------------------------------------------------------ fixtures

@pytest.fixture(scope="module")
def flow4():
    """4x4, lambda = 5 flow; returns (weights, training seconds)."""
    t0 = time.perf_counter()
    w, _ = train(init_weights(phi4_config(4), seed=1), Phi4Action(-4, 5),
                 TrainHyper(steps=STEPS_4, seed=0, **PHI4_HYPER))
    return w, time.perf_counter() - t0


@pytest.fixture(scope="module")
def flow4_ft(flow4):
    w, _ = finetune_lora(flow4[0], Phi4Action(-4, 6),
                         TrainHyper(steps=STEPS_FT, seed=2, **PHI4_HYPER))
    return w


@pytest.fixture(scope="module")
def flow6():
    w, _ = train(init_weights(phi4_config(6), seed=1), Phi4Action(-4, 5),
                 TrainHyper(steps=STEPS_6, seed=0, **PHI4_HYPER))
    return w


@pytest.fixture(scope="module")
def flow6_ft(flow6):
    w, _ = finetune_lora(flow6, Phi4Action(-4, 6), TrainHyper(steps=STEPS_FT, seed=2, **PHI4_HYPER))
    return w


# ------------------------------------------------------------------ criterion 1

def _fd_logdet(w, x, h=1e-5):
    from anflow.flow import push_forward
    V = x.size
    J = np.zeros((V, V))
    for k in range(V):
        e = np.zeros(V)
        e[k] = h
        p = push_forward(w, (x.ravel() + e).reshape(1, *x.shape))[0].data.ravel()
        m = push_forward(w, (x.ravel() - e).reshape(1, *x.shape))[0].data.ravel()
        J[:, k] = (p - m) / (2 * h)
    return np.linalg.slogdet(J)[1]


def test_c1_exact_density_identity(criterion):
    t0 = time.perf_counter()
    cfg = MixerConfig(lattice=(2, 2), channels=8, token_hidden=4, channel_hidden=16, timesteps=4)
    worst = 0.0
    for k in range(10):
        w = init_weights(cfg, seed=k, out_scale=0.5)
        rng = np.random.default_rng(100 + k)
        for name in w.names():
            if name.endswith("lora.B"):
                w.tensors[name].data = rng.normal(0, 0.3, w.tensors[name].shape)
        if k % 2:
            # half the draws are (briefly) trained weights
            w, _ = train(w, Phi4Action(-4, 5), TrainHyper(steps=20, batch_size=16, lr=3e-3,
                                                          eval_every=20, eval_batch=256, seed=k))
        w.set_mode("inference")
        rec = flow_sample(w, 1, k)[0]
        expect = rec.log_r - _fd_logdet(w, rec.x)
        worst = max(worst, abs(rec.log_q - expect) / abs(expect))
    dt = time.perf_counter() - t0
    ok = criterion(1, worst < 1e-6 and dt < 60, f"max rel err {worst:.2e} over 10 draws, {dt:.0f}s")
    assert ok


# ------------------------------------------------------------------ criterion 2

def _moment_errors(x, k):
    """Mean of x**k and its autocorrelation-corrected standard error."""
    v = x**k
    tau = max(tau_int(v), 0.5)
    return v.mean(), v.std(ddof=1) * math.sqrt(2 * tau / len(v))


def test_c2_quadrature_oracle(criterion):
    t0 = time.perf_counter()
    A = Phi4Action(-4, 5)
    dens = lambda p: math.exp(-float(A(np.array([[p]]))))
    Z = integrate.quad(dens, -np.inf, np.inf)[0]
    exact = {k: integrate.quad(lambda p: p**k * dens(p), -np.inf, np.inf)[0] / Z for k in (2, 4)}

    n = 100_000
    hmc = hmc_chain((1, 1), A, HmcParams(n_samples=n, burn_in=2000, thin=1, seed=4))
    cfg = MixerConfig(lattice=(1, 1), patch_size=1, channels=8, token_hidden=4,
                      channel_hidden=16, timesteps=2)
    w, _ = train(init_weights(cfg, seed=0), A, TrainHyper(steps=300, batch_size=256, lr=1e-2,
                                                          eval_every=300, seed=0))
    flow = propose_and_sample(w, A, n, seed=5)
    worst = 0.0
    parts = []
    for name, ens in (("hmc", hmc), ("flow", flow)):
        x = ens.configs.ravel()
        for k in (2, 4):
            m, e = _moment_errors(x, k)
            z = abs(m - exact[k]) / e
            worst = max(worst, z)
            parts.append(f"{name} <phi^{k}> {m:.4f}+-{e:.4f}")
    dt = time.perf_counter() - t0
    detail = (f"exact <phi^2> {exact[2]:.4f} <phi^4> {exact[4]:.4f}; " + ", ".join(parts)
              + f"; max {worst:.2f} sigma, {dt:.0f}s")
    assert criterion(2, worst < 3 and dt < 300, detail)


# ------------------------------------------------------------------ criterion 3

def test_c3_autocorrelation_reduction(flow4, criterion):
    w, t_train = flow4
    t0 = time.perf_counter()
    A = Phi4Action(-4, 5)
    # rare long rejection runs make tau_int noisy; 1e5 proposals is ~1000 tau
    flow = propose_and_sample(w, A, 100_000, seed=11)
    tau_f = tau_int(magnetization(flow.configs)[0])
    hmc = hmc_chain((4, 4), A, HmcParams(n_samples=50_000, burn_in=1000, thin=1, seed=11))
    tau_h = tau_int(magnetization(hmc.configs)[0])
    dt = t_train + time.perf_counter() - t0
    detail = (f"tau_int(M) flow {tau_f:.2f} (acceptance {flow.acceptance_rate:.2f}) vs HMC "
              f"{tau_h:.2f} (eps {hmc.meta['step_size']:.3f}, n_lf {hmc.meta['n_leapfrog']}), "
              f"{dt / 60:.1f} min incl. training")
    assert criterion(3, tau_f < tau_h and tau_f <= 3.0 and dt <= 1800, detail)


# ------------------------------------------------------------------ criterion 4

C4_OBS = ("ising_energy", "susceptibility", "correlation_length")


def _blocked_estimates(configs, seed):
    """Value and blocking-analysis bootstrap error of each observable.

    Blocks start at ``4 tau_int`` (of M and M**2, whichever is longer) and
    grow fourfold while at least 32 blocks remain; the largest error of the
    series is kept. Independence Metropolis has rare long stays on
    configurations the flow under-covers, so the error often keeps rising
    well beyond ``4 tau_int``.
    """
    m = magnetization(configs)[0]
    b = max(1, int(math.ceil(4 * max(tau_int(m), tau_int(m * m)))))
    blocks = []
    while len(configs) // b >= 32:
        blocks.append(b)
        b *= 4
    out = {}
    for name in C4_OBS:
        fits = [bootstrap_error(configs, OBSERVABLES[name], resamples=200, seed=seed, block=bb)
                for bb in blocks or [1]]
        out[name] = (fits[0][0], max(e for _, e in fits))
    return out


@pytest.mark.parametrize("L,lam", [(4, 5), (4, 6), (6, 5), (6, 6)])
def test_c4_observable_agreement(L, lam, request, criterion):
    w = {(4, 5): lambda: request.getfixturevalue("flow4")[0],
         (4, 6): lambda: request.getfixturevalue("flow4_ft"),
         (6, 5): lambda: request.getfixturevalue("flow6"),
         (6, 6): lambda: request.getfixturevalue("flow6_ft")}[(L, lam)]()
    A = Phi4Action(-4, lam)
    flow = propose_and_sample(w, A, 100_000, seed=21)
    hmc = hmc_chain((L, L), A, HmcParams(n_samples=100_000, burn_in=1000, thin=4, seed=21))
    ef = _blocked_estimates(flow.configs, 1)
    eh = _blocked_estimates(hmc.configs, 2)
    worst, parts = 0.0, []
    for name in C4_OBS:
        (vf, sf), (vh, sh) = ef[name], eh[name]
        z = abs(vf - vh) / combined_sigma(sf, sh)
        worst = max(worst, z)
        parts.append(f"{name} {vf:.4g}/{vh:.4g} ({z:.1f}s)")
    detail = f"{L}x{L} lambda={lam}: flow/HMC " + ", ".join(parts)
    assert criterion(4, worst < 3, detail)


# ------------------------------------------------------------------ criterion 5

def test_c5_error_scaling(criterion):
    A = Phi4Action(-4, 5)
    hmc = hmc_chain((4, 4), A, HmcParams(n_samples=4000 * 40, burn_in=1000, thin=40, seed=31))
    c = hmc.configs
    sizes = [250, 500, 1000, 2000, 4000]
    errs = []
    for N in sizes:
        # average over disjoint subsets to steady the small-N points
        e = [bootstrap_error(c[j: j + N], susceptibility, resamples=300, seed=j)[1]
             for j in range(0, len(c) - N + 1, N)]
        errs.append(np.mean(e))
    slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    detail = f"slope {slope:.3f} (errors {', '.join(f'{e:.3g}' for e in errs)})"
    assert criterion(5, abs(slope + 0.5) <= 0.1, detail)


# ------------------------------------------------------------------ criterion 6

def test_c6_lora_economy(flow4, flow4_ft, criterion):
    fracs = {L: count_params_and_macs(phi4_config(L))["digital_fraction"] for L in (4, 6)}
    A6 = Phi4Action(-4, 6)
    retrained, _ = train(init_weights(phi4_config(4), seed=1), A6,
                         TrainHyper(steps=STEPS_4, seed=0, **PHI4_HYPER))
    ess_ft = evaluate_ess(flow4_ft, A6, ESS_N, seed=77)
    ess_re = evaluate_ess(retrained, A6, ESS_N, seed=77)
    base = flow4[0]
    frozen = all(np.array_equal(base[k].data, flow4_ft[k].data) for k in base.names(ANALOG))
    ok = max(fracs.values()) < 0.08 and ess_ft >= ess_re - 0.1 and frozen
    detail = (f"digital fraction {', '.join(f'{L}x{L} {f:.4f}' for L, f in fracs.items())}; "
              f"ESS finetune {ess_ft:.3f} vs retrain {ess_re:.3f}; analog frozen {frozen}")
    assert criterion(6, ok, detail)


# ------------------------------------------------------------------ criterion 7

def _gap_with_error(configs, block, seed):
    gap = lambda c: mass_gap_fit(zero_momentum_correlator(connected_two_point(c)))[0]
    return bootstrap_error(configs, gap, resamples=400, seed=seed, block=block)


def test_c7_graphene(criterion):
    A = GrapheneAction()
    L = 6
    w, _ = train(init_weights(MixerConfig(lattice=(L, L)), seed=3), A,
                 TrainHyper(steps=STEPS_GRAPHENE, seed=3, **PHI4_HYPER))
    n = 2000
    # thin both chains to near-independence before comparing distributions
    raw = propose_and_sample(w, A, 40 * n, seed=41)
    tf = tau_int(raw.configs.mean(axis=(1, 2)))
    step_f = max(1, int(math.ceil(2 * tf)))
    flow = raw.configs[::step_f][:n]
    probe = hmc_chain((L, L), A, HmcParams(n_samples=4000, burn_in=1000, thin=1, seed=42))
    th = tau_int(probe.configs.mean(axis=(1, 2)))
    step_h = max(1, int(math.ceil(2 * th)))
    hmc = hmc_chain((L, L), A, HmcParams(n_samples=n * step_h, burn_in=1000, thin=step_h,
                                         seed=43)).configs
    ks = stats.ks_2samp(flow.mean(axis=(1, 2)), hmc.mean(axis=(1, 2)))
    mf, sf = _gap_with_error(flow, 1, 1)
    mh, sh = _gap_with_error(hmc, 1, 2)
    z = abs(mf - mh) / combined_sigma(sf, sh)
    ok = len(flow) == n and ks.pvalue > 0.01 and z < 3
    detail = (f"KS p {ks.pvalue:.3f} on {len(flow)}/{len(hmc)} configs (thin {step_f}/{step_h}); "
              f"mass gap flow {mf:.3f}+-{sf:.3f} HMC {mh:.3f}+-{sh:.3f} ({z:.1f} sigma)")
    assert criterion(7, ok, detail)


# ------------------------------------------------------------------ criterion 8

def test_c8_hardware_goldens(criterion):
    tile = LayerProfile("tile", 1024, 0, [(32, 32, 1)])
    e_analog = vmm_energy(32, 32) * 1e12
    e_digital = energy_report([tile])["digital_J"] * 1e12
    ceiling = latency_report([tile])["speedup"]
    sp = [r["speedup"] for r in scaling_sweep([4, 8, 12, 16], check_monotone=False)]
    ok = (f"{e_analog:.4g}" == "466.9" and f"{e_digital:.4g}" == "562.2"
          and f"{ceiling:.4g}" == "40.86" and all(b > a for a, b in zip(sp, sp[1:])))
    detail = (f"analog {e_analog:.4g} pJ, digital {e_digital:.4g} pJ, ceiling {ceiling:.4g}, "
              f"sweep speedups {', '.join(f'{s:.2f}' for s in sp)}")
    assert criterion(8, ok, detail)


# ------------------------------------------------------------------ criterion 9

def test_c9_noise_recovery(flow4, criterion):
    w = flow4[0]
    A = Phi4Action(-4, 5)
    clean = evaluate_ess(w, A, ESS_N)
    ratios, parts = [], []
    for seed in range(5):
        deg = degrade_weights(w, NoiseModel(0.54, seed=seed))
        _, rr = lora_recovery(deg, A, TrainHyper(steps=300, seed=seed, **PHI4_HYPER),
                              clean_ess=clean, n_eval=ESS_N)
        ratios.append(rr.recovered_ess / clean)
        parts.append(f"{rr.degraded_ess:.3f}->{rr.recovered_ess:.3f}")
    med = float(np.median(ratios))
    detail = (f"clean ESS {clean:.3f}; degraded->recovered {', '.join(parts)}; "
              f"median ratio {med:.3f}")
    assert criterion(9, med >= 0.9, detail)


# ------------------------------------------------------------------ criterion 10

def test_c10_infrastructure(tmp_path, criterion):
    from test_autodiff import PRIMITIVES, away_from_zero, fd_check
    grad_worst = max(fd_check(f, *[away_from_zero(s) for s in shapes])
                     for f, shapes in PRIMITIVES.values())

    rng = np.random.default_rng(1)
    A = Phi4Action(-4, 5)
    phi, pi = rng.normal(size=(4, 4)) * 0.5, rng.normal(size=(4, 4))
    p1, q1 = leapfrog(phi, pi, 0.05, 20, A)
    p0, q0 = leapfrog(p1, -q1, 0.05, 20, A)
    rev = max(np.abs(p0 - phi).max(), np.abs(-q0 - pi).max())

    ens = hmc_chain((4, 4), A, HmcParams(n_samples=40, burn_in=10, thin=2, seed=3))
    b = encode_ensemble(ens)
    lftc = encode_ensemble(decode_ensemble(b)) == b and np.array_equal(
        decode_ensemble(b).configs, ens.configs)
    w = init_weights(MixerConfig(lattice=(4, 4)), seed=2)
    cb = encode_checkpoint(w)
    w2 = decode_checkpoint(cb)
    lftw = encode_checkpoint(w2) == cb and all(
        np.array_equal(w[k].data, w2[k].data) for k in w.names())

    import json
    from anflow.cli import main
    from test_cli import BASE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(BASE))
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        assert main(["train", "--config", str(cfg), "--out", str(d / "m.lftw")]) == 0
        assert main(["sample", "--ckpt", str(d / "m.lftw"), "--n", "25",
                     "--out", str(d / "s.lftc")]) == 0
        assert main(["hmc", "--config", str(cfg), "--n", "20", "--out", str(d / "h.lftc")]) == 0
        outs.append([(d / n).read_bytes() for n in ("m.lftw", "s.lftc", "h.lftc")])
    repro = outs[0] == outs[1]

    ok = grad_worst < 1e-5 and rev < 1e-10 and lftc and lftw and repro
    detail = (f"grad rel err {grad_worst:.1e}, leapfrog reversal {rev:.1e}, LFTC {lftc}, "
              f"LFTW {lftw}, CLI reproducible {repro}")
    assert criterion(10, ok, detail)
