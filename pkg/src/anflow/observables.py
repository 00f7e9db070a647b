"""Estimators over ensembles: magnetisation, correlators, autocorrelation,
correlation length, mass gap, chiral condensate and bootstrap errors.

Functions taking ``configs`` accept an :class:`~anflow.samplers.Ensemble`
or an array of shape ``(n, L0, L1)``. Axis 0 of a configuration is
treated as Euclidean time.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import curve_fit

from .errors import (DegenerateSeriesError, FitDomainError, InsufficientDataError,
                     InvalidInputError, UndefinedLengthError)

__all__ = [
    "magnetization",
    "autocorrelation",
    "tau_int",
    "connected_two_point",
    "zero_momentum_correlator",
    "susceptibility",
    "ising_energy",
    "inverse_correlation_length",
    "correlation_length",
    "mass_gap_fit",
    "chiral_condensate",
    "bootstrap_error",
    "OBSERVABLES",
    "measure",
]

EULER_GAMMA = np.euler_gamma


def _configs(configs) -> np.ndarray:
    c = getattr(configs, "configs", configs)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 3:
        raise InvalidInputError(f"expected configurations of shape (n, L0, L1), got {c.shape}")
    if len(c) == 0:
        raise InsufficientDataError("empty ensemble")
    return c


def magnetization(configs):
    """Per-configuration volume average of ``phi`` plus chain means ``M`` and ``|M|``."""
    m = _configs(configs).mean(axis=(1, 2))
    return m, float(m.mean()), float(np.abs(m).mean())


# ------------------------------------------------------------ autocorrelation

def autocorrelation(series, t_max: int | None = None) -> np.ndarray:
    """Autocovariance ``C(t)`` for ``t = 0..t_max``.

    Each lag uses its own window means (over the first and the last
    ``N - t`` entries). Divide by ``C(0)`` for the normalised function.
    """
    y = np.asarray(series, dtype=np.float64)
    if y.ndim != 1:
        raise InvalidInputError("series must be one-dimensional")
    n = len(y)
    if n < 2:
        raise InsufficientDataError("need at least two samples")
    t_max = n - 1 if t_max is None else int(t_max)
    if not 0 <= t_max < n:
        raise InvalidInputError(f"t_max must lie in [0, {n - 1}]")
    # raw lagged products via FFT, window sums via cumulative sums
    m = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(y, m)
    raw = np.fft.irfft(f * np.conj(f), m)[: t_max + 1]
    cs = np.concatenate([[0.0], np.cumsum(y)])
    t = np.arange(t_max + 1)
    cnt = n - t
    head = cs[n - t]            # sum of y[0 : n-t]
    tail = cs[n] - cs[t]        # sum of y[t : n]
    cov = raw / cnt - (head / cnt) * (tail / cnt)
    if np.ptp(y) == 0 or not cov[0] > 0:
        raise DegenerateSeriesError("series has zero variance")
    return cov


def tau_int(series, window: int | None = None) -> float:
    """Integrated autocorrelation time ``1/2 + sum_{t=1}^{W} rho(t)``.

    Without ``window`` the smallest ``W`` with ``W >= 5 tau(W)`` is used,
    capped at ``N/10``.
    """
    y = np.asarray(series, dtype=np.float64)
    n = len(y)
    cap = max(1, n // 10)
    if window is not None:
        c = autocorrelation(y, min(int(window), n - 1))
        return float(0.5 + c[1:].sum() / c[0])
    c = autocorrelation(y, min(cap, n - 1))
    rho = c / c[0]
    tau = 0.5 + np.cumsum(rho[1:])
    for w in range(1, len(tau) + 1):
        if w >= 5 * tau[w - 1]:
            return float(tau[w - 1])
    return float(tau[-1])


# ---------------------------------------------------------------- correlators

def connected_two_point(configs) -> np.ndarray:
    """Translation-averaged connected correlator.

    ``C(x) = (1/V) sum_y (<phi(y) phi(y+x)> - <phi(y)><phi(y+x)>)`` with
    per-site ensemble means ``<phi(y)>``.
    """
    c = _configs(configs)
    n, L0, L1 = c.shape
    V = L0 * L1
    f = np.fft.rfft2(c)
    fm = np.fft.rfft2(c.mean(axis=0))
    power = (f * np.conj(f)).mean(axis=0) - fm * np.conj(fm)
    return np.fft.irfft2(power, s=(L0, L1)) / V


def zero_momentum_correlator(configs, axis: int = 0) -> np.ndarray:
    """``G(t) = (1/L_s) sum_{x_s} C(t, x_s)`` with ``t`` along ``axis``."""
    C = configs if isinstance(configs, np.ndarray) and configs.ndim == 2 else connected_two_point(configs)
    return C.mean(axis=1) if axis == 0 else C.mean(axis=0)


def susceptibility(configs) -> float:
    """Two-point susceptibility ``sum_x C(x)``."""
    return float(connected_two_point(configs).sum())


def ising_energy(configs) -> float:
    """Nearest-neighbour correlator averaged over the two lattice directions."""
    C = connected_two_point(configs)
    return float(0.5 * (C[1 % C.shape[0], 0] + C[0, 1 % C.shape[1]]))


def inverse_correlation_length(c, periodic: bool = True):
    """Average of ``arcosh((c[x-1] + c[x+1]) / (2 c[x]))`` over ``x = 1..L-1``.

    ``c`` holds ``c[0..L-1]`` of a periodic correlator (``periodic=True``,
    ``c[L] = c[0]`` is appended) or ``c[0..L]`` explicitly. Terms whose
    argument is undefined or below 1 are skipped. Returns
    ``(1/xi, n_skipped, n_terms)``.
    """
    c = np.asarray(c, dtype=np.float64)
    if periodic:
        c = np.append(c, c[0])
    L = len(c) - 1
    if L < 2:
        raise UndefinedLengthError("correlator too short for a correlation length")
    vals = []
    skipped = 0
    for x in range(1, L):
        if c[x] <= 0:
            skipped += 1
            continue
        arg = (c[x - 1] + c[x + 1]) / (2 * c[x])
        if not np.isfinite(arg) or arg < 1:
            skipped += 1
            continue
        vals.append(np.arccosh(arg))
    if not vals:
        raise UndefinedLengthError("no lattice separation gave a valid arcosh argument")
    return float(np.mean(vals)), skipped, L - 1


def correlation_length(configs) -> float:
    """Correlation length from the zero-momentum correlator.

    On square lattices the correlators along both axes are averaged.
    """
    C = connected_two_point(configs)
    g = zero_momentum_correlator(C, 0)
    if C.shape[0] == C.shape[1]:
        g = 0.5 * (g + zero_momentum_correlator(C, 1))
    inv, _, _ = inverse_correlation_length(g, periodic=True)
    if inv == 0:
        raise UndefinedLengthError("infinite correlation length")
    return 1.0 / inv


# ------------------------------------------------------------------- mass gap

def mass_gap_fit(G, window: tuple[int, int] | None = None, form: str = "exp"):
    """Fit ``G(t)`` to ``A exp(-m t)`` (log-linear) or ``A cosh(m (t - L/2))``.

    The default window is ``[1, max(3, L//4)]`` clipped to ``L//2``. Returns
    ``(m, stderr)``.
    """
    G = np.asarray(G, dtype=np.float64)
    L = len(G)
    if window is None:
        window = (1, min(max(3, L // 4), max(L // 2, 1)))
    t0, t1 = int(window[0]), int(window[1])
    if t0 < 0 or t1 >= L or t1 < t0:
        raise FitDomainError(f"window {window} outside 0..{L - 1}")
    t = np.arange(t0, t1 + 1)
    y = G[t0: t1 + 1]
    if form == "exp":
        ok = y > 0
        if ok.sum() < 3:
            raise FitDomainError("fewer than 3 positive correlator values in the fit window")
        t, ly = t[ok], np.log(y[ok])
        tb = t.mean()
        sxx = float(((t - tb) ** 2).sum())
        slope = float(((t - tb) * (ly - ly.mean())).sum() / sxx)
        resid = ly - (ly.mean() + slope * (t - tb))
        dof = len(t) - 2
        err = float(np.sqrt((resid**2).sum() / dof / sxx)) if dof > 0 else 0.0
        return -slope, err
    if form == "cosh":
        if len(t) < 3:
            raise FitDomainError("fewer than 3 points in the fit window")
        if np.any(y <= 0):
            raise FitDomainError("non-positive correlator values in the fit window")
        f = lambda tt, a, m: a * np.cosh(m * (tt - L / 2))
        m0 = max(-np.log(y[1] / y[0]), 1e-3) if y[0] > 0 and y[1] > 0 else 0.5
        try:
            (a, m), cov = curve_fit(f, t, y, p0=(y[0] / np.cosh(m0 * (t[0] - L / 2)), m0))
        except RuntimeError as e:
            raise FitDomainError(f"cosh fit failed: {e}") from None
        err = float(np.sqrt(cov[1, 1])) if np.all(np.isfinite(cov)) else 0.0
        return float(abs(m)), err
    raise InvalidInputError(f"unknown fit form {form!r}")


# ------------------------------------------------------------ chiral condensate

def chiral_condensate(configs, g: float = 1.0, o_coeff: float = 10.0) -> float:
    """``<bar psi psi> = -(e^gamma / (2 pi^{3/2})) g (o_coeff / g) <cos(2 sqrt(pi) phi)>``.

    The coefficient ``o_coeff / g`` is kept explicit; with the default it
    reduces to ``-(e^gamma / (2 pi^{3/2})) * 10 * <cos(...)>``.
    """
    if g == 0:
        raise InvalidInputError("coupling g must be nonzero")
    c = _configs(configs)
    pref = -np.exp(EULER_GAMMA) / (2 * np.pi**1.5)
    return float(pref * g * (o_coeff / g) * np.cos(2 * np.sqrt(np.pi) * c).mean())


# ------------------------------------------------------------------ bootstrap

def bootstrap_error(values, estimator=np.mean, resamples: int = 1000, seed=0,
                    block: int = 1):
    """Bootstrap ``(estimate, standard error)`` of ``estimator`` over axis 0.

    ``values`` may be a 1-D series or an array of configurations; the
    estimator receives a resampled array of the same kind. ``block > 1``
    resamples contiguous blocks, for autocorrelated chains.
    """
    v = np.asarray(getattr(values, "configs", values))
    n = len(v)
    if n < 10:
        raise InsufficientDataError(f"bootstrap needs at least 10 samples, got {n}")
    if resamples < 2 or block < 1:
        raise InvalidInputError("resamples must be >= 2 and block >= 1")
    rng = np.random.default_rng(seed)
    est = float(estimator(v))
    nb = max(1, n // block)
    reps = np.empty(resamples)
    for k in range(resamples):
        if block == 1:
            idx = rng.integers(0, n, n)
        else:
            starts = rng.integers(0, n - block + 1, nb)
            idx = (starts[:, None] + np.arange(block)).ravel()
        reps[k] = estimator(v[idx])
    return est, float(reps.std(ddof=1))


def _mass_gap(c):
    return mass_gap_fit(zero_momentum_correlator(c))[0]


OBSERVABLES = {
    "magnetization": lambda c: magnetization(c)[1],
    "abs_magnetization": lambda c: magnetization(c)[2],
    "susceptibility": susceptibility,
    "ising_energy": ising_energy,
    "correlation_length": correlation_length,
    "mass_gap": _mass_gap,
    "chiral_condensate": chiral_condensate,
}


def measure(configs, names=None, resamples: int = 1000, seed=0, block: int = 1):
    """Evaluate named observables with bootstrap errors.

    Returns rows ``(name, value, error)``. ``tau_int`` (of the
    magnetisation series) has no error estimate and reports 0. Ensembles
    with fewer than 10 configurations get error 0 for a single
    configuration and NaN otherwise.
    """
    c = _configs(configs)
    names = list(names or ["magnetization", "susceptibility", "ising_energy",
                           "correlation_length"])
    unknown = [nm for nm in names if nm != "tau_int" and nm not in OBSERVABLES]
    if unknown:
        raise InvalidInputError(f"unknown observable {unknown[0]!r}")
    rows = []
    for name in names:
        if name == "tau_int":
            rows.append((name, tau_int(magnetization(c)[0]), 0.0))
        elif len(c) < 10:
            rows.append((name, float(OBSERVABLES[name](c)), 0.0 if len(c) == 1 else float("nan")))
        else:
            rows.append((name, *bootstrap_error(c, OBSERVABLES[name], resamples, seed, block)))
    return rows
