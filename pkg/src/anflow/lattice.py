"""Periodic 2-D lattices, field configurations, masks and lattice actions.

Field arrays are ``float64`` with the two lattice axes last, so every action
also accepts a batch of shape ``(..., L0, L1)`` and returns one value per
configuration. Sites are ordered row-major over ``(dim0, dim1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError

__all__ = [
    "LatticeGeometry",
    "FieldConfiguration",
    "Phi4Params",
    "GrapheneParams",
    "Mask",
    "Phi4Action",
    "GrapheneAction",
    "GaussianAction",
    "make_action",
    "phi4_action",
    "graphene_action",
    "action_gradient",
    "checkerboard_mask",
    "split_by_mask",
    "translate",
]


@dataclass(frozen=True)
class LatticeGeometry:
    dims: tuple[int, int]
    spacing: float = 1.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 2:
            raise InvalidInputError(f"lattice must be 2-D, got dims={dims}")
        if any(d < 1 for d in dims):
            raise InvalidInputError(f"every lattice extent must be >= 1, got {dims}")
        if self.spacing != 1.0:
            raise InvalidInputError("lattice spacing is fixed to 1")
        object.__setattr__(self, "dims", dims)

    @property
    def volume(self) -> int:
        return self.dims[0] * self.dims[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dims


@dataclass(frozen=True)
class FieldConfiguration:
    """Real field values on a periodic lattice (immutable)."""

    geometry: LatticeGeometry
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.size != self.geometry.volume:
            raise InvalidInputError(
                f"expected {self.geometry.volume} values, got {v.size}")
        v = v.reshape(self.geometry.dims)
        _check_finite(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, arr) -> "FieldConfiguration":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(LatticeGeometry(arr.shape), arr)

    def __neg__(self):
        return FieldConfiguration(self.geometry, -self.values)


@dataclass(frozen=True)
class Phi4Params:
    m2: float = -4.0
    lam: float = 5.0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInputError("phi^4 coupling lambda must be > 0")


@dataclass(frozen=True)
class GrapheneParams:
    g: float = 1.0
    u: float = 0.1
    mass_sign: int = 1

    def __post_init__(self):
        if not self.g > 0:
            raise InvalidInputError("graphene coupling g must be > 0")
        if self.mass_sign not in (1, -1):
            raise InvalidInputError("mass_sign must be +1 or -1")


@dataclass(frozen=True)
class Mask:
    geometry: LatticeGeometry
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.float64).reshape(self.geometry.dims)
        if not np.all((b == 0) | (b == 1)):
            raise InvalidInputError("mask bits must be 0 or 1")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.bits


def _values(cfg) -> np.ndarray:
    if isinstance(cfg, FieldConfiguration):
        return cfg.values
    return np.asarray(cfg, dtype=np.float64)


def _check_finite(v):
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("field contains non-finite values")


def _laplacian_term(phi):
    # sum over mu of 2 phi(n) - phi(n+mu) - phi(n-mu)
    out = np.zeros_like(phi)
    for ax in (-2, -1):
        out += 2.0 * phi - np.roll(phi, -1, axis=ax) - np.roll(phi, 1, axis=ax)
    return out


class Phi4Action:
    """Lattice phi^4 action ``sum_n phi(-lap phi) + m2 phi^2 + lam phi^4``."""

    kind = "phi4"

    def __init__(self, m2: float = -4.0, lam: float = 5.0):
        self.params = Phi4Params(float(m2), float(lam))

    @property
    def m2(self):
        return self.params.m2

    @property
    def lam(self):
        return self.params.lam

    def __call__(self, phi):
        phi = _values(phi)
        _check_finite(phi)
        p2 = phi * phi  # products rather than pow keep S(-phi) == S(phi) bitwise
        dens = phi * _laplacian_term(phi) + self.m2 * p2 + self.lam * (p2 * p2)
        return dens.sum(axis=(-2, -1))

    def grad(self, phi):
        phi = _values(phi)
        _check_finite(phi)
        return 2.0 * _laplacian_term(phi) + 2.0 * self.m2 * phi + 4.0 * self.lam * (phi * phi * phi)

    def params_dict(self):
        return {"m2": self.m2, "lambda": self.lam}

    def __repr__(self):
        return f"Phi4Action(m2={self.m2}, lam={self.lam})"


class GrapheneAction:
    """Bosonized graphene-wire action on an ``L_tau x L_x`` lattice.

    ``S = sum ½(d_tau phi)² + ½(d_x phi)² + mass_sign (g phi)²/(2 pi) - u cos(2 sqrt(pi) phi)``
    with forward periodic differences. ``mass_sign=-1`` reproduces the
    printed (unbounded) sign and is only useful for fidelity experiments.
    """

    kind = "graphene"

    def __init__(self, g: float = 1.0, u: float = 0.1, mass_sign: int = 1):
        self.params = GrapheneParams(float(g), float(u), int(mass_sign))

    @property
    def g(self):
        return self.params.g

    @property
    def u(self):
        return self.params.u

    @property
    def mass_sign(self):
        return self.params.mass_sign

    def __call__(self, phi):
        phi = _values(phi)
        _check_finite(phi)
        kin = 0.0
        for ax in (-2, -1):
            d = np.roll(phi, -1, axis=ax) - phi
            kin = kin + 0.5 * d**2
        dens = (kin + self.mass_sign * (self.g * phi) ** 2 / (2 * np.pi)
                - self.u * np.cos(2 * np.sqrt(np.pi) * phi))
        return dens.sum(axis=(-2, -1))

    def grad(self, phi):
        phi = _values(phi)
        _check_finite(phi)
        # d/dphi of ½ sum (phi(n+mu) - phi(n))^2 is the lattice -laplacian
        kin = _laplacian_term(phi)
        c = 2 * np.sqrt(np.pi)
        return (kin + self.mass_sign * self.g**2 * phi / np.pi
                + self.u * c * np.sin(c * phi))

    def params_dict(self):
        return {"g": self.g, "u": self.u, "mass_sign": self.mass_sign}

    def __repr__(self):
        return f"GrapheneAction(g={self.g}, u={self.u}, mass_sign={self.mass_sign})"


class GaussianAction:
    """Free test action ``½ sum phi²`` (standard-normal target)."""

    kind = "gaussian"

    def __call__(self, phi):
        phi = _values(phi)
        _check_finite(phi)
        return 0.5 * (phi**2).sum(axis=(-2, -1))

    def grad(self, phi):
        phi = _values(phi)
        _check_finite(phi)
        return phi.copy()

    def params_dict(self):
        return {}


def make_action(kind: str, params: dict | None = None):
    """Build an action from a selector string and a parameter mapping."""
    params = dict(params or {})
    if kind == "phi4":
        return Phi4Action(params.get("m2", -4.0), params.get("lambda", params.get("lam", 5.0)))
    if kind == "graphene":
        return GrapheneAction(params.get("g", 1.0), params.get("u", 0.1),
                              params.get("mass_sign", 1))
    if kind == "gaussian":
        return GaussianAction()
    raise ConfigError(f"unknown action selector {kind!r}")


def phi4_action(cfg, p: Phi4Params) -> float:
    return float(Phi4Action(p.m2, p.lam)(cfg))


def graphene_action(cfg, p: GrapheneParams) -> float:
    return float(GrapheneAction(p.g, p.u, p.mass_sign)(cfg))


def action_gradient(cfg, action, params=None):
    """Per-site dS/dphi.

    ``action`` is either an action object or a selector string (``"phi4"``,
    ``"graphene"``, ``"gaussian"``) combined with ``params``.
    """
    if isinstance(action, str):
        action = make_action(action, params)
    elif isinstance(action, Phi4Params):
        action = Phi4Action(action.m2, action.lam)
    elif isinstance(action, GrapheneParams):
        action = GrapheneAction(action.g, action.u, action.mass_sign)
    if not hasattr(action, "grad"):
        raise ConfigError(f"unsupported action {action!r}")
    g = action.grad(cfg)
    if isinstance(cfg, FieldConfiguration):
        return FieldConfiguration(cfg.geometry, g)
    return g


def checkerboard_mask(geometry: LatticeGeometry | Sequence[int], t: int) -> Mask:
    """Parity mask for coupling layer ``t``: sites with even ``i+j`` carry ``t mod 2``."""
    if not isinstance(geometry, LatticeGeometry):
        geometry = LatticeGeometry(tuple(geometry))
    if t < 0:
        raise InvalidInputError("timestep must be nonnegative")
    i, j = np.indices(geometry.dims)
    par = t % 2
    bits = np.where((i + j) % 2 == 0, par, 1 - par)
    return Mask(geometry, bits)


def split_by_mask(cfg, mask: Mask):
    """Return ``(x * M, x * (1 - M))``."""
    v = _values(cfg)
    if v.shape[-2:] != mask.geometry.dims:
        raise InvalidInputError(
            f"geometry mismatch: field {v.shape[-2:]} vs mask {mask.geometry.dims}")
    xa = v * mask.bits
    xb = v * mask.complement
    if isinstance(cfg, FieldConfiguration):
        return FieldConfiguration(cfg.geometry, xa), FieldConfiguration(cfg.geometry, xb)
    return xa, xb


def translate(cfg, offset: Sequence[int]):
    """Cyclic shift so that ``out[n] = cfg[n - offset]``."""
    v = _values(cfg)
    out = np.roll(v, shift=tuple(int(o) for o in offset), axis=(-2, -1))
    if isinstance(cfg, FieldConfiguration):
        return FieldConfiguration(cfg.geometry, out)
    return out
