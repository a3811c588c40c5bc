"""Periodic and random potentials in Pauli coordinates.

A potential value is a 2x2 real symmetric matrix written as
``v_am * sigma1 + v_sc * sigma3 + v_el * I``.  All fields are piecewise
constant on a breakpoint grid inside one unit cell, which keeps the
propagation path exact (matrix exponentials per segment).
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DiracLabError

SIGMA1 = np.array([[0.0, 1.0], [1.0, 0.0]])
SIGMA3 = np.array([[1.0, 0.0], [0.0, -1.0]])
ID2 = np.eye(2)

_HALF = 0.5
_BRK_TOL = 1e-12


def pauli_decompose(matrix) -> tuple[float, float, float]:
    """Split a 2x2 real symmetric matrix into (v_am, v_sc, v_el).

    Raises ValueError with the measured asymmetry when the input is not
    symmetric within 1e-12 (relative to the matrix scale).
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    asym = abs(m[0, 1] - m[1, 0])
    if asym > 1e-12 * scale:
        raise ValueError(f"matrix is not symmetric: |M12 - M21| = {asym:.3e}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    v_am = m[0, 1]
    v_sc = (m[0, 0] - m[1, 1]) / 2.0
    v_el = (m[0, 0] + m[1, 1]) / 2.0
    return v_am, v_sc, v_el


def pauli_assemble(v_am: float, v_sc: float, v_el: float) -> np.ndarray:
    """Inverse of :func:`pauli_decompose`."""
    return v_am * SIGMA1 + v_sc * SIGMA3 + v_el * ID2


def _validated_grid(breakpoints, lo: float, hi: float, what: str) -> np.ndarray:
    brk = np.asarray(breakpoints, dtype=float)
    if brk.ndim != 1 or brk.size < 2:
        raise ValueError(f"{what}: need at least two breakpoints")
    if not np.all(np.isfinite(brk)):
        raise ValueError(f"{what}: breakpoints must be finite")
    if np.any(np.diff(brk) <= 0):
        raise ValueError(f"{what}: breakpoints must be strictly increasing")
    if abs(brk[0] - lo) > _BRK_TOL or abs(brk[-1] - hi) > _BRK_TOL:
        raise ValueError(f"{what}: grid must cover [{lo}, {hi}] exactly")
    brk = brk.copy()
    brk[0], brk[-1] = lo, hi
    return brk


def _validated_coeffs(values, nseg: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(values, dtype=float), (nseg,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: coefficients must be finite")
    return arr


@dataclass(frozen=True)
class PauliField:
    """1-periodic potential, piecewise constant on a grid over [-1/2, 1/2]."""

    breakpoints: np.ndarray
    v_am: np.ndarray
    v_sc: np.ndarray
    v_el: np.ndarray

    def __post_init__(self):
        brk = _validated_grid(self.breakpoints, -_HALF, _HALF, "PauliField")
        nseg = brk.size - 1
        object.__setattr__(self, "breakpoints", brk)
        for name in ("v_am", "v_sc", "v_el"):
            object.__setattr__(self, name, _validated_coeffs(getattr(self, name), nseg, name))

    @classmethod
    def constant(cls, v_am: float = 0.0, v_sc: float = 0.0, v_el: float = 0.0,
                 segments: int = 1) -> "PauliField":
        brk = np.linspace(-_HALF, _HALF, segments + 1)
        return cls(brk, np.full(segments, v_am), np.full(segments, v_sc), np.full(segments, v_el))

    @classmethod
    def free(cls) -> "PauliField":
        return cls.constant()

    @classmethod
    def from_samples(cls, func, segments: int = 16) -> "PauliField":
        """Project a measurable potential onto the piecewise-constant grid.

        ``func(x)`` must return a 2x2 real symmetric matrix; each segment
        takes the cell average approximated by the midpoint value.
        """
        brk = np.linspace(-_HALF, _HALF, segments + 1)
        mids = (brk[:-1] + brk[1:]) / 2.0
        coeffs = np.array([pauli_decompose(func(x)) for x in mids])
        return cls(brk, coeffs[:, 0], coeffs[:, 1], coeffs[:, 2])

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size - 1

    def segment_of(self, x: float) -> int:
        """Index of the segment containing x in [-1/2, 1/2); right edge maps back."""
        if x >= _HALF:
            x = np.nextafter(_HALF, -1.0)
        idx = int(np.searchsorted(self.breakpoints, x, side="right") - 1)
        return min(max(idx, 0), self.n_segments - 1)

    def coefficients_at(self, x: float) -> tuple[float, float, float]:
        k = self.segment_of(x)
        return float(self.v_am[k]), float(self.v_sc[k]), float(self.v_el[k])

    def matrix_at(self, x: float) -> np.ndarray:
        return pauli_assemble(*self.coefficients_at(x))

    def sup_norm(self) -> float:
        """sup over x of the operator norm of the potential matrix."""
        return float(np.max(np.abs(self.v_el) + np.hypot(self.v_am, self.v_sc)))


@dataclass(frozen=True)
class SingleSitePotential:
    """Elementary perturbation supported inside [-1/2, 1/2].

    Two admissible cases: ``normal_form`` carries (q_am, q_sc) only;
    ``electrostatic`` carries q_el only, and requires overlap with the
    off-diagonal part of the companion periodic background (checked by
    :meth:`overlap_report`, reported as a warning rather than an error).
    """

    breakpoints: np.ndarray
    q_am: np.ndarray
    q_sc: np.ndarray
    q_el: np.ndarray
    case: str = "normal_form"

    def __post_init__(self):
        brk = _validated_grid(self.breakpoints, -_HALF, _HALF, "SingleSitePotential")
        nseg = brk.size - 1
        object.__setattr__(self, "breakpoints", brk)
        for name in ("q_am", "q_sc", "q_el"):
            object.__setattr__(self, name, _validated_coeffs(getattr(self, name), nseg, name))
        if self.case not in ("normal_form", "electrostatic"):
            raise ValueError(f"unknown case tag {self.case!r}")
        if self.case == "normal_form" and np.any(self.q_el != 0.0):
            raise ValueError("normal_form site must have q_el = 0")
        if self.case == "electrostatic" and (np.any(self.q_am != 0.0) or np.any(self.q_sc != 0.0)):
            raise ValueError("electrostatic site must have q_am = q_sc = 0")

    @classmethod
    def bump(cls, component: str = "sc", height: float = 1.0,
             half_width: float = 0.25) -> "SingleSitePotential":
        """Characteristic-function bump on [-half_width, half_width]."""
        if not 0.0 < half_width <= _HALF:
            raise ValueError("half_width must lie in (0, 1/2]")
        if half_width < _HALF:
            brk = np.array([-_HALF, -half_width, half_width, _HALF])
            profile = np.array([0.0, height, 0.0])
        else:
            brk = np.array([-_HALF, _HALF])
            profile = np.array([height])
        zero = np.zeros_like(profile)
        if component == "am":
            return cls(brk, profile, zero, zero, case="normal_form")
        if component == "sc":
            return cls(brk, zero, profile, zero, case="normal_form")
        if component == "el":
            return cls(brk, zero, zero, profile, case="electrostatic")
        raise ValueError(f"unknown component {component!r}")

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size - 1

    def is_zero(self) -> bool:
        return not (np.any(self.q_am) or np.any(self.q_sc) or np.any(self.q_el))

    def overlap_report(self, per: PauliField) -> float:
        """Measure of supp(q_el) within supp(v_am^2 + v_sc^2) of the background.

        Only meaningful for the electrostatic case; emits a warning when the
        overlap vanishes on the discretized grid (scattering then degenerates).
        """
        brk = np.union1d(self.breakpoints, per.breakpoints)
        mids = (brk[:-1] + brk[1:]) / 2.0
        lens = np.diff(brk)
        measure = 0.0
        for mid, ln in zip(mids, lens):
            q = self.q_el[self.segment_of(mid)]
            vam, vsc, _ = per.coefficients_at(mid)
            if q != 0.0 and (vam * vam + vsc * vsc) > 0.0:
                measure += ln
        if self.case == "electrostatic" and measure == 0.0:
            warnings.warn("electrostatic site has no overlap with the background "
                          "(v_am^2 + v_sc^2) support on the discretized grid")
        return measure

    def segment_of(self, x: float) -> int:
        if x >= _HALF:
            x = np.nextafter(_HALF, -1.0)
        idx = int(np.searchsorted(self.breakpoints, x, side="right") - 1)
        return min(max(idx, 0), self.n_segments - 1)

    def coefficients_at(self, x: float) -> tuple[float, float, float]:
        if x < -_HALF or x >= _HALF:
            return 0.0, 0.0, 0.0
        k = self.segment_of(x)
        return float(self.q_am[k]), float(self.q_sc[k]), float(self.q_el[k])

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.q_el) + np.hypot(self.q_am, self.q_sc)))


@dataclass(frozen=True)
class DisorderModel:
    """i.i.d. coupling-constant law: finite atoms or a uniform interval.

    The localization theory requires at least two support points; degenerate
    single-atom laws are still accepted (they realize zero-disorder runs) and
    are flagged by :attr:`is_nontrivial`.
    """

    kind: str = "atoms"
    atoms: np.ndarray = field(default=None)
    probs: np.ndarray = field(default=None)
    lo: float = 0.0
    hi: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind == "atoms":
            atoms = np.asarray(self.atoms, dtype=float)
            probs = (np.full(atoms.size, 1.0 / atoms.size) if self.probs is None
                     else np.asarray(self.probs, dtype=float))
            if atoms.ndim != 1 or atoms.size == 0:
                raise ValueError("atoms law needs a nonempty 1d support")
            if probs.shape != atoms.shape or np.any(probs < 0):
                raise ValueError("probabilities must be nonnegative and match atoms")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError(f"probabilities sum to {probs.sum()!r}, expected 1")
            if not np.all(np.isfinite(atoms)):
                raise ValueError("support must be bounded")
            order = np.argsort(atoms)
            object.__setattr__(self, "atoms", atoms[order])
            object.__setattr__(self, "probs", probs[order])
        elif self.kind == "uniform":
            if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
                raise ValueError("uniform law needs finite lo < hi")
        else:
            raise ValueError(f"unknown law kind {self.kind!r}")

    @classmethod
    def bernoulli(cls, p: float = 0.5, seed: int = 0) -> "DisorderModel":
        return cls(kind="atoms", atoms=np.array([0.0, 1.0]), probs=np.array([1.0 - p, p]), seed=seed)

    @classmethod
    def degenerate(cls, value: float = 0.0, seed: int = 0) -> "DisorderModel":
        return cls(kind="atoms", atoms=np.array([value]), probs=np.array([1.0]), seed=seed)

    @classmethod
    def uniform_law(cls, lo: float = 0.0, hi: float = 1.0, seed: int = 0) -> "DisorderModel":
        return cls(kind="uniform", lo=lo, hi=hi, seed=seed)

    @property
    def is_nontrivial(self) -> bool:
        if self.kind == "uniform":
            return True
        return self.atoms.size >= 2 and bool(np.sum(self.probs > 0) >= 2)

    def support_bounds(self) -> tuple[float, float]:
        if self.kind == "uniform":
            return self.lo, self.hi
        return float(self.atoms[0]), float(self.atoms[-1])

    def contains(self, value: float, tol: float = 1e-12) -> bool:
        if self.kind == "uniform":
            return self.lo - tol <= value <= self.hi + tol
        return bool(np.min(np.abs(self.atoms - value)) <= tol)

    def draw(self, seed: int, stream, index) -> np.ndarray:
        """Index-keyed draws; broadcasts over stream/index."""
        u = rng.uniform01(seed, stream, index)
        if self.kind == "uniform":
            return self.lo + (self.hi - self.lo) * u
        cum = np.cumsum(self.probs)
        return self.atoms[np.minimum(np.searchsorted(cum, u, side="right"), self.atoms.size - 1)]


@dataclass(frozen=True)
class DisorderRealization:
    """Sampled coupling constants over an integer window [n_min, n_max]."""

    n_min: int
    n_max: int
    values: np.ndarray
    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.n_max - self.n_min + 1,):
            raise ValueError("values length must match the window")
        object.__setattr__(self, "values", vals)

    def lam(self, n: int) -> float:
        if not self.n_min <= n <= self.n_max:
            raise ValueError(f"cell index {n} outside window [{self.n_min}, {self.n_max}]")
        return float(self.values[n - self.n_min])

    def covers(self, n_lo: int, n_hi: int) -> bool:
        return self.n_min <= n_lo and n_hi <= self.n_max

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("n,lambda\n")
        for n, v in zip(range(self.n_min, self.n_max + 1), self.values):
            buf.write(f"{n},{v!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DisorderRealization":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0].strip() != "n,lambda":
            raise DiracLabError("realization CSV must start with header 'n,lambda'")
        ns, vals = [], []
        for ln in lines[1:]:
            n_str, v_str = ln.split(",")
            ns.append(int(n_str))
            vals.append(float(v_str))
        if ns != list(range(ns[0], ns[0] + len(ns))):
            raise DiracLabError("realization CSV indices must be contiguous")
        return cls(ns[0], ns[-1], np.array(vals))


def sample_disorder(model: DisorderModel, window: tuple[int, int],
                    seed: int | None = None, stream: int = 0) -> DisorderRealization:
    """Sample the i.i.d. sequence over an inclusive integer window.

    Draws are keyed by (seed, stream, cell index): disjoint windows of the
    same seed agree on shared indices, and any parallel schedule reproduces
    the same sequence.
    """
    n_min, n_max = int(window[0]), int(window[1])
    if n_max < n_min:
        raise ValueError(f"empty window [{n_min}, {n_max}]")
    use_seed = model.seed if seed is None else int(seed)
    ns = np.arange(n_min, n_max + 1, dtype=np.int64)
    values = model.draw(use_seed, stream, ns)
    return DisorderRealization(n_min, n_max, values, seed=use_seed, stream=stream)


def sample_disorder_batch(model: DisorderModel, window: tuple[int, int],
                          seed: int, realizations: int,
                          stream_offset: int = 0) -> np.ndarray:
    """(R, window) array of draws; row r is stream ``stream_offset + r``."""
    n_min, n_max = int(window[0]), int(window[1])
    if n_max < n_min:
        raise ValueError(f"empty window [{n_min}, {n_max}]")
    ns = np.arange(n_min, n_max + 1, dtype=np.int64)[None, :]
    streams = (stream_offset + np.arange(realizations, dtype=np.int64))[:, None]
    return model.draw(int(seed), streams, ns)


@dataclass(frozen=True)
class RandomModel:
    """Bundle (periodic background, single-site potential, coupling law)."""

    per: PauliField
    site: SingleSitePotential
    law: DisorderModel

    def normalized(self) -> "RandomModel":
        """Map the extreme support atoms onto {0, 1} by absorbing the lower
        one into the background and rescaling the site. Laws already on
        {0, 1} (and uniform [0,1]) pass through unchanged."""
        lo, hi = self.law.support_bounds()
        if lo == 0.0 and hi == 1.0:
            return self
        if hi == lo:
            raise DiracLabError("degenerate law cannot be normalized to {0, 1}")
        scale = hi - lo
        per = _shift_background(self.per, self.site, lo)
        site = SingleSitePotential(self.site.breakpoints, scale * self.site.q_am,
                                   scale * self.site.q_sc, scale * self.site.q_el,
                                   case=self.site.case)
        if self.law.kind == "atoms":
            law = DisorderModel(kind="atoms", atoms=(self.law.atoms - lo) / scale,
                                probs=self.law.probs, seed=self.law.seed)
        else:
            law = DisorderModel.uniform_law(0.0, 1.0, seed=self.law.seed)
        return RandomModel(per, site, law)

    def sup_norm(self) -> float:
        """sup-norm bound for W = V_per + V_omega over the support of the law."""
        lo, hi = self.law.support_bounds()
        lam_max = max(abs(lo), abs(hi))
        return self.per.sup_norm() + lam_max * self.site.sup_norm()


def _shift_background(per: PauliField, site: SingleSitePotential, amount: float) -> PauliField:
    if amount == 0.0:
        return per
    brk = np.union1d(per.breakpoints, site.breakpoints)
    mids = (brk[:-1] + brk[1:]) / 2.0
    vam, vsc, vel = [], [], []
    for x in mids:
        pa, ps, pe = per.coefficients_at(x)
        qa, qs, qe = site.coefficients_at(x)
        vam.append(pa + amount * qa)
        vsc.append(ps + amount * qs)
        vel.append(pe + amount * qe)
    return PauliField(brk, np.array(vam), np.array(vsc), np.array(vel))


def cell_index(x: float) -> int:
    """Index n of the unit cell [n - 1/2, n + 1/2) containing x."""
    return int(np.floor(x + _HALF))


def total_potential(per: PauliField, realization: DisorderRealization,
                    site: SingleSitePotential, x: float) -> np.ndarray:
    """V_per(x) + lambda_n u(x - n) for the single cell n containing x."""
    n = cell_index(x)
    if not realization.n_min <= n <= realization.n_max:
        raise ValueError(f"x = {x} lies in cell {n}, outside the realization window")
    t = x - n
    base = pauli_assemble(*per.coefficients_at(t))
    qa, qs, qe = site.coefficients_at(t)
    return base + realization.lam(n) * pauli_assemble(qa, qs, qe)


@dataclass(frozen=True)
class PiecewiseSlice:
    """Piecewise-constant potential on [x0, x1].

    Coefficient arrays have shape (S,) or (S, R) for a batch of R
    realizations sharing the same breakpoint structure.
    """

    breakpoints: np.ndarray
    v_am: np.ndarray
    v_sc: np.ndarray
    v_el: np.ndarray

    def __post_init__(self):
        brk = np.asarray(self.breakpoints, dtype=float)
        if brk.ndim != 1 or brk.size < 2 or np.any(np.diff(brk) <= 0):
            raise ValueError("slice breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", brk)
        nseg = brk.size - 1
        for name in ("v_am", "v_sc", "v_el"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape[0] != nseg:
                raise ValueError(f"{name}: leading dimension must equal {nseg}")
            object.__setattr__(self, name, arr)

    @property
    def x0(self) -> float:
        return float(self.breakpoints[0])

    @property
    def x1(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size - 1

    @property
    def batch_shape(self) -> tuple:
        return self.v_am.shape[1:]

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def segment_of(self, x: float) -> int:
        idx = int(np.searchsorted(self.breakpoints, x, side="right") - 1)
        return min(max(idx, 0), self.n_segments - 1)

    def coefficients_at(self, x: float):
        k = self.segment_of(x)
        return self.v_am[k], self.v_sc[k], self.v_el[k]

    def restricted(self, a: float, b: float) -> "PiecewiseSlice":
        """Sub-slice on [a, b] (segment coefficients preserved)."""
        if not (self.x0 - _BRK_TOL <= a < b <= self.x1 + _BRK_TOL):
            raise ValueError(f"[{a}, {b}] not contained in [{self.x0}, {self.x1}]")
        a, b = max(a, self.x0), min(b, self.x1)
        inner = self.breakpoints[(self.breakpoints > a + _BRK_TOL) & (self.breakpoints < b - _BRK_TOL)]
        brk = np.concatenate(([a], inner, [b]))
        mids = (brk[:-1] + brk[1:]) / 2.0
        sel = [self.segment_of(m) for m in mids]
        return PiecewiseSlice(brk, self.v_am[sel], self.v_sc[sel], self.v_el[sel])

    def reversed(self) -> "PiecewiseSlice":
        """Mirror of the slice (used for backward propagation bookkeeping)."""
        brk = (-self.breakpoints)[::-1]
        return PiecewiseSlice(brk, self.v_am[::-1], self.v_sc[::-1], self.v_el[::-1])

    def norm_growth_integral(self) -> np.ndarray:
        """integral of |q_am| + |q_sc| over the slice (per batch entry)."""
        shaped = self.lengths.reshape((-1,) + (1,) * (self.v_am.ndim - 1))
        return np.sum(shaped * (np.abs(self.v_am) + np.abs(self.v_sc)), axis=0)

    def matrix_integral(self, energy: float = 0.0) -> np.ndarray:
        """integral of the pointwise operator norm of (V - E) over the slice."""
        shaped = self.lengths.reshape((-1,) + (1,) * (self.v_am.ndim - 1))
        norms = np.abs(self.v_el - energy) + np.hypot(self.v_am, self.v_sc)
        return np.sum(shaped * norms, axis=0)


def _merge_cell_breakpoints(per: PauliField, site: SingleSitePotential) -> np.ndarray:
    brk = np.union1d(per.breakpoints, site.breakpoints)
    keep = [brk[0]]
    for b in brk[1:]:
        if b - keep[-1] > _BRK_TOL:
            keep.append(b)
    keep[-1] = _HALF
    return np.asarray(keep)


def cell_slice(per: PauliField, site: SingleSitePotential, lam) -> PiecewiseSlice:
    """One-cell slice on [-1/2, 1/2] for coupling ``lam``.

    ``lam`` may be a scalar or an array of shape (R,); the latter produces a
    batched slice with coefficients of shape (S, R).
    """
    brk = _merge_cell_breakpoints(per, site)
    mids = (brk[:-1] + brk[1:]) / 2.0
    base = np.array([[*per.coefficients_at(m)] for m in mids])        # (S, 3)
    bump = np.array([[*site.coefficients_at(m)] for m in mids])       # (S, 3)
    lam_arr = np.asarray(lam, dtype=float)
    if lam_arr.ndim == 0:
        vam = base[:, 0] + lam_arr * bump[:, 0]
        vsc = base[:, 1] + lam_arr * bump[:, 1]
        vel = base[:, 2] + lam_arr * bump[:, 2]
    else:
        vam = base[:, 0, None] + bump[:, 0, None] * lam_arr[None, :]
        vsc = base[:, 1, None] + bump[:, 1, None] * lam_arr[None, :]
        vel = base[:, 2, None] + bump[:, 2, None] * lam_arr[None, :]
    return PiecewiseSlice(brk, vam, vsc, vel)


def periodic_slice(per: PauliField, x0: float, x1: float) -> PiecewiseSlice:
    """Slice of the bare periodic background over [x0, x1]."""
    if x1 <= x0:
        raise ValueError("need x1 > x0")
    return _assemble_slice(per, None, None, x0, x1)


def build_slice(per: PauliField, realization: DisorderRealization,
                site: SingleSitePotential, x0: float, x1: float) -> PiecewiseSlice:
    """Slice of V_per + V_omega over [x0, x1] (realization must cover it)."""
    if x1 <= x0:
        raise ValueError("need x1 > x0")
    n_lo, n_hi = cell_index(x0), cell_index(np.nextafter(x1, x0))
    if not realization.covers(n_lo, n_hi):
        raise ValueError(f"realization window [{realization.n_min}, {realization.n_max}] "
                         f"does not cover cells [{n_lo}, {n_hi}]")
    return _assemble_slice(per, realization, site, x0, x1)


def batched_box_slice(per: PauliField, site: SingleSitePotential,
                      lam_batch: np.ndarray, x0: float, x1: float) -> PiecewiseSlice:
    """Slice over [x0, x1] for a batch of realizations.

    ``lam_batch`` has shape (R, n_cells) covering exactly the cells that
    intersect [x0, x1], ordered left to right.
    """
    n_lo, n_hi = cell_index(x0), cell_index(np.nextafter(x1, x0))
    lam_batch = np.atleast_2d(np.asarray(lam_batch, dtype=float))
    if lam_batch.shape[1] != n_hi - n_lo + 1:
        raise ValueError(f"lam_batch must have {n_hi - n_lo + 1} columns")
    brk_parts, seg_meta = _slice_geometry(per, site, x0, x1)
    vam, vsc, vel = [], [], []
    R = lam_batch.shape[0]
    for (n, mid) in seg_meta:
        pa, ps, pe = per.coefficients_at(mid - n)
        qa, qs, qe = site.coefficients_at(mid - n)
        lam = lam_batch[:, n - n_lo]
        vam.append(pa + qa * lam)
        vsc.append(ps + qs * lam)
        vel.append(pe + qe * lam)
    return PiecewiseSlice(brk_parts, np.array(vam), np.array(vsc), np.array(vel))


def _slice_geometry(per, site, x0, x1):
    """Breakpoints over [x0, x1] and (cell, midpoint) per segment."""
    pts = {x0, x1}
    n_lo, n_hi = cell_index(x0), cell_index(np.nextafter(x1, x0))
    local = np.union1d(per.breakpoints, site.breakpoints) if site is not None else per.breakpoints
    for n in range(n_lo, n_hi + 1):
        for b in local + n:
            if x0 < b < x1:
                pts.add(float(b))
    brk = np.array(sorted(pts))
    keep = [brk[0]]
    for b in brk[1:]:
        if b - keep[-1] > _BRK_TOL:
            keep.append(b)
    keep[-1] = x1
    brk = np.asarray(keep)
    mids = (brk[:-1] + brk[1:]) / 2.0
    return brk, [(cell_index(m), m) for m in mids]


def _assemble_slice(per, realization, site, x0, x1):
    brk, seg_meta = _slice_geometry(per, site, x0, x1)
    vam, vsc, vel = [], [], []
    for (n, mid) in seg_meta:
        pa, ps, pe = per.coefficients_at(mid - n)
        if realization is not None and site is not None:
            lam = realization.lam(n)
            qa, qs, qe = site.coefficients_at(mid - n)
            pa, ps, pe = pa + lam * qa, ps + lam * qs, pe + lam * qe
        vam.append(pa)
        vsc.append(ps)
        vel.append(pe)
    return PiecewiseSlice(brk, np.array(vam), np.array(vsc), np.array(vel))


@dataclass(frozen=True)
class GaugeNormalForm:
    """Gauge transform removing the electrostatic part of a slice.

    ``phase(x)`` is the running integral of v_el with phase(x0) = 0; the
    normal-form coefficients at x are the rotation by 2*phase applied to
    (v_am, v_sc).  The electrostatic part of the output is identically zero
    and pointwise euclidean norms of solutions are preserved.
    """

    source: PiecewiseSlice
    phases: np.ndarray          # phase at each breakpoint

    def phase(self, x) -> np.ndarray:
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(xs)
        for i, xi in enumerate(xs):
            k = self.source.segment_of(xi)
            out[i] = self.phases[k] + self.source.v_el[k] * (xi - self.source.breakpoints[k])
        return out if np.ndim(x) else float(out[0])

    def rotation(self, x) -> np.ndarray:
        phi = 2.0 * self.phase(x)
        c, s = np.cos(phi), np.sin(phi)
        return np.array([[c, s], [-s, c]])

    def coefficients(self, x) -> tuple[float, float, float]:
        """Normal-form (v_am, v_sc, 0) at position x."""
        k = self.source.segment_of(x)
        vec = self.rotation(x) @ np.array([self.source.v_am[k], self.source.v_sc[k]])
        return float(vec[0]), float(vec[1]), 0.0

    def projected(self, subdivisions: int = 4) -> PiecewiseSlice:
        """Piecewise-constant projection via exact segment averages of the
        rotating coefficients (cell averages per sub-segment)."""
        src = self.source
        brk_out, vam_out, vsc_out = [src.breakpoints[0]], [], []
        for k in range(src.n_segments):
            a, b = src.breakpoints[k], src.breakpoints[k + 1]
            sub = np.linspace(a, b, subdivisions + 1)
            rate = 2.0 * src.v_el[k]
            v = np.array([src.v_am[k], src.v_sc[k]])
            for j in range(subdivisions):
                lo, hi = sub[j], sub[j + 1]
                phi0 = 2.0 * self.phase(lo)
                h = hi - lo
                if abs(rate) < 1e-14:
                    c_avg, s_avg = np.cos(phi0), np.sin(phi0)
                else:
                    c_avg = (np.sin(phi0 + rate * h) - np.sin(phi0)) / (rate * h)
                    s_avg = (np.cos(phi0) - np.cos(phi0 + rate * h)) / (rate * h)
                rot = np.array([[c_avg, s_avg], [-s_avg, c_avg]])
                w = rot @ v
                brk_out.append(hi)
                vam_out.append(w[0])
                vsc_out.append(w[1])
        return PiecewiseSlice(np.array(brk_out), np.array(vam_out),
                              np.array(vsc_out), np.zeros(len(vam_out)))


def gauge_to_normal_form(slice_: PiecewiseSlice) -> GaugeNormalForm:
    """Gauge transform of a scalar (non-batched) slice to normal form."""
    if slice_.batch_shape:
        raise ValueError("gauge transform expects a non-batched slice")
    phases = np.concatenate(([0.0], np.cumsum(slice_.lengths * slice_.v_el)))
    return GaugeNormalForm(slice_, phases)
