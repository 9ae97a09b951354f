"""Poles, partial-fraction residues and control-loop ranking.

Polynomials follow the transfer-function convention

    G(z) = (b0 + b1 z^-1 + ... + bk z^-k) / (1 + a1 z^-1 + ... + ak z^-k)
         = B(z) / A(z),   A(z) = z^k + a1 z^(k-1) + ... + ak

so the residue at a simple pole p_i is B(p_i) / A'(p_i) and the direct
term is b0.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from widearea.grid import INTER_AREA_BAND, Mode


class ModalError(ValueError):
    pass


class RepeatedPoleError(ModalError):
    pass


class EmptyBandError(ModalError):
    pass


def companion(a: Sequence[float]) -> np.ndarray:
    """Frobenius companion matrix of z^k + a1 z^(k-1) + ... + ak."""
    a = np.asarray(a, dtype=float)
    k = len(a)
    C = np.zeros((k, k))
    C[0, :] = -a
    if k > 1:
        C[1:, :-1] = np.eye(k - 1)
    return C


def pole_roots(a: Sequence[float]) -> np.ndarray:
    if len(a) < 1:
        raise ModalError("denominator needs at least one coefficient")
    return np.linalg.eigvals(companion(a))


def pole_to_mode(p: complex, Ts: float) -> Mode:
    if abs(p) == 0:
        raise ModalError("pole at z=0 has no continuous-time equivalent")
    lam = cmath.log(p) / Ts
    return Mode(complex(lam), complex(p))


def poles(a: Sequence[float], Ts: float) -> list[Mode]:
    """Discrete poles of the denominator mapped to continuous modes.

    Conjugate pairs appear once (Im p >= 0); sorted by frequency.
    """
    ps = pole_roots(a)
    modes = [pole_to_mode(complex(p), Ts) for p in ps if p.imag >= 0]
    return sorted(modes, key=lambda m: (m.frequency, m.sigma))


def _horner(c: np.ndarray, z):
    return np.polyval(c, z)


def residues(a: Sequence[float], b: Sequence[float], Ts: float | None = None):
    """Partial fractions of B(z)/A(z) = sum_i R_i/(z - p_i) + b0.

    Returns ``(p, R, remainder)`` over all k poles.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = len(a)
    if len(b) != k + 1:
        raise ModalError(f"numerator needs {k + 1} coefficients, got {len(b)}")
    p = pole_roots(a)
    for i in range(k):
        for j in range(i + 1, k):
            if abs(p[i] - p[j]) <= 1e-8:
                raise RepeatedPoleError(f"repeated pole near {p[i]:.6g}; Jordan expansion not supported")
    # A'(p_i) as a product over the computed roots; differentiating the
    # coefficients loses digits when poles cluster
    dA = np.array([np.prod(p[i] - np.delete(p, i)) for i in range(k)])
    R = _horner(b, p) / dA
    return p, R, float(b[0])


@dataclass(frozen=True)
class ResidueEntry:
    tie: int
    gen: int
    mode: int
    R: complex

    @property
    def absR(self) -> float:
        return abs(self.R)

    @property
    def argR_deg(self) -> float:
        return math.degrees(cmath.phase(self.R))


@dataclass
class ModeResidueTable:
    modes: list[Mode]
    entries: list[ResidueEntry]
    Ts: float
    tie_labels: tuple[str, ...] = ()
    gen_labels: tuple[str, ...] = ()
    remainder: dict = field(default_factory=dict)
    band: tuple[float, float] = INTER_AREA_BAND

    def entry(self, tie: int, gen: int, mode: int) -> ResidueEntry:
        for e in self.entries:
            if (e.tie, e.gen, e.mode) == (tie, gen, mode):
                return e
        raise KeyError((tie, gen, mode))

    def mode_of_interest(self, band=None) -> int:
        band = band or self.band
        cands = [i for i, m in enumerate(self.modes) if m.in_band(band)]
        if not cands:
            raise EmptyBandError(f"no oscillatory mode in {band[0]}-{band[1]} Hz")
        return min(cands, key=lambda i: (self.modes[i].damping, i))

    def to_dict(self, selected=None) -> dict:
        out = {
            "modes": [
                {"f": m.frequency, "zeta": m.damping,
                 "pole": [m.pole.real, m.pole.imag] if m.pole is not None else None}
                for m in self.modes
            ],
            "loops": [
                {"tie": self._tl(e.tie), "gen": self._gl(e.gen), "mode": e.mode,
                 "absR": e.absR, "argR": e.argR_deg, "f": self.modes[e.mode].frequency}
                for e in self.entries
            ],
        }
        if selected is not None:
            out["selected"] = {"tie": self._tl(selected[0]), "gen": self._gl(selected[1])}
        return out

    def _tl(self, t):
        return self.tie_labels[t] if self.tie_labels else t

    def _gl(self, g):
        return self.gen_labels[g] if self.gen_labels else g


def residue_table(
    a: Sequence[float],
    b_pairs: dict[tuple[int, int], Sequence[float]],
    Ts: float,
    tie_labels=(),
    gen_labels=(),
) -> ModeResidueTable:
    """Shared-denominator residues for every (tie, gen) pair."""
    p = pole_roots(a)
    order = [i for i in range(len(p)) if p[i].imag >= 0]
    modes = [pole_to_mode(complex(p[i]), Ts) for i in order]
    srt = sorted(range(len(order)), key=lambda j: (modes[j].frequency, modes[j].sigma))
    modes = [modes[j] for j in srt]
    order = [order[j] for j in srt]
    entries = []
    rem = {}
    for (t, g), b in sorted(b_pairs.items()):
        pp, R, r0 = residues(a, b)
        rem[(t, g)] = r0
        for mi, i in enumerate(order):
            # match by value; eigvals order is deterministic for identical a
            j = int(np.argmin(np.abs(pp - p[i])))
            entries.append(ResidueEntry(t, g, mi, complex(R[j])))
    return ModeResidueTable(modes=modes, entries=entries, Ts=Ts,
                            tie_labels=tuple(tie_labels), gen_labels=tuple(gen_labels),
                            remainder=rem)


@dataclass(frozen=True)
class RankedLoop:
    tie: int
    gen: int
    absR: float
    f: float
    R: complex
    strength: str


@dataclass
class LoopRanking:
    mode: int
    loops: list[RankedLoop]

    @property
    def top(self) -> RankedLoop:
        return self.loops[0]

    @property
    def bottom(self) -> RankedLoop:
        return self.loops[-1]


def rank_loops(table: ModeResidueTable, band=INTER_AREA_BAND) -> LoopRanking:
    """Rank (tie, gen) loops by |R| at the least-damped in-band mode.

    Ties in |R| keep (tie, gen) order. The top third is tagged ``strong``,
    the bottom third ``weak``, the rest ``medium``.
    """
    if not table.entries:
        raise ModalError("empty residue table")
    mi = table.mode_of_interest(band)
    f = table.modes[mi].frequency
    rows = sorted((e for e in table.entries if e.mode == mi), key=lambda e: (e.tie, e.gen))
    rows.sort(key=lambda e: -e.absR)
    n = len(rows)
    third = max(1, n // 3)
    loops = []
    for i, e in enumerate(rows):
        if i < third:
            tag = "strong"
        elif i >= n - third:
            tag = "weak"
        else:
            tag = "medium"
        loops.append(RankedLoop(e.tie, e.gen, e.absR, f, e.R, tag))
    return LoopRanking(mode=mi, loops=loops)
