"""Probe experiments and per-area regression blocks for consensus identification.

Each generator input receives one short pulse, ``spacing`` seconds after the
previous one. The block of pair (tie m, gen n) covers the N rows that start
at gen n's pulse, with k samples of lag history in front, so every other
input is zero inside the window. Leftover ringdown from earlier pulses is a
free response of the same system and is annihilated by the shared
denominator, so the ARX relation stays exact.

Identification may run on a decimated copy of the 50 Hz record
(``decimate`` > 1). Pulses are aligned to the decimated grid so the
decimated data are still an exact zero-order-hold sampling of the plant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from widearea.admm import ConsensusResult, init_area, run_consensus
from widearea.grid import Disturbance, LinearGridModel, ScenarioConfig, SimRecord
from widearea.sysid import DEFAULT_K, DEFAULT_N, DEFAULT_RIDGE, IdentificationError, RegressionBlock, build_regression


@dataclass(frozen=True)
class ProbePlan:
    t_first: float = 2.0
    spacing: float = 6.0
    duration: float = 0.1
    magnitude: float = 0.1

    def pulse_time(self, g: int) -> float:
        return self.t_first + self.spacing * g

    def t_end(self, n_gens: int) -> float:
        return self.t_first + self.spacing * n_gens

    def to_dict(self) -> dict:
        return {"t_first": self.t_first, "spacing": self.spacing,
                "duration": self.duration, "magnitude": self.magnitude}


def probe_magnitudes(n_gens: int, plan: ProbePlan, seed: int | None) -> list[float]:
    """Fixed magnitudes, or seeded draws from [0.5, 2] x plan.magnitude."""
    if seed is None:
        return [plan.magnitude] * n_gens
    rng = np.random.default_rng(seed)
    return [float(x) for x in plan.magnitude * rng.uniform(0.5, 2.0, size=n_gens)]


def probe_scenario(model: LinearGridModel, plan: ProbePlan = ProbePlan(), seed: int | None = None,
                   noise_std: float = 0.0) -> ScenarioConfig:
    mags = probe_magnitudes(model.n_gens, plan, seed)
    dist = tuple(
        Disturbance("pulse", f"{lab}.u", plan.pulse_time(g), plan.duration, mags[g])
        for g, lab in enumerate(model.gen_labels)
    )
    return ScenarioConfig(disturbances=dist, t_end=plan.t_end(model.n_gens),
                          noise_std=noise_std, noise_seed=0 if seed is None else seed)


def areas_from_assignment(assignment: Sequence[int]) -> dict[int, list[int]]:
    """Cluster id per generator -> {area: [generator indices]}."""
    out: dict[int, list[int]] = {}
    for g, a in enumerate(assignment):
        out.setdefault(int(a), []).append(g)
    return dict(sorted(out.items()))


def area_blocks(
    record: SimRecord,
    model: LinearGridModel,
    areas: Mapping[int, Sequence[int]],
    plan: ProbePlan = ProbePlan(),
    k: int = DEFAULT_K,
    N: int = DEFAULT_N,
    decimate: int = 1,
    detrend: bool = False,
) -> list[list[RegressionBlock]]:
    """Per-area lists of blocks, pairs ordered (gen, tie) inside an area."""
    fs = 1.0 / float(record.time[1] - record.time[0]) if len(record.time) > 1 else 50.0
    Ts = decimate / fs
    if N * Ts > plan.spacing + 1e-9:
        raise IdentificationError(
            f"window of {N} samples at Ts={Ts:g} s exceeds the probe spacing {plan.spacing} s")
    pre = int(round(plan.t_first / Ts))
    out = []
    for q, gens in areas.items():
        blocks = []
        for g in gens:
            j0 = int(round(plan.pulse_time(g) / Ts))
            u = np.asarray(record[f"{model.gen_labels[g]}.u"])[::decimate]
            for t, tl in enumerate(model.tie_labels):
                P = np.asarray(record[f"{tl}.p"])[::decimate]
                blocks.append(build_regression(P, u, k, N, detrend=detrend, start=j0 - k,
                                               pre=pre, pair=(t, g)))
        if not blocks:
            raise IdentificationError(f"area {q} has no generators")
        out.append(blocks)
    return out


def identify(
    record: SimRecord,
    model: LinearGridModel,
    areas: Mapping[int, Sequence[int]],
    plan: ProbePlan = ProbePlan(),
    k: int = DEFAULT_K,
    N: int = DEFAULT_N,
    decimate: int = 1,
    detrend: bool = False,
    rho: float = 1.0,
    eps_abs: float = 1e-8,
    eps_rel: float = 1e-6,
    max_iter: int = 500,
    ridge: float = DEFAULT_RIDGE,
    metric: str = "curvature",
) -> ConsensusResult:
    """In-process consensus identification of the shared denominator."""
    ab = area_blocks(record, model, areas, plan, k, N, decimate, detrend)
    states = [init_area(q, bl, rho=rho, ridge=ridge) for q, bl in zip(areas, ab)]
    fs = 1.0 / float(record.time[1] - record.time[0])
    return run_consensus(states, rho=rho, eps_abs=eps_abs, eps_rel=eps_rel, max_iter=max_iter,
                         Ts=decimate / fs, metric=metric)
