"""Linear multi-machine grid surrogate.

Classical second-order generator model: linearized swing equations on a
lossless network, Kron-reduced to generator internal nodes. Angles are
carried relative to a reference generator so that the state matrix has no
zero eigenvalue. Speed deviations are in rad/s (electrical), inputs are
per-unit torque on the system base, tie flows are reported in MW.

Two-area constants (900 MVA base, 60 Hz)
---------------------------------------
inertia H [s]            : 12.0, 16.0, 7.0, 4.5   (area 1 heavy, area 2 light)
network edges (pu/rad)   : g1-b5 8.0, b5-b6 12.0, g2-b6 10.0, b6-b7 15.0,
                           b7-b9 0.48 (tie 1), b7-b9 0.42 (tie 2),
                           b9-b10 15.0, g3-b10 5.0, b10-b11 12.0, g4-b11 11.0
uniform damping D/M      : 0.30 1/s
intra-area damping       : 0.10 pu/(rad/s) between machines of one area
                           (damper windings act on the local swing only)

The synchronizing coefficients stand for V_i V_j cos(delta_ij)/x_ij at the
pre-disturbance operating point; the constant-impedance loads at b7 and b9
carry no synchronizing torque in this linearization and drop out.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

F_NOMINAL = 60.0
OMEGA_S = 2.0 * math.pi * F_NOMINAL
INTER_AREA_BAND = (0.1, 1.0)
DIVERGENCE_LIMIT = 1e6


class GridModelError(ValueError):
    pass


class DefectiveModelError(GridModelError):
    """State matrix is not diagonalizable within tolerance."""


class SimulationDiverged(RuntimeError):
    def __init__(self, t: float, value: float):
        super().__init__(f"simulation diverged at t={t:.4f} s (|state|={value:.3e} > {DIVERGENCE_LIMIT:g})")
        self.t = t
        self.value = value


@dataclass(frozen=True, eq=False)
class LinearGridModel:
    A: np.ndarray
    B_u: np.ndarray
    C_tie: np.ndarray
    C_speed: np.ndarray
    gen_labels: tuple[str, ...]
    tie_labels: tuple[str, ...]
    area_of_gen: tuple[int, ...]
    base_mva: float = 900.0
    state_labels: tuple[str, ...] = ()
    name: str = "custom"

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_gens(self) -> int:
        return self.B_u.shape[1]

    @property
    def n_ties(self) -> int:
        return self.C_tie.shape[0]

    @property
    def n_areas(self) -> int:
        return len(set(self.area_of_gen))

    def gens_in_area(self, area: int) -> list[int]:
        return [i for i, a in enumerate(self.area_of_gen) if a == area]

    def check_dimensions(self) -> None:
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise GridModelError("A must be square")
        if self.B_u.shape[0] != n or self.C_tie.shape[1] != n or self.C_speed.shape[1] != n:
            raise GridModelError("B_u/C_tie/C_speed inconsistent with A")
        if self.C_speed.shape[0] != self.B_u.shape[1]:
            raise GridModelError("one speed output per generator input required")
        if len(self.gen_labels) != self.n_gens or len(self.area_of_gen) != self.n_gens:
            raise GridModelError("generator labels/areas do not match B_u")
        if len(self.tie_labels) != self.n_ties:
            raise GridModelError("tie labels do not match C_tie")

    def validate(self) -> None:
        """Full invariant check: dimensions, open-loop stability, an inter-area pair."""
        self.check_dimensions()
        ev = np.linalg.eigvals(self.A)
        if np.any(ev.real >= 0):
            raise GridModelError(f"surrogate not open-loop stable: max Re = {ev.real.max():.3g}")
        f = np.abs(ev.imag) / (2 * math.pi)
        lo, hi = INTER_AREA_BAND
        if not np.any((ev.imag > 0) & (f >= lo) & (f <= hi)):
            raise GridModelError("no oscillatory pair in the 0.1-1.0 Hz inter-area band")

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A, self.B_u, self.C_tie, self.C_speed):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(repr((self.gen_labels, self.tie_labels, self.area_of_gen, self.base_mva)).encode())
        return h.hexdigest()[:16]

    def channel_names(self) -> list[str]:
        names = [f"{g}.speed" for g in self.gen_labels]
        names += [f"{g}.u" for g in self.gen_labels]
        names += [f"{t}.p" for t in self.tie_labels]
        return names

    def output_row(self, channel: str) -> np.ndarray:
        """C row for a measured channel (`gen<k>.speed` or `tie<m>.p`)."""
        label, _, kind = channel.rpartition(".")
        if kind == "speed" and label in self.gen_labels:
            return self.C_speed[self.gen_labels.index(label)]
        if kind == "p" and label in self.tie_labels:
            return self.C_tie[self.tie_labels.index(label)]
        raise GridModelError(f"unknown measured channel {channel!r}")

    def gen_index(self, label_or_index) -> int:
        if isinstance(label_or_index, (int, np.integer)):
            if not 0 <= label_or_index < self.n_gens:
                raise GridModelError(f"generator index {label_or_index} out of range")
            return int(label_or_index)
        if label_or_index not in self.gen_labels:
            raise GridModelError(f"unknown generator {label_or_index!r}")
        return self.gen_labels.index(label_or_index)


def _kron_reduce(n_nodes: int, n_gen: int, edges: Sequence[tuple[int, int, float]]):
    lap = np.zeros((n_nodes, n_nodes))
    for i, j, k in edges:
        lap[i, i] += k
        lap[j, j] += k
        lap[i, j] -= k
        lap[j, i] -= k
    g = slice(0, n_gen)
    b = slice(n_gen, n_nodes)
    if n_nodes == n_gen:
        return lap, np.eye(n_gen)
    # bus angles = bus_map @ gen angles
    bus_map = -np.linalg.solve(lap[b, b], lap[b, g])
    k_red = lap[g, g] + lap[g, b] @ bus_map
    node_map = np.vstack([np.eye(n_gen), bus_map])
    return 0.5 * (k_red + k_red.T), node_map


def swing_model(
    H: Sequence[float],
    edges: Sequence[tuple[int, int, float]],
    n_nodes: int,
    ties: Sequence[int],
    area_of_gen: Sequence[int],
    damping_ratio: float = 0.3,
    intra_area_damping: float = 0.0,
    ref: int = 0,
    base_mva: float = 900.0,
    name: str = "custom",
) -> LinearGridModel:
    """Assemble the relative-angle swing model.

    Nodes ``0..n_gen-1`` are generator internal nodes, the rest network
    buses. ``ties`` indexes ``edges``; each becomes a tie-flow output.
    """
    H = np.asarray(H, dtype=float)
    n = len(H)
    M = 2.0 * H / OMEGA_S
    k_red, node_map = _kron_reduce(n_nodes, n, edges)

    D = damping_ratio * np.diag(M)
    area = np.asarray(area_of_gen)
    if intra_area_damping:
        for i in range(n):
            for j in range(i + 1, n):
                if area[i] == area[j]:
                    D[i, i] += intra_area_damping
                    D[j, j] += intra_area_damping
                    D[i, j] -= intra_area_damping
                    D[j, i] -= intra_area_damping

    # absolute angles from relative ones: delta = T @ theta (reference held at 0)
    others = [i for i in range(n) if i != ref]
    T = np.zeros((n, n - 1))
    for c, i in enumerate(others):
        T[i, c] = 1.0
    S = np.zeros((n - 1, n))
    for c, i in enumerate(others):
        S[c, i] = 1.0
        S[c, ref] = -1.0

    Minv = np.diag(1.0 / M)
    A = np.block([
        [np.zeros((n - 1, n - 1)), S],
        [-Minv @ k_red @ T, -Minv @ D],
    ])
    B_u = np.vstack([np.zeros((n - 1, n)), Minv])
    C_speed = np.hstack([np.zeros((n, n - 1)), np.eye(n)])

    rows = []
    for e in ties:
        i, j, k = edges[e]
        flow = k * (node_map[i] - node_map[j]) * base_mva
        rows.append(np.concatenate([flow @ T, np.zeros(n)]))
    C_tie = np.array(rows).reshape(len(ties), 2 * n - 1)

    gen_labels = tuple(f"gen{i + 1}" for i in range(n))
    labels = tuple(f"theta{i + 1}" for i in others) + tuple(f"omega{i + 1}" for i in range(n))
    return LinearGridModel(
        A=A, B_u=B_u, C_tie=C_tie, C_speed=C_speed,
        gen_labels=gen_labels,
        tie_labels=tuple(f"tie{m + 1}" for m in range(len(ties))),
        area_of_gen=tuple(int(a) for a in area_of_gen),
        base_mva=base_mva, state_labels=labels, name=name,
    )


def build_two_area() -> LinearGridModel:
    """Four-machine, two-area surrogate (constants in the module docstring).

    Inter-area mode near 0.64 Hz with about 3.8 % damping; local modes at
    1.5 and 2.1 Hz.
    """
    # nodes: 0-3 generators, 4=b5, 5=b6, 6=b7, 7=b9, 8=b10, 9=b11
    edges = [
        (0, 4, 8.0), (4, 5, 12.0), (1, 5, 10.0), (5, 6, 15.0),
        (6, 7, 0.48), (6, 7, 0.42),
        (7, 8, 15.0), (2, 8, 5.0), (8, 9, 12.0), (3, 9, 11.0),
    ]
    model = swing_model(
        H=[12.0, 16.0, 7.0, 4.5], edges=edges, n_nodes=10, ties=[4, 5],
        area_of_gen=[1, 1, 2, 2], damping_ratio=0.3, intra_area_damping=0.1,
        ref=1, name="two_area",
    )
    model.validate()
    return model


def build_chain(n_areas: int, gens_per_area: int, seed: int = 0) -> LinearGridModel:
    """Areas coupled in a chain, one tie per adjacent pair.

    Inertias are drawn uniformly from [3, 9] s, machine-to-hub coefficients
    from [8, 12] pu/rad and tie coefficients from [0.3, 0.6] pu/rad.
    """
    if n_areas < 2 or gens_per_area < 1:
        raise GridModelError("chain needs n_areas >= 2 and gens_per_area >= 1")
    rng = np.random.default_rng(seed)
    n_gen = n_areas * gens_per_area
    H = rng.uniform(3.0, 9.0, size=n_gen)
    hub = lambda a: n_gen + a  # noqa: E731
    edges = []
    area_of_gen = []
    for a in range(n_areas):
        for g in range(gens_per_area):
            idx = a * gens_per_area + g
            edges.append((idx, hub(a), float(rng.uniform(8.0, 12.0))))
            area_of_gen.append(a + 1)
    ties = []
    for a in range(n_areas - 1):
        ties.append(len(edges))
        edges.append((hub(a), hub(a + 1), float(rng.uniform(0.3, 0.6))))
    model = swing_model(
        H=H, edges=edges, n_nodes=n_gen + n_areas, ties=ties, area_of_gen=area_of_gen,
        damping_ratio=0.3, intra_area_damping=0.1, ref=0,
        name=f"chain_{n_areas}x{gens_per_area}_s{seed}",
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# modes and the eigen-analysis oracle


@dataclass(frozen=True)
class Mode:
    eigenvalue: complex
    pole: complex | None = None

    @property
    def sigma(self) -> float:
        return self.eigenvalue.real

    @property
    def omega(self) -> float:
        return abs(self.eigenvalue.imag)

    @property
    def frequency(self) -> float:
        return self.omega / (2 * math.pi)

    @property
    def damping(self) -> float:
        mag = abs(self.eigenvalue)
        if mag == 0:
            return 1.0
        return -self.eigenvalue.real / mag

    @property
    def oscillatory(self) -> bool:
        return self.eigenvalue.imag > 0

    def in_band(self, band=INTER_AREA_BAND) -> bool:
        return self.oscillatory and band[0] <= self.frequency <= band[1]


def _eig_checked(A: np.ndarray):
    w, V = np.linalg.eig(A)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > 1e10:
        raise DefectiveModelError(f"state matrix defective (eigenvector condition {cond:.3e})")
    return w, V


def true_modes(model: LinearGridModel) -> list[Mode]:
    """Continuous modes of A; conjugate pairs kept once (Im >= 0), sorted by frequency."""
    w, _ = _eig_checked(model.A)
    modes = [Mode(complex(x)) for x in w if x.imag >= 0]
    return sorted(modes, key=lambda m: (m.frequency, m.sigma))


def discretize(model: LinearGridModel, Ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization (A_d, Gamma) of the u_n inputs."""
    n, m = model.B_u.shape
    big = np.zeros((n + m, n + m))
    big[:n, :n] = model.A * Ts
    big[:n, n:] = model.B_u * Ts
    e = scipy.linalg.expm(big)
    return e[:n, :n], e[:n, n:]


def true_residues(model: LinearGridModel, Ts: float):
    """Residues of C_tie (zI - A_d)^-1 Gamma at each discrete pole.

    Returns a ModeResidueTable whose modes are the continuous eigenvalues of
    A (Im >= 0) with their discrete poles exp(lambda Ts).
    """
    from widearea.modal import ModeResidueTable, ResidueEntry

    Ad, Gam = discretize(model, Ts)
    w, V = _eig_checked(model.A)
    W = np.linalg.inv(V)
    obs = model.C_tie @ V            # ties x modes
    ctrl = W @ Gam                   # modes x gens
    keep = [i for i in range(len(w)) if w[i].imag >= 0]
    keep.sort(key=lambda i: (abs(w[i].imag), w[i].real))
    modes = [Mode(complex(w[i]), complex(np.exp(w[i] * Ts))) for i in keep]
    entries = []
    for mi, i in enumerate(keep):
        for t in range(model.n_ties):
            for g in range(model.n_gens):
                entries.append(ResidueEntry(t, g, mi, complex(obs[t, i] * ctrl[i, g])))
    return ModeResidueTable(
        modes=modes, entries=entries, Ts=Ts,
        tie_labels=model.tie_labels, gen_labels=model.gen_labels,
        remainder={(t, g): 0.0 for t in range(model.n_ties) for g in range(model.n_gens)},
    )


def inter_area_mode(model: LinearGridModel, band=INTER_AREA_BAND) -> Mode:
    """Least-damped oscillatory mode inside the band."""
    cands = [m for m in true_modes(model) if m.in_band(band)]
    if not cands:
        raise GridModelError("no mode in band")
    return min(cands, key=lambda m: m.damping)


# ---------------------------------------------------------------------------
# scenarios and simulation


@dataclass(frozen=True)
class Disturbance:
    """kind: ``pulse`` | ``impulse`` | ``load_step``.

    target: ``gen<k>.u`` (exciter input, recorded), ``gen<k>.load`` (torque
    disturbance, not recorded), or for impulses ``gen<k>.speed`` /
    ``state:<i>``. A load_step holds from t_start to the end of the run.
    """
    kind: str
    target: str
    t_start: float
    duration: float = 0.0
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("pulse", "impulse", "load_step"):
            raise GridModelError(f"unknown disturbance kind {self.kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    disturbances: tuple[Disturbance, ...] = ()
    t_end: float = 20.0
    dt_internal: float = 1e-3
    sample_hz: float = 50.0
    noise_std: float = 0.0       # additive measurement noise on tie channels, MW
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "disturbances", tuple(self.disturbances))
        if not 0 < self.dt_internal <= 1.0 / self.sample_hz + 1e-15:
            raise GridModelError("need 0 < dt_internal <= 1/sample_hz")
        ratio = 1.0 / (self.dt_internal * self.sample_hz)
        if abs(ratio - round(ratio)) > 1e-9:
            raise GridModelError("sample_hz must divide 1/dt_internal evenly")
        for d in self.disturbances:
            if d.t_start < 0 or d.t_start + d.duration >= self.t_end:
                raise GridModelError("disturbance must end before t_end")

    @property
    def Ts(self) -> float:
        return 1.0 / self.sample_hz

    @property
    def n_samples(self) -> int:
        return int(math.floor(self.t_end * self.sample_hz + 1e-9)) + 1

    def first_disturbance_sample(self) -> int:
        if not self.disturbances:
            return self.n_samples
        return min(int(round(d.t_start * self.sample_hz)) for d in self.disturbances)

    def to_dict(self) -> dict:
        return {
            "disturbances": [d.__dict__.copy() for d in self.disturbances],
            "t_end": self.t_end, "dt_internal": self.dt_internal,
            "sample_hz": self.sample_hz, "noise_std": self.noise_std,
            "noise_seed": self.noise_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        dist = d.pop("disturbances", None)
        if dist is None and "disturbance" in d:
            one = d.pop("disturbance")
            dist = [] if one is None else [one]
        dist = [Disturbance(**x) for x in (dist or [])]
        return cls(disturbances=tuple(dist), **d)


@dataclass
class SimRecord:
    time: np.ndarray
    channels: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def __len__(self) -> int:
        return len(self.time)

    def speeds(self, gen_labels: Sequence[str]) -> np.ndarray:
        return np.vstack([self.channels[f"{g}.speed"] for g in gen_labels])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.channels)
        w.writerow(["time"] + names)
        cols = [self.time] + [self.channels[n] for n in names]
        for row in zip(*cols):
            w.writerow([format(float(v), ".17g") for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text: str | Path) -> "SimRecord":
        p = Path(path_or_text) if not str(path_or_text).startswith("time") else None
        text = p.read_text() if p is not None else str(path_or_text)
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "time":
            raise ValueError("CSV must start with a 'time' header column")
        header = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
        channels = {name: data[:, i].copy() for i, name in enumerate(header) if i > 0}
        return cls(time=data[:, 0].copy(), channels=channels, metadata={})


def _rk4_maps(A: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step for x' = A x + f with f held constant over the step.

    Returns (Phi, Psi) with x_next = Phi x + Psi f; algebraically identical
    to evaluating the four stages.
    """
    n = A.shape[0]
    I = np.eye(n)
    A2 = A @ A
    A3 = A2 @ A
    Phi = I + dt * A + dt**2 / 2 * A2 + dt**3 / 6 * A3 + dt**4 / 24 * (A3 @ A)
    Psi = dt * I + dt**2 / 2 * A + dt**3 / 6 * A2 + dt**4 / 24 * A3
    return Phi, Psi


def _schedule(model: LinearGridModel, scenario: ScenarioConfig):
    """Per-sample exciter inputs, load torques and state impulses."""
    ns = scenario.n_samples
    u = np.zeros((ns, model.n_gens))
    load = np.zeros((ns, model.n_gens))
    impulses: dict[int, np.ndarray] = {}
    fs = scenario.sample_hz
    for d in scenario.disturbances:
        j0 = int(round(d.t_start * fs))
        j1 = max(j0 + 1, int(round((d.t_start + d.duration) * fs)))
        label, _, kind = d.target.rpartition(".")
        if d.kind == "impulse":
            dx = np.zeros(model.n_states)
            if d.target.startswith("state:"):
                i = int(d.target.split(":", 1)[1])
                if not 0 <= i < model.n_states:
                    raise GridModelError(f"state index {i} out of range")
                dx[i] = d.magnitude
            elif kind == "speed":
                g = model.gen_index(label)
                dx = model.C_speed[g] * d.magnitude
            else:
                raise GridModelError(f"impulse target {d.target!r} must be a speed or state")
            impulses[j0] = impulses.get(j0, 0) + dx
            continue
        g = model.gen_index(label)
        stop = ns if d.kind == "load_step" else j1
        if kind == "u":
            u[j0:stop, g] += d.magnitude
        elif kind == "load":
            load[j0:stop, g] += d.magnitude
        else:
            raise GridModelError(f"pulse target {d.target!r} must be gen<k>.u or gen<k>.load")
    return u, load, impulses


def simulate(model: LinearGridModel, scenario: ScenarioConfig, controllers: Sequence = ()) -> SimRecord:
    """Fixed-step RK4 simulation with discrete controllers at the sample rate.

    At sample j the measurement y(j) is taken, every controller computes its
    output, the output enters a FIFO of ``round(delay_ms*fs/1000)`` samples
    and the dequeued value is held on the generator input over [t_j, t_j+1).
    """
    model.check_dimensions()
    fs = scenario.sample_hz
    steps = int(round(1.0 / (scenario.dt_internal * fs)))
    dt = scenario.dt_internal
    ns = scenario.n_samples
    Phi, Psi = _rk4_maps(model.A, dt)

    u_sched, load_sched, impulses = _schedule(model, scenario)
    ctrl_rows = []
    fifos = []
    for c in controllers:
        c.reset()
        row = model.output_row(c.input_channel)
        g = model.gen_index(c.output_gen)
        d = int(round(c.delay_ms * fs / 1000.0))
        ctrl_rows.append((row, g))
        fifos.append([0.0] * d)

    x = np.zeros(model.n_states)
    speed = np.zeros((ns, model.n_gens))
    u_rec = np.zeros((ns, model.n_gens))
    tie = np.zeros((ns, model.n_ties))
    for j in range(ns):
        if j in impulses:
            x = x + impulses[j]
        speed[j] = model.C_speed @ x
        tie[j] = model.C_tie @ x
        u = u_sched[j].copy()
        for (row, g), c, fifo in zip(ctrl_rows, controllers, fifos):
            v = c.step(float(row @ x))
            if fifo:
                fifo.append(v)
                v = fifo.pop(0)
            u[g] += v
        u_rec[j] = u
        if j == ns - 1:
            break
        f = model.B_u @ (u + load_sched[j])
        for s in range(steps):
            x = Phi @ x + Psi @ f
            peak = np.max(np.abs(x))
            if not peak <= DIVERGENCE_LIMIT:
                raise SimulationDiverged(j / fs + (s + 1) * dt, float(peak))

    if scenario.noise_std > 0:
        rng = np.random.default_rng(scenario.noise_seed)
        tie = tie + rng.normal(0.0, scenario.noise_std, size=tie.shape)

    channels: dict[str, np.ndarray] = {}
    for g, lab in enumerate(model.gen_labels):
        channels[f"{lab}.speed"] = speed[:, g]
    for g, lab in enumerate(model.gen_labels):
        channels[f"{lab}.u"] = u_rec[:, g]
    for t, lab in enumerate(model.tie_labels):
        channels[f"{lab}.p"] = tie[:, t]
    meta = {
        "model": model.name,
        "model_hash": model.digest(),
        "scenario": scenario.to_dict(),
        "controllers": [getattr(c, "describe", lambda: repr(c))() for c in controllers],
    }
    return SimRecord(time=np.arange(ns) / fs, channels=channels, metadata=meta)


# ---------------------------------------------------------------------------
# closed-loop discrete oracle


def closed_loop_matrix(model: LinearGridModel, controllers: Sequence, sample_hz: float = 50.0) -> np.ndarray:
    """Augmented discrete state matrix of plant + linear controllers + delay FIFOs.

    Matches the timing of :func:`simulate` with saturation ignored. State
    order: plant, then per controller its internal states followed by its
    FIFO (oldest value last).
    """
    Ts = 1.0 / sample_hz
    Ad, Gam = discretize(model, Ts)
    n = model.n_states
    blocks = []
    total = n
    for c in controllers:
        Ac, Bc, Cc, Dc = c.state_space()
        d = int(round(c.delay_ms * sample_hz / 1000.0))
        blocks.append((c, Ac, Bc, Cc, Dc, d, total))
        total += Ac.shape[0] + d
    Phi = np.zeros((total, total))
    Phi[:n, :n] = Ad
    for c, Ac, Bc, Cc, Dc, d, off in blocks:
        nc = Ac.shape[0]
        row = model.output_row(c.input_channel)
        g = model.gen_index(c.output_gen)
        sc = slice(off, off + nc)
        # controller internal state update
        Phi[sc, sc] = Ac
        Phi[sc, :n] += np.outer(Bc, row)
        # controller output v(j) = Cc s + Dc y
        v_state = np.zeros(total)
        v_state[sc] = Cc
        v_state[:n] += Dc * row
        if d == 0:
            Phi[:n, :] += np.outer(Gam[:, g], v_state)
        else:
            f0 = off + nc
            Phi[f0, :] += v_state
            for i in range(1, d):
                Phi[f0 + i, f0 + i - 1] = 1.0
            Phi[:n, f0 + d - 1] += Gam[:, g]
    return Phi
