"""Residue-based lead-lag damping controller: design and discrete realization.

Continuous form

    H(s) = K * sTw/(1 + sTw) * ((1 + sT_lead)/(1 + sT_lag))^m

The design works on the first-order eigenvalue sensitivity of a
negative-feedback loop u = -K H(s) y around the plant residue R at the mode
lambda: d_lambda ~= -K R H1(lambda), with H1 the unity-gain compensator
(washout, lead-lag stages and the transport delay). The lead-lag stages
rotate R*H1 onto the negative real axis so that a negative K moves the
mode straight to the left.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from widearea.grid import Mode


class DesignError(ValueError):
    pass


class InfeasibleCompensation(DesignError):
    pass


class DiscretizationError(DesignError):
    pass


DEFAULT_ZETA_TARGET = 0.15
DEFAULT_TW = 10.0
DEFAULT_PHI_MAX = 60.0
DEFAULT_M_MAX = 4
DEFAULT_VLIMITS = (-0.15, 0.15)


@dataclass(frozen=True)
class WadcParams:
    K_WADC: float
    T_w: float
    T_lead: float
    T_lag: float
    m: int = 1
    V_min: float = DEFAULT_VLIMITS[0]
    V_max: float = DEFAULT_VLIMITS[1]

    def __post_init__(self):
        if not (self.T_w > 0 and self.T_lead > 0 and self.T_lag > 0):
            raise DesignError("time constants must be positive")
        if int(self.m) != self.m or self.m < 1:
            raise DesignError("m must be a positive integer")
        if not self.V_min < 0 < self.V_max:
            raise DesignError("limits must satisfy V_min < 0 < V_max")
        if not math.isfinite(self.K_WADC):
            raise DesignError("non-finite gain")

    def compensator(self, s: complex) -> complex:
        """Unity-gain H1(s): washout times the lead-lag cascade."""
        return washout(s, self.T_w) * leadlag(s, self.T_lead, self.T_lag) ** self.m

    def response(self, s: complex) -> complex:
        return self.K_WADC * self.compensator(s)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "WadcParams":
        return cls(**{k: d[k] for k in ("K_WADC", "T_w", "T_lead", "T_lag", "m", "V_min", "V_max") if k in d})


def washout(s: complex, Tw: float) -> complex:
    return s * Tw / (1 + s * Tw)


def leadlag(s: complex, T1: float, T2: float) -> complex:
    return (1 + s * T1) / (1 + s * T2)


def continuous_residue(R_d: complex, pole: complex, Ts: float) -> complex:
    """Continuous-time equivalent of a discrete residue at pole p.

    Near p, z - p ~= p*Ts*(s - lambda), so R_d/(z - p) ~= R_d/(p Ts) / (s - lambda).
    """
    return complex(R_d) / (complex(pole) * Ts)


def _wrap_deg(x: float) -> float:
    y = math.fmod(x + 180.0, 360.0)
    if y <= 0:
        y += 360.0
    return y - 180.0


def design(
    R: complex,
    mode: Mode,
    zeta_target: float = DEFAULT_ZETA_TARGET,
    Tw: float = DEFAULT_TW,
    phi_max_deg: float = DEFAULT_PHI_MAX,
    vlimits: tuple[float, float] = DEFAULT_VLIMITS,
    m_max: int = DEFAULT_M_MAX,
    delay_s: float = 0.0,
    gain_limit: float | None = None,
) -> WadcParams:
    """Lead-lag parameters that move ``mode`` to ``zeta_target`` at fixed omega_n.

    ``delay_s`` folds a known transport delay into the compensation angle.
    ``gain_limit`` caps |K| (used to compare loops at equal control effort).
    """
    lam = complex(mode.eigenvalue)
    if not lam.imag > 0:
        raise DesignError("mode must be oscillatory")
    if R == 0 or not cmath.isfinite(complex(R)):
        raise DesignError("residue must be finite and non-zero")
    if not 0 < zeta_target < 1:
        raise DesignError("zeta_target must lie in (0, 1)")
    if phi_max_deg <= 0 or phi_max_deg >= 90:
        raise DesignError("phi_max_deg must lie in (0, 90)")
    omega = lam.imag
    base = complex(R) * washout(lam, Tw) * cmath.exp(-lam * delay_s)
    phi = _wrap_deg(180.0 - math.degrees(cmath.phase(base)))
    m = max(1, math.ceil(abs(phi) / phi_max_deg - 1e-12))
    if m > m_max:
        raise InfeasibleCompensation(
            f"compensation {phi:.1f} deg needs {m} stages > m_max={m_max}")
    phi_s = math.radians(phi / m)
    sn = math.sin(abs(phi_s))
    alpha = (1 - sn) / (1 + sn)
    T_lead = 1.0 / (omega * math.sqrt(alpha))
    T_lag = alpha * T_lead
    if phi_s < 0:
        T_lead, T_lag = T_lag, T_lead
    wn = abs(lam)
    lam_des = wn * complex(-zeta_target, math.sqrt(1 - zeta_target**2))
    H1 = washout(lam, Tw) * leadlag(lam, T_lead, T_lag) ** m * cmath.exp(-lam * delay_s)
    K = -abs(lam_des - lam) / abs(complex(R) * H1)
    if gain_limit is not None:
        K = max(K, -abs(gain_limit))
    return WadcParams(K_WADC=K + 0.0, T_w=Tw, T_lead=T_lead, T_lag=T_lag, m=m,
                      V_min=vlimits[0], V_max=vlimits[1])


def predicted_shift(params: WadcParams, R: complex, mode: Mode, delay_s: float = 0.0) -> complex:
    """First-order eigenvalue departure -K R H1(lambda)."""
    lam = complex(mode.eigenvalue)
    return -params.K_WADC * complex(R) * params.compensator(lam) * cmath.exp(-lam * delay_s)


# ---------------------------------------------------------------------------
# discrete realization


def _tustin_first_order(n1: float, n0: float, d1: float, d0: float, Ts: float):
    """(n1 s + n0)/(d1 s + d0) -> (b0 + b1 z^-1)/(1 + a1 z^-1)."""
    c = 2.0 / Ts
    B0 = n1 * c + n0
    B1 = -n1 * c + n0
    A0 = d1 * c + d0
    A1 = -d1 * c + d0
    return B0 / A0, B1 / A0, A1 / A0


def _section_ss(b0: float, b1: float, a1: float):
    """One-state realization of (b0 + b1 z^-1)/(1 + a1 z^-1)."""
    return (np.array([[-a1]]), np.array([1.0]), np.array([b1 - b0 * a1]), b0)


def _series(s1, s2):
    A1, B1, C1, D1 = s1
    A2, B2, C2, D2 = s2
    n1, n2 = A1.shape[0], A2.shape[0]
    A = np.zeros((n1 + n2, n1 + n2))
    A[:n1, :n1] = A1
    A[n1:, :n1] = np.outer(B2, C1)
    A[n1:, n1:] = A2
    B = np.concatenate([B1, B2 * D1])
    C = np.concatenate([D2 * C1, C2])
    return A, B, C, D2 * D1


@dataclass
class DiscreteController:
    """Cascade of first-order Tustin sections with output gain and clamp.

    Timing per sample: v = clamp(gain * (C s + D y_scaled)); s <- A s + B y_scaled.
    """
    sections: list[tuple[float, float, float]]
    gain: float
    input_channel: str
    output_gen: str
    Ts: float = 0.02
    delay_ms: float = 0.0
    v_min: float = -math.inf
    v_max: float = math.inf
    input_scale: float = 1.0
    name: str = "controller"
    _ss: tuple = field(default=None, repr=False)
    _x: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise DesignError("v_min must be below v_max")
        ss = (np.zeros((0, 0)), np.zeros(0), np.zeros(0), 1.0)
        for b0, b1, a1 in self.sections:
            ss = _series(ss, _section_ss(b0, b1, a1))
        self._ss = ss
        self.reset()

    @property
    def n_states(self) -> int:
        return self._ss[0].shape[0]

    def reset(self) -> None:
        self._x = np.zeros(self.n_states)

    def step(self, y: float) -> float:
        A, B, C, D = self._ss
        ys = float(y) * self.input_scale
        v = self.gain * (float(C @ self._x) + D * ys)
        self._x = A @ self._x + B * ys
        if not np.all(np.isfinite(self._x)):
            raise DesignError(f"{self.name}: non-finite controller state")
        return min(max(v, self.v_min), self.v_max)

    def state_space(self):
        """Linear (unsaturated) realization (A, B, C, D) in the raw input units."""
        A, B, C, D = self._ss
        k = self.input_scale
        return A.copy(), B * k, C * self.gain, D * self.gain * k

    def frequency_response(self, f_hz) -> np.ndarray:
        """Unsaturated discrete response at z = exp(j 2 pi f Ts)."""
        A, B, C, D = self.state_space()
        out = []
        for f in np.atleast_1d(f_hz):
            z = cmath.exp(2j * math.pi * f * self.Ts)
            n = A.shape[0]
            out.append(D + (C @ np.linalg.solve(z * np.eye(n) - A, B) if n else 0.0))
        return np.asarray(out, dtype=complex)

    def describe(self) -> dict:
        return {"name": self.name, "input": self.input_channel, "output": self.output_gen,
                "delay_ms": self.delay_ms, "gain": self.gain, "limits": [self.v_min, self.v_max]}


def realize(
    params: WadcParams,
    Ts: float = 0.02,
    delay_ms: float = 0.0,
    input_channel: str = "tie1.p",
    output_gen: str = "gen1",
    input_scale: float = 1.0,
    name: str = "wadc",
) -> DiscreteController:
    """Tustin realization; the realized output gain is -K_WADC (negative feedback)."""
    if not Ts > 0:
        raise DiscretizationError("Ts must be positive")
    if Ts >= 2 * min(params.T_lag, params.T_w):
        raise DiscretizationError(
            f"Ts={Ts} too coarse for T_lag={params.T_lag:.4g}, T_w={params.T_w:.4g}")
    secs = [_tustin_first_order(params.T_w, 0.0, params.T_w, 1.0, Ts)]
    ll = _tustin_first_order(params.T_lead, 1.0, params.T_lag, 1.0, Ts)
    secs += [ll] * params.m
    return DiscreteController(sections=secs, gain=-params.K_WADC, input_channel=input_channel,
                              output_gen=output_gen, Ts=Ts, delay_ms=delay_ms,
                              v_min=params.V_min, v_max=params.V_max,
                              input_scale=input_scale, name=name)


# ---------------------------------------------------------------------------
# simplified PSS

PSS_GAIN = 0.01
PSS_TW = 10.0
PSS_T1 = 0.15
PSS_T2 = 0.05
PSS_VLIMITS = (-0.15, 0.15)


def pss(gen: str, K: float = PSS_GAIN, Tw: float = PSS_TW, T1: float = PSS_T1,
        T2: float = PSS_T2, Ts: float = 0.02, vlimits=PSS_VLIMITS) -> DiscreteController:
    """Washout + one lead-lag on the generator's own speed deviation.

    Output -K * H(s) * dw in per-unit torque; no transport delay (local signal).
    """
    if K < 0:
        raise DesignError("PSS gain must be non-negative")
    secs = [_tustin_first_order(Tw, 0.0, Tw, 1.0, Ts),
            _tustin_first_order(T1, 1.0, T2, 1.0, Ts)]
    return DiscreteController(sections=secs, gain=-K, input_channel=f"{gen}.speed",
                              output_gen=gen, Ts=Ts, delay_ms=0.0,
                              v_min=vlimits[0], v_max=vlimits[1], name=f"pss-{gen}")
