"""End-to-end run: simulate -> group -> identify -> rank -> design -> closed loop.

Every stage writes its artifacts into the run directory as soon as it
finishes, so a failure leaves the earlier outputs in place. Stage failures
surface as :class:`StageError` naming the stage; wire problems keep their
:class:`ProtocolError` type so the CLI can map them to their own exit code.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from widearea.admm import ConsensusResult
from widearea.coherency import Grouping, group, speed_windows
from widearea.config import ConfigError, PipelineConfig
from widearea.grid import (
    Disturbance,
    LinearGridModel,
    ScenarioConfig,
    SimRecord,
    build_chain,
    build_two_area,
    closed_loop_matrix,
    inter_area_mode,
    simulate,
    true_residues,
)
from widearea.identify import ProbePlan, area_blocks, areas_from_assignment, identify, probe_scenario
from widearea.modal import LoopRanking, ModeResidueTable, rank_loops, residue_table
from widearea.protocol import ControllerParams, LoopSelection, ProtocolError
from widearea.sysid import ArxEstimate
from widearea.wadc import WadcParams, continuous_residue, design, pss, realize

log = logging.getLogger(__name__)

STAGES = ("simulate", "group", "identify", "rank", "design", "closedloop")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


class ReportError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics


def relative_error(y_exc, y_act) -> float:
    """||y_exc - y_act||_2 / ||y_exc||_2."""
    a = np.asarray(y_exc, dtype=float)
    b = np.asarray(y_act, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape} vs {b.shape}")
    den = float(np.linalg.norm(a))
    if den == 0:
        raise ValueError("baseline series has zero norm")
    return float(np.linalg.norm(a - b)) / den


def trough_index(y, start: int = 0) -> int:
    """Global minimum of y at or after sample ``start``."""
    y = np.asarray(y, dtype=float)
    if not 0 <= start < len(y):
        raise ValueError("start outside the series")
    return start + int(np.argmin(y[start:]))


def trough_reduction_pct(y_exc, y_act, idx: int) -> float:
    base = abs(float(y_exc[idx]))
    if base == 0:
        raise ValueError("baseline trough is zero")
    return 100.0 * (base - abs(float(y_act[idx]))) / base


def tracked_mode(Phi: np.ndarray, reference: complex, Ts: float, band=(0.1, 1.0)):
    """Continuous equivalent of the closed-loop eigenvalue nearest ``reference``.

    Returns (lambda, zeta, max |eig|). Delay-line poles at the origin are skipped.
    """
    ev = np.linalg.eigvals(Phi)
    lam = [complex(np.log(z) / Ts) for z in ev if abs(z) > 1e-9]
    cand = [x for x in lam if x.imag > 0 and band[0] <= x.imag / (2 * math.pi) <= band[1]]
    if not cand:
        raise ValueError("no closed-loop eigenvalue in the band")
    best = min(cand, key=lambda x: abs(x - reference))
    return best, -best.real / abs(best), float(np.max(np.abs(ev)))


# ---------------------------------------------------------------------------
# construction helpers


def build_model(cfg: PipelineConfig) -> LinearGridModel:
    m = cfg["model"]
    if m["name"] == "two_area":
        return build_two_area()
    return build_chain(int(m["n_areas"]), int(m["gens_per_area"]), int(m["seed"]))


def scenario_from(cfg: PipelineConfig) -> ScenarioConfig:
    try:
        return ScenarioConfig.from_dict(cfg["scenario"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key 'scenario': {e}") from None


def probe_plan(cfg: PipelineConfig) -> ProbePlan:
    p = cfg["probe"]
    return ProbePlan(t_first=p["t_first"], spacing=p["spacing"], duration=p["duration"], magnitude=p["magnitude"])


def relative_speed_pair(cfg: PipelineConfig, model: LinearGridModel) -> tuple[str, str]:
    if cfg["relative_speed"] is not None:
        g1, g2 = cfg["relative_speed"]
        model.gen_index(g1), model.gen_index(g2)
        return g1, g2
    areas = sorted(set(model.area_of_gen))
    return (model.gen_labels[model.gens_in_area(areas[0])[0]],
            model.gen_labels[model.gens_in_area(areas[-1])[0]])


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _cplx(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def loop_dict(model: LinearGridModel, lp) -> dict:
    return {"tie": model.tie_labels[lp.tie], "gen": model.gen_labels[lp.gen], "absR": lp.absR,
            "R": _cplx(lp.R), "f": lp.f, "strength": lp.strength}


# ---------------------------------------------------------------------------
# the run


@dataclass
class Run:
    cfg: PipelineConfig
    out: Path
    dist: bool = False
    global_addr: str | None = None
    model: LinearGridModel = field(init=False)
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.model = build_model(self.cfg)

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        p.write_text(text)
        return p

    @property
    def fs(self) -> float:
        return float(self.cfg["scenario"]["sample_hz"])

    # -- stages ----------------------------------------------------------------

    def stage_simulate(self) -> None:
        cfg, m = self.cfg, self.model
        seed = cfg["seed"]
        probe = probe_scenario(m, probe_plan(cfg), seed=seed, noise_std=cfg["probe"]["noise_std"])
        probe = ScenarioConfig(disturbances=probe.disturbances, t_end=probe.t_end,
                               dt_internal=cfg["scenario"]["dt_internal"],
                               sample_hz=cfg["scenario"]["sample_hz"],
                               noise_std=probe.noise_std, noise_seed=probe.noise_seed)
        rec_probe = simulate(m, probe)
        rec_base = simulate(m, scenario_from(cfg))
        self.write("config.json", cfg.to_json() + "\n")
        self.write("sim_probe.csv", rec_probe.to_csv())
        self.write("sim_baseline.csv", rec_base.to_csv())
        self.state.update(rec_probe=rec_probe, rec_base=rec_base)

    def stage_group(self) -> None:
        cfg, m = self.cfg, self.model
        c = cfg["coherency"]
        sc = scenario_from(cfg)
        start = sc.first_disturbance_sample()
        length = int(round(c["window_s"] * self.fs))
        X = speed_windows(self.state["rec_base"], m.gen_labels, start, length)
        k = m.n_areas if c["k"] is None else int(c["k"])
        g = group(X, k, sigma=c["sigma"], landmarks=c["landmarks"], seed=int(c["seed"]),
                  labels=m.gen_labels, exact=bool(c["exact"]))
        self.write("grouping.json", g.to_json() + "\n")
        self.state["grouping"] = g

    def stage_identify(self) -> None:
        cfg, m = self.cfg, self.model
        areas = areas_from_assignment(self.state["grouping"].assignment)
        s, a = cfg["sysid"], cfg["admm"]
        if len(areas) < 2 and self.dist:
            raise StageError("identify", "distributed identification needs at least 2 areas")
        if self.dist:
            res = identify_dist(self, areas)
        else:
            res = identify(self.state["rec_probe"], m, areas, probe_plan(cfg), k=s["k"], N=s["N"],
                           decimate=s["decimate"], detrend=s["detrend"], rho=a["rho"],
                           eps_abs=a["eps_abs"], eps_rel=a["eps_rel"], max_iter=a["max_iter"],
                           ridge=s["ridge"], metric=a["metric"])
        if not res.converged:
            log.warning("consensus stopped at max_iter=%d without meeting tolerances", res.iterations)
        est = res.estimate
        self.write("consensus_trace.json", _dumps(res.trace))
        self.write("arx.json", _dumps({
            "Ts": est.Ts, "a": [float(x) for x in est.a], "converged": res.converged,
            "iterations": res.iterations,
            "b": [{"tie": m.tie_labels[t], "gen": m.gen_labels[g], "b": [float(x) for x in b]}
                  for (t, g), b in sorted(est.b.items())],
        }))
        self.state["consensus"] = res

    def stage_rank(self) -> None:
        m = self.model
        est = self.state["consensus"].estimate
        tab, rk = rank_estimate(m, est)
        self.write("modes.json", _dumps(tab.to_dict(selected=(rk.top.tie, rk.top.gen))))
        self.write("loops.json", _dumps({"mode": rk.mode, "loops": [loop_dict(m, lp) for lp in rk.loops]}))
        self.state.update(table=tab, ranking=rk)

    def stage_design(self) -> None:
        strong, weak = design_pair(self.cfg, self.model, self.state["table"], self.state["ranking"])
        self.write("wadc_strong.json", strong.to_json() + "\n")
        self.write("wadc_weak.json", weak.to_json() + "\n")
        self.state.update(wadc_strong=strong, wadc_weak=weak)

    def controllers(self, case: str, delay_ms: float) -> list:
        cfg, m = self.cfg, self.model
        rk = self.state["ranking"]
        Ts = 1.0 / self.fs
        ps = cfg["pss"]

        def wadc(params: WadcParams, lp, name):
            return realize(params, Ts=Ts, delay_ms=delay_ms, input_channel=f"{m.tie_labels[lp.tie]}.p",
                           output_gen=m.gen_labels[lp.gen], input_scale=1.0 / m.base_mva, name=name)

        def pss_all():
            return [pss(g, K=ps["gain"], Tw=ps["Tw"], T1=ps["T1"], T2=ps["T2"], Ts=Ts) for g in m.gen_labels]

        if case == "exciter_only":
            return []
        if case == "pss":
            return pss_all()
        if case == "wadc_strong":
            return [wadc(self.state["wadc_strong"], rk.top, "wadc-strong")]
        if case == "wadc_weak":
            return [wadc(self.state["wadc_weak"], rk.bottom, "wadc-weak")]
        if case == "pss_wadc":
            return pss_all() + [wadc(self.state["wadc_strong"], rk.top, "wadc-strong")]
        raise ConfigError(f"unknown controller case {case!r}")

    def stage_closedloop(self) -> dict:
        cfg, m = self.cfg, self.model
        sc = scenario_from(cfg)
        Ts = 1.0 / self.fs
        g1, g2 = relative_speed_pair(cfg, m)
        ol = inter_area_mode(m)
        cases = list(cfg["controllers"])
        if "exciter_only" not in cases:
            cases = ["exciter_only"] + cases
        ys = {}
        results = {}
        for case in cases:
            ctrls = self.controllers(case, cfg["delay_ms"])
            rec = simulate(m, sc, ctrls)
            self.write(f"closedloop_{case}.csv", rec.to_csv())
            ys[case] = rec[f"{g1}.speed"] - rec[f"{g2}.speed"]
            lam, zeta, rmax = tracked_mode(closed_loop_matrix(m, ctrls, self.fs), ol.eigenvalue, Ts)
            results[case] = {"zeta": zeta, "f": lam.imag / (2 * math.pi), "max_abs_eig": rmax,
                             "stable": rmax < 1.0, "bounded": _bounded(rec, m)}
        clear = max(int(round((d.t_start + d.duration) * self.fs)) for d in sc.disturbances)
        base = ys["exciter_only"]
        it = trough_index(base, clear)
        for case in cases:
            if case == "exciter_only":
                continue
            results[case]["relative_error"] = relative_error(base, ys[case])
            results[case]["trough_reduction_pct"] = trough_reduction_pct(base, ys[case], it)
        robust = {}
        for d in cfg["robustness_delays_ms"]:
            ctrls = self.controllers("wadc_strong", d)
            lam, zeta, rmax = tracked_mode(closed_loop_matrix(m, ctrls, self.fs), ol.eigenvalue, Ts)
            rec = simulate(m, sc, ctrls)
            robust[format(float(d), "g")] = {"zeta": zeta, "max_abs_eig": rmax, "stable": rmax < 1.0,
                                             "bounded": _bounded(rec, m)}
        self.state.update(closed=results, robust=robust, trough=it, ys=ys, rel_pair=(g1, g2))
        return results

    # -- summary ---------------------------------------------------------------

    def summary(self) -> dict:
        m, st = self.model, self.state
        res: ConsensusResult = st["consensus"]
        tab: ModeResidueTable = st["table"]
        rk: LoopRanking = st["ranking"]
        mode = tab.modes[rk.mode]
        ol = inter_area_mode(m)
        orc = rank_loops(true_residues(m, res.estimate.Ts))
        return {
            "model": {"name": m.name, "hash": m.digest(), "n_gens": m.n_gens, "n_ties": m.n_ties},
            "grouping": list(st["grouping"].assignment),
            "identification": {
                "iterations": res.iterations, "converged": res.converged, "Ts": res.estimate.Ts,
                "f": mode.frequency, "zeta": mode.damping,
                "oracle_f": ol.frequency, "oracle_zeta": ol.damping,
                "f_rel_err": abs(mode.frequency - ol.frequency) / ol.frequency,
                "zeta_rel_err": abs(mode.damping - ol.damping) / ol.damping,
            },
            "loops": {
                "selected": loop_dict(m, rk.top), "weak": loop_dict(m, rk.bottom),
                "oracle_top": {"tie": m.tie_labels[orc.top.tie], "gen": m.gen_labels[orc.top.gen]},
                "matches_oracle": (rk.top.tie, rk.top.gen) == (orc.top.tie, orc.top.gen),
            },
            "wadc": {"strong": st["wadc_strong"].to_dict(), "weak": st["wadc_weak"].to_dict()},
            "open_loop_zeta": ol.damping,
            "delay_ms": self.cfg["delay_ms"],
            "relative_speed": list(st["rel_pair"]),
            "trough": {"index": st["trough"], "time": st["trough"] / self.fs},
            "cases": st["closed"],
            "case_order": list(st["closed"]),
            "robustness": st["robust"],
        }

    def run(self, until: str = "closedloop") -> dict | None:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        for name in STAGES:
            fn = getattr(self, f"stage_{name}")
            try:
                fn()
            except (StageError, ProtocolError, ConfigError):
                raise
            except Exception as e:
                raise StageError(name, f"{type(e).__name__}: {e}") from e
            if name == until:
                break
        if until == "closedloop":
            summ = self.summary()
            self.write("summary.json", _dumps(summ))
            return summ
        return None


def _bounded(rec: SimRecord, model: LinearGridModel) -> bool:
    """Speed deviations in the last quarter stay below the overall peak."""
    X = rec.speeds(model.gen_labels)
    if not np.all(np.isfinite(X)):
        return False
    q = X.shape[1] * 3 // 4
    peak = float(np.max(np.abs(X)))
    return peak == 0 or float(np.max(np.abs(X[:, q:]))) < peak


def rank_estimate(model: LinearGridModel, est: ArxEstimate) -> tuple[ModeResidueTable, LoopRanking]:
    tab = residue_table(est.a, est.b, est.Ts, model.tie_labels, model.gen_labels)
    return tab, rank_loops(tab)


def design_pair(cfg: PipelineConfig, model: LinearGridModel, tab: ModeResidueTable,
                rk: LoopRanking) -> tuple[WadcParams, WadcParams]:
    """Strong-loop design, then the weak loop capped at the strong loop's |K|."""
    w = cfg["wadc"]
    mode = tab.modes[rk.mode]
    kw = dict(zeta_target=w["zeta_target"], Tw=w["Tw"], phi_max_deg=w["phi_max_deg"],
              vlimits=(w["vmin"], w["vmax"]), m_max=w["m_max"], delay_s=cfg["delay_ms"] / 1000.0)

    def req(lp):
        return continuous_residue(lp.R, mode.pole, tab.Ts) / model.base_mva

    strong = design(req(rk.top), mode, **kw)
    weak = design(req(rk.bottom), mode, gain_limit=abs(strong.K_WADC), **kw)
    return strong, weak


# ---------------------------------------------------------------------------
# distributed identification


def identify_dist(run: Run, areas: dict[int, list[int]]) -> ConsensusResult:
    """Global processor in this process, one OS process per area."""
    from widearea.procnet import GlobalServer, SessionConfig, resolve_addr

    cfg = run.cfg
    a, s = cfg["admm"], cfg["sysid"]
    Ts = s["decimate"] / run.fs
    sess = SessionConfig(areas=list(areas), global_addr=resolve_addr(run.global_addr),
                         timeout_ms=cfg["timeout_ms"], max_iter=a["max_iter"], rho=a["rho"],
                         eps_abs=a["eps_abs"], eps_rel=a["eps_rel"], metric=a["metric"], Ts=Ts, k=s["k"])
    srv = GlobalServer(sess)
    host, port = srv.address
    procs = []
    try:
        for q in areas:
            cmd = [sys.executable, "-m", "widearea.cli", "local", "--config", str(run.out / "config.json"),
                   "--out", str(run.out), "--area", str(q), "--global-addr", f"{host}:{port}"]
            procs.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE))

        def post(est: ArxEstimate):
            tab, rk = rank_estimate(run.model, est)
            strong, _ = design_pair(cfg, run.model, tab, rk)
            top = rk.top
            return [LoopSelection(tie=run.model.tie_labels[top.tie], gen=run.model.gen_labels[top.gen],
                                  absR=top.absR, f=top.f),
                    ControllerParams(params=strong.to_dict())]

        try:
            res = srv.run(post)
        finally:
            (run.out / "transcript.bin").write_bytes(srv.transcript())
    except BaseException:
        for p in procs:
            p.kill()
        for p in procs:
            p.wait()
        raise
    for q, p in zip(areas, procs):
        try:
            _, err = p.communicate(timeout=cfg["timeout_ms"] / 1000.0)
        except subprocess.TimeoutExpired:
            p.kill()
            raise ProtocolError(f"area {q} process did not exit") from None
        if p.returncode != 0:
            raise ProtocolError(f"area {q} process exited with {p.returncode}: {err.decode().strip()}")
    return res


def local_role(cfg: PipelineConfig, run_dir: Path, area: int, global_addr: str | None):
    """Body of one area process: rebuild this area's blocks from the run directory."""
    from widearea.procnet import resolve_addr, run_local

    model = build_model(cfg)
    rec = SimRecord.from_csv(Path(run_dir) / "sim_probe.csv")
    gj = json.loads((Path(run_dir) / "grouping.json").read_text())
    assignment = [gj["assignment"][g] for g in model.gen_labels]
    areas = areas_from_assignment(assignment)
    if area not in areas:
        raise ConfigError(f"area {area} not present in grouping")
    s = cfg["sysid"]
    blocks = area_blocks(rec, model, {area: areas[area]}, probe_plan(cfg), k=s["k"], N=s["N"],
                         decimate=s["decimate"], detrend=s["detrend"])[0]
    return run_local(area, blocks, resolve_addr(global_addr), ridge=s["ridge"], timeout_ms=cfg["timeout_ms"])


# ---------------------------------------------------------------------------
# report


def expected_artifacts(cases: Sequence[str]) -> list[str]:
    return (["summary.json", "consensus_trace.json", "loops.json", "grouping.json"]
            + [f"closedloop_{c}.csv" for c in cases])


def cmd_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Plot-data CSVs and a manifest from a completed run directory."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    summ_p = run_dir / "summary.json"
    if not summ_p.exists():
        raise ReportError(f"{run_dir}: missing artifacts {expected_artifacts(['exciter_only'])}"
                          " (closedloop_<case>.csv for each configured case)")
    summ = json.loads(summ_p.read_text())
    order = summ.get("case_order") or sorted(summ["cases"])
    cases = ["exciter_only"] + [c for c in order if c != "exciter_only"]
    missing = [f for f in expected_artifacts(cases) if not (run_dir / f).exists()]
    if missing:
        raise ReportError(f"{run_dir}: missing artifacts {missing}")
    g1, g2 = summ["relative_speed"]
    recs = {c: SimRecord.from_csv(run_dir / f"closedloop_{c}.csv") for c in cases}
    t = recs["exciter_only"].time
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def table(name, header, cols):
        lines = [",".join(header)]
        for row in zip(*cols):
            lines.append(",".join(format(float(v), ".17g") for v in row))
        p = out_dir / name
        p.write_text("\n".join(lines) + "\n")
        written.append(p)

    table("relative_speed.csv", ["time"] + cases,
          [t] + [recs[c][f"{g1}.speed"] - recs[c][f"{g2}.speed"] for c in cases])
    ties = [k[:-2] for k in recs["exciter_only"].channels if k.endswith(".p")]
    for tl in ties:
        table(f"{tl}_flow.csv", ["time"] + cases, [t] + [recs[c][f"{tl}.p"] for c in cases])
    trace = json.loads((run_dir / "consensus_trace.json").read_text())
    table("consensus_residuals.csv", ["iter", "r_primal", "s_dual"],
          [[r["iter"] for r in trace], [r["r_primal"] for r in trace], [r["s_dual"] for r in trace]])
    loops = json.loads((run_dir / "loops.json").read_text())["loops"]
    p = out_dir / "loop_residues.csv"
    p.write_text("tie,gen,absR,strength\n" + "".join(
        f"{lp['tie']},{lp['gen']},{format(lp['absR'], '.17g')},{lp['strength']}\n" for lp in loops))
    written.append(p)
    metrics = [c for c in cases if c != "exciter_only"]
    p = out_dir / "case_metrics.csv"
    p.write_text("case,zeta,relative_error,trough_reduction_pct\n" + "".join(
        f"{c},{format(summ['cases'][c]['zeta'], '.17g')},{format(summ['cases'][c]['relative_error'], '.17g')},"
        f"{format(summ['cases'][c]['trough_reduction_pct'], '.17g')}\n" for c in metrics))
    written.append(p)
    manifest = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in written}
    mp = out_dir / "manifest.json"
    mp.write_text(_dumps({"source": os.path.basename(os.path.abspath(run_dir)), "files": manifest}))
    written.append(mp)
    return written


def cmd_pipeline(cfg: PipelineConfig, out: str | Path | None = None, dist: bool = False,
                 global_addr: str | None = None, until: str = "closedloop") -> Run:
    run = Run(cfg, Path(out if out is not None else cfg["out"]), dist=dist, global_addr=global_addr)
    run.run(until)
    return run
