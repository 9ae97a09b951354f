import cmath
import math

import numpy as np
import pytest

from widearea.grid import Mode, true_residues
from widearea.modal import (
    EmptyBandError,
    ModalError,
    ModeResidueTable,
    RepeatedPoleError,
    ResidueEntry,
    companion,
    poles,
    rank_loops,
    residue_table,
    residues,
)

TS = 0.02


def test_constructed_root_frequency():
    r, th = 0.995, 2 * math.pi * 0.65 * TS
    a = [-2 * r * math.cos(th), r * r]
    (m,) = poles(a, TS)
    assert m.frequency == pytest.approx(0.65, rel=1e-12)
    assert m.sigma == pytest.approx(math.log(r) / TS, rel=1e-12)


def test_real_pole_maps_to_zero_frequency():
    (m,) = poles([-0.5], TS)
    assert m.eigenvalue == pytest.approx(math.log(0.5) / TS)
    assert m.frequency == 0.0


def test_companion_eigenvalues_are_roots():
    a = [0.3, -0.2, 0.1]
    ev = np.sort_complex(np.linalg.eigvals(companion(a)))
    assert np.allclose(ev, np.sort_complex(np.roots([1.0, *a])))


def test_single_pole_residue():
    p, R, r0 = residues([-0.5], [0.0, 1.0])
    assert p[0] == pytest.approx(0.5)
    assert R[0] == pytest.approx(1.0)
    assert r0 == 0.0


def test_two_pole_closed_form():
    # z / ((z - 0.5)(z - 0.2))
    p, R, _ = residues([-0.7, 0.1], [0.0, 1.0, 0.0])
    got = {round(float(pi.real), 6): complex(Ri) for pi, Ri in zip(p, R)}
    assert got[0.5] == pytest.approx(5 / 3)
    assert got[0.2] == pytest.approx(-2 / 3)


def test_repeated_pole_rejected():
    with pytest.raises(RepeatedPoleError):
        residues([-1.0, 0.25], [0.0, 1.0, 0.0])


def test_numerator_length_checked():
    with pytest.raises(ModalError):
        residues([-0.5], [1.0])


def _table_from(rows, f=0.6548):
    lam = complex(-0.04 * 2 * math.pi * f, 2 * math.pi * f)
    modes = [Mode(lam, cmath.exp(lam * TS))]
    entries = [ResidueEntry(t, g, 0, complex(v)) for (t, g), v in rows.items()]
    return ModeResidueTable(modes=modes, entries=entries, Ts=TS,
                            tie_labels=("tie1", "tie2"), gen_labels=("gen1", "gen2", "gen3", "gen4"))


def test_reported_residue_table_ranks_gen3_tie1_first():
    reported = {(0, 0): 1.4649, (1, 0): 1.3823, (0, 1): 0.7893, (1, 1): 0.7463,
                (0, 2): 14.4958, (1, 2): 13.3761, (0, 3): 4.16, (1, 3): 3.9402}
    rk = rank_loops(_table_from(reported))
    assert (rk.top.tie, rk.top.gen) == (0, 2)
    assert rk.top.absR == pytest.approx(14.4958)
    assert rk.top.f == pytest.approx(0.6548)
    assert (rk.bottom.tie, rk.bottom.gen) == (1, 1)
    assert rk.top.strength == "strong" and rk.bottom.strength == "weak"


def test_equal_residues_keep_id_order():
    rows = {(t, g): 2.0 for t in (1, 0) for g in (3, 1, 2, 0)}
    rk = rank_loops(_table_from(rows))
    assert [(lp.tie, lp.gen) for lp in rk.loops] == [(t, g) for t in (0, 1) for g in range(4)]


def test_empty_band():
    lam = complex(-0.1, 2 * math.pi * 3.0)
    tab = ModeResidueTable(modes=[Mode(lam, cmath.exp(lam * TS))],
                           entries=[ResidueEntry(0, 0, 0, 1.0)], Ts=TS)
    with pytest.raises(EmptyBandError):
        rank_loops(tab)


def test_identified_ranking_matches_oracle(two_area, two_area_consensus):
    est = two_area_consensus.estimate
    tab = residue_table(est.a, est.b, est.Ts, two_area.tie_labels, two_area.gen_labels)
    rk = rank_loops(tab)
    orc = rank_loops(true_residues(two_area, TS))
    assert [(lp.tie, lp.gen) for lp in rk.loops] == [(lp.tie, lp.gen) for lp in orc.loops]
    assert (rk.top.tie, rk.top.gen) == (0, 2)
    for a, b in zip(rk.loops, orc.loops):
        assert a.absR == pytest.approx(b.absR, rel=0.05)


def test_identified_mode_close_to_oracle(two_area, two_area_consensus):
    from widearea.grid import inter_area_mode
    est = two_area_consensus.estimate
    tab = residue_table(est.a, est.b, est.Ts)
    m = tab.modes[tab.mode_of_interest()]
    ol = inter_area_mode(two_area)
    assert m.frequency == pytest.approx(ol.frequency, rel=0.02)
    assert m.damping == pytest.approx(ol.damping, rel=0.2)


def test_table_dict_has_selected_labels(two_area):
    tab = true_residues(two_area, TS)
    d = tab.to_dict(selected=(0, 2))
    assert d["selected"] == {"tie": "tie1", "gen": "gen3"}
    assert len(d["loops"]) == len(tab.entries)
