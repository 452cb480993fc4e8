import warnings

import numpy as np
import pytest

from pidkit import analysis
from pidkit.analysis import (
    ProfileReport,
    bootstrap_ci,
    build_report,
    d_vision,
    family_medians,
    pid_shares,
    scaling_deltas,
    spearman,
    trace,
    write_chart_bundle,
    write_profile_csv,
)
from pidkit.errors import (
    DegenerateSpectrumError,
    DomainError,
    FormatError,
    UndefinedCorrelationError,
)
from pidkit.solver import PidAtoms
from pidkit.synthetic import GateSpec, gate_joint, brute_force_pid, gate_records

AND_R = 0.31127812445913283


def atoms_of(r, u1, u2, s):
    return PidAtoms(r=r, u1=u1, u2=u2, s=s, total=r + u1 + u2 + s)


def report_of(model, dataset, shares, accuracy=None, family=None, regime=None,
              layer=None, checkpoint=None):
    r, u1, u2, s = shares
    return ProfileReport(model=model, dataset=dataset,
                         atoms=atoms_of(r, u1, u2, s),
                         shares=np.array(shares) / sum(shares),
                         accuracy=accuracy, family=family, regime=regime,
                         layer=layer, checkpoint=checkpoint)


class TestPidShares:
    def test_xor_shares(self):
        assert pid_shares(atoms_of(0, 0, 0, 1.0)) == pytest.approx([0, 0, 0, 1])

    def test_equal_atoms(self):
        assert pid_shares(atoms_of(1, 1, 1, 1)) == pytest.approx([0.25] * 4)

    def test_and_shares(self):
        shares = pid_shares(brute_force_pid(gate_joint(GateSpec("AND"))))
        assert shares == pytest.approx([0.3837, 0, 0, 0.6163], abs=5e-5)

    def test_zero_total_rejected(self):
        with pytest.raises(DegenerateSpectrumError):
            pid_shares(atoms_of(0, 0, 0, 0))


class TestSpearman:
    def test_increasing_is_plus_one(self):
        res = spearman([1, 2, 3, 4], [10, 20, 40, 80])
        assert res.rho == 1.0
        assert res.p_value == 0.0

    def test_decreasing_is_minus_one(self):
        res = spearman([1, 2, 3, 4], [5, 4, 3, -7])
        assert res.rho == -1.0

    def test_hand_ranked_five_points(self):
        res = spearman([1, 2, 3, 4, 5], [1, 3, 2, 5, 4])
        assert res.rho == pytest.approx(0.8, abs=1e-12)
        assert res.n == 5
        # t = 0.8 * sqrt(3 / 0.36); two-sided Student-t tail with 3 dof.
        assert 0.0 < res.p_value < 0.2

    def test_tie_correction(self):
        # Ties get average ranks; a tied pair against itself correlates 1.
        res = spearman([1, 1, 2, 3], [5, 5, 6, 7])
        assert res.rho == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        xs = rng.standard_normal(20)
        ys = rng.standard_normal(20)
        base = spearman(xs, ys).rho
        assert spearman(np.exp(xs), ys).rho == pytest.approx(base, abs=1e-12)
        assert spearman(xs, ys ** 3).rho == pytest.approx(base, abs=1e-12)

    def test_constant_input_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_too_short_rejected(self):
        with pytest.raises(DomainError):
            spearman([1, 2], [2, 1])

    def test_permutation_mode_exact_small_case(self):
        # n=3 and a perfect ordering: only the identity and the reversal
        # reach |rho| = 1, so p = 2/6.
        res = spearman([1, 2, 3], [4, 5, 6], mode="permutation")
        assert res.rho == 1.0
        assert res.p_value == pytest.approx(1 / 3, abs=1e-12)

    def test_permutation_mode_size_cap(self):
        with pytest.raises(DomainError):
            spearman(list(range(11)), list(range(11)), mode="permutation")


class TestDVision:
    def test_drop(self):
        assert d_vision(0.8, 0.5) == pytest.approx(0.3)

    def test_equal(self):
        assert d_vision(0.55, 0.55) == 0.0

    def test_negative_allowed(self):
        assert d_vision(0.4, 0.6) == pytest.approx(-0.2)

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            d_vision(1.2, 0.5)


class TestFamilyMedians:
    def test_single_model_family(self):
        rep = report_of("m1", "d", [0.1, 0.1, 0.3, 0.5], family="fam", regime="synergy")
        med = family_medians([rep])
        s_med, u2_med = med[("fam", "synergy")]
        assert s_med == pytest.approx(0.5)
        assert u2_med == pytest.approx(0.3)

    def test_odd_count_median(self):
        reps = [report_of(f"m{i}", "d", [0.0, 0.0, 1 - s, s], family="f", regime="r")
                for i, s in enumerate((0.2, 0.4, 0.6))]
        assert family_medians(reps)[("f", "r")][0] == pytest.approx(0.4)

    def test_even_count_midpoint(self):
        reps = [report_of(f"m{i}", "d", [0.0, 0.0, 1 - s, s], family="f", regime="r")
                for i, s in enumerate((0.2, 0.6))]
        assert family_medians(reps)[("f", "r")][0] == pytest.approx(0.4)

    def test_order_invariance(self):
        reps = [report_of(f"m{i}", "d", [0.1, 0.2, 0.3, 0.4 + 0.01 * i],
                          family="f", regime="r") for i in range(5)]
        a = family_medians(reps)
        b = family_medians(list(reversed(reps)))
        assert a == b

    def test_unlabeled_reports_skipped_with_warning(self):
        rep = report_of("m1", "d", [0.25, 0.25, 0.25, 0.25])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert family_medians([rep]) == {}
        assert any("skipping" in str(w.message) for w in caught)


class TestScalingDeltas:
    def test_identical_reports_zero_deltas(self):
        rep = report_of("m", "d", [0.1, 0.1, 0.3, 0.5], accuracy=0.7)
        rows = scaling_deltas(rep, rep, rep)
        assert [r["transition"] for r in rows] == ["S->M", "M->VL"]
        for row in rows:
            assert row["d_acc"] == pytest.approx(0.0)
            assert row["d_s"] == pytest.approx(0.0)
            assert row["d_u2"] == pytest.approx(0.0)

    def test_accuracy_delta_in_points(self):
        small = report_of("s", "d", [0.1, 0.1, 0.3, 0.5], accuracy=0.60)
        mid = report_of("m", "d", [0.1, 0.1, 0.3, 0.5], accuracy=0.719)
        rows = scaling_deltas(small, mid, mid)
        assert rows[0]["d_acc"] == pytest.approx(11.9, abs=1e-9)

    def test_share_delta_in_points(self):
        small = report_of("s", "d", [0.0, 0.0, 0.5, 0.5])
        mid = report_of("m", "d", [0.0, 0.0, 0.55, 0.45])
        rows = scaling_deltas(small, mid, mid)
        assert rows[0]["d_s"] == pytest.approx(-5.0, abs=1e-9)

    def test_missing_accuracy_leaves_blank(self):
        small = report_of("s", "d", [0.1, 0.1, 0.3, 0.5])
        rows = scaling_deltas(small, small, small)
        assert rows[0]["d_acc"] is None


class TestTrace:
    def test_layers_ordered(self):
        reps = [report_of("m", "d", [0.25, 0.25, 0.25, 0.25], layer=i)
                for i in reversed(range(32))]
        rows = trace(reps)
        assert [row["key"] for row in rows] == list(range(32))
        assert not any(row["gap_before"] for row in rows)

    def test_checkpoints_with_stage_boundary(self):
        keys = [f"s{s}c{c}" for s in (1, 2) for c in (1, 2, 3, 4)]
        reps = [report_of("m", "d", [0.25, 0.25, 0.25, 0.25], checkpoint=k)
                for k in reversed(keys)]
        rows = trace(reps)
        assert [row["key"] for row in rows] == keys
        assert [row["stage_boundary"] for row in rows] == [False] * 4 + [True] + [False] * 3

    def test_single_report(self):
        rows = trace([report_of("m", "d", [0.25, 0.25, 0.25, 0.25], layer=3)])
        assert len(rows) == 1 and rows[0]["key"] == 3

    def test_gap_marked(self):
        reps = [report_of("m", "d", [0.25, 0.25, 0.25, 0.25], layer=i) for i in (0, 1, 5)]
        rows = trace(reps)
        assert [row["gap_before"] for row in rows] == [False, False, True]

    def test_duplicate_keys_rejected(self):
        reps = [report_of("m", "d", [0.25, 0.25, 0.25, 0.25], layer=1)] * 2
        with pytest.raises(FormatError):
            trace(reps)

    def test_mixed_keying_rejected(self):
        reps = [report_of("m", "d", [0.25, 0.25, 0.25, 0.25], layer=1),
                report_of("m", "d", [0.25, 0.25, 0.25, 0.25], checkpoint="s1c1")]
        with pytest.raises(FormatError):
            trace(reps)


class TestBuildReport:
    def test_accuracy_and_flags(self):
        records = gate_records(GateSpec("AND", n_samples=400, seed=3))
        atoms = brute_force_pid(gate_joint(GateSpec("AND")))
        rep = build_report(atoms, records, model="m", dataset="gate-and")
        assert rep.accuracy is not None and 0.0 <= rep.accuracy <= 1.0
        assert rep.shares is not None
        assert rep.shares.sum() == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_spectrum_flagged(self):
        records = gate_records(GateSpec("AND", n_samples=10, seed=3))
        rep = build_report(atoms_of(0, 0, 0, 0), records, model="m", dataset="d")
        assert rep.shares is None
        assert "degenerate-spectrum" in rep.flags


class TestEmission:
    def test_profile_csv_deterministic(self, tmp_path):
        reps = [report_of("m", "d", [0.1, 0.2, 0.3, 0.4], accuracy=0.5)]
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_profile_csv(reps, p1, {"tool": "t"})
        write_profile_csv(reps, p2, {"tool": "t"})
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.csv.provenance.json").exists()
        header = p1.read_text().splitlines()[0]
        assert header.startswith("model,dataset,")

    def test_chart_bundle_schema(self, tmp_path):
        import json
        path = tmp_path / "charts.json"
        write_chart_bundle([{"name": "s", "series": [{"name": "s", "x": [1], "y": [2.0]}]}],
                           path, {"tool": "t"})
        data = json.loads(path.read_text())
        assert data["charts"][0]["series"][0]["y"] == [2.0]
        assert "provenance" in data


def test_bootstrap_ci_is_seeded_and_ordered():
    values = np.arange(30, dtype=float)
    lo1, hi1 = bootstrap_ci(values, n_boot=2000, seed=4)
    lo2, hi2 = bootstrap_ci(values, n_boot=2000, seed=4)
    assert (lo1, hi1) == (lo2, hi2)
    assert lo1 < values.mean() < hi1
