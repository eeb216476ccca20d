import json

import numpy as np
import pytest
import scipy.stats

from motionscope.analysis import (
    CurvePoint,
    bootstrap_se,
    build_heatmaps,
    heatmap_to_csv,
    pareto_frontier,
    render_heatmap_png,
    render_tradeoff_png,
    row_max_at_zero_fraction,
    select_threshold,
    spearman,
    summary_dict,
    tradeoff_curve,
    write_summary,
)
from motionscope.probe import ProbeRecord, TimestepWindow, window_grid


def synthetic_records(T=400, interval=100, n_clips=3, gain_fn=None, pres_fn=None):
    gain_fn = gain_fn or (lambda w: float(w.tau_start - w.tau_end))
    pres_fn = pres_fn or (lambda w: -float(w.tau_start))
    records = []
    for k in range(n_clips):
        for w in window_grid(T, interval):
            records.append(
                ProbeRecord(f"clip{k:04d}", w, gain_fn(w) + 0.1 * k, pres_fn(w) - 0.1 * k, 0.5)
            )
    return records


def test_spearman_matches_scipy_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.integers(0, 6, size=30).astype(float)
        y = rng.integers(0, 6, size=30).astype(float) + 0.3 * x
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        expected = scipy.stats.spearmanr(x, y).statistic
        assert spearman(x, y) == pytest.approx(expected, abs=1e-12)


def test_spearman_extremes_and_errors():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


def test_bootstrap_se_behaviour():
    rng = np.random.default_rng(1)
    vals = rng.normal(0, 2.0, size=200)
    se = bootstrap_se(vals, seed=3)
    assert se == bootstrap_se(vals, seed=3)
    assert se == pytest.approx(2.0 / np.sqrt(200), rel=0.25)
    assert bootstrap_se([5.0]) == 0.0


def test_heatmap_means_and_mask():
    records = synthetic_records()
    grid = build_heatmaps(records, T=400, interval=100)
    assert grid.taus == [0, 100, 200, 300, 400]
    gain, pres = grid.cell(300, 100)
    assert gain == pytest.approx(200 + 0.1)
    assert pres == pytest.approx(-300 - 0.1)
    for i, ts in enumerate(grid.taus):
        for j, te in enumerate(grid.taus):
            if ts <= te:
                assert np.isnan(grid.appearance[i, j])
                assert grid.counts[i, j] == 0
            else:
                assert grid.counts[i, j] == 3
    assert int(np.sum(grid.counts > 0)) == 10


def test_heatmap_missing_cells():
    records = [r for r in synthetic_records() if r.window.tau_start != 200]
    with pytest.raises(ValueError, match="missing"):
        build_heatmaps(records, T=400, interval=100)
    grid = build_heatmaps(records, T=400, interval=100, strict=False)
    assert np.isnan(grid.appearance[2, 0])


def test_failed_records_are_excluded():
    records = synthetic_records()
    records.append(ProbeRecord("clip9999", TimestepWindow(300, 100), None, None, 0.1))
    grid = build_heatmaps(records, T=400, interval=100)
    assert grid.counts[3, 1] == 3


def test_row_max_at_zero():
    # gain profile peaks at tau_end=0 in every row
    grid = build_heatmaps(synthetic_records(), T=400, interval=100)
    assert row_max_at_zero_fraction(grid) == 1.0
    flipped = build_heatmaps(
        synthetic_records(gain_fn=lambda w: float(w.tau_end)), T=400, interval=100
    )
    assert row_max_at_zero_fraction(flipped) < 0.5


def test_tradeoff_curve_slice():
    curve = tradeoff_curve(synthetic_records())
    assert [p.tau_start for p in curve] == [100, 200, 300, 400]
    assert curve[2].appearance_gain == pytest.approx(300 + 0.1)
    assert curve[2].motion_preservation == pytest.approx(-300 - 0.1)
    with pytest.raises(ValueError):
        tradeoff_curve(synthetic_records(), tau_end=50)


def test_pareto_frontier_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(4, 10))
        points = [
            CurvePoint(int(t) * 100, float(g), float(m))
            for t, g, m in zip(range(1, n + 1), rng.normal(size=n), rng.normal(size=n))
        ]
        frontier = pareto_frontier(points)
        for p in points:
            dominated = any(
                q.appearance_gain > p.appearance_gain
                and q.motion_preservation > p.motion_preservation
                for q in points
            )
            assert (p in frontier) == (not dominated)
        assert [p.tau_start for p in frontier] == sorted(p.tau_start for p in frontier)


def test_threshold_on_published_style_table():
    rows = [
        (1000, 29.28, 93.16),
        (750, 31.85, 97.12),
        (700, 31.96, 97.19),
        (650, 31.88, 97.21),
        (0, 31.26, 96.99),
    ]
    curve = [CurvePoint(t, a, c) for t, a, c in rows]
    assert select_threshold(curve).tau_star == 700


def test_threshold_symmetric_crossing():
    curve = [
        CurvePoint(t, float(i), float(4 - i))
        for i, t in enumerate([0, 100, 200, 300, 400])
    ]
    assert select_threshold(curve).tau_star == 200


def test_threshold_rescaling_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(4, 9))
        gains = rng.normal(size=n)
        pres = rng.normal(size=n)
        if np.ptp(gains) == 0 or np.ptp(pres) == 0:
            continue
        taus = [int(t) * 50 for t in range(n)]
        base = [CurvePoint(t, g, m) for t, g, m in zip(taus, gains, pres)]
        scaled = [CurvePoint(t, 2 * g + 5, m) for t, g, m in zip(taus, gains, pres)]
        assert select_threshold(base).tau_star == select_threshold(scaled).tau_star


def test_threshold_tie_prefers_larger_tau():
    curve = [
        CurvePoint(0, 0.0, 2.0),
        CurvePoint(100, 2.0, 0.0),
        CurvePoint(200, 1.0, 1.0),
        CurvePoint(300, 1.0, 1.0),
    ]
    assert select_threshold(curve).tau_star == 300


def test_threshold_stays_on_frontier():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(3, 10))
        curve = [
            CurvePoint(int(i) * 100, float(g), float(m))
            for i, g, m in zip(range(n), rng.normal(size=n), rng.normal(size=n))
        ]
        if np.ptp([p.appearance_gain for p in curve]) == 0:
            continue
        if np.ptp([p.motion_preservation for p in curve]) == 0:
            continue
        choice = select_threshold(curve)
        assert choice.tau_star in {p.tau_start for p in pareto_frontier(curve)}


def test_threshold_guards():
    with pytest.raises(ValueError):
        select_threshold([CurvePoint(0, 1, 2), CurvePoint(100, 2, 1)])
    flat = [CurvePoint(t, 1.0, float(t)) for t in (0, 100, 200)]
    with pytest.raises(ValueError, match="flat"):
        select_threshold(flat)


def test_heatmap_csv_bytes_are_stable(tmp_path):
    grid = build_heatmaps(synthetic_records(), T=400, interval=100)
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    heatmap_to_csv(grid, "appearance", p1)
    heatmap_to_csv(grid, "appearance", p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "tau_start,0,100,200,300,400"
    assert lines[1].startswith("0,nan,")


def test_summary_round_trip(tmp_path):
    records = synthetic_records(n_clips=4)
    grid = build_heatmaps(records, T=400, interval=100)
    curve = tradeoff_curve(records)
    choice = select_threshold(curve)
    summary = summary_dict(grid, curve, choice, extra={"interval": 100})
    assert summary["tau_star"] == choice.tau_star
    assert summary["spearman_gain_vs_tau_start"] == 1.0
    assert summary["spearman_preservation_vs_tau_start"] == -1.0
    assert summary["row_max_at_zero_fraction"] == 1.0
    assert len(summary["cells"]) == 10
    path = tmp_path / "summary.json"
    write_summary(summary, path)
    assert json.loads(path.read_text())["interval"] == 100
    first = path.read_bytes()
    write_summary(summary, path)
    assert path.read_bytes() == first


def test_render_smoke(tmp_path):
    records = synthetic_records()
    grid = build_heatmaps(records, T=400, interval=100)
    curve = tradeoff_curve(records)
    render_heatmap_png(grid, "appearance", tmp_path / "h.png")
    render_heatmap_png(grid, "motion", tmp_path / "m.png")
    render_tradeoff_png(curve, tmp_path / "c.png", tau_star=200)
    for name in ("h.png", "m.png", "c.png"):
        assert (tmp_path / name).stat().st_size > 1000
