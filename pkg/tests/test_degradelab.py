import json

import numpy as np
import pytest

from svdrestore.degradelab import (
    AmbiguousError, Dominance, analyze_pair, classify, corpus_report, write_boxplot_svg, write_report,
)
from svdrestore.imagestack import DegradationSpec, apply_degradation, synthetic_clean
from svdrestore.lindecomp import recompose, relative_error, svd


def test_lowlight_is_value_dominated_exactly(clean64):
    deg = apply_degradation(clean64, DegradationSpec("LowLight", {"s": 0.3}))
    st = analyze_pair(clean64, deg)
    assert st.err_val_swap <= 1e-6
    assert classify(clean64, deg).label is Dominance.VALUE


def test_scaled_pair_value_dominated(rng):
    clean = rng.random((16, 16, 3))
    res = classify(clean, 0.3 * clean)
    assert res.label is Dominance.VALUE and res.margin < 0


def test_noise_is_vector_dominated(clean64):
    deg = apply_degradation(clean64, DegradationSpec("GaussianNoise", {"sigma": 25}, seed=1))
    assert classify(clean64, deg).label is Dominance.VECTOR


def test_identical_pair_is_ambiguous(clean64):
    with pytest.raises(AmbiguousError):
        classify(clean64, clean64)


def test_swap_errors_match_direct_recomposition(rng):
    c, d = rng.random((12, 10)), rng.random((12, 10))
    st = analyze_pair(c, d)
    fc, fd = svd(c), svd(d)
    assert st.err_vec_swap == pytest.approx(relative_error(recompose(fc, fd), c))
    assert st.err_val_swap == pytest.approx(relative_error(recompose(fd, fc), c))


def test_order_diff_oracle(rng):
    c, d = rng.random((9, 9)), rng.random((9, 9))
    st = analyze_pair(c, d)
    fc, fd = svd(c), svd(d)
    ref = [np.linalg.norm(np.outer(fd.u[:, i], fd.v[:, i]) - np.outer(fc.u[:, i], fc.v[:, i])) for i in range(9)]
    np.testing.assert_allclose(st.order_diff, ref, atol=1e-10)


def test_degenerate_orders_flagged():
    c = np.diag([3.0, 2.0, 2.0, 1.0])
    st = analyze_pair(c, c + 0.01 * np.eye(4))
    assert list(st.order_flagged) == [False, True, True, False]
    assert st.to_dict()["order_diff"][1] is None


def test_quartiles_of_scaled_image(rng):
    c = rng.random((10, 10))
    st = analyze_pair(c, 0.5 * c)
    for k, v in st.sv_quartiles_clean.items():
        assert st.sv_quartiles_degraded[k] == pytest.approx(0.5 * v)
    assert st.median_sv_gap == pytest.approx(0.5 * st.sv_quartiles_clean["median"])


def test_shape_mismatch(rng):
    with pytest.raises(ValueError):
        analyze_pair(rng.random((8, 8)), rng.random((8, 9)))


def _corpus(n=4):
    pairs = []
    for i in range(n):
        clean = synthetic_clean(32, 32, 3, seed=i)
        pairs.append(("Haze", clean, apply_degradation(clean, DegradationSpec("Haze", {"t": 0.5}, seed=i))))
        pairs.append(("Noise", clean, apply_degradation(clean, DegradationSpec("GaussianNoise", {"sigma": 50}, seed=i))))
    return pairs


def test_corpus_report_order_and_labels(tmp_path):
    reports = corpus_report(_corpus())
    assert list(reports) == ["Haze", "Noise"]
    assert reports["Haze"].majority == "ValueDominated"
    assert reports["Noise"].majority == "VectorDominated"
    assert reports["Noise"].n == 4
    write_report(reports, tmp_path / "stats.json", tmp_path / "csv")
    data = json.loads((tmp_path / "stats.json").read_text())
    assert [t["task"] for t in data["tasks"]] == ["Haze", "Noise"]
    assert (tmp_path / "csv" / "Noise.csv").read_text().startswith("stat,mean,std")


def test_corpus_report_deterministic(tmp_path):
    pairs = _corpus(3)
    write_report(corpus_report(pairs), tmp_path / "a.json")
    write_report(corpus_report(pairs), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_empty_corpus():
    with pytest.raises(ValueError):
        corpus_report([])


def test_boxplot_svg(tmp_path):
    pytest.importorskip("matplotlib")
    write_boxplot_svg(corpus_report(_corpus(2)), tmp_path / "box.svg")
    assert (tmp_path / "box.svg").read_text().lstrip().startswith("<?xml")


def test_single_pair_aggregate_equals_pair(clean64):
    deg = apply_degradation(clean64, DegradationSpec("Blur", {"sigma_b": 2.0}))
    rep = corpus_report([("Blur", clean64, deg)])["Blur"]
    st = analyze_pair(clean64, deg)
    assert rep.mean["err_vec_swap"] == st.err_vec_swap
    assert rep.mean["err_val_swap"] == st.err_val_swap
    assert rep.std["margin"] == 0


@pytest.mark.xfail(strict=True, reason="on synthetic images i.i.d. noise lifts the whole singular value "
                   "bulk above the haze contraction of the median; see the decisions ledger")
def test_haze_shifts_median_sigma_more_than_noise():
    rng = np.random.default_rng(0)
    pairs = []
    for i in range(20):
        clean = synthetic_clean(64, 64, 3, seed=5000 + i)
        haze = DegradationSpec("Haze", {"t": rng.uniform(0.3, 0.7), "A": rng.uniform(0.7, 1.0)}, seed=i)
        noise = DegradationSpec("GaussianNoise", {"sigma": (15, 25, 50)[i % 3]}, seed=i)
        pairs += [("Haze", clean, apply_degradation(clean, haze)), ("Noise", clean, apply_degradation(clean, noise))]
    reports = corpus_report(pairs)
    gap = {t: abs(r.mean["sv_degraded_median"] - r.mean["sv_clean_median"]) for t, r in reports.items()}
    assert gap["Haze"] > gap["Noise"]


def test_haze_median_gap_exceeds_mild_noise():
    pairs = []
    for i in range(6):
        clean = synthetic_clean(64, 64, 3, seed=i)
        pairs.append(("Haze", clean, apply_degradation(clean, DegradationSpec("Haze", {"t": 0.5}, seed=i))))
        pairs.append(("Noise", clean, apply_degradation(clean, DegradationSpec("GaussianNoise", {"sigma": 15}, seed=i))))
    reports = corpus_report(pairs)
    gap = {t: abs(r.mean["sv_degraded_median"] - r.mean["sv_clean_median"]) for t, r in reports.items()}
    assert gap["Haze"] > gap["Noise"]


def test_classify_scale_invariant(clean64):
    deg = apply_degradation(clean64, DegradationSpec("GaussianNoise", {"sigma": 25}, seed=4))
    a = classify(clean64, deg)
    b = classify(0.5 * clean64.astype(np.float64), 0.5 * deg.astype(np.float64))
    assert a.label == b.label
    assert b.margin == pytest.approx(a.margin, rel=1e-9)


@pytest.mark.parametrize("s", [0.1, 0.3, 0.75, 1.0])
def test_err_vec_swap_scaling_analytic(s, rng):
    clean = rng.random((16, 12, 3))
    st = analyze_pair(clean, s * clean)
    assert abs(st.err_vec_swap - (1 - s)) <= 1e-6
