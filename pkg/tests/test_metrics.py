import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semirest.errors import UndefinedMetricError
from semirest.metrics import (
    average_precision, evaluate, integrate_to, pixel_auroc, postprocess_map, pro_curve, pro_score,
    write_report,
)

from oracles import ap_sweep, pro_reference, roc_sweep


def _case(seed, size=16):
    rng = np.random.default_rng(seed)
    truth = np.zeros((size, size), dtype=np.int64)
    r, c = rng.integers(0, size - 4, size=2)
    truth[r:r + rng.integers(2, 5), c:c + rng.integers(2, 5)] = 1
    scores = np.round(rng.random((size, size)) + 0.5 * truth, 2)  # rounding creates ties
    return scores, truth


@pytest.mark.parametrize("seed", range(10))
def test_against_sweep_oracles(seed):
    s, t = _case(seed)
    assert pixel_auroc(s, t) == pytest.approx(roc_sweep(s, t), abs=1e-9)
    assert average_precision(s, t) == pytest.approx(ap_sweep(s, t), abs=1e-9)
    assert pro_score(s, t) == pytest.approx(pro_reference([s], [t]), abs=1e-6)


def test_perfect_and_inverted_scores():
    s, t = _case(0)
    perfect = t.astype(float)
    assert pixel_auroc(perfect, t) == 1.0
    assert average_precision(perfect, t) == 1.0
    assert pro_score(perfect, t) == pytest.approx(1.0)
    assert pixel_auroc(-s, t) == pytest.approx(1 - pixel_auroc(s, t), abs=1e-12)


def test_worst_case_ap_with_four_positives():
    t = np.zeros((4, 4), dtype=np.int64)
    t[0, :] = 1
    assert average_precision(-t.astype(float), t) == pytest.approx(0.25)
    assert average_precision(np.zeros((4, 4)), t) == pytest.approx(0.25)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_transform_invariance(seed):
    s, t = _case(seed)
    g = np.exp(3 * s) + 7
    assert pixel_auroc(g, t) == pytest.approx(pixel_auroc(s, t), abs=1e-12)
    assert average_precision(g, t) == pytest.approx(average_precision(s, t), abs=1e-12)
    assert pro_score(g, t) == pytest.approx(pro_score(s, t), abs=1e-12)


def test_random_scores_ap_near_prevalence():
    rng = np.random.default_rng(0)
    t = (rng.random((200, 200)) < 0.1).astype(np.int64)
    ap = average_precision(rng.random((200, 200)), t)
    assert abs(ap - t.mean()) < 0.01


def test_pooling_across_images():
    a, ta = _case(1)
    b, tb = _case(2)
    pooled = np.concatenate([a, b]), np.concatenate([ta, tb])
    assert pixel_auroc([a, b], [ta, tb]) == pytest.approx(pixel_auroc(*pooled), abs=1e-12)
    assert pro_score([a, b], [ta, tb]) == pytest.approx(pro_reference([a, b], [ta, tb]), abs=1e-6)


def test_pro_weights_regions_equally():
    t = np.zeros((10, 10), dtype=np.int64)
    t[0, 0] = 1          # tiny region
    t[5:9, 5:9] = 1      # large region
    s = np.zeros((10, 10))
    s[0, 0] = 1.0        # only the tiny region is found
    fpr, pro = pro_curve(s, t)
    assert (fpr[1], pro[1]) == (0.0, 0.5)


def test_pro_uses_8_connectivity():
    t = np.zeros((4, 4), dtype=np.int64)
    t[0, 0] = t[1, 1] = 1
    s = np.zeros((4, 4))
    s[0, 0] = 1.0
    _, pro = pro_curve(s, t)
    assert pro[1] == 0.5  # one region, half covered


def test_integrate_to_interpolates_at_limit():
    assert integrate_to([0, 0.2, 0.4], [0, 1, 1], 0.3) == pytest.approx(0.1 + 0.1)
    assert integrate_to([0, 0.3, 1.0], [0, 0.6, 1.0], 0.3) == pytest.approx(0.09)


def test_undefined_metrics():
    with pytest.raises(UndefinedMetricError):
        pixel_auroc(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(UndefinedMetricError):
        average_precision(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(UndefinedMetricError):
        pro_score(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        pixel_auroc(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        pixel_auroc(np.array([[np.nan, 0.0]]), np.array([[1, 0]]))
    with pytest.raises(ValueError):
        pro_score(*_case(0), fpr_limit=0.0)


def test_postprocess_examples():
    out = postprocess_map(np.full((2, 2), 0.3), (16, 16), sigma=4)
    np.testing.assert_allclose(out, 0.3, atol=1e-12)
    theta = np.array([[0.0, 1.0]])
    up = postprocess_map(theta, (1, 4), sigma=0)
    np.testing.assert_allclose(up, [[0.0, 0.25, 0.75, 1.0]])
    with pytest.raises(ValueError):
        postprocess_map(theta, (1, 4), sigma=-1)


def test_evaluate_and_report(tmp_path):
    s, t = _case(3)
    rep = evaluate([s], [t], names=["x"], category="tex")
    assert rep.per_image[0][0] == "x" and not rep.degenerate
    flat = evaluate([np.zeros_like(s)], [t])
    assert flat.degenerate and flat.pixel_auroc == 0.5
    write_report(tmp_path / "r.csv", [rep, flat])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "category,ap,pro,pixel_auroc"
    assert lines[2].startswith("all,degenerate,degenerate,")
    assert lines[3].startswith("mean," + repr(rep.ap))
