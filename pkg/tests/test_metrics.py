import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finer.ic import Masker
from finer.metrics import amp, auc, da_k, global_fidelity, intersection_size, mpd_k, roc_auc, roc_curve
from finer.net import predict_proba


def mann_whitney_auc(scores, labels):
    """Independent AUC: fraction of (pos, neg) pairs ranked correctly, ties count half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_mann_whitney(pairs):
    s = [float(a) for a, _ in pairs]
    y = [b for _, b in pairs]
    if all(y) or not any(y):
        return
    assert abs(auc(s, y) - mann_whitney_auc(s, y)) < 1e-12


def test_roc_endpoints():
    fpr, tpr = roc_curve([3, 2, 1, 0], [1, 1, 0, 0])
    assert (fpr[0], tpr[0]) == (0, 0) and (fpr[-1], tpr[-1]) == (1, 1)
    assert auc([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert auc([0, 1, 2, 3], [1, 1, 0, 0]) == 0.0
    assert auc([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5


def test_roc_auc_pooled_and_local():
    r = roc_auc([np.array([0.9, 0.1, 0.2]), np.array([0.5, 0.5]), np.array([0.3, 0.8])], [[0], [0, 1], [1]])
    assert r.local == [1.0, None, 1.0] and r.mean_local == 1.0
    assert abs(r.pooled_auc - mann_whitney_auc([.9, .1, .2, .5, .5, .3, .8], [1, 0, 0, 1, 1, 0, 1])) < 1e-12


@pytest.fixture(scope="module")
def risk_items(trained, encoded):
    _, te = encoded
    p = predict_proba(trained, te.X)
    idx = np.flatnonzero((te.y == 1) & (p >= 0.5))
    return [te.items()[i] for i in idx]


def test_mpd_with_all_ics_equals_full_masking(trained, baseline, risk_items):
    for sid, x, I in risk_items[:5]:
        e = np.arange(len(I), dtype=float)
        full = predict_proba(trained, x)[0] - predict_proba(trained, Masker(x, I, baseline).apply(range(len(I))))[0]
        assert mpd_k(x, e, trained, len(I), I, baseline) == pytest.approx(full, abs=1e-12)
        assert mpd_k(x, e, trained, len(I) + 5, I, baseline) == pytest.approx(full, abs=1e-12)


def test_mpd_depends_only_on_roi_set(trained, baseline, risk_items):
    sid, x, I = risk_items[0]
    rng = np.random.default_rng(0)
    e = rng.random(len(I))
    # any monotone transform keeps the ranking
    assert mpd_k(x, e, trained, 2, I, baseline) == mpd_k(x, 10 * e ** 3 + 1, trained, 2, I, baseline)
    with pytest.raises(ValueError):
        mpd_k(x, e[:-1], trained, 2, I, baseline)


def test_mpd_oracle_by_hand(trained, baseline, risk_items):
    sid, x, I = risk_items[1]
    e = np.zeros(len(I))
    e[[1, 0]] = [2.0, 1.0]
    m = Masker(x, I, baseline)
    want = predict_proba(trained, x)[0] - predict_proba(trained, m.apply([0, 1]))[0]
    assert mpd_k(x, e, trained, 2, I, baseline) == pytest.approx(want, abs=1e-12)


def test_global_fidelity_filters_small_samples(trained, baseline, risk_items):
    k = 3
    atts = {sid: np.arange(len(I), dtype=float) for sid, _, I in risk_items}
    rep = global_fidelity(trained, risk_items[::-1], atts, k, baseline, "toy")
    keep = sorted(sid for sid, _, I in risk_items if len(I) > k)
    assert rep.sample_ids == keep and rep.filtered == len(risk_items) - len(keep)
    assert rep.mean == pytest.approx(np.mean(rep.values))
    empty = global_fidelity(trained, risk_items, atts, 1000, baseline)
    assert empty.no_data and empty.mean is None


def test_amp_bounds_and_value(trained, baseline, risk_items):
    items = risk_items[:6]
    atts = {"a": {sid: np.arange(len(I), dtype=float) for sid, _, I in items},
            "b": {sid: -np.arange(len(I), dtype=float) for sid, _, I in items}}
    v = amp(trained, items, atts, 50, baseline)
    assert 0 <= v <= 1
    from finer.ic import select_roi
    want = np.mean([predict_proba(trained, Masker(x, I, baseline).apply(select_roi(atts[n][sid], p=50).indices))[0]
                    for n in "ab" for sid, x, I in items])
    assert v == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        amp(trained, items, {}, 50, baseline)


def test_intersection_size():
    a, b = [5, 4, 3, 2, 1], [1, 2, 3, 4, 5]
    assert intersection_size(a, a, 2) == 1.0
    assert intersection_size(a, b, 2) == 0.0
    assert intersection_size(a, b, 3) == pytest.approx(1 / 3)
    assert intersection_size(a, b, 3) == intersection_size(b, a, 3)
    with pytest.raises(ValueError):
        intersection_size(a, b[:3], 1)


def test_da_zeroes_top_cells(trained, encoded):
    _, te = encoded
    x = te.X[0]
    e = np.zeros_like(x)
    e[0, 0], e[1, 2] = 5.0, 4.0
    x2 = x.copy()
    x2[0, 0] = x2[1, 2] = 0.0
    assert da_k(x, e, trained, 2) == pytest.approx(predict_proba(trained, x2)[0], abs=1e-12)
    with pytest.raises(ValueError):
        da_k(x, e, trained, 0)
