import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finer.ic import (
    PAD, ROI, BaselineSet, Masker, complement, get_ic_indicator, ind, mask, roi_size, select_roi, top_indices,
    truth_in_indicator,
)
from finer.task import IC, ProblemSample, TaskSpec, Vectorizer, generate_dataset


def span_oracle(x: ProblemSample, phi: Vectorizer) -> np.ndarray:
    """Independent indicator: locate each IC's embedded token block by sliding match.

    ICs are matched in order starting where the previous one ended, which
    gives the same answer as offset bookkeeping but is computed from the
    matrix itself.
    """
    x_v = phi.vectorize(x).matrix
    m = x_v.shape[0]
    I = np.full(x_v.shape, PAD, dtype=np.int64)
    pos, valid = 0, 0
    for ic in x.ics:
        block = phi.table[list(ic.tokens)] if ic.tokens else np.zeros((0, x_v.shape[1]))
        L = len(ic.tokens)
        # find the earliest position >= pos where the (possibly truncated) block matches
        found = None
        for s in range(pos, m + 1):
            keep = min(L, m - s)
            if keep <= 0:
                break
            if np.array_equal(x_v[s:s + keep], block[:keep]):
                found = s
                break
        if L and found is not None:
            keep = min(L, m - found)
            I[found:found + keep] = valid
            valid += 1
            pos = found + L
        else:
            pos += L
    return I


def test_indicator_matches_span_oracle_on_generated_samples():
    spec = TaskSpec(n_train_benign=60, n_train_risk=40, n_test_benign=0, n_test_risk=0, max_len=48,
                    ic_count=(2, 9), seed=11)
    ds = generate_dataset(spec)
    phi = Vectorizer.from_spec(spec)
    for x in ds.train:
        assert np.array_equal(get_ic_indicator(x, phi=phi).I, span_oracle(x, phi))


def test_indicator_drops_empty_and_truncated_ics():
    phi = Vectorizer(np.eye(5), max_len=4)
    x = ProblemSample("s", (IC("a", (1, 2)), IC("e", ()), IC("b", (3, 4)), IC("c", (1,))), 0)
    I = get_ic_indicator(x, phi=phi)
    assert [s.name for s in I.ics] == ["a", "b"]
    assert I.I[:, 0].tolist() == [0, 0, 1, 1]
    x2 = ProblemSample("t", (IC("a", (1, 2, 3)), IC("b", (4, 1))), 0)
    I2 = get_ic_indicator(x2, phi=phi)
    assert I2.ics[1].rows == 1 and I2.ics[1].length == 2
    with pytest.raises(ValueError):
        get_ic_indicator(x2)


def test_ind_marks_exactly_roi_cells(encoded):
    tr, _ = encoded
    I = tr.indicators[0]
    r = ROI((0, len(I) - 1))
    M = ind(tr.X[0], r, I)
    assert M.sum() == sum(I.ics[j].rows for j in set(r.indices)) * I.I.shape[1]
    assert not ind(tr.X[0], ROI(), I).any()
    with pytest.raises(IndexError):
        ind(tr.X[0], ROI((len(I),)), I)
    cell = ind(tr.X[0], ROI(((0, 1), (2, 0)), space="feature"), I)
    assert cell.sum() == 2 and cell[0, 1] == 1


@pytest.mark.parametrize("n,k,p,want", [
    (10, 3, None, 3), (2, 5, None, 2), (10, None, 5, 1), (10, None, 30, 3), (7, None, 50, 4), (1, None, 1, 1),
])
def test_roi_size(n, k, p, want):
    assert roi_size(n, k=k, p=p) == want


def test_roi_size_errors():
    for kw in (dict(), dict(k=1, p=5), dict(k=0), dict(p=0), dict(p=101)):
        with pytest.raises(ValueError):
            roi_size(5, **kw)


def test_select_roi_ties_go_to_lower_index():
    assert select_roi([1.0, 3.0, 3.0, 0.5, 3.0], k=2).indices == (1, 2)
    assert select_roi(np.zeros(4), k=3).indices == (0, 1, 2)
    assert top_indices([0.0, 2.0, 1.0], 3).tolist() == [1, 2, 0]
    with pytest.raises(ValueError):
        select_roi([], k=1)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=20), st.integers(1, 25))
def test_select_roi_picks_largest(scores, k):
    r = select_roi(scores, k=k)
    chosen = [scores[i] for i in r.indices]
    rest = [s for i, s in enumerate(scores) if i not in r.indices]
    assert len(r) == min(k, len(scores))
    assert not rest or min(chosen) >= max(rest)


def test_mask_locality_and_replacement(encoded, baseline):
    tr, _ = encoded
    i = int(np.flatnonzero(tr.y == 1)[0])
    x, I = tr.X[i], tr.indicators[i]
    r = ROI(truth_in_indicator(tr.samples[i].ground_truth, I))
    out = mask(x, r, baseline, I)
    M = ind(x, r, I).astype(bool)
    assert np.array_equal(out[~M], x[~M])
    # masked rows hold benign tokens of the pool
    sample = mask(tr.samples[i], r, baseline, I)
    for j in r.indices:
        toks = sample.ics[I.ics[j].index].tokens
        assert len(toks) == I.ics[j].length
        np.testing.assert_array_equal(out[I.row_slice(j)], baseline.phi.table[list(toks[:I.ics[j].rows])])
    assert mask(x, ROI(), baseline, I) is x
    with pytest.raises(ValueError):
        mask(x, ROI(((0, 0),), space="feature"), baseline, I)


def test_masking_composes_across_ic_sets(encoded, baseline):
    tr, _ = encoded
    x, I = tr.X[3], tr.indicators[3]
    m = Masker(x, I, baseline)
    both = m.apply([0, 1])
    step = mask(mask(x, ROI((0,)), baseline, I), ROI((1,)), baseline, I)
    assert np.array_equal(both, step)
    pats = np.array([[True] + [False] * (len(I) - 1), [False] * len(I)])
    B = m.batch(pats)
    assert np.array_equal(B[0], m.apply([0])) and np.array_equal(B[1], x)


def test_baseline_set_checks(small_ds, phi):
    with pytest.raises(ValueError):
        BaselineSet([s for s in small_ds.train if s.label == 1][:2], phi)
    with pytest.raises(ValueError):
        BaselineSet([], phi)
    b = BaselineSet([s for s in small_ds.train if s.label == 0], phi, 1)
    assert b.with_seed(2).seed == 2 and b.with_seed(2).pool is b.pool


def test_complement_and_union():
    assert complement(ROI((1, 3)), 5).indices == (0, 2, 4)
    assert (ROI((3, 1)) | ROI((1, 2))).indices == (1, 2, 3)
    with pytest.raises(ValueError):
        ROI((1,)) | ROI(((0, 0),), space="feature")


def test_encoded_subset(encoded):
    tr, _ = encoded
    sub = tr.subset([2, 0])
    assert [s.id for s in sub.samples] == [tr.samples[2].id, tr.samples[0].id]
    assert np.array_equal(sub.X[1], tr.X[0])
    assert sub.items()[0][0] == tr.samples[2].id
