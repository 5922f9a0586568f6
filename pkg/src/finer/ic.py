"""IC indicator, region indicator, ROI selection and baseline masking.

The indicator ``I`` maps every cell of the vector representation to the valid
IC it came from (``-1`` for padding), which lets domain-space operations such
as "replace ICs 2 and 5" run directly on the (m, n) model input.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from finer.task import IC, ProblemSample, VectorRep, Vectorizer, alpha as default_alpha, h as default_h

PAD = -1


@dataclass(frozen=True)
class ICSlot:
    index: int        # position of the IC in h(x)
    name: str
    start: int        # first row in x_v
    rows: int         # rows present in x_v (after truncation)
    length: int       # token length in the problem space


@dataclass
class ICIndicator:
    I: np.ndarray                 # (m, n) int, PAD on unmapped cells
    ics: list[ICSlot]
    sample_id: str = ""

    def __len__(self) -> int:
        return len(self.ics)

    def row_slice(self, j: int) -> slice:
        s = self.ics[j]
        return slice(s.start, s.start + s.rows)

    def names(self, indices: Iterable[int]) -> list[str]:
        return [self.ics[j].name for j in indices]


@dataclass(frozen=True)
class ROI:
    indices: tuple = ()
    space: str = "domain"   # "domain": IC indices; "feature": (row, col) cells

    def __post_init__(self):
        if self.space == "domain":
            object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))
        else:
            object.__setattr__(self, "indices", tuple(sorted((int(r), int(c)) for r, c in self.indices)))

    def __len__(self) -> int:
        return len(self.indices)

    def __or__(self, other: "ROI") -> "ROI":
        if other.space != self.space:
            raise ValueError("cannot combine ROIs from different spaces")
        return ROI(tuple(set(self.indices) | set(other.indices)), self.space)


def get_ic_indicator(x: ProblemSample, h: Callable = default_h, alpha: Callable = default_alpha,
                     phi: Vectorizer | None = None) -> ICIndicator:
    """Map each cell of phi(alpha(x)) to its valid IC.

    Each IC is vectorized on its own to find its counterpart; the counterpart's
    rows are located at the IC's running offset in the full sequence. ICs with
    no rows left (empty, or truncated away) are dropped from the valid array.
    """
    if phi is None:
        raise ValueError("a vectorizer is required")
    x_v = phi(alpha(x))
    m, n = x_v.matrix.shape
    I = np.full((m, n), PAD, dtype=np.int64)
    ics: list[ICSlot] = []
    offset = 0
    for pos, d in enumerate(h(x)):
        d_v = phi(alpha(d))
        rows = int(d_v.pad_mask.sum())
        start = offset
        offset += len(d.tokens)
        rows = max(0, min(rows, m - start))
        if rows == 0:
            continue
        I[start:start + rows, :] = len(ics)
        ics.append(ICSlot(pos, d.name, start, rows, len(d.tokens)))
    return ICIndicator(I, ics, x.id)


def ind(x_v, r: ROI, I: ICIndicator) -> np.ndarray:
    """Binary (m, n) matrix marking the cells covered by ``r``."""
    shape = I.I.shape
    if r.space == "feature":
        out = np.zeros(shape, dtype=np.int8)
        for row, col in r.indices:
            out[row, col] = 1
        return out
    if not r.indices:
        return np.zeros(shape, dtype=np.int8)
    if max(r.indices) >= len(I) or min(r.indices) < 0:
        raise IndexError("ROI index outside the valid IC array")
    return np.isin(I.I, r.indices).astype(np.int8)


def roi_size(n_ics: int, k: int | None = None, p: float | None = None) -> int:
    if (k is None) == (p is None):
        raise ValueError("give exactly one of k or p")
    if k is not None:
        if k < 1:
            raise ValueError("k must be >= 1")
        return min(int(k), n_ics)
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    return min(n_ics, max(1, math.ceil(p * n_ics / 100)))


def top_indices(scores, count: int) -> np.ndarray:
    """Indices of the ``count`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return order[:count]


def select_roi(scores, k: int | None = None, p: float | None = None) -> ROI:
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot select an ROI from an empty attribution")
    return ROI(tuple(top_indices(scores, roi_size(scores.size, k, p))))


# --- masking -----------------------------------------------------------------

@dataclass
class BaselineSet:
    """Pool of benign samples whose ICs replace masked regions."""

    samples: Sequence[ProblemSample]
    phi: Vectorizer
    seed: int = 0
    pool: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        if any(s.label != 0 for s in self.samples):
            raise ValueError("baseline samples must all be benign")
        self.pool = [ic.tokens for s in self.samples for ic in s.ics if ic.tokens]
        if not self.pool:
            raise ValueError("empty baseline pool")

    def with_seed(self, seed: int) -> "BaselineSet":
        out = object.__new__(BaselineSet)
        out.samples, out.phi, out.seed, out.pool = self.samples, self.phi, seed, self.pool
        return out

    def replacement(self, sample_id: str, slot: ICSlot) -> tuple[int, ...]:
        """Benign tokens for ``slot``, tiled or cut to the slot's length.

        The draw depends only on (seed, sample id, IC position), so masking a
        set of ICs agrees with masking each of them separately.
        """
        rng = np.random.default_rng([self.seed, zlib.crc32(sample_id.encode()), slot.index])
        src = self.pool[int(rng.integers(len(self.pool)))]
        reps = -(-slot.length // len(src))
        return tuple((src * reps)[:slot.length])


class Masker:
    """Fast masking of one sample: precomputes every IC's replacement rows."""

    def __init__(self, x_v, I: ICIndicator, B: BaselineSet):
        self.x_v = np.asarray(getattr(x_v, "matrix", x_v), dtype=np.float64)
        self.I = I
        self.B = B
        self.blocks = []
        for slot in I.ics:
            toks = np.asarray(B.replacement(I.sample_id, slot)[:slot.rows], dtype=np.int64)
            self.blocks.append(B.phi.table[toks])

    @property
    def n_ics(self) -> int:
        return len(self.I)

    def apply(self, off: Iterable[int]) -> np.ndarray:
        out = self.x_v.copy()
        for j in off:
            out[self.I.row_slice(j)] = self.blocks[j]
        return out

    def batch(self, off_patterns: np.ndarray) -> np.ndarray:
        """``off_patterns`` is (N, |I|) boolean, True = masked. Returns (N, m, n)."""
        off_patterns = np.asarray(off_patterns, dtype=bool)
        out = np.broadcast_to(self.x_v, (off_patterns.shape[0],) + self.x_v.shape).copy()
        for j in range(self.n_ics):
            sel = off_patterns[:, j]
            if sel.any():
                out[sel, self.I.row_slice(j)] = self.blocks[j]
        return out


def mask(x: ProblemSample | VectorRep | np.ndarray, r: ROI, B: BaselineSet, I: ICIndicator):
    """Replace the ICs in ``r`` with benign ICs drawn from ``B``.

    Works on a problem-space sample (returns a new sample) or on a vector
    representation (returns a matrix, or a VectorRep if one was given).
    Cells outside ``ind(x_v, r, I)`` are untouched.
    """
    if not B.pool:
        raise ValueError("empty baseline pool")
    if r.space != "domain":
        raise ValueError("mask takes a domain-space ROI")
    if not r.indices:
        return x
    if isinstance(x, ProblemSample):
        ics = list(x.ics)
        for j in r.indices:
            slot = I.ics[j]
            ics[slot.index] = IC(ics[slot.index].name, B.replacement(I.sample_id, slot))
        return ProblemSample(x.id, tuple(ics), x.label, x.ground_truth)
    out = Masker(x, I, B).apply(r.indices)
    if isinstance(x, VectorRep):
        return VectorRep(out, x.pad_mask.copy(), x.truncated)
    return out


def complement(r: ROI, n_ics: int) -> ROI:
    return ROI(tuple(j for j in range(n_ics) if j not in set(r.indices)))


__all__ = [
    "PAD", "ICSlot", "ICIndicator", "ROI", "BaselineSet", "Masker",
    "get_ic_indicator", "ind", "select_roi", "roi_size", "top_indices", "mask", "complement",
    "truth_in_indicator", "Encoded",
]


def truth_in_indicator(truth: Iterable[int], I: ICIndicator) -> tuple[int, ...]:
    """Map original IC positions to indices of the valid IC array (dropping filtered ICs)."""
    pos = {slot.index: j for j, slot in enumerate(I.ics)}
    return tuple(sorted(pos[t] for t in truth if t in pos))


@dataclass
class Encoded:
    """Samples with their vector representations and IC indicators."""

    samples: list[ProblemSample]
    X: np.ndarray                 # (N, m, n)
    indicators: list[ICIndicator]
    y: np.ndarray                 # (N,) labels

    @classmethod
    def build(cls, samples: Sequence[ProblemSample], phi: Vectorizer) -> "Encoded":
        samples = list(samples)
        X = phi.batch(samples) if samples else np.zeros((0,) + phi.shape)
        inds = [get_ic_indicator(s, phi=phi) for s in samples]
        return cls(samples, X, inds, np.array([s.label for s in samples], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx: Sequence[int]) -> "Encoded":
        idx = list(idx)
        return Encoded([self.samples[i] for i in idx], self.X[idx], [self.indicators[i] for i in idx], self.y[idx])

    def items(self) -> list[tuple[str, np.ndarray, ICIndicator]]:
        return [(s.id, self.X[i], self.indicators[i]) for i, s in enumerate(self.samples)]
