"""Synthetic risk-detection task with planted IC-level ground truth.

A sample is a list of intelligible components (ICs), each a short token
sequence. Benign samples are built from benign motifs and filler tokens; risk
samples take the same kind of backbone and plant malicious motifs, each wholly
inside one IC, so the malicious ICs are known exactly.

The vocabulary is partitioned three ways (malicious motif tokens, benign motif
tokens, filler tokens), which makes the malicious n-grams impossible to form
by accident.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TaskSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 64
    benign_motifs: int = 12
    malicious_motifs: int = 4
    motif_length: int = 3
    ic_count: tuple[int, int] = (4, 16)
    ic_length: tuple[int, int] = (3, 20)
    planted: tuple[int, int] = (1, 1)
    n_train_benign: int = 600
    n_train_risk: int = 400
    n_test_benign: int = 60
    n_test_risk: int = 60
    # chance that an IC carries a benign motif at all
    benign_motif_rate: float = 0.5
    # benign motifs that co-occur with risk: per-IC rates in benign / risk samples
    confound_motifs: int = 3
    confound_rate: tuple[float, float] = (0.0, 0.2)
    embed_dim: int = 16
    max_len: int = 256
    seed: int = 0
    embed_seed: int = 1

    def __post_init__(self):
        for name in ("ic_count", "ic_length", "planted", "confound_rate"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("ic_count", "ic_length", "planted"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise TaskSpecError(f"{name} range {lo}..{hi} is empty")
        if self.ic_count[0] < 1:
            raise TaskSpecError("samples need at least one IC")
        if self.motif_length > self.ic_length[1]:
            raise TaskSpecError(f"motif length {self.motif_length} exceeds max IC length {self.ic_length[1]}")
        if self.planted[0] < 1 and (self.n_train_risk or self.n_test_risk):
            raise TaskSpecError("risk samples need at least one planted motif")
        if self.planted[1] > self.ic_count[1]:
            raise TaskSpecError("cannot plant more motifs than ICs")
        if self.confound_motifs > self.benign_motifs:
            raise TaskSpecError("confound motifs are drawn from the benign pool")
        n_mal, n_ben, n_fill = _partition_sizes(self)
        if n_fill < 1:
            raise TaskSpecError("vocabulary too small for the motif pools")
        if n_mal ** self.motif_length < self.malicious_motifs or n_ben ** self.motif_length < self.benign_motifs:
            raise TaskSpecError("vocabulary too small for that many distinct motifs")
        for v in (self.n_train_benign, self.n_train_risk, self.n_test_benign, self.n_test_risk):
            if v < 0:
                raise TaskSpecError("dataset sizes must be >= 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _partition_sizes(spec: TaskSpec) -> tuple[int, int, int]:
    n_mal = min(spec.vocab_size // 8, max(spec.motif_length, 2 * spec.malicious_motifs))
    n_ben = min(spec.vocab_size // 4, max(spec.motif_length, 2 * spec.benign_motifs))
    return n_mal, n_ben, spec.vocab_size - n_mal - n_ben


@dataclass(frozen=True)
class IC:
    name: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class ProblemSample:
    id: str
    ics: tuple[IC, ...]
    label: int
    ground_truth: tuple[int, ...] = ()

    def __post_init__(self):
        if (self.label == 1) != bool(self.ground_truth):
            raise ValueError(f"{self.id}: label 1 iff ground truth is nonempty")
        if any(not 0 <= g < len(self.ics) for g in self.ground_truth):
            raise ValueError(f"{self.id}: ground truth index out of range")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "ics": [{"name": ic.name, "tokens": list(ic.tokens)} for ic in self.ics],
            "ground_truth": list(self.ground_truth),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ProblemSample":
        return cls(
            rec["id"],
            tuple(IC(d["name"], tuple(int(t) for t in d["tokens"])) for d in rec["ics"]),
            int(rec["label"]),
            tuple(int(g) for g in rec["ground_truth"]),
        )


@dataclass(frozen=True)
class Motifs:
    malicious: tuple[tuple[int, ...], ...]
    benign: tuple[tuple[int, ...], ...]
    confound: tuple[tuple[int, ...], ...]
    filler: tuple[int, ...]


@dataclass
class Dataset:
    train: list[ProblemSample]
    test: list[ProblemSample]
    motifs: Motifs
    spec: TaskSpec


def make_motifs(spec: TaskSpec) -> Motifs:
    rng = np.random.default_rng([spec.seed, 0])
    n_mal, n_ben, _ = _partition_sizes(spec)
    perm = rng.permutation(spec.vocab_size)
    mal_tok, ben_tok, fill_tok = perm[:n_mal], perm[n_mal:n_mal + n_ben], perm[n_mal + n_ben:]

    def draw(pool, count):
        seen: set[tuple[int, ...]] = set()
        out = []
        while len(out) < count:
            m = tuple(int(t) for t in rng.choice(pool, size=spec.motif_length, replace=True))
            if m not in seen:
                seen.add(m)
                out.append(m)
        return tuple(out)

    malicious = draw(mal_tok, spec.malicious_motifs)
    benign = draw(ben_tok, spec.benign_motifs)
    return Motifs(malicious, benign, benign[:spec.confound_motifs], tuple(sorted(int(t) for t in fill_tok)))


def _backbone_ic(rng: np.random.Generator, spec: TaskSpec, motifs: Motifs, risky: bool,
                 min_length: int = 0) -> list[int]:
    length = int(rng.integers(max(spec.ic_length[0], min_length), spec.ic_length[1] + 1))
    toks = [int(t) for t in rng.choice(motifs.filler, size=length)]
    rate = spec.confound_rate[1] if risky else spec.confound_rate[0]
    if length >= spec.motif_length:
        if motifs.confound and rng.random() < rate:
            motif = motifs.confound[int(rng.integers(len(motifs.confound)))]
        elif rng.random() < spec.benign_motif_rate:
            plain = motifs.benign[len(motifs.confound):] or motifs.benign
            motif = plain[int(rng.integers(len(plain)))]
        else:
            motif = None
        if motif is not None:
            at = int(rng.integers(0, length - spec.motif_length + 1))
            toks[at:at + spec.motif_length] = motif
    return toks


def _sample(rng: np.random.Generator, spec: TaskSpec, motifs: Motifs, sid: str, risky: bool) -> ProblemSample:
    n_ics = int(rng.integers(spec.ic_count[0], spec.ic_count[1] + 1))
    bodies = [_backbone_ic(rng, spec, motifs, risky) for _ in range(n_ics)]
    truth: tuple[int, ...] = ()
    if risky:
        room = [i for i, b in enumerate(bodies) if len(b) >= spec.motif_length]
        if not room:
            bodies[0] = _backbone_ic(rng, spec, motifs, risky, spec.motif_length)
            room = [0]
        want = int(rng.integers(spec.planted[0], spec.planted[1] + 1))
        chosen = sorted(int(i) for i in rng.choice(room, size=min(want, len(room)), replace=False))
        for i in chosen:
            motif = motifs.malicious[int(rng.integers(len(motifs.malicious)))]
            at = int(rng.integers(0, len(bodies[i]) - spec.motif_length + 1))
            bodies[i][at:at + spec.motif_length] = motif
        truth = tuple(chosen)
    ics = tuple(IC(f"fn_{j:03d}", tuple(b)) for j, b in enumerate(bodies))
    return ProblemSample(sid, ics, int(risky), truth)


def generate_dataset(spec: TaskSpec) -> Dataset:
    """Deterministic train/test split; ids are unique across both splits."""
    motifs = make_motifs(spec)
    rng = np.random.default_rng([spec.seed, 1])

    def split(prefix, n_benign, n_risk):
        flags = [False] * n_benign + [True] * n_risk
        order = rng.permutation(len(flags))
        return [_sample(rng, spec, motifs, f"{prefix}-{i:05d}", flags[j]) for i, j in enumerate(order)]

    train = split("train", spec.n_train_benign, spec.n_train_risk)
    test = split("test", spec.n_test_benign, spec.n_test_risk)
    return Dataset(train, test, motifs, spec)


# --- transformations ---------------------------------------------------------

@dataclass(frozen=True)
class FeatureRep:
    tokens: tuple[int, ...]
    ic_spans: tuple[tuple[int, int], ...]  # (start, length)


@dataclass
class VectorRep:
    matrix: np.ndarray       # (m, n)
    pad_mask: np.ndarray     # (m,) True on real token rows
    truncated: int = 0       # tokens dropped beyond m


def h(x: ProblemSample) -> list[IC]:
    """IC decomposition: the sample's components in order."""
    return list(x.ics)


def alpha(x: ProblemSample | Sequence[IC] | IC) -> FeatureRep:
    """Flatten ICs into one token sequence, recording each IC's span."""
    if isinstance(x, ProblemSample):
        ics: Iterable[IC] = x.ics
    elif isinstance(x, IC):
        ics = (x,)
    else:
        ics = x
    tokens: list[int] = []
    spans = []
    for ic in ics:
        spans.append((len(tokens), len(ic.tokens)))
        tokens.extend(ic.tokens)
    return FeatureRep(tuple(tokens), tuple(spans))


def embedding_table(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((vocab_size, dim))


@dataclass
class Vectorizer:
    """phi: token sequence -> (m, n) matrix via a frozen embedding table."""

    table: np.ndarray
    max_len: int

    @classmethod
    def from_spec(cls, spec: TaskSpec) -> "Vectorizer":
        return cls(embedding_table(spec.vocab_size, spec.embed_dim, spec.embed_seed), spec.max_len)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.max_len, self.table.shape[1])

    def __call__(self, x_f: FeatureRep | Sequence[int]) -> VectorRep:
        tokens = x_f.tokens if isinstance(x_f, FeatureRep) else tuple(x_f)
        kept = np.asarray(tokens[:self.max_len], dtype=np.int64)
        mat = np.zeros(self.shape)
        mask = np.zeros(self.max_len, dtype=bool)
        mat[:len(kept)] = self.table[kept]
        mask[:len(kept)] = True
        return VectorRep(mat, mask, max(0, len(tokens) - self.max_len))

    def vectorize(self, x: ProblemSample) -> VectorRep:
        return self(alpha(x))

    def batch(self, samples: Sequence[ProblemSample]) -> np.ndarray:
        out = np.zeros((len(samples),) + self.shape)
        for i, s in enumerate(samples):
            out[i] = self(alpha(s)).matrix
        return out


# --- files -------------------------------------------------------------------

def dumps_samples(samples: Iterable[ProblemSample]) -> str:
    return "".join(json.dumps(s.to_record(), separators=(",", ":")) + "\n" for s in samples)


def loads_samples(text: str) -> list[ProblemSample]:
    return [ProblemSample.from_record(json.loads(line)) for line in text.splitlines() if line.strip()]


def save_dataset(ds: Dataset, directory: str | Path) -> dict:
    """Write train/test JSONL files plus a manifest; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, samples in (("train", ds.train), ("test", ds.test)):
        text = dumps_samples(samples)
        (directory / f"{split}.jsonl").write_text(text)
        files[split] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "task_spec": ds.spec.to_dict(),
        "seeds": {"data": ds.spec.seed, "embedding": ds.spec.embed_seed},
        "motifs": {
            "malicious": [list(m) for m in ds.motifs.malicious],
            "benign": [list(m) for m in ds.motifs.benign],
            "confound": [list(m) for m in ds.motifs.confound],
            "filler": list(ds.motifs.filler),
        },
        "sha256": files,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = TaskSpec(**manifest["task_spec"])
    mot = manifest["motifs"]
    motifs = Motifs(
        tuple(tuple(m) for m in mot["malicious"]),
        tuple(tuple(m) for m in mot["benign"]),
        tuple(tuple(m) for m in mot["confound"]),
        tuple(mot["filler"]),
    )
    train = loads_samples((directory / "train.jsonl").read_text())
    test = loads_samples((directory / "test.jsonl").read_text())
    return Dataset(train, test, motifs, spec)
