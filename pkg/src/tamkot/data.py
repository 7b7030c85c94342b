"""Interaction logs, vocabularies, chunking, folds and synthetic students.

The on-disk log is a CSV with a header line and one activity per row::

    student_id,time_index,material_type,material_id,response
    s1,0,0,prob-7,1
    s1,1,1,video-2,
    s1,2,0,prob-3,0.5

``material_type`` is 0 for an assessed material (problem, quiz) and 1 for a
non-assessed one (lecture, hint); ``response`` is empty exactly when the
material is non-assessed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

ASSESSED = 0
NON_ASSESSED = 1

LOG_COLUMNS = ("student_id", "time_index", "material_type", "material_id", "response")


@dataclass(frozen=True)
class Activity:
    """One learning event: a problem attempt or a lecture view."""

    material_type: int
    material_id: int
    response: float | None = None
    is_padding: bool = False

    def __post_init__(self):
        if self.is_padding:
            return
        if self.material_type not in (ASSESSED, NON_ASSESSED):
            raise ValidationError(f"material_type must be 0 or 1, got {self.material_type!r}")
        if self.material_id < 0:
            raise ValidationError(f"negative material_id {self.material_id}")
        if (self.response is None) != (self.material_type == NON_ASSESSED):
            raise ValidationError("response must be present iff the material is assessed")

    @property
    def assessed(self) -> bool:
        return not self.is_padding and self.material_type == ASSESSED


PAD = Activity(material_type=ASSESSED, material_id=0, response=None, is_padding=True)


@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    activities: tuple[Activity, ...]

    def __len__(self) -> int:
        return len(self.activities)

    @property
    def n_real(self) -> int:
        return sum(not a.is_padding for a in self.activities)


@dataclass(frozen=True)
class Dataset:
    """A collection of student sequences sharing two dense vocabularies."""

    sequences: tuple[StudentSequence, ...]
    Q: int
    L: int
    response_mode: str = "binary"
    problem_names: tuple[str, ...] = ()
    lecture_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.response_mode not in ("binary", "numeric"):
            raise ValidationError(f"unknown response_mode {self.response_mode!r}")
        if not self.problem_names:
            object.__setattr__(self, "problem_names", tuple(str(i) for i in range(self.Q)))
        if not self.lecture_names:
            object.__setattr__(self, "lecture_names", tuple(str(i) for i in range(self.L)))
        if len(self.problem_names) != self.Q or len(self.lecture_names) != self.L:
            raise ValidationError("vocabulary name lists must match Q and L")
        for seq in self.sequences:
            for a in seq.activities:
                if a.is_padding:
                    continue
                limit = self.Q if a.material_type == ASSESSED else self.L
                if a.material_id >= limit:
                    raise ValidationError(
                        f"student {seq.student_id}: material_id {a.material_id} "
                        f"outside vocabulary of size {limit}")

    @property
    def student_ids(self) -> list[str]:
        return [s.student_id for s in self.sequences]

    def subset(self, student_ids) -> "Dataset":
        keep = set(student_ids)
        return replace(self, sequences=tuple(s for s in self.sequences if s.student_id in keep))

    def n_activities(self) -> int:
        return sum(len(s) for s in self.sequences)


def infer_response_mode(responses) -> str:
    return "binary" if all(r in (0.0, 1.0) for r in responses) else "numeric"


def _parse_number(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} {text!r} is not a number", line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} {text!r} is not finite", line)
    return value


def load_interactions(path, delimiter: str = ",") -> Dataset:
    """Read a CSV interaction log into a :class:`Dataset`.

    Students keep their first-appearance order in the file and each
    student's records are sorted by ``time_index``. Material ids are then
    numbered densely in that traversal order (first student first, earliest
    record first), which makes ``load(save(ds)) == ds`` for any loaded
    dataset.
    """
    path = Path(path)
    rows: dict[str, list[tuple[float, int, str, float | None]]] = {}
    seen: set[tuple[str, float]] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            return Dataset(sequences=(), Q=0, L=0)
        header = [h.strip() for h in header]
        if tuple(header) != LOG_COLUMNS:
            raise ParseError(f"expected header {','.join(LOG_COLUMNS)}, got {','.join(header)}", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(LOG_COLUMNS):
                raise ParseError(f"expected {len(LOG_COLUMNS)} fields, got {len(rec)}", lineno)
            sid, t_text, d_text, mid, r_text = (f.strip() for f in rec)
            if not sid:
                raise ParseError("empty student_id", lineno)
            t = _parse_number(t_text, "time_index", lineno)
            if d_text not in ("0", "1"):
                raise ParseError(f"material_type must be 0 or 1, got {d_text!r}", lineno)
            d = int(d_text)
            if not mid:
                raise ParseError("empty material_id", lineno)
            if d == NON_ASSESSED:
                if r_text:
                    raise ParseError("non-assessed record carries a response", lineno)
                r = None
            else:
                if not r_text:
                    raise ParseError("assessed record is missing its response", lineno)
                r = _parse_number(r_text, "response", lineno)
                if r < 0:
                    raise ParseError(f"negative response {r}", lineno)
            key = (sid, t)
            if key in seen:
                raise ValidationError(f"line {lineno}: duplicate record for student {sid!r} at time {t_text}")
            seen.add(key)
            rows.setdefault(sid, []).append((t, d, mid, r))

    problems: dict[str, int] = {}
    lectures: dict[str, int] = {}
    sequences = []
    responses = []
    for sid, recs in rows.items():
        recs.sort(key=lambda x: x[0])
        acts = []
        for _, d, mid, r in recs:
            vocab = problems if d == ASSESSED else lectures
            idx = vocab.setdefault(mid, len(vocab))
            acts.append(Activity(d, idx, r))
            if r is not None:
                responses.append(r)
        sequences.append(StudentSequence(sid, tuple(acts)))
    return Dataset(
        sequences=tuple(sequences),
        Q=len(problems),
        L=len(lectures),
        response_mode=infer_response_mode(responses),
        problem_names=tuple(problems),
        lecture_names=tuple(lectures),
    )


def _format_response(r: float) -> str:
    return str(int(r)) if float(r).is_integer() else repr(float(r))


def save_interactions(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the log format read by :func:`load_interactions`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for seq in dataset.sequences:
            t = 0
            for a in seq.activities:
                if a.is_padding:
                    continue
                if a.material_type == ASSESSED:
                    name, resp = dataset.problem_names[a.material_id], _format_response(a.response)
                else:
                    name, resp = dataset.lecture_names[a.material_id], ""
                writer.writerow((seq.student_id, t, a.material_type, name, resp))
                t += 1


def normalize_scores(dataset: Dataset, max_score_map: Mapping) -> Dataset:
    """Divide every numeric response by its material's maximum score.

    ``max_score_map`` may be keyed by original material name or by dense id.
    Binary datasets are returned unchanged.
    """
    if dataset.response_mode == "binary":
        return dataset
    maxima = np.empty(dataset.Q)
    for q, name in enumerate(dataset.problem_names):
        if name in max_score_map:
            m = max_score_map[name]
        elif q in max_score_map:
            m = max_score_map[q]
        else:
            raise ValidationError(f"no maximum score for assessed material {name!r}")
        if not m > 0:
            raise ValidationError(f"maximum score for {name!r} must be positive, got {m}")
        maxima[q] = m

    sequences = []
    for seq in dataset.sequences:
        acts = []
        for a in seq.activities:
            if a.assessed:
                m = maxima[a.material_id]
                if a.response > m:
                    raise ValidationError(
                        f"student {seq.student_id}: score {a.response} exceeds maximum {m} "
                        f"of {dataset.problem_names[a.material_id]!r}")
                a = replace(a, response=float(a.response / m))
            acts.append(a)
        sequences.append(StudentSequence(seq.student_id, tuple(acts)))
    return replace(dataset, sequences=tuple(sequences))


def pad_truncate(seq: StudentSequence, seq_len: int) -> list[StudentSequence]:
    """Cut ``seq`` into chunks of exactly ``seq_len`` activities.

    The last chunk is filled with :data:`PAD` records. Each chunk is modelled
    independently, starting from a zero state.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    acts = seq.activities
    chunks = []
    for start in range(0, len(acts), seq_len):
        piece = acts[start:start + seq_len]
        piece = piece + (PAD,) * (seq_len - len(piece))
        chunks.append(StudentSequence(seq.student_id, piece))
    return chunks


def chunk_dataset(dataset: Dataset, seq_len: int, student_ids=None) -> list[StudentSequence]:
    keep = None if student_ids is None else set(student_ids)
    out = []
    for seq in dataset.sequences:
        if keep is None or seq.student_id in keep:
            out.extend(pad_truncate(seq, seq_len))
    return out


def stratified_folds(dataset: Dataset, k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Partition students into ``k`` test groups; return (train, test) id lists.

    Group sizes differ by at most one. No student appears in both halves of
    any fold.
    """
    ids = dataset.student_ids
    if k < 2:
        raise ValidationError(f"need k >= 2 folds, got {k}")
    if len(ids) < k:
        raise ValidationError(f"{len(ids)} students cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    groups = np.array_split(order, k)
    folds = []
    for g in groups:
        test = set(g.tolist())
        folds.append(([ids[i] for i in order if i not in test], [ids[i] for i in sorted(test)]))
    return folds


def split_validation(student_ids: Sequence[str], fraction: float = 0.2, seed: int = 0):
    """Hold out ``fraction`` of ``student_ids`` as a validation split."""
    ids = list(student_ids)
    n_val = int(round(fraction * len(ids)))
    if fraction > 0 and len(ids) > 1:
        n_val = min(max(n_val, 1), len(ids) - 1)
    else:
        n_val = 0
    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    return [s for s in ids if s not in val], [s for s in ids if s in val]


# --- synthetic students -----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Parameters of the simulated population.

    Every student carries a latent skill vector over ``n_concepts``. A switch
    from a problem to a lecture multiplies the skill by ``transfer_QL`` and a
    switch from a lecture to a problem by ``transfer_LQ``; identity matrices
    turn the transfer off. Each material loads on one concept.
    """

    n_students: int = 100
    n_problems: int = 20
    n_lectures: int = 10
    n_concepts: int = 4
    transfer_QL: list = None
    transfer_LQ: list = None
    seed: int = 0
    min_length: int = 20
    max_length: int = 60
    lecture_prob: float = 0.3
    skill_init_mean: float = 0.0
    skill_init_std: float = 1.0
    loading_scale: float = 1.0
    difficulty_std: float = 0.5
    lecture_gain: float = 0.5
    practice_gain: float = 0.1
    skill_clip: float = 10.0

    def __post_init__(self):
        for name in ("n_students", "n_problems", "n_lectures", "n_concepts", "min_length"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_length < self.min_length:
            raise ValidationError("max_length must be >= min_length")
        if not 0.0 <= self.lecture_prob <= 1.0:
            raise ValidationError("lecture_prob must lie in [0, 1]")
        k = self.n_concepts
        for name in ("transfer_QL", "transfer_LQ"):
            value = getattr(self, name)
            mat = np.eye(k) if value is None else np.asarray(value, dtype=float)
            if mat.shape != (k, k):
                raise ValidationError(f"{name} must be {k}x{k}, got shape {mat.shape}")
            setattr(self, name, mat.tolist())


def generate_synthetic(config: SyntheticConfig | Mapping) -> Dataset:
    if not isinstance(config, SyntheticConfig):
        config = SyntheticConfig(**dict(config))
    rng = np.random.default_rng(config.seed)
    k = config.n_concepts
    t_ql = np.asarray(config.transfer_QL)
    t_lq = np.asarray(config.transfer_LQ)

    problem_concept = rng.integers(k, size=config.n_problems)
    lecture_concept = rng.integers(k, size=config.n_lectures)
    difficulty = rng.normal(0.0, config.difficulty_std, size=config.n_problems)

    sequences = []
    for s in range(config.n_students):
        skill = rng.normal(config.skill_init_mean, config.skill_init_std, size=k)
        n = int(rng.integers(config.min_length, config.max_length + 1))
        acts = []
        prev = None
        for _ in range(n):
            d = NON_ASSESSED if rng.random() < config.lecture_prob else ASSESSED
            if prev == ASSESSED and d == NON_ASSESSED:
                skill = t_ql @ skill
            elif prev == NON_ASSESSED and d == ASSESSED:
                skill = t_lq @ skill
            if d == NON_ASSESSED:
                lec = int(rng.integers(config.n_lectures))
                skill[lecture_concept[lec]] += config.lecture_gain
                acts.append(Activity(NON_ASSESSED, lec))
            else:
                q = int(rng.integers(config.n_problems))
                c = problem_concept[q]
                logit = config.loading_scale * skill[c] - difficulty[q]
                p = 1.0 / (1.0 + math.exp(-logit))
                r = 1.0 if rng.random() < p else 0.0
                skill[c] += config.practice_gain
                acts.append(Activity(ASSESSED, q, r))
            np.clip(skill, -config.skill_clip, config.skill_clip, out=skill)
            prev = d
        sequences.append(StudentSequence(f"s{s:05d}", tuple(acts)))
    return _canonicalize(sequences, config.n_problems, config.n_lectures)


def _canonicalize(sequences, n_problems: int, n_lectures: int) -> Dataset:
    """Renumber materials densely by first appearance, dropping unused ids."""
    pmap: dict[int, int] = {}
    lmap: dict[int, int] = {}
    out = []
    for seq in sequences:
        acts = []
        for a in seq.activities:
            vocab = pmap if a.material_type == ASSESSED else lmap
            acts.append(replace(a, material_id=vocab.setdefault(a.material_id, len(vocab))))
        out.append(StudentSequence(seq.student_id, tuple(acts)))
    responses = [a.response for s in out for a in s.activities if a.response is not None]
    return Dataset(
        sequences=tuple(out),
        Q=len(pmap),
        L=len(lmap),
        response_mode=infer_response_mode(responses),
        problem_names=tuple(f"q{orig}" for orig in pmap),
        lecture_names=tuple(f"l{orig}" for orig in lmap),
    )


def shuffle_labels(dataset: Dataset, seed: int = 0) -> Dataset:
    """Permute assessed responses across the whole dataset (a null control)."""
    rng = np.random.default_rng(seed)
    responses = [a.response for s in dataset.sequences for a in s.activities if a.assessed]
    perm = rng.permutation(len(responses))
    shuffled = iter([responses[i] for i in perm])
    seqs = []
    for seq in dataset.sequences:
        acts = tuple(replace(a, response=next(shuffled)) if a.assessed else a for a in seq.activities)
        seqs.append(StudentSequence(seq.student_id, acts))
    return replace(dataset, sequences=tuple(seqs))
