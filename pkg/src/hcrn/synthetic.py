"""Procedural video-QA problems with known latent programs.

A video is a sequence of segments ``(action, duration, attribute)`` spanning
``L = N * T`` frames.  Every action and attribute owns a fixed random
prototype vector; frame appearance is ``attribute + action + noise`` and clip
motion is the frame-averaged action motion prototype plus a directional
transition prototype for every segment change starting inside the clip, plus
noise.

Question templates (token sequences):

=============  ==========================  ==========================
task           question                    answer
=============  ==========================  ==========================
``count``      ``COUNT ACT_a``             number of segments of ``a``
``action``     ``REPEAT NUM_c``            action occurring ``c`` times
``transition`` ``BEFORE|AFTER ACT_a``      neighbouring action
``frameqa``    ``ATTR BUCKET_b``           attribute at centre of bucket ``b``
=============  ==========================  ==========================
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import serialization
from .model import VideoBatch

TASKS = ("count", "action", "transition", "frameqa")
SPLITS = ("train", "val", "test")


class UnsatisfiableTask(ValueError):
    """The requested question cannot be asked about this program."""


@dataclass
class DataSpec:
    task: str = "transition"
    n_clips: int = 8
    clip_len: int = 16
    d_in: int = 32
    n_actions: int = 4
    n_attributes: int = 4
    n_buckets: int = 4
    count_lo: int = 1
    count_hi: int = 5
    noise_sigma: float = 0.1
    min_segment: int = 8  # frames
    answer_format: str = "openended"  # or "multichoice" (action / transition / frameqa)
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    seed: int = 0

    @property
    def length(self) -> int:
        return self.n_clips * self.clip_len

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.n_actions < 3:
            raise ValueError("need at least three actions")
        if self.answer_format not in ("openended", "multichoice"):
            raise ValueError(f"unknown answer_format {self.answer_format!r}")
        if self.answer_format == "multichoice" and self.task == "count":
            raise ValueError("count questions are regression only")
        if self.task == "count" and (2 * self.count_hi + 1) * self.min_segment > self.length:
            raise ValueError("video too short for the requested count range")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def build_vocab(spec: DataSpec) -> list[str]:
    words = ["<pad>", "COUNT", "REPEAT", "BEFORE", "AFTER", "ATTR"]
    words += [f"ACT_{i}" for i in range(spec.n_actions)]
    words += [f"NUM_{i}" for i in range(10)]
    words += [f"BUCKET_{i}" for i in range(spec.n_buckets)]
    words += [f"ATTRVAL_{i}" for i in range(spec.n_attributes)]
    if len(words) > 64:
        raise ValueError(f"vocabulary too large ({len(words)} > 64 tokens)")
    return words


def write_vocab(path, words: list[str]) -> None:
    Path(path).write_text("\n".join(words) + "\n")


def read_vocab(path) -> list[str]:
    return Path(path).read_text().splitlines()


# ---------------------------------------------------------------------------
# latent programs
# ---------------------------------------------------------------------------


@dataclass
class Prototypes:
    appearance_action: np.ndarray  # (A, d_in)
    appearance_attribute: np.ndarray  # (K, d_in)
    motion_action: np.ndarray  # (A, d_in)
    transition: np.ndarray  # (A, A, d_in)

    @classmethod
    def draw(cls, spec: DataSpec) -> "Prototypes":
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(99,)))

        def unit(*shape):
            v = rng.normal(size=shape + (spec.d_in,))
            return v / np.linalg.norm(v, axis=-1, keepdims=True)

        return cls(
            unit(spec.n_actions), unit(spec.n_attributes), unit(spec.n_actions), unit(spec.n_actions, spec.n_actions)
        )


@dataclass
class LatentProgram:
    segments: np.ndarray  # (S, 3): action, duration, attribute
    focus: int = -1  # action a question refers to (count/transition) or the repeated action
    repeats: int = 0

    def frame_labels(self) -> tuple[np.ndarray, np.ndarray]:
        actions = np.repeat(self.segments[:, 0], self.segments[:, 1])
        attrs = np.repeat(self.segments[:, 2], self.segments[:, 1])
        return actions, attrs

    @property
    def length(self) -> int:
        return int(self.segments[:, 1].sum())


def _durations(rng, n_segments: int, total: int, minimum: int) -> np.ndarray:
    spare = total - n_segments * minimum
    if spare < 0:
        raise UnsatisfiableTask("too many segments for the video length")
    cuts = np.sort(rng.integers(0, spare + 1, size=n_segments - 1))
    extra = np.diff(np.concatenate([[0], cuts, [spare]]))
    return extra + minimum


def _program(rng, spec: DataSpec, actions: list[int], **extra) -> LatentProgram:
    durs = _durations(rng, len(actions), spec.length, spec.min_segment)
    attrs = rng.integers(0, spec.n_attributes, size=len(actions))
    seg = np.stack([np.asarray(actions), durs, attrs], axis=1).astype(np.int64)
    return LatentProgram(seg, **extra)


def _pick_other(rng, n: int, exclude) -> int:
    choices = [a for a in range(n) if a not in exclude]
    return int(rng.choice(choices))


def make_program(spec: DataSpec, target: int, rng, direction: int = 0) -> LatentProgram:
    """Build a program whose answer for ``spec.task`` is ``target``."""
    A = spec.n_actions
    if spec.task == "transition":
        x = _pick_other(rng, A, {target})
        z = _pick_other(rng, A, {target, x})
        pair = [x, target] if direction == 0 else [target, x]  # AFTER x -> target / BEFORE x -> target
        seq = [z] + pair if rng.random() < 0.5 else pair + [z]
        return _program(rng, spec, seq, focus=x)
    if spec.task == "count":
        a = int(rng.integers(A))
        seq: list[int] = []
        if rng.random() < 0.5:
            seq.append(_pick_other(rng, A, {a}))
        for i in range(target):
            seq.append(a)
            if i < target - 1:
                seq.append(_pick_other(rng, A, {a}))
        if rng.random() < 0.5:
            seq.append(_pick_other(rng, A, {a}))
        return _program(rng, spec, seq, focus=a, repeats=target)
    if spec.task == "action":
        c = int(rng.integers(2, min(A - 1, 3) + 1))
        others = [int(o) for o in rng.permutation([o for o in range(A) if o != target])[: c - 1]]
        seq = []
        for i in range(c):
            seq.append(target)
            if i < c - 1:
                seq.append(others[i])
        return _program(rng, spec, seq, focus=target, repeats=c)
    if spec.task == "frameqa":
        n_seg = int(rng.integers(2, 5))
        acts = [int(rng.integers(A))]
        while len(acts) < n_seg:
            acts.append(_pick_other(rng, A, {acts[-1]}))
        return _program(rng, spec, acts)
    raise ValueError(f"unknown task {spec.task!r}")


def gen_video(program: LatentProgram, noise_sigma: float, spec: DataSpec, protos: Prototypes, rng):
    """Frame appearance ``(N, T, d_in)`` and clip motion ``(N, d_in)``."""
    if program.length != spec.length:
        raise ValueError(f"program spans {program.length} frames, expected {spec.length}")
    acts, attrs = program.frame_labels()
    N, T = spec.n_clips, spec.clip_len
    app = protos.appearance_action[acts] + protos.appearance_attribute[attrs]
    app = app + noise_sigma * rng.normal(size=app.shape)
    motion = protos.motion_action[acts].reshape(N, T, -1).mean(axis=1)
    starts = np.cumsum(program.segments[:, 1])[:-1]
    for s, (a, b) in zip(starts, zip(program.segments[:-1, 0], program.segments[1:, 0])):
        motion[s // T] += protos.transition[a, b]
    motion = motion + noise_sigma * rng.normal(size=motion.shape)
    return app.reshape(N, T, -1), motion


def gen_question(program: LatentProgram, spec: DataSpec, vocab: list[str], rng, direction: int = 0):
    """Question token ids and the answer implied by the program."""
    ids = {w: i for i, w in enumerate(vocab)}
    acts = program.segments[:, 0]
    if spec.task == "count":
        if program.focus < 0:
            raise UnsatisfiableTask("program has no counted action")
        a = program.focus
        return [ids["COUNT"], ids[f"ACT_{a}"]], int(_runs(acts, a))
    if spec.task == "action":
        if program.repeats < 2:
            raise UnsatisfiableTask("program has no repeated action")
        return [ids["REPEAT"], ids[f"NUM_{program.repeats}"]], int(program.focus)
    if spec.task == "transition":
        x = program.focus
        pos = [i for i, a in enumerate(acts) if a == x]
        if len(pos) != 1:
            raise UnsatisfiableTask("transition anchor must occur exactly once")
        i = pos[0]
        j = i + 1 if direction == 0 else i - 1
        if not 0 <= j < len(acts):
            raise UnsatisfiableTask("anchor has no neighbour in that direction")
        word = "AFTER" if direction == 0 else "BEFORE"
        return [ids[word], ids[f"ACT_{x}"]], int(acts[j])
    if spec.task == "frameqa":
        b = int(rng.integers(spec.n_buckets))
        _, attrs = program.frame_labels()
        return [ids["ATTR"], ids[f"BUCKET_{b}"]], int(attrs[_bucket_centre(spec, b)])
    raise ValueError(f"unknown task {spec.task!r}")


def _bucket_centre(spec: DataSpec, b: int) -> int:
    width = spec.length / spec.n_buckets
    return int(width * b + width / 2)


def _runs(labels: np.ndarray, a: int) -> int:
    hit = np.asarray(labels) == a
    return int(hit[0]) + int(np.sum(hit[1:] & ~hit[:-1])) if hit.size else 0


def n_classes(spec: DataSpec) -> int:
    if spec.task in ("action", "transition"):
        return spec.n_actions
    if spec.task == "frameqa":
        return spec.n_attributes
    return spec.count_hi - spec.count_lo + 1


def candidate_tokens(spec: DataSpec, vocab: list[str]) -> list[list[int]]:
    ids = {w: i for i, w in enumerate(vocab)}
    if spec.task == "frameqa":
        return [[ids[f"ATTRVAL_{v}"]] for v in range(spec.n_attributes)]
    return [[ids[f"ACT_{a}"]] for a in range(spec.n_actions)]


# ---------------------------------------------------------------------------
# samples and datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSample:
    appearance: np.ndarray
    motion: np.ndarray
    question: np.ndarray
    answer: int
    program: LatentProgram

    def record(self) -> dict[str, np.ndarray]:
        return {
            "appearance": self.appearance,
            "motion": self.motion,
            "question": np.asarray(self.question, dtype=np.int64),
            "answer": np.asarray(self.answer, dtype=np.int64),
            "program": self.program.segments,
            "program_meta": np.asarray([self.program.focus, self.program.repeats], dtype=np.int64),
        }

    @classmethod
    def from_record(cls, rec: dict[str, np.ndarray]) -> "SyntheticSample":
        focus, repeats = (int(v) for v in rec["program_meta"])
        return cls(
            rec["appearance"],
            rec["motion"],
            rec["question"],
            int(rec["answer"]),
            LatentProgram(rec["program"], focus, repeats),
        )


def _split_seed(spec: DataSpec, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(spec.seed, spawn_key=(SPLITS.index(split), index))


def _label_order(spec: DataSpec, split: str) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(50 + SPLITS.index(split),)))
    return rng.permutation(n_classes(spec))


def make_sample(spec: DataSpec, split: str, index: int, protos: Prototypes, vocab: list[str]) -> SyntheticSample:
    """Sample ``index`` of ``split``; labels cycle so every class is equally frequent."""
    order = _label_order(spec, split)
    label = int(order[index % len(order)])
    target = label + spec.count_lo if spec.task == "count" else label
    rng = np.random.default_rng(_split_seed(spec, split, index))
    direction = int(rng.integers(2))
    if spec.task == "frameqa":
        # regenerate until the centre of the asked bucket carries the target attribute
        while True:
            program = make_program(spec, target, rng)
            b = int(rng.integers(spec.n_buckets))
            centre = _bucket_centre(spec, b)
            seg = int(np.searchsorted(np.cumsum(program.segments[:, 1]), centre, side="right"))
            program.segments[seg, 2] = target
            ids = {w: i for i, w in enumerate(vocab)}
            question, answer = [ids["ATTR"], ids[f"BUCKET_{b}"]], target
            break
    else:
        program = make_program(spec, target, rng, direction)
        question, answer = gen_question(program, spec, vocab, rng, direction)
    if answer != target:
        raise AssertionError("generator produced an inconsistent answer")
    app, motion = gen_video(program, spec.noise_sigma, spec, protos, rng)
    return SyntheticSample(app, motion, np.asarray(question, dtype=np.int64), answer, program)


@dataclass
class Dataset:
    spec: DataSpec
    vocab: list[str]
    samples: list[SyntheticSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, indices) -> VideoBatch:
        chosen = [self.samples[i] for i in indices]
        q_len = np.array([len(s.question) for s in chosen], dtype=np.int64)
        questions = np.zeros((len(chosen), q_len.max()), dtype=np.int64)
        for row, s in enumerate(chosen):
            questions[row, : len(s.question)] = s.question
        batch = VideoBatch(
            np.stack([s.appearance for s in chosen]),
            np.stack([s.motion for s in chosen]),
            questions,
            q_len,
            np.array([s.answer for s in chosen], dtype=np.int64),
        )
        if self.spec.answer_format == "multichoice":
            cands = np.asarray(candidate_tokens(self.spec, self.vocab), dtype=np.int64)
            batch.candidates = np.broadcast_to(cands, (len(chosen),) + cands.shape).copy()
            batch.candidate_len = np.full(batch.candidates.shape[:2], cands.shape[1], dtype=np.int64)
        return batch

    def answers(self) -> np.ndarray:
        return np.array([s.answer for s in self.samples], dtype=np.int64)


def generate_split(spec: DataSpec, split: str, count: int | None = None) -> Dataset:
    spec.validate()
    count = getattr(spec, f"n_{split}") if count is None else count
    protos = Prototypes.draw(spec)
    vocab = build_vocab(spec)
    return Dataset(spec, vocab, [make_sample(spec, split, i, protos, vocab) for i in range(count)])


def generate(spec: DataSpec) -> dict[str, Dataset]:
    return {split: generate_split(spec, split) for split in SPLITS}


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def oracle_answer(sample: SyntheticSample, spec: DataSpec, protos: Prototypes, vocab: list[str]) -> int:
    """Answer from nearest-prototype frame labels and the question's rule."""
    combos = (
        protos.appearance_action[:, None, :] + protos.appearance_attribute[None, :, :]
    ).reshape(-1, spec.d_in)
    frames = sample.appearance.reshape(-1, spec.d_in)
    dist = ((frames[:, None, :] - combos[None, :, :]) ** 2).sum(-1)
    best = dist.argmin(axis=1)
    acts, attrs = best // spec.n_attributes, best % spec.n_attributes
    words = [vocab[i] for i in sample.question]
    head, arg = words[0], words[1]
    run_acts = acts[np.concatenate([[True], acts[1:] != acts[:-1]])]
    if head == "COUNT":
        return int(np.clip(_runs(acts, int(arg.split("_")[1])), spec.count_lo, spec.count_hi))
    if head == "REPEAT":
        c = int(arg.split("_")[1])
        return int(np.argmin([abs(_runs(acts, a) - c) for a in range(spec.n_actions)]))
    if head in ("AFTER", "BEFORE"):
        x = int(arg.split("_")[1])
        pos = np.flatnonzero(run_acts == x)
        if len(pos) == 0:
            return -1
        j = pos[0] + (1 if head == "AFTER" else -1)
        return int(run_acts[j]) if 0 <= j < len(run_acts) else -1
    if head == "ATTR":
        return int(attrs[_bucket_centre(spec, int(arg.split("_")[1]))])
    raise ValueError(f"unknown question head {head!r}")


def oracle_solvability(dataset: Dataset) -> float:
    protos = Prototypes.draw(dataset.spec)
    hits = [
        oracle_answer(s, dataset.spec, protos, dataset.vocab) == s.answer for s in dataset.samples
    ]
    return float(np.mean(hits)) if hits else float("nan")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_dataset(datasets: dict[str, Dataset], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = next(iter(datasets.values()))
    manifest = {
        "format": serialization.FORMAT_VERSION,
        "spec": asdict(first.spec),
        "counts": {name: len(ds) for name, ds in datasets.items()},
        "seeds": {name: [first.spec.seed, SPLITS.index(name)] for name in datasets},
        "task_mix": {first.spec.task: 1.0},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_vocab(out / "vocab.txt", first.vocab)
    for name, ds in datasets.items():
        split_dir = out / name
        split_dir.mkdir(exist_ok=True)
        for i, sample in enumerate(ds.samples):
            serialization.save(split_dir / f"{i:06d}.tdmp", sample.record())
    return out


def load_dataset(path) -> dict[str, Dataset]:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    spec = spec_from_dict(manifest["spec"])
    vocab = read_vocab(root / "vocab.txt")
    out = {}
    for name, count in manifest["counts"].items():
        samples = [
            SyntheticSample.from_record(serialization.load(root / name / f"{i:06d}.tdmp"))
            for i in range(count)
        ]
        out[name] = Dataset(spec, vocab, samples)
    return out


def spec_from_dict(values: dict) -> DataSpec:
    known = {f.name for f in fields(DataSpec)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown data spec keys: {sorted(unknown)}")
    return DataSpec(**values)
