import collections
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcrn import serialization
from hcrn.synthetic import (
    TASKS,
    DataSpec,
    LatentProgram,
    Prototypes,
    UnsatisfiableTask,
    build_vocab,
    gen_question,
    gen_video,
    generate,
    generate_split,
    load_dataset,
    make_sample,
    oracle_answer,
    oracle_solvability,
    read_vocab,
    save_dataset,
)


def program(*segments, focus=-1, repeats=0):
    return LatentProgram(np.array(segments, dtype=np.int64), focus, repeats)


SPEC = DataSpec(n_clips=2, clip_len=8, d_in=8)


def test_noiseless_segments_are_constant_and_prototypes_recoverable():
    spec = DataSpec(noise_sigma=0.0)
    protos = Prototypes.draw(spec)
    prog = program((0, 40, 1), (2, 50, 3), (1, 38, 0))
    app, _ = gen_video(prog, 0.0, spec, protos, np.random.default_rng(0))
    frames = app.reshape(-1, spec.d_in)
    assert np.array_equal(frames[0], frames[39]) and np.array_equal(frames[40], frames[89])
    combos = (protos.appearance_action[:, None] + protos.appearance_attribute[None]).reshape(-1, spec.d_in)
    best = ((frames[:, None] - combos[None]) ** 2).sum(-1).argmin(1)
    acts, attrs = prog.frame_labels()
    np.testing.assert_array_equal(best, acts * spec.n_attributes + attrs)


def test_single_action_video_has_equal_clip_motion():
    spec = DataSpec(noise_sigma=0.0)
    _, motion = gen_video(program((2, 128, 0)), 0.0, spec, Prototypes.draw(spec), np.random.default_rng(0))
    assert all(np.array_equal(m, motion[0]) for m in motion)


def test_transition_indicator_lands_in_the_clip_of_the_change():
    spec = DataSpec(noise_sigma=0.0)
    protos = Prototypes.draw(spec)
    _, motion = gen_video(program((0, 32, 0), (1, 96, 0)), 0.0, spec, protos, np.random.default_rng(0))
    np.testing.assert_allclose(motion[2], protos.motion_action[1] + protos.transition[0, 1])
    np.testing.assert_allclose(motion[1], protos.motion_action[0])


def test_bad_durations():
    with pytest.raises(ValueError):
        gen_video(program((0, 10, 0)), 0.1, DataSpec(), Prototypes.draw(DataSpec()), np.random.default_rng(0))


def test_question_examples():
    spec = DataSpec()
    vocab = build_vocab(spec)
    words = lambda ids: [vocab[i] for i in ids]  # noqa: E731
    rng = np.random.default_rng(0)
    rep = program((1, 20, 0), (0, 20, 0), (1, 20, 0), (2, 20, 0), (1, 48, 0), focus=1, repeats=3)
    q, a = gen_question(rep, DataSpec(task="count"), vocab, rng)
    assert words(q) == ["COUNT", "ACT_1"] and a == 3
    q, a = gen_question(rep, DataSpec(task="action"), vocab, rng)
    assert words(q) == ["REPEAT", "NUM_3"] and a == 1
    trans = program((3, 40, 0), (0, 40, 0), (2, 48, 0), focus=0)
    q, a = gen_question(trans, DataSpec(task="transition"), vocab, rng, direction=0)
    assert words(q) == ["AFTER", "ACT_0"] and a == 2
    q, a = gen_question(trans, DataSpec(task="transition"), vocab, rng, direction=1)
    assert words(q) == ["BEFORE", "ACT_0"] and a == 3
    attr = program((0, 64, 2), (1, 64, 3))
    q, a = gen_question(attr, DataSpec(task="frameqa"), vocab, np.random.default_rng(1))
    bucket = int(vocab[q[1]].split("_")[1])
    assert a == (2 if bucket < 2 else 3)


def test_unsatisfiable_questions():
    spec = DataSpec(task="transition")
    vocab = build_vocab(spec)
    with pytest.raises(UnsatisfiableTask):
        gen_question(program((0, 64, 0), (1, 64, 0), focus=1), spec, vocab, None, direction=0)
    with pytest.raises(UnsatisfiableTask):
        gen_question(program((0, 128, 0)), DataSpec(task="action"), vocab, None)


def test_vocabulary_is_small_and_round_trips(tmp_path):
    vocab = build_vocab(DataSpec())
    assert len(vocab) <= 64 and len(set(vocab)) == len(vocab)
    (tmp_path / "v.txt").write_text("\n".join(vocab) + "\n")
    assert read_vocab(tmp_path / "v.txt") == vocab


@pytest.mark.parametrize("task", TASKS)
def test_oracle_levels(task):
    clean = generate_split(DataSpec(task=task, noise_sigma=0.0, n_train=100), "train")
    assert oracle_solvability(clean) == 1.0
    assert oracle_solvability(generate_split(DataSpec(task=task, noise_sigma=0.1, n_train=1000), "train")) >= 0.98


@pytest.mark.parametrize("task, chance", [("transition", 0.25), ("frameqa", 0.25), ("action", 0.25), ("count", 0.2)])
def test_heavy_noise_destroys_the_task(task, chance):
    acc = oracle_solvability(generate_split(DataSpec(task=task, noise_sigma=10.0, n_train=1000), "train"))
    assert abs(acc - chance) < 0.08


@pytest.mark.parametrize("task", TASKS)
def test_class_balance(task):
    ds = generate_split(DataSpec(task=task, n_train=403), "train")
    counts = collections.Counter(ds.answers().tolist())
    uniform = len(ds) / len(counts)
    assert all(abs(c - uniform) <= 0.2 * uniform for c in counts.values())


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(TASKS), st.integers(0, 2**31 - 1), st.integers(0, 50))
def test_programs_are_consistent(task, seed, index):
    spec = DataSpec(task=task, seed=seed)
    vocab = build_vocab(spec)
    s = make_sample(spec, "train", index, Prototypes.draw(spec), vocab)
    assert s.program.length == spec.length
    assert (s.program.segments[:, 1] >= 1).all()
    assert (s.program.segments[1:, 0] != s.program.segments[:-1, 0]).all()
    if task == "count":
        assert spec.count_lo <= s.answer <= spec.count_hi
    assert s.appearance.shape == (spec.n_clips, spec.clip_len, spec.d_in)
    clean = DataSpec(**{**spec.__dict__, "noise_sigma": 0.0})
    app, _ = gen_video(s.program, 0.0, clean, Prototypes.draw(clean), np.random.default_rng(0))
    s.appearance = app
    assert oracle_answer(s, clean, Prototypes.draw(clean), vocab) == s.answer


def test_regeneration_is_byte_identical(tmp_path):
    spec = DataSpec(task="count", n_train=6, n_val=3, n_test=3, seed=9)
    a = save_dataset(generate(spec), tmp_path / "a")
    b = save_dataset(generate(spec), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


def test_splits_are_disjoint():
    data = generate(DataSpec(n_train=50, n_val=50, n_test=50))
    digests = {name: {s.appearance.tobytes() for s in ds.samples} for name, ds in data.items()}
    assert not digests["train"] & digests["val"]
    assert not digests["train"] & digests["test"]
    assert not digests["val"] & digests["test"]


def test_dataset_directory_round_trip(tmp_path):
    spec = DataSpec(task="frameqa", n_train=4, n_val=2, n_test=2, answer_format="multichoice")
    data = generate(spec)
    save_dataset(data, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 4, "val": 2, "test": 2}
    assert set(manifest["seeds"]) == {"train", "val", "test"} and manifest["task_mix"] == {"frameqa": 1.0}
    assert serialization.load(tmp_path / "train" / "000000.tdmp")["appearance"].shape == (8, 16, 32)
    back = load_dataset(tmp_path)
    assert back["train"].spec == spec
    for x, y in zip(back["train"].samples, data["train"].samples):
        np.testing.assert_array_equal(x.appearance, y.appearance)
        np.testing.assert_array_equal(x.program.segments, y.program.segments)
        assert x.answer == y.answer
    batch = back["val"].batch([0, 1])
    assert batch.candidates.shape == (2, 4, 1)


def test_spec_validation():
    with pytest.raises(ValueError):
        DataSpec(task="caption").validate()
    with pytest.raises(ValueError):
        DataSpec(task="count", answer_format="multichoice").validate()
