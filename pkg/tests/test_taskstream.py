import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from clvqa import taskstream
from clvqa.taskstream import (DATASET_HEADER, MAX_ANSWER_LEN, MAX_OBJECTS, SPLITS, TASKS, ParseError, StreamSizes,
                              content_hash, derive_answer, generate_stream, read_samples, read_stream, write_samples,
                              write_stream)

SMALL = StreamSizes(train=100, val=20, test=20)


@pytest.fixture(scope="module")
def stream():
    return generate_stream(StreamSizes(train=400, val=50, test=50), seed=3)


def all_samples(ds):
    return [s for split in SPLITS for s in ds.split(split)]


def test_four_tasks_in_order(stream):
    assert [ds.task for ds in stream] == list(TASKS)
    for ds in stream:
        assert (len(ds.train), len(ds.val), len(ds.test)) == (400, 50, 50)
        assert all(s.task == ds.task for s in all_samples(ds))


def test_same_seed_byte_identical(tmp_path):
    write_stream(generate_stream(SMALL, seed=5), tmp_path / "a")
    write_stream(generate_stream(SMALL, seed=5), tmp_path / "b")
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_different_seed_differs():
    a, b = generate_stream(SMALL, seed=1), generate_stream(SMALL, seed=2)
    assert content_hash(a[0].train) != content_hash(b[0].train)


def test_every_answer_rederivable(stream):
    for ds in stream:
        for s in all_samples(ds):
            assert derive_answer(s.task, s.scene, s.question) == s.answer


def test_scene_and_answer_bounds(stream):
    for ds in stream:
        for s in all_samples(ds):
            assert 1 <= len(s.scene) <= MAX_OBJECTS
            assert 1 <= len(s.answer) <= MAX_ANSWER_LEN
            assert all(t.count("_") == 2 for t in s.scene)


def test_splits_disjoint_by_scene(monkeypatch):
    keys = {}
    make = taskstream._make_sample

    def recording(task, sid, scene, rng):
        keys[sid] = scene.key()
        return make(task, sid, scene, rng)

    monkeypatch.setattr(taskstream, "_make_sample", recording)
    ds = generate_stream(StreamSizes(train=300, val=60, test=60), seed=4)[0]
    per_split = [{keys[s.id] for s in ds.split(split)} for split in SPLITS]
    assert [len(k) for k in per_split] == [300, 60, 60]
    assert not (per_split[0] & per_split[1] or per_split[0] & per_split[2] or per_split[1] & per_split[2])


def test_parked_trailer_rate():
    ds = generate_stream(StreamSizes(train=2000, val=10, test=10), seed=0)[3]
    hits = sum(any(t.startswith("trailer_parked_") for t in s.scene) for s in ds.train)
    assert abs(hits / len(ds.train) - 0.05) < 0.015


def test_parked_trailer_knob_zero():
    ds = generate_stream(StreamSizes(train=300, val=10, test=10, parked_trailer_rate=0.0), seed=0)[3]
    assert not any(any(t.startswith("trailer_parked_") for t in s.scene) for s in ds.train)


def test_vocabulary_overlap_and_task_specific_words(stream):
    vocabs = [{w for s in ds.train for w in s.scene + s.question + s.answer} for ds in stream]
    answers = [{w for s in ds.train for w in s.answer} for ds in stream]
    for i in range(4):
        for j in range(i + 1, 4):
            assert vocabs[i] & vocabs[j]
        others = set().union(*(answers[j] for j in range(4) if j != i))
        assert answers[i] - others


@pytest.mark.parametrize("sizes", [StreamSizes(train=99), StreamSizes(train=100, val=0),
                                   StreamSizes(train=100, parked_trailer_rate=1.5)])
def test_generation_contract(sizes):
    with pytest.raises(ValueError):
        generate_stream(sizes, seed=0)


# -- file format ----------------------------------------------------------------


def test_roundtrip_identity(tmp_path, stream):
    write_stream(stream, tmp_path)
    back = read_stream(tmp_path)
    for a, b in zip(stream, back):
        for split in SPLITS:
            assert a.split(split) == b.split(split)


def test_thousand_sample_hash_roundtrip(tmp_path):
    samples = generate_stream(StreamSizes(train=1000, val=5, test=5), seed=8)[0].train
    write_samples(samples, tmp_path / "x.tsv")
    # independent hash over the raw file body
    body = (tmp_path / "x.tsv").read_bytes().split(b"\n", 1)[1]
    assert hashlib.sha256(body).hexdigest() == content_hash(samples)
    assert content_hash(read_samples(tmp_path / "x.tsv")) == content_hash(samples)


def test_header_written(tmp_path, stream):
    write_samples(stream[0].train[:2], tmp_path / "x.tsv")
    assert (tmp_path / "x.tsv").read_text().splitlines()[0] == DATASET_HEADER


def _file(tmp_path, *lines):
    p = tmp_path / "bad.tsv"
    p.write_text("\n".join((DATASET_HEADER,) + lines) + "\n")
    return p


def test_missing_field_named(tmp_path):
    p = _file(tmp_path, "a\tperception\tcar_moving_front\twhat ?\tthe car", "b\tperception\tcar_moving_front\twhat ?")
    with pytest.raises(ParseError, match=r"line 3: missing field 'answer'"):
        read_samples(p)


def test_extra_field(tmp_path):
    with pytest.raises(ParseError, match="line 2"):
        read_samples(_file(tmp_path, "a\tperception\tx\ty\tz\tw"))


def test_unknown_task(tmp_path):
    with pytest.raises(ParseError, match="unknown task"):
        read_samples(_file(tmp_path, "a\tdriving\tx\ty\tz"))


def test_bad_header(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("id\ttask\n")
    with pytest.raises(ParseError, match="line 1"):
        read_samples(p)


def test_missing_dataset_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_stream(tmp_path)


@given(st.integers(0, 2**31 - 1))
def test_generation_deterministic_property(seed):
    a = generate_stream(StreamSizes(train=100, val=3, test=3), seed=seed)
    b = generate_stream(StreamSizes(train=100, val=3, test=3), seed=seed)
    assert [content_hash(all_samples(x)) for x in a] == [content_hash(all_samples(x)) for x in b]
