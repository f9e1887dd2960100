import shutil
import struct

from functools import partial

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoplearn import mr_engine
from hoplearn.errors import CorruptCheckpoint, MapError, ReduceError
from hoplearn.graphflat import (IN_EDGE, NO_SAMPLING, OUT_EDGE, SELF, _Lines, _map_inputs,
                                _map_record)
from hoplearn.mr_engine import (KeyedRecord, ShuffleKey, checkpoint_bytes, completed_rounds,
                                load_checkpoint, run_job, run_map, run_reduce_round)


def identity(rec):
    return [rec]


def int_value(x: int) -> bytes:
    return struct.pack(">q", x)


def sum_reducer(key, values):
    return [KeyedRecord(key, int_value(sum(struct.unpack(">q", v)[0] for v in values)))]


def random_records(seed, n, keys=50):
    rng = np.random.default_rng(seed)
    return [KeyedRecord(ShuffleKey(int(k), int(s)), int_value(int(v)))
            for k, s, v in zip(rng.integers(0, keys, n), rng.integers(0, 3, n),
                               rng.integers(-99, 99, n))]


def decoded(ckpt):
    return [(tuple(r.key), struct.unpack(">q", r.value)[0]) for r in ckpt.records()]


def test_identity_map_sorted_and_worker_invariant(tmp_path):
    recs = random_records(0, 5)
    one = run_map(recs, identity, 1, tmp_path / "a")
    four = run_map(recs, identity, 4, tmp_path / "b")
    out = list(one.records())
    assert len(out) == 5 and out == sorted(recs)
    assert checkpoint_bytes(one) == checkpoint_bytes(four)
    assert one.record_count == 5


def test_toy_graphflat_map_counts(tmp_path, g_toy):
    mapper = partial(_map_record, lines=_Lines(g_toy), sampling=NO_SAMPLING)
    ckpt = run_map(_map_inputs(g_toy), mapper, 2, tmp_path)
    tags = [r.value[:1] for r in ckpt.records()]
    assert len(tags) == 10
    assert (tags.count(SELF), tags.count(IN_EDGE), tags.count(OUT_EDGE)) == (4, 3, 3)


def test_sum_reducer(tmp_path):
    a, b = ShuffleKey(1), ShuffleKey(2)
    recs = [KeyedRecord(a, int_value(1)), KeyedRecord(a, int_value(2)), KeyedRecord(b, int_value(3))]
    ckpt = run_reduce_round(run_map(recs, identity, 1, tmp_path), sum_reducer, 1)
    assert decoded(ckpt) == [((1, 0), 3), ((2, 0), 3)]
    assert ckpt.round_index == 1


def test_reduce_worker_invariance_large(tmp_path):
    recs = random_records(1, 10_000, keys=700)
    one = run_reduce_round(run_map(recs, identity, 1, tmp_path / "a"), sum_reducer, 1)
    eight = run_reduce_round(run_map(recs, identity, 8, tmp_path / "b"), sum_reducer, 8)
    assert checkpoint_bytes(one) == checkpoint_bytes(eight)


def test_empty_checkpoint(tmp_path):
    ckpt = run_reduce_round(run_map([], identity, 3, tmp_path), sum_reducer, 3)
    assert list(ckpt.records()) == [] and ckpt.record_count == 0


def test_values_reach_reducer_sorted(tmp_path):
    seen = {}

    def spy(key, values):
        seen[key] = list(values)
        return []
    recs = [KeyedRecord(ShuffleKey(0), bytes([b])) for b in (5, 1, 3)]
    run_reduce_round(run_map(recs, identity, 2, tmp_path), spy, 2)
    assert seen[ShuffleKey(0)] == [b"\x01", b"\x03", b"\x05"]


def test_zero_rounds_returns_map_output(tmp_path):
    recs = random_records(2, 20)
    ckpt = run_job(recs, identity, sum_reducer, 0, 2, tmp_path)
    assert ckpt.round_index == 0 and sorted(recs) == list(ckpt.records())


def test_map_error_reports_index(tmp_path):
    def bad(rec):
        if rec == 3:
            raise ValueError("boom")
        return []
    with pytest.raises(MapError) as info:
        run_map(range(6), bad, 2, tmp_path)
    assert info.value.index == 3


def test_reduce_error_reports_key(tmp_path):
    def bad(key, values):
        if key.node_id == 7:
            raise RuntimeError("boom")
        return []
    recs = [KeyedRecord(ShuffleKey(k), b"x") for k in (1, 7, 9)]
    with pytest.raises(ReduceError) as info:
        run_reduce_round(run_map(recs, identity, 1, tmp_path), bad, 2)
    assert info.value.key == ShuffleKey(7)


def test_corrupt_checkpoints(tmp_path):
    recs = [KeyedRecord(ShuffleKey(k), b"v") for k in (4, 0, 8)]   # all in part 0 with P=4
    ckpt = run_map(recs, identity, 1, tmp_path)
    part = ckpt.part_files()[0]
    blob = part.read_bytes()
    size = len(blob) // 3
    part.write_bytes(blob[size:2 * size] + blob[:size] + blob[2 * size:])
    with pytest.raises(CorruptCheckpoint):
        list(load_checkpoint(ckpt.path).records())
    part.write_bytes(blob[:-1])
    with pytest.raises(CorruptCheckpoint):
        list(load_checkpoint(ckpt.path).records())
    (ckpt.path / mr_engine.SUCCESS).unlink()
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(ckpt.path)


def counting_mapper(calls):
    def mapper(rec):
        calls.append(rec)
        return [KeyedRecord(ShuffleKey(rec.key.node_id % 17), rec.value)]
    return mapper


def test_restart_after_kill_is_byte_identical(tmp_path):
    recs = random_records(4, 500)
    reference = run_job(recs, counting_mapper([]), sum_reducer, 2, 3, tmp_path / "ref")

    def killed(key, values):
        raise KeyboardInterrupt  # simulated crash during round 2
    work = tmp_path / "job"
    with pytest.raises(KeyboardInterrupt):
        run_job(recs, counting_mapper([]), [sum_reducer, killed], 2, 1, work)
    assert completed_rounds(work) == 1
    calls = []
    final = run_job(recs, counting_mapper(calls), sum_reducer, 2, 2, work)
    assert calls == []  # the map stage was not re-run
    assert checkpoint_bytes(final) == checkpoint_bytes(reference)


def test_stale_rounds_are_recomputed(tmp_path):
    recs = random_records(5, 300)
    ref = run_job(recs, identity, sum_reducer, 3, 1, tmp_path / "ref")
    work = tmp_path / "job"
    run_job(recs, identity, sum_reducer, 3, 1, work)
    (work / "round_1" / mr_engine.SUCCESS).unlink()  # round 1 lost; 2 and 3 are now stale
    out = run_job(recs, identity, sum_reducer, 3, 4, work)
    assert checkpoint_bytes(out) == checkpoint_bytes(ref)
    shutil.rmtree(work / "round_0")
    assert completed_rounds(work) == -1


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8), st.integers(0, 3))
def test_worker_count_invariance(tmp_path_factory, seed, t1, t2, rounds):
    recs = random_records(seed, 200)
    a = run_job(recs, identity, sum_reducer, rounds, t1, tmp_path_factory.mktemp("a"))
    b = run_job(recs, identity, sum_reducer, rounds, t2, tmp_path_factory.mktemp("b"))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
