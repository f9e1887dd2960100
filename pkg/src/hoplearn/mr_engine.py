"""Local MapReduce executor with sort-based shuffle and per-round checkpoints.

Layout of a job directory::

    round_0/part_0.krc ... part_<P-1>.krc, _SUCCESS     (map output)
    round_1/...                                         (after reduce round 1)

A ``.krc`` file is a sequence of records ``>qqI`` (node id, suffix, value
length) followed by the value bytes.  Every part is sorted by
``(key, value)``; records are assigned to parts by ``node_id % P``, so the
bytes on disk do not depend on how many worker threads produced them.
"""
from __future__ import annotations

import heapq
import logging
import os
import shutil
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

from .errors import CorruptCheckpoint, EngineError, MapError, ReduceError

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">qqI")
SUCCESS = "_SUCCESS"
DEFAULT_PARTS = 4


class ShuffleKey(NamedTuple):
    node_id: int
    suffix: int = 0  # 0 = original key; 1..S = re-indexed sub-keys


class KeyedRecord(NamedTuple):
    key: ShuffleKey
    value: bytes


Mapper = Callable[[object], Iterable[KeyedRecord]]
Reducer = Callable[[ShuffleKey, list], Iterable[KeyedRecord]]


@dataclass(frozen=True)
class RoundCheckpoint:
    round_index: int
    path: Path
    record_count: int

    def part_files(self) -> list[Path]:
        return sorted(self.path.glob("part_*.krc"), key=lambda p: int(p.stem.split("_")[1]))

    def records(self) -> Iterator[KeyedRecord]:
        """All records in global ``(key, value)`` order."""
        return heapq.merge(*(_read_part(p) for p in self.part_files()))

    def groups(self) -> Iterator[tuple[ShuffleKey, list[bytes]]]:
        for key, recs in groupby(self.records(), key=lambda r: r.key):
            yield key, [r.value for r in recs]


def _read_part(path: Path) -> Iterator[KeyedRecord]:
    data = path.read_bytes()
    pos = 0
    prev = None
    while pos < len(data):
        if pos + _HEADER.size > len(data):
            raise CorruptCheckpoint(f"{path}: truncated record header at byte {pos}")
        node_id, suffix, length = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        if pos + length > len(data):
            raise CorruptCheckpoint(f"{path}: truncated record value at byte {pos}")
        rec = KeyedRecord(ShuffleKey(node_id, suffix), data[pos:pos + length])
        pos += length
        if prev is not None and rec < prev:
            raise CorruptCheckpoint(f"{path}: records out of order at key {tuple(rec.key)}")
        prev = rec
        yield rec


def _write_round(records: list[KeyedRecord], out_dir: Path, round_index: int,
                 parts: int) -> RoundCheckpoint:
    """Sort, partition, and atomically publish one round's output."""
    records.sort()
    buckets: list[list[bytes]] = [[] for _ in range(parts)]
    for key, value in records:
        buckets[key.node_id % parts].append(
            _HEADER.pack(key.node_id, key.suffix, len(value)) + value)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    for p, chunks in enumerate(buckets):
        (tmp / f"part_{p}.krc").write_bytes(b"".join(chunks))
    (tmp / SUCCESS).write_text(f"{len(records)}\n")
    os.replace(tmp, out_dir)
    return RoundCheckpoint(round_index, out_dir, len(records))


def load_checkpoint(path) -> RoundCheckpoint:
    path = Path(path)
    marker = path / SUCCESS
    if not marker.exists():
        raise CorruptCheckpoint(f"{path} has no {SUCCESS} marker")
    try:
        count = int(marker.read_text().strip())
        round_index = int(path.name.split("_")[1])
    except (ValueError, IndexError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint metadata") from exc
    return RoundCheckpoint(round_index, path, count)


def _chunks(n: int, t: int) -> list[range]:
    size, extra = divmod(n, t)
    out, start = [], 0
    for i in range(t):
        stop = start + size + (1 if i < extra else 0)
        out.append(range(start, stop))
        start = stop
    return out


def _run_pool(jobs: Sequence[Callable[[], list]], workers: int) -> list:
    if workers == 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [f.result() for f in [pool.submit(job) for job in jobs]]


def run_map(inputs: Iterable, mapper: Mapper, workers: int, workdir,
            parts: int = DEFAULT_PARTS) -> RoundCheckpoint:
    """Apply ``mapper`` to every input record and store the sorted result as round 0."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    items = list(inputs)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    def task(span: range) -> list[KeyedRecord]:
        out = []
        for i in span:
            try:
                produced = mapper(items[i])
                out.extend(KeyedRecord(ShuffleKey(*r[0]), bytes(r[1])) for r in produced)
            except EngineError:
                raise
            except Exception as exc:
                raise MapError(i, exc) from exc
        return out

    results = _run_pool([lambda s=s: task(s) for s in _chunks(len(items), workers)], workers)
    records = [r for chunk in results for r in chunk]
    log.debug("map produced %d records from %d inputs", len(records), len(items))
    return _write_round(records, workdir / "round_0", 0, parts)


def run_reduce_round(ckpt: RoundCheckpoint, reducer: Reducer, workers: int,
                     parts: int = DEFAULT_PARTS) -> RoundCheckpoint:
    """Group ``ckpt`` by key, reduce every group once, store as the next round.

    Values reach the reducer sorted by their bytes.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    groups = list(ckpt.groups())

    def task(span: range) -> list[KeyedRecord]:
        out = []
        for i in span:
            key, values = groups[i]
            try:
                produced = reducer(key, values)
                out.extend(KeyedRecord(ShuffleKey(*r[0]), bytes(r[1])) for r in produced)
            except EngineError:
                raise
            except Exception as exc:
                raise ReduceError(key, exc) from exc
        return out

    results = _run_pool([lambda s=s: task(s) for s in _chunks(len(groups), workers)], workers)
    records = [r for chunk in results for r in chunk]
    nxt = ckpt.round_index + 1
    log.debug("round %d: %d groups -> %d records", nxt, len(groups), len(records))
    return _write_round(records, ckpt.path.parent / f"round_{nxt}", nxt, parts)


def completed_rounds(workdir) -> int:
    """Index of the last round r such that rounds 0..r all carry a marker, else -1."""
    r = -1
    while (Path(workdir) / f"round_{r + 1}" / SUCCESS).exists():
        r += 1
    return r


def run_job(inputs: Iterable, mapper: Mapper, reducer: Reducer | Sequence[Reducer],
            rounds: int, workers: int, workdir=None,
            parts: int = DEFAULT_PARTS) -> RoundCheckpoint:
    """Map once, then reduce ``rounds`` times, resuming from existing checkpoints.

    ``reducer`` is either one callable used in every round or a sequence with
    one reducer per round.  A round whose directory carries ``_SUCCESS`` is not
    recomputed; rounds after the first missing one are.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    reducers = list(reducer) if isinstance(reducer, (list, tuple)) else [reducer] * rounds
    if len(reducers) != rounds:
        raise ValueError(f"got {len(reducers)} reducers for {rounds} rounds")
    if workdir is None:
        workdir = tempfile.mkdtemp(prefix="hoplearn-job-")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    done = min(completed_rounds(workdir), rounds)
    for stale in workdir.glob("round_*"):
        idx = stale.name.split("_")[1]
        if idx.isdigit() and int(idx) > done:
            shutil.rmtree(stale)
    if done < 0:
        ckpt = run_map(inputs, mapper, workers, workdir, parts)
    else:
        ckpt = load_checkpoint(workdir / f"round_{done}")
        log.info("resuming %s after round %d", workdir, done)
    for r in range(ckpt.round_index, rounds):
        ckpt = run_reduce_round(ckpt, reducers[r], workers, parts)
    return ckpt


def checkpoint_bytes(ckpt: RoundCheckpoint) -> bytes:
    """Concatenated part files; convenient for byte-equality checks."""
    return b"".join(p.read_bytes() for p in ckpt.part_files())
