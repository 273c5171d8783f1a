"""Dataset persistence and import.

Sequences live in JSON-Lines (one sequence per line), human-inspectable and
streamable; a manifest JSON pins the count, mark cardinality, and a sha256 of
the payload; an optional sidecar carries the generating instances so ground
truth ships with synthetic data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError
from .hawkes import EventSequence, HawkesInstance
from .ioutil import atomic_write_bytes

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def _paths(path: str):
    if not path.endswith(".jsonl"):
        path = path + ".jsonl"
    base = path[: -len(".jsonl")]
    return path, base + ".manifest.json", base + ".instances.json"


@dataclass
class DatasetManifest:
    jsonl_path: str
    num_sequences: int
    num_marks: int
    sha256: str
    time_unit: str = "arbitrary"
    sidecar: Optional[str] = None
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "count": self.num_sequences,
            "K": self.num_marks,
            "sha256": self.sha256,
            "time_unit": self.time_unit,
            "jsonl": os.path.basename(self.jsonl_path),
            "sidecar": os.path.basename(self.sidecar) if self.sidecar else None,
        }


def _sequence_line(seq: EventSequence, instance_id: int) -> str:
    return json.dumps(
        {
            "events": [
                {"t": float(t), "k": int(k)} for t, k in zip(seq.times, seq.marks)
            ],
            "T": seq.window_end,
            "K": seq.num_marks,
            "instance_id": int(instance_id),
        },
        sort_keys=True,
    )


def write_dataset(
    path: str,
    sequences: list,
    instances: Optional[list] = None,
    instance_ids: Optional[list] = None,
    time_unit: str = "arbitrary",
) -> DatasetManifest:
    """Write JSONL + manifest (+ instance sidecar) atomically.

    instance_ids map each sequence to its row in `instances`; they default to
    all-zero without a sidecar and to 0..n-1 when counts happen to match.
    """
    jsonl_path, manifest_path, sidecar_path = _paths(path)
    if instances is not None and any(i is None for i in instances):
        instances = None
    if instance_ids is None:
        if instances is not None and len(instances) == len(sequences):
            instance_ids = list(range(len(sequences)))
        else:
            instance_ids = [0] * len(sequences)
    if len(instance_ids) != len(sequences):
        raise DataError("instance_ids must align with sequences")

    Ks = {seq.num_marks for seq in sequences}
    if len(Ks) > 1:
        bad = next(
            i for i, s in enumerate(sequences) if s.num_marks != sequences[0].num_marks
        )
        raise DataError(
            f"mixed num_marks in dataset: sequence {bad} has K={sequences[bad].num_marks}, "
            f"sequence 0 has K={sequences[0].num_marks}"
        )
    K = Ks.pop() if Ks else 0

    lines = [
        _sequence_line(seq, iid) for seq, iid in zip(sequences, instance_ids)
    ]
    payload = ("\n".join(lines) + "\n").encode() if lines else b""
    digest = hashlib.sha256(payload).hexdigest()

    sidecar = None
    if instances is not None:
        sidecar = sidecar_path
        blob = json.dumps(
            {"instances": [inst.to_dict() for inst in instances]}, sort_keys=True
        ).encode()
        atomic_write_bytes(sidecar_path, blob)
    manifest = DatasetManifest(
        jsonl_path, len(sequences), K, digest, time_unit=time_unit, sidecar=sidecar
    )
    atomic_write_bytes(jsonl_path, payload)
    atomic_write_bytes(
        manifest_path, (json.dumps(manifest.to_dict(), sort_keys=True) + "\n").encode()
    )
    return manifest


def _parse_line(raw: str, lineno: int, expect_K: Optional[int]) -> tuple:
    try:
        obj = json.loads(raw)
        events = obj["events"]
        times = [e["t"] for e in events]
        marks = [e["k"] for e in events]
        T_end, K, iid = obj["T"], obj["K"], obj.get("instance_id", 0)
    except (ValueError, KeyError, TypeError) as err:
        raise DataError(f"line {lineno}: malformed sequence record ({err})") from None
    if expect_K is not None and K != expect_K:
        raise DataError(f"line {lineno}: K={K} disagrees with manifest K={expect_K}")
    try:
        seq = EventSequence(times, marks, T_end, K)
    except DataError as err:
        raise DataError(f"line {lineno}: {err}") from None
    return seq, int(iid)


def read_dataset(path: str):
    """Validated sequences (+ instances if a sidecar exists).

    Returns (sequences, instance_ids, instances_or_None, manifest). Lines are
    parsed and validated as they stream by; the hash accumulates alongside and
    is checked against the manifest at the end.
    """
    jsonl_path, manifest_path, _ = _paths(path)
    try:
        with open(manifest_path, "rb") as fh:
            mdict = json.loads(fh.read())
    except FileNotFoundError:
        raise DataError(f"no manifest at {manifest_path}") from None
    except ValueError as err:
        raise DataError(f"unreadable manifest {manifest_path}: {err}") from None
    if mdict.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported dataset version {mdict.get('version')}")

    hasher = hashlib.sha256()
    sequences, ids = [], []
    try:
        with open(jsonl_path, "rb") as fh:
            for lineno, raw in enumerate(fh, start=1):
                hasher.update(raw)
                text = raw.decode().strip()
                if not text:
                    continue
                seq, iid = _parse_line(text, lineno, mdict.get("K") or None)
                sequences.append(seq)
                ids.append(iid)
    except FileNotFoundError:
        raise DataError(f"dataset payload missing: {jsonl_path}") from None
    if hasher.hexdigest() != mdict["sha256"]:
        raise DataError(
            f"integrity failure: {jsonl_path} does not match its manifest hash"
        )
    if len(sequences) != mdict["count"]:
        raise DataError(
            f"{jsonl_path}: {len(sequences)} sequences but manifest says {mdict['count']}"
        )

    instances = None
    if mdict.get("sidecar"):
        sidecar_path = os.path.join(os.path.dirname(jsonl_path), mdict["sidecar"])
        try:
            with open(sidecar_path, "rb") as fh:
                instances = [
                    HawkesInstance.from_dict(d)
                    for d in json.loads(fh.read())["instances"]
                ]
        except (FileNotFoundError, ValueError, KeyError) as err:
            raise DataError(f"unreadable sidecar {sidecar_path}: {err}") from None
    manifest = DatasetManifest(
        jsonl_path,
        mdict["count"],
        mdict["K"],
        mdict["sha256"],
        time_unit=mdict.get("time_unit", "arbitrary"),
        sidecar=mdict.get("sidecar"),
    )
    return sequences, ids, instances, manifest


def _strictify(times: np.ndarray, scale: float) -> tuple:
    """Deterministic jitter: enforce strictly increasing, strictly positive
    times by nudging collisions up in arrival order."""
    eps = 1e-9 * max(scale, 1e-12)
    out = times.copy()
    prev = 0.0
    bumped = 0
    for i in range(len(out)):
        floor = prev + eps
        if out[i] < floor:
            out[i] = floor
            bumped += 1
        prev = out[i]
    return out, bumped


def import_csv(
    path: str,
    seq_col: str = "sequence_id",
    time_col: str = "timestamp",
    mark_col: str = "mark",
    vocabulary: Optional[dict] = None,
    max_marks: int = 8,
    window_end: Optional[float] = None,
):
    """Convert an event-log CSV into EventSequences.

    Marks map to dense integers (first-seen order, or a provided vocabulary);
    per-sequence times shift so each window starts at 0; simultaneous or
    boundary events get a deterministic jitter. Returns (sequences, vocab).
    """
    first_seen = vocabulary is None
    vocab = dict(vocabulary or {})
    rows_by_seq: dict = {}
    order: list = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in (seq_col, time_col, mark_col):
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise DataError(f"{path}: missing required column '{col}'")
        for rownum, row in enumerate(reader, start=2):  # header is line 1
            try:
                t = float(row[time_col])
            except (TypeError, ValueError):
                raise DataError(
                    f"{path} row {rownum}: unparseable timestamp {row[time_col]!r}"
                ) from None
            raw_mark = row[mark_col]
            if raw_mark not in vocab:
                if not first_seen:
                    raise DataError(
                        f"{path} row {rownum}: mark {raw_mark!r} not in vocabulary"
                    )
                vocab[raw_mark] = len(vocab)
                if len(vocab) > max_marks:
                    raise DataError(
                        f"{path} row {rownum}: more than {max_marks} distinct marks"
                    )
            sid = row[seq_col]
            if sid not in rows_by_seq:
                rows_by_seq[sid] = []
                order.append(sid)
            rows_by_seq[sid].append((t, vocab[raw_mark]))

    K = max(len(vocab), 1)
    sequences = []
    total_bumped = 0
    for sid in order:
        rows = sorted(rows_by_seq[sid], key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        marks = np.array([r[1] for r in rows], dtype=np.int64)
        times = times - times.min()
        span = float(times.max()) if len(times) else 1.0
        times, bumped = _strictify(times, span or 1.0)
        total_bumped += bumped
        T_end = window_end if window_end is not None else float(times.max())
        sequences.append(EventSequence(times, marks, T_end, K))
    if total_bumped:
        log.warning(
            "import_csv: nudged %d timestamps to keep sequences strictly ordered",
            total_bumped,
        )
    return sequences, vocab
