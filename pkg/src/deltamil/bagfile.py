"""On-disk bag format and the fold manifest.

Layout (all little-endian)::

    header   4s magic "DMB1" | u32 version | u32 N | u32 c | u32 task (0 cls, 1 surv)
    coords   N x 2 u32
    features N x c f32, row-major
    footer   i32 label (-1 if none) | f64 time (NaN if none) | u8 event | u8 has_mask
             [N x u8 witness mask when has_mask]
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import PatchBag

__all__ = [
    "BagFormatError",
    "BadMagicError",
    "TruncatedError",
    "VersionMismatchError",
    "ManifestError",
    "MAGIC",
    "VERSION",
    "encode_bag",
    "decode_bag",
    "write_bag",
    "read_bag",
    "expected_length",
    "ManifestRow",
    "FoldSplit",
    "Manifest",
    "load_manifest",
    "write_manifest",
]

MAGIC = b"DMB1"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_FOOTER = struct.Struct("<idBB")
TASK_TAGS = {"classification": 0, "survival": 1}


class BagFormatError(ValueError):
    pass


class BadMagicError(BagFormatError):
    pass


class TruncatedError(BagFormatError):
    pass


class VersionMismatchError(BagFormatError):
    pass


class ManifestError(ValueError):
    pass


def expected_length(n: int, c: int, has_mask: bool) -> int:
    return _HEADER.size + 8 * n + 4 * n * c + _FOOTER.size + (n if has_mask else 0)


def encode_bag(bag: PatchBag) -> bytes:
    n, c = bag.features.shape
    if np.any(bag.coords < 0) or np.any(bag.coords > np.iinfo(np.uint32).max):
        raise BagFormatError("coordinates must fit in u32")
    task = TASK_TAGS["survival" if bag.has_survival else "classification"]
    has_mask = bag.witness is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, c, task),
        bag.coords.astype("<u4").tobytes(),
        bag.features.astype("<f4").tobytes(),
        _FOOTER.pack(
            -1 if bag.label is None else int(bag.label),
            float("nan") if bag.time is None else float(bag.time),
            int(bool(bag.event)),
            int(has_mask),
        ),
    ]
    if has_mask:
        parts.append(np.asarray(bag.witness, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_bag(buf: bytes, bag_id: str = "") -> PatchBag:
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"truncated: expected at least {_HEADER.size} header bytes, got {len(buf)}")
    magic, version, n, c, task = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")
    if task not in TASK_TAGS.values():
        raise BagFormatError(f"unknown task tag {task}")
    body = _HEADER.size + 8 * n + 4 * n * c
    if len(buf) < body + _FOOTER.size:
        raise TruncatedError(
            f"truncated: expected at least {expected_length(n, c, False)} bytes, got {len(buf)}"
        )
    label, time, event, has_mask = _FOOTER.unpack_from(buf, body)
    want = expected_length(n, c, bool(has_mask))
    if len(buf) < want:
        raise TruncatedError(f"truncated: expected {want} bytes, got {len(buf)}")
    if len(buf) > want:
        raise BagFormatError(f"trailing data: expected {want} bytes, got {len(buf)}")
    off = _HEADER.size
    coords = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=off).reshape(n, 2)
    feats = np.frombuffer(buf, dtype="<f4", count=n * c, offset=off + 8 * n).reshape(n, c)
    witness = None
    if has_mask:
        witness = np.frombuffer(buf, dtype=np.uint8, count=n, offset=body + _FOOTER.size).astype(bool)
    survival = task == TASK_TAGS["survival"]
    return PatchBag(
        feats.astype(np.float64),
        coords.astype(np.int64),
        label=None if label < 0 else int(label),
        time=float(time) if survival else None,
        event=bool(event) if survival else None,
        bag_id=bag_id,
        witness=witness,
    )


def write_bag(path: str | Path, bag: PatchBag) -> None:
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path: str | Path) -> PatchBag:
    p = Path(path)
    return decode_bag(p.read_bytes(), bag_id=p.stem)


MANIFEST_COLUMNS = ("bag_path", "label", "time", "event", "fold")


@dataclass
class ManifestRow:
    bag_path: Path
    fold: int
    label: int | None = None
    time: float | None = None
    event: bool | None = None


@dataclass
class FoldSplit:
    train: list[int]
    val: list[int]
    test: list[int]


@dataclass
class Manifest:
    rows: list[ManifestRow]

    @property
    def n_folds(self) -> int:
        return len({r.fold for r in self.rows})

    def fold_members(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, r in enumerate(self.rows):
            out.setdefault(r.fold, []).append(i)
        return dict(sorted(out.items()))

    def partition(self, k: int) -> FoldSplit:
        """Test = fold k, validation = the next fold, train = the rest.

        With fewer than three folds the validation set is every fourth
        non-test row; a single fold also holds out every fifth row as test.
        """
        members = self.fold_members()
        ids = list(members)
        if k not in members:
            raise ManifestError(f"fold {k} not in manifest (folds {ids})")
        if len(ids) == 1:
            rows = members[k]
            test = rows[::5]
            rest = [i for i in rows if i not in set(test)]
        else:
            test = members[k]
            rest = [i for f in ids if f != k for i in members[f]]
        if len(ids) >= 3:
            val_fold = ids[(ids.index(k) + 1) % len(ids)]
            val = members[val_fold]
            train = [i for i in rest if self.rows[i].fold != val_fold]
        else:
            val = rest[::4]
            train = [i for i in rest if i not in set(val)]
        return FoldSplit(sorted(train), sorted(val), sorted(test))

    def load(self, index: int) -> PatchBag:
        row = self.rows[index]
        bag = read_bag(row.bag_path)
        if row.label is not None:
            bag.label = row.label
        if row.time is not None:
            bag.time, bag.event = row.time, row.event
        return bag


def _opt(raw: str | None, tp):
    if raw is None or raw.strip() in ("", "NA", "nan"):
        return None
    return tp(raw)


def load_manifest(path: str | Path) -> Manifest:
    """Tab-separated table with a header row; bag paths are relative to the manifest."""
    p = Path(path)
    if not p.is_file():
        raise ManifestError(f"manifest not found: {p}")
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        header = reader.fieldnames or []
        unknown = [h for h in header if h not in MANIFEST_COLUMNS]
        if unknown:
            raise ManifestError(f"unknown column(s) {unknown}; allowed {list(MANIFEST_COLUMNS)}")
        for col in ("bag_path", "fold"):
            if col not in header:
                raise ManifestError(f"missing required column {col!r}")
        rows = []
        for line in reader:
            event = _opt(line.get("event"), int)
            rows.append(
                ManifestRow(
                    bag_path=(p.parent / line["bag_path"]),
                    fold=int(line["fold"]),
                    label=_opt(line.get("label"), int),
                    time=_opt(line.get("time"), float),
                    event=None if event is None else bool(event),
                )
            )
    if not rows:
        raise ManifestError(f"manifest {p} has no rows")
    seen: dict[Path, int] = {}
    for r in rows:
        if r.bag_path in seen:
            if seen[r.bag_path] != r.fold:
                raise ManifestError(f"overlapping folds: {r.bag_path} appears in folds {seen[r.bag_path]} and {r.fold}")
            warnings.warn(f"duplicate bag_path {r.bag_path}; keeping both rows", UserWarning, stacklevel=2)
        seen[r.bag_path] = r.fold
    return Manifest(rows)


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    p = Path(path)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for r in rows:
        rel = Path(r.bag_path)
        try:
            rel = rel.relative_to(p.parent)
        except ValueError:
            pass
        lines.append(
            "\t".join(
                [
                    rel.as_posix(),
                    "" if r.label is None else str(r.label),
                    "" if r.time is None else repr(float(r.time)),
                    "" if r.event is None else str(int(r.event)),
                    str(r.fold),
                ]
            )
        )
    p.write_text("\n".join(lines) + "\n")
