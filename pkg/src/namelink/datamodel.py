"""Domain types, corpus I/O, cleaning filters and identity-disjoint splits.

A corpus lives in a directory with three files:

``manifest.json``
    ``{version, d_v, d_f, vocab_size, example_count}``
``examples.jsonl``
    one JSON record per example (ids, boxes, mentions, links, meta)
``features.bin``
    magic ``WWF1`` followed by tensor records
    ``[u32 ordinal, u32 kind, u32 rows, u32 cols, rows*cols f32]``,
    all little-endian. Kind 0 is the visual feature, 1 the face
    embedding, 2 the grayscale face crop.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from . import NAME_ID

CORPUS_VERSION = 1
FEATURE_MAGIC = b"WWF1"
MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "examples.jsonl"
FEATURES_FILE = "features.bin"

KIND_VISUAL = 0
KIND_FACE = 1
KIND_CROP = 2

_RECORD_HEADER = struct.Struct("<IIII")


class CorpusFormatError(ValueError):
    """The corpus files cannot be decoded."""


class ValidationError(ValueError):
    """An example violates a domain invariant."""


class ConfigurationError(ValueError):
    """A requested operation cannot be carried out with the given settings."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValidationError(f"box coordinates outside [0, 1]: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)


def _arrays_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class Detection:
    box: BoundingBox
    face_box: BoundingBox
    visual_feature: np.ndarray
    face_embedding: np.ndarray | None = None
    face_crop: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, Detection):
            return NotImplemented
        return (self.box == other.box and self.face_box == other.face_box
                and _arrays_equal(self.visual_feature, other.visual_feature)
                and _arrays_equal(self.face_embedding, other.face_embedding)
                and _arrays_equal(self.face_crop, other.face_crop))


@dataclass(frozen=True)
class Mention:
    token_start: int
    token_end: int


@dataclass(frozen=True)
class ReferredPerson:
    identity_id: str
    mentions: tuple[Mention, ...]

    @property
    def first_token(self) -> int:
        return min(m.token_start for m in self.mentions)


@dataclass(frozen=True)
class Caption:
    tokens: tuple[int, ...]
    has_verb: bool

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Meta:
    year: int = 2000
    cropped: bool = False
    category: str = ""


@dataclass(eq=False)
class Example:
    example_id: str
    caption: Caption
    detections: list[Detection]
    referred: list[ReferredPerson]
    gt_links: list[tuple[int, int]]
    meta: Meta = field(default_factory=Meta)

    @property
    def n(self) -> int:
        """Number of referred people."""
        return len(self.referred)

    @property
    def m(self) -> int:
        """Number of person detections."""
        return len(self.detections)

    def identities(self) -> set[str]:
        return {p.identity_id for p in self.referred}

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (self.example_id == other.example_id
                and self.caption == other.caption
                and self.detections == other.detections
                and self.referred == other.referred
                and list(map(tuple, self.gt_links)) == list(map(tuple, other.gt_links))
                and self.meta == other.meta)


@dataclass(frozen=True)
class CorpusHeader:
    d_v: int
    d_f: int
    vocab_size: int
    version: int = CORPUS_VERSION


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    eval_identities: frozenset[str]

    def to_json(self) -> dict:
        return {key: sorted(getattr(self, key))
                for key in ("train_ids", "val_ids", "test_ids", "eval_identities")}

    @classmethod
    def from_json(cls, data: dict) -> "SplitAssignment":
        return cls(**{key: frozenset(data[key])
                      for key in ("train_ids", "val_ids", "test_ids", "eval_identities")})

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SplitAssignment":
        return cls.from_json(json.loads(Path(path).read_text()))


def validate_example(ex: Example, header: CorpusHeader | None = None) -> None:
    """Raise ``ValidationError`` naming the example if any invariant fails."""
    def fail(msg):
        raise ValidationError(f"{ex.example_id}: {msg}")

    tokens = ex.caption.tokens
    if len(tokens) < 1:
        fail("empty caption")
    if header is not None and any(t < 0 or t >= header.vocab_size for t in tokens):
        fail("token id outside vocabulary")
    for p in ex.referred:
        if not p.mentions:
            fail(f"referred person {p.identity_id} has no mentions")
        spans = sorted((m.token_start, m.token_end) for m in p.mentions)
        for start, end in spans:
            if not 0 <= start < end <= len(tokens):
                fail(f"mention span ({start}, {end}) out of range")
            if any(tokens[t] != NAME_ID for t in range(start, end)):
                fail(f"mention span ({start}, {end}) is not masked")
        for (_, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                fail("overlapping mentions")
    persons = [p for p, _ in ex.gt_links]
    dets = [d for _, d in ex.gt_links]
    if len(set(persons)) != len(persons) or len(set(dets)) != len(dets):
        fail("injective mapping violated")
    for p, d in ex.gt_links:
        if not (0 <= p < ex.n and 0 <= d < ex.m):
            fail(f"link ({p}, {d}) out of range")
    for j, det in enumerate(ex.detections):
        if not det.box.contains(det.face_box):
            fail(f"face box of detection {j} not inside its box")
        if det.visual_feature.ndim != 1:
            fail(f"visual feature of detection {j} is not a vector")
        if header is not None and det.visual_feature.shape[0] != header.d_v:
            fail(f"visual feature of detection {j} has length "
                 f"{det.visual_feature.shape[0]}, expected {header.d_v}")
        if det.face_embedding is not None:
            emb = det.face_embedding
            if header is not None and emb.shape != (header.d_f,):
                fail(f"face embedding of detection {j} has wrong length")
            if abs(float(np.linalg.norm(emb.astype(np.float64))) - 1.0) > 1e-6:
                fail(f"face embedding of detection {j} is not unit norm")
        if det.face_crop is not None and det.face_crop.ndim != 2:
            fail(f"face crop of detection {j} is not a 2-D grid")


# ---------------------------------------------------------------------------
# serialization

def _example_record(ex: Example) -> dict:
    return {
        "example_id": ex.example_id,
        "tokens": list(ex.caption.tokens),
        "has_verb": ex.caption.has_verb,
        "detections": [{"box": d.box.as_list(), "face_box": d.face_box.as_list()}
                       for d in ex.detections],
        "referred": [{"identity_id": p.identity_id,
                      "mentions": [[m.token_start, m.token_end] for m in p.mentions]}
                     for p in ex.referred],
        "gt_links": [[int(p), int(d)] for p, d in ex.gt_links],
        "meta": {"year": ex.meta.year, "cropped": ex.meta.cropped,
                 "category": ex.meta.category},
    }


def write_tensor(fh: BinaryIO, ordinal: int, kind: int, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 1:
        arr = arr[None, :]
    rows, cols = arr.shape
    fh.write(_RECORD_HEADER.pack(ordinal, kind, rows, cols))
    fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensors(fh: BinaryIO) -> Iterator[tuple[int, int, np.ndarray]]:
    while True:
        head = fh.read(_RECORD_HEADER.size)
        if not head:
            return
        if len(head) != _RECORD_HEADER.size:
            raise CorpusFormatError("truncated tensor record header")
        ordinal, kind, rows, cols = _RECORD_HEADER.unpack(head)
        nbytes = 4 * rows * cols
        raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise CorpusFormatError("truncated tensor record payload")
        yield ordinal, kind, np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)


def save_corpus(examples: Iterable[Example], header: CorpusHeader,
                path: str | os.PathLike) -> None:
    """Write ``examples`` as a corpus directory at ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    examples = list(examples)
    with open(root / RECORDS_FILE, "w") as rec, open(root / FEATURES_FILE, "wb") as blob:
        blob.write(FEATURE_MAGIC)
        for ordinal, ex in enumerate(examples):
            rec.write(json.dumps(_example_record(ex), sort_keys=True) + "\n")
            for det in ex.detections:
                write_tensor(blob, ordinal, KIND_VISUAL, det.visual_feature)
                if det.face_embedding is not None:
                    write_tensor(blob, ordinal, KIND_FACE, det.face_embedding)
                if det.face_crop is not None:
                    write_tensor(blob, ordinal, KIND_CROP, det.face_crop)
    manifest = {"version": header.version, "d_v": header.d_v, "d_f": header.d_f,
                "vocab_size": header.vocab_size, "example_count": len(examples)}
    (root / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_header(path: str | os.PathLike) -> tuple[CorpusHeader, int]:
    try:
        manifest = json.loads((Path(path) / MANIFEST_FILE).read_text())
        header = CorpusHeader(d_v=int(manifest["d_v"]), d_f=int(manifest["d_f"]),
                              vocab_size=int(manifest["vocab_size"]),
                              version=int(manifest["version"]))
        count = int(manifest["example_count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"malformed corpus manifest in {path}: {exc}") from exc
    if header.version != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {header.version}")
    return header, count


def load_corpus(path: str | os.PathLike) -> tuple[list[Example], CorpusHeader]:
    """Load and validate a corpus directory."""
    root = Path(path)
    header, count = load_header(root)
    with open(root / RECORDS_FILE) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if len(records) != count:
        raise CorpusFormatError(
            f"manifest declares {count} examples, record file holds {len(records)}")

    tensors: list[list[tuple[int, np.ndarray]]] = [[] for _ in records]
    with open(root / FEATURES_FILE, "rb") as blob:
        if blob.read(4) != FEATURE_MAGIC:
            raise CorpusFormatError("feature blob lacks WWF1 magic")
        for ordinal, kind, arr in read_tensors(blob):
            if ordinal >= len(records):
                raise CorpusFormatError(f"tensor record for unknown example {ordinal}")
            tensors[ordinal].append((kind, arr))

    examples = []
    for rec, recs in zip(records, tensors):
        try:
            ex = _decode_example(rec, recs)
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"malformed record {rec.get('example_id')}: {exc}") from exc
        validate_example(ex, header)
        examples.append(ex)
    return examples, header


def _decode_example(rec: dict, tensors: list[tuple[int, np.ndarray]]) -> Example:
    # tensors arrive in write order: visual, then optional face and crop per detection
    dets = []
    it = iter(tensors)
    pending = next(it, None)
    for d in rec["detections"]:
        if pending is None or pending[0] != KIND_VISUAL:
            raise CorpusFormatError(f"{rec['example_id']}: missing visual feature")
        visual = pending[1].reshape(-1)
        pending = next(it, None)
        face = crop = None
        if pending is not None and pending[0] == KIND_FACE:
            face = pending[1].reshape(-1)
            pending = next(it, None)
        if pending is not None and pending[0] == KIND_CROP:
            crop = pending[1]
            pending = next(it, None)
        dets.append(Detection(BoundingBox(*d["box"]), BoundingBox(*d["face_box"]),
                              visual, face, crop))
    if pending is not None:
        raise CorpusFormatError(f"{rec['example_id']}: surplus tensor records")
    referred = [ReferredPerson(p["identity_id"],
                               tuple(Mention(int(s), int(e)) for s, e in p["mentions"]))
                for p in rec["referred"]]
    meta = rec.get("meta", {})
    return Example(
        example_id=rec["example_id"],
        caption=Caption(tuple(int(t) for t in rec["tokens"]), bool(rec["has_verb"])),
        detections=dets,
        referred=referred,
        gt_links=[(int(p), int(d)) for p, d in rec["gt_links"]],
        meta=Meta(year=int(meta.get("year", 2000)), cropped=bool(meta.get("cropped", False)),
                  category=str(meta.get("category", ""))),
    )


# ---------------------------------------------------------------------------
# cleaning, splits, subsets

@dataclass(frozen=True)
class FilterPolicy:
    require_detection: bool = True
    require_referred: bool = True
    require_verb: bool = True
    min_year: int | None = 1990
    drop_cropped: bool = True

    @classmethod
    def off(cls) -> "FilterPolicy":
        return cls(False, False, False, None, False)


def filter_examples(examples: Iterable[Example], policy: FilterPolicy) -> list[Example]:
    def keep(ex: Example) -> bool:
        if policy.require_detection and ex.m == 0:
            return False
        if policy.require_referred and ex.n == 0:
            return False
        if policy.require_verb and not ex.caption.has_verb:
            return False
        if policy.min_year is not None and ex.meta.year < policy.min_year:
            return False
        if policy.drop_cropped and ex.meta.cropped:
            return False
        return True

    return [ex for ex in examples if keep(ex)]


def is_trivial(ex: Example) -> bool:
    return ex.n == 1 and ex.m == 1


def make_splits(examples: list[Example], eval_identity_fraction: float,
                seed: int) -> SplitAssignment:
    """Identity-disjoint train / val / test division.

    A random fraction of identities defines the evaluation superset: every
    example mentioning one of them. Training keeps the examples that mention
    none of them. Trivial superset examples (one name, one box) are removed
    and the rest is shuffled and halved into validation and test.
    """
    if not 0.0 < eval_identity_fraction < 1.0:
        raise ConfigurationError("eval_identity_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    identities = sorted(set().union(*(ex.identities() for ex in examples)))
    k = max(1, int(round(eval_identity_fraction * len(identities)))) if identities else 0
    picked = rng.choice(len(identities), size=k, replace=False) if k else []
    eval_identities = frozenset(identities[i] for i in sorted(picked))

    superset, train = [], []
    for ex in examples:
        (superset if ex.identities() & eval_identities else train).append(ex.example_id)
    by_id = {ex.example_id: ex for ex in examples}
    superset = [i for i in superset if not is_trivial(by_id[i])]
    if not superset:
        raise ConfigurationError("evaluation superset is empty after removing trivial examples")
    order = rng.permutation(len(superset))
    half = (len(superset) + 1) // 2
    val = frozenset(superset[i] for i in order[:half])
    test = frozenset(superset[i] for i in order[half:])
    return SplitAssignment(frozenset(train), val, test, eval_identities)


def select(examples: Iterable[Example], ids: Iterable[str]) -> list[Example]:
    """Examples whose id is in ``ids``, in corpus order."""
    wanted = set(ids)
    return [ex for ex in examples if ex.example_id in wanted]


def interactive_subset(examples: Iterable[Example]) -> list[Example]:
    return [ex for ex in examples if ex.m >= 2 and ex.n >= 2 and ex.caption.has_verb]
