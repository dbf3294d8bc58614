"""Synthetic image-caption corpora with known person-box correspondences.

Each example draws ``n`` referred people and ``m >= n`` detections. Who is
who can only be recovered by combining modalities: the caption's verb and
slot structure say which role each name plays, and each detection's visual
feature carries an offset for the role that person plays in the scene.
Unreferenced people carry no role offset, and a fraction of them are small,
blurry bystanders. Face embeddings are noisy copies of per-identity
prototypes, so reference faces let the link miner recover the mapping.

A fraction of examples follows a left-to-right convention (caption order
equals horizontal order of the referred people); the rest are shuffled.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import NAME_ID
from .datamodel import (BoundingBox, Caption, CorpusHeader, Detection, Example, Mention,
                        Meta, ReferredPerson, save_corpus)

ORACLE_FILE = "oracle.jsonl"
REFERENCES_FILE = "references.jsonl"

FUNCTION_WORDS = ["and", "with", ",", ".", "left", "to", "right", "(", ")", "photo"]
CATEGORIES = ["sports", "politics", "music", "science", "military", "arts"]

ROLE_AGENT = "agent"
ROLE_PATIENT = "patient"
ROLE_COMPANION = ("companion1", "companion2")
ROLE_SOLO = "solo"
ROLE_UNREFERRED = "unreferred"
ROLE_BYSTANDER = "bystander"

# (n, m) weights: n referred people, m detections
DEFAULT_NM_WEIGHTS = {
    "1,1": 0.30, "1,2": 0.10, "1,3": 0.05, "1,4": 0.03, "1,5": 0.02,
    "2,2": 0.15, "2,3": 0.06, "2,4": 0.03, "2,5": 0.01,
    "3,3": 0.08, "3,4": 0.04, "3,5": 0.02,
    "4,4": 0.06, "4,5": 0.05,
}


@dataclass(frozen=True)
class WorldConfig:
    n_identities: int = 1000
    d_v: int = 32
    d_f: int = 128
    n_verbs: int = 8
    n_positional: int = 2
    n_fillers: int = 24
    noise_face: float = 0.05
    noise_visual: float = 0.1
    role_strength: float = 2.0
    p_l2r_convention: float = 0.5
    bystander_rate: float = 0.3
    gt_keep: float = 0.8
    p_positional: float = 0.05
    p_repeat_mention: float = 0.05
    p_old: float = 0.03
    p_cropped: float = 0.02
    crop_size: int = 8
    nm_weights: dict = field(default_factory=lambda: dict(DEFAULT_NM_WEIGHTS))
    seed: int = 0

    def __post_init__(self):
        for name in ("p_l2r_convention", "bystander_rate", "gt_keep", "p_positional",
                     "p_repeat_mention", "p_old", "p_cropped"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.d_v < 2 or self.d_f < 2:
            raise ValueError("feature dimensions must be at least 2")
        if self.n_identities < 9:
            raise ValueError("need at least 9 identities to populate a scene")
        if self.crop_size < 3:
            raise ValueError("face crops must be at least 3x3")
        total = 0.0
        for key, w in self.nm_weights.items():
            n, m = parse_nm(key)
            if not (1 <= n <= 4 and n <= m <= 5) or w < 0:
                raise ValueError(f"invalid (n, m) weight entry {key}: {w}")
            total += w
        if total <= 0:
            raise ValueError("(n, m) weights must not all be zero")

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown world config fields: {sorted(unknown)}")
        return cls(**data)

    def nm_distribution(self) -> dict[tuple[int, int], float]:
        total = sum(self.nm_weights.values())
        return {parse_nm(k): w / total for k, w in sorted(self.nm_weights.items())}


def parse_nm(key: str) -> tuple[int, int]:
    n, m = key.split(",")
    return int(n), int(m)


@dataclass
class Identity:
    id: str
    face_prototype: np.ndarray
    appearance_prototype: np.ndarray


@dataclass
class SceneTemplate:
    verb_id: int | None
    agent_offset: np.ndarray
    patient_offset: np.ndarray
    pattern: str
    layout: str  # "ordered" or "shuffled"

    @property
    def has_verb(self) -> bool:
        return self.verb_id is not None


@dataclass
class World:
    config: WorldConfig
    identities: list[Identity]
    templates: list[SceneTemplate]
    role_offsets: dict[str, np.ndarray]
    vocab: list[str]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token(self, word: str) -> int:
        return self.vocab.index(word)

    def header(self) -> CorpusHeader:
        return CorpusHeader(d_v=self.config.d_v, d_f=self.config.d_f, vocab_size=self.vocab_size)


@dataclass
class Oracle:
    """Everything the generator knows about one example."""
    example_id: str
    template: int
    layout: str
    mapping: list[tuple[int, int]]       # every referred person -> detection
    roles: list[str]                     # per detection
    detection_identities: list[str]
    bystanders: list[int]
    references: dict[int, np.ndarray]    # person index -> reference face (kept subset)
    reference_all: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "template": self.template,
            "layout": self.layout,
            "mapping": [list(p) for p in self.mapping],
            "roles": self.roles,
            "detection_identities": self.detection_identities,
            "bystanders": self.bystanders,
            "reference_persons": sorted(self.references),
        }


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_world(config: WorldConfig) -> World:
    rng = np.random.default_rng([config.seed, 0xA11CE])
    identities = []
    for i in range(config.n_identities):
        face = _unit(rng.normal(size=config.d_f))
        look = rng.normal(size=config.d_v) / np.sqrt(config.d_v)
        identities.append(Identity(f"id{i:05d}", face, look))

    def offset():
        return rng.normal(size=config.d_v) * config.role_strength / np.sqrt(config.d_v)

    vocab = ["[PAD]", "[NAME]"] + FUNCTION_WORDS
    vocab += [f"verb{k}" for k in range(config.n_verbs)]
    vocab += [f"word{k}" for k in range(config.n_fillers)]
    templates = []
    for k in range(config.n_verbs):
        agent, patient = offset(), offset()
        templates.append(SceneTemplate(vocab.index(f"verb{k}"), agent, patient,
                                       f"[NAME] verb{k} [NAME] with [NAME] and [NAME]", "shuffled"))
    zero = np.zeros(config.d_v)  # positional captions assign no roles
    for k in range(config.n_positional):
        pattern = ("[NAME] , [NAME] , [NAME] and [NAME] ( left to right )" if k % 2 == 0
                   else "photo [NAME] and [NAME] and [NAME] and [NAME]")
        templates.append(SceneTemplate(None, zero, zero, pattern, "ordered"))
    roles = {ROLE_SOLO: offset(), ROLE_COMPANION[0]: offset(), ROLE_COMPANION[1]: offset()}
    return World(config, identities, templates, roles, vocab)


def _caption(world: World, template: SceneTemplate, tidx: int, n: int,
             rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Token ids and the start position of each name slot."""
    cfg = world.config
    tok = world.token
    fillers = [tok(f"word{k}") for k in range(cfg.n_fillers)]
    tokens = [int(rng.choice(fillers)) for _ in range(rng.integers(0, 3))]
    slots = []
    if template.has_verb:
        slots.append(len(tokens))
        tokens += [NAME_ID, template.verb_id]
        connectors = [None, tok("with"), tok("and")]
        for s in range(1, n):
            if connectors[s - 1] is not None:
                tokens.append(connectors[s - 1])
            slots.append(len(tokens))
            tokens.append(NAME_ID)
    elif (tidx - cfg.n_verbs) % 2 == 0:
        for s in range(n):
            if s:
                tokens.append(tok(",") if s < n - 1 else tok("and"))
            slots.append(len(tokens))
            tokens.append(NAME_ID)
        tokens += [tok("("), tok("left"), tok("to"), tok("right"), tok(")")]
    else:
        tokens.append(tok("photo"))
        for s in range(n):
            if s:
                tokens.append(tok("and"))
            slots.append(len(tokens))
            tokens.append(NAME_ID)
    tokens += [int(rng.choice(fillers)) for _ in range(rng.integers(0, 7))]
    return tokens, slots


def _slot_role(template: SceneTemplate, slot: int, n: int) -> str:
    if not template.has_verb or n == 1:
        return ROLE_SOLO
    return (ROLE_AGENT, ROLE_PATIENT, *ROLE_COMPANION)[slot]


def _role_offset(world: World, template: SceneTemplate, role: str) -> np.ndarray:
    if role == ROLE_AGENT:
        return template.agent_offset
    if role == ROLE_PATIENT:
        return template.patient_offset
    if role in world.role_offsets:
        return world.role_offsets[role]
    return np.zeros(world.config.d_v)


def _face_crop(rng: np.random.Generator, size: int, blurry: bool) -> np.ndarray:
    if blurry:
        return np.full((size, size), float(rng.integers(40, 200)), dtype=np.float32)
    return rng.integers(0, 256, size=(size, size)).astype(np.float32)


def _noisy_face(proto: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    # noise scaled so its expected norm is sigma regardless of dimension
    noise = rng.normal(size=proto.shape) * sigma / np.sqrt(proto.shape[0])
    return _unit(proto + noise)


def generate_example(world: World, index: int, rng: np.random.Generator | None = None
                     ) -> tuple[Example, Oracle]:
    """One example and its oracle. Deterministic in ``(world seed, index)``."""
    cfg = world.config
    if rng is None:
        rng = np.random.default_rng([cfg.seed, index])
    dist = cfg.nm_distribution()
    keys = list(dist)
    n, m = keys[rng.choice(len(keys), p=np.array([dist[k] for k in keys]))]

    n_verbs = cfg.n_verbs
    if cfg.n_positional and n >= 2 and rng.random() < cfg.p_positional:
        tidx = n_verbs + int(rng.integers(cfg.n_positional))
    else:
        tidx = int(rng.integers(n_verbs))
    template = world.templates[tidx]
    ordered = template.layout == "ordered" or rng.random() < cfg.p_l2r_convention
    tokens, slots = _caption(world, template, tidx, n, rng)

    people = rng.choice(cfg.n_identities, size=m, replace=False)
    # detection "slots": 0..n-1 referred (caption order), then unreferred
    roles = [_slot_role(template, s, n) for s in range(n)]
    for _ in range(m - n):
        roles.append(ROLE_BYSTANDER if rng.random() < cfg.bystander_rate else ROLE_UNREFERRED)

    widths = np.empty(m)
    for s, role in enumerate(roles):
        if s < n:
            widths[s] = rng.uniform(0.15, 0.30)
        elif role == ROLE_UNREFERRED:
            widths[s] = rng.uniform(0.10, 0.26)
        else:
            widths[s] = rng.uniform(0.04, 0.08)
    x1 = np.array([rng.uniform(0.0, 1.0 - w) for w in widths])
    if ordered:
        # referred people appear left to right in caption order
        order = np.argsort(x1[:n], kind="stable")
        x1[:n] = x1[:n][order]
        widths[:n] = widths[:n][order]
    heights = np.minimum(widths * rng.uniform(1.8, 2.6, size=m), 0.95)
    y1 = np.array([rng.uniform(0.0, 1.0 - h) for h in heights])

    perm = rng.permutation(m)  # detection list order
    det_of_slot = np.empty(m, dtype=int)
    det_of_slot[perm] = np.arange(m)
    detections: list[Detection | None] = [None] * m
    det_roles = [""] * m
    det_ids = [""] * m
    for s in range(m):
        ident = world.identities[people[s]]
        w, h = widths[s], heights[s]
        box = BoundingBox(float(x1[s]), float(y1[s]), float(x1[s] + w), float(y1[s] + h))
        fw = 0.5 * w
        face_box = BoundingBox(float(x1[s] + 0.25 * w), float(y1[s]),
                               float(x1[s] + 0.25 * w + fw), float(y1[s] + min(fw, h)))
        visual = (ident.appearance_prototype + _role_offset(world, template, roles[s])
                  + rng.normal(size=cfg.d_v) * cfg.noise_visual)
        face = _noisy_face(ident.face_prototype, cfg.noise_face, rng)
        crop = _face_crop(rng, cfg.crop_size, roles[s] == ROLE_BYSTANDER)
        j = det_of_slot[s]
        detections[j] = Detection(box, face_box, visual.astype(np.float32),
                                  face.astype(np.float32), crop)
        det_roles[j] = roles[s]
        det_ids[j] = ident.id

    mentions: list[list[Mention]] = [[Mention(slots[s], slots[s] + 1)] for s in range(n)]
    if rng.random() < cfg.p_repeat_mention:
        again = int(rng.integers(n))
        tokens += [world.token(","), NAME_ID]
        mentions[again].append(Mention(len(tokens) - 1, len(tokens)))

    person_order = rng.permutation(n)  # referred list order
    referred = []
    mapping = []
    references, reference_all = {}, {}
    for p, s in enumerate(person_order):
        ident = world.identities[people[s]]
        referred.append(ReferredPerson(ident.id, tuple(mentions[s])))
        mapping.append((p, int(det_of_slot[s])))
        ref = _noisy_face(ident.face_prototype, cfg.noise_face, rng).astype(np.float32)
        reference_all[p] = ref
        if rng.random() < cfg.gt_keep:
            references[p] = ref
    gt_links = [(p, d) for p, d in mapping if p in references]

    year = int(rng.integers(1950, 1990)) if rng.random() < cfg.p_old else int(rng.integers(1990, 2021))
    meta = Meta(year=year, cropped=bool(rng.random() < cfg.p_cropped),
                category=CATEGORIES[int(rng.integers(len(CATEGORIES)))])
    example_id = f"ex{index:06d}"
    example = Example(example_id, Caption(tuple(tokens), template.has_verb), detections,
                      referred, gt_links, meta)
    oracle = Oracle(example_id, tidx, "ordered" if ordered else "shuffled", mapping, det_roles,
                    det_ids, sorted(j for j, r in enumerate(det_roles) if r == ROLE_BYSTANDER),
                    references, reference_all)
    return example, oracle


def generate_examples(world: World, count: int, start: int = 0) -> list[tuple[Example, Oracle]]:
    return [generate_example(world, start + i) for i in range(count)]


def save_references(oracles: Iterable[Oracle], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for o in oracles:
            refs = {str(p): [float(x) for x in v] for p, v in sorted(o.references.items())}
            fh.write(json.dumps({"example_id": o.example_id, "references": refs}, sort_keys=True) + "\n")


def load_references(path: str | os.PathLike) -> dict[str, dict[int, np.ndarray]]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["example_id"]] = {int(p): np.asarray(v, dtype=np.float32)
                                          for p, v in rec["references"].items()}
    return out


def save_oracle(oracles: Iterable[Oracle], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for o in oracles:
            fh.write(json.dumps(o.to_json(), sort_keys=True) + "\n")


def load_oracle(path: str | os.PathLike) -> dict[str, dict]:
    with open(path) as fh:
        return {rec["example_id"]: rec for rec in map(json.loads, filter(str.strip, fh))}


def generate_corpus(world: World, count: int, out_dir: str | os.PathLike
                    ) -> tuple[list[Example], list[Oracle]]:
    """Write corpus files, reference faces and the oracle sidecar to ``out_dir``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    out = Path(out_dir)
    pairs = generate_examples(world, count)
    examples = [e for e, _ in pairs]
    oracles = [o for _, o in pairs]
    save_corpus(examples, world.header(), out)
    save_references(oracles, out / REFERENCES_FILE)
    save_oracle(oracles, out / ORACLE_FILE)
    (out / "world.json").write_text(json.dumps(world_config_dict(world.config), indent=1,
                                               sort_keys=True) + "\n")
    (out / "vocab.txt").write_text("\n".join(world.vocab) + "\n")
    return examples, oracles


def world_config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)


def expected_random_accuracy(cfg: WorldConfig, exclude_trivial: bool = True,
                             eval_identity_fraction: float | None = None,
                             drop_verbless: bool = False) -> float:
    """Per-link accuracy of uniform random injective assignment, in expectation.

    A person assigned uniformly among ``m`` boxes hits its linked box with
    probability ``1/m``; links per example scale with ``n``.

    ``eval_identity_fraction`` reweights each (n, m) cell by the chance that
    an example lands in an identity-held-out evaluation split, which grows
    with the number of people named. ``drop_verbless`` accounts for the
    cleaning pass that removes captions built from positional templates.
    """
    num = den = 0.0
    for (n, m), w in cfg.nm_distribution().items():
        if exclude_trivial and n == 1 and m == 1:
            continue
        if eval_identity_fraction is not None:
            w *= 1.0 - (1.0 - eval_identity_fraction) ** n
        if drop_verbless and n >= 2 and cfg.n_positional:
            w *= 1.0 - cfg.p_positional
        num += w * n / m
        den += w * n
    return num / den
