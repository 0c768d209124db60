"""Question templates, grounded instantiation, and dataset generation.

Each template family pairs a program pattern (prefix tokens with named
slots) with question text patterns.  Instantiation fills the slots
against a concrete scene: slots grouped as a referent are drawn from
objects the slot attributes identify uniquely, free slots are drawn
from the scene or the full inventory, and the symbolic interpreter then
supplies the ground-truth answer.  Draws whose program errors out, or
whose answer would push one answer value past the per-family balance
cap, are rejected and retried.

Families whose programs stay short teach every catalog function on its
own; the long families only recombine those functions, which is what
makes the short-to-long generalization split meaningful.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field

import numpy as np

from .dsl import ATTRIBUTE_VALUES, DIRECTIONS, parse_prefix
from .interpreter import ERROR_ANSWER, execute
from .scenes import (
    Condition,
    DESK_SCENE_CONFIG,
    SceneConfig,
    SceneGraph,
    sample_scene,
)

# Words the question text may use for each attribute value.
SYNONYMS: dict[str, tuple[str, ...]] = {
    "small": ("small", "tiny"),
    "large": ("large", "big"),
    "rubber": ("rubber", "matte"),
    "metal": ("metal", "shiny"),
    "cube": ("cube", "block"),
    "sphere": ("sphere", "ball"),
    "cylinder": ("cylinder",),
}
for _color in ATTRIBUTE_VALUES["color"]:
    SYNONYMS[_color] = (_color,)

DIRECTION_PHRASES: dict[str, tuple[str, ...]] = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "front": ("in", "front", "of"),
    "behind": ("behind",),
}

_SLOT_KINDS = {"z": "size", "c": "color", "m": "material", "s": "shape", "d": "direction"}

QTYPES = (
    "exist",
    "count",
    "equal_integer",
    "less_than",
    "greater_than",
    "query_size",
    "query_color",
    "query_material",
    "query_shape",
    "equal_size",
    "equal_color",
    "equal_material",
    "equal_shape",
)

# Coarse groups used in reports.
QTYPE_GROUPS = {
    "exist": "exist",
    "count": "count",
    "equal_integer": "compare_integer",
    "less_than": "compare_integer",
    "greater_than": "compare_integer",
    "query_size": "query",
    "query_color": "query",
    "query_material": "query",
    "query_shape": "query",
    "equal_size": "compare_attribute",
    "equal_color": "compare_attribute",
    "equal_material": "compare_attribute",
    "equal_shape": "compare_attribute",
}


@dataclass(frozen=True)
class Template:
    """One question family: a program pattern plus its text patterns."""

    family_id: int
    qtype: str
    program: tuple[str, ...]
    texts: tuple[tuple[str, ...], ...]
    # Slot groups that must jointly pick out exactly one object.
    groups: tuple[tuple[str, ...], ...] = ()
    # Pairs of same-kind slots that must take different values.
    distinct: tuple[tuple[str, str], ...] = ()
    # Referent groups must land on pairwise distinct objects.
    distinct_referents: bool = False

    @property
    def length(self) -> int:
        return len(self.program)

    def slots(self) -> dict[str, str]:
        """Slot name -> kind, in order of first appearance."""
        out: dict[str, str] = {}
        for token in self.program:
            lo = token.find("{")
            if lo >= 0:
                name = token[lo + 1 : token.find("}")]
                out.setdefault(name, _SLOT_KINDS[name[0]])
        return out


def _words(text: str) -> tuple[str, ...]:
    return tuple(text.split())


def _t(fid, qtype, program, texts, groups=(), distinct=(), distinct_referents=False):
    return Template(
        family_id=fid,
        qtype=qtype,
        program=tuple(program.split()),
        texts=tuple(_words(t) for t in texts),
        groups=tuple(tuple(g.split()) for g in groups),
        distinct=tuple(tuple(d.split()) for d in distinct),
        distinct_referents=distinct_referents,
    )


@functools.cache
def all_templates() -> tuple[Template, ...]:
    """The full family inventory in family-id order."""
    t: list[Template] = []
    # -- existence ----------------------------------------------------------
    t.append(_t(0, "exist",
        "exist filter_shape[{s1}] scene",
        ["is there a {s1}", "are there any {s1s}"]))
    t.append(_t(1, "exist",
        "exist filter_color[{c1}] filter_shape[{s1}] scene",
        ["is there a {c1} {s1}", "are there any {c1} {s1s}"]))
    t.append(_t(2, "exist",
        "exist filter_size[{z1}] filter_material[{m1}] scene",
        ["is there a {z1} {m1} {thing}", "are there any {z1} {m1} {things}"]))
    t.append(_t(3, "exist",
        "exist filter_shape[{s2}] relate[{d1}] unique filter_shape[{s1}] scene",
        ["is there a {s2} {d1} the {s1}"],
        groups=["s1"]))
    t.append(_t(4, "exist",
        "exist same_color unique filter_shape[{s1}] scene",
        ["is there another {thing} with the same color as the {s1}",
         "is any other {thing} the same color as the {s1}"],
        groups=["s1"]))
    t.append(_t(5, "exist",
        "exist intersect filter_color[{c1}] scene filter_shape[{s1}] scene",
        ["is there a {thing} that is both {c1} and a {s1}"]))
    # -- counting -----------------------------------------------------------
    t.append(_t(6, "count",
        "count filter_color[{c1}] scene",
        ["how many {c1} {things} are there", "what number of {things} are {c1}"]))
    t.append(_t(7, "count",
        "count filter_shape[{s1}] scene",
        ["how many {s1s} are there", "what number of {s1s} are there"]))
    t.append(_t(8, "count",
        "count filter_material[{m1}] filter_size[{z1}] scene",
        ["how many {z1} {m1} {things} are there"]))
    t.append(_t(9, "count",
        "count relate[{d1}] unique filter_color[{c1}] scene",
        ["how many {things} are {d1} the {c1} {thing}"],
        groups=["c1"]))
    t.append(_t(10, "count",
        "count union filter_shape[{s1}] scene filter_color[{c1}] scene",
        ["how many {things} are {s1s} or {c1}"]))
    t.append(_t(11, "count",
        "count same_shape unique filter_color[{c1}] scene",
        ["how many other {things} have the same shape as the {c1} {thing}"],
        groups=["c1"]))
    # -- integer comparison ---------------------------------------------------
    t.append(_t(12, "equal_integer",
        "equal_integer count filter_shape[{s1}] scene count filter_shape[{s2}] scene",
        ["are there as many {s1s} as {s2s}",
         "is the number of {s1s} the same as the number of {s2s}"],
        distinct=["s1 s2"]))
    t.append(_t(13, "less_than",
        "less_than count filter_color[{c1}] scene count filter_color[{c2}] scene",
        ["are there fewer {c1} {things} than {c2} {things}"],
        distinct=["c1 c2"]))
    t.append(_t(14, "greater_than",
        "greater_than count filter_material[{m1}] scene count filter_material[{m2}] scene",
        ["are there more {m1} {things} than {m2} {things}"],
        distinct=["m1 m2"]))
    # -- counting with same_size (keeps every same_* function in a short family)
    t.append(_t(15, "count",
        "count same_size unique filter_shape[{s1}] scene",
        ["how many other {things} are the same size as the {s1}"],
        groups=["s1"]))
    # -- attribute queries ----------------------------------------------------
    t.append(_t(16, "query_color",
        "query_color unique filter_shape[{s1}] scene",
        ["what color is the {s1}", "the {s1} is what color"],
        groups=["s1"]))
    t.append(_t(17, "query_shape",
        "query_shape unique filter_color[{c1}] scene",
        ["what shape is the {c1} {thing}"],
        groups=["c1"]))
    t.append(_t(18, "query_material",
        "query_material unique filter_size[{z1}] filter_color[{c1}] scene",
        ["what material is the {z1} {c1} {thing}",
         "what is the {z1} {c1} {thing} made of"],
        groups=["z1 c1"]))
    t.append(_t(19, "query_size",
        "query_size unique filter_material[{m1}] filter_shape[{s1}] scene",
        ["what size is the {m1} {s1}", "how big is the {m1} {s1}"],
        groups=["m1 s1"]))
    t.append(_t(20, "query_color",
        "query_color unique relate[{d1}] unique filter_shape[{s1}] scene",
        ["what color is the {thing} {d1} the {s1}"],
        groups=["s1"]))
    t.append(_t(21, "query_shape",
        "query_shape unique relate[{d1}] unique filter_color[{c1}] scene",
        ["what shape is the {thing} {d1} the {c1} {thing}"],
        groups=["c1"]))
    t.append(_t(22, "query_color",
        "query_color unique same_material unique filter_color[{c1}] scene",
        ["what color is the other {thing} made of the same material as the {c1} {thing}"],
        groups=["c1"]))
    # -- attribute comparison ---------------------------------------------------
    t.append(_t(23, "equal_color",
        "equal_color query_color unique filter_shape[{s1}] scene query_color unique filter_shape[{s2}] scene",
        ["is the {s1} the same color as the {s2}",
         "does the {s1} have the same color as the {s2}"],
        groups=["s1", "s2"], distinct=["s1 s2"], distinct_referents=True))
    t.append(_t(24, "equal_shape",
        "equal_shape query_shape unique filter_color[{c1}] scene query_shape unique filter_color[{c2}] scene",
        ["is the {c1} {thing} the same shape as the {c2} {thing}"],
        groups=["c1", "c2"], distinct=["c1 c2"], distinct_referents=True))
    t.append(_t(25, "equal_material",
        "equal_material query_material unique filter_color[{c1}] scene query_material unique filter_color[{c2}] scene",
        ["is the {c1} {thing} made of the same material as the {c2} {thing}"],
        groups=["c1", "c2"], distinct=["c1 c2"], distinct_referents=True))
    t.append(_t(26, "equal_size",
        "equal_size query_size unique filter_color[{c1}] scene query_size unique filter_shape[{s1}] scene",
        ["is the {c1} {thing} the same size as the {s1}"],
        groups=["c1", "s1"], distinct_referents=True))
    # -- long recombinations ------------------------------------------------
    t.append(_t(27, "count",
        "count union filter_color[{c1}] relate[{d1}] unique filter_shape[{s1}] scene "
        "filter_color[{c2}] relate[{d2}] unique filter_shape[{s2}] scene",
        ["how many {things} are either {c1} {things} {d1} the {s1} or {c2} {things} {d2} the {s2}"],
        groups=["s1", "s2"], distinct=["s1 s2"], distinct_referents=True))
    t.append(_t(28, "exist",
        "exist intersect relate[{d1}] unique filter_color[{c1}] scene "
        "relate[{d2}] unique filter_color[{c2}] scene",
        ["is there a {thing} that is both {d1} the {c1} {thing} and {d2} the {c2} {thing}"],
        groups=["c1", "c2"], distinct=["c1 c2"], distinct_referents=True))
    t.append(_t(29, "greater_than",
        "greater_than count relate[{d1}] unique filter_shape[{s1}] scene "
        "count relate[{d2}] unique filter_shape[{s2}] scene",
        ["are there more {things} {d1} the {s1} than {d2} the {s2}"],
        groups=["s1", "s2"], distinct=["s1 s2"], distinct_referents=True))
    t.append(_t(30, "query_material",
        "query_material unique filter_shape[{s1}] relate[{d1}] unique filter_color[{c1}] "
        "relate[{d2}] unique filter_shape[{s2}] scene",
        ["what material is the {s1} {d1} the {c1} {thing} {d2} the {s2}"],
        groups=["s2"]))
    t.append(_t(31, "equal_integer",
        "equal_integer count union filter_shape[{s1}] scene filter_shape[{s2}] scene "
        "count filter_color[{c1}] scene",
        ["are there as many {things} that are {s1s} or {s2s} as {c1} {things}"],
        distinct=["s1 s2"]))
    t.append(_t(32, "equal_color",
        "equal_color query_color unique relate[{d1}] unique filter_shape[{s1}] scene "
        "query_color unique filter_shape[{s2}] scene",
        ["is the {thing} {d1} the {s1} the same color as the {s2}"],
        groups=["s1", "s2"], distinct=["s1 s2"], distinct_referents=True))
    t.append(_t(33, "count",
        "count intersect same_color unique filter_shape[{s1}] scene "
        "relate[{d1}] unique filter_color[{c1}] scene",
        ["how many {things} with the same color as the {s1} are {d1} the {c1} {thing}"],
        groups=["s1", "c1"], distinct_referents=True))
    assert [x.family_id for x in t] == list(range(len(t)))
    return tuple(t)


@functools.cache
def templates_by_qtype() -> dict[str, tuple[Template, ...]]:
    out: dict[str, list[Template]] = {q: [] for q in QTYPES}
    for template in all_templates():
        out[template.qtype].append(template)
    return {q: tuple(v) for q, v in out.items()}


def template_by_family(family_id: int) -> Template:
    return all_templates()[family_id]


@dataclass(frozen=True)
class QARecord:
    question: tuple[str, ...]
    program: tuple[str, ...]
    answer: str
    scene_id: int
    family_id: int

    @property
    def qtype(self) -> str:
        if self.family_id < 0:
            return "unknown"  # records loaded from external question files
        return template_by_family(self.family_id).qtype


def _fill_program(template: Template, assignment: dict[str, str]) -> tuple[str, ...]:
    out = []
    for token in template.program:
        lo = token.find("{")
        if lo >= 0:
            name = token[lo + 1 : token.find("}")]
            token = token[:lo] + assignment[name] + token[token.find("}") + 1 :]
        out.append(token)
    return tuple(out)


def _fill_text(template: Template, assignment: dict[str, str], rng) -> tuple[str, ...]:
    pattern = template.texts[int(rng.integers(len(template.texts)))]
    words: list[str] = []
    for piece in pattern:
        if not piece.startswith("{"):
            words.append(piece)
            continue
        key = piece[1:-1]
        if key == "thing":
            words.append(("thing", "object")[int(rng.integers(2))])
        elif key == "things":
            words.append(("things", "objects")[int(rng.integers(2))])
        elif key in assignment:
            value = assignment[key]
            if key[0] == "d":
                words.extend(DIRECTION_PHRASES[value])
            else:
                choices = SYNONYMS[value]
                words.append(choices[int(rng.integers(len(choices)))])
        elif key.endswith("s") and key[:-1] in assignment:
            value = assignment[key[:-1]]
            choices = SYNONYMS[value]
            words.append(choices[int(rng.integers(len(choices)))] + "s")
        else:
            raise KeyError(f"text slot {key!r} not in assignment")
    return tuple(words)


def instantiate(
    template: Template, scene: SceneGraph, rng, max_tries: int = 20
) -> QARecord | None:
    """Ground one template against one scene, or give up after retries."""
    slots = template.slots()
    grouped = {name for group in template.groups for name in group}
    for _ in range(max_tries):
        assignment: dict[str, str] = {}
        referents: list[int] = []
        for group in template.groups:
            kinds = [slots[name] for name in group]
            combos = [tuple(o.attribute(k) for k in kinds) for o in scene.objects]
            unique_objs = [i for i, c in enumerate(combos) if combos.count(c) == 1]
            if not unique_objs:
                return None  # no draw can fix a missing unique referent
            pick = unique_objs[int(rng.integers(len(unique_objs)))]
            referents.append(pick)
            for name, kind in zip(group, kinds):
                assignment[name] = scene.objects[pick].attribute(kind)
        if template.distinct_referents and len(set(referents)) != len(referents):
            continue
        for name, kind in slots.items():
            if name in grouped:
                continue
            if kind == "direction":
                assignment[name] = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
            else:
                # Half the draws come from values present in the scene, so
                # existence-style questions see both outcomes.
                present = sorted({o.attribute(kind) for o in scene.objects})
                if present and rng.random() < 0.5:
                    assignment[name] = present[int(rng.integers(len(present)))]
                else:
                    inventory = ATTRIBUTE_VALUES[kind]
                    assignment[name] = inventory[int(rng.integers(len(inventory)))]
        if any(assignment[a] == assignment[b] for a, b in template.distinct):
            continue
        program = _fill_program(template, assignment)
        answer = execute(parse_prefix(list(program)), scene)
        if answer == ERROR_ANSWER:
            continue
        question = _fill_text(template, assignment, rng)
        return QARecord(question, program, answer, scene.scene_id, template.family_id)
    return None


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 1200
    questions_per_scene: int = 5
    condition: str = "unrestricted"
    train_frac: float = 0.8
    val_frac: float = 0.1
    answer_cap: float = 0.6
    max_attempts: int = 30
    families: tuple[int, ...] | None = None
    scene: SceneConfig = field(default_factory=lambda: DESK_SCENE_CONFIG)


@dataclass
class Dataset:
    scenes: dict[int, SceneGraph]
    splits: dict[str, list[QARecord]]
    stats: dict


class _BalanceBook:
    """Per-family answer caps plus question-type balancing for one split."""

    def __init__(self, cap: float):
        self.cap = cap
        self.family_answers: dict[int, dict[str, int]] = {}
        self.family_totals: dict[int, int] = {}
        self.qtype_counts: dict[str, int] = {q: 0 for q in QTYPES}

    def next_qtype(self, available: list[str]) -> str:
        return min(available, key=lambda q: (self.qtype_counts[q], QTYPES.index(q)))

    def admits(self, record: QARecord) -> bool:
        hist = self.family_answers.setdefault(record.family_id, {})
        n = self.family_totals.get(record.family_id, 0)
        return hist.get(record.answer, 0) + 1 <= max(2, self.cap * (n + 1))

    def add(self, record: QARecord) -> None:
        hist = self.family_answers.setdefault(record.family_id, {})
        hist[record.answer] = hist.get(record.answer, 0) + 1
        self.family_totals[record.family_id] = self.family_totals.get(record.family_id, 0) + 1
        self.qtype_counts[record.qtype] += 1


def generate_dataset(config: DatasetConfig, rng) -> Dataset:
    """Sample scenes and grounded questions, balanced and split by scene.

    Splits are disjoint at the scene level.  Within each split, question
    types are kept within a few percent of one another by always drawing
    the least-represented type next, and no answer value may exceed the
    per-family cap (so a majority-answer shortcut cannot look good).
    """
    condition = Condition(config.condition)
    families = (
        all_templates()
        if config.families is None
        else tuple(template_by_family(f) for f in config.families)
    )
    by_qtype: dict[str, list[Template]] = {}
    for template in families:
        by_qtype.setdefault(template.qtype, []).append(template)
    qtypes = [q for q in QTYPES if q in by_qtype]

    n_train = int(round(config.n_scenes * config.train_frac))
    n_val = int(round(config.n_scenes * config.val_frac))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val),
              "test": (n_train + n_val, config.n_scenes)}

    scenes: dict[int, SceneGraph] = {}
    splits: dict[str, list[QARecord]] = {}
    rejects = {"instantiate": 0, "balance": 0}
    for split, (lo, hi) in bounds.items():
        book = _BalanceBook(config.answer_cap)
        records: list[QARecord] = []
        for scene_id in range(lo, hi):
            n = int(rng.integers(config.scene.min_objects, config.scene.max_objects + 1))
            scene = sample_scene(rng, n, condition, config.scene, scene_id=scene_id)
            scenes[scene_id] = scene
            for _ in range(config.questions_per_scene):
                accepted = None
                tried: set[str] = set()
                for _ in range(config.max_attempts):
                    open_qtypes = [q for q in qtypes if q not in tried]
                    if not open_qtypes:
                        break
                    qtype = book.next_qtype(open_qtypes)
                    choices = by_qtype[qtype]
                    template = choices[int(rng.integers(len(choices)))]
                    record = instantiate(template, scene, rng)
                    if record is None:
                        tried.add(qtype)
                        rejects["instantiate"] += 1
                        continue
                    if not book.admits(record):
                        rejects["balance"] += 1
                        continue
                    accepted = record
                    break
                if accepted is not None:
                    book.add(accepted)
                    records.append(accepted)
        splits[split] = records

    stats = {
        "config": {
            "n_scenes": config.n_scenes,
            "questions_per_scene": config.questions_per_scene,
            "condition": config.condition,
            "families": None if config.families is None else list(config.families),
        },
        "rejects": rejects,
        "splits": {},
    }
    for split, records in splits.items():
        qtype_counts: dict[str, int] = {}
        family_counts: dict[str, int] = {}
        answer_counts: dict[str, int] = {}
        for r in records:
            qtype_counts[r.qtype] = qtype_counts.get(r.qtype, 0) + 1
            family_counts[str(r.family_id)] = family_counts.get(str(r.family_id), 0) + 1
            answer_counts[r.answer] = answer_counts.get(r.answer, 0) + 1
        stats["splits"][split] = {
            "records": len(records),
            "qtypes": qtype_counts,
            "families": family_counts,
            "answers": answer_counts,
        }
    return Dataset(scenes=scenes, splits=splits, stats=stats)


# ---------------------------------------------------------------------------
# short/long partition


def family_program_lengths(records: list[QARecord]) -> dict[int, float]:
    """Mean serialized program length per family over the given records."""
    sums: dict[int, int] = {}
    counts: dict[int, int] = {}
    for r in records:
        sums[r.family_id] = sums.get(r.family_id, 0) + len(r.program)
        counts[r.family_id] = counts.get(r.family_id, 0) + 1
    return {f: sums[f] / counts[f] for f in sums}


def split_short_long(
    records: list[QARecord], threshold: float = 10.0
) -> tuple[list[QARecord], list[QARecord]]:
    """Partition records by family: families whose mean program length is
    below the threshold are short, the rest long.  Whole families move
    together, so no family straddles the boundary."""
    lengths = family_program_lengths(records)
    short = [r for r in records if lengths[r.family_id] < threshold]
    long_ = [r for r in records if lengths[r.family_id] >= threshold]
    return short, long_


# ---------------------------------------------------------------------------
# JSONL persistence


def record_to_json(record: QARecord) -> str:
    return json.dumps(
        {
            "question": list(record.question),
            "program": list(record.program),
            "answer": record.answer,
            "scene_id": record.scene_id,
            "family_id": record.family_id,
        },
        separators=(", ", ": "),
    )


def record_from_json(text: str) -> QARecord:
    payload = json.loads(text)
    return QARecord(
        question=tuple(payload["question"]),
        program=tuple(payload.get("program") or ()),
        answer=payload["answer"],
        scene_id=int(payload["scene_id"]),
        family_id=int(payload.get("family_id", -1)),
    )


def save_records_jsonl(path, records: list[QARecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(record_to_json(r) + "\n")


def load_records_jsonl(path) -> list[QARecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_json(line))
    return out
