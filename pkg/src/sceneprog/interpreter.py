"""Exact symbolic execution of programs against scene graphs.

This interpreter is the ground truth the learned components are measured
against: it is deterministic, side-effect free, and total.  Programs are
type-checked before evaluation, so the only failure left at run time is
`unique` applied to a set that is not a singleton; any failure maps to
the distinguished error answer rather than an exception.
"""
from __future__ import annotations

import functools

from .dsl import (
    COLORS,
    MATERIALS,
    Program,
    ProgramTypeError,
    SHAPES,
    SIZES,
    ValueKind,
    parse_prefix,
    validate_types,
)
from .scenes import SceneGraph, relate_set

YES = "yes"
NO = "no"
MAX_COUNT = 10

# The error answer is deliberately outside the answer vocabulary: the
# learned answer classifier never predicts it, it only marks questions
# (or broken programs) with no defined answer.
ERROR_ANSWER = "error"


@functools.cache
def answer_vocabulary() -> tuple[str, ...]:
    """All 28 legal answers in a fixed order: no/yes, 0..10, attributes."""
    counts = tuple(str(i) for i in range(MAX_COUNT + 1))
    return (NO, YES) + counts + SIZES + COLORS + MATERIALS + SHAPES


@functools.cache
def answer_index() -> dict[str, int]:
    return {answer: i for i, answer in enumerate(answer_vocabulary())}


class EvaluationError(RuntimeError):
    """Internal: a run-time failure that maps to the error answer."""


def evaluate(program: Program, scene: SceneGraph):
    """Evaluate a (well-typed) program to its raw value.

    Object sets come back as frozensets of object indices, objects as a
    single index, and the rest as Python ints, bools, or attribute
    strings.  Raises EvaluationError on `unique` over a non-singleton.
    """
    name = program.spec.name
    param = program.spec.param
    args = [evaluate(child, scene) for child in program.children]

    if name == "scene":
        return frozenset(range(len(scene.objects)))
    if name.startswith("filter_"):
        attr = name.removeprefix("filter_")
        return frozenset(i for i in args[0] if scene.objects[i].attribute(attr) == param)
    if name == "unique":
        if len(args[0]) != 1:
            raise EvaluationError(f"unique over a set of size {len(args[0])}")
        return next(iter(args[0]))
    if name == "relate":
        return relate_set(scene, args[0], param)
    if name.startswith("same_"):
        attr = name.removeprefix("same_")
        ref = args[0]
        value = scene.objects[ref].attribute(attr)
        return frozenset(
            j
            for j in range(len(scene.objects))
            if j != ref and scene.objects[j].attribute(attr) == value
        )
    if name == "count":
        return len(args[0])
    if name == "exist":
        return len(args[0]) > 0
    if name.startswith("query_"):
        return scene.objects[args[0]].attribute(name.removeprefix("query_"))
    if name == "intersect":
        return args[0] & args[1]
    if name == "union":
        return args[0] | args[1]
    if name.startswith("equal_") and name != "equal_integer":
        return args[0] == args[1]
    if name == "equal_integer":
        return args[0] == args[1]
    if name == "less_than":
        return args[0] < args[1]
    if name == "greater_than":
        return args[0] > args[1]
    raise AssertionError(f"unhandled catalog function {name!r}")


def _to_answer(kind: ValueKind, value) -> str:
    if kind is ValueKind.BOOLEAN:
        return YES if value else NO
    if kind is ValueKind.INTEGER:
        if not 0 <= value <= MAX_COUNT:
            raise EvaluationError(f"count {value} outside the answer range")
        return str(value)
    if kind in (ValueKind.SIZE, ValueKind.COLOR, ValueKind.MATERIAL, ValueKind.SHAPE):
        return value
    raise EvaluationError(f"{kind.value} is not an answerable kind")


def execute(program: Program, scene: SceneGraph) -> str:
    """Run a program against a scene and map the result to an answer string.

    Total: ill-typed programs, non-answerable root kinds, and unique
    failures all return the error answer instead of raising.
    """
    try:
        kind = validate_types(program)
    except ProgramTypeError:
        return ERROR_ANSWER
    try:
        return _to_answer(kind, evaluate(program, scene))
    except EvaluationError:
        return ERROR_ANSWER


def execute_tokens(tokens, scene: SceneGraph) -> str:
    """Parse a prefix token sequence (with repair) and execute it."""
    return execute(parse_prefix(tokens), scene)
