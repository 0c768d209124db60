"""Typed function catalog, program trees, and prefix-order (de)serialization.

A program is a tree of catalog functions.  Every function has a fixed arity
and fixed input/output value kinds, so a bottom-up pass can type-check any
tree without evaluating it.  Programs travel between components as flat
prefix-order token sequences; parsing is total over arbitrary token lists
from the catalog because missing arguments are padded with `scene` constants
and unused trailing tokens are discarded.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

SIZES = ("small", "large")
COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
MATERIALS = ("rubber", "metal")
SHAPES = ("cube", "sphere", "cylinder")

ATTRIBUTE_VALUES: dict[str, tuple[str, ...]] = {
    "size": SIZES,
    "color": COLORS,
    "material": MATERIALS,
    "shape": SHAPES,
}

DIRECTIONS = ("left", "right", "front", "behind")


class ValueKind(enum.Enum):
    """Result types that flow along program edges."""

    OBJECT_SET = "object_set"
    OBJECT = "object"
    INTEGER = "integer"
    BOOLEAN = "boolean"
    SIZE = "size"
    COLOR = "color"
    MATERIAL = "material"
    SHAPE = "shape"


ATTRIBUTE_KINDS: dict[str, ValueKind] = {
    "size": ValueKind.SIZE,
    "color": ValueKind.COLOR,
    "material": ValueKind.MATERIAL,
    "shape": ValueKind.SHAPE,
}

# Kinds a full question may answer with.  Object sets and bare object
# references are intermediate values only.
ANSWERABLE_KINDS = (
    ValueKind.INTEGER,
    ValueKind.BOOLEAN,
    ValueKind.SIZE,
    ValueKind.COLOR,
    ValueKind.MATERIAL,
    ValueKind.SHAPE,
)


@dataclass(frozen=True)
class FunctionSpec:
    """One catalog entry.

    `name` is the bare identifier (e.g. "filter_color"); `param` is the
    attribute value or direction baked into the token, if any.  The full
    token as it appears in serialized programs is `token`: the name alone,
    or "name[param]".
    """

    name: str
    param: str | None
    input_kinds: tuple[ValueKind, ...]
    output_kind: ValueKind

    @property
    def arity(self) -> int:
        return len(self.input_kinds)

    @property
    def token(self) -> str:
        if self.param is None:
            return self.name
        return f"{self.name}[{self.param}]"


def _build_catalog() -> tuple[FunctionSpec, ...]:
    OSET = ValueKind.OBJECT_SET
    OBJ = ValueKind.OBJECT
    specs: list[FunctionSpec] = [FunctionSpec("scene", None, (), OSET)]
    for attr, values in ATTRIBUTE_VALUES.items():
        for value in values:
            specs.append(FunctionSpec(f"filter_{attr}", value, (OSET,), OSET))
    specs.append(FunctionSpec("unique", None, (OSET,), OBJ))
    for direction in DIRECTIONS:
        specs.append(FunctionSpec("relate", direction, (OBJ,), OSET))
    for attr in ATTRIBUTE_VALUES:
        specs.append(FunctionSpec(f"same_{attr}", None, (OBJ,), OSET))
    specs.append(FunctionSpec("count", None, (OSET,), ValueKind.INTEGER))
    specs.append(FunctionSpec("exist", None, (OSET,), ValueKind.BOOLEAN))
    for attr, kind in ATTRIBUTE_KINDS.items():
        specs.append(FunctionSpec(f"query_{attr}", None, (OBJ,), kind))
    specs.append(FunctionSpec("intersect", None, (OSET, OSET), OSET))
    specs.append(FunctionSpec("union", None, (OSET, OSET), OSET))
    for attr, kind in ATTRIBUTE_KINDS.items():
        specs.append(FunctionSpec(f"equal_{attr}", None, (kind, kind), ValueKind.BOOLEAN))
    INT = ValueKind.INTEGER
    specs.append(FunctionSpec("equal_integer", None, (INT, INT), ValueKind.BOOLEAN))
    specs.append(FunctionSpec("less_than", None, (INT, INT), ValueKind.BOOLEAN))
    specs.append(FunctionSpec("greater_than", None, (INT, INT), ValueKind.BOOLEAN))
    return tuple(specs)


@functools.cache
def catalog() -> tuple[FunctionSpec, ...]:
    """All catalog functions in a fixed, stable order."""
    return _build_catalog()


@functools.cache
def catalog_by_token() -> dict[str, FunctionSpec]:
    table = {spec.token: spec for spec in catalog()}
    assert len(table) == len(catalog()), "catalog tokens must be unique"
    return table


SCENE_TOKEN = "scene"


@dataclass(frozen=True)
class Program:
    """A program tree node; the root node stands for the whole program."""

    spec: FunctionSpec
    children: tuple["Program", ...]

    def __post_init__(self) -> None:
        if len(self.children) != self.spec.arity:
            raise ValueError(
                f"{self.spec.token} takes {self.spec.arity} arguments, got {len(self.children)}"
            )

    def walk(self):
        """Yield every node in prefix order."""
        yield self
        for child in self.children:
            yield from child.walk()

    def size(self) -> int:
        return sum(1 for _ in self.walk())


def _scene_leaf() -> Program:
    return Program(catalog_by_token()[SCENE_TOKEN], ())


class UnknownTokenError(ValueError):
    """A token not present in the catalog, with its sequence position."""

    def __init__(self, token: str, position: int):
        super().__init__(f"unknown token {token!r} at position {position}")
        self.token = token
        self.position = position


def parse_prefix(tokens: list[str] | tuple[str, ...]) -> Program:
    """Rebuild a program tree from a prefix-order token sequence.

    Total over any sequence of catalog tokens: when the sequence runs out
    before an argument slot is filled, the slot gets a `scene` constant;
    tokens left over once the tree is complete are dropped.  The empty
    sequence parses to the bare `scene` program.  A non-catalog token is
    the only error.
    """
    table = catalog_by_token()
    specs: list[FunctionSpec] = []
    for position, token in enumerate(tokens):
        spec = table.get(token)
        if spec is None:
            raise UnknownTokenError(token, position)
        specs.append(spec)

    cursor = 0

    def build() -> Program:
        nonlocal cursor
        if cursor >= len(specs):
            return _scene_leaf()
        spec = specs[cursor]
        cursor += 1
        children = tuple(build() for _ in range(spec.arity))
        return Program(spec, children)

    return build()


def serialize_prefix(program: Program) -> list[str]:
    """Flatten a program tree to its prefix-order token sequence."""
    return [node.spec.token for node in program.walk()]


class ProgramTypeError(ValueError):
    """A child value kind that does not match its parent's input slot."""

    def __init__(self, node: Program, slot: int, expected: ValueKind, actual: ValueKind):
        super().__init__(
            f"{node.spec.token} argument {slot} expects {expected.value}, got {actual.value}"
        )
        self.node = node
        self.slot = slot
        self.expected = expected
        self.actual = actual


def validate_types(program: Program) -> ValueKind:
    """Type-check bottom-up and return the root's output kind.

    Raises ProgramTypeError at the first mismatched edge.
    """
    for slot, child in enumerate(program.children):
        child_kind = validate_types(child)
        expected = program.spec.input_kinds[slot]
        if child_kind is not expected:
            raise ProgramTypeError(program, slot, expected, child_kind)
    return program.spec.output_kind


def is_well_typed(program: Program) -> bool:
    try:
        validate_types(program)
    except ProgramTypeError:
        return False
    return True


# Minimum tree depth (scene leaves count as depth zero) needed to produce
# each value kind, used to steer random generation away from dead ends.
_MIN_DEPTH = {
    ValueKind.OBJECT_SET: 0,
    ValueKind.OBJECT: 1,
    ValueKind.INTEGER: 1,
    ValueKind.BOOLEAN: 1,
    ValueKind.SIZE: 2,
    ValueKind.COLOR: 2,
    ValueKind.MATERIAL: 2,
    ValueKind.SHAPE: 2,
}


@functools.cache
def _producers(kind: ValueKind) -> tuple[FunctionSpec, ...]:
    return tuple(spec for spec in catalog() if spec.output_kind is kind)


def random_program(
    rng, max_depth: int = 6, root_kind: ValueKind | None = None
) -> Program:
    """Draw a random well-typed program with tree depth at most `max_depth`.

    Depth counts function applications: `scene` alone is depth 0 and
    count(scene) is depth 1.  When `root_kind` is None the root kind is
    drawn uniformly from the answerable kinds reachable within the budget.
    Driven entirely by `rng`, so a fixed seed fixes the program.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be at least 1")
    if root_kind is None:
        options = [k for k in ANSWERABLE_KINDS if _MIN_DEPTH[k] <= max_depth]
        root_kind = options[rng.integers(len(options))]
    elif _MIN_DEPTH[root_kind] > max_depth:
        raise ValueError(f"{root_kind} unreachable within depth {max_depth}")

    def grow(kind: ValueKind, budget: int) -> Program:
        feasible = [
            spec
            for spec in _producers(kind)
            if budget >= 1 + max((_MIN_DEPTH[k] for k in spec.input_kinds), default=-1)
        ]
        spec = feasible[rng.integers(len(feasible))]
        children = tuple(grow(k, budget - 1) for k in spec.input_kinds)
        return Program(spec, children)

    return grow(root_kind, max_depth)
