"""Scene graphs: typed objects on a 2-D ground plane, samplers, and JSON I/O.

Coordinates live in a `width` x `height` rectangle with the origin at the
back-left corner: larger x is further right, larger y is closer to the
viewer (so "front" means larger y and "behind" smaller y).  The sampler
places objects on a jittered lattice with distinct rows and distinct
columns, which keeps every pair of objects at least `min_sep` apart along
both axes; spatial relations are therefore never ambiguous and every
object occupies its own cell of an 8x8 occupancy grid.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

from .dsl import ATTRIBUTE_VALUES, COLORS, DIRECTIONS, MATERIALS, SHAPES, SIZES


@dataclass(frozen=True)
class SceneObject:
    x: float
    y: float
    size: str
    color: str
    material: str
    shape: str

    def attribute(self, name: str) -> str:
        if name not in ATTRIBUTE_VALUES:
            raise KeyError(f"unknown attribute {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[SceneObject, ...]
    scene_id: int = 0

    def __len__(self) -> int:
        return len(self.objects)


class Condition(enum.Enum):
    """Attribute restrictions used for the compositional-split experiments."""

    UNRESTRICTED = "unrestricted"
    A = "A"
    B = "B"


# Under condition A cubes and cylinders draw from disjoint color halves
# (spheres stay free); condition B swaps the halves.
_CUBE_COLORS_A = ("gray", "blue", "brown", "yellow")
_CYLINDER_COLORS_A = ("red", "green", "purple", "cyan")

CONDITION_PALETTES: dict[Condition, dict[str, tuple[str, ...]]] = {
    Condition.UNRESTRICTED: {shape: COLORS for shape in SHAPES},
    Condition.A: {
        "cube": _CUBE_COLORS_A,
        "cylinder": _CYLINDER_COLORS_A,
        "sphere": COLORS,
    },
    Condition.B: {
        "cube": _CYLINDER_COLORS_A,
        "cylinder": _CUBE_COLORS_A,
        "sphere": COLORS,
    },
}


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and population bounds for sampled scenes."""

    width: float = 8.0
    height: float = 8.0
    min_sep: float = 0.6
    min_objects: int = 3
    max_objects: int = 8

    @property
    def cells_x(self) -> int:
        return int(self.width)

    @property
    def cells_y(self) -> int:
        return int(self.height)

    def __post_init__(self) -> None:
        if self.cells_x < 1 or self.cells_y < 1:
            raise ValueError("scene must span at least one unit cell per axis")
        capacity = min(self.cells_x, self.cells_y)
        if not 1 <= self.min_objects <= self.max_objects <= capacity:
            raise ValueError(
                f"object count range [{self.min_objects}, {self.max_objects}] "
                f"must fit the {capacity}-cell lattice"
            )
        # Lattice jitter spans 0.4 of a cell, so same-axis gaps are at
        # least 0.6 cells; min_sep beyond that is unenforceable.
        cell_w = self.width / self.cells_x
        cell_h = self.height / self.cells_y
        if self.min_sep > 0.6 * min(cell_w, cell_h) + 1e-9:
            raise ValueError(f"min_sep {self.min_sep} exceeds lattice guarantee")


DESK_SCENE_CONFIG = SceneConfig()


class SceneSampleError(RuntimeError):
    """Raised when a requested scene cannot be placed."""


def sample_scene(
    rng,
    n_objects: int,
    condition: Condition = Condition.UNRESTRICTED,
    config: SceneConfig = DESK_SCENE_CONFIG,
    scene_id: int = 0,
) -> SceneGraph:
    """Sample a scene with exactly `n_objects` objects.

    Each object gets its own lattice row and column (positions jittered
    inside the central 40% of the cell), so all pairwise separations are
    at least `min_sep` along both axes by construction.  Attributes are
    uniform over their inventories, with colors drawn from the palette
    allowed for the object's shape under `condition`.
    """
    if not config.min_objects <= n_objects <= config.max_objects:
        raise SceneSampleError(
            f"cannot place {n_objects} objects "
            f"(allowed {config.min_objects}..{config.max_objects})"
        )
    cols = rng.permutation(config.cells_x)[:n_objects]
    rows = rng.permutation(config.cells_y)[:n_objects]
    cell_w = config.width / config.cells_x
    cell_h = config.height / config.cells_y
    palettes = CONDITION_PALETTES[condition]
    objects = []
    for col, row in zip(cols, rows):
        x = (float(col) + 0.3 + 0.4 * rng.random()) * cell_w
        y = (float(row) + 0.3 + 0.4 * rng.random()) * cell_h
        shape = SHAPES[rng.integers(len(SHAPES))]
        palette = palettes[shape]
        objects.append(
            SceneObject(
                x=x,
                y=y,
                size=SIZES[rng.integers(len(SIZES))],
                color=palette[rng.integers(len(palette))],
                material=MATERIALS[rng.integers(len(MATERIALS))],
                shape=shape,
            )
        )
    return SceneGraph(tuple(objects), scene_id)


def sample_scenes(
    rng,
    n_scenes: int,
    condition: Condition = Condition.UNRESTRICTED,
    config: SceneConfig = DESK_SCENE_CONFIG,
    first_id: int = 0,
) -> list[SceneGraph]:
    """Sample `n_scenes` scenes with uniformly drawn object counts."""
    scenes = []
    for i in range(n_scenes):
        n = int(rng.integers(config.min_objects, config.max_objects + 1))
        scenes.append(sample_scene(rng, n, condition, config, scene_id=first_id + i))
    return scenes


def relate_set(scene: SceneGraph, index: int, direction: str) -> frozenset[int]:
    """Indices of all objects strictly in `direction` of object `index`.

    Comparisons are strict, so the reference object is never in its own
    relate set, and the left set of A plus the right set of A partition
    the remaining objects whenever no two objects share an x coordinate.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    ref = scene.objects[index]
    out = []
    for j, obj in enumerate(scene.objects):
        if j == index:
            continue
        if direction == "left" and obj.x < ref.x:
            out.append(j)
        elif direction == "right" and obj.x > ref.x:
            out.append(j)
        elif direction == "front" and obj.y > ref.y:
            out.append(j)
        elif direction == "behind" and obj.y < ref.y:
            out.append(j)
    return frozenset(out)


class SceneJSONError(ValueError):
    """Malformed or out-of-contract scene JSON, located by object index."""


def scene_to_json(scene: SceneGraph) -> str:
    """Serialize one scene to a canonical single-line JSON string.

    Positions are written as three-vectors with a zero third coordinate
    for compatibility with renderer-style scene files.
    """
    payload = {
        "scene_id": scene.scene_id,
        "objects": [
            {
                "size": o.size,
                "color": o.color,
                "material": o.material,
                "shape": o.shape,
                "3d_coords": [o.x, o.y, 0.0],
            }
            for o in scene.objects
        ],
    }
    return json.dumps(payload, separators=(", ", ": "))


def scene_from_json(
    text: str,
    config: SceneConfig | None = DESK_SCENE_CONFIG,
) -> SceneGraph:
    """Parse one scene from JSON, validating attributes and bounds.

    The third position coordinate is ignored.  Pass `config=None` to skip
    the bounds check (e.g. for externally rendered scenes on a different
    ground plane).  Errors name the offending object index and field.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneJSONError(f"malformed scene JSON: {exc}") from None
    if not isinstance(payload, dict) or "objects" not in payload:
        raise SceneJSONError("scene JSON must be an object with an 'objects' list")
    scene_id = payload.get("scene_id", payload.get("image_index", 0))
    objects = []
    for i, entry in enumerate(payload["objects"]):
        attrs = {}
        for name, inventory in ATTRIBUTE_VALUES.items():
            value = entry.get(name)
            if value not in inventory:
                raise SceneJSONError(f"objects[{i}].{name}: unknown value {value!r}")
            attrs[name] = value
        coords = entry.get("3d_coords")
        if not isinstance(coords, list) or len(coords) < 2:
            raise SceneJSONError(f"objects[{i}].3d_coords: need at least two coordinates")
        x, y = float(coords[0]), float(coords[1])
        if not (math.isfinite(x) and math.isfinite(y)):
            raise SceneJSONError(f"objects[{i}].3d_coords: non-finite position")
        if config is not None and not (0.0 <= x < config.width and 0.0 <= y < config.height):
            raise SceneJSONError(
                f"objects[{i}].3d_coords: position ({x}, {y}) outside "
                f"[0, {config.width}) x [0, {config.height})"
            )
        objects.append(SceneObject(x=x, y=y, **attrs))
    return SceneGraph(tuple(objects), int(scene_id))


def save_scenes_jsonl(path, scenes: list[SceneGraph]) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(scene_to_json(scene) + "\n")


def load_scenes_jsonl(path, config: SceneConfig | None = DESK_SCENE_CONFIG) -> list[SceneGraph]:
    scenes = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                scenes.append(scene_from_json(line, config))
    return scenes
