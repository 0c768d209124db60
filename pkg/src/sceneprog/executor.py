"""Neural execution of programs over rendered scene feature grids.

Every program token owns a small convolutional module; a program is
executed by composing the modules of its tree bottom-up, so one set of
weights serves every program that mentions the token.  All modules map
C-channel feature grids to C-channel feature grids, which makes any
tree executable regardless of whether the symbolic interpreter would
consider it well typed.  A classifier head reads the root module's
output and scores the full answer vocabulary.

Scenes enter as a one-hot feature grid: each object paints the cell
under its position with its size, color, material, and shape planes
plus an occupancy bit.  Scene geometry guarantees one object per cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .dsl import ATTRIBUTE_VALUES, Program, catalog, parse_prefix, serialize_prefix
from .interpreter import answer_index, answer_vocabulary
from .scenes import SceneGraph

# Input feature planes: occupancy, then one-hot blocks per attribute in
# a fixed order.
_BLOCKS: list[tuple[str, tuple[str, ...]]] = [
    (kind, ATTRIBUTE_VALUES[kind]) for kind in ("size", "color", "material", "shape")
]
FEATURE_CHANNELS = 1 + sum(len(vals) for _, vals in _BLOCKS)


def feature_plane(kind: str, value: str) -> int:
    """Index of the input plane that encodes `value` of attribute `kind`."""
    offset = 1
    for name, values in _BLOCKS:
        if name == kind:
            return offset + values.index(value)
        offset += len(values)
    raise KeyError(f"unknown attribute kind {kind!r}")


@dataclass(frozen=True)
class GridConfig:
    """Spatial and channel layout of the execution engine."""

    cells_x: int = 8
    cells_y: int = 8
    width: float = 8.0
    height: float = 8.0
    channels: int = 16
    classifier_hidden: int = 128

    def __post_init__(self):
        if self.cells_x % 2 or self.cells_y % 2:
            raise ValueError("grid cells must be even for 2x2 pooling")
        if self.cells_x < 2 or self.cells_y < 2:
            raise ValueError("grid must be at least 2x2")


DESK_GRID_CONFIG = GridConfig()


def render_features(scene: SceneGraph, grid: GridConfig = DESK_GRID_CONFIG) -> np.ndarray:
    """Rasterize a scene into a (FEATURE_CHANNELS, cells_y, cells_x) grid."""
    out = np.zeros((FEATURE_CHANNELS, grid.cells_y, grid.cells_x), dtype=np.float32)
    for obj in scene.objects:
        col = min(int(obj.x / grid.width * grid.cells_x), grid.cells_x - 1)
        row = min(int(obj.y / grid.height * grid.cells_y), grid.cells_y - 1)
        out[0, row, col] = 1.0
        for kind in ("size", "color", "material", "shape"):
            out[feature_plane(kind, getattr(obj, kind)), row, col] = 1.0
    return out


# Grid symmetries usable for training-time augmentation.  Flipping the
# rendered grid while renaming the direction parameters of every relate
# token yields an exactly consistent example: objects occupy distinct
# rows and distinct columns, so spatial relations depend only on cell
# indices, which the flip permutes losslessly.  Transposes additionally
# require a square grid.
def _direction_map(k: int) -> dict[str, str]:
    dirs = {d: d for d in ("left", "right", "front", "behind")}

    def swap(a: str, b: str) -> None:
        for key, val in dirs.items():
            if val == a:
                dirs[key] = b
            elif val == b:
                dirs[key] = a

    if k & 1:
        swap("left", "right")
    if k & 2:
        swap("front", "behind")
    if k & 4:
        swap("left", "behind")
        swap("right", "front")
    return dirs


def dihedral_features(feats: np.ndarray, k: int) -> np.ndarray:
    """Apply grid symmetry `k` (0..7) to the last two feature axes."""
    if k & 1:
        feats = np.flip(feats, axis=-1)
    if k & 2:
        feats = np.flip(feats, axis=-2)
    if k & 4:
        feats = np.swapaxes(feats, -1, -2)
    return np.ascontiguousarray(feats)


def dihedral_program(program: Program, k: int) -> Program:
    """Rename direction parameters to match `dihedral_features(.., k)`."""
    if k == 0:
        return program
    dirs = _direction_map(k)
    tokens = [
        f"relate[{dirs[t[7:-1]]}]" if t.startswith("relate[") else t
        for t in serialize_prefix(program)
    ]
    return parse_prefix(tokens)


@dataclass
class EETrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    weight_decay: float = 0.0
    augment: bool = False


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _anchored(rng, shape, dtype, gain: float = 0.5):
    """Center-tap identity plus scaled He noise for a conv kernel.

    Keeps the input planes legible through stacked convolutions from the
    first step: a plain He stack scrambles the sparse one-hot scene
    planes, and the classifier then settles into answer priors before
    any module semantics can form.  The noise keeps different tokens'
    modules distinguishable.  Works for 3x3 and 1x1 kernels; when the
    channel counts differ the identity covers the leading channels.
    """
    w = _he(rng, shape, dtype) * dtype(gain)
    c_out, c_in, kh, kw = shape
    for c in range(min(c_out, c_in)):
        w[c, c, kh // 2, kw // 2] += 1.0
    return w


def _anchored_pair(rng, shape, dtype, gain: float = 0.5):
    """Anchored init for the two-input 1x1 projection: average both."""
    w = _he(rng, shape, dtype) * dtype(gain)
    c_out, c_in, _, _ = shape
    half = c_in // 2
    for c in range(min(c_out, half)):
        w[c, c, 0, 0] += 0.5
        w[c, half + c, 0, 0] += 0.5
    return w


class ExecutionEngine:
    """Composable per-token modules plus an answer classifier."""

    def __init__(self, grid: GridConfig = DESK_GRID_CONFIG, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.grid = grid
        self.answers = answer_vocabulary()
        self.store = ParamStore(dtype=dtype)
        c = grid.channels
        p = self.store.parameter
        for spec in catalog():
            m = f"mod.{spec.token}"
            if spec.arity == 0:
                # The stem: deep enough to mix attribute planes spatially.
                p(f"{m}.w1", _anchored(rng, (c, FEATURE_CHANNELS, 3, 3), dtype))
                p(f"{m}.b1", np.zeros(c, dtype=dtype))
                for i in (2, 3, 4):
                    p(f"{m}.w{i}", _anchored(rng, (c, c, 3, 3), dtype))
                    p(f"{m}.b{i}", np.zeros(c, dtype=dtype))
            else:
                if spec.arity == 2:
                    p(f"{m}.wp", _anchored_pair(rng, (c, 2 * c, 1, 1), dtype))
                    p(f"{m}.bp", np.zeros(c, dtype=dtype))
                p(f"{m}.w1", _he(rng, (c, c, 3, 3), dtype))
                p(f"{m}.b1", np.zeros(c, dtype=dtype))
                p(f"{m}.w2", _he(rng, (c, c, 3, 3), dtype))
                p(f"{m}.b2", np.zeros(c, dtype=dtype))
        hidden = grid.classifier_hidden
        flat = 4 * c * (grid.cells_y // 2) * (grid.cells_x // 2)
        p("cls.conv.w", _he(rng, (4 * c, c, 1, 1), dtype))
        p("cls.conv.b", np.zeros(4 * c, dtype=dtype))
        p("cls.fc1.w", _he(rng, (flat, hidden), dtype))
        p("cls.fc1.b", np.zeros(hidden, dtype=dtype))
        # Near-zero head so untrained predictions are near-uniform.
        p("cls.fc2.w", ad.small_normal(rng, (hidden, len(self.answers)), dtype=dtype))
        p("cls.fc2.b", np.zeros(len(self.answers), dtype=dtype))

    # -- module application ---------------------------------------------------

    def _residual(self, prefix: str, x: Tensor, conv) -> Tensor:
        s = self.store
        y = ad.relu(conv(x, s[f"{prefix}.w1"], s[f"{prefix}.b1"]))
        y = conv(y, s[f"{prefix}.w2"], s[f"{prefix}.b2"])
        return ad.relu(ad.add(x, y))

    def _apply(self, spec, inputs: list[Tensor], features: Tensor) -> Tensor:
        batched = features.data.ndim == 4
        conv = ad.conv2d_batch if batched else ad.conv2d
        m = f"mod.{spec.token}"
        s = self.store
        if spec.arity == 0:
            x = ad.relu(conv(features, s[f"{m}.w1"], s[f"{m}.b1"]))
            for i in (2, 3, 4):
                x = ad.relu(conv(x, s[f"{m}.w{i}"], s[f"{m}.b{i}"]))
            return x
        if spec.arity == 1:
            return self._residual(m, inputs[0], conv)
        both = ad.concat(inputs, axis=1 if batched else 0)
        x = ad.relu(conv(both, s[f"{m}.wp"], s[f"{m}.bp"]))
        return self._residual(m, x, conv)

    def assemble(self, program: Program):
        """Postorder module plan; its length equals the program size."""
        plan = []

        def post(node):
            for child in node.children:
                post(child)
            plan.append(node.spec)

        post(program)
        return plan

    def _forward_with_root(self, features, program: Program) -> tuple[Tensor, Tensor]:
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.store.dtype))
        batched = features.data.ndim == 4
        stack: list[Tensor] = []
        for spec in self.assemble(program):
            args = []
            if spec.arity:
                args = stack[-spec.arity :]
                del stack[-spec.arity :]
            stack.append(self._apply(spec, args, features))
        root = stack.pop()
        s = self.store
        if batched:
            y = ad.relu(ad.conv2d_batch(root, s["cls.conv.w"], s["cls.conv.b"]))
            y = ad.maxpool2x2_batch(y)
            y = ad.reshape(y, (features.data.shape[0], -1))
        else:
            y = ad.relu(ad.conv2d(root, s["cls.conv.w"], s["cls.conv.b"]))
            y = ad.maxpool2x2(y)
            y = ad.reshape(y, (1, -1))
        y = ad.relu(ad.linear(y, s["cls.fc1.w"], s["cls.fc1.b"]))
        return ad.linear(y, s["cls.fc2.w"], s["cls.fc2.b"]), root

    def forward(self, features, program: Program) -> Tensor:
        """Execute the program over rendered features.

        `features` is one rendered grid (C, H, W) or a stack (B, C, H, W)
        of grids all running the same program; logits come back with one
        row per instance.
        """
        return self._forward_with_root(features, program)[0]

    def loss(self, features, program: Program, answer: str) -> Tensor:
        logits = self.forward(features, program)
        return ad.softmax_cross_entropy(logits, np.array([answer_index()[answer]]))

    def loss_batch(self, features, program: Program, answers: list[str]) -> Tensor:
        """Mean cross-entropy for one program over stacked feature grids."""
        logits = self.forward(features, program)
        targets = np.array([answer_index()[a] for a in answers])
        return ad.softmax_cross_entropy(logits, targets)

    def predict(self, scene: SceneGraph, program: Program) -> str:
        with ad.no_grad():
            logits = self.forward(render_features(scene, self.grid), program)
        return self.answers[int(np.argmax(logits.data[0]))]

    def predict_probs(self, scene: SceneGraph, program: Program) -> np.ndarray:
        with ad.no_grad():
            logits = self.forward(render_features(scene, self.grid), program)
        return ad.softmax_probs(logits.data, axis=1)[0]

    # -- training -------------------------------------------------------------

    def _rendered(self, scene: SceneGraph, cache: dict) -> np.ndarray:
        feats = cache.get(id(scene))
        if feats is None:
            feats = render_features(scene, self.grid)
            cache[id(scene)] = feats
        return feats

    def _grouped(self, triples, indices, cache, ks=None):
        """Split the chosen triples into groups sharing one program tree.

        `ks` optionally assigns grid symmetries by triple index; each
        group adopts its first member's symmetry and comes back
        transformed.  Sharing one symmetry per group keeps the stacked
        forward passes large; fresh draws every epoch still cycle each
        scene through all orientations.
        """
        groups: dict[tuple, list[int]] = {}
        for i in indices:
            key = tuple(serialize_prefix(triples[i][1]))
            groups.setdefault(key, []).append(i)
        out = []
        for members in groups.values():
            program = triples[members[0]][1]
            feats = np.stack([self._rendered(triples[i][0], cache) for i in members])
            k = 0 if ks is None else int(ks[members[0]])
            if k:
                program = dihedral_program(program, k)
                feats = dihedral_features(feats, k)
            answers = [triples[i][2] for i in members]
            out.append((program, feats, answers))
        return out

    def predict_batch(self, pairs) -> list[str]:
        """Predicted answer per (scene, program) pair, batched by tree."""
        out: list[str] = [""] * len(pairs)
        cache: dict = {}
        groups: dict[tuple, list[int]] = {}
        for i, (_, program) in enumerate(pairs):
            groups.setdefault(tuple(serialize_prefix(program)), []).append(i)
        for members in groups.values():
            program = pairs[members[0]][1]
            feats = np.stack([self._rendered(pairs[i][0], cache) for i in members])
            with ad.no_grad():
                logits = self.forward(feats, program)
            for i, k in zip(members, logits.data.argmax(axis=1)):
                out[i] = self.answers[int(k)]
        return out

    def accuracy(self, triples) -> float:
        """Triples are (scene, program, answer string)."""
        if not triples:
            return 0.0
        predicted = self.predict_batch([(s, p) for s, p, _ in triples])
        return sum(p == a for p, (_, _, a) in zip(predicted, triples)) / len(triples)

    def train(self, train_triples, val_triples, hyper: EETrainConfig, log=None):
        """Adam over accumulated per-program-group gradients.

        Each batch is partitioned into groups sharing a program tree;
        every group runs as one stacked forward pass, and the batch mean
        gradient accumulates before each optimizer step.  Early-stops on
        validation accuracy and restores the best parameters.
        """
        rng = np.random.default_rng(hyper.seed)
        cache: dict = {}
        history = {"train_loss": [], "val_acc": []}
        best_acc, best_state, best_epoch = -1.0, None, -1
        n_sym = 8 if self.grid.cells_x == self.grid.cells_y else 4
        step = 0
        for epoch in range(hyper.max_epochs):
            order = rng.permutation(len(train_triples))
            ks = rng.integers(n_sym, size=len(train_triples)) if hyper.augment else None
            for lo in range(0, len(order), hyper.batch_size):
                chosen = order[lo : lo + hyper.batch_size]
                self.store.zero_grads()
                total = 0.0
                for program, feats, answers in self._grouped(
                    train_triples, chosen, cache, ks
                ):
                    share = len(answers) / len(chosen)
                    loss = ad.scale(self.loss_batch(feats, program, answers), share)
                    ad.backward(loss)
                    total += loss.item()
                ad.adam_step(
                    self.store,
                    self.store.gradients(),
                    lr=hyper.lr,
                    weight_decay=hyper.weight_decay,
                )
                step += 1
                history["train_loss"].append((step, total))
                if log:
                    log("train_ee", step, "train", "loss", total)
            acc = self.accuracy(val_triples)
            history["val_acc"].append((epoch, acc))
            if log:
                log("train_ee", step, "val", "accuracy", acc)
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_state = {k: v.copy() for k, v in self.store.state().items()}
                if best_acc == 1.0:
                    break
            elif epoch - best_epoch >= hyper.patience:
                break
        if best_state is not None:
            self.store.load_state(best_state)
        history["best_acc"] = best_acc
        return history

    # -- inspection -----------------------------------------------------------

    def saliency(self, scene: SceneGraph, program: Program) -> np.ndarray:
        """Per-cell influence map: gradient of the summed answer scores
        with respect to the root module's feature map, L2-normed over
        channels; shape (cells_y, cells_x)."""
        feats = render_features(scene, self.grid)
        logits, root = self._forward_with_root(feats, program)
        ad.backward(ad.tsum(logits))
        grad = root.grad
        self.store.zero_grads()  # keep inspection from polluting training state
        return np.sqrt((grad * grad).sum(axis=0))

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.store.state())
        sidecar = {
            "grid": {
                "cells_x": self.grid.cells_x,
                "cells_y": self.grid.cells_y,
                "width": self.grid.width,
                "height": self.grid.height,
                "channels": self.grid.channels,
                "classifier_hidden": self.grid.classifier_hidden,
            }
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=1)

    @classmethod
    def load(cls, path) -> "ExecutionEngine":
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
        engine = cls(GridConfig(**sidecar["grid"]), np.random.default_rng(0))
        engine.store.load_state(ad.load_checkpoint(path))
        return engine
