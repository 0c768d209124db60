"""Execution engine tests: rendering, module composition, training."""
import numpy as np
import pytest

from sceneprog import autodiff as ad
from sceneprog.dsl import ATTRIBUTE_VALUES, catalog, parse_prefix
from sceneprog.executor import (
    DESK_GRID_CONFIG,
    EETrainConfig,
    ExecutionEngine,
    FEATURE_CHANNELS,
    GridConfig,
    feature_plane,
    render_features,
)
from sceneprog.interpreter import answer_vocabulary, execute
from sceneprog.scenes import SceneGraph, SceneObject, sample_scene
from sceneprog.templates import DatasetConfig, generate_dataset


def _obj(x, y, size="small", color="red", material="rubber", shape="cube"):
    return SceneObject(x=x, y=y, size=size, color=color, material=material, shape=shape)


@pytest.fixture(scope="module")
def engine():
    return ExecutionEngine(rng=np.random.default_rng(1))


def test_feature_planes_are_distinct_and_cover_all_values():
    planes = set()
    for kind, values in ATTRIBUTE_VALUES.items():
        for v in values:
            planes.add(feature_plane(kind, v))
    assert planes == set(range(1, FEATURE_CHANNELS))
    with pytest.raises(KeyError):
        feature_plane("weight", "heavy")


def test_render_places_objects_in_their_cells():
    scene = SceneGraph(
        objects=(
            _obj(0.5, 0.5),
            _obj(7.5, 7.5, size="large", color="blue", material="metal", shape="sphere"),
        )
    )
    feats = render_features(scene)
    assert feats.shape == (FEATURE_CHANNELS, 8, 8)
    assert feats[0, 0, 0] == 1.0 and feats[0, 7, 7] == 1.0
    assert feats[0].sum() == 2
    assert feats[feature_plane("color", "red"), 0, 0] == 1.0
    assert feats[feature_plane("shape", "sphere"), 7, 7] == 1.0
    assert feats[feature_plane("material", "metal"), 0, 0] == 0.0
    # One occupancy plus four attribute planes per object.
    assert feats.sum() == 10.0


def test_render_respects_grid_shape():
    scene = SceneGraph(objects=(_obj(7.9, 0.1),))
    feats = render_features(scene, GridConfig(cells_x=4, cells_y=4))
    assert feats.shape == (FEATURE_CHANNELS, 4, 4)
    assert feats[0, 0, 3] == 1.0


def test_grid_config_rejects_odd_cells():
    with pytest.raises(ValueError):
        GridConfig(cells_x=7)


def test_assemble_is_postorder_and_sized(engine):
    prog = parse_prefix(
        ["exist", "intersect", "filter_color[red]", "scene", "filter_shape[cube]", "scene"]
    )
    plan = engine.assemble(prog)
    assert len(plan) == prog.size() == 6
    tokens = [s.token for s in plan]
    assert tokens[0] == "scene" and tokens[-1] == "exist"
    assert tokens.index("filter_color[red]") < tokens.index("intersect")


def test_every_token_owns_one_module(engine):
    names = engine.store.names()
    for spec in catalog():
        assert f"mod.{spec.token}.w1" in names
        if spec.arity == 2:
            assert f"mod.{spec.token}.wp" in names
    assert "cls.fc2.w" in names


def test_forward_shapes_and_probs(engine):
    scene = sample_scene(np.random.default_rng(0), 5)
    prog = parse_prefix(["count", "filter_color[red]", "scene"])
    logits = engine.forward(render_features(scene), prog)
    assert logits.data.shape == (1, len(answer_vocabulary()))
    probs = engine.predict_probs(scene, prog)
    assert abs(probs.sum() - 1.0) < 1e-5
    assert engine.predict(scene, prog) in answer_vocabulary()


def test_repeated_tokens_share_weights(engine):
    # Same module twice in one tree: parameters exist once per token.
    prog = parse_prefix(["union", "filter_color[red]", "scene", "filter_color[red]", "scene"])
    n_scene = sum(1 for n in engine.store.names() if n.startswith("mod.scene."))
    logits = engine.forward(render_features(sample_scene(np.random.default_rng(2), 4)), prog)
    assert logits.data.shape[1] == len(answer_vocabulary())
    assert n_scene == 8  # four convs, one weight and bias each


def test_ill_typed_trees_still_execute(engine):
    # The interpreter rejects this; uniform modules do not care.
    prog = parse_prefix(["count", "count", "scene"])
    scene = sample_scene(np.random.default_rng(3), 4)
    assert execute(prog, scene) == "error"
    assert engine.predict(scene, prog) in answer_vocabulary()


def test_initial_loss_near_uniform():
    eng = ExecutionEngine(rng=np.random.default_rng(7))
    rng = np.random.default_rng(8)
    losses = []
    prog = parse_prefix(["query_color", "unique", "filter_shape[cube]", "scene"])
    for _ in range(5):
        scene = sample_scene(rng, 5)
        losses.append(eng.loss(render_features(scene), prog, "red").item())
    expected = np.log(len(answer_vocabulary()))
    assert abs(np.mean(losses) - expected) < 0.1 * expected


def test_end_to_end_gradcheck_float64():
    grid = GridConfig(cells_x=4, cells_y=4, channels=6, classifier_hidden=10)
    eng = ExecutionEngine(grid, np.random.default_rng(11), dtype=np.float64)
    scene = SceneGraph(objects=(_obj(0.5, 0.5), _obj(2.5, 2.5, color="blue")))
    feats = render_features(scene, grid).astype(np.float64)
    prog = parse_prefix(["exist", "filter_color[red]", "scene"])

    def f():
        return eng.loss(feats, prog, "yes")

    names = [
        "mod.scene.w1", "mod.scene.b4",
        "mod.filter_color[red].w1", "mod.filter_color[red].b2",
        "mod.exist.w2", "cls.conv.w", "cls.fc1.w", "cls.fc2.w", "cls.fc2.b",
    ]
    tensors = [eng.store[n] for n in names]
    err = ad.finite_difference_check(f, tensors, max_entries=40, rng=np.random.default_rng(0))
    assert err < 1e-3


def test_overfits_twenty_answers():
    ds = generate_dataset(DatasetConfig(n_scenes=8, questions_per_scene=4), np.random.default_rng(5))
    recs = ds.splits["train"][:20]
    triples = [(ds.scenes[r.scene_id], parse_prefix(list(r.program)), r.answer) for r in recs]
    eng = ExecutionEngine(rng=np.random.default_rng(1))
    hist = eng.train(
        triples, triples, EETrainConfig(lr=1e-3, batch_size=20, max_epochs=60, patience=60, seed=0)
    )
    assert hist["best_acc"] == 1.0
    assert eng.accuracy(triples) == 1.0


def test_training_is_deterministic():
    ds = generate_dataset(DatasetConfig(n_scenes=6, questions_per_scene=3), np.random.default_rng(9))
    recs = ds.splits["train"][:12]
    triples = [(ds.scenes[r.scene_id], parse_prefix(list(r.program)), r.answer) for r in recs]
    states = []
    for _ in range(2):
        eng = ExecutionEngine(rng=np.random.default_rng(4))
        eng.train(triples, triples, EETrainConfig(lr=5e-4, batch_size=6, max_epochs=3, patience=3, seed=2))
        states.append(eng.store.state())
    for name in states[0]:
        assert np.array_equal(states[0][name], states[1][name]), name


def test_saliency_map_properties(engine):
    scene = sample_scene(np.random.default_rng(12), 6)
    prog = parse_prefix(["count", "filter_size[large]", "scene"])
    a = engine.saliency(scene, prog)
    b = engine.saliency(scene, prog)
    assert a.shape == (DESK_GRID_CONFIG.cells_y, DESK_GRID_CONFIG.cells_x)
    assert (a >= 0).all() and a.max() > 0
    assert np.array_equal(a, b)
    # Inspection leaves no gradients behind to corrupt a later step.
    assert all(engine.store[n].grad is None for n in engine.store.names())


def test_accuracy_empty_is_zero(engine):
    assert engine.accuracy([]) == 0.0


def test_save_load_roundtrip(tmp_path, engine):
    path = tmp_path / "ee.ckpt"
    engine.save(path)
    clone = ExecutionEngine.load(path)
    assert clone.grid == engine.grid
    rng = np.random.default_rng(13)
    prog = parse_prefix(["query_shape", "unique", "filter_color[blue]", "scene"])
    for _ in range(3):
        scene = sample_scene(rng, 5)
        assert clone.predict(scene, prog) == engine.predict(scene, prog)
        assert np.array_equal(clone.predict_probs(scene, prog), engine.predict_probs(scene, prog))
