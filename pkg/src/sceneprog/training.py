"""Training schedules joining the program generator and execution engine.

Covers the three-phase schedule (supervised generator, engine on
predicted programs, policy-gradient joint finetuning), evaluation
tables, the majority-answer baseline, and the experiment drivers for
the supervision ladder, the attribute-split transfer runs, and the
short/long family split.

Phases two and three are program-free by contract: they see the
datasets through a guard that counts reads of the program field, and
the pipeline asserts the count stays zero.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsl import Program, parse_prefix, serialize_prefix
from .executor import EETrainConfig, ExecutionEngine
from .interpreter import answer_vocabulary, execute
from .scenes import SceneGraph
from .seq2seq import ProgramGenerator, SupervisedConfig, program_exact_match
from .templates import QARecord, QTYPES, split_short_long


# ---------------------------------------------------------------------------
# run logging


class RunLog:
    """Append-only JSONL event log shared by every training phase.

    Rows carry {phase, step, split, metric, value, wall_time}.  In
    deterministic mode wall times are written as 0.0 so logs from equal
    (config, seed) runs are byte-identical.
    """

    def __init__(self, path=None, deterministic: bool = False):
        self.path = path
        self.deterministic = deterministic
        self.rows: list[dict] = []
        self._t0 = time.monotonic()
        self._fh = open(path, "w") if path else None

    def __call__(self, phase: str, step: int, split: str, metric: str, value) -> None:
        row = {
            "phase": phase,
            "step": int(step),
            "split": split,
            "metric": metric,
            "value": float(value),
            "wall_time": 0.0 if self.deterministic else time.monotonic() - self._t0,
        }
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# program-free access guard


class ProgramAccessCounter:
    def __init__(self):
        self.count = 0


class GuardedRecord:
    """Record view that counts reads of the ground-truth program."""

    __slots__ = ("_record", "_counter")

    def __init__(self, record: QARecord, counter: ProgramAccessCounter):
        object.__setattr__(self, "_record", record)
        object.__setattr__(self, "_counter", counter)

    @property
    def program(self):
        self._counter.count += 1
        return self._record.program

    @property
    def question(self):
        return self._record.question

    @property
    def answer(self):
        return self._record.answer

    @property
    def scene_id(self):
        return self._record.scene_id

    @property
    def family_id(self):
        return self._record.family_id

    @property
    def qtype(self):
        return self._record.qtype


def guard_programs(records) -> tuple[list[GuardedRecord], ProgramAccessCounter]:
    counter = ProgramAccessCounter()
    return [GuardedRecord(r, counter) for r in records], counter


# ---------------------------------------------------------------------------
# shared plumbing

Scenes = dict[int, SceneGraph]


def supervision_pairs(records) -> list[tuple[list[str], list[str]]]:
    """(question words, program tokens) pairs for generator training."""
    return [(list(r.question), list(r.program)) for r in records]


def gt_triples(records, scenes: Scenes):
    """(scene, program, answer) triples from stored ground-truth programs."""
    return [(scenes[r.scene_id], parse_prefix(r.program), r.answer) for r in records]


def decode_programs(pg: ProgramGenerator, records, batch_size: int = 64) -> list[Program]:
    """Argmax-decode one repaired program per record's question."""
    out: list[Program] = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        with ad.no_grad():
            decoded = pg.decode_argmax(pg.encode_batch([list(r.question) for r in chunk]))
        out.extend(parse_prefix(tokens) for tokens in decoded)
    return out


def predicted_triples(pg: ProgramGenerator, records, scenes: Scenes, batch_size: int = 64):
    """(scene, predicted program, answer) triples; never reads stored programs."""
    programs = decode_programs(pg, records, batch_size)
    return [(scenes[r.scene_id], p, r.answer) for r, p in zip(records, programs)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    overall: float
    by_qtype: dict[str, float]
    counts: dict[str, int]
    program_em: float | None = None

    def weighted_mean(self) -> float:
        total = sum(self.counts.values())
        if not total:
            return 0.0
        return sum(self.by_qtype[q] * self.counts[q] for q in self.by_qtype) / total


def evaluate(pg, executor, records, scenes: Scenes, batch_size: int = 64) -> EvalReport:
    """Answer-accuracy table for a generator/executor combination.

    `pg` may be None to execute the stored ground-truth programs
    instead of predictions.  `executor` is an ExecutionEngine or the
    string "oracle" for exact symbolic execution.  Program exact match
    is reported when predictions and stored programs are both present.
    """
    if not records:
        return EvalReport(0.0, {}, {})
    if pg is None:
        programs = [parse_prefix(r.program) for r in records]
        program_em = None
    else:
        programs = decode_programs(pg, records, batch_size)
        program_em = None
        if all(len(r.program) for r in records):
            hits = sum(
                program_exact_match(serialize_prefix(p), list(r.program))
                for p, r in zip(programs, records)
            )
            program_em = hits / len(records)
    if executor == "oracle":
        predicted = [execute(p, scenes[r.scene_id]) for p, r in zip(programs, records)]
    else:
        predicted = executor.predict_batch(
            [(scenes[r.scene_id], p) for r, p in zip(records, programs)]
        )
    hit_by_q: dict[str, int] = {}
    n_by_q: dict[str, int] = {}
    for r, answer in zip(records, predicted):
        q = r.qtype
        n_by_q[q] = n_by_q.get(q, 0) + 1
        hit_by_q[q] = hit_by_q.get(q, 0) + (answer == r.answer)
    by_qtype = {q: hit_by_q[q] / n_by_q[q] for q in sorted(n_by_q)}
    overall = sum(hit_by_q.values()) / len(records)
    return EvalReport(overall, by_qtype, {q: n_by_q[q] for q in sorted(n_by_q)}, program_em)


def qtype_mode_baseline(train_records, test_records) -> EvalReport:
    """Accuracy of predicting each question type's majority train answer.

    Ties break toward the answer earliest in the answer vocabulary.  A
    test type unseen in training falls back to the global majority.
    """
    order = {a: i for i, a in enumerate(answer_vocabulary())}
    counts: dict[str, dict[str, int]] = {}
    overall_counts: dict[str, int] = {}
    for r in train_records:
        counts.setdefault(r.qtype, {})
        counts[r.qtype][r.answer] = counts[r.qtype].get(r.answer, 0) + 1
        overall_counts[r.answer] = overall_counts.get(r.answer, 0) + 1

    def majority(hist: dict[str, int]) -> str:
        return min(hist, key=lambda a: (-hist[a], order[a]))

    fallback = majority(overall_counts)
    modes = {q: majority(hist) for q, hist in counts.items()}
    hit_by_q: dict[str, int] = {}
    n_by_q: dict[str, int] = {}
    for r in test_records:
        q = r.qtype
        n_by_q[q] = n_by_q.get(q, 0) + 1
        hit_by_q[q] = hit_by_q.get(q, 0) + (modes.get(q, fallback) == r.answer)
    by_qtype = {q: hit_by_q[q] / n_by_q[q] for q in sorted(n_by_q)}
    overall = sum(hit_by_q.values()) / max(len(test_records), 1)
    return EvalReport(overall, by_qtype, {q: n_by_q[q] for q in sorted(n_by_q)})


# ---------------------------------------------------------------------------
# reward baseline


class RewardBaseline:
    """Exponential moving average of per-batch mean rewards.

    One update folds a batch mean in as b <- decay*b + (1-decay)*mean,
    so under a constant reward r the estimate after t batches is
    r + (b0 - r) * decay**t: geometric convergence to the mean.
    """

    def __init__(self, decay: float = 0.99, init: float = 0.0):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.decay = decay
        self.value = float(init)

    def update(self, rewards) -> float:
        mean = float(np.mean(rewards))
        self.value = self.decay * self.value + (1.0 - self.decay) * mean
        return self.value


# ---------------------------------------------------------------------------
# engine training on predicted programs


def train_ee_on_predicted(
    pg: ProgramGenerator,
    ee: ExecutionEngine,
    train_records,
    val_records,
    scenes: Scenes,
    hyper: EETrainConfig,
    log=None,
):
    """Train the engine on the generator's argmax programs.

    Decoded programs are repaired by construction, so every one of them
    assembles; the stored program fields are never read.
    """
    train = predicted_triples(pg, train_records, scenes)
    val = predicted_triples(pg, val_records, scenes)
    return ee.train(train, val, hyper, log=log)


# ---------------------------------------------------------------------------
# policy-gradient finetuning


@dataclass
class ReinforceConfig:
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-4
    ee_lr: float = 1e-4
    baseline_decay: float = 0.99
    freeze_ee: bool = True
    clip_norm: float | None = None
    seed: int = 0
    eval_every: int = 0


def _clipped(grads: dict[str, np.ndarray], clip_norm: float | None):
    if clip_norm is None:
        return grads
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total <= clip_norm:
        return grads
    scale = clip_norm / total
    return {k: g * scale for k, g in grads.items()}


def reinforce_finetune(
    pg: ProgramGenerator,
    ee: ExecutionEngine,
    records,
    scenes: Scenes,
    cfg: ReinforceConfig,
    val_records=None,
    log=None,
):
    """Finetune the generator (and optionally the engine) from rewards.

    Per step: sample one program per drawn question, execute it with
    the engine, reward 1 for the stored answer and 0 otherwise, and
    ascend (reward - baseline) * grad log-probability.  When the engine
    is not frozen it takes a cross-entropy step on the samples that
    earned reward.  The baseline folds in one batch mean per step, after
    advantages are computed, so a baseline equal to the reward yields an
    exactly zero update.
    """
    rng = np.random.default_rng(cfg.seed)
    baseline = RewardBaseline(cfg.baseline_decay)
    history = {"reward": [], "baseline": [], "val_acc": []}
    for step in range(cfg.steps):
        drawn = [records[int(i)] for i in rng.integers(0, len(records), size=cfg.batch_size)]
        enc = pg.encode_batch([list(r.question) for r in drawn])
        tokens, logps = pg.decode_sample(enc, rng, record_tape=True)
        programs = [parse_prefix(t) for t in tokens]
        predicted = ee.predict_batch(
            [(scenes[r.scene_id], p) for r, p in zip(drawn, programs)]
        )
        rewards = np.array(
            [1.0 if a == r.answer else 0.0 for a, r in zip(predicted, drawn)],
            dtype=np.float64,
        )
        advantage = rewards - baseline.value
        weights = (-advantage / cfg.batch_size).astype(pg.store.dtype)
        loss = ad.tsum(ad.mul(logps, Tensor(weights)))
        pg.store.zero_grads()
        ad.backward(loss)
        ad.adam_step(pg.store, _clipped(pg.store.gradients(), cfg.clip_norm), lr=cfg.lr)
        if not cfg.freeze_ee:
            winners = [
                (scenes[r.scene_id], p, r.answer)
                for r, p, rw in zip(drawn, programs, rewards)
                if rw > 0.0
            ]
            if winners:
                ee.store.zero_grads()
                cache: dict = {}
                for program, feats, answers in ee._grouped(
                    winners, range(len(winners)), cache
                ):
                    share = len(answers) / len(winners)
                    ad.backward(ad.scale(ee.loss_batch(feats, program, answers), share))
                ad.adam_step(ee.store, ee.store.gradients(), lr=cfg.ee_lr)
        mean_reward = float(rewards.mean())
        baseline.update(rewards)
        history["reward"].append(mean_reward)
        history["baseline"].append(baseline.value)
        if log:
            log("finetune", step, "train", "reward", mean_reward)
            log("finetune", step, "train", "baseline", baseline.value)
        if cfg.eval_every and val_records is not None and (step + 1) % cfg.eval_every == 0:
            acc = evaluate(pg, ee, val_records, scenes).overall
            history["val_acc"].append((step, acc))
            if log:
                log("finetune", step, "val", "accuracy", acc)
    return history


# ---------------------------------------------------------------------------
# the three-phase schedule


@dataclass
class ScheduleConfig:
    n_supervised: int = 100
    pg_hyper: SupervisedConfig = field(default_factory=SupervisedConfig)
    ee_hyper: EETrainConfig = field(default_factory=EETrainConfig)
    joint: ReinforceConfig = field(default_factory=ReinforceConfig)


def semi_supervised_pipeline(
    pg: ProgramGenerator,
    ee: ExecutionEngine,
    dataset,
    schedule: ScheduleConfig,
    log=None,
):
    """Supervised generator, engine on predictions, then joint finetuning.

    Ground-truth programs feed phase one only; phases two and three see
    the data through the program-access guard and the pipeline asserts
    the guard never fired.
    """
    train = dataset.splits["train"]
    val = dataset.splits["val"]
    scenes = dataset.scenes
    supervised = train[: schedule.n_supervised]
    pg.train_supervised(
        supervision_pairs(supervised), supervision_pairs(val), schedule.pg_hyper, log=log
    )
    em = pg.exact_match(supervision_pairs(val))
    if log:
        log("train_pg", 0, "val", "exact_match", em)

    guarded_train, counter = guard_programs(train)
    guarded_val = [GuardedRecord(r, counter) for r in val]
    train_ee_on_predicted(
        pg, ee, guarded_train, guarded_val, scenes, schedule.ee_hyper, log=log
    )
    pre = evaluate(pg, ee, val, scenes)
    if log:
        log("train_ee", 0, "val", "accuracy", pre.overall)

    reinforce_finetune(
        pg, ee, guarded_train, scenes, schedule.joint, val_records=val, log=log
    )
    post = evaluate(pg, ee, val, scenes)
    if log:
        log("finetune", schedule.joint.steps, "val", "accuracy", post.overall)
    assert counter.count == 0, "phases two and three read a ground-truth program"
    return {
        "program_em": em,
        "answer_acc_pre": pre.overall,
        "answer_acc_post": post.overall,
        "pre": pre,
        "post": post,
    }


# ---------------------------------------------------------------------------
# experiment drivers


def run_ladder(
    make_pg,
    dataset,
    sizes=(50, 200, 1000, 2000),
    hyper: SupervisedConfig | None = None,
    log=None,
):
    """Held-out program exact match as supervision grows.

    `make_pg` builds a fresh generator per size so runs stay independent.
    Returns one row per size: {n_programs, program_acc}.
    """
    hyper = hyper or SupervisedConfig()
    train = dataset.splits["train"]
    val_pairs = supervision_pairs(dataset.splits["val"])
    rows = []
    for size in sizes:
        pg = make_pg()
        pg.train_supervised(supervision_pairs(train[:size]), val_pairs, hyper, log=log)
        em = pg.exact_match(val_pairs)
        rows.append({"n_programs": size, "program_acc": em})
        if log:
            log("ladder", size, "val", "exact_match", em)
    return rows


def color_query_records(records):
    return [r for r in records if r.qtype == "query_color"]


def run_cogent(
    pg: ProgramGenerator,
    ee: ExecutionEngine,
    dataset_a,
    dataset_b,
    pg_hyper: SupervisedConfig,
    ee_hyper: EETrainConfig,
    finetune_hyper: EETrainConfig,
    log=None,
):
    """Attribute-split transfer: train on condition A, probe condition B.

    The generator and engine train on condition A with full supervision;
    the color-query drop is measured on condition B, then the engine is
    finetuned program-free (predicted programs only) on condition-B data
    and the four train/eval cells are re-measured.
    """
    train_a, val_a = dataset_a.splits["train"], dataset_a.splits["val"]
    train_b, val_b = dataset_b.splits["train"], dataset_b.splits["val"]
    pg.train_supervised(
        supervision_pairs(train_a), supervision_pairs(val_a), pg_hyper, log=log
    )
    ee.train(
        gt_triples(train_a, dataset_a.scenes),
        gt_triples(val_a, dataset_a.scenes),
        ee_hyper,
        log=log,
    )
    cells = {
        "train_a_eval_a": evaluate(pg, ee, val_a, dataset_a.scenes).overall,
        "train_a_eval_b": evaluate(pg, ee, val_b, dataset_b.scenes).overall,
    }
    color_a = evaluate(pg, ee, color_query_records(val_a), dataset_a.scenes).overall
    color_b = evaluate(pg, ee, color_query_records(val_b), dataset_b.scenes).overall

    guarded_b, counter = guard_programs(train_b)
    guarded_val_b = [GuardedRecord(r, counter) for r in val_b]
    train_ee_on_predicted(
        pg, ee, guarded_b, guarded_val_b, dataset_b.scenes, finetune_hyper, log=log
    )
    assert counter.count == 0, "condition-B finetuning read a ground-truth program"
    cells["finetune_b_eval_a"] = evaluate(pg, ee, val_a, dataset_a.scenes).overall
    cells["finetune_b_eval_b"] = evaluate(pg, ee, val_b, dataset_b.scenes).overall
    color_b_post = evaluate(pg, ee, color_query_records(val_b), dataset_b.scenes).overall
    result = {
        **cells,
        "color_query_a": color_a,
        "color_query_b": color_b,
        "color_query_b_post": color_b_post,
    }
    if log:
        for key, value in result.items():
            log("cogent", 0, "val", key, value)
    return result


def run_short_long(
    pg: ProgramGenerator,
    ee: ExecutionEngine,
    dataset,
    pg_hyper: SupervisedConfig,
    ee_hyper: EETrainConfig,
    joint: ReinforceConfig,
    threshold: float = 10.0,
    log=None,
):
    """Family-length transfer: short-supervised generator, mixed finetune.

    The generator trains on short-family pairs only; the engine trains
    on ground-truth programs from the full mixed split and stays frozen.
    Policy-gradient finetuning then runs program-free on mixed data, and
    the short/long evaluation cells are measured before and after.
    """
    train, val = dataset.splits["train"], dataset.splits["val"]
    scenes = dataset.scenes
    short_train, long_train = split_short_long(train, threshold)
    short_val, long_val = split_short_long(val, threshold)
    if not short_train or not long_train:
        raise ValueError(f"threshold {threshold} leaves one side of the split empty")
    pg.train_supervised(
        supervision_pairs(short_train),
        supervision_pairs(short_val),
        pg_hyper,
        log=log,
    )
    ee.train(gt_triples(train, scenes), gt_triples(val, scenes), ee_hyper, log=log)
    cells = {
        "short_eval_short": evaluate(pg, ee, short_val, scenes).overall,
        "short_eval_long": evaluate(pg, ee, long_val, scenes).overall,
    }
    guarded, counter = guard_programs(train)
    joint = replace(joint, freeze_ee=True)
    reinforce_finetune(pg, ee, guarded, scenes, joint, val_records=val, log=log)
    assert counter.count == 0, "mixed finetuning read a ground-truth program"
    cells["mixed_eval_short"] = evaluate(pg, ee, short_val, scenes).overall
    cells["mixed_eval_long"] = evaluate(pg, ee, long_val, scenes).overall
    if log:
        for key, value in cells.items():
            log("short_long", 0, "val", key, value)
    return cells
