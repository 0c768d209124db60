"""Sequence-to-sequence program generation from question word sequences.

A two-layer LSTM encoder reads the question; its final states become
the decoder's initial states, and its final top-layer hidden state is
also fed to the decoder at every step, concatenated with the embedding
of the previous token.  Decoding is greedy or sampled; either way the
produced token sequence may be ragged, and the prefix parser's repair
rules (scene padding, trailing-token discard) turn it into a
syntactically valid program.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .dsl import catalog, parse_prefix

PAD = "<pad>"
UNK = "<unk>"
START = "<start>"
END = "<end>"


class Vocab:
    """A fixed word-to-id table with a stable order."""

    def __init__(self, words: list[str], unk: str | None = None):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("vocabulary entries must be unique")
        self.unk = unk

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        i = self.index.get(word)
        if i is None:
            if self.unk is None:
                raise KeyError(f"word {word!r} not in vocabulary")
            return self.index[self.unk]
        return i

    def word(self, i: int) -> str:
        return self.words[i]

    @classmethod
    def for_questions(cls, questions) -> "Vocab":
        """Build from training questions; ids 0/1 are pad/unknown."""
        seen: dict[str, None] = {}
        for q in questions:
            for w in q:
                seen.setdefault(w, None)
        return cls([PAD, UNK] + sorted(seen), unk=UNK)

    @classmethod
    def for_programs(cls) -> "Vocab":
        """The program-side vocabulary: specials plus the full catalog."""
        return cls([PAD, START, END] + [s.token for s in catalog()])


@dataclass(frozen=True)
class Seq2SeqConfig:
    d_embed: int = 64
    d_hidden: int = 128
    n_layers: int = 2
    max_len: int = 30


@dataclass
class SupervisedConfig:
    lr: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 8
    seed: int = 0


def pad_batch(seqs: list[list[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences into a (B, T) matrix plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    t = max(1, int(lengths.max()) if len(seqs) else 1)
    out = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def program_exact_match(predicted: list[str], target: list[str]) -> bool:
    """Tree equality after repair, so equivalent serializations match."""
    return parse_prefix(predicted) == parse_prefix(target)


@dataclass
class Encoding:
    """Encoder output for a batch of questions.

    `vec` is the final top-layer hidden state, (B, d_hidden); `states`
    holds the final (h, c) of every encoder layer, which seed the
    decoder's state.
    """

    vec: Tensor
    states: list[tuple[Tensor, Tensor]]

    @property
    def batch_size(self) -> int:
        return self.vec.data.shape[0]


class ProgramGenerator:
    """Encoder-decoder model mapping questions to program token sequences."""

    def __init__(self, qvocab: Vocab, cfg: Seq2SeqConfig, rng, dtype=np.float32):
        self.qvocab = qvocab
        self.pvocab = Vocab.for_programs()
        self.cfg = cfg
        self.store = ParamStore(dtype=dtype)
        e, h = cfg.d_embed, cfg.d_hidden
        p = self.store.parameter
        # Unit-scale embeddings; weaker init starves the encoder gradient
        # and stalls context conditioning for hundreds of epochs.
        p("enc.embed", rng.standard_normal((len(qvocab), e)))
        for layer in range(cfg.n_layers):
            d_in = e if layer == 0 else h
            self._lstm_params(rng, f"enc.l{layer}", d_in, h)
        p("dec.embed", rng.standard_normal((len(self.pvocab), e)))
        for layer in range(cfg.n_layers):
            d_in = e + h if layer == 0 else h
            self._lstm_params(rng, f"dec.l{layer}", d_in, h)
        # Near-zero output head: the first predictions are near-uniform.
        p("dec.out.w", ad.small_normal(rng, (h, len(self.pvocab))))
        p("dec.out.b", np.zeros(len(self.pvocab)))

        self._pad_q = qvocab.id(PAD)
        self._start = self.pvocab.id(START)
        self._end = self.pvocab.id(END)
        self._pad_p = self.pvocab.id(PAD)
        # Decoders never emit padding or a second start marker.
        self._decode_mask = np.zeros(len(self.pvocab), dtype=dtype)
        self._decode_mask[self._start] = -1e9
        self._decode_mask[self._pad_p] = -1e9

    def _lstm_params(self, rng, prefix: str, d_in: int, h: int) -> None:
        self.store.parameter(f"{prefix}.wx", ad.glorot(rng, (d_in, 4 * h)))
        self.store.parameter(f"{prefix}.wh", ad.glorot(rng, (h, 4 * h)))
        b = np.zeros(4 * h, dtype=np.float32)
        b[h : 2 * h] = 1.0  # open forget gates at the start of training
        self.store.parameter(f"{prefix}.b", b)

    # -- encoding -----------------------------------------------------------

    def question_ids(self, words) -> list[int]:
        if not words:
            raise ValueError("cannot encode an empty question")
        return [self.qvocab.id(w) for w in words]

    def _run_encoder(self, ids: np.ndarray, lengths: np.ndarray) -> Encoding:
        b, t = ids.shape
        h = self.cfg.d_hidden
        s = self.store
        embeds = ad.embedding_lookup(s["enc.embed"], ids)  # (B, T, E)
        states = [
            (Tensor(np.zeros((b, h), dtype=s.dtype)), Tensor(np.zeros((b, h), dtype=s.dtype)))
            for _ in range(self.cfg.n_layers)
        ]
        for step in range(t):
            x = ad.narrow(embeds, 1, step, 1)
            x = ad.reshape(x, (b, self.cfg.d_embed))
            alive = (step < lengths).astype(s.dtype)[:, None]
            keep = Tensor(1.0 - alive)
            gate = Tensor(alive)
            for layer in range(self.cfg.n_layers):
                h_old, c_old = states[layer]
                h_new, c_new = ad.lstm_cell(
                    x, h_old, c_old,
                    s[f"enc.l{layer}.wx"], s[f"enc.l{layer}.wh"], s[f"enc.l{layer}.b"],
                )
                # Padded steps keep their previous state.
                h_step = ad.add(ad.mul(h_new, gate), ad.mul(h_old, keep))
                c_step = ad.add(ad.mul(c_new, gate), ad.mul(c_old, keep))
                states[layer] = (h_step, c_step)
                x = h_step
        return Encoding(vec=states[-1][0], states=states)

    def encode_batch(self, questions: list[list[str]]) -> Encoding:
        """Encode a batch of questions; `.vec` is (B, d_hidden)."""
        ids, lengths = pad_batch([self.question_ids(q) for q in questions], self._pad_q)
        return self._run_encoder(ids, lengths)

    def encode(self, question: list[str]) -> Encoding:
        """Encode one question (batch of one)."""
        return self.encode_batch([question])

    # -- decoding -----------------------------------------------------------

    def _decoder_step(self, tok_ids: np.ndarray, context: Tensor, states):
        s = self.store
        prev = ad.embedding_lookup(s["dec.embed"], tok_ids)  # (B, E)
        x = ad.concat([prev, context], axis=1)
        for layer in range(self.cfg.n_layers):
            h_old, c_old = states[layer]
            h_new, c_new = ad.lstm_cell(
                x, h_old, c_old,
                s[f"dec.l{layer}.wx"], s[f"dec.l{layer}.wh"], s[f"dec.l{layer}.b"],
            )
            states[layer] = (h_new, c_new)
            x = h_new
        return ad.linear(x, s["dec.out.w"], s["dec.out.b"]), states

    def teacher_forced_loss(self, questions: list[list[str]], programs: list[list[str]]) -> Tensor:
        """Mean per-token cross-entropy with teacher forcing."""
        enc = self.encode_batch(questions)
        context = enc.vec
        prog_ids = [[self.pvocab.id(t) for t in p] for p in programs]
        inputs, _ = pad_batch([[self._start] + p for p in prog_ids], self._pad_p)
        targets, tlens = pad_batch([p + [self._end] for p in prog_ids], self._pad_p)
        t = targets.shape[1]
        states = list(enc.states)
        losses = []
        for step in range(t):
            logits, states = self._decoder_step(inputs[:, step], context, states)
            weights = (step < tlens).astype(self.store.dtype)
            losses.append(
                ad.scale(ad.softmax_cross_entropy(logits, targets[:, step], weights), float(weights.sum()))
            )
        total = losses[0]
        for piece in losses[1:]:
            total = ad.add(total, piece)
        return ad.scale(total, 1.0 / float(tlens.sum()))

    def decode_argmax(self, enc: Encoding) -> list[list[str]]:
        """Greedy decoding; ties broken toward the lowest token index."""
        b = enc.batch_size
        context = enc.vec
        states = list(enc.states)
        tokens: list[list[str]] = [[] for _ in range(b)]
        prev = np.full(b, self._start, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        with ad.no_grad():
            for _ in range(self.cfg.max_len):
                logits, states = self._decoder_step(prev, context, states)
                chosen = (logits.data + self._decode_mask).argmax(axis=1)
                for i in range(b):
                    if done[i]:
                        continue
                    if chosen[i] == self._end:
                        done[i] = True
                    else:
                        tokens[i].append(self.pvocab.word(int(chosen[i])))
                if done.all():
                    break
                prev = chosen
        return tokens

    def decode_sample(self, enc: Encoding, rng, record_tape: bool = False):
        """Sample token sequences from the per-step softmax.

        Returns (token lists, per-sequence log-probability).  With
        `record_tape` the log-probabilities come back as a (B,) Tensor on
        the live tape so a policy-gradient loss can backpropagate through
        them; otherwise they are a plain numpy vector.
        """
        b = enc.batch_size
        context = enc.vec
        states = list(enc.states)
        tokens: list[list[str]] = [[] for _ in range(b)]
        prev = np.full(b, self._start, dtype=np.int64)
        alive = np.ones(b, dtype=self.store.dtype)
        step_logps = []
        for _ in range(self.cfg.max_len):
            logits, states = self._decoder_step(prev, context, states)
            masked = ad.add(logits, Tensor(self._decode_mask))
            probs = ad.softmax_probs(masked.data, axis=1)
            cdf = probs.cumsum(axis=1)
            draws = rng.random(b)
            chosen = np.minimum(
                (draws[:, None] > cdf).sum(axis=1), probs.shape[1] - 1
            ).astype(np.int64)
            logp = ad.gather_rows(ad.log_softmax(masked, axis=1), chosen)
            step_logps.append(ad.mul(logp, Tensor(alive.copy())))
            for i in range(b):
                if alive[i] and chosen[i] != self._end:
                    tokens[i].append(self.pvocab.word(int(chosen[i])))
            alive = alive * (chosen != self._end)
            if not alive.any():
                break
            prev = chosen
        total = step_logps[0]
        for piece in step_logps[1:]:
            total = ad.add(total, piece)
        if record_tape:
            return tokens, total
        return tokens, total.data.copy()

    def sequence_logp(self, enc: Encoding, token_lists: list[list[str]]) -> np.ndarray:
        """Log-probability the sampler would assign to given sequences.

        Teacher-forces each sequence (plus the end marker) through the
        decoder with the same logit masking the sampler uses.  A sequence
        already at the length cap is truncated, not terminated, so no end
        marker is scored for it.
        """
        context = enc.vec
        ids = [
            [self.pvocab.id(t) for t in toks]
            + ([] if len(toks) >= self.cfg.max_len else [self._end])
            for toks in token_lists
        ]
        inputs, _ = pad_batch([[self._start] + seq[:-1] for seq in ids], self._pad_p)
        targets, tlens = pad_batch(ids, self._pad_p)
        b, t = targets.shape
        states = list(enc.states)
        total = np.zeros(b, dtype=np.float64)
        with ad.no_grad():
            for step in range(t):
                logits, states = self._decoder_step(inputs[:, step], context, states)
                masked = logits.data + self._decode_mask
                logp = masked - masked.max(axis=1, keepdims=True)
                logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
                live = step < tlens
                total[live] += logp[live, targets[live, step]]
        return total

    def predict(self, question: list[str]) -> list[str]:
        return self.decode_argmax(self.encode(question))[0]

    # -- training -----------------------------------------------------------

    def exact_match(self, pairs, batch_size: int = 64) -> float:
        """Fraction of questions whose decoded program matches after repair."""
        if not pairs:
            return 0.0
        hits = 0
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo : lo + batch_size]
            with ad.no_grad():
                decoded = self.decode_argmax(self.encode_batch([q for q, _ in chunk]))
            hits += sum(
                program_exact_match(d, list(p)) for d, (_, p) in zip(decoded, chunk)
            )
        return hits / len(pairs)

    def train_supervised(self, train_pairs, val_pairs, hyper: SupervisedConfig, log=None):
        """Adam on teacher-forced cross-entropy with early stopping.

        `train_pairs` and `val_pairs` are (question words, program tokens)
        lists.  Stops when validation exact match has not improved for
        `hyper.patience` epochs and restores the best parameters.
        """
        rng = np.random.default_rng(hyper.seed)
        history = {"train_loss": [], "val_em": []}
        best_em, best_state, best_epoch = -1.0, None, -1
        step = 0
        for epoch in range(hyper.max_epochs):
            order = rng.permutation(len(train_pairs))
            for lo in range(0, len(order), hyper.batch_size):
                batch = [train_pairs[i] for i in order[lo : lo + hyper.batch_size]]
                self.store.zero_grads()
                loss = self.teacher_forced_loss([q for q, _ in batch], [list(p) for _, p in batch])
                ad.backward(loss)
                ad.adam_step(self.store, self.store.gradients(), lr=hyper.lr)
                step += 1
                history["train_loss"].append((step, loss.item()))
                if log:
                    log("train_pg", step, "train", "loss", loss.item())
            em = self.exact_match(val_pairs)
            history["val_em"].append((epoch, em))
            if log:
                log("train_pg", step, "val", "exact_match", em)
            if em > best_em:
                best_em, best_epoch = em, epoch
                best_state = {k: v.copy() for k, v in self.store.state().items()}
                if best_em == 1.0:
                    break
            elif epoch - best_epoch >= hyper.patience:
                break
        if best_state is not None:
            self.store.load_state(best_state)
        history["best_em"] = best_em
        return history

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.store.state())
        sidecar = {
            "question_vocab": self.qvocab.words,
            "config": {
                "d_embed": self.cfg.d_embed,
                "d_hidden": self.cfg.d_hidden,
                "n_layers": self.cfg.n_layers,
                "max_len": self.cfg.max_len,
            },
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=1)

    @classmethod
    def load(cls, path) -> "ProgramGenerator":
        with open(str(path) + ".json") as fh:
            sidecar = json.load(fh)
        cfg = Seq2SeqConfig(**sidecar["config"])
        qvocab = Vocab(sidecar["question_vocab"], unk=UNK)
        model = cls(qvocab, cfg, np.random.default_rng(0))
        model.store.load_state(ad.load_checkpoint(path))
        return model

    def extend_question_vocab(self, questions, rng) -> int:
        """Grow the question vocabulary with unseen words (new embedding
        rows randomly initialized); returns how many were added."""
        new_words = []
        for q in questions:
            for w in q:
                if w not in self.qvocab and w not in new_words:
                    new_words.append(w)
        if not new_words:
            return 0
        self.qvocab = Vocab(self.qvocab.words + new_words, unk=UNK)
        table = self.store["enc.embed"]
        extra = rng.standard_normal((len(new_words), self.cfg.d_embed)).astype(self.store.dtype)
        table.data = np.concatenate([table.data, extra], axis=0)
        for moments in (self.store._m, self.store._v):
            if "enc.embed" in moments:
                pad = np.zeros_like(extra)
                moments["enc.embed"] = np.concatenate([moments["enc.embed"], pad], axis=0)
        return len(new_words)
