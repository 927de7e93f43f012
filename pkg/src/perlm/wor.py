"""Word-order recovery: synthetic corruption, BIEO labels, tagging, span P/R/F.

A corruption moves exactly one word rightward past its following context.
In the corrupted sentence the span reads [context..., moved word]; context
tokens are labeled B I*, the displaced word's tokens E+, everything else O.
Decoding moves every E+ block back to the front of its span.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import (ConfigurationError, EvaluationError, LabelEncodingError)
from .model import (EncoderState, ModelConfig, packed_encoder_forward,
                    truncated_normal)
from .optim import LrSchedule, adam_step, clip_gradients_by_norm, init_adam_state, lr_at
from .seeding import derive_rng
from .tokenizer import Vocab
from .training import read_arrays, write_arrays

LABELS = ("O", "B", "I", "E")
LABEL_IDS = {label: i for i, label in enumerate(LABELS)}

Word = list[str]  # one word = its tokenizer pieces


@dataclass
class BieoLabeling:
    tokens: list[str]
    labels: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise LabelEncodingError(
                f"{len(self.tokens)} tokens vs {len(self.labels)} labels")
        bad = [l for l in self.labels if l not in LABEL_IDS]
        if bad:
            raise LabelEncodingError(f"labels outside the scheme: {sorted(set(bad))}")


@dataclass
class WorSpan:
    """Token range of one error span; the moved word occupies the tail."""

    start: int
    end: int
    moved_start: int


@dataclass
class WordMove:
    """Word ``index`` moves rightward past the next ``extent`` words."""

    index: int
    extent: int


def corrupt_sentence(words: list[Word], rng: np.random.Generator,
                     max_spans: int = 1, max_extent: int = 3
                     ) -> tuple[list[Word], BieoLabeling] | None:
    """Displace up to max_spans words; returns (corrupted words, labeling).

    Returns None (skip signal) for sentences shorter than 3 words. When no
    valid placement exists the sentence comes back unchanged, labeled all O.
    Chosen spans keep at least one untouched word between them so label
    runs never merge.
    """
    if len(words) < 3:
        return None
    if max_spans < 1:
        raise ConfigurationError(f"max_spans must be >= 1, got {max_spans}")
    wanted = 1 + int(rng.integers(max_spans))
    touched = np.zeros(len(words), dtype=bool)
    moves: list[WordMove] = []
    for index in rng.permutation(len(words) - 1):
        if len(moves) >= wanted:
            break
        index = int(index)
        room = len(words) - 1 - index
        if room < 1:
            continue
        extent = 1 + int(rng.integers(min(max_extent, room)))
        # Guard band of one word on both sides keeps spans non-adjacent.
        lo = max(0, index - 1)
        hi = min(len(words), index + extent + 2)
        if touched[lo:hi].any():
            continue
        touched[index:index + extent + 1] = True
        moves.append(WordMove(index=index, extent=extent))
    moves.sort(key=lambda m: m.index)
    corrupted = apply_moves(words, moves)
    return corrupted, encode_labels(words, corrupted, moves)


def apply_moves(words: list[Word], moves: list[WordMove]) -> list[Word]:
    """Reorder words per the moves (must be disjoint)."""
    out = list(words)
    for move in moves:
        block = out[move.index:move.index + move.extent + 1]
        out[move.index:move.index + move.extent + 1] = \
            block[1:] + block[:1]
    return out


def encode_labels(correct: list[Word], corrupted: list[Word],
                  moves: list[WordMove]) -> BieoLabeling:
    """Token-level BIEO labels for a corruption described by ``moves``."""
    if apply_moves(correct, moves) != corrupted:
        raise LabelEncodingError(
            "corrupted sentence is not the single-word-move image of the "
            "correct sentence under the given spans")
    word_labels = ["O"] * len(corrupted)
    for move in moves:
        # After the move, positions index..index+extent-1 hold the context
        # words and index+extent holds the displaced word.
        word_labels[move.index] = "B"
        for w in range(move.index + 1, move.index + move.extent):
            word_labels[w] = "I"
        word_labels[move.index + move.extent] = "E"
    tokens: list[str] = []
    labels: list[str] = []
    for word, word_label in zip(corrupted, word_labels):
        for t, token in enumerate(word):
            tokens.append(token)
            if word_label == "B":
                labels.append("B" if t == 0 else "I")
            else:
                labels.append(word_label)
    return BieoLabeling(tokens=tokens, labels=labels)


def _iter_runs(labels: list[str]):
    start = None
    for i, label in enumerate(labels + ["O"]):
        if label == "O":
            if start is not None:
                yield start, i
                start = None
        elif start is None:
            start = i


def _is_well_formed(run_labels: list[str]) -> bool:
    if not run_labels or run_labels[0] != "B":
        return False
    seen_e = False
    for label in run_labels[1:]:
        if label == "E":
            seen_e = True
        elif seen_e or label != "I":
            return False
    return seen_e


def extract_spans(labels: list[str]) -> list[WorSpan]:
    """Maximal non-O runs matching B I* E+; malformed runs are ignored."""
    spans = []
    for start, end in _iter_runs(labels):
        run = labels[start:end]
        if _is_well_formed(run):
            spans.append(WorSpan(start=start, end=end,
                                 moved_start=start + run.index("E")))
    return spans


def decode_labels(labeling: BieoLabeling) -> list[str]:
    """Recover token order: each E+ block moves to the front of its span.

    Malformed runs are repaired to O (passed through); the output is always
    a permutation of the input tokens.
    """
    tokens = labeling.tokens
    out: list[str] = []
    cursor = 0
    for span in extract_spans(labeling.labels):
        out.extend(tokens[cursor:span.start])
        out.extend(tokens[span.moved_start:span.end])
        out.extend(tokens[span.start:span.moved_start])
        cursor = span.end
    out.extend(tokens[cursor:])
    return out


def span_prf(gold: list[BieoLabeling], predicted: list[BieoLabeling]
             ) -> tuple[float, float, float]:
    """Exact-match span precision/recall/F1 (zero denominators yield 0)."""
    if len(gold) != len(predicted):
        raise EvaluationError(
            f"{len(gold)} gold labelings vs {len(predicted)} predicted")
    n_gold = n_pred = n_correct = 0
    for g, p in zip(gold, predicted):
        if len(g.labels) != len(p.labels):
            raise EvaluationError(
                f"labeling lengths differ: {len(g.labels)} vs {len(p.labels)}")
        g_spans = {(s.start, s.end, tuple(g.labels[s.start:s.end]))
                   for s in extract_spans(g.labels)}
        p_spans = {(s.start, s.end, tuple(p.labels[s.start:s.end]))
                   for s in extract_spans(p.labels)}
        n_gold += len(g_spans)
        n_pred += len(p_spans)
        n_correct += len(g_spans & p_spans)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


# -- tagging model -------------------------------------------------------------


@dataclass
class WorFinetuneConfig:
    seed: int = 0
    steps: int = 200
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 20
    max_len: int = 32
    clip_norm: float = 1.0
    weight_decay_rate: float = 0.0


@dataclass
class WorTagger:
    """Encoder plus a linear per-token classifier over the BIEO labels."""

    state: EncoderState
    vocab: Vocab
    max_len: int
    head_weight: Tensor = None
    head_bias: Tensor = None

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.state.params)
        params["wor.head.weight"] = self.head_weight
        params["wor.head.bias"] = self.head_bias
        return params

    def zero_grads(self):
        for p in self.parameters().values():
            p.grad = None

    def _encode_batch(self, token_batches: list[list[str]], *,
                      rng=None, training=False):
        batch = len(token_batches)
        n = self.max_len
        ids = np.full((batch, n), self.vocab.pad_id, dtype=np.intp)
        pad = np.ones((batch, n), dtype=bool)
        for b, tokens in enumerate(token_batches):
            if len(tokens) + 2 > n:
                raise ConfigurationError(
                    f"sentence of {len(tokens)} tokens exceeds max_len {n}")
            row = ([self.vocab.cls_id]
                   + [self.vocab.id_of(t) for t in tokens]
                   + [self.vocab.sep_id])
            ids[b, :len(row)] = row
            pad[b, :len(row)] = False
        segs = np.zeros((batch, n), dtype=np.intp)
        hidden = packed_encoder_forward(self.state, ids, segs, pad,
                                        rng=rng, training=training)
        logits = ad.matmul(hidden, self.head_weight) + self.head_bias
        return logits, pad

    def batch_loss(self, examples: list[BieoLabeling], *,
                   rng=None, training=False) -> tuple[Tensor, dict]:
        """Cross-entropy over non-pad positions; specials count as O."""
        logits, pad = self._encode_batch([e.tokens for e in examples],
                                         rng=rng, training=training)
        n = self.max_len
        rows, targets = [], []
        for b, example in enumerate(examples):
            rows.append(b * n)  # [CLS]
            targets.append(LABEL_IDS["O"])
            for t, label in enumerate(example.labels):
                rows.append(b * n + 1 + t)
                targets.append(LABEL_IDS[label])
            rows.append(b * n + 1 + len(example.labels))  # [SEP]
            targets.append(LABEL_IDS["O"])
        picked = ad.gather_rows(logits, rows)
        loss = ad.cross_entropy(picked, targets)
        correct = int(np.sum(picked.data.argmax(axis=1) == np.asarray(targets)))
        return loss, {"rows": len(rows), "correct": correct}

    def predict(self, tokens: list[str]) -> list[str]:
        with no_grad():
            logits, _ = self._encode_batch([tokens])
        ids = logits.data[1:1 + len(tokens)].argmax(axis=1)
        return [LABELS[int(i)] for i in ids]

    def predict_labeling(self, tokens: list[str]) -> BieoLabeling:
        return BieoLabeling(tokens=list(tokens), labels=self.predict(tokens))


def make_tagger(state: EncoderState, vocab: Vocab, max_len: int,
                rng: np.random.Generator) -> WorTagger:
    d = state.config.hidden
    return WorTagger(
        state=state.clone(),
        vocab=vocab,
        max_len=max_len,
        head_weight=Tensor(truncated_normal(rng, (d, len(LABELS)),
                                            state.config.initializer_range),
                           requires_grad=True),
        head_bias=Tensor(np.zeros(len(LABELS)), requires_grad=True),
    )


def wor_finetune(state: EncoderState, labeled_data: list[BieoLabeling],
                 config: WorFinetuneConfig, vocab: Vocab,
                 log=None) -> WorTagger:
    """Fine-tune a tagging model on corrupted sentences in natural order.

    The permutation transformation is a pre-training-only device; inputs
    here are the corrupted sentences exactly as written.
    """
    if not labeled_data:
        raise ConfigurationError("no labeled data to fine-tune on")
    for example in labeled_data:
        BieoLabeling(tokens=example.tokens, labels=example.labels)  # revalidate
    tagger = make_tagger(state, vocab, config.max_len,
                         derive_rng(config.seed, "wor-head"))
    params = tagger.parameters()
    adam = init_adam_state(params, weight_decay_rate=config.weight_decay_rate)
    schedule = LrSchedule(peak_lr=config.peak_lr,
                          warmup_steps=config.warmup_steps,
                          total_steps=config.steps)
    per_epoch = (len(labeled_data) + config.batch_size - 1) // config.batch_size
    order = None
    for step in range(1, config.steps + 1):
        epoch = (step - 1) // per_epoch
        if order is None or (step - 1) % per_epoch == 0:
            perm = derive_rng(config.seed, "wor-order", epoch).permutation(
                len(labeled_data))
            order = [labeled_data[int(i)] for i in perm]
        lo = ((step - 1) % per_epoch) * config.batch_size
        batch = order[lo:lo + config.batch_size]
        tagger.zero_grads()
        rng = derive_rng(config.seed, "wor-step", step)
        loss, counts = tagger.batch_loss(batch, rng=rng, training=True)
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if config.clip_norm > 0:
            clip_gradients_by_norm(grads, config.clip_norm)
        adam_step(params, grads, adam, lr_at(schedule, step))
        if log and (step % 50 == 0 or step == config.steps):
            log(f"wor step {step}: loss {float(loss.data):.4f} "
                f"token acc {counts['correct'] / counts['rows']:.3f}")
    return tagger


def evaluate_tagger(tagger: WorTagger, examples: list[BieoLabeling]
                    ) -> dict[str, float]:
    predicted = [tagger.predict_labeling(e.tokens) for e in examples]
    precision, recall, f1 = span_prf(examples, predicted)
    return {"precision": precision, "recall": recall, "f1": f1,
            "sentences": len(examples)}


def save_tagger(prefix, tagger: WorTagger) -> str:
    """Persist encoder plus tagging head in the checkpoint array format."""
    arrays = {f"param.{k}": p.data for k, p in tagger.parameters().items()}
    manifest = {
        "format": "perlm-wor-tagger",
        "version": 1,
        "max_len": tagger.max_len,
        "model": dataclasses.asdict(tagger.state.config),
    }
    return write_arrays(prefix, arrays, manifest)


def load_tagger(prefix, vocab: Vocab) -> WorTagger:
    arrays, manifest = read_arrays(prefix)
    state = EncoderState(config=ModelConfig(**manifest["model"]))
    tagger = WorTagger(state=state, vocab=vocab, max_len=manifest["max_len"])
    for name, arr in arrays.items():
        name = name[len("param."):]
        tensor = Tensor(arr, requires_grad=True)
        if name == "wor.head.weight":
            tagger.head_weight = tensor
        elif name == "wor.head.bias":
            tagger.head_bias = tensor
        else:
            state.params[name] = tensor
    return tagger


# -- labeled-data files ---------------------------------------------------------


def write_labeled(path, examples: list[BieoLabeling]) -> int:
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            handle.write(json.dumps({"tokens": example.tokens,
                                     "labels": example.labels},
                                    ensure_ascii=False) + "\n")
    return len(examples)


def read_labeled(path) -> list[BieoLabeling]:
    out = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                record = json.loads(line)
                out.append(BieoLabeling(tokens=record["tokens"],
                                        labels=record["labels"]))
    return out
