"""Permuted-language-model instance construction.

Pipeline: select whole-word n-gram spans under a word budget, draw the
shuffle subset, permute it within granularity cells, and emit per-position
targets. Instances serialize losslessly to one JSON record per line.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigurationError, InstanceCorruptionError, InstanceParseError
from .seeding import derive_rng
from .tokenizer import TokenizedSequence, Vocab, tokenize_sentences, tokenize_text

GRANULARITIES = ("none", "word", "ngram", "sentence")
PREDICTION_SPACES = ("local", "global", "local+global")
PREDICTION_SCOPES = ("partial", "full")
TARGET_SEMANTICS = ("sigma", "sigma_inverse")


@dataclass
class MaskingConfig:
    """Knobs for span selection, shuffling and the prediction objective."""

    select_ratio: float = 0.15
    ngram_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    shuffle_ratio: float = 0.9
    granularity: str = "none"
    prediction_space: str = "local"
    prediction_scope: str = "partial"
    # Two readings of "predict the position of the original token" exist for
    # non-involution permutations; sigma targets the moved token's new slot.
    target_semantics: str = "sigma"

    def __post_init__(self):
        if not 0.0 <= self.select_ratio <= 1.0:
            raise ConfigurationError(f"select_ratio must be in [0,1], got {self.select_ratio}")
        if not 0.0 <= self.shuffle_ratio <= 1.0:
            raise ConfigurationError(f"shuffle_ratio must be in [0,1], got {self.shuffle_ratio}")
        self.ngram_weights = tuple(float(w) for w in self.ngram_weights)
        if any(w < 0 for w in self.ngram_weights):
            raise ConfigurationError("ngram_weights must be non-negative")
        if abs(sum(self.ngram_weights) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"ngram_weights must sum to 1, got {sum(self.ngram_weights)}")
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        if self.prediction_space not in PREDICTION_SPACES:
            raise ConfigurationError(f"unknown prediction_space {self.prediction_space!r}")
        if self.prediction_scope not in PREDICTION_SCOPES:
            raise ConfigurationError(f"unknown prediction_scope {self.prediction_scope!r}")
        if self.target_semantics not in TARGET_SEMANTICS:
            raise ConfigurationError(f"unknown target_semantics {self.target_semantics!r}")


@dataclass
class SelectionSpan:
    """A run of whole words chosen for permutation.

    ``n`` is the sampled gram length; the realized extent [word_start,
    word_end) may be shorter when truncated at the sequence end, the word
    budget, or an earlier span.
    """

    word_start: int
    word_end: int
    token_positions: list[int]
    n: int


@dataclass
class GenerationStats:
    """Aggregate selection statistics over a stream of instances."""

    instances: int = 0
    words_total: int = 0
    words_selected: int = 0
    tokens_selected: int = 0
    tokens_shuffled: int = 0
    tokens_kept: int = 0
    gram_draws: list[int] = field(default_factory=lambda: [0, 0, 0, 0])

    @property
    def selected_word_fraction(self) -> float:
        return self.words_selected / self.words_total if self.words_total else 0.0

    @property
    def shuffled_fraction(self) -> float:
        return (self.tokens_shuffled / self.tokens_selected
                if self.tokens_selected else 0.0)

    @property
    def gram_histogram(self) -> list[float]:
        total = sum(self.gram_draws)
        if not total:
            return [0.0] * len(self.gram_draws)
        return [c / total for c in self.gram_draws]

    def as_dict(self) -> dict:
        return {
            "instances": self.instances,
            "words_total": self.words_total,
            "words_selected": self.words_selected,
            "selected_word_fraction": self.selected_word_fraction,
            "tokens_selected": self.tokens_selected,
            "tokens_shuffled": self.tokens_shuffled,
            "tokens_kept": self.tokens_kept,
            "shuffled_fraction": self.shuffled_fraction,
            "gram_histogram": self.gram_histogram,
        }


@dataclass
class PerLMInstance:
    """One padded training example with permutation targets.

    ``pad_mask[p]`` is True where position p is padding. Targets follow
    MaskingConfig.target_semantics; under the default, position_targets[i]
    is where the token originally at i now resides.
    """

    input_ids: list[int]
    segment_ids: list[int]
    pad_mask: list[bool]
    pred_positions: list[int]
    position_targets: list[int]
    vocab_targets: list[int]
    original_ids: list[int]

    @property
    def real_length(self) -> int:
        return sum(1 for p in self.pad_mask if not p)


def sample_gram_length(cfg: MaskingConfig, rng: np.random.Generator,
                       stats: GenerationStats | None = None) -> int:
    n = int(rng.choice(len(cfg.ngram_weights), p=cfg.ngram_weights)) + 1
    if stats is not None:
        stats.gram_draws[n - 1] += 1
    return n


def _word_token_map(seq: TokenizedSequence) -> list[list[int]]:
    words: list[list[int]] = [[] for _ in range(seq.word_count)]
    for pos, w in enumerate(seq.word_ids):
        words[w].append(pos)
    return words


def select_spans(seq: TokenizedSequence, cfg: MaskingConfig,
                 rng: np.random.Generator,
                 stats: GenerationStats | None = None) -> list[SelectionSpan]:
    """Choose disjoint whole-word spans totalling ceil(select_ratio * words).

    Candidate start words are visited in random order; each start draws a
    gram length from the configured weights. The realized extent truncates
    at the sequence end, the remaining budget, and previously placed spans,
    so the word budget is filled exactly whenever enough words exist while
    the sampled-length distribution stays exactly categorical.
    """
    word_count = seq.word_count
    if word_count == 0 or cfg.select_ratio == 0.0:
        return []
    budget = math.ceil(cfg.select_ratio * word_count)
    word_tokens = _word_token_map(seq)
    taken = np.zeros(word_count, dtype=bool)
    spans: list[SelectionSpan] = []
    used = 0
    for start in rng.permutation(word_count):
        if used >= budget:
            break
        start = int(start)
        if taken[start]:
            continue
        n = sample_gram_length(cfg, rng, stats)
        end = min(start + n, word_count, start + (budget - used))
        probe = start
        while probe < end and not taken[probe]:
            probe += 1
        end = probe
        taken[start:end] = True
        used += end - start
        positions = [p for w in range(start, end) for p in word_tokens[w]]
        spans.append(SelectionSpan(word_start=start, word_end=end,
                                   token_positions=positions, n=n))
    spans.sort(key=lambda s: s.word_start)
    return spans


def _cap_spans_to_token_budget(spans: list[SelectionSpan],
                               word_tokens: list[list[int]],
                               max_tokens: int) -> list[SelectionSpan]:
    """Trim whole words from the tail until the token total fits."""
    total = sum(len(s.token_positions) for s in spans)
    if total <= max_tokens:
        return spans
    trimmed = [SelectionSpan(s.word_start, s.word_end,
                             list(s.token_positions), s.n) for s in spans]
    i = len(trimmed) - 1
    while total > max_tokens and i >= 0:
        span = trimmed[i]
        while total > max_tokens and span.word_end > span.word_start:
            last = span.word_end - 1
            removed = len(word_tokens[last])
            span.word_end = last
            del span.token_positions[len(span.token_positions) - removed:]
            total -= removed
        if span.word_end == span.word_start:
            trimmed.pop(i)
        i -= 1
    return trimmed


def apply_granularity(shuffle_positions: list[int], spans: list[SelectionSpan],
                      cfg: MaskingConfig, seq: TokenizedSequence) -> list[list[int]]:
    """Partition the shuffle set into cells; permutation never crosses cells.

    Positions are sequence-local. Mode none yields a single cell; word and
    sentence group by the token metadata; ngram groups by owning span.
    """
    if cfg.granularity == "none":
        return [list(shuffle_positions)] if shuffle_positions else []
    cells: dict[int, list[int]] = {}
    if cfg.granularity == "word":
        for p in shuffle_positions:
            cells.setdefault(seq.word_ids[p], []).append(p)
    elif cfg.granularity == "sentence":
        for p in shuffle_positions:
            cells.setdefault(seq.sentence_ids[p], []).append(p)
    else:  # ngram
        owner = {}
        for si, span in enumerate(spans):
            for p in span.token_positions:
                owner[p] = si
        for p in shuffle_positions:
            cells.setdefault(owner[p], []).append(p)
    return [cells[k] for k in sorted(cells)]


def _permute_segment(seq: TokenizedSequence, spans: list[SelectionSpan],
                     cfg: MaskingConfig, rng: np.random.Generator,
                     stats: GenerationStats | None):
    """Shuffle one segment; returns (ids, selected, sigma) in local coords."""
    ids = list(seq.token_ids)
    selected = sorted(p for s in spans for p in s.token_positions)
    shuffle_set = [p for p in selected if rng.random() < cfg.shuffle_ratio]
    if stats is not None:
        stats.tokens_selected += len(selected)
        stats.tokens_shuffled += len(shuffle_set)
        stats.tokens_kept += len(selected) - len(shuffle_set)
        stats.words_selected += sum(s.word_end - s.word_start for s in spans)
    sigma: dict[int, int] = {}
    for cell in apply_granularity(shuffle_set, spans, cfg, seq):
        if len(cell) < 2:
            continue
        cell = sorted(cell)
        perm = rng.permutation(len(cell))
        for i, j in enumerate(perm):
            sigma[cell[i]] = cell[int(j)]
    new_ids = list(ids)
    for src, dst in sigma.items():
        new_ids[dst] = ids[src]
    return new_ids, selected, sigma


def _truncate_words(seq: TokenizedSequence, words_to_keep: int) -> TokenizedSequence:
    if words_to_keep >= seq.word_count:
        return seq
    keep = [i for i, w in enumerate(seq.word_ids) if w < words_to_keep]
    return TokenizedSequence(
        token_ids=[seq.token_ids[i] for i in keep],
        word_ids=[seq.word_ids[i] for i in keep],
        sentence_ids=[seq.sentence_ids[i] for i in keep],
        is_special=[seq.is_special[i] for i in keep],
    )


def _truncate_pair(a: TokenizedSequence, b: TokenizedSequence | None,
                   budget: int) -> tuple[TokenizedSequence, TokenizedSequence | None]:
    """Trim the longer side word-by-word from the tail until both fit."""
    a_sizes = [len(t) for t in _word_token_map(a)]
    b_sizes = [len(t) for t in _word_token_map(b)] if b is not None else []
    a_words, b_words = len(a_sizes), len(b_sizes)
    a_total, b_total = sum(a_sizes), sum(b_sizes)
    while a_total + b_total > budget:
        if a_words >= b_words and a_words > 0:
            a_words -= 1
            a_total -= a_sizes[a_words]
        elif b_words > 0:
            b_words -= 1
            b_total -= b_sizes[b_words]
        else:
            break
    return (_truncate_words(a, a_words),
            _truncate_words(b, b_words) if b is not None else None)


def build_pair_instance(a: TokenizedSequence, b: TokenizedSequence | None,
                        max_len: int, cfg: MaskingConfig,
                        rng: np.random.Generator, vocab: Vocab,
                        stats: GenerationStats | None = None) -> PerLMInstance | None:
    """Assemble one padded instance from a segment pair.

    Permutation is applied independently per segment before concatenation.
    Returns None (skip signal) when both segments are empty.
    """
    if b is not None and len(b) == 0:
        b = None
    if len(a) == 0 and b is None:
        return None
    if len(a) == 0:
        a, b = b, None
    specials = 3 if b is not None else 2
    if max_len < specials + 1:
        raise ConfigurationError(f"max_len {max_len} cannot hold any content")
    a, b = _truncate_pair(a, b, max_len - specials)
    if b is not None and len(b) == 0:
        b = None
        specials = 2

    a_spans = select_spans(a, cfg, rng, stats)
    b_spans = select_spans(b, cfg, rng, stats) if b is not None else []
    if stats is not None:
        stats.instances += 1
        stats.words_total += a.word_count + (b.word_count if b is not None else 0)

    # Prediction rows are capped at floor(select_ratio * N); trim whole
    # words from the selection tail so targets stay invertible.
    n_real = 1 + len(a) + 1 + ((len(b) + 1) if b is not None else 0)
    cap = max(1, math.floor(n_real * cfg.select_ratio))
    if sum(len(s.token_positions) for s in a_spans + b_spans) > cap:
        b_budget = max(0, cap - sum(len(s.token_positions) for s in a_spans))
        if b is not None:
            b_spans = _cap_spans_to_token_budget(b_spans, _word_token_map(b),
                                                 b_budget)
        a_budget = cap - sum(len(s.token_positions) for s in b_spans)
        a_spans = _cap_spans_to_token_budget(a_spans, _word_token_map(a),
                                             a_budget)
    return assemble_instance(a, a_spans, b, b_spans, max_len, cfg, rng, vocab,
                             stats=stats)


def permute_selected(seq: TokenizedSequence, spans: list[SelectionSpan],
                     cfg: MaskingConfig, rng: np.random.Generator,
                     vocab: Vocab) -> PerLMInstance:
    """Single-segment instance from pre-chosen spans."""
    return assemble_instance(seq, spans, None, [], len(seq) + 2, cfg, rng, vocab)


def assemble_instance(a: TokenizedSequence, a_spans: list[SelectionSpan],
                      b: TokenizedSequence | None, b_spans: list[SelectionSpan],
                      max_len: int, cfg: MaskingConfig,
                      rng: np.random.Generator, vocab: Vocab,
                      stats: GenerationStats | None = None) -> PerLMInstance:
    n_real = 1 + len(a) + 1 + ((len(b) + 1) if b is not None else 0)
    if n_real > max_len:
        raise ConfigurationError(
            f"segments of {n_real} tokens exceed max_len {max_len}")

    a_ids, a_selected, a_sigma = _permute_segment(a, a_spans, cfg, rng, stats)
    if b is not None:
        b_ids, b_selected, b_sigma = _permute_segment(b, b_spans, cfg, rng, stats)
    else:
        b_ids, b_selected, b_sigma = [], [], {}

    a_off = 1
    b_off = 2 + len(a)
    input_ids = [vocab.cls_id] + a_ids + [vocab.sep_id]
    original_ids = [vocab.cls_id] + list(a.token_ids) + [vocab.sep_id]
    segment_ids = [0] * (len(a) + 2)
    if b is not None:
        input_ids += b_ids + [vocab.sep_id]
        original_ids += list(b.token_ids) + [vocab.sep_id]
        segment_ids += [1] * (len(b) + 1)

    sigma = {a_off + s: a_off + d for s, d in a_sigma.items()}
    sigma.update({b_off + s: b_off + d for s, d in b_sigma.items()})
    pred_positions = sorted([a_off + p for p in a_selected]
                            + [b_off + p for p in b_selected])

    if cfg.target_semantics == "sigma":
        target_of = sigma
    else:
        target_of = {dst: src for src, dst in sigma.items()}
    position_targets = [target_of.get(p, p) for p in pred_positions]
    vocab_targets = [original_ids[p] for p in pred_positions]

    pad = max_len - len(input_ids)
    pad_mask = [False] * len(input_ids) + [True] * pad
    input_ids += [vocab.pad_id] * pad
    original_ids += [vocab.pad_id] * pad
    segment_ids += [0] * pad

    instance = PerLMInstance(
        input_ids=input_ids,
        segment_ids=segment_ids,
        pad_mask=pad_mask,
        pred_positions=pred_positions,
        position_targets=position_targets,
        vocab_targets=vocab_targets,
        original_ids=original_ids,
    )
    if cfg.prediction_scope == "full":
        instance = expand_prediction_scope(instance, cfg)
    validate_instance(instance)
    return instance


def expand_prediction_scope(instance: PerLMInstance,
                            cfg: MaskingConfig) -> PerLMInstance:
    """Under full prediction, every non-pad position becomes a row.

    Rows that were never selected target their own position. Partial scope
    returns the instance unchanged.
    """
    if cfg.prediction_scope != "full":
        return instance
    existing = dict(zip(instance.pred_positions, instance.position_targets))
    pred_positions = [p for p, is_pad in enumerate(instance.pad_mask) if not is_pad]
    position_targets = [existing.get(p, p) for p in pred_positions]
    vocab_targets = [instance.original_ids[p] for p in pred_positions]
    return PerLMInstance(
        input_ids=instance.input_ids,
        segment_ids=instance.segment_ids,
        pad_mask=instance.pad_mask,
        pred_positions=pred_positions,
        position_targets=position_targets,
        vocab_targets=vocab_targets,
        original_ids=instance.original_ids,
    )


def validate_instance(instance: PerLMInstance) -> None:
    """Raise InstanceCorruptionError on any violated structural invariant."""
    n = len(instance.input_ids)
    if not (len(instance.segment_ids) == len(instance.pad_mask)
            == len(instance.original_ids) == n):
        raise InstanceCorruptionError("field lengths disagree")
    if not (len(instance.pred_positions) == len(instance.position_targets)
            == len(instance.vocab_targets)):
        raise InstanceCorruptionError("prediction field lengths disagree")
    for p, t in zip(instance.pred_positions, instance.position_targets):
        if not 0 <= p < n or not 0 <= t < n:
            raise InstanceCorruptionError(f"position {p}->{t} out of range")
        if instance.pad_mask[p] or instance.pad_mask[t]:
            raise InstanceCorruptionError(f"target {p}->{t} touches padding")
    if sorted(x for x, m in zip(instance.input_ids, instance.pad_mask) if not m) != \
            sorted(x for x, m in zip(instance.original_ids, instance.pad_mask) if not m):
        raise InstanceCorruptionError("permutation changed token content")


# -- serialization -----------------------------------------------------------

_FIELDS = ("input_ids", "segment_ids", "pad_mask", "pred_positions",
           "position_targets", "vocab_targets", "original_ids")


def serialize_instance(instance: PerLMInstance) -> str:
    record = asdict(instance)
    record["pad_mask"] = [int(x) for x in record["pad_mask"]]
    return json.dumps(record, separators=(",", ":"), sort_keys=True)


def deserialize_instance(line: str, byte_offset: int = 0) -> PerLMInstance:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InstanceParseError(f"invalid record: {exc.msg}",
                                 byte_offset + exc.pos) from exc
    if not isinstance(record, dict):
        raise InstanceParseError("record is not an object", byte_offset)
    missing = [f for f in _FIELDS if f not in record]
    if missing:
        raise InstanceParseError(f"missing fields {missing}", byte_offset)
    try:
        return PerLMInstance(
            input_ids=[int(x) for x in record["input_ids"]],
            segment_ids=[int(x) for x in record["segment_ids"]],
            pad_mask=[bool(x) for x in record["pad_mask"]],
            pred_positions=[int(x) for x in record["pred_positions"]],
            position_targets=[int(x) for x in record["position_targets"]],
            vocab_targets=[int(x) for x in record["vocab_targets"]],
            original_ids=[int(x) for x in record["original_ids"]],
        )
    except (TypeError, ValueError) as exc:
        raise InstanceParseError(f"malformed field: {exc}", byte_offset) from exc


def write_instances(path, instances) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for instance in instances:
            handle.write(serialize_instance(instance) + "\n")
            count += 1
    return count


def read_instances(path) -> list[PerLMInstance]:
    instances = []
    offset = 0
    with open(path, "rb") as handle:
        for raw in handle:
            line = raw.decode("utf-8").strip()
            if line:
                instances.append(deserialize_instance(line, byte_offset=offset))
            offset += len(raw)
    return instances


# -- corpus-to-instance pipeline ---------------------------------------------


def _concat_sequences(seqs: list[TokenizedSequence]) -> TokenizedSequence:
    token_ids, word_ids, sentence_ids, is_special = [], [], [], []
    word_base = 0
    sent_base = 0
    for seq in seqs:
        token_ids.extend(seq.token_ids)
        word_ids.extend(w + word_base for w in seq.word_ids)
        sentence_ids.extend(s + sent_base for s in seq.sentence_ids)
        is_special.extend(seq.is_special)
        word_base += seq.word_count
        sent_base += (max(seq.sentence_ids) + 1) if seq.sentence_ids else 0
    return TokenizedSequence(token_ids, word_ids, sentence_ids, is_special)


def _document_sequences(document, vocab: Vocab, lowercase: bool):
    """One TokenizedSequence per sentence of a document."""
    if isinstance(document, str):
        seq = tokenize_text(document, vocab, lowercase=lowercase)
        if not seq.token_ids:
            return []
        out = []
        current: list[int] = []
        active = seq.sentence_ids[0]
        for pos, sid in enumerate(seq.sentence_ids):
            if sid != active:
                out.append(_slice_positions(seq, current))
                current = []
                active = sid
            current.append(pos)
        out.append(_slice_positions(seq, current))
        return out
    return [tokenize_sentences([words], vocab, lowercase=lowercase)
            for words in document if words]


def _slice_positions(seq: TokenizedSequence, positions: list[int]) -> TokenizedSequence:
    word_ids = [seq.word_ids[p] for p in positions]
    base = word_ids[0]
    return TokenizedSequence(
        token_ids=[seq.token_ids[p] for p in positions],
        word_ids=[w - base for w in word_ids],
        sentence_ids=[0] * len(positions),
        is_special=[seq.is_special[p] for p in positions],
    )


def generate_instances(documents, vocab: Vocab, cfg: MaskingConfig,
                       max_len: int, seed: int,
                       stats: GenerationStats | None = None,
                       lowercase: bool = False, duplicate_factor: int = 1):
    """Yield instances from documents, deterministically per (seed, ordinal).

    Sentences are packed into groups of at most max_len - 3 content tokens;
    groups of two or more sentences split near the middle into an A/B pair.
    duplicate_factor > 1 re-walks the corpus with fresh per-instance seeds,
    producing independent permutations of the same text.
    """
    budget = max_len - 3
    ordinal = 0
    documents = list(documents)
    for document in documents * duplicate_factor:
        sentences = _document_sequences(document, vocab, lowercase)
        group: list[TokenizedSequence] = []
        group_tokens = 0

        def flush(group):
            nonlocal ordinal
            if not group:
                return None
            if len(group) == 1:
                a, b = group[0], None
            else:
                half = group_tokens / 2
                acc = 0
                split = 1
                for i, seq in enumerate(group[:-1]):
                    acc += len(seq)
                    if acc >= half:
                        split = i + 1
                        break
                a = _concat_sequences(group[:split])
                b = _concat_sequences(group[split:])
            rng = derive_rng(seed, "instance", ordinal)
            instance = build_pair_instance(a, b, max_len, cfg, rng, vocab,
                                           stats=stats)
            ordinal += 1
            return instance

        for seq in sentences:
            if group and group_tokens + len(seq) > budget:
                instance = flush(group)
                if instance is not None:
                    yield instance
                group, group_tokens = [], 0
            group.append(seq)
            group_tokens += len(seq)
        instance = flush(group)
        if instance is not None:
            yield instance
