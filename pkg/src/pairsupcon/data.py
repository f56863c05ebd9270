"""Corpus ingestion, batching, and the synthetic-cluster generator.

File formats:
  - pair corpora: JSONL with {"premise", "hypothesis", "label"} where the
    label is entailment / contradiction / neutral (case-insensitive);
    neutral records are skipped with a count, not an error
  - labeled corpora: JSONL with {"text", "label"}; label strings are
    interned to class ids in first-seen order
  - scored pairs: TSV "sentence1 <TAB> sentence2 <TAB> score" with the
    gold score in [0, 5]
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class SentencePair:
    """One premise/hypothesis pair: label +1 entailment, -1 contradiction."""

    premise: str
    hypothesis: str
    label: int


@dataclass
class LabeledText:
    text: str
    class_id: int


@dataclass
class ScoredPair:
    sentence1: str
    sentence2: str
    score: float


@dataclass
class PairBatch:
    """M pairs as 2M sentences: premise of pair j at row 2j, hypothesis at 2j+1."""

    sentences: list[str]
    labels: np.ndarray

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((2 * j, 2 * j + 1) for j in range(self.m))


_LABEL_VALUES = {"entailment": 1, "contradiction": -1}


def parse_nli_record(line: str, lineno: int | None = None) -> SentencePair | None:
    """Parse one JSONL pair record; returns None for (skipped) neutral pairs."""
    where = f"line {lineno}: " if lineno is not None else ""
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{where}malformed JSON ({exc.msg})") from None
    if not isinstance(record, dict):
        raise ValueError(f"{where}expected a JSON object")
    for key in ("premise", "hypothesis", "label"):
        if key not in record:
            raise ValueError(f"{where}missing field {key!r}")
    label = str(record["label"]).lower()
    if label == "neutral":
        return None
    if label not in _LABEL_VALUES:
        raise ValueError(f"{where}unknown label {record['label']!r}")
    premise = str(record["premise"]).strip()
    hypothesis = str(record["hypothesis"]).strip()
    if not premise or not hypothesis:
        raise ValueError(f"{where}empty premise or hypothesis")
    return SentencePair(premise, hypothesis, _LABEL_VALUES[label])


def load_nli(path) -> tuple[list[SentencePair], int]:
    """All binary pairs from a JSONL file plus the neutral-skip count."""
    pairs = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            pair = parse_nli_record(line, lineno)
            if pair is None:
                skipped += 1
            else:
                pairs.append(pair)
    return pairs, skipped


def make_batches(pairs: list[SentencePair], m: int, seed) -> list[PairBatch]:
    """One epoch of uniformly shuffled batches of M pairs each.

    The shuffle is a seeded permutation, so one seed always yields the same
    batch sequence.  A short final batch is kept only if it contains at
    least one positive pair (it could not contribute an
    instance-discrimination term otherwise).
    """
    if m < 2:
        raise ValueError(f"batch size must be at least 2, got {m}")
    if len(pairs) < m:
        raise ValueError(f"need at least {m} pairs, got {len(pairs)}")
    if not any(p.label == 1 for p in pairs):
        raise ValueError("dataset has no positive pairs")
    order = np.random.default_rng(seed).permutation(len(pairs))
    batches = []
    for start in range(0, len(order), m):
        chunk = [pairs[i] for i in order[start:start + m]]
        if len(chunk) < m and not any(p.label == 1 for p in chunk):
            continue
        sentences = []
        for pair in chunk:
            sentences.append(pair.premise)
            sentences.append(pair.hypothesis)
        batches.append(PairBatch(sentences, np.array([p.label for p in chunk])))
    return batches


def _topic_vocabularies(classes: int, tokens_per_class: int, overlap: float,
                        overlap_pair: tuple[int, int]) -> list[list[str]]:
    vocabs = [[f"t{c:02d}w{k:03d}" for k in range(tokens_per_class)]
              for c in range(classes)]
    borrowed = int(round(overlap * tokens_per_class))
    if borrowed >= tokens_per_class:
        raise ValueError("degenerate vocabularies: full overlap leaves topics identical")
    if borrowed > 0:
        a, b = overlap_pair
        vocabs[b] = vocabs[a][:borrowed] + vocabs[b][borrowed:]
    return vocabs


def synth_generate(classes: int, per_class: int, cross_rate: float, seed,
                   tokens_per_class: int = 50, shared_tokens: int = 40,
                   shared_rate: float = 0.3, sentence_len: tuple[int, int] = (5, 12),
                   heldout_per_class: int = 64, overlap: float = 0.0,
                   overlap_pair: tuple[int, int] = (0, 1),
                   ) -> tuple[list[SentencePair], list[LabeledText]]:
    """Synthetic topic corpus of sentence pairs plus held-out labeled texts.

    Each topic owns a token vocabulary (named t<topic>w<k>); sentences mix
    topic tokens with a shared pool (shw<k>) at `shared_rate`.  Entailment
    pairs always share a topic; a contradiction pair crosses topics with
    probability `cross_rate` and stays within one topic otherwise --
    contradicting sentences need not come from different semantic groups.
    `overlap` makes the two `overlap_pair` topics share a fraction of their
    vocabularies, which creates deliberately confusable clusters.

    per_class counts the pairs whose premise belongs to each topic, split
    evenly between entailment and contradiction.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if not 0.0 <= cross_rate <= 1.0:
        raise ValueError(f"cross-rate must lie in [0, 1], got {cross_rate}")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    if not 0.0 <= shared_rate < 1.0:
        raise ValueError(f"shared-rate must lie in [0, 1), got {shared_rate}")
    vocabs = _topic_vocabularies(classes, tokens_per_class, overlap, overlap_pair)
    shared = [f"shw{k:03d}" for k in range(shared_tokens)]
    rng = np.random.default_rng(seed)
    lo, hi = sentence_len

    def sentence(topic: int) -> str:
        length = int(rng.integers(lo, hi + 1))
        words = []
        for _ in range(length):
            if shared_tokens and rng.random() < shared_rate:
                words.append(shared[rng.integers(shared_tokens)])
            else:
                words.append(vocabs[topic][rng.integers(len(vocabs[topic]))])
        return " ".join(words)

    pairs = []
    for topic in range(classes):
        for k in range(per_class):
            label = 1 if k % 2 == 0 else -1
            other = topic
            if label == -1 and rng.random() < cross_rate:
                other = int((topic + 1 + rng.integers(classes - 1)) % classes)
            pairs.append(SentencePair(sentence(topic), sentence(other), label))
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]

    heldout = [LabeledText(sentence(topic), topic)
               for topic in range(classes)
               for _ in range(heldout_per_class)]
    return pairs, heldout


def sentence_topic(text: str) -> int | None:
    """Topic id a synthetic sentence was drawn from (None for shared-only)."""
    for token in text.split():
        if token.startswith("t") and "w" in token:
            try:
                return int(token[1:token.index("w")])
            except ValueError:
                continue
    return None


def synth_cross_fraction(pairs: list[SentencePair]) -> float:
    """Fraction of contradiction pairs whose sides come from different topics."""
    cross = total = 0
    for pair in pairs:
        if pair.label != -1:
            continue
        a, b = sentence_topic(pair.premise), sentence_topic(pair.hypothesis)
        if a is None or b is None:
            continue
        total += 1
        cross += a != b
    return cross / total if total else 0.0


def load_labeled(path) -> list[LabeledText]:
    """Labeled JSONL corpus; class strings interned in first-seen order."""
    class_ids: dict[str, int] = {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if "text" not in record or "label" not in record:
                raise ValueError(f"line {lineno}: missing text or label field")
            label = str(record["label"])
            if label not in class_ids:
                class_ids[label] = len(class_ids)
            records.append(LabeledText(str(record["text"]), class_ids[label]))
    return records


def load_scored(path) -> list[ScoredPair]:
    """Scored TSV pairs with gold similarity in [0, 5]."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            try:
                score = float(fields[2])
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric score {fields[2]!r}") from None
            if not 0.0 <= score <= 5.0:
                raise ValueError(f"line {lineno}: score {score} outside [0, 5]")
            records.append(ScoredPair(fields[0], fields[1], score))
    return records


def save_nli(pairs: list[SentencePair], path) -> None:
    names = {1: "entailment", -1: "contradiction"}
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps({"premise": pair.premise,
                                 "hypothesis": pair.hypothesis,
                                 "label": names[pair.label]}) + "\n")


def save_labeled(records: list[LabeledText], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"text": rec.text, "label": f"class{rec.class_id:02d}"}) + "\n")
