"""Review corpus: records, JSONL ingestion, group-level splitting, synthetic data."""
from __future__ import annotations

import datetime as dt
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

FRAUD = "fraudster"
GENUINE = "genuine"
LABELS = (FRAUD, GENUINE)

REVIEW_FIELDS = ("review_id", "reviewer_id", "item_id", "rating", "date", "text")
OPTIONAL_REVIEW_FIELDS = ("reviewer_label",)
GROUP_FIELDS = ("group_id", "reviewer_ids", "label")

_TOKEN_RE = re.compile(r"[^0-9a-z]+")
_SENTENCE_RE = re.compile(r"[.!?]+")
_EPOCH = dt.date(1970, 1, 1)


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data."""


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def split_sentences(text: str) -> list[list[str]]:
    """Sentences as token lists; empty sentences are dropped."""
    sents = [tokenize(s) for s in _SENTENCE_RE.split(text)]
    return [s for s in sents if s]


def parse_day(value: str) -> int:
    return (dt.date.fromisoformat(value) - _EPOCH).days


def format_day(day: int) -> str:
    return (_EPOCH + dt.timedelta(days=int(day))).isoformat()


@dataclass(frozen=True)
class Review:
    review_id: str
    reviewer_id: str
    item_id: str
    rating: int
    date: int  # days since 1970-01-01
    text: str

    def __post_init__(self) -> None:
        if isinstance(self.rating, bool) or self.rating not in (1, 2, 3, 4, 5):
            raise CorpusError(f"review {self.review_id}: rating {self.rating!r} not in 1..5")
        if not tokenize(self.text):
            raise CorpusError(f"review {self.review_id}: text has no tokens")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)

    def sentences(self) -> list[list[str]]:
        return split_sentences(self.text)


@dataclass(frozen=True)
class GroupLabel:
    group_id: str
    reviewer_ids: tuple[str, ...]
    label: str


@dataclass
class Corpus:
    reviews: list[Review]
    reviewer_labels: dict[str, str] = field(default_factory=dict)
    group_labels: list[GroupLabel] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.reviews = sorted(self.reviews, key=lambda r: r.review_id)
        seen: set[str] = set()
        for r in self.reviews:
            if r.review_id in seen:
                raise CorpusError(f"duplicate review_id {r.review_id}")
            seen.add(r.review_id)
        known = self.reviewer_ids()
        for rid, lab in self.reviewer_labels.items():
            if rid not in known:
                raise CorpusError(f"label for unknown reviewer {rid}")
            if lab not in LABELS:
                raise CorpusError(f"reviewer {rid}: bad label {lab!r}")
        gids: set[str] = set()
        for g in self.group_labels:
            if g.group_id in gids:
                raise CorpusError(f"duplicate group_id {g.group_id}")
            gids.add(g.group_id)
            if g.label not in LABELS:
                raise CorpusError(f"group {g.group_id}: bad label {g.label!r}")
            missing = [r for r in g.reviewer_ids if r not in known]
            if missing:
                raise CorpusError(f"group {g.group_id} references unknown reviewers {missing}")

    def reviewer_ids(self) -> set[str]:
        return {r.reviewer_id for r in self.reviews}

    def by_reviewer(self) -> dict[str, list[Review]]:
        out: dict[str, list[Review]] = {}
        for r in self.reviews:
            out.setdefault(r.reviewer_id, []).append(r)
        return out

    def reviewer_label_source(self) -> str:
        """``"reviewer"`` when explicit reviewer labels exist, else ``"group"``."""
        return "reviewer" if self.reviewer_labels else "group"

    def labels_for_reviewers(self) -> dict[str, str]:
        """Explicit reviewer labels, falling back to the label of the reviewer's group."""
        if self.reviewer_labels:
            return dict(self.reviewer_labels)
        out: dict[str, str] = {}
        for g in self.group_labels:
            for r in g.reviewer_ids:
                out.setdefault(r, g.label)
        return out

    def restrict(self, group_ids: Iterable[str]) -> "Corpus":
        """Sub-corpus holding the given groups, their members and their reviews."""
        keep = set(group_ids)
        groups = [g for g in self.group_labels if g.group_id in keep]
        members = {r for g in groups for r in g.reviewer_ids}
        return Corpus(
            reviews=[r for r in self.reviews if r.reviewer_id in members],
            reviewer_labels={k: v for k, v in self.reviewer_labels.items() if k in members},
            group_labels=groups,
        )


# --- I/O -------------------------------------------------------------------

def _review_from_obj(obj: dict, lineno: int, path) -> tuple[Review, str | None]:
    missing = [f for f in REVIEW_FIELDS if f not in obj]
    if missing:
        raise CorpusError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
    unknown = set(obj) - set(REVIEW_FIELDS) - set(OPTIONAL_REVIEW_FIELDS)
    if unknown:
        log.warning("%s:%d: ignoring unknown field(s) %s", path, lineno, ", ".join(sorted(unknown)))
    try:
        review = Review(
            review_id=str(obj["review_id"]),
            reviewer_id=str(obj["reviewer_id"]),
            item_id=str(obj["item_id"]),
            rating=obj["rating"],
            date=parse_day(obj["date"]),
            text=str(obj["text"]),
        )
    except (CorpusError, ValueError, TypeError) as exc:
        raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    label = obj.get("reviewer_label")
    if label is not None and label not in LABELS:
        raise CorpusError(f"{path}:{lineno}: bad reviewer_label {label!r}")
    return review, label


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def load_groups(path: str | Path) -> list[GroupLabel]:
    path = Path(path)
    groups = []
    for lineno, obj in _read_jsonl(path):
        missing = [f for f in GROUP_FIELDS if f not in obj]
        if missing:
            raise CorpusError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        groups.append(GroupLabel(str(obj["group_id"]), tuple(str(r) for r in obj["reviewer_ids"]), obj["label"]))
    return groups


def load_corpus(path: str | Path, groups_path: str | Path | None = None) -> Corpus:
    path = Path(path)
    reviews: list[Review] = []
    labels: dict[str, str] = {}
    for lineno, obj in _read_jsonl(path):
        review, label = _review_from_obj(obj, lineno, path)
        reviews.append(review)
        if label is not None:
            prev = labels.setdefault(review.reviewer_id, label)
            if prev != label:
                raise CorpusError(f"{path}:{lineno}: conflicting labels for reviewer {review.reviewer_id}")
    groups = load_groups(groups_path) if groups_path is not None else []
    corpus = Corpus(reviews, labels, groups)
    log.info(
        "loaded %d reviews, %d reviewers, %d groups from %s (reviewer labels from %s)",
        len(corpus.reviews), len(corpus.reviewer_ids()), len(groups), path, corpus.reviewer_label_source(),
    )
    return corpus


def review_to_json(r: Review, label: str | None = None) -> str:
    obj = {
        "review_id": r.review_id,
        "reviewer_id": r.reviewer_id,
        "item_id": r.item_id,
        "rating": r.rating,
        "date": format_day(r.date),
        "text": r.text,
    }
    if label is not None:
        obj["reviewer_label"] = label
    return json.dumps(obj, ensure_ascii=False)


def write_reviews(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in corpus.reviews:
            fh.write(review_to_json(r, corpus.reviewer_labels.get(r.reviewer_id)) + "\n")


def write_groups(groups: Iterable[GroupLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in groups:
            obj = {"group_id": g.group_id, "reviewer_ids": list(g.reviewer_ids), "label": g.label}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# --- splitting -------------------------------------------------------------

def split_ids(ids: Iterable[str], ratio: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded shuffle of sorted ids; ``round(ratio * n)`` go to train (at least one each side)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    ids = sorted(set(ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 groups to split")
    n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


def split_train_test(corpus: Corpus, ratio: float = 0.8, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Split by labeled group, so no group straddles train and test."""
    train_ids, test_ids = split_ids((g.group_id for g in corpus.group_labels), ratio, seed)
    return corpus.restrict(train_ids), corpus.restrict(test_ids)


# --- synthetic corpora -----------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Planted fraudster/genuine groups over partially disjoint vocabularies.

    Each group co-reviews ``items_per_group`` private items with one shared
    rating inside ``time_spread_days`` (so its core is a clique of the
    co-review graph). A camouflaged group also holds one member of the opposite
    type, linked to a single core member through two private items. Every
    other review is on an item nobody else reviews, so the co-review graph is
    exactly the planted one.
    """

    n_groups: int = 60
    min_group_size: int = 3
    max_group_size: int = 6
    fraud_fraction: float = 0.5
    camouflage_rate: float = 0.2
    class_vocab_size: int = 80
    shared_vocab_size: int = 80
    shared_token_rate: float = 0.3
    items_per_group: int = 3
    background_reviews: int = 2
    n_individuals: int = 20
    sentences_per_review: tuple[int, int] = (1, 3)
    words_per_sentence: tuple[int, int] = (4, 10)
    time_spread_days: int = 10
    start_date: str = "2012-01-01"
    span_days: int = 1000
    seed: int = 0

    def validate(self) -> None:
        for name in ("fraud_fraction", "camouflage_rate", "shared_token_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.min_group_size < 2 or self.max_group_size < self.min_group_size:
            raise ValueError("group sizes must satisfy 2 <= min_group_size <= max_group_size")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if self.items_per_group < 2:
            raise ValueError("items_per_group must be >= 2 for groups to co-review")
        if not 0 <= self.time_spread_days <= 28:
            raise ValueError("time_spread_days must be in [0, 28] so planted pairs co-review")
        if self.class_vocab_size < 1 or (self.shared_token_rate > 0 and self.shared_vocab_size < 1):
            raise ValueError("vocabularies must be non-empty")
        lo, hi = self.sentences_per_review
        if lo < 1 or hi < lo:
            raise ValueError("sentences_per_review must be 1 <= lo <= hi")
        lo, hi = self.words_per_sentence
        if lo < 1 or hi < lo:
            raise ValueError("words_per_sentence must be 1 <= lo <= hi")


def _vocab(prefix: str, size: int) -> list[str]:
    return [f"{prefix}{i:03d}" for i in range(size)]


def generate_planted(cfg: SynthConfig) -> tuple[Corpus, set[tuple[str, str]]]:
    """Synthetic corpus plus the planted co-review edge set (pairs sorted)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vocabs = {FRAUD: _vocab("fraw", cfg.class_vocab_size), GENUINE: _vocab("genw", cfg.class_vocab_size)}
    shared = _vocab("comw", cfg.shared_vocab_size)
    start = parse_day(cfg.start_date)

    reviews: list[Review] = []
    reviewer_labels: dict[str, str] = {}
    groups: list[GroupLabel] = []
    edges: set[tuple[str, str]] = set()
    counter = {"review": 0, "item": 0}

    def new_item(kind: str) -> str:
        counter["item"] += 1
        return f"{kind}{counter['item']:05d}"

    def text_for(label: str) -> str:
        sents = []
        for _ in range(rng.integers(cfg.sentences_per_review[0], cfg.sentences_per_review[1] + 1)):
            n = rng.integers(cfg.words_per_sentence[0], cfg.words_per_sentence[1] + 1)
            words = []
            for _ in range(n):
                if rng.random() < cfg.shared_token_rate:
                    words.append(shared[rng.integers(len(shared))])
                else:
                    voc = vocabs[label]
                    words.append(voc[rng.integers(len(voc))])
            sents.append(" ".join(words))
        return ". ".join(sents) + "."

    def add_review(reviewer: str, item: str, rating: int, day: int, label: str) -> None:
        counter["review"] += 1
        reviews.append(Review(f"rv{counter['review']:07d}", reviewer, item, int(rating), int(day), text_for(label)))

    def background(reviewer: str, label: str) -> None:
        for _ in range(cfg.background_reviews):
            add_review(reviewer, new_item("bg"), rng.integers(1, 6), start + rng.integers(cfg.span_days), label)

    n_fraud = int(round(cfg.n_groups * cfg.fraud_fraction))
    group_types = [FRAUD] * n_fraud + [GENUINE] * (cfg.n_groups - n_fraud)
    group_types = [group_types[i] for i in rng.permutation(cfg.n_groups)]

    for gi, label in enumerate(group_types):
        gid = f"g{gi:04d}"
        size = int(rng.integers(cfg.min_group_size, cfg.max_group_size + 1))
        camouflaged = size >= 3 and rng.random() < cfg.camouflage_rate
        n_core = size - 1 if camouflaged else size
        members = [f"{gid}r{k:02d}" for k in range(size)]
        core = members[:n_core]
        if label == FRAUD:
            rating = 5 if rng.random() < 0.5 else 1
        else:
            rating = int(rng.integers(3, 6))
        t0 = start + int(rng.integers(cfg.span_days))
        for _ in range(cfg.items_per_group):
            item = new_item("it")
            for r in core:
                add_review(r, item, rating, t0 + rng.integers(cfg.time_spread_days + 1), label)
        for a in range(n_core):
            for b in range(a + 1, n_core):
                edges.add(tuple(sorted((core[a], core[b]))))
        for r in core:
            reviewer_labels[r] = label
            background(r, label)
        if camouflaged:
            imposter = members[-1]
            other = GENUINE if label == FRAUD else FRAUD
            anchor = core[int(rng.integers(n_core))]
            t1 = start + int(rng.integers(cfg.span_days))
            shared_rating = int(rng.integers(1, 6))
            for _ in range(2):
                item = new_item("it")
                add_review(anchor, item, shared_rating, t1 + rng.integers(cfg.time_spread_days + 1), label)
                add_review(imposter, item, shared_rating, t1 + rng.integers(cfg.time_spread_days + 1), other)
            edges.add(tuple(sorted((anchor, imposter))))
            reviewer_labels[imposter] = other
            background(imposter, other)
        groups.append(GroupLabel(gid, tuple(members), label))

    for k in range(cfg.n_individuals):
        rid = f"ind{k:04d}"
        label = FRAUD if rng.random() < cfg.fraud_fraction else GENUINE
        reviewer_labels[rid] = label
        add_review(rid, new_item("bg"), rng.integers(1, 6), start + rng.integers(cfg.span_days), label)
        background(rid, label)

    return Corpus(reviews, reviewer_labels, groups), edges


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    return generate_planted(cfg)[0]
