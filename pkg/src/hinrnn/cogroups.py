"""Co-review graph and candidate groups.

Two reviewers are linked when, on at least ``min_items`` distinct items, they
both left the same rating within ``window_days`` of each other. Candidate
groups are the connected components of that graph; isolated reviewers are
dropped.
"""
from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .corpus import Corpus

log = logging.getLogger(__name__)

LARGE_GROUP = 25

Edge = tuple[str, str]


def _edge(a: str, b: str) -> Edge:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class CoReviewNetwork:
    group_id: str
    reviewers: tuple[str, ...]
    edges: frozenset[Edge]

    def __post_init__(self) -> None:
        if len(self.reviewers) < 2:
            raise ValueError(f"{self.group_id}: a network needs at least 2 reviewers")
        members = set(self.reviewers)
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"{self.group_id}: self-loop on {a}")
            if a not in members or b not in members:
                raise ValueError(f"{self.group_id}: edge ({a}, {b}) leaves the network")

    @property
    def size(self) -> int:
        return len(self.reviewers)

    @property
    def oversized(self) -> bool:
        return self.size > LARGE_GROUP

    def neighbors(self) -> dict[str, set[str]]:
        adj: dict[str, set[str]] = {r: set() for r in self.reviewers}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def degree(self) -> dict[str, int]:
        return {r: len(n) for r, n in self.neighbors().items()}

    def adjacency(self, ordering: Iterable[str]) -> np.ndarray:
        ordering = list(ordering)
        pos = {r: i for i, r in enumerate(ordering)}
        a = np.zeros((len(ordering), len(ordering)), dtype=np.int8)
        for u, v in self.edges:
            a[pos[u], pos[v]] = a[pos[v], pos[u]] = 1
        return a


def co_review_edges(corpus: Corpus, window_days: int = 28, min_items: int = 2) -> set[Edge]:
    # per item: sort by (rating, date) and sweep each rating run with a sliding window
    by_item: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for r in corpus.reviews:
        by_item[r.item_id].append((r.rating, r.date, r.reviewer_id))
    shared: dict[Edge, set[str]] = defaultdict(set)
    for item, rows in by_item.items():
        rows.sort()
        for i, (rating, day, rid) in enumerate(rows):
            j = i + 1
            while j < len(rows) and rows[j][0] == rating and rows[j][1] - day <= window_days:
                other = rows[j][2]
                if other != rid:
                    shared[_edge(rid, other)].add(item)
                j += 1
    return {e for e, items in shared.items() if len(items) >= min_items}


def candidate_groups(edges: Iterable[Edge]) -> list[CoReviewNetwork]:
    """Connected components (size >= 2), ordered by their smallest reviewer id."""
    edges = list(edges)
    adj: dict[str, set[str]] = defaultdict(set)
    for a, b in edges:
        if a == b:
            continue
        adj[a].add(b)
        adj[b].add(a)
    seen: set[str] = set()
    comps: list[list[str]] = []
    for start in sorted(adj):
        if start in seen:
            continue
        seen.add(start)
        comp, queue = [], deque([start])
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
    comps.sort(key=lambda c: c[0])
    comp_of = {r: i for i, comp in enumerate(comps) for r in comp}
    comp_edges: list[set[Edge]] = [set() for _ in comps]
    for a, b in edges:
        if a != b:
            comp_edges[comp_of[a]].add(_edge(a, b))
    out = []
    for i, comp in enumerate(comps):
        net = CoReviewNetwork(f"cg{i:05d}", tuple(comp), frozenset(comp_edges[i]))
        if net.oversized:
            log.warning("candidate group %s has %d reviewers (> %d)", net.group_id, net.size, LARGE_GROUP)
        out.append(net)
    return out


def build_networks(corpus: Corpus, window_days: int = 28, min_items: int = 2) -> list[CoReviewNetwork]:
    return candidate_groups(co_review_edges(corpus, window_days, min_items))

