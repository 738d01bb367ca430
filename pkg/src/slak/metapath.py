"""Meta-path schemas: a small arrow DSL, natural-language rendering, and matching.

Textual form::

    Region -[Has]-> POI -[Competitive]-> POI -[LocateAt]-> Region  # label

Matching is a forward join in schema order over the relation-indexed
adjacency of a :class:`~slak.kg.KnowledgeGraph`. Path instances may revisit
entities.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import sparse

from .kg import ENTITY_TYPES, Fact, KnowledgeGraph, Schema, default_schema

MAX_HOPS = 6
START_TYPE = "Region"


class MetaPathError(ValueError):
    pass


@dataclass(frozen=True)
class MetaPathSchema:
    start_type: str
    hops: tuple[tuple[str, str], ...]
    label: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple((str(r), str(t)) for r, t in self.hops))

    def __len__(self) -> int:
        return len(self.hops)

    def __str__(self) -> str:
        return format_metapath(self, with_label=False)

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.hops)

    @property
    def types(self) -> tuple[str, ...]:
        return (self.start_type,) + tuple(t for _, t in self.hops)

    @property
    def end_type(self) -> str:
        return self.types[-1]

    def with_label(self, label: str | None) -> "MetaPathSchema":
        return MetaPathSchema(self.start_type, self.hops, label)


def validate_metapath(mp: MetaPathSchema, schema: Schema | None = None) -> MetaPathSchema:
    schema = schema or default_schema()
    if mp.start_type != START_TYPE:
        raise MetaPathError(f"start type must be {START_TYPE}, got {mp.start_type}")
    if not mp.hops:
        raise MetaPathError("meta-path needs at least one hop")
    if len(mp.hops) > MAX_HOPS:
        raise MetaPathError(f"meta-path has {len(mp.hops)} hops; at most {MAX_HOPS} allowed")
    current = mp.start_type
    for i, (rname, next_type) in enumerate(mp.hops, start=1):
        if rname not in schema:
            raise MetaPathError(f"unknown relation {rname!r} at hop {i}")
        if next_type not in ENTITY_TYPES:
            raise MetaPathError(f"unknown entity type {next_type!r} at hop {i}")
        rel = schema.relation(rname)
        if rel.head_type != current:
            raise MetaPathError(
                f"type-chain mismatch at hop {i}: {rname} starts at {rel.head_type}, path is at {current}"
            )
        if rel.tail_type != next_type:
            raise MetaPathError(
                f"type-chain mismatch at hop {i}: {rname} ends at {rel.tail_type}, path says {next_type}"
            )
        current = next_type
    return mp


_TOKEN = re.compile(r"\s*(?:(?P<arrow>-\[\s*(?P<rel>[A-Za-z_][\w]*)\s*\]->)|(?P<type>[A-Za-z_]\w*))")


def parse_metapath(text: str, schema: Schema | None = None) -> MetaPathSchema:
    """Parse ``EntityType ( -[Rel]-> EntityType )+`` with an optional ``# label`` and validate it."""
    body, _, label = text.partition("#")
    label = label.strip() or None
    body = body.rstrip()
    pos = 0
    items: list[tuple[str, str]] = []
    expect_type = True
    while pos < len(body):
        m = _TOKEN.match(body, pos)
        if m is None or m.end() == pos:
            raise MetaPathError(f"syntax error at position {pos}: {body[pos:pos + 20]!r}")
        if m.group("type"):
            if not expect_type:
                raise MetaPathError(f"syntax error at position {m.start('type')}: expected '-[Relation]->'")
            items.append(("type", m.group("type")))
        else:
            if expect_type:
                raise MetaPathError(f"syntax error at position {m.start('arrow')}: expected entity type")
            items.append(("rel", m.group("rel")))
        expect_type = not expect_type
        pos = m.end()
    if not items:
        raise MetaPathError("syntax error at position 0: empty meta-path")
    if expect_type:
        raise MetaPathError(f"syntax error at position {len(body)}: path ends with a relation")
    if len(items) < 3:
        raise MetaPathError("syntax error: meta-path needs at least one hop")
    start = items[0][1]
    hops = tuple((items[i][1], items[i + 1][1]) for i in range(1, len(items), 2))
    return validate_metapath(MetaPathSchema(start, hops, label), schema)


def format_metapath(mp: MetaPathSchema, with_label: bool = True) -> str:
    text = mp.start_type + "".join(f" -[{r}]-> {t}" for r, t in mp.hops)
    if with_label and mp.label:
        text += f"  # {mp.label}"
    return text


def to_natural_language(mp: MetaPathSchema) -> str:
    """Nested-clause sentence, e.g. ``Region THAT Has POI THAT LocateAt Region``."""
    return mp.start_type + "".join(f" THAT {r} {t}" for r, t in mp.hops)


def load_metapath_file(path: str | Path, schema: Schema | None = None) -> list[MetaPathSchema]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(parse_metapath(line, schema))
        except MetaPathError as exc:
            raise MetaPathError(f"{path}:{lineno}: {exc}") from None
    return out


def save_metapath_file(paths: Iterable[MetaPathSchema], path: str | Path) -> None:
    Path(path).write_text("".join(format_metapath(mp) + "\n" for mp in paths), encoding="utf-8")


def _check_against(kg: KnowledgeGraph, mp: MetaPathSchema) -> None:
    validate_metapath(mp, kg.schema)


def iter_paths(kg: KnowledgeGraph, mp: MetaPathSchema) -> Iterator[tuple[str, ...]]:
    """Depth-first enumeration in lexicographic order of entity ids."""
    _check_against(kg, mp)
    indices = [kg.forward_index(r) for r in mp.relations]
    depth = len(indices)

    def expand(prefix: list[str], k: int):
        if k == depth:
            yield tuple(prefix)
            return
        for nxt in indices[k].get(prefix[-1], ()):
            prefix.append(nxt)
            yield from expand(prefix, k + 1)
            prefix.pop()

    for region in kg.regions:
        yield from expand([region], 0)


def match_paths(kg: KnowledgeGraph, mp: MetaPathSchema, limit: int | None = None) -> list[tuple[str, ...]]:
    out = []
    for inst in iter_paths(kg, mp):
        if limit is not None and len(out) >= limit:
            break
        out.append(inst)
    return out


def _adjacency(kg: KnowledgeGraph, relation: str, index: dict[str, int]) -> sparse.csr_matrix:
    rows, cols = [], []
    for h, tails in kg.forward_index(relation).items():
        for t in tails:
            rows.append(index[h])
            cols.append(index[t])
    n = len(index)
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def instance_counts(kg: KnowledgeGraph, mp: MetaPathSchema) -> dict[str, int]:
    """Number of path instances starting at each region, by dynamic programming (no enumeration)."""
    _check_against(kg, mp)
    ids = kg.entity_ids
    index = {e: i for i, e in enumerate(ids)}
    vec = np.ones(len(ids))
    for rel in reversed(mp.relations):
        vec = _adjacency(kg, rel, index) @ vec
    return {r: int(round(vec[index[r]])) for r in kg.regions}


def count_instances(kg: KnowledgeGraph, mp: MetaPathSchema, region: str) -> int:
    if kg.etype(region) != START_TYPE:
        raise MetaPathError(f"{region!r} is not a Region")
    return instance_counts(kg, mp)[region]


@dataclass(frozen=True)
class SubKG:
    """Facts of a parent graph lying on at least one instance of ``metapath``."""

    parent: KnowledgeGraph
    metapath: MetaPathSchema
    facts: tuple[Fact, ...]
    entities: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.facts)

    @property
    def schema(self) -> Schema:
        return self.parent.schema

    @property
    def entity_ids(self) -> list[str]:
        return list(self.entities)

    @property
    def relations_present(self) -> list[str]:
        present = {f.relation for f in self.facts}
        return [r for r in self.schema.names if r in present]

    def edges_by_relation(self) -> dict[str, list[tuple[str, str]]]:
        out: dict[str, list[tuple[str, str]]] = {}
        for h, r, t in self.facts:
            out.setdefault(r, []).append((h, t))
        return out


def extract_subkg(kg: KnowledgeGraph, mp: MetaPathSchema) -> SubKG:
    """Union of facts along all matched paths.

    Uses forward reachability from the regions and backward viability toward the
    path end, so a fact is kept iff it sits on some complete instance; no path
    enumeration is needed.
    """
    _check_against(kg, mp)
    rels = mp.relations
    depth = len(rels)
    reach = [set(kg.regions)]
    for r in rels:
        idx = kg.forward_index(r)
        reach.append({t for h in reach[-1] for t in idx.get(h, ())})
    viable: list[set[str]] = [set() for _ in range(depth + 1)]
    viable[depth] = reach[depth]
    for k in range(depth - 1, -1, -1):
        idx = kg.forward_index(rels[k])
        viable[k] = {h for h in reach[k] if any(t in viable[k + 1] for t in idx.get(h, ()))}
    facts = set()
    for k, r in enumerate(rels):
        idx = kg.forward_index(r)
        for h in viable[k]:
            for t in idx.get(h, ()):
                if t in viable[k + 1]:
                    facts.add(Fact(h, r, t))
    ordered = tuple(sorted(facts))
    ents = tuple(sorted({f.head for f in ordered} | {f.tail for f in ordered}))
    return SubKG(kg, mp, ordered, ents)
