"""Typed location-based knowledge graph: schema, entities, facts and indices."""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple

logger = logging.getLogger(__name__)

ENTITY_TYPES = (
    "Region",
    "POI",
    "Category1",
    "Category2",
    "Category3",
    "Brand",
    "BusinessArea",
)
FORWARD = "forward"
REVERSE = "reverse"


class SchemaError(ValueError):
    pass


class KGError(ValueError):
    pass


@dataclass(frozen=True)
class RelationType:
    name: str
    head_type: str
    tail_type: str
    description: str = ""


class Schema:
    """Closed set of entity types plus a list of typed, uniquely named relations."""

    entity_types = ENTITY_TYPES

    def __init__(self, relations: Iterable[RelationType]):
        self.relations = tuple(relations)
        self._by_name: dict[str, RelationType] = {}
        for rel in self.relations:
            for etype in (rel.head_type, rel.tail_type):
                if etype not in ENTITY_TYPES:
                    raise SchemaError(f"unknown entity type {etype!r} in relation {rel.name!r}")
            if rel.name in self._by_name:
                raise SchemaError(f"duplicate relation name {rel.name!r}")
            self._by_name[rel.name] = rel

    def __len__(self) -> int:
        return len(self.relations)

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self.relations)

    def __repr__(self) -> str:
        return f"Schema({len(self)} relations)"

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.relations]

    def relation(self, name: str) -> RelationType:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown relation {name!r}") from None

    def outgoing(self, etype: str) -> list[RelationType]:
        """Relations whose head type is ``etype``, in schema order."""
        return [r for r in self.relations if r.head_type == etype]

    def to_text(self) -> str:
        lines = ["# relation\thead_type\ttail_type\tdescription"]
        for r in self.relations:
            lines.append("\t".join([r.name, r.head_type, r.tail_type, r.description]).rstrip("\t"))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        body = "\n".join(f"{r.name}\t{r.head_type}\t{r.tail_type}" for r in self.relations)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


def parse_schema(text: str, source: str = "<schema>") -> Schema:
    relations = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = [c.strip() for c in (raw.split("\t") if "\t" in raw else line.split(None, 3))]
        if len(cols) < 3 or not all(cols[:3]):
            raise SchemaError(f"{source}:{lineno}: expected relation, head_type, tail_type")
        name, head, tail = cols[:3]
        desc = cols[3] if len(cols) > 3 else ""
        for etype in (head, tail):
            if etype not in ENTITY_TYPES:
                raise SchemaError(f"{source}:{lineno}: unknown entity type {etype!r}")
        if name in seen:
            raise SchemaError(f"{source}:{lineno}: duplicate relation name {name!r}")
        seen.add(name)
        relations.append(RelationType(name, head, tail, desc))
    return Schema(relations)


def load_schema(path: str | Path | None = None) -> Schema:
    """Load a tab-separated schema file; ``None`` loads the shipped 35-relation schema."""
    if path is None:
        text = resources.files("slak.data").joinpath("lbkg_schema.tsv").read_text("utf-8")
        return parse_schema(text, "lbkg_schema.tsv")
    path = Path(path)
    return parse_schema(path.read_text("utf-8"), str(path))


_DEFAULT_SCHEMA: Schema | None = None


def default_schema() -> Schema:
    global _DEFAULT_SCHEMA
    if _DEFAULT_SCHEMA is None:
        _DEFAULT_SCHEMA = load_schema()
    return _DEFAULT_SCHEMA


class Entity(NamedTuple):
    id: str
    etype: str


class Fact(NamedTuple):
    head: str
    relation: str
    tail: str


class KnowledgeGraph:
    """Immutable, type-checked fact set with forward and reverse adjacency per relation.

    Duplicate facts are dropped; the number dropped is kept in ``n_duplicates``.
    """

    def __copy__(self) -> "KnowledgeGraph":
        return self

    def __deepcopy__(self, memo) -> "KnowledgeGraph":
        # immutable, so estimator cloning can share the instance
        return self

    def __init__(self, schema: Schema, entities: Mapping[str, str] | Iterable[Entity], facts: Iterable[Fact]):
        self.schema = schema
        if isinstance(entities, Mapping):
            items = list(entities.items())
        else:
            items = [(e.id, e.etype) for e in entities]
        table: dict[str, str] = {}
        for eid, etype in items:
            if etype not in ENTITY_TYPES:
                raise KGError(f"unknown entity type {etype!r} for entity {eid!r}")
            if eid in table:
                raise KGError(f"duplicate entity id {eid!r}")
            table[eid] = etype
        self._entities = table
        self.entities = MappingProxyType(table)

        seen: set[Fact] = set()
        kept: list[Fact] = []
        dups = 0
        for fact in facts:
            fact = Fact(*fact)
            self._check_fact(fact)
            if fact in seen:
                dups += 1
                continue
            seen.add(fact)
            kept.append(fact)
        if dups:
            logger.warning("dropped %d duplicate facts", dups)
        self.n_duplicates = dups
        self.facts = tuple(kept)
        self._fact_set = frozenset(seen)

        fwd: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
        rev: dict[str, dict[str, list[str]]] = defaultdict(lambda: defaultdict(list))
        for h, r, t in kept:
            fwd[r][h].append(t)
            rev[r][t].append(h)
        self._fwd = {r: {k: tuple(sorted(v)) for k, v in m.items()} for r, m in fwd.items()}
        self._rev = {r: {k: tuple(sorted(v)) for k, v in m.items()} for r, m in rev.items()}
        self._by_type: dict[str, tuple[str, ...]] = {
            t: tuple(sorted(e for e, et in table.items() if et == t)) for t in ENTITY_TYPES
        }

    def _check_fact(self, fact: Fact) -> None:
        h, r, t = fact
        if r not in self.schema:
            raise KGError(f"unknown relation {r!r} in fact {tuple(fact)}")
        rel = self.schema.relation(r)
        for role, eid, want in (("head", h, rel.head_type), ("tail", t, rel.tail_type)):
            got = self._entities.get(eid)
            if got is None:
                raise KGError(f"unknown entity id {eid!r} in fact {tuple(fact)}")
            if got != want:
                raise KGError(f"{role} type {got} != {want} for relation {r}")

    def __len__(self) -> int:
        return len(self.facts)

    def __contains__(self, fact: object) -> bool:
        return fact in self._fact_set

    def __repr__(self) -> str:
        return f"KnowledgeGraph({len(self._entities)} entities, {len(self.facts)} facts)"

    @property
    def entity_ids(self) -> list[str]:
        return sorted(self._entities)

    @property
    def regions(self) -> tuple[str, ...]:
        return self._by_type["Region"]

    def entities_of_type(self, etype: str) -> tuple[str, ...]:
        if etype not in ENTITY_TYPES:
            raise KGError(f"unknown entity type {etype!r}")
        return self._by_type[etype]

    def etype(self, entity: str) -> str:
        try:
            return self._entities[entity]
        except KeyError:
            raise KGError(f"unknown entity {entity!r}") from None

    @property
    def relations_present(self) -> list[str]:
        return [r for r in self.schema.names if r in self._fwd]

    def neighbors(self, entity: str, relation: str, direction: str = FORWARD) -> list[str]:
        """Tails (forward) or heads (reverse) linked to ``entity`` by ``relation``, sorted by id."""
        self.etype(entity)
        if relation not in self.schema:
            raise KGError(f"unknown relation {relation!r}")
        if direction == FORWARD:
            index = self._fwd
        elif direction == REVERSE:
            index = self._rev
        else:
            raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")
        return list(index.get(relation, {}).get(entity, ()))

    def forward_index(self, relation: str) -> Mapping[str, tuple[str, ...]]:
        return self._fwd.get(relation, {})

    def edges_by_relation(self) -> dict[str, list[tuple[str, str]]]:
        out: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for h, r, t in self.facts:
            out[r].append((h, t))
        return dict(out)

    def digest(self) -> str:
        h = hashlib.sha256()
        for eid in sorted(self._entities):
            h.update(f"{eid}\t{self._entities[eid]}\n".encode("utf-8"))
        for f in sorted(self.facts):
            h.update("\t".join(f).encode("utf-8") + b"\n")
        return h.hexdigest()


def _read_rows(path: Path, ncols: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise KGError(f"{path}:{lineno}: expected {ncols} tab-separated columns, got {len(cols)}")
            yield lineno, [c.strip() for c in cols]


def load_kg(entities_path: str | Path, facts_path: str | Path, schema: Schema | None = None) -> KnowledgeGraph:
    schema = schema or default_schema()
    entities_path, facts_path = Path(entities_path), Path(facts_path)
    entities = [Entity(eid, etype) for _, (eid, etype) in _read_rows(entities_path, 2)]
    facts = []
    for lineno, (h, r, t) in _read_rows(facts_path, 3):
        facts.append(Fact(h, r, t))
    try:
        return KnowledgeGraph(schema, entities, facts)
    except KGError as exc:
        raise KGError(f"{facts_path}: {exc}") from None


def save_kg(kg: KnowledgeGraph, entities_path: str | Path, facts_path: str | Path) -> None:
    with open(entities_path, "w", encoding="utf-8") as fh:
        for eid in sorted(kg.entities):
            fh.write(f"{eid}\t{kg.entities[eid]}\n")
    with open(facts_path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.facts:
            fh.write(f"{h}\t{r}\t{t}\n")
