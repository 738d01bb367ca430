"""Indicator tables, region splits, metrics and the planted-signal synthetic LBKG."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy.spatial import Delaunay

from .kg import Entity, Fact, KnowledgeGraph, Schema, default_schema, save_kg
from .metapath import MetaPathSchema, instance_counts, parse_metapath

INDICATORS = ("population", "commercial", "user_activity", "rating")


class DataError(ValueError):
    pass


class MetricsError(ValueError):
    pass


def metrics(pred, truth) -> dict[str, float]:
    """MAE, RMSE and R² (with the mean taken over ``truth``)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape or pred.size == 0:
        raise MetricsError(f"prediction/target shapes {pred.shape} and {truth.shape} differ or are empty")
    resid = pred - truth
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricsError("R² is undefined for constant targets")
    return {
        "MAE": float(np.mean(np.abs(resid))),
        "RMSE": math.sqrt(ss_res / truth.size),
        "R2": 1.0 - ss_res / ss_tot,
    }


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


def split(regions: Sequence[str], spec: SplitSpec = SplitSpec()) -> dict[str, list[str]]:
    """Random partition into train/val/test; val and test sizes are floored, the remainder goes to train."""
    regions = sorted(regions)
    n = len(regions)
    if n < 5:
        raise DataError(f"need at least 5 regions to split, got {n}")
    n_val = int(math.floor(spec.ratios[1] * n + 1e-9))
    n_test = int(math.floor(spec.ratios[2] * n + 1e-9))
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [regions[i] for i in order]
    test = sorted(shuffled[:n_test])
    val = sorted(shuffled[n_test : n_test + n_val])
    train = sorted(shuffled[n_test + n_val :])
    return {"train": train, "val": val, "test": test}


class RegionIndicatorTable:
    """One value per (region, indicator)."""

    def __init__(self, rows: Iterable[tuple[str, str, float]] = ()):
        self._values: dict[str, dict[str, float]] = {}
        for region, indicator, value in rows:
            self.set(region, indicator, value)

    def set(self, region: str, indicator: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise DataError(f"non-finite value for ({region}, {indicator})")
        col = self._values.setdefault(indicator, {})
        if region in col:
            raise DataError(f"duplicate value for ({region}, {indicator})")
        col[region] = value

    @property
    def indicators(self) -> list[str]:
        return [i for i in INDICATORS if i in self._values] + sorted(set(self._values) - set(INDICATORS))

    def regions(self, indicator: str) -> list[str]:
        return sorted(self._values[indicator])

    def values(self, indicator: str, regions: Sequence[str]) -> np.ndarray:
        col = self._values[indicator]
        try:
            return np.array([col[r] for r in regions], dtype=np.float64)
        except KeyError as exc:
            raise DataError(f"no {indicator} value for region {exc.args[0]!r}") from None

    def rows(self):
        for ind in self.indicators:
            for region in sorted(self._values[ind]):
                yield region, ind, self._values[ind][region]

    def validate(self, kg: KnowledgeGraph) -> None:
        for region, ind, _ in self.rows():
            if region not in kg.entities or kg.entities[region] != "Region":
                raise DataError(f"indicator row for {region!r} does not name a Region in the graph")

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region_id", "indicator", "value"])
            for region, ind, value in self.rows():
                w.writerow([region, ind, repr(value)])

    @classmethod
    def load(cls, path: str | Path) -> "RegionIndicatorTable":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["region_id", "indicator", "value"]:
                raise DataError(f"{path}: header must be region_id,indicator,value")
            return cls((r["region_id"], r["indicator"], float(r["value"])) for r in reader)


def _default_planted() -> dict[str, list[tuple[str, float]]]:
    return {
        "population": [("Region -[Has]-> POI -[BelongTo]-> BusinessArea", 1.0)],
        "commercial": [("Region -[HasStoreOf]-> Brand -[RelatedBrand]-> Brand", 1.0)],
        "user_activity": [("Region -[Has]-> POI -[Competitive]-> POI -[LocateAt]-> Region", 1.0)],
        "rating": [("Region -[ServedBy]-> BusinessArea -[Contain]-> POI", 1.0)],
    }


DEFAULT_DENSITY = {
    "branded": 0.5,
    "competitive": 0.35,
    "related_brand": 0.15,
    "business_area_radius": 0.22,
    "business_area_join": 0.6,
    "population_flow": 2.0,
    "nearby_radius": 0.18,
    "similar_function": 3.0,
}


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic LBKG.

    ``noise_std`` is in units of the standard deviation of the noiseless
    planted signal, so the attainable R² does not depend on count scale.
    """

    n_regions: int = 50
    pois_per_region: float = 12.0
    n_category1: int = 6
    n_category2: int = 18
    n_category3: int = 48
    n_brands: int = 40
    n_business_areas: int = 8
    density: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_DENSITY))
    planted: dict[str, list[tuple[str, float]]] = field(default_factory=_default_planted)
    noise_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if self.n_regions < 5:
            raise DataError("need at least 5 regions")
        unknown = set(self.density) - set(DEFAULT_DENSITY)
        if unknown:
            raise DataError(f"unknown density keys: {sorted(unknown)}")
        self.density = {**DEFAULT_DENSITY, **{k: float(v) for k, v in self.density.items()}}
        self.planted = {k: [(str(p), float(w)) for p, w in v] for k, v in self.planted.items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SyntheticSpec":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "planted" in data:
            data["planted"] = {k: [tuple(x) for x in v] for k, v in data["planted"].items()}
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted"] = {k: [[p, w] for p, w in v] for k, v in self.planted.items()}
        return d


LITE = SyntheticSpec()
FULL = SyntheticSpec(n_regions=500, pois_per_region=5.0, n_brands=120, n_business_areas=60,
                     density={**LITE.density, "business_area_radius": 0.1, "nearby_radius": 0.06})


@dataclass
class SyntheticDataset:
    kg: KnowledgeGraph
    indicators: RegionIndicatorTable
    manifest: dict
    counts: dict[str, np.ndarray]  # indicator -> (n_regions, n_planted) count features

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_kg(self.kg, out / "entities.tsv", out / "facts.tsv")
        self.indicators.save(out / "indicators.csv")
        (out / "schema.tsv").write_text(self.kg.schema.to_text(), encoding="utf-8")
        with open(out / "manifest.yaml", "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.manifest, fh, sort_keys=False)


def _ids(prefix: str, n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"{prefix}:{i:0{width}d}" for i in range(n)]


def _build_kg(spec: SyntheticSpec, schema: Schema, rng: np.random.Generator) -> KnowledgeGraph:
    d = spec.density
    regions = _ids("region", spec.n_regions)
    cat1 = _ids("cat1", spec.n_category1)
    cat2 = _ids("cat2", spec.n_category2)
    cat3 = _ids("cat3", spec.n_category3)
    brands = _ids("brand", spec.n_brands)
    areas = _ids("ba", spec.n_business_areas)
    ents = [Entity(r, "Region") for r in regions]
    ents += [Entity(c, "Category1") for c in cat1] + [Entity(c, "Category2") for c in cat2]
    ents += [Entity(c, "Category3") for c in cat3] + [Entity(b, "Brand") for b in brands]
    ents += [Entity(a, "BusinessArea") for a in areas]
    facts: list[Fact] = []

    def pair(h, r, t, inv=None):
        facts.append(Fact(h, r, t))
        if inv:
            facts.append(Fact(t, inv, h))

    # category tree: cat3 -> cat2 -> cat1
    parent2 = {c: cat1[i % len(cat1)] for i, c in enumerate(cat2)}
    parent3 = {c: cat2[i % len(cat2)] for i, c in enumerate(cat3)}
    for c2, c1 in parent2.items():
        pair(c2, "IsSubCategoryOf_2to1", c1, "IsBroadCategoryOf_1to2")
    for c3, c2 in parent3.items():
        pair(c3, "IsSubCategoryOf_3to2", c2, "IsBroadCategoryOf_2to3")
        pair(c3, "IsSubCategoryOf_3to1", parent2[c2], "IsBroadCategoryOf_1to3")
    cat3_by_cat1: dict[str, list[str]] = {c: [] for c in cat1}
    for c3, c2 in parent3.items():
        cat3_by_cat1[parent2[c2]].append(c3)

    brand_cat3 = {b: cat3[int(rng.integers(len(cat3)))] for b in brands}
    for b, c3 in brand_cat3.items():
        c2 = parent3[c3]
        pair(b, "BelongToCategory3", c3, "Category3HasBrandOf")
        pair(b, "BelongToCategory2", c2, "Category2HasBrandOf")
        pair(b, "BelongToCategory1", parent2[c2], "Category1HasBrandOf")
    brands_by_cat1: dict[str, list[str]] = {c: [] for c in cat1}
    for b, c3 in brand_cat3.items():
        brands_by_cat1[parent2[parent3[c3]]].append(b)
    for i, a in enumerate(brands):
        for b in brands[i + 1 :]:
            same = parent2[parent3[brand_cat3[a]]] == parent2[parent3[brand_cat3[b]]]
            if same and rng.random() < d["related_brand"]:
                pair(a, "RelatedBrand", b, "RelatedBrand")

    # regions: positions, per-region latent factors decorrelate the planted counts
    pos = rng.random((spec.n_regions, 2))
    activity = rng.lognormal(0.0, 0.5, spec.n_regions)
    branded = np.clip(d["branded"] * rng.lognormal(0.0, 0.5, spec.n_regions), 0.0, 0.95)
    compet = np.clip(d["competitive"] * rng.lognormal(0.0, 0.6, spec.n_regions), 0.0, 1.0)
    profile = rng.dirichlet(np.full(len(cat1), 0.7), spec.n_regions)

    tri = Delaunay(pos)
    border = set()
    for simplex in tri.simplices:
        for a in simplex:
            for b in simplex:
                if a != b:
                    border.add((int(a), int(b)))
    for a, b in sorted(border):
        pair(regions[a], "BorderBy", regions[b])
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    for a in range(spec.n_regions):
        for b in range(spec.n_regions):
            if a != b and dist[a, b] < d["nearby_radius"]:
                pair(regions[a], "NearBy", regions[b])

    # population flow, proximity weighted
    for a in range(spec.n_regions):
        k = int(rng.poisson(d["population_flow"] * activity[a]))
        if k == 0:
            continue
        w = np.exp(-dist[a] / 0.25)
        w[a] = 0.0
        k = min(k, spec.n_regions - 1)
        for b in rng.choice(spec.n_regions, size=k, replace=False, p=w / w.sum()):
            pair(regions[a], "PopulationFlowTo", regions[int(b)], None)
            pair(regions[int(b)], "PopulationInflowFrom", regions[a], None)

    # business areas
    centers = rng.random((spec.n_business_areas, 2))
    served: dict[int, list[int]] = {a: [] for a in range(spec.n_regions)}
    for k, area in enumerate(areas):
        near = np.linalg.norm(pos - centers[k], axis=1) < d["business_area_radius"]
        for a in np.flatnonzero(near):
            served[int(a)].append(k)
            pair(regions[int(a)], "ServedBy", area, "Serve")

    # POIs
    poi_counts = rng.poisson(spec.pois_per_region * activity)
    poi_id = 0
    n_pois = int(poi_counts.sum())
    width = max(4, len(str(max(n_pois - 1, 0))))
    pois_by_region: list[list[tuple[str, str]]] = []
    stores: set[tuple[str, str]] = set()
    for a in range(spec.n_regions):
        here = []
        for _ in range(int(poi_counts[a])):
            p = f"poi:{poi_id:0{width}d}"
            poi_id += 1
            ents.append(Entity(p, "POI"))
            c1 = cat1[int(rng.choice(len(cat1), p=profile[a]))]
            brand = None
            if rng.random() < branded[a] and brands_by_cat1[c1]:
                options = brands_by_cat1[c1]
                brand = options[int(rng.integers(len(options)))]
                c3 = brand_cat3[brand]
            else:
                options = cat3_by_cat1[c1]
                c3 = options[int(rng.integers(len(options)))]
            c2 = parent3[c3]
            pair(regions[a], "Has", p, None)
            pair(p, "LocateAt", regions[a], None)
            pair(p, "HasCategory3Of", c3, "Category3ExistIn")
            pair(p, "HasCategory2Of", c2, "Category2ExistIn")
            pair(p, "HasCategory1Of", parent2[c2], "Category1ExistIn")
            if brand is not None:
                pair(p, "HasBrandOf", brand, "BrandExistIn")
            if served[a] and rng.random() < d["business_area_join"]:
                k = served[a][int(rng.integers(len(served[a])))]
                pair(p, "BelongTo", areas[k], "Contain")
            here.append((p, c1))
            if brand is not None:
                stores.add((regions[a], brand))
        pois_by_region.append(here)

    store_pairs = sorted(stores)
    for r, b in store_pairs:
        pair(r, "HasStoreOf", b, None)
        pair(b, "HasPlacedStoreAt", r, None)

    # POIs of the same top-level category in the same region compete with a region-specific probability
    for a in range(spec.n_regions):
        local = pois_by_region[a]
        for i, (p, cp) in enumerate(local):
            for q, cq in local[i + 1 :]:
                if cp == cq and rng.random() < compet[a]:
                    pair(p, "Competitive", q, "Competitive")

    # similar POI mix: k nearest profiles by cosine
    k_sim = int(d["similar_function"])
    norm = profile / np.linalg.norm(profile, axis=1, keepdims=True)
    sim = norm @ norm.T
    np.fill_diagonal(sim, -np.inf)
    for a in range(spec.n_regions):
        for b in np.argsort(-sim[a], kind="stable")[:k_sim]:
            pair(regions[a], "SimilarFunction", regions[int(b)])

    return KnowledgeGraph(schema, ents, facts)


def least_squares_r2(features: np.ndarray, y: np.ndarray, train_idx, test_idx) -> float:
    """Ordinary least squares with intercept fit on ``train_idx``; R² on ``test_idx``."""
    X = np.column_stack([np.ones(len(y)), features])
    coef, *_ = np.linalg.lstsq(X[train_idx], y[train_idx], rcond=None)
    return metrics(X[test_idx] @ coef, y[test_idx])["R2"]


def generate_synthetic(spec: SyntheticSpec, schema: Schema | None = None) -> SyntheticDataset:
    schema = schema or default_schema()
    rng = np.random.default_rng(spec.seed)
    kg = _build_kg(spec, schema, rng)
    regions = list(kg.regions)
    table = RegionIndicatorTable()
    counts: dict[str, np.ndarray] = {}
    planted_info = {}
    oracle = {}
    parts = split(regions, SplitSpec(seed=spec.seed))
    index = {r: i for i, r in enumerate(regions)}
    train_idx = [index[r] for r in parts["train"]]
    held_idx = [index[r] for r in parts["val"] + parts["test"]]
    noise_rng = np.random.default_rng([spec.seed, 1])
    for indicator in sorted(spec.planted):
        paths: list[MetaPathSchema] = [parse_metapath(p, schema) for p, _ in spec.planted[indicator]]
        weights = np.array([w for _, w in spec.planted[indicator]])
        feats = np.zeros((len(regions), len(paths)))
        for k, mp in enumerate(paths):
            c = instance_counts(kg, mp)
            if sum(c.values()) == 0:
                raise DataError(f"planted path {mp} for {indicator} has zero instances in the generated graph")
            feats[:, k] = [c[r] for r in regions]
        signal = feats @ weights
        sd = float(signal.std())
        noise = noise_rng.normal(0.0, spec.noise_std * sd, len(regions)) if spec.noise_std > 0 else 0.0
        values = signal + noise
        for r, v in zip(regions, values):
            table.set(r, indicator, float(v))
        counts[indicator] = feats
        planted_info[indicator] = [{"path": str(mp), "weight": float(w)} for mp, w in zip(paths, weights)]
        oracle[indicator] = least_squares_r2(feats, values, train_idx, held_idx)
    manifest = {
        "generator": "slak.dataio.generate_synthetic",
        "spec": spec.to_dict(),
        "schema_sha256": schema.digest(),
        "kg_sha256": kg.digest(),
        "n_entities": len(kg.entities),
        "n_facts": len(kg.facts),
        "n_regions": len(regions),
        "planted": planted_info,
        "oracle_r2_heldout": oracle,
        "split_seed": spec.seed,
    }
    return SyntheticDataset(kg, table, manifest, counts)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
