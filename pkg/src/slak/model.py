"""The SLAK predictor and its two training rounds.

A global R-GCN over the whole graph and one R-GCN per meta-path sub-KG
produce region embeddings. Sub-KG embeddings are fused with semantic
attention and added to the global ones; in round 2 the embeddings saved by
the other tasks are fused with task-description queries and added on top.
A two-layer MLP maps the result to one value per region.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import yaml
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .dataio import RegionIndicatorTable, metrics
from .fusion import D_LLM, EmbeddingProvider, FusionResult, attend, fuse, fuse_cross_task
from .kg import KnowledgeGraph
from .metapath import MetaPathSchema, SubKG, extract_subkg, to_natural_language
from .numerics import (
    AdamState,
    NumericsError,
    ParameterSet,
    Tensor,
    adam_step,
    add,
    constant,
    gather_rows,
    matmul,
    mse,
    relu,
    scale,
)
from .rgcn import GraphView, RGCNEncoder, encode

logger = logging.getLogger(__name__)

TRANSFORMS = ("zscore", "log-zscore")


class TrainingError(RuntimeError):
    pass


@dataclass
class SLAKConfig:
    d_h: int = 64
    n_layers: int = 2
    lr: float = 1e-3
    max_epochs: int = 500
    patience: int = 20
    n_metapaths: int = 3
    seed: int = 0
    normalization: str = "mean"
    no_self_update: bool = False
    no_rec: bool = False
    no_trans: bool = False
    no_attn: bool = False
    target_transform: str | dict[str, str] = "zscore"
    embed_init_std: float = 0.1
    global_normalization: str | None = None
    type_embedding: bool = True

    def __post_init__(self):
        if self.n_metapaths < 1:
            raise ValueError("n_metapaths must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must be positive and smaller than max_epochs")
        if self.normalization not in ("none", "mean"):
            raise ValueError(f"normalization must be 'none' or 'mean', got {self.normalization!r}")
        if self.global_normalization not in (None, "none", "mean"):
            raise ValueError(f"global_normalization must be null, 'none' or 'mean', got {self.global_normalization!r}")
        specs = self.target_transform.values() if isinstance(self.target_transform, dict) else [self.target_transform]
        for t in specs:
            if t not in TRANSFORMS:
                raise ValueError(f"unknown target transform {t!r}")

    def transform_for(self, indicator: str) -> str:
        if isinstance(self.target_transform, dict):
            return self.target_transform.get(indicator, "zscore")
        return self.target_transform

    @property
    def ablations(self) -> list[str]:
        return [f for f in ("no_self_update", "no_rec", "no_trans", "no_attn") if getattr(self, f)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SLAKConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def load(cls, path: str | Path) -> "SLAKConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


class TargetTransform:
    """z-score (optionally after ``log1p``) fitted on the training targets."""

    def __init__(self, kind: str = "zscore"):
        if kind not in TRANSFORMS:
            raise ValueError(f"unknown target transform {kind!r}")
        self.kind = kind

    def fit(self, y) -> "TargetTransform":
        z = self._pre(np.asarray(y, dtype=np.float64))
        self.mean_ = float(z.mean())
        self.std_ = float(z.std()) or 1.0
        return self

    def _pre(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "log-zscore":
            if np.any(y <= -1):
                raise ValueError("log-zscore needs targets > -1")
            return np.log1p(y)
        return y

    def transform(self, y) -> np.ndarray:
        return (self._pre(np.asarray(y, dtype=np.float64)) - self.mean_) / self.std_

    def inverse_transform(self, z) -> np.ndarray:
        y = np.asarray(z, dtype=np.float64) * self.std_ + self.mean_
        return np.expm1(y) if self.kind == "log-zscore" else y


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per model component, so adding a component never shifts the others."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class CrossTaskInputs(NamedTuple):
    task_queries: np.ndarray  # (n_other_tasks, d_llm)
    embeddings: list[np.ndarray]  # each (n_regions, d_h), rows in kg.regions order
    tasks: list[str]


class ForwardOutput(NamedTuple):
    pred: Tensor  # (n_regions, 1)
    embedding: Tensor  # fused region representation fed to the MLP
    metapath_weights: Tensor | None
    task_weights: Tensor | None


class SLAKModel:
    """Parameters and fixed graph inputs of one task's predictor."""

    def __init__(
        self,
        kg: KnowledgeGraph,
        metapaths: Sequence[MetaPathSchema],
        semantic: np.ndarray | None,
        d_h: int = 64,
        n_layers: int = 2,
        normalization: str = "mean",
        no_attn: bool = False,
        cross_task: CrossTaskInputs | None = None,
        embed_init_std: float = 0.1,
        global_normalization: str | None = None,
        type_embedding: bool = True,
        seed: int = 0,
        subkgs: Sequence[SubKG] | None = None,
    ):
        if len(metapaths) < 1:
            raise ValueError("at least one meta-path is required")
        self.kg = kg
        self.metapaths = list(metapaths)
        self.d_h = d_h
        self.no_attn = no_attn
        self.regions = list(kg.regions)
        self.params = params = ParameterSet()

        ids = kg.entity_ids
        self.table_index = {e: i for i, e in enumerate(ids)}
        table = params.add(
            "entity_embedding", component_rng(seed, "embedding").normal(0.0, embed_init_std, (len(ids), d_h))
        )
        self.type_table = None
        if type_embedding:
            # Shared per-type vector added to every entity row: with sum aggregation this lets
            # the encoders express instance counts that carry over to unseen regions.
            types = sorted({kg.etype(e) for e in ids})
            self.type_rows = np.array([types.index(kg.etype(e)) for e in ids], dtype=np.int64)
            self.type_table = params.add(
                "type_embedding", component_rng(seed, "type_embedding").normal(0.0, 1.0, (len(types), d_h))
            )
        dims = [d_h] * (n_layers + 1)

        self.global_view = GraphView(kg)
        self.global_encoder = RGCNEncoder(
            kg.relations_present, table, self.table_index, dims, params, "global",
            component_rng(seed, "global"), global_normalization or normalization,
        )
        self.global_rows = self.global_view.rows(self.regions)

        self.subkgs = list(subkgs) if subkgs is not None else [extract_subkg(kg, mp) for mp in self.metapaths]
        if len(self.subkgs) != len(self.metapaths):
            raise ValueError("sub-KGs and meta-paths are misaligned")
        self.sub_views = [GraphView(s, extra_entities=self.regions) for s in self.subkgs]
        self.sub_encoders = [
            RGCNEncoder(
                s.relations_present, table, self.table_index, dims, params, f"sub{k}",
                component_rng(seed, f"sub{k}"), normalization,
            )
            for k, s in enumerate(self.subkgs)
        ]
        self.sub_rows = [v.rows(self.regions) for v in self.sub_views]

        n_p = len(self.metapaths)
        if no_attn:
            self.semantic = None
            self.free_queries = params.add(
                "metapath_free_queries", component_rng(seed, "free_q").normal(0.0, 1.0 / math.sqrt(d_h), (n_p, d_h))
            )
        else:
            if semantic is None or np.shape(semantic) != (n_p, D_LLM):
                raise ValueError(f"need {n_p}x{D_LLM} meta-path semantic embeddings")
            self.semantic = np.asarray(semantic, dtype=np.float64)
            self.W_Q = params.add("metapath_W_Q", _glorot(component_rng(seed, "W_Q"), D_LLM, d_h))

        self.cross_task = cross_task if cross_task and cross_task.embeddings else None
        if self.cross_task is not None:
            for e in self.cross_task.embeddings:
                if np.shape(e) != (len(self.regions), d_h):
                    raise ValueError(f"saved embeddings must be {(len(self.regions), d_h)}, got {np.shape(e)}")
            n_o = len(self.cross_task.embeddings)
            if no_attn:
                self.task_free_queries = params.add(
                    "task_free_queries", component_rng(seed, "task_free_q").normal(0.0, 1.0 / math.sqrt(d_h), (n_o, d_h))
                )
            else:
                self.W_Q_task = params.add("task_W_Q", _glorot(component_rng(seed, "task_W_Q"), D_LLM, d_h))

        # Sum aggregation along long meta-paths can yield activations in the thousands. Each encoder's
        # region output is divided by its RMS at initialisation, a constant that keeps outputs linear in
        # the aggregated counts while putting every source on a comparable scale.
        g0, s0 = self._encode_regions(self.initial_embeddings())
        self.output_scales = [_inverse_rms(t.data) for t in [g0, *s0]]
        if self.cross_task is not None:
            self.cross_values = [np.asarray(e, dtype=np.float64) * _inverse_rms(e) for e in self.cross_task.embeddings]

        mlp_rng = component_rng(seed, "mlp")
        self.W1 = params.add("mlp.W1", _glorot(mlp_rng, d_h, d_h))
        self.b1 = params.add("mlp.b1", np.zeros(d_h))
        self.W2 = params.add("mlp.W2", _glorot(mlp_rng, d_h, 1))
        self.b2 = params.add("mlp.b2", np.zeros(1))

    def initial_embeddings(self) -> Tensor:
        table = self.global_encoder.table
        if self.type_table is None:
            return table
        return add(table, gather_rows(self.type_table, self.type_rows))

    def _encode_regions(self, e0: Tensor) -> tuple[Tensor, list[Tensor]]:
        g = gather_rows(encode(self.global_encoder, self.global_view, e0), self.global_rows)
        sources = [
            gather_rows(encode(enc, view, e0), rows)
            for enc, view, rows in zip(self.sub_encoders, self.sub_views, self.sub_rows)
        ]
        return g, sources

    def forward(self) -> ForwardOutput:
        g, sources = self._encode_regions(self.initial_embeddings())
        g = scale(g, self.output_scales[0])
        sources = [scale(s, c) for s, c in zip(sources, self.output_scales[1:])]
        if self.no_attn:
            fused: FusionResult = attend(self.free_queries, sources)
        else:
            fused = fuse(self.semantic, self.W_Q, sources)
        e_reg = add(g, fused.output)
        task_w = None
        if self.cross_task is not None:
            if self.no_attn:
                others = [constant(e, "saved_task_embedding") for e in self.cross_values]
                cross = attend(self.task_free_queries, others)
                e_reg, task_w = add(e_reg, cross.output), cross.weights
            else:
                e_reg, task_w = fuse_cross_task(
                    self.cross_task.task_queries, self.W_Q_task, self.cross_values, e_reg
                )
        h = relu(add(matmul(e_reg, self.W1), self.b1))
        pred = add(matmul(h, self.W2), self.b2)
        return ForwardOutput(pred, e_reg, fused.weights, task_w)


def _inverse_rms(x: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(x)))) if np.size(x) else 0.0
    return 1.0 / rms if rms > 0 else 1.0


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def forward(model: SLAKModel, regions: Sequence[str] | None = None) -> np.ndarray:
    """Predictions (in the model's training scale) for ``regions`` (default: all)."""
    pred = model.forward().pred.data[:, 0]
    if regions is None:
        return pred
    index = {r: i for i, r in enumerate(model.regions)}
    try:
        return pred[[index[r] for r in regions]]
    except KeyError as exc:
        raise ValueError(f"unknown region {exc.args[0]!r}") from None


def metapath_semantics(provider: EmbeddingProvider, metapaths: Sequence[MetaPathSchema]) -> np.ndarray:
    return provider.embed_many([to_natural_language(mp) for mp in metapaths])


def _region_ids(X) -> list[str]:
    arr = np.asarray(X, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"X must be a 1-d array of region ids, got shape {arr.shape}")
    return [str(x) for x in arr]


class SLAKRegressor(RegressorMixin, BaseEstimator):
    """Scikit-learn estimator around :class:`SLAKModel`.

    ``X`` is a column of region ids from ``kg``; ``y`` their indicator values.
    Early stopping watches ``eval_set`` when given, otherwise a seeded
    ``validation_fraction`` of the training regions.
    """

    def __init__(
        self,
        kg=None,
        metapaths=(),
        embedding_provider=None,
        d_h=64,
        n_layers=2,
        lr=1e-3,
        max_epochs=500,
        patience=20,
        normalization="mean",
        target_transform="zscore",
        no_attn=False,
        cross_task=None,
        embed_init_std=0.1,
        global_normalization=None,
        type_embedding=True,
        validation_fraction=0.25,
        random_state=0,
    ):
        self.kg = kg
        self.metapaths = metapaths
        self.embedding_provider = embedding_provider
        self.d_h = d_h
        self.n_layers = n_layers
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.normalization = normalization
        self.target_transform = target_transform
        self.no_attn = no_attn
        self.cross_task = cross_task
        self.embed_init_std = embed_init_std
        self.global_normalization = global_normalization
        self.type_embedding = type_embedding
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _check_regions(self, X) -> np.ndarray:
        ids = _region_ids(X)
        index = {r: i for i, r in enumerate(self.kg.regions)}
        missing = [r for r in ids if r not in index]
        if missing:
            raise ValueError(f"unknown region ids: {missing[:5]}")
        return np.array([index[r] for r in ids], dtype=np.int64)

    def _build(self) -> SLAKModel:
        if self.kg is None:
            raise ValueError("kg is required")
        provider = self.embedding_provider or EmbeddingProvider("fallback")
        semantic = None if self.no_attn else metapath_semantics(provider, self.metapaths)
        return SLAKModel(
            self.kg, list(self.metapaths), semantic, d_h=self.d_h, n_layers=self.n_layers,
            normalization=self.normalization, no_attn=self.no_attn, cross_task=self.cross_task,
            embed_init_std=self.embed_init_std, type_embedding=self.type_embedding,
            global_normalization=self.global_normalization, seed=self.random_state,
        )

    def fit(self, X, y, eval_set=None):
        train_idx = self._check_regions(X)
        y = column_or_1d(np.asarray(y, dtype=np.float64))
        if len(y) != len(train_idx):
            raise ValueError("X and y lengths differ")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        if eval_set is not None:
            X_val, y_val = eval_set
            val_idx = self._check_regions(X_val)
            y_val = column_or_1d(np.asarray(y_val, dtype=np.float64))
        else:
            order = np.random.default_rng(self.random_state).permutation(len(train_idx))
            n_val = max(1, int(len(order) * self.validation_fraction))
            val_sel, tr_sel = order[:n_val], order[n_val:]
            val_idx, y_val = train_idx[val_sel], y[val_sel]
            train_idx, y = train_idx[tr_sel], y[tr_sel]

        self.transform_ = TargetTransform(self.target_transform).fit(y)
        z_train = self.transform_.transform(y)
        z_val = self.transform_.transform(y_val)
        self.model_ = model = self._build()
        params = model.params
        state = AdamState(lr=self.lr)
        best = (math.inf, -1)
        snapshot = params.snapshot()
        best_out: ForwardOutput | None = None
        history = []
        wait = 0
        t0 = time.perf_counter()
        for epoch in range(self.max_epochs):
            params.zero_grad()
            try:
                out = model.forward()
                loss = mse(gather_rows(out.pred, train_idx), z_train)
            except NumericsError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            val_mse = float(np.mean((out.pred.data[val_idx, 0] - z_val) ** 2))
            history.append({"epoch": epoch, "train_mse": loss.item(), "val_mse": val_mse})
            if val_mse < best[0]:
                best = (val_mse, epoch)
                snapshot = params.snapshot()
                best_out = out
                wait = 0
            else:
                wait += 1
                if wait >= self.patience:
                    break
            loss.backward()
            adam_step(params, state)
        params.restore(snapshot)
        self.history_ = history
        self.best_epoch_, self.best_val_mse_ = best[1], best[0]
        self.n_epochs_ = len(history)
        self.fit_seconds_ = time.perf_counter() - t0
        self._cache(best_out)
        return self

    def _cache(self, out: ForwardOutput) -> None:
        self.pred_z_ = out.pred.data[:, 0].copy()
        self.region_embeddings_ = out.embedding.data.copy()
        self.metapath_weights_ = None if out.metapath_weights is None else out.metapath_weights.data.copy()
        self.task_weights_ = None if out.task_weights is None else out.task_weights.data.copy()

    def refresh(self) -> "SLAKRegressor":
        """Recompute cached outputs after parameters were changed in place."""
        check_is_fitted(self, "model_")
        self._cache(self.model_.forward())
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.transform_.inverse_transform(self.pred_z_[self._check_regions(X)])

    def transform(self, X) -> np.ndarray:
        """Fused pre-MLP region embeddings."""
        check_is_fitted(self, "model_")
        return self.region_embeddings_[self._check_regions(X)]


@dataclass
class TaskContext:
    name: str
    metapaths: list[MetaPathSchema]
    description: str
    region_embeddings: np.ndarray | None = None


def task_descriptions() -> dict[str, str]:
    text = resources.files("slak.data").joinpath("tasks.yaml").read_text("utf-8")
    return yaml.safe_load(text)


@dataclass
class TrainResult:
    task: str
    estimator: SLAKRegressor
    metrics: dict[str, dict[str, float]]
    region_embeddings: np.ndarray
    metapaths: list[MetaPathSchema]
    extra: dict = field(default_factory=dict)


def evaluate(estimator: SLAKRegressor, regions: Sequence[str], table: RegionIndicatorTable, indicator: str) -> dict:
    """MAE/RMSE/R² in original units on ``regions``."""
    return metrics(estimator.predict(np.asarray(regions, dtype=object)), table.values(indicator, regions))


def _make_estimator(kg, metapaths, config: SLAKConfig, provider, indicator, cross_task=None, no_attn=None):
    return SLAKRegressor(
        kg=kg, metapaths=list(metapaths), embedding_provider=provider, d_h=config.d_h, n_layers=config.n_layers,
        lr=config.lr, max_epochs=config.max_epochs, patience=config.patience, normalization=config.normalization,
        target_transform=config.transform_for(indicator), no_attn=config.no_attn if no_attn is None else no_attn,
        cross_task=cross_task, embed_init_std=config.embed_init_std,
        type_embedding=config.type_embedding, global_normalization=config.global_normalization,
        random_state=config.seed,
    )


def _fit_and_score(task, kg, table, splits, config, provider, cross_task=None) -> TrainResult:
    est = _make_estimator(kg, task.metapaths, config, provider, task.name, cross_task)
    tr, va = splits["train"], splits["val"]
    est.fit(
        np.asarray(tr, dtype=object), table.values(task.name, tr),
        eval_set=(np.asarray(va, dtype=object), table.values(task.name, va)),
    )
    scores = {name: evaluate(est, regs, table, task.name) for name, regs in splits.items() if regs}
    return TrainResult(task.name, est, scores, est.region_embeddings_.copy(), list(task.metapaths))


def train_single(
    task: TaskContext,
    kg: KnowledgeGraph,
    table: RegionIndicatorTable,
    splits: Mapping[str, Sequence[str]],
    config: SLAKConfig,
    provider: EmbeddingProvider | None = None,
) -> TrainResult:
    """Round 1: fit on ``splits['train']``, early-stop on ``splits['val']``, keep best-epoch embeddings."""
    provider = provider or EmbeddingProvider("fallback")
    result = _fit_and_score(task, kg, table, splits, config, provider)
    task.region_embeddings = result.region_embeddings
    return result


def cross_task_inputs(
    task: str, tasks: Mapping[str, TaskContext], provider: EmbeddingProvider
) -> CrossTaskInputs:
    others = [t for t in sorted(tasks) if t != task]
    missing = [t for t in others if tasks[t].region_embeddings is None]
    if missing:
        raise TrainingError(f"missing round-1 region embeddings for tasks: {missing}")
    if not others:
        return CrossTaskInputs(np.zeros((0, D_LLM)), [], [])
    queries = provider.embed_many([tasks[t].description for t in others])
    return CrossTaskInputs(queries, [tasks[t].region_embeddings for t in others], others)


def train_round2_task(
    name: str,
    tasks: Mapping[str, TaskContext],
    new_metapaths: Sequence[MetaPathSchema],
    kg: KnowledgeGraph,
    table: RegionIndicatorTable,
    splits: Mapping[str, Sequence[str]],
    config: SLAKConfig,
    provider: EmbeddingProvider | None = None,
) -> TrainResult:
    """Round 2 for one task: its new meta-path set plus the other tasks' saved embeddings."""
    provider = provider or EmbeddingProvider("fallback")
    for other, t in tasks.items():
        if t.region_embeddings is None:
            raise TrainingError(f"missing round-1 region embeddings for task {other!r}")
    cross = None if config.no_trans else cross_task_inputs(name, tasks, provider)
    ctx = TaskContext(name, list(new_metapaths), tasks[name].description)
    result = _fit_and_score(ctx, kg, table, splits, config, provider, cross_task=cross)
    result.extra["cross_tasks"] = [] if cross is None else cross.tasks
    return result


def train_round2(
    tasks: Mapping[str, TaskContext],
    new_metapaths: Mapping[str, Sequence[MetaPathSchema]],
    kg: KnowledgeGraph,
    table: RegionIndicatorTable,
    splits: Mapping[str, Sequence[str]],
    config: SLAKConfig,
    provider: EmbeddingProvider | None = None,
) -> dict[str, TrainResult]:
    """Round 2: every task retrains on its new meta-path set plus the other tasks' saved embeddings."""
    return {
        name: train_round2_task(name, tasks, new_metapaths[name], kg, table, splits, config, provider)
        for name in sorted(tasks)
    }
