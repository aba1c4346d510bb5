"""Multilinear rank selection for Tucker-compressed, quantized conv layers.

Three searches are provided:

* :func:`layerwise_rank_select` finds the pair ``(R3, R4)`` with the smallest
  ``R3 + R4`` whose quantized factorization keeps the layer output error
  within a budget.
* :func:`greedy_single_pass` walks each layer down in turn until the metric
  oracle rejects the next rank.
* :func:`greedy_multi_pass` lowers every layer by one step per pass.

Both greedy searches accept a state only when the metric stays strictly above
the threshold and roll back otherwise, so a returned plan never violates its
own threshold.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .conv import ConvSpec, conv2d_direct
from .quantize import quantize_activations, activation_range, quantize_tucker
from .tucker import partial_tucker2

logger = logging.getLogger(__name__)


class InfeasibleBudget(ValueError):
    """The error budget is below the error of the full-rank quantized layer."""


class SearchError(RuntimeError):
    """The metric oracle failed; ``plan`` holds the partial result."""

    def __init__(self, message, plan):
        super().__init__(message)
        self.plan = plan


@dataclass
class LayerEntry:
    name: str
    kernel: np.ndarray
    rank: tuple = None
    step: tuple = (1, 1)
    bits: int = 8
    spec: ConvSpec = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=float)
        if self.kernel.ndim != 4:
            raise ValueError(f"layer {self.name}: kernel must be order 4")
        s, s_out = self.kernel.shape[2:]
        if self.rank is None:
            self.rank = (s, s_out)
        self.rank = tuple(int(r) for r in self.rank)
        self.step = tuple(int(d) for d in self.step)
        if not (1 <= self.rank[0] <= s and 1 <= self.rank[1] <= s_out):
            raise ValueError(f"layer {self.name}: rank {self.rank} out of bounds for S={s}, S_out={s_out}")
        if min(self.step) < 0:
            raise ValueError(f"layer {self.name}: negative rank step")
        if self.spec is None:
            self.spec = ConvSpec(self.kernel.shape, 1, self.kernel.shape[0] // 2)

    @property
    def full_rank(self):
        return self.kernel.shape[2], self.kernel.shape[3]


@dataclass(frozen=True)
class SearchConfig:
    """Inputs of the greedy searches.

    ``threshold`` is the minimum acceptable metric, ``max_finetune_epochs``
    the epoch budget handed to the fine-tune hook after every rank step,
    ``passes`` the number of outer passes of the multi-pass search and
    ``max_steps`` an optional cap on rank steps per layer.
    """

    threshold: float
    max_finetune_epochs: int = 0
    passes: int = 1
    layer_order: tuple = None
    max_steps: int = None

    def __post_init__(self):
        if self.max_finetune_epochs < 0:
            raise ValueError("max_finetune_epochs must be >= 0")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


@dataclass
class ModelState:
    """Effective kernels of a (partially) compressed layer stack.

    ``ranks[name]`` is None for layers still at full precision.
    """

    kernels: dict
    ranks: dict

    @classmethod
    def initial(cls, layers):
        return cls({l.name: l.kernel for l in layers}, {l.name: None for l in layers})

    def with_layer(self, name, rank, kernel):
        return ModelState({**self.kernels, name: kernel}, {**self.ranks, name: rank})


class MetricOracle(Protocol):
    def evaluate(self, state: ModelState) -> float: ...

    def finetune(self, state: ModelState, epochs: int) -> ModelState: ...


def compress_layer(layer, rank, scheme="per-tensor", max_iters=50, tol=1e-6):
    """Partial Tucker at ``rank`` with quantized factors; returns ``(factors, kernel)``."""
    f = partial_tucker2(layer.kernel, rank[0], rank[1], max_iters=max_iters, tol=tol)
    if layer.bits:
        f = quantize_tucker(f, layer.bits, scheme)
    return f, f.reconstruct()


def build_state(layers, ranks):
    """Rebuild the model state for a rank assignment (None keeps a layer uncompressed)."""
    state = ModelState.initial(layers)
    for layer in layers:
        rank = ranks.get(layer.name)
        if rank is not None:
            state = state.with_layer(layer.name, tuple(rank), compress_layer(layer, rank)[1])
    return state


class OutputErrorOracle:
    """Negative relative output error of the layer stack on synthetic inputs.

    Each layer gets its own seeded random input (optionally quantized to
    ``act_bits``); the reference output uses the full-precision input and the
    original kernel. No fine-tuning is performed.
    """

    def __init__(self, layers, input_hw=(8, 8), seed=0, act_bits=None, relative=True):
        rng = np.random.default_rng(seed)
        self.inputs = {}
        self.refs = {}
        for layer in layers:
            x = rng.standard_normal((*input_hw, layer.kernel.shape[2]))
            self.refs[layer.name] = (conv2d_direct(x, layer.kernel, layer.spec), layer.spec)
            if act_bits:
                x = quantize_activations(x, activation_range(x), act_bits)
            self.inputs[layer.name] = x
        self.relative = relative
        self._ref_norm = sum(float(np.sum(y ** 2)) for y, _ in self.refs.values())

    def evaluate(self, state):
        err = 0.0
        for name, (y, spec) in self.refs.items():
            err += float(np.sum((y - conv2d_direct(self.inputs[name], state.kernels[name], spec)) ** 2))
        if self.relative and self._ref_norm > 0:
            err /= self._ref_norm
        return 0.0 - err

    def finetune(self, state, epochs):
        return state


class LinearHeadOracle:
    """Agreement of a fixed random linear classifier on compressed vs original features."""

    def __init__(self, layers, n_samples=32, n_classes=4, input_hw=(6, 6), seed=0):
        rng = np.random.default_rng(seed)
        self.layers = list(layers)
        self.inputs = [
            {l.name: rng.standard_normal((*input_hw, l.kernel.shape[2])) for l in self.layers}
            for _ in range(n_samples)
        ]
        full = self._features(ModelState.initial(self.layers))
        self.head = rng.standard_normal((n_classes, full.shape[1]))
        self.labels = np.argmax(full @ self.head.T, axis=1)

    def _features(self, state):
        rows = []
        for sample in self.inputs:
            parts = [conv2d_direct(sample[l.name], state.kernels[l.name], l.spec).ravel()
                     for l in self.layers]
            rows.append(np.concatenate(parts))
        return np.array(rows)

    def evaluate(self, state):
        pred = np.argmax(self._features(state) @ self.head.T, axis=1)
        return float(np.mean(pred == self.labels))

    def finetune(self, state, epochs):
        return state


@dataclass
class AuditRecord:
    step: int
    pass_index: int
    layer: str
    rank: tuple
    metric_before: float
    metric_after: float
    accepted: bool
    state_ranks: dict


@dataclass
class RankPlan:
    algorithm: str
    threshold: float
    ranks: dict
    compressed: dict
    metric: float
    audit: list = field(default_factory=list)
    layer_shapes: dict = field(default_factory=dict)

    def total_rank(self):
        return sum(r3 + r4 for r3, r4 in self.ranks.values())

    def layer_cost(self, name):
        d, _, s, s_out = self.layer_shapes[name]
        r3, r4 = self.ranks[name]
        return r3 * s + r4 * s_out + r3 * r4 * d * d

    def cost(self):
        return sum(self.layer_cost(name) for name in self.ranks)

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "threshold": self.threshold,
            "metric": self.metric,
            "total_rank": self.total_rank(),
            "cost": self.cost(),
            "layers": [
                {
                    "name": name,
                    "shape": list(self.layer_shapes[name]),
                    "rank": list(rank),
                    "compressed": self.compressed[name],
                    "cost": self.layer_cost(name),
                }
                for name, rank in self.ranks.items()
            ],
        }

    def audit_rows(self):
        for rec in self.audit:
            yield {
                "step": rec.step,
                "pass": rec.pass_index,
                "layer": rec.layer,
                "r3": rec.rank[0],
                "r4": rec.rank[1],
                "metric_before": repr(rec.metric_before),
                "metric_after": repr(rec.metric_after),
                "accepted": int(rec.accepted),
            }


def next_rank(rank, step):
    return max(1, rank[0] - step[0]), max(1, rank[1] - step[1])


def _ordered(layers, cfg):
    if cfg.layer_order is None:
        return list(layers)
    by_name = {l.name: l for l in layers}
    missing = [n for n in cfg.layer_order if n not in by_name]
    if missing:
        raise ValueError(f"unknown layers in layer_order: {missing}")
    return [by_name[n] for n in cfg.layer_order]


class _Search:
    def __init__(self, algorithm, layers, cfg, oracle):
        self.algorithm = algorithm
        self.layers = _ordered(layers, cfg)
        self.cfg = cfg
        self.oracle = oracle
        self.state = ModelState.initial(self.layers)
        self.accepted = {l.name: l.rank for l in self.layers}
        self.audit = []
        self.metric = None

    def plan(self):
        return RankPlan(
            self.algorithm,
            self.cfg.threshold,
            dict(self.accepted),
            {name: r is not None for name, r in self.state.ranks.items()},
            self.metric,
            list(self.audit),
            {l.name: l.kernel.shape for l in self.layers},
        )

    def _call(self, fn, *args):
        try:
            return fn(*args)
        except Exception as exc:
            raise SearchError(f"metric oracle failed: {exc}", self.plan()) from exc

    def start(self):
        self.metric = self._call(self.oracle.evaluate, self.state)
        return self.metric

    def try_rank(self, layer, rank, pass_index):
        """Compress ``layer`` at ``rank``, fine-tune, evaluate; keep the state if accepted."""
        _, kernel = compress_layer(layer, rank)
        cand = self.state.with_layer(layer.name, rank, kernel)
        cand = self._call(self.oracle.finetune, cand, self.cfg.max_finetune_epochs)
        after = self._call(self.oracle.evaluate, cand)
        ok = after > self.cfg.threshold
        self.audit.append(AuditRecord(len(self.audit), pass_index, layer.name, tuple(rank),
                                      self.metric, after, ok, dict(cand.ranks)))
        logger.debug("%s pass %d layer %s rank %s: %.6g -> %.6g (%s)", self.algorithm,
                     pass_index, layer.name, rank, self.metric, after,
                     "accepted" if ok else "rejected")
        if ok:
            self.state, self.metric = cand, after
            self.accepted[layer.name] = tuple(rank)
        return ok


def greedy_single_pass(layers, cfg, oracle):
    """Compress each layer in order as far as the threshold allows, then move on."""
    search = _Search("single", layers, cfg, oracle)
    search.start()
    for layer in search.layers:
        rank = layer.rank
        steps = 0
        while search.metric > cfg.threshold and (cfg.max_steps is None or steps < cfg.max_steps):
            steps += 1
            if not search.try_rank(layer, rank, 0):
                break
            new = next_rank(rank, layer.step)
            if new == rank:
                break
            rank = new
    return search.plan()


def greedy_multi_pass(layers, cfg, oracle):
    """Lower every layer by one rank step per pass for ``cfg.passes`` passes.

    A layer whose candidate is rejected, or which reaches its rank floor, is
    frozen for the remaining passes.
    """
    search = _Search("multi", layers, cfg, oracle)
    search.start()
    pending = {l.name: l.rank for l in search.layers}
    steps = {l.name: 0 for l in search.layers}
    frozen = set()
    for k in range(cfg.passes):
        for layer in search.layers:
            if layer.name in frozen:
                continue
            if search.metric <= cfg.threshold:
                break
            if cfg.max_steps is not None and steps[layer.name] >= cfg.max_steps:
                frozen.add(layer.name)
                continue
            steps[layer.name] += 1
            rank = pending[layer.name]
            if not search.try_rank(layer, rank, k):
                frozen.add(layer.name)
                continue
            new = next_rank(rank, layer.step)
            if new == rank:
                frozen.add(layer.name)
            pending[layer.name] = new
        if len(frozen) == len(search.layers) or search.metric <= cfg.threshold:
            break
    return search.plan()


def threshold_from_drop(base_metric, max_drop):
    """Bridge a whole-network quality-drop budget ``t`` to a search threshold ``T = F(Y) - t``."""
    return base_metric - max_drop


def layer_output_error(layer, rank, x_quant, y, scheme="per-tensor"):
    """``||y - W~ * x_quant||_F^2`` for the quantized rank-``rank`` factorization."""
    _, kernel = compress_layer(layer, rank, scheme)
    return float(np.sum((y - conv2d_direct(x_quant, kernel, layer.spec)) ** 2))


def layerwise_rank_select(layer, x_quant, y, eps, max_grid=4096, scheme="per-tensor"):
    """Smallest ``R3 + R4`` whose quantized factorization meets ``||Y - W~ * X~||^2 <= eps``.

    Layers with at most ``max_grid`` rank pairs are searched exhaustively in
    order of increasing ``R3 + R4`` (ties broken by smaller error), which is
    exact. Larger layers use a greedy descent from full rank that removes one
    rank unit at a time along whichever axis leaves the smaller error.

    Raises:
        InfeasibleBudget: if even the full-rank quantized layer misses ``eps``.
    """
    s, s_out = layer.full_rank
    cache = {}

    def err(r):
        if r not in cache:
            cache[r] = layer_output_error(layer, r, x_quant, y, scheme)
        return cache[r]

    if eps < math.inf and err((s, s_out)) > eps:
        raise InfeasibleBudget(
            f"layer {layer.name}: full-rank error {err((s, s_out)):.6g} exceeds budget {eps:.6g}"
        )
    if s * s_out <= max_grid:
        for total in range(2, s + s_out + 1):
            cands = [(r3, total - r3) for r3 in range(max(1, total - s_out), min(s, total - 1) + 1)]
            feasible = [(err(r), r) for r in cands if err(r) <= eps]
            if feasible:
                return min(feasible)[1]
        raise AssertionError("full rank is feasible, so the sweep must terminate")
    rank = (s, s_out)
    while True:
        moves = [r for r in ((rank[0] - 1, rank[1]), (rank[0], rank[1] - 1)) if min(r) >= 1]
        feasible = [(err(r), r) for r in moves if err(r) <= eps]
        if not feasible:
            return rank
        rank = min(feasible)[1]


def exhaustive_rank_errors(layer, x_quant, y, scheme="per-tensor"):
    """Output error for every rank pair; the brute-force reference for :func:`layerwise_rank_select`."""
    s, s_out = layer.full_rank
    return {
        (r3, r4): layer_output_error(layer, (r3, r4), x_quant, y, scheme)
        for r3, r4 in itertools.product(range(1, s + 1), range(1, s_out + 1))
    }
