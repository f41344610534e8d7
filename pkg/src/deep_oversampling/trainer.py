"""Single-task initialization followed by rounds of target recomputation and
multi-task training on the weighted overloading set."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import numerics as nx
from .dualhead_net import (DataError, MTLBatch, NetworkConfig, Parameters,
                           backprop_mtl, backprop_stl, init_params, sgd_step)
from .evaluation import in_class_variance
from .overloading import build_weighted_set, clamp_k, compute_embeddings


@dataclass
class TrainPlan:
    k_mnr: int = 5
    k_mjr: int = 0
    # None -> ceil(1/R) for minority classes, 1 for majority classes
    r_per_class: dict = None
    rounds: int = 3
    epochs_per_round: int = 1
    stl_epochs: int = 1
    alpha: float = None  # None keeps the network config's value
    seed: int = 0
    minority_classes: tuple = None  # None -> taken from the dataset

    def validate(self):
        if self.k_mnr < 0 or self.k_mjr < 0:
            raise ValueError("overloading parameters must be nonnegative")
        if self.k_mjr > self.k_mnr:
            raise ValueError("k_mjr must not exceed k_mnr")
        if self.rounds < 1:
            raise ValueError("at least one round (T >= 1) is required")
        if self.epochs_per_round < 1 or self.stl_epochs < 0:
            raise ValueError("epochs_per_round must be >= 1 and stl_epochs >= 0")
        if self.r_per_class and min(self.r_per_class.values()) < 1:
            raise ValueError("over-sampling sizes must be >= 1")
        return self


@dataclass
class ParamSuggestion:
    R: Fraction
    k_mnr: int
    k_mjr: int
    r_range: tuple
    r_default: int


def suggest_params(dataset, minority_classes, k_mnr: int = 5) -> ParamSuggestion:
    """Minority/majority sample ratio ``R`` and the suggested range for ``r``.

    ``R`` is total minority samples over total majority samples; ``r`` is
    suggested in ``[1/R, k_mnr/R]`` with ``ceil(1/R)`` as the default.
    """
    counts = dataset.class_counts() if hasattr(dataset, "class_counts") else \
        np.asarray(dataset)
    minority = np.isin(np.arange(len(counts)), list(minority_classes))
    n_mnr, n_mjr = int(counts[minority].sum()), int(counts[~minority].sum())
    if n_mnr == 0 or n_mjr == 0:
        raise DataError("both minority and majority groups must be nonempty")
    R = Fraction(n_mnr, n_mjr)
    return ParamSuggestion(R, k_mnr, 0, (1 / R, k_mnr / R), math.ceil(1 / R))


def class_plan(dataset, plan: TrainPlan) -> tuple:
    """Per-class ``k`` (clamped to class size) and ``r`` dictionaries."""
    minority = plan.minority_classes
    if minority is None:
        minority = dataset.minority_classes
    minority = set(int(c) for c in minority)
    counts = dataset.class_counts()
    present = [c for c in range(dataset.n_classes) if counts[c] > 0]
    k = {}
    for c in present:
        k[c] = clamp_k(plan.k_mnr if c in minority else plan.k_mjr, int(counts[c]), c)
    if plan.r_per_class is not None:
        r = {c: int(plan.r_per_class.get(c, 1)) for c in present}
    elif minority and len(minority) < len(present):
        r_mnr = suggest_params(dataset, minority, plan.k_mnr).r_default
        r = {c: (r_mnr if c in minority else 1) for c in present}
    else:
        r = {c: 1 for c in present}
    return k, r


def stl_epoch(config: NetworkConfig, params: Parameters, dataset, order,
              update_embedding: bool = True) -> tuple:
    """One pass of minibatch SGD on cross-entropy in the given sample order."""
    losses = []
    bs = config.batch_size
    params = params.copy()
    for s in range(0, len(order), bs):
        idx = order[s:s + bs]
        loss, grads = backprop_stl(config, params, dataset.x[idx], dataset.y[idx],
                                   update_embedding)
        params = sgd_step(params, grads, config.learning_rate, inplace=True)
        losses.append(loss * len(idx))
    return params, float(np.sum(losses) / max(len(order), 1))


def train_stl(config: NetworkConfig, dataset, epochs: int, seed: int,
              params: Parameters = None, update_embedding: bool = True,
              progress=None, first_epoch: int = 0) -> Parameters:
    """Shuffled-minibatch SGD on the single-task loss.

    ``params`` defaults to a fresh seeded initialization. Epoch ``e`` is
    shuffled with the stream ``(seed, "stl-shuffle", e)``.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if params is None:
        params = init_params(config, seed)
    for e in range(first_epoch, first_epoch + epochs):
        start = time.perf_counter()
        order = nx.make_rng(seed, "stl-shuffle", e).permutation(len(dataset))
        params, loss = stl_epoch(config, params, dataset, order, update_embedding)
        if not params.is_finite():
            raise FloatingPointError(f"non-finite parameters after STL epoch {e}")
        if progress is not None:
            progress({"kind": "stl_epoch", "epoch": e, "loss": loss,
                      "seconds": time.perf_counter() - start})
    return params


def mtl_batch(dataset, instances) -> MTLBatch:
    idx = np.fromiter((z.sample_index for z in instances), dtype=np.int64,
                      count=len(instances))
    return MTLBatch(dataset.x[idx], dataset.y[idx],
                    [z.neighbors for z in instances], [z.weights for z in instances])


def mtl_epoch(config: NetworkConfig, params: Parameters, dataset, instances,
              order) -> tuple:
    """One pass over the weighted set in the given order.

    Returns ``(params, mean l'_f, mean l'_g)``; the loss means are over
    instances and evaluated before each minibatch's update.
    """
    bs = config.batch_size
    sum_f = sum_g = 0.0
    params = params.copy()
    for s in range(0, len(order), bs):
        chunk = [instances[i] for i in order[s:s + bs]]
        lf, lg, grads = backprop_mtl(config, params, mtl_batch(dataset, chunk))
        params = sgd_step(params, grads, config.learning_rate, inplace=True)
        sum_f += lf * len(chunk)
        sum_g += lg * len(chunk)
    n = max(len(order), 1)
    return params, sum_f / n, sum_g / n


@dataclass
class RoundRecord:
    round: int
    instances: int
    loss_f: float
    loss_g: float
    variance: dict
    seconds: float
    k: dict = field(default_factory=dict)
    r: dict = field(default_factory=dict)

    @property
    def mean_variance(self) -> float:
        return float(np.mean(list(self.variance.values())))

    def as_dict(self) -> dict:
        return {"kind": "dos_round", "round": self.round, "instances": self.instances,
                "loss_f": self.loss_f, "loss_g": self.loss_g,
                "mean_variance": self.mean_variance,
                "variance": {str(c): v for c, v in self.variance.items()},
                "k": {str(c): v for c, v in self.k.items()},
                "r": {str(c): v for c, v in self.r.items()},
                "seconds": self.seconds}


def dos_round(config: NetworkConfig, params: Parameters, dataset, plan: TrainPlan,
              t: int, k: dict, r: dict) -> tuple:
    """Recompute targets with the current embedding and run the MTL epochs."""
    start = time.perf_counter()
    store = compute_embeddings(config, params, dataset)
    variance = in_class_variance(store)
    instances = build_weighted_set(store, dataset, k, r, seed=_round_seed(plan.seed, t))
    lf = lg = 0.0
    for e in range(plan.epochs_per_round):
        order = nx.make_rng(plan.seed, "mtl-shuffle", t, e).permutation(len(instances))
        params, lf, lg = mtl_epoch(config, params, dataset, instances, order)
        if not params.is_finite():
            raise FloatingPointError(f"non-finite parameters in DOS round {t}")
    rec = RoundRecord(t, len(instances), lf, lg, variance,
                      time.perf_counter() - start, k, r)
    return params, rec


def _round_seed(seed: int, t: int) -> int:
    return int(nx.make_rng(seed, "round", t).integers(0, 2**63))


def train_dos(config: NetworkConfig, dataset, plan: TrainPlan, progress=None,
              params: Parameters = None) -> Parameters:
    """Deep over-sampling training.

    STL initialization (``plan.stl_epochs`` epochs, skipped when ``params`` is
    given), then ``plan.rounds`` rounds of: embed all samples, select
    in-class neighbors, sample simplex weights, multi-task training.
    ``progress`` receives one dict per STL epoch and per round.
    """
    plan.validate()
    if plan.alpha is not None:
        config = replace(config, alpha=plan.alpha)
    k, r = class_plan(dataset, plan)
    if params is None:
        params = train_stl(config, dataset, plan.stl_epochs, plan.seed,
                           progress=progress)
    for t in range(1, plan.rounds + 1):
        params, rec = dos_round(config, params, dataset, plan, t, k, r)
        if progress is not None:
            progress(rec.as_dict())
    return params
