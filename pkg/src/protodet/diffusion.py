"""Per-class proposal graphs and the confidence-reweighting fixed point.

Each proposal of a class becomes a node of a directed graph.  An edge runs
from node i to node j only when j's objectness score is at least i's, and its
weight is how much of i's mask j covers; a node's prior weight is its
strongest outgoing edge.  Iterating

    pi <- alpha * (P @ pi) + (1 - alpha) * prior

(P = row-normalized edges, zero rows kept zero) converges geometrically with
rate alpha.  A node holding the strict top score of its class has no outgoing
edges, so its pi stays exactly 0 and its matching score is untouched, while a
fragment nested inside a stronger proposal saturates toward 1 - alpha and gets
decayed by the (1 - pi)^lambda transform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BinaryMask, BoundingBox

__all__ = [
    "Proposal",
    "DiffusionParams",
    "ClassGraph",
    "DiffusionResult",
    "build_class_graph",
    "diffuse",
    "refine_scores",
    "diffuse_all_classes",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Proposal:
    """Query proposal after matching: box, mask, objectness, feature, class, cosine."""

    box: BoundingBox
    mask: BinaryMask
    upn_score: float
    feature: np.ndarray
    pred_class: int
    similarity: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.upn_score <= 1.0:
            raise ValueError(f"objectness score must be in [0, 1], got {self.upn_score}")
        if self.mask.area == 0:
            raise ValueError("proposal mask must be non-empty")


@dataclass(frozen=True)
class DiffusionParams:
    """Knobs of the reweighting iteration.

    alpha mixes propagated mass against the per-node prior, lam sets the decay
    strength of the final score transform, tau is the early-stop threshold on
    the L2 norm of successive iterates, and max_steps bounds the iteration.
    """

    alpha: float = 0.3
    lam: float = 0.5
    tau: float = 1e-6
    max_steps: int = 30

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass(frozen=True, eq=False)
class ClassGraph:
    """Dense per-class graph state: edges, priors, and row-normalized transitions."""

    node_ids: tuple[int, ...]
    edges: np.ndarray       # (N, N), edges[i, j] in [0, 1], zero diagonal
    prior: np.ndarray       # (N,), prior[i] == max_j edges[i, j]
    transition: np.ndarray  # (N, N), rows sum to 1 or are entirely 0


@dataclass(frozen=True, eq=False)
class DiffusionResult:
    pi: np.ndarray
    steps_taken: int
    converged: bool


def build_class_graph(
    props: Sequence[Proposal], node_ids: Sequence[int] | None = None
) -> ClassGraph:
    """Build the directed coverage graph over same-class proposals.

    edges[i, j] is 0 when i outscores j, else the fraction of i's mask that j
    covers; the diagonal is forced to 0 (self-coverage carries no information).
    Exact score ties produce edges in both directions.
    """
    if not props:
        raise ValueError("cannot build a graph over zero proposals")
    classes = {p.pred_class for p in props}
    if len(classes) != 1:
        raise ValueError(f"proposals must share one predicted class, got {sorted(classes)}")
    dims = {(p.mask.width, p.mask.height) for p in props}
    if len(dims) != 1:
        raise ValueError(f"proposal masks must share dimensions, got {sorted(dims)}")
    if node_ids is None:
        node_ids = range(len(props))
    ids = tuple(int(i) for i in node_ids)
    if len(ids) != len(props):
        raise ValueError("node_ids must align with proposals")

    n = len(props)
    # Pixel counts stay far below 2**53, so float64 intersection counts are exact.
    flat = np.stack([p.mask.to_array().ravel() for p in props]).astype(np.float64)
    areas = flat.sum(axis=1)
    inter = flat @ flat.T
    coverage = inter / areas[:, None]

    scores = np.array([p.upn_score for p in props], dtype=np.float64)
    edges = np.where(scores[:, None] > scores[None, :], 0.0, coverage)
    np.fill_diagonal(edges, 0.0)

    prior = edges.max(axis=1) if n > 1 else np.zeros(1)
    row_sums = edges.sum(axis=1)
    transition = np.zeros_like(edges)
    nonzero = row_sums > 0.0
    transition[nonzero] = edges[nonzero] / row_sums[nonzero, None]
    return ClassGraph(node_ids=ids, edges=edges, prior=prior, transition=transition)


def diffuse(
    g: ClassGraph, params: DiffusionParams, init: np.ndarray | None = None
) -> DiffusionResult:
    """Run the fixed-point iteration from a uniform start.

    Stops once the L2 norm of the iterate difference drops below tau, or after
    max_steps updates.  ``init`` overrides the uniform start (the fixed point
    is unique, so this only matters for verification).
    """
    n = len(g.prior)
    if init is None:
        pi = np.full(n, 1.0 / n)
    else:
        pi = np.asarray(init, dtype=np.float64).copy()
        if pi.shape != (n,):
            raise ValueError(f"init must have shape ({n},), got {pi.shape}")
    restart = (1.0 - params.alpha) * g.prior
    steps = 0
    converged = False
    for _ in range(params.max_steps):
        nxt = params.alpha * (g.transition @ pi) + restart
        assert float(nxt.min()) >= -1e-12 and float(nxt.max()) <= 1.0 + 1e-12
        np.clip(nxt, 0.0, 1.0, out=nxt)  # shave float noise; math keeps pi in [0, 1]
        steps += 1
        delta = float(np.linalg.norm(nxt - pi))
        pi = nxt
        if delta < params.tau:
            converged = True
            break
    return DiffusionResult(pi=pi, steps_taken=steps, converged=converged)


def refine_scores(
    props: Sequence[Proposal], result: DiffusionResult, lam: float
) -> list[float]:
    """Final score per proposal: (1 - pi)^lambda times its matching similarity."""
    if len(props) != len(result.pi):
        raise ValueError(f"got {len(props)} proposals but {len(result.pi)} weights")
    assert float(result.pi.max(initial=0.0)) <= 1.0 and float(result.pi.min(initial=0.0)) >= 0.0
    return [
        float((1.0 - float(pi_j)) ** lam * p.similarity)
        for p, pi_j in zip(props, result.pi)
    ]


def diffuse_all_classes(
    props: Sequence[Proposal], params: DiffusionParams
) -> list[tuple[Proposal, float]]:
    """Partition by predicted class, reweight each class graph, concatenate.

    Output order is (class_id ascending, then input order).  Classes are
    independent, so callers may parallelize across them freely.
    """
    if not props:
        raise ValueError("no proposals to reweight")
    by_class: dict[int, list[int]] = {}
    for i, p in enumerate(props):
        by_class.setdefault(p.pred_class, []).append(i)
    out: list[tuple[Proposal, float]] = []
    for class_id in sorted(by_class):
        idx = by_class[class_id]
        members = [props[i] for i in idx]
        graph = build_class_graph(members, node_ids=idx)
        result = diffuse(graph, params)
        if not result.converged:
            log.debug(
                "class %d graph (%d nodes) hit max_steps=%d without converging",
                class_id, len(idx), params.max_steps,
            )
        scores = refine_scores(members, result, params.lam)
        out.extend(zip(members, scores))
    return out
