"""Training objective components for ball-prototype classifiers.

The composite objective is a weighted sum of cross entropy, a top-k
cluster term pulling the k nearest correct-class balls toward each image,
a separation term (used with a negative weight) pushing wrong-class balls
away, and a radius penalty keeping balls compact. All distance terms use
the clamped ball distance so that the losses and the activations agree on
what "inside a ball" means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .geometry import (
    Geometry,
    GeometryConfig,
    LatentPatchGrid,
    PrototypeBall,
    batched_ball_distances,
    effective_radii,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective plus the top-k count.

    ``w_sep`` is conventionally negative: the separation term itself is a
    distance, and a negative weight rewards making it large.
    """

    w_ce: float = 1.0
    w_clstk: float = 0.8
    w_sep: float = -0.08
    w_rad: float = 0.01
    k: int = 10

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.w_ce <= 0:
            raise ValueError(f"w_ce must be positive, got {self.w_ce}")


class ClassAssignmentView:
    """Read-only view of which prototypes provide evidence for which class.

    ``active`` masks out pruned prototypes; both the cluster pool and the
    separation pool only ever contain active prototypes.
    """

    def __init__(self, assignment: Tensor, active: Tensor | None = None):
        assignment = torch.as_tensor(assignment).bool()
        if assignment.dim() != 2:
            raise ValueError(f"assignment must be (m, C), got shape {tuple(assignment.shape)}")
        if active is None:
            active = torch.ones(assignment.shape[0], dtype=torch.bool)
        active = torch.as_tensor(active).bool()
        if active.shape != (assignment.shape[0],):
            raise ValueError("active mask length does not match prototype count")
        self._assignment = assignment
        self._active = active

    @property
    def num_prototypes(self) -> int:
        return self._assignment.shape[0]

    @property
    def num_classes(self) -> int:
        return self._assignment.shape[1]

    def prototypes_for_class(self, class_id: int) -> Tensor:
        """Indices of active prototypes assigned to ``class_id``."""

        return torch.nonzero(self._assignment[:, class_id] & self._active, as_tuple=False).flatten()

    def others_for_class(self, class_id: int) -> Tensor:
        """Indices of active prototypes NOT assigned to ``class_id``."""

        return torch.nonzero(~self._assignment[:, class_id] & self._active, as_tuple=False).flatten()

    def pool_sizes(self) -> list[int]:
        return [int(len(self.prototypes_for_class(c))) for c in range(self.num_classes)]


# ---------------------------------------------------------------------------
# Tensor-level terms (training hot path)
# ---------------------------------------------------------------------------


def min_patch_distances(
    patch_grids: Tensor,
    centers: Tensor,
    radius_param: Tensor,
    geometry: Geometry,
    cfg: GeometryConfig,
) -> Tensor:
    """Per image and ball, the smallest clamped distance over all patches.

    ``patch_grids`` is ``(B, N, D)`` with N the flattened grid size; the
    result is ``(B, M)``.
    """

    d = batched_ball_distances(patch_grids, centers, radius_param, geometry, cfg)
    return d.min(dim=1).values


def topk_cluster_term(
    dmin: Tensor,
    labels: Tensor,
    assign: ClassAssignmentView,
    k: int,
    *,
    clamp_k: bool = False,
) -> Tensor:
    """Mean over images of the sum of the k smallest correct-class distances.

    With ``clamp_k`` unset, a class pool smaller than ``k`` is an error; the
    training loop sets it so a heavily pruned class degrades gracefully.
    """

    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = []
    for i in range(dmin.shape[0]):
        pool = assign.prototypes_for_class(int(labels[i]))
        if len(pool) == 0:
            raise ValueError(f"class {int(labels[i])} has no prototypes assigned")
        k_i = k
        if len(pool) < k:
            if not clamp_k:
                raise ValueError(
                    f"class {int(labels[i])} has only {len(pool)} prototypes, cannot take top-{k}"
                )
            k_i = len(pool)
        vals = dmin[i, pool]
        terms.append(torch.topk(vals, k_i, largest=False).values.sum())
    return torch.stack(terms).mean()


def separation_term(dmin: Tensor, labels: Tensor, assign: ClassAssignmentView) -> Tensor:
    """Mean over images of the distance to the nearest wrong-class ball.

    Images whose class leaves no wrong-class prototypes are skipped; if no
    image has any, there is nothing to separate and that is an error.
    """

    terms = []
    for i in range(dmin.shape[0]):
        others = assign.others_for_class(int(labels[i]))
        if len(others) == 0:
            continue
        terms.append(dmin[i, others].min())
    if not terms:
        raise ValueError("no wrong-class prototypes exist for any image in the batch")
    return torch.stack(terms).mean()


def radius_penalty(radius_param: Tensor, geometry: Geometry, cfg: GeometryConfig) -> Tensor:
    """Sum of squared effective radii."""

    r_eff = effective_radii(radius_param, geometry, cfg)
    return (r_eff * r_eff).sum()


def composite_objective(ce, clstk, sep, rad, w: LossWeights):
    """Weighted sum of the four loss components."""

    return w.w_ce * ce + w.w_clstk * clstk + w.w_sep * sep + w.w_rad * rad


# ---------------------------------------------------------------------------
# Grid-level wrappers
# ---------------------------------------------------------------------------


def _stack_balls(balls: Sequence[PrototypeBall]) -> tuple[Tensor, Tensor, Geometry]:
    if not balls:
        raise ValueError("need at least one ball")
    geometry = balls[0].geometry
    if any(b.geometry is not geometry for b in balls):
        raise ValueError("all balls must share one geometry")
    centers = torch.stack([b.center for b in balls])
    radii = torch.stack([b.radius_param.reshape(()) for b in balls])
    return centers, radii, geometry


def _stack_grids(grids: Sequence[LatentPatchGrid]) -> Tensor:
    flat = [g.patches.reshape(-1, g.dim) for g in grids]
    return torch.stack(flat)


def topk_cluster_loss(
    grids: Sequence[LatentPatchGrid],
    labels: Sequence[int],
    balls: Sequence[PrototypeBall],
    assign: ClassAssignmentView,
    k: int,
    cfg: GeometryConfig,
    *,
    clamp_k: bool = False,
) -> Tensor:
    centers, radii, geometry = _stack_balls(balls)
    dmin = min_patch_distances(_stack_grids(grids), centers, radii, geometry, cfg)
    return topk_cluster_term(dmin, torch.as_tensor(list(labels)), assign, k, clamp_k=clamp_k)


def separation_loss(
    grids: Sequence[LatentPatchGrid],
    labels: Sequence[int],
    balls: Sequence[PrototypeBall],
    assign: ClassAssignmentView,
    cfg: GeometryConfig,
) -> Tensor:
    centers, radii, geometry = _stack_balls(balls)
    dmin = min_patch_distances(_stack_grids(grids), centers, radii, geometry, cfg)
    return separation_term(dmin, torch.as_tensor(list(labels)), assign)


def radius_loss(balls: Sequence[PrototypeBall], cfg: GeometryConfig) -> Tensor:
    centers, radii, geometry = _stack_balls(balls)
    del centers
    return radius_penalty(radii, geometry, cfg)


# ---------------------------------------------------------------------------
# Extension point for architecture-specific extra losses
# ---------------------------------------------------------------------------

# Registry of additional loss terms keyed by name. Ships empty; presets may
# record weights for extra terms, but a term only takes effect once a
# callable is registered under its name.
EXTRA_LOSSES: dict[str, Callable[..., Tensor]] = {}


def register_loss(name: str):
    """Decorator registering an extra loss term under ``name``."""

    def deco(fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
        if name in EXTRA_LOSSES:
            raise ValueError(f"loss {name!r} is already registered")
        EXTRA_LOSSES[name] = fn
        return fn

    return deco
