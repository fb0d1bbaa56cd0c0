"""Ball prototypes and their clamped similarity functions.

A prototype is a ball in latent space: a center vector plus a trainable
radius. Two latent geometries are supported:

* ``LOG``: similarity is a log ratio of squared center distances, clamped
  so that every patch inside the ball scores the same plateau value. The
  radius lives on the squared-distance scale (membership is ``d2 <= r``).
* ``COSINE``: similarity is the cosine to the center, clamped at
  ``cos(r)`` with the radius read as an angle in ``(0, pi]``.

Both clamps use a straight-through gradient: patches and centers always
receive the gradient of the unclamped branch (so training signal never
dies inside a ball), while the radius receives gradient only where its
branch is the active one.

All distance arithmetic funnels through the batched kernels at the bottom
of this module so that scalar helpers, the model forward pass, and the
membership scans share a single arithmetic path.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import Tensor


class Geometry(Enum):
    LOG = "log"
    COSINE = "cosine"


class NonFiniteLatentError(ValueError):
    """A patch or center carries NaN/Inf entries (corrupt latent)."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where a direction is required."""


@dataclass(frozen=True)
class GeometryConfig:
    """Numerical-stability constants shared by every geometry op.

    ``epsilon`` keeps the log ratio finite at zero distance; ``min_radius``
    floors the effective radius so clamp values stay finite and the radius
    penalty stays differentiable.
    """

    epsilon: float = 1e-4
    min_radius: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.min_radius <= 0.0:
            raise ValueError(f"min_radius must be positive, got {self.min_radius}")


@dataclass
class PrototypeBall:
    """One learned concept: a ball around ``center`` with a raw radius parameter."""

    center: Tensor
    radius_param: Tensor
    geometry: Geometry

    def __post_init__(self) -> None:
        center = torch.as_tensor(self.center)
        if center.dim() != 1:
            raise ValueError(f"center must be a vector, got shape {tuple(center.shape)}")
        if not torch.isfinite(center).all():
            raise NonFiniteLatentError("ball center contains non-finite entries")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius_param", torch.as_tensor(self.radius_param, dtype=center.dtype))

    @property
    def dim(self) -> int:
        return self.center.shape[0]


@dataclass
class LatentPatchGrid:
    """H x W grid of D-dimensional patch vectors for one image."""

    patches: Tensor
    source_image_id: str = ""

    def __post_init__(self) -> None:
        patches = torch.as_tensor(self.patches)
        if patches.dim() != 3:
            raise ValueError(f"patches must be (H, W, D), got shape {tuple(patches.shape)}")
        if not torch.isfinite(patches).all():
            raise NonFiniteLatentError(f"latent grid for {self.source_image_id!r} contains non-finite entries")
        object.__setattr__(self, "patches", patches)

    @property
    def height(self) -> int:
        return self.patches.shape[0]

    @property
    def width(self) -> int:
        return self.patches.shape[1]

    @property
    def dim(self) -> int:
        return self.patches.shape[2]


@dataclass
class SimilarityMap:
    """Per-cell clamped similarity of one grid against one ball."""

    values: Tensor
    prototype_id: int = -1

    def __post_init__(self) -> None:
        values = torch.as_tensor(self.values)
        if values.dim() != 2:
            raise ValueError(f"values must be (H, W), got shape {tuple(values.shape)}")
        object.__setattr__(self, "values", values)


# ---------------------------------------------------------------------------
# Straight-through clamp primitives
# ---------------------------------------------------------------------------


class _PassThroughMin(torch.autograd.Function):
    """``min(a, b)`` whose backward sends the full gradient to ``a``.

    ``a`` is the distance branch and ``b`` the clamp branch; ``b`` only
    receives gradient where it is strictly the smaller one.
    """

    @staticmethod
    def forward(ctx, a: Tensor, b: Tensor) -> Tensor:
        ctx.save_for_backward(a, b)
        return torch.minimum(a, b)

    @staticmethod
    def backward(ctx, grad_out: Tensor):
        a, b = ctx.saved_tensors
        return grad_out, grad_out * (b < a).to(grad_out.dtype)


class _PassThroughMax(torch.autograd.Function):
    """``max(a, b)`` with the same routing convention as :class:`_PassThroughMin`."""

    @staticmethod
    def forward(ctx, a: Tensor, b: Tensor) -> Tensor:
        ctx.save_for_backward(a, b)
        return torch.maximum(a, b)

    @staticmethod
    def backward(ctx, grad_out: Tensor):
        a, b = ctx.saved_tensors
        return grad_out, grad_out * (b > a).to(grad_out.dtype)


def pass_through_min(distance_branch: Tensor, clamp_branch: Tensor) -> Tensor:
    a, b = torch.broadcast_tensors(distance_branch, clamp_branch)
    return _PassThroughMin.apply(a, b)


def pass_through_max(distance_branch: Tensor, clamp_branch: Tensor) -> Tensor:
    a, b = torch.broadcast_tensors(distance_branch, clamp_branch)
    return _PassThroughMax.apply(a, b)


# ---------------------------------------------------------------------------
# Batched kernels (single arithmetic path for all callers)
# ---------------------------------------------------------------------------


def squared_center_distances(patches: Tensor, centers: Tensor) -> Tensor:
    """Pairwise squared L2 distances, ``(..., D) x (M, D) -> (..., M)``."""

    sq_p = (patches * patches).sum(-1, keepdim=True)
    sq_c = (centers * centers).sum(-1)
    cross = patches @ centers.T
    return (sq_p + sq_c - 2.0 * cross).clamp_min(0.0)


def cosine_center_similarities(patches: Tensor, centers: Tensor) -> Tensor:
    """Pairwise cosine similarities, ``(..., D) x (M, D) -> (..., M)``.

    Raises :class:`DegenerateVectorError` on any zero-norm patch or center.
    """

    p_norm = torch.linalg.vector_norm(patches, dim=-1, keepdim=True)
    c_norm = torch.linalg.vector_norm(centers, dim=-1)
    if (p_norm == 0).any():
        raise DegenerateVectorError("zero-norm patch in cosine similarity")
    if (c_norm == 0).any():
        raise DegenerateVectorError("zero-norm center in cosine similarity")
    return (patches @ centers.T) / (p_norm * c_norm)


def effective_radii(radius_param: Tensor, geometry: Geometry, cfg: GeometryConfig) -> Tensor:
    """Reparameterize raw radius parameters into usable radii.

    LOG radii are floored at ``min_radius`` on the squared-distance scale;
    COSINE radii are additionally capped at pi, the largest angle at which
    ``cos`` is still injective.
    """

    if geometry is Geometry.LOG:
        return torch.clamp(radius_param, min=cfg.min_radius)
    return torch.clamp(radius_param, min=cfg.min_radius, max=math.pi)


def log_clamp_values(r_eff: Tensor, cfg: GeometryConfig) -> Tensor:
    """Plateau value of the log similarity for each effective radius."""

    return torch.log((r_eff + 1.0) / (r_eff + cfg.epsilon))


def clamp_values(radius_param: Tensor, geometry: Geometry, cfg: GeometryConfig) -> Tensor:
    """Plateau similarity value per ball (what every member patch scores)."""

    r_eff = effective_radii(radius_param, geometry, cfg)
    if geometry is Geometry.LOG:
        return log_clamp_values(r_eff, cfg)
    return torch.cos(r_eff)


def batched_similarities(
    patches: Tensor,
    centers: Tensor,
    radius_param: Tensor,
    geometry: Geometry,
    cfg: GeometryConfig,
) -> Tensor:
    """Clamped similarity of every patch against every ball, ``(..., M)``."""

    r_eff = effective_radii(radius_param, geometry, cfg)
    if geometry is Geometry.LOG:
        d2 = squared_center_distances(patches, centers)
        branch = torch.log((d2 + 1.0) / (d2 + cfg.epsilon))
        return pass_through_min(branch, log_clamp_values(r_eff, cfg))
    cos = cosine_center_similarities(patches, centers)
    return pass_through_min(cos, torch.cos(r_eff))


_ACOS_GUARD = 1e-7


def batched_ball_distances(
    patches: Tensor,
    centers: Tensor,
    radius_param: Tensor,
    geometry: Geometry,
    cfg: GeometryConfig,
) -> Tensor:
    """Clamped distance to each ball: the center distance outside, the radius inside.

    LOG distances are squared L2; COSINE distances are angles in radians.
    """

    r_eff = effective_radii(radius_param, geometry, cfg)
    if geometry is Geometry.LOG:
        d2 = squared_center_distances(patches, centers)
        return pass_through_max(d2, r_eff)
    cos = cosine_center_similarities(patches, centers)
    angle = torch.acos(cos.clamp(-1.0 + _ACOS_GUARD, 1.0 - _ACOS_GUARD))
    return pass_through_max(angle, r_eff)


def batched_memberships(
    patches: Tensor,
    centers: Tensor,
    radius_param: Tensor,
    geometry: Geometry,
    cfg: GeometryConfig,
) -> Tensor:
    """Boolean containment of every patch in every ball (boundary inclusive)."""

    r_eff = effective_radii(radius_param, geometry, cfg)
    if geometry is Geometry.LOG:
        return squared_center_distances(patches, centers) <= r_eff
    # angle <= r is equivalent to cos >= cos(r) on (0, pi].
    return cosine_center_similarities(patches, centers) >= torch.cos(r_eff)


def raw_center_distances(
    patches: Tensor,
    centers: Tensor,
    geometry: Geometry,
) -> Tensor:
    """Unclamped distance to each center (squared L2 for LOG, angle for COSINE).

    Used to rank members inside a ball, where the clamped similarity is
    constant by construction and cannot order anything.
    """

    if geometry is Geometry.LOG:
        return squared_center_distances(patches, centers)
    cos = cosine_center_similarities(patches, centers)
    return torch.acos(cos.clamp(-1.0, 1.0))


# ---------------------------------------------------------------------------
# Single-ball operations
# ---------------------------------------------------------------------------


def _check_patch(patch: Tensor, ball: PrototypeBall) -> Tensor:
    patch = torch.as_tensor(patch)
    if patch.dim() != 1:
        raise ValueError(f"patch must be a vector, got shape {tuple(patch.shape)}")
    if patch.shape[0] != ball.dim:
        raise ValueError(f"patch dimension {patch.shape[0]} does not match ball dimension {ball.dim}")
    if not torch.isfinite(patch).all():
        raise NonFiniteLatentError("patch contains non-finite entries")
    return patch


def effective_radius(ball: PrototypeBall, cfg: GeometryConfig) -> Tensor:
    """Effective radius of one ball (always positive; see :func:`effective_radii`)."""

    if ball.geometry is Geometry.COSINE and float(ball.radius_param) > math.pi:
        warnings.warn(
            f"cosine radius parameter {float(ball.radius_param):g} exceeds pi and is clamped; "
            "cos is only injective on (0, pi]",
            RuntimeWarning,
            stacklevel=2,
        )
    return effective_radii(ball.radius_param, ball.geometry, cfg).reshape(())


def log_ball_similarity(patch: Tensor, ball: PrototypeBall, cfg: GeometryConfig) -> Tensor:
    """Clamped log-ratio similarity of one patch to one LOG ball."""

    if ball.geometry is not Geometry.LOG:
        raise ValueError("log_ball_similarity requires a LOG-geometry ball")
    patch = _check_patch(patch, ball)
    sims = batched_similarities(
        patch.unsqueeze(0), ball.center.unsqueeze(0), ball.radius_param.reshape(1), ball.geometry, cfg
    )
    return sims.reshape(())


def cos_ball_similarity(patch: Tensor, ball: PrototypeBall, cfg: GeometryConfig) -> Tensor:
    """Clamped cosine similarity of one patch to one COSINE ball."""

    if ball.geometry is not Geometry.COSINE:
        raise ValueError("cos_ball_similarity requires a COSINE-geometry ball")
    patch = _check_patch(patch, ball)
    sims = batched_similarities(
        patch.unsqueeze(0), ball.center.unsqueeze(0), ball.radius_param.reshape(1), ball.geometry, cfg
    )
    return sims.reshape(())


def ball_similarity(patch: Tensor, ball: PrototypeBall, cfg: GeometryConfig) -> Tensor:
    if ball.geometry is Geometry.LOG:
        return log_ball_similarity(patch, ball, cfg)
    return cos_ball_similarity(patch, ball, cfg)


def ball_distance(patch: Tensor, ball: PrototypeBall, cfg: GeometryConfig) -> Tensor:
    """Distance consumed by the losses: center distance outside, radius inside."""

    patch = _check_patch(patch, ball)
    d = batched_ball_distances(
        patch.unsqueeze(0), ball.center.unsqueeze(0), ball.radius_param.reshape(1), ball.geometry, cfg
    )
    return d.reshape(())


def is_member(patch: Tensor, ball: PrototypeBall, cfg: GeometryConfig) -> bool:
    """Containment test, boundary inclusive."""

    patch = _check_patch(patch, ball)
    inside = batched_memberships(
        patch.unsqueeze(0), ball.center.unsqueeze(0), ball.radius_param.reshape(1), ball.geometry, cfg
    )
    return bool(inside.reshape(()))


def similarity_map(grid: LatentPatchGrid, ball: PrototypeBall, cfg: GeometryConfig, prototype_id: int = -1) -> SimilarityMap:
    """Per-cell clamped similarity over a whole patch grid."""

    if grid.dim != ball.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match ball dimension {ball.dim}")
    flat = grid.patches.reshape(-1, grid.dim)
    sims = batched_similarities(
        flat, ball.center.unsqueeze(0), ball.radius_param.reshape(1), ball.geometry, cfg
    )
    return SimilarityMap(values=sims.reshape(grid.height, grid.width), prototype_id=prototype_id)


def max_pool_similarity(sim_map: SimilarityMap) -> tuple[float, tuple[int, int]]:
    """Maximum map value and the row-major-first coordinates of its argmax."""

    values = sim_map.values
    if values.numel() == 0:
        raise ValueError("cannot max-pool an empty similarity map")
    arr = values.detach().cpu().numpy()
    flat_idx = int(np.argmax(arr))  # np.argmax returns the first maximum in row-major order
    row, col = divmod(flat_idx, arr.shape[1])
    return float(arr[row, col]), (row, col)
