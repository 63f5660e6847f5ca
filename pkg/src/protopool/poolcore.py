"""Prototype-pool classification head.

A pool of M trainable prototype vectors is shared by all classes.  Each
class owns K slots; a slot holds trainable logits over the pool, relaxed to
a point on the M-simplex with a Gumbel-Softmax estimator during training and
hardened to an exact one-hot at evaluation time.

Per-image similarity of a prototype is *focal*: the maximum per-location
similarity minus the mean.  A prototype that lights up everywhere (typical
for background features) scores near zero, while one active at a single rare
location scores highest, and the mean term lets gradient flow through every
location instead of only the argmax.  Class logits are the slot similarities
mixed through a block-initialised linear head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffengine as de

DEFAULT_EPSILON = 1e-4
GUMBEL_VARIANTS = ("paper", "classic", "off")


def gumbel_noise(rng, n: int) -> np.ndarray:
    """``n`` standard Gumbel draws: -log(-log(u)), u ~ Uniform(0, 1).

    ``u`` is clamped to (1e-12, 1 - 1e-12) so the double log never sees 0.
    ``rng`` only needs a ``random(n)`` method, so seeded generators and test
    stubs both work.
    """
    u = np.clip(np.asarray(rng.random(n), dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(q, tau: float, eta, variant: str = "paper") -> de.Tensor:
    """Relaxed categorical sample(s) from logits ``q`` and noise ``eta``.

    variant="classic": y_i proportional to exp((q_i + eta_i) / tau)
    variant="paper":   y_i proportional to exp(q_i / tau + eta_i)

    The second form divides only the logits by the temperature, so the noise
    loses influence as tau shrinks.  ``q`` may be a vector or a matrix of row
    vectors; the softmax is taken along the last axis and the output is
    differentiable with respect to ``q``.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if variant not in ("paper", "classic"):
        raise ValueError(f"unknown gumbel variant {variant!r}")
    q = q if isinstance(q, de.Tensor) else de.Tensor(q)
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape != q.shape:
        raise de.ShapeError(f"noise shape {eta.shape} does not match logits shape {q.shape}")
    if variant == "classic":
        scores = de.add(de.mul(q, 1.0 / tau), de.Tensor(eta / tau))
    else:
        scores = de.add(de.mul(q, 1.0 / tau), de.Tensor(eta))
    return de.softmax(scores, axis=-1)


def harden(q_logits) -> np.ndarray:
    """Exact one-hot at the argmax of a logit vector; ties break to the lowest index."""
    arr = q_logits.data if isinstance(q_logits, de.Tensor) else np.asarray(q_logits, dtype=np.float64)
    if arr.ndim != 1:
        raise de.ShapeError(f"harden expects a vector, got shape {arr.shape}")
    out = np.zeros_like(arr)
    out[int(np.argmax(arr))] = 1.0
    return out


def _harden_rows(mat: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mat)
    out[np.arange(mat.shape[0]), np.argmax(mat, axis=1)] = 1.0
    return out


@dataclass
class PrototypePool:
    """M trainable prototype vectors of dimension D, shared by all classes."""

    prototypes: de.Tensor  # [M, D]

    def __post_init__(self):
        if self.prototypes.ndim != 2:
            raise de.ShapeError(f"prototype pool must be [M, D], got {self.prototypes.shape}")

    @property
    def pool_size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def depth(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class SlotBank:
    """Per-class, per-slot assignment logits plus their relaxation settings."""

    logits: de.Tensor  # [C, K, M]
    tau: float = 1.0
    noise_enabled: bool = True
    variant: str = "paper"

    def __post_init__(self):
        if self.logits.ndim != 3:
            raise de.ShapeError(f"slot logits must be [C, K, M], got {self.logits.shape}")
        if self.variant not in GUMBEL_VARIANTS:
            raise ValueError(f"unknown gumbel variant {self.variant!r}")

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    @property
    def slots_per_class(self) -> int:
        return self.logits.shape[1]

    @property
    def pool_size(self) -> int:
        return self.logits.shape[2]

    @property
    def num_slots(self) -> int:
        return self.num_classes * self.slots_per_class


@dataclass
class ClassifierHead:
    """Dense (C*K) x C head over slot similarities.

    At initialisation the weight is 1.0 on each slot-to-own-class connection
    and 0.0 elsewhere, so every class starts out scored by exactly its own
    slots (positive reasoning path).
    """

    weights: de.Tensor  # [C*K, C]

    @classmethod
    def block_init(cls, num_classes: int, slots_per_class: int) -> "ClassifierHead":
        w = np.zeros((num_classes * slots_per_class, num_classes))
        for c in range(num_classes):
            w[c * slots_per_class : (c + 1) * slots_per_class, c] = 1.0
        return cls(weights=de.Tensor(w, requires_grad=True))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def slots_per_class(self) -> int:
        return self.weights.shape[0] // self.weights.shape[1]

    def block_mask(self) -> np.ndarray:
        """0/1 mask of the slot-to-own-class connections."""
        mask = np.zeros(self.weights.shape)
        for c in range(self.num_classes):
            mask[c * self.slots_per_class : (c + 1) * self.slots_per_class, c] = 1.0
        return mask


@dataclass
class FeatureMap:
    """H*W location vectors of one image, row-major over the spatial grid."""

    locations: np.ndarray  # [H*W, D]
    height: int
    width: int

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64)
        if self.locations.ndim != 2 or self.locations.shape[0] != self.height * self.width:
            raise de.ShapeError(
                f"feature map needs [{self.height * self.width}, D] locations, got {self.locations.shape}"
            )
        if self.height * self.width < 1:
            raise de.ShapeError("feature map needs at least one location")
        if not np.isfinite(self.locations).all():
            raise de.DomainError("feature map values must be finite")

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FeatureMap":
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise de.ShapeError(f"expected [H, W, D] grid, got {grid.shape}")
        h, w, d = grid.shape
        return cls(locations=grid.reshape(h * w, d), height=h, width=w)

    @property
    def depth(self) -> int:
        return self.locations.shape[1]


def base_similarity(dist2, epsilon: float = DEFAULT_EPSILON) -> de.Tensor:
    """log((d2 + 1) / (d2 + epsilon)), elementwise.

    Strictly decreasing in the squared distance, bounded in (0, log(1/eps)],
    and free of the blow-up that log(1 + 1/d2) has at d2 -> 0.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    d = dist2 if isinstance(dist2, de.Tensor) else de.Tensor(dist2)
    if d.size and np.any(d.data < 0.0):
        raise de.DomainError("squared distances must be non-negative")
    return de.sub(de.log(de.add(d, 1.0)), de.log(de.add(d, epsilon)))


def prototype_similarities(
    zmap, prototypes, epsilon: float = DEFAULT_EPSILON, focal: bool = True
) -> de.Tensor:
    """Per-prototype image similarity vector [M] for one feature map [N, D].

    Each column of the location-by-prototype similarity matrix is reduced to
    max - mean (or max alone when ``focal`` is off).  Columns are computed
    independently, so the M=1 case reproduces the per-prototype path bit for
    bit.
    """
    z = zmap if isinstance(zmap, de.Tensor) else de.Tensor(zmap)
    p = prototypes if isinstance(prototypes, de.Tensor) else de.Tensor(prototypes)
    g = base_similarity(de.pairwise_sq_dist(z, p), epsilon)
    top = de.reduce_max(g, 0)
    if not focal:
        return top
    return de.sub(top, de.reduce_mean(g, 0))


def _as_location_matrix(zmap) -> np.ndarray:
    if isinstance(zmap, FeatureMap):
        return zmap.locations
    arr = zmap.data if isinstance(zmap, de.Tensor) else np.asarray(zmap, dtype=np.float64)
    if arr.ndim != 2:
        raise de.ShapeError(f"expected [N, D] locations, got shape {arr.shape}")
    return arr


def focal_similarity(zmap, prototype, epsilon: float = DEFAULT_EPSILON) -> de.Tensor:
    """max - mean of per-location similarities to one prototype (scalar, >= 0)."""
    z = zmap if isinstance(zmap, de.Tensor) else de.Tensor(_as_location_matrix(zmap))
    p = prototype if isinstance(prototype, de.Tensor) else de.Tensor(prototype)
    if p.ndim != 1:
        raise de.ShapeError(f"expected a prototype vector, got shape {p.shape}")
    vec = prototype_similarities(z, de.reshape(p, (1, p.size)), epsilon)
    return de.reshape(vec, ())


def slot_similarity(zmap, q, pool: PrototypePool, epsilon: float = DEFAULT_EPSILON) -> de.Tensor:
    """Expected focal similarity under a slot distribution: sum_m q_m * focal_m.

    For a distribution concentrated on one prototype this reduces exactly to
    that prototype's focal similarity.
    """
    z = zmap if isinstance(zmap, de.Tensor) else de.Tensor(_as_location_matrix(zmap))
    qt = q if isinstance(q, de.Tensor) else de.Tensor(q)
    if qt.ndim != 1 or qt.size != pool.pool_size:
        raise de.ShapeError(f"slot distribution shape {qt.shape} does not match pool size {pool.pool_size}")
    vec = prototype_similarities(z, pool.prototypes, epsilon)
    out = de.matmul(de.reshape(qt, (1, qt.size)), de.reshape(vec, (vec.size, 1)))
    return de.reshape(out, ())


def orthogonality_loss(distributions) -> de.Tensor:
    """Sum of pairwise cosines among each class's slot distributions, divided
    by (number of classes * slots per class).

    Accepts [K, M] (one class) or [C, K, M].  Zero exactly when every
    within-class pair of slot vectors is orthogonal, i.e. when no prototype
    is claimed by two slots of the same class.
    """
    t = distributions if isinstance(distributions, de.Tensor) else de.Tensor(distributions)
    if t.ndim == 2:
        t = de.reshape(t, (1,) + t.shape)
    if t.ndim != 3:
        raise de.ShapeError(f"expected [C, K, M] or [K, M] distributions, got {t.shape}")
    num_classes, slots_per_class, _ = t.shape

    norms = np.sqrt((t.data * t.data).sum(axis=2))  # [C, K]
    if np.any(norms == 0.0):
        raise de.DomainError("orthogonality loss is undefined for a zero-norm slot distribution")
    unit = t.data / norms[:, :, None]
    summed = unit.sum(axis=1)  # [C, M]
    # sum_{i<j} <u_i, u_j> = (||sum_k u_k||^2 - K) / 2, accumulated over classes
    total = float(((summed * summed).sum(axis=1) - slots_per_class).sum() / 2.0)

    def backward_fn(g):
        proj = np.einsum("ckm,cm->ck", unit, summed)
        grad = (summed[:, None, :] - unit * proj[:, :, None]) / norms[:, :, None]
        return (float(g) * grad,)

    pair_sum = de.custom_op(total, (t,), "pairwise_cosine_sum", backward_fn)
    return de.mul(pair_sum, 1.0 / (num_classes * slots_per_class))


def activation_map(zmap, prototype, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-location base similarity to one prototype, reshaped to [H, W]."""
    if not isinstance(zmap, FeatureMap):
        raise de.ShapeError("activation_map expects a FeatureMap")
    p = prototype.data if isinstance(prototype, de.Tensor) else np.asarray(prototype, dtype=np.float64)
    vals = base_similarity(de.sq_dist_map(de.Tensor(zmap.locations), de.Tensor(p)), epsilon)
    return vals.data.reshape(zmap.height, zmap.width).copy()


def slot_noise(rng, slots: SlotBank) -> np.ndarray:
    """One fresh Gumbel draw per slot-and-prototype pair: [C*K, M]."""
    return gumbel_noise(rng, slots.num_slots * slots.pool_size).reshape(slots.num_slots, slots.pool_size)


def relaxed_assignments(slots: SlotBank, eta: Optional[np.ndarray] = None) -> de.Tensor:
    """Current [C*K, M] relaxed slot distributions as a differentiable tensor.

    ``eta=None`` means noise off (the zero-noise relaxation).  With
    variant="off" the logits go through a plain softmax, ignoring both the
    temperature and the noise.
    """
    flat = de.reshape(slots.logits, (slots.num_slots, slots.pool_size))
    if slots.variant == "off":
        return de.softmax(flat, axis=1)
    if eta is None:
        eta = np.zeros((slots.num_slots, slots.pool_size))
    return gumbel_softmax(flat, slots.tau, eta, slots.variant)


def hardened_assignments(slots: SlotBank) -> np.ndarray:
    """Exact one-hot assignment per slot, [C*K, M]; argmax of the raw logits."""
    return _harden_rows(slots.logits.data.reshape(slots.num_slots, slots.pool_size))


def forward_graph(
    latent,
    slots: SlotBank,
    pool: PrototypePool,
    head: ClassifierHead,
    mode: str,
    eta: Optional[np.ndarray] = None,
    epsilon: float = DEFAULT_EPSILON,
    focal: bool = True,
):
    """Batched forward pass over latent feature maps.

    ``latent`` is a [B, N, D] tensor (or array) of per-location vectors.
    Returns ``(logits [B, C], slot_sims [B, C*K], assignments [C*K, M])``.
    Train mode uses the relaxed distributions built from ``eta``; eval mode
    uses hardened one-hots and ignores ``eta``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    z = latent if isinstance(latent, de.Tensor) else de.Tensor(latent)
    if z.ndim != 3:
        raise de.ShapeError(f"expected [B, N, D] latent maps, got shape {z.shape}")
    batch, locs, depth = z.shape
    if depth != pool.depth:
        raise de.ShapeError(f"latent depth {depth} does not match prototype depth {pool.depth}")
    if slots.pool_size != pool.pool_size or head.weights.shape[0] != slots.num_slots:
        raise de.ShapeError("slot bank, pool and head dimensions are inconsistent")

    flat = de.reshape(z, (batch * locs, depth))
    g = base_similarity(de.pairwise_sq_dist(flat, pool.prototypes), epsilon)
    g3 = de.reshape(g, (batch, locs, pool.pool_size))
    top = de.reduce_max(g3, 1)
    sims = de.sub(top, de.reduce_mean(g3, 1)) if focal else top  # [B, M]

    if mode == "eval":
        assign = de.Tensor(hardened_assignments(slots))
    else:
        assign = relaxed_assignments(slots, eta)

    slot_sims = de.matmul(sims, de.transpose(assign))  # [B, C*K]
    logits = de.matmul(slot_sims, head.weights)  # [B, C]
    return logits, slot_sims, assign


def forward(
    zmap,
    slots: SlotBank,
    pool: PrototypePool,
    head: ClassifierHead,
    mode: str,
    rng=None,
    epsilon: float = DEFAULT_EPSILON,
    focal: bool = True,
) -> de.Tensor:
    """Class logits [C] for a single feature map.

    In train mode a fresh noise draw is taken per call when ``rng`` is given
    and the bank has noise enabled; eval mode hardens the assignments and
    never draws noise.
    """
    locations = _as_location_matrix(zmap)
    eta = None
    if mode == "train" and slots.noise_enabled and slots.variant != "off" and rng is not None:
        eta = slot_noise(rng, slots)
    logits, _, _ = forward_graph(
        de.reshape(de.Tensor(locations), (1,) + locations.shape),
        slots,
        pool,
        head,
        mode,
        eta=eta,
        epsilon=epsilon,
        focal=focal,
    )
    return de.reshape(logits, (slots.num_classes,))


def max_assignment_per_slot(slots: SlotBank) -> np.ndarray:
    """Largest relaxed (noise-free) probability of each slot, [C*K]."""
    return relaxed_assignments(slots).data.max(axis=1)
