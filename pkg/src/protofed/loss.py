"""Client objective: cross-entropy + prototype terms + adapter and proximal
regularisers.

Each term is a fused scalar op with its own backward rule; the total is
assembled once per batch and differentiated through the model graph.  The
separation term enters the total with a negative sign.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, ProtocolError
from .model import ClassificationHead, ParamGroups, PrototypeLayer
from .tensor import Tensor, _make


@dataclass
class LossWeights:
    beta: float = 1e-4  # adapter L2
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    gamma: float = 1e-4  # head L1
    mu1: float = 0.01  # adapter proximal
    mu2: float = 0.01  # prototype proximal
    l1_on_prototypes: bool = False

    def validate(self):
        for name in ("beta", "lambda_clst", "lambda_sep", "gamma", "mu1", "mu2"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    """Per-term scalar values; clst/sep/l1/adapter_l2 are unweighted."""

    ce: float
    clst: float
    sep: float
    l1: float
    adapter_l2: float
    prox: float
    total: float

    FIELDS = ("ce", "clst", "sep", "l1", "adapter_l2", "prox", "total")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class."""
    labels = np.asarray(labels)
    b, c = logits.data.shape
    if b == 0:
        raise DataError("cross_entropy: empty batch")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise DataError(
            f"cross_entropy: label {labels[bad[0]]} at index {bad[0]} outside [0, {c})"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = np.asarray((lse - z[np.arange(b), labels]).mean())

    def backward(g: np.ndarray):
        if logits.requires_grad:
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(b), labels] -= 1.0
            logits.accumulate(p * (float(g) / b))

    return _make(out, (logits,), backward)


def _class_min_distance(dmaps: Tensor, labels: np.ndarray, layer: PrototypeLayer,
                        correct: bool) -> Tensor:
    """Mean over the batch of min distance over a label-restricted prototype set."""
    labels = np.asarray(labels)
    b, m, oh, ow = dmaps.data.shape
    member = layer.class_ids[None, :] == labels[:, None]  # (B, m)
    if not correct:
        member = ~member
    masked = np.where(member[:, :, None, None], dmaps.data, np.inf)
    flat = masked.reshape(b, -1)
    idx = np.argmin(flat, axis=1)  # first minimum in (prototype, scan) order
    vals = flat[np.arange(b), idx]
    out = np.asarray(vals.mean())

    def backward(g: np.ndarray):
        if dmaps.requires_grad:
            d = np.zeros((b, m * oh * ow), dtype=dmaps.data.dtype)
            d[np.arange(b), idx] = float(g) / b
            dmaps.accumulate(d.reshape(dmaps.data.shape))

    return _make(out, (dmaps,), backward)


def cluster_loss(dmaps: Tensor, labels, layer: PrototypeLayer) -> Tensor:
    """Pulls each sample toward its nearest correct-class prototype."""
    labels = np.asarray(labels)
    counts = np.bincount(layer.class_ids, minlength=int(labels.max()) + 1)
    missing = np.unique(labels[counts[labels] == 0])
    if missing.size:
        raise ConfigurationError(f"class {missing[0]} has no prototypes")
    return _class_min_distance(dmaps, labels, layer, correct=True)


def separation_loss(dmaps: Tensor, labels, layer: PrototypeLayer) -> Tensor:
    """Distance to the nearest wrong-class prototype (subtracted in the total)."""
    labels = np.asarray(labels)
    has_wrong = np.array([(layer.class_ids != y).any() for y in labels])
    if not has_wrong.all():
        warnings.warn("separation_loss: no wrong-class prototypes; term defined as 0")
        return Tensor(np.asarray(0.0))
    return _class_min_distance(dmaps, labels, layer, correct=False)


def adapter_l2(alpha: dict[str, Tensor]) -> Tensor:
    """Unweighted sum of squares over every adapter tensor."""
    tensors = list(alpha.values())
    out = np.asarray(sum(float(np.sum(t.data * t.data)) for t in tensors))

    def backward(g: np.ndarray):
        for t in tensors:
            if t.requires_grad:
                t.accumulate(2.0 * float(g) * t.data)

    return _make(out, tuple(tensors), backward)


def head_l1(head: ClassificationHead) -> Tensor:
    """Sum of absolute head weights; subgradient at 0 is 0."""
    w = head.weights
    out = np.asarray(np.abs(w.data).sum())

    def backward(g: np.ndarray):
        if w.requires_grad:
            w.accumulate(float(g) * np.sign(w.data))

    return _make(out, (w,), backward)


def l1_sum(t: Tensor) -> Tensor:
    out = np.asarray(np.abs(t.data).sum())

    def backward(g: np.ndarray):
        if t.requires_grad:
            t.accumulate(float(g) * np.sign(t.data))

    return _make(out, (t,), backward)


def range_penalty(z: Tensor, limit: float = 1.0) -> Tensor:
    """Mean squared excess of activations above ``limit``.

    Used during central warmup so the frozen feature space ends up on the
    same scale as the prototypes' unit-cube initialization; otherwise
    prototypes can never settle on the strongest (lesion-core) features.
    """
    excess = np.maximum(z.data - limit, 0.0)
    out = np.asarray(np.mean(excess * excess))

    def backward(g: np.ndarray):
        if z.requires_grad:
            z.accumulate((2.0 * float(g) / z.data.size) * excess)

    return _make(out, (z,), backward)


def proximal(alpha_local: dict[str, Tensor], phi_local: dict[str, Tensor],
             alpha_global: dict[str, np.ndarray], phi_global: dict[str, np.ndarray],
             mu1: float, mu2: float) -> Tensor:
    """(mu1/2)||alpha - alpha_g||^2 + (mu2/2)||phi - phi_g||^2.

    Only tensors present in the global reference are tethered; the gradient
    w.r.t. a local tensor is mu * (local - global).
    """
    terms: list[tuple[Tensor, np.ndarray, float]] = []
    for local, ref, mu in ((alpha_local, alpha_global, mu1), (phi_local, phi_global, mu2)):
        for name, ga in ref.items():
            if name not in local:
                raise ProtocolError(f"proximal: global tensor '{name}' missing locally")
            t = local[name]
            if t.data.shape != ga.shape:
                raise ProtocolError(
                    f"proximal: shape mismatch for '{name}': {t.data.shape} vs {ga.shape}"
                )
            terms.append((t, ga, mu))
    total = 0.0
    for t, ga, mu in terms:
        diff = t.data - ga
        total += 0.5 * mu * float(np.sum(diff * diff))
    out = np.asarray(total)

    def backward(g: np.ndarray):
        for t, ga, mu in terms:
            if t.requires_grad:
                t.accumulate(float(g) * mu * (t.data - ga))

    return _make(out, tuple(t for t, _, _ in terms), backward)


def _weighted_sum(pairs: list[tuple[float, Tensor]]) -> Tensor:
    out = np.asarray(sum(c * float(t.data) for c, t in pairs))

    def backward(g: np.ndarray):
        for c, t in pairs:
            if t.requires_grad:
                t.accumulate(np.asarray(c * float(g)))

    return _make(out, tuple(t for _, t in pairs), backward)


def local_loss(logits: Tensor, dmaps: Tensor, labels, params: ParamGroups,
               layer: PrototypeLayer, head: ClassificationHead,
               weights: LossWeights,
               alpha_global: dict[str, np.ndarray] | None = None,
               phi_global: dict[str, np.ndarray] | None = None,
               ) -> tuple[Tensor, LossBreakdown]:
    """Assemble the full client objective; returns (total node, breakdown).

    Gradient flows to adapter, prototype and head tensors only; with no
    global references the proximal term is 0.
    """
    ce = cross_entropy(logits, labels)
    clst = cluster_loss(dmaps, labels, layer)
    sep = separation_loss(dmaps, labels, layer)
    l1 = l1_sum(layer.prototypes) if weights.l1_on_prototypes else head_l1(head)
    al2 = adapter_l2(params.alpha)
    if alpha_global or phi_global:
        prox = proximal(params.alpha, params.phi, alpha_global or {}, phi_global or {},
                        weights.mu1, weights.mu2)
    else:
        prox = Tensor(np.asarray(0.0))
    total = _weighted_sum([
        (1.0, ce),
        (weights.lambda_clst, clst),
        (-weights.lambda_sep, sep),
        (weights.gamma, l1),
        (weights.beta, al2),
        (1.0, prox),
    ])
    breakdown = LossBreakdown(
        ce=float(ce.data), clst=float(clst.data), sep=float(sep.data),
        l1=float(l1.data), adapter_l2=float(al2.data), prox=float(prox.data),
        total=float(total.data),
    )
    return total, breakdown
