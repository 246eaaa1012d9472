"""Low-rank adapters and their token-routed mixture.

A ``LoraAdapter`` adds a rank-r update (alpha/r) * B @ A on top of a frozen
linear weight; B starts at zero so a fresh adapter is an exact no-op. A
``MoLoraLayer`` keeps N such adapters on one frozen weight plus a linear
router: each token's hidden state picks its top-K experts by softmax
affinity and blends them with renormalized router weights.

Layers are safe to share read-only; training mutates adapter tensors under
a single writer.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    col_slice,
    linear,
    softmax,
)


class ConfigurationError(ValueError):
    """Raised for invalid adapter or layer hyperparameters."""


class LoraAdapter:
    """Trainable pair (A, B) with rank r and scale alpha/r for one linear."""

    def __init__(self, A: Tensor, B: Tensor, rank: int, alpha: float):
        self.A = A
        self.B = B
        self.rank = rank
        self.alpha = float(alpha)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def in_dim(self) -> int:
        return self.A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.B.shape[0]

    def trainable_tensors(self) -> list[Tensor]:
        return [self.A, self.B]


def lora_init(d: int, d_out: int, rank: int, alpha: float,
              init_std: float = 0.02, seed: int = 0,
              dtype=DEFAULT_DTYPE) -> LoraAdapter:
    """Fresh adapter: A ~ Normal(0, init_std^2) under the seed, B all zeros.

    With B at zero the update B @ A is exactly zero, so the adapted linear
    reproduces its frozen base until training moves B.
    """
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    if rank >= min(d, d_out):
        raise ConfigurationError(
            f"rank {rank} must stay below min(d, d_out) = {min(d, d_out)}")
    if init_std <= 0:
        raise ConfigurationError(f"init_std must be positive, got {init_std}")
    gen = np.random.default_rng(seed)
    a = gen.normal(0.0, init_std, size=(rank, d)).astype(dtype)
    b = np.zeros((d_out, rank), dtype=dtype)
    return LoraAdapter(Tensor(a, requires_grad=True),
                       Tensor(b, requires_grad=True), rank, alpha)


def lora_forward(adapter: LoraAdapter, weight: Tensor, x: Tensor) -> Tensor:
    """W x + (alpha/r) * B (A x) for x of shape [T, d].

    Gradients reach A and B only; ``weight`` stays frozen.
    """
    if weight.shape != (adapter.out_dim, adapter.in_dim):
        raise ShapeError(
            f"weight shape {weight.shape} does not match adapter "
            f"({adapter.out_dim}, {adapter.in_dim})")
    base = linear(x, weight)
    update = linear(linear(x, adapter.A), adapter.B)
    return base + adapter.scale * update


def lora_merge(adapter: LoraAdapter, weight: Tensor) -> Tensor:
    """Dense weight W + (alpha/r) * B @ A.

    Pure: merging twice double-counts, the caller owns idempotence. Only
    plain LoRA merges; a routed mixture has no input-independent dense
    equivalent, so ``MoLoraLayer`` is rejected.
    """
    if isinstance(adapter, MoLoraLayer):
        raise ConfigurationError(
            "cannot merge a routed mixture: expert blending depends on the input")
    if weight.shape != (adapter.out_dim, adapter.in_dim):
        raise ShapeError(
            f"weight shape {weight.shape} does not match adapter "
            f"({adapter.out_dim}, {adapter.in_dim})")
    merged = weight.data + adapter.scale * (adapter.B.data @ adapter.A.data)
    return Tensor(np.ascontiguousarray(merged))


class MoLoraLayer:
    """Frozen weight plus N rank-r experts and a top-K token router."""

    def __init__(self, weight: Tensor, experts: list[LoraAdapter],
                 router: Tensor, top_k: int, renormalize: bool = True):
        if not experts:
            raise ConfigurationError("a mixture needs at least one expert")
        rank, alpha = experts[0].rank, experts[0].alpha
        for e in experts:
            if e.rank != rank or e.alpha != alpha:
                raise ConfigurationError(
                    "all experts must share the same rank and alpha")
        n = len(experts)
        if not 1 <= top_k <= n:
            raise ConfigurationError(
                f"top_k must lie in [1, {n}], got {top_k}")
        d_out, d_in = weight.shape
        if (experts[0].in_dim, experts[0].out_dim) != (d_in, d_out):
            raise ShapeError(
                f"expert dims ({experts[0].in_dim}, {experts[0].out_dim}) do not "
                f"match weight {weight.shape}")
        if router.shape != (n, d_in):
            raise ShapeError(
                f"router shape {router.shape} must be ({n}, {d_in})")
        weight.requires_grad = False  # base stays frozen, permanently
        self.weight = weight
        self.experts = experts
        self.router = router
        self.top_k = top_k
        self.renormalize = renormalize

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def scale(self) -> float:
        return self.experts[0].scale

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def trainable_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for e in self.experts:
            out.extend(e.trainable_tensors())
        out.append(self.router)
        return out


def build_molora(weight: Tensor, n_experts: int, rank: int, alpha: float,
                 top_k: int, a_init_std: float = 0.02,
                 router_init_std: float = 0.02, seed: int = 0,
                 renormalize: bool = True, dtype=DEFAULT_DTYPE) -> MoLoraLayer:
    """Construct a fresh mixture layer on a frozen weight, seeded."""
    d_out, d_in = weight.shape
    gen = np.random.default_rng(seed)
    router = Tensor(
        gen.normal(0.0, router_init_std, size=(n_experts, d_in)).astype(dtype),
        requires_grad=True)
    expert_seeds = gen.integers(0, 2 ** 63 - 1, size=n_experts)
    experts = [
        lora_init(d_in, d_out, rank, alpha, a_init_std, int(s), dtype=dtype)
        for s in expert_seeds
    ]
    return MoLoraLayer(weight, experts, router, top_k, renormalize)


def _topk_rows(probs: np.ndarray, k: int,
               renormalize: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per row: indices of the k largest entries (ties toward the lower
    index), ascending, and their (optionally renormalized) weights."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    idx = np.sort(order[:, :k], axis=-1)
    sel = np.take_along_axis(probs, idx, axis=-1)
    if renormalize:
        weights = sel / sel.sum(axis=-1, keepdims=True)
    else:
        weights = sel
    return idx, weights


def topk_mask(p: Tensor, k: int, renormalize: bool = True
              ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Dense per-token routing weights from full softmax probabilities.

    Returns a [T, N] tensor that is zero off the selected experts and the
    selection as plain arrays (indices [T, K], weights [T, K]) for tracing.
    Selection is a constant of the backward pass; gradients flow only into
    the selected probabilities, which keeps unselected experts at exactly
    zero gradient.
    """
    if p.ndim != 2:
        raise ShapeError(f"topk_mask needs 2-D probabilities, got {p.shape}")
    idx, weights = _topk_rows(p.data, k, renormalize)
    mask = np.zeros_like(p.data)
    np.put_along_axis(mask, idx, weights.astype(p.data.dtype), axis=-1)

    sel = np.take_along_axis(p.data, idx, axis=-1)

    def bp(g: np.ndarray) -> None:
        if not p.requires_grad:
            return
        gsel = np.take_along_axis(g, idx, axis=-1)
        if renormalize:
            total = sel.sum(axis=-1, keepdims=True)
            inner = (gsel * weights).sum(axis=-1, keepdims=True)
            dsel = (gsel - inner) / total
        else:
            dsel = gsel
        dp = np.zeros_like(p.data)
        np.put_along_axis(dp, idx, dsel, axis=-1)
        p._accumulate(dp)

    return Tensor._from_op(mask, (p,), bp), idx, weights


def route(layer: MoLoraLayer, x) -> tuple[list[int], list[float]]:
    """Routing decision for a single token vector.

    Softmax affinities over all N experts, then the K largest (ties broken
    toward the lower index), weights renormalized to sum to one unless the
    layer opts out.
    """
    vec = x.data if isinstance(x, Tensor) else np.asarray(x)
    vec = vec.reshape(-1)
    if vec.shape[0] != layer.in_dim:
        raise ShapeError(
            f"token dim {vec.shape[0]} does not match layer input {layer.in_dim}")
    logits = (layer.router.data @ vec)[None, :]
    probs = softmax(Tensor(logits, dtype=logits.dtype)).data
    idx, weights = _topk_rows(probs, layer.top_k, layer.renormalize)
    return [int(i) for i in idx[0]], [float(w) for w in weights[0]]


def molora_forward(layer: MoLoraLayer, x: Tensor,
                   on_route=None) -> Tensor:
    """W x plus the routed expert blend, per token.

    Each row of x routes independently: p = softmax(W_r x), top-K selection,
    output W x + (alpha/r) * sum_i w_i * B_i (A_i x) over the selected
    experts. ``on_route`` (if given) receives (indices [T, K], weights
    [T, K]) for analytics.
    """
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(
            f"input {x.shape} does not match layer input dim {layer.in_dim}")
    probs = softmax(linear(x, layer.router))
    mask, idx, weights = topk_mask(probs, layer.top_k, layer.renormalize)
    if on_route is not None:
        on_route(idx, weights)

    out = linear(x, layer.weight)
    present = np.unique(idx)
    for i in present:
        e = layer.experts[i]
        update = linear(linear(x, e.A), e.B)
        out = out + layer.scale * (col_slice(mask, int(i), int(i) + 1) * update)
    return out


def trainable_param_count(obj) -> int:
    """Trainable parameter count: r*(d+d') per adapter, plus N*d for a
    mixture's router."""
    if isinstance(obj, LoraAdapter):
        return obj.A.size + obj.B.size
    if isinstance(obj, MoLoraLayer):
        return sum(trainable_param_count(e) for e in obj.experts) + obj.router.size
    raise TypeError(f"unsupported object {type(obj).__name__}")
