"""Toy LLaMA-style causal decoder with a frozen base and trainable adapters.

Every base matrix is frozen at construction. The three FFN linears (gate,
up, down projections) each carry a token-routed mixture of low-rank experts;
the four attention projections carry plain low-rank adapters. Fresh
adapters are exact no-ops, so a new model reproduces its frozen base
bit for bit.

Inference on an unchanging model is safe to share across threads; training
mutates adapter tensors under a single writer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .adapters import (
    ConfigurationError,
    LoraAdapter,
    MoLoraLayer,
    build_molora,
    lora_forward,
    lora_init,
    molora_forward,
)
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    col_slice,
    concat_cols,
    embedding,
    linear,
    matmul,
    rmsnorm,
    silu,
    softmax,
    transpose,
)

FFN_SLOTS = ("gate", "up", "down")


class SequenceLengthError(ValueError):
    """Raised when an input sequence exceeds the configured maximum."""


def default_ffn_dim(dim: int) -> int:
    """Hidden width of the gated FFN: 8/3 of the model width, rounded."""
    return int(round(8 * dim / 3))


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 64
    ffn_dim: int | None = None
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5
    rank: int = 16
    alpha: float = 32.0
    n_experts: int = 8
    top_k: int = 2
    a_init_std: float = 0.02
    router_init_std: float = 0.02
    renormalize_router: bool = True
    train_norms: bool = False

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = default_ffn_dim(self.dim)
        if self.vocab_size < 1:
            raise ConfigurationError("vocab_size must be positive")
        if self.dim % self.n_heads != 0:
            raise ConfigurationError(
                f"dim {self.dim} must be divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 2 != 0:
            raise ConfigurationError(
                "head dim must be even for rotary position embeddings")
        if self.ffn_dim < self.dim:
            raise ConfigurationError(
                f"ffn_dim {self.ffn_dim} must be >= dim {self.dim}")
        if self.rmsnorm_eps <= 0:
            raise ConfigurationError("rmsnorm_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class AttentionBlock:
    """Frozen q,k,v,o projections, each with a plain low-rank adapter."""

    def __init__(self, weights: dict[str, Tensor],
                 adapters: dict[str, LoraAdapter], n_heads: int):
        self.weights = weights
        self.adapters = adapters
        self.n_heads = n_heads

    def project(self, name: str, x: Tensor, use_adapters: bool) -> Tensor:
        if use_adapters:
            return lora_forward(self.adapters[name], self.weights[name], x)
        return linear(x, self.weights[name])


class FfnBlock:
    """Gated FFN whose three linears are token-routed expert mixtures."""

    def __init__(self, gate: MoLoraLayer, up: MoLoraLayer, down: MoLoraLayer):
        self.gate = gate
        self.up = up
        self.down = down

    def slot(self, name: str) -> MoLoraLayer:
        return getattr(self, name)


class DecoderLayer:
    def __init__(self, attn: AttentionBlock, ffn: FfnBlock,
                 attn_norm: Tensor, ffn_norm: Tensor):
        self.attn = attn
        self.ffn = ffn
        self.attn_norm = attn_norm
        self.ffn_norm = ffn_norm


def _rope_tables(max_seq_len: int, head_dim: int, base: float,
                 dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(max_seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=1).astype(dtype)
    sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=1).astype(dtype)
    return cos, sin


def _rotate_half(x: Tensor) -> Tensor:
    half = x.shape[1] // 2
    return concat_cols([-col_slice(x, half, 2 * half), col_slice(x, 0, half)])


def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return x * cos + _rotate_half(x) * sin


def attention_forward(block: AttentionBlock, x: Tensor, cos: np.ndarray,
                      sin: np.ndarray, use_adapters: bool = True) -> Tensor:
    """Causal multi-head attention with rotary positions over [T, d]."""
    t, d = x.shape
    n_heads = block.n_heads
    head_dim = d // n_heads
    q = block.project("q", x, use_adapters)
    k = block.project("k", x, use_adapters)
    v = block.project("v", x, use_adapters)

    causal = np.triu(np.full((t, t), -np.inf, dtype=x.data.dtype), k=1)
    scale = 1.0 / np.sqrt(head_dim)
    heads = []
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = _apply_rope(col_slice(q, lo, hi), cos, sin)
        kh = _apply_rope(col_slice(k, lo, hi), cos, sin)
        vh = col_slice(v, lo, hi)
        att = matmul(qh, transpose(kh)) * scale
        att = att + causal
        heads.append(matmul(softmax(att), vh))
    merged = concat_cols(heads)
    return block.project("o", merged, use_adapters)


def ffn_forward(block: FfnBlock, x: Tensor, use_adapters: bool = True,
                trace=None, layer_idx: int = 0) -> Tensor:
    """Gated FFN: down(up(x) * silu(gate(x))), each linear token-routed."""

    def run(slot_name: str, inp: Tensor) -> Tensor:
        layer = block.slot(slot_name)
        if not use_adapters:
            return linear(inp, layer.weight)
        on_route = None
        if trace is not None:
            on_route = _trace_hook(trace, layer_idx, slot_name)
        return molora_forward(layer, inp, on_route=on_route)

    gated = run("up", x) * silu(run("gate", x))
    return run("down", gated)


def _trace_hook(trace, layer_idx: int, slot: str):
    def hook(idx: np.ndarray, weights: np.ndarray) -> None:
        trace.record(layer_idx, slot, idx, weights)
    return hook


class DecoderModel:
    """Frozen decoder plus adapter attachments; see module docstring."""

    def __init__(self, config: ModelConfig, embedding_table: Tensor,
                 layers: list[DecoderLayer], final_norm: Tensor, dtype):
        self.config = config
        self.embedding = embedding_table  # weight-tied output head
        self.layers = layers
        self.final_norm = final_norm
        self.dtype = dtype
        self.rope_cos, self.rope_sin = _rope_tables(
            config.max_seq_len, config.dim // config.n_heads,
            config.rope_base, dtype)

    # -- passes -----------------------------------------------------------

    def forward(self, tokens: list[int], trace=None,
                use_adapters: bool = True) -> Tensor:
        """Logits [T, V] for a token sequence."""
        t = len(tokens)
        if t == 0:
            raise SequenceLengthError("empty sequence")
        if t > self.config.max_seq_len:
            raise SequenceLengthError(
                f"sequence length {t} exceeds max_seq_len "
                f"{self.config.max_seq_len}")
        cos, sin = self.rope_cos[:t], self.rope_sin[:t]
        x = embedding(self.embedding, tokens)
        eps = self.config.rmsnorm_eps
        for li, layer in enumerate(self.layers):
            h = rmsnorm(x, layer.attn_norm, eps)
            x = x + attention_forward(layer.attn, h, cos, sin, use_adapters)
            h = rmsnorm(x, layer.ffn_norm, eps)
            x = x + ffn_forward(layer.ffn, h, use_adapters, trace, li)
        x = rmsnorm(x, self.final_norm, eps)
        return linear(x, self.embedding)

    def generate(self, prompt: list[int], max_new: int,
                 eos_id: int | None = None) -> list[int]:
        """Greedy decoding; stops at eos_id or after max_new tokens."""
        if not prompt:
            raise SequenceLengthError("prompt must be non-empty")
        out = list(prompt)
        for _ in range(max_new):
            logits = self.forward(out)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
        return out

    # -- parameter enumeration ----------------------------------------------

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in a stable order (checkpoint order)."""
        out: list[tuple[str, Tensor]] = []
        for li, layer in enumerate(self.layers):
            for name in ("q", "k", "v", "o"):
                ad = layer.attn.adapters[name]
                out.append((f"layers.{li}.attn.{name}.A", ad.A))
                out.append((f"layers.{li}.attn.{name}.B", ad.B))
            for slot in FFN_SLOTS:
                mix = layer.ffn.slot(slot)
                for ei, e in enumerate(mix.experts):
                    out.append((f"layers.{li}.ffn.{slot}.experts.{ei}.A", e.A))
                    out.append((f"layers.{li}.ffn.{slot}.experts.{ei}.B", e.B))
                out.append((f"layers.{li}.ffn.{slot}.router", mix.router))
            if self.config.train_norms:
                out.append((f"layers.{li}.attn_norm", layer.attn_norm))
                out.append((f"layers.{li}.ffn_norm", layer.ffn_norm))
        if self.config.train_norms:
            out.append(("final_norm", self.final_norm))
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_trainable()]

    def frozen_parameters(self) -> list[Tensor]:
        out = [self.embedding]
        for layer in self.layers:
            out.extend(layer.attn.weights.values())
            for slot in FFN_SLOTS:
                out.append(layer.ffn.slot(slot).weight)
            if not self.config.train_norms:
                out.extend([layer.attn_norm, layer.ffn_norm])
        if not self.config.train_norms:
            out.append(self.final_norm)
        return out

    def trainable_param_count(self) -> int:
        return sum(t.size for t in self.trainable_parameters())

    def total_param_count(self) -> int:
        frozen = sum(t.size for t in self.frozen_parameters())
        return frozen + self.trainable_param_count()


def merge_attention(model: DecoderModel) -> tuple[dict[str, np.ndarray], list[str]]:
    """Dense merged weights for every attention projection, plus the list of
    FFN slots that cannot merge (routing is input-dependent)."""
    from .adapters import lora_merge

    merged: dict[str, np.ndarray] = {}
    skipped: list[str] = []
    for li, layer in enumerate(model.layers):
        for name in ("q", "k", "v", "o"):
            dense = lora_merge(layer.attn.adapters[name],
                               layer.attn.weights[name])
            merged[f"layers.{li}.attn.{name}"] = dense.data
        for slot in FFN_SLOTS:
            skipped.append(f"layers.{li}.ffn.{slot}")
    return merged, skipped


def apply_attention_merge(model: DecoderModel) -> list[str]:
    """Fold attention adapters into their base weights in place.

    Adapter B matrices are zeroed afterwards so the adapter path is an
    exact no-op; forward outputs agree with the pre-merge model up to
    float32 rounding. Returns the skipped FFN slot names.
    """
    merged, skipped = merge_attention(model)
    for li, layer in enumerate(model.layers):
        for name in ("q", "k", "v", "o"):
            layer.attn.weights[name].data[...] = merged[f"layers.{li}.attn.{name}"]
            layer.attn.adapters[name].B.data[:] = 0.0
    return skipped


def build_model(config: ModelConfig, seed: int = 0,
                dtype=DEFAULT_DTYPE) -> DecoderModel:
    """Construct a model with a seeded frozen base and fresh adapters.

    The frozen base is a transparent substrate rather than dense noise:
    queries, keys and the FFN gate carry only tiny symmetry-breaking noise
    (so base attention is near-uniform and the base FFN near-silent, but
    gradients to the adapters are nonzero), while the value/output paths and
    the up/down projections are identity carriers. Adapters therefore build
    behavior inside their rank budget instead of fighting a random base they
    cannot cancel. The embedding (weight-tied with the head) uses orthonormal
    rows when the vocabulary fits the width, giving a well-separated frozen
    readout.

    The same (config, seed, dtype) always yields bit-identical weights; the
    base draw order is part of the checkpoint compatibility contract.
    """
    gen = np.random.default_rng(seed)
    d, dff = config.dim, config.ffn_dim
    noise_std = 0.02

    def noise_matrix(rows: int, cols: int) -> Tensor:
        return Tensor(gen.normal(0.0, noise_std, size=(rows, cols)).astype(dtype))

    if config.vocab_size <= d:
        square = gen.standard_normal((d, d))
        ortho, _ = np.linalg.qr(square)
        emb = Tensor(np.ascontiguousarray(ortho[:config.vocab_size]).astype(dtype))
    else:
        emb = Tensor(gen.normal(0.0, 1.0 / np.sqrt(d),
                                size=(config.vocab_size, d)).astype(dtype))

    eye = np.eye(d, dtype=dtype)
    up_carrier = np.zeros((dff, d), dtype=dtype)
    up_carrier[:d] = eye
    down_carrier = np.zeros((d, dff), dtype=dtype)
    down_carrier[:, :d] = eye

    layers = []
    for _ in range(config.n_layers):
        weights = {
            "q": noise_matrix(d, d),
            "k": noise_matrix(d, d),
            "v": Tensor(eye.copy()),
            "o": Tensor(eye.copy()),
        }
        adapters = {
            name: lora_init(d, d, config.rank, config.alpha,
                            config.a_init_std, int(gen.integers(2 ** 63 - 1)),
                            dtype=dtype)
            for name in ("q", "k", "v", "o")
        }
        attn = AttentionBlock(weights, adapters, config.n_heads)

        def mixture(weight: np.ndarray) -> MoLoraLayer:
            return build_molora(
                Tensor(weight), config.n_experts, config.rank,
                config.alpha, config.top_k, config.a_init_std,
                config.router_init_std, int(gen.integers(2 ** 63 - 1)),
                config.renormalize_router, dtype=dtype)

        ffn = FfnBlock(gate=mixture(noise_matrix(dff, d).data),
                       up=mixture(up_carrier.copy()),
                       down=mixture(down_carrier.copy()))
        attn_norm = Tensor(np.ones(d, dtype=dtype),
                           requires_grad=config.train_norms)
        ffn_norm = Tensor(np.ones(d, dtype=dtype),
                          requires_grad=config.train_norms)
        layers.append(DecoderLayer(attn, ffn, attn_norm, ffn_norm))

    final_norm = Tensor(np.ones(d, dtype=dtype),
                        requires_grad=config.train_norms)
    return DecoderModel(config, emb, layers, final_norm, dtype)
