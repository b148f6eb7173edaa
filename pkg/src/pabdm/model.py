"""A tiny decoder-only transformer with a pluggable visibility mask and an
append-only per-layer KV cache.

Two entry points share the layer math: ``forward`` runs incrementally against
a cache (the decode path; the first ``materialize_prefix_len`` new positions
are appended to the cache, the rest are throwaway candidates), and
``forward_training`` runs a batched full grid with an explicit mask and
explicit position ids (the training path; no cache).

Position embeddings are absolute and indexed by committed-timeline slot, so a
token occupies the same position id whether it is a mask candidate this round
or a materialized prefix token next round. That, plus strictly causal
visibility of materialized prefixes, is what makes cached and uncached
forwards agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .layout import NUM_SPECIALS
from .masks import MaskSpec

CHECKPOINT_MAGIC = "pabdm-v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_positions: int = 512

    def __post_init__(self) -> None:
        if not NUM_SPECIALS < self.vocab_size <= 64:
            raise ValueError(
                f"vocab_size must be in ({NUM_SPECIALS}, 64], got {self.vocab_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if min(self.num_layers, self.num_heads, self.max_positions) < 1:
            raise ValueError("num_layers, num_heads, max_positions must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class _Block(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        c = config.embed_dim
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.ln_attn = nn.LayerNorm(c)
        self.qkv = nn.Linear(c, 3 * c)
        self.proj = nn.Linear(c, c)
        self.ln_mlp = nn.LayerNorm(c)
        self.fc_in = nn.Linear(c, 4 * c)
        self.fc_out = nn.Linear(4 * c, c)

    def forward(
        self,
        x: torch.Tensor,  # (B, n, C)
        past: tuple[torch.Tensor, torch.Tensor] | None,  # (B, H, T, hd) each
        bias: torch.Tensor,  # broadcastable to (B, 1, n, T + n)
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, n, c = x.shape
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).split(c, dim=2)
        q = q.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k_all, v_all = k, v
        if past is not None:
            k_all = torch.cat([past[0], k], dim=2)
            v_all = torch.cat([past[1], v], dim=2)
        att = q @ k_all.transpose(-2, -1) / math.sqrt(self.head_dim)
        att = torch.softmax(att + bias, dim=-1)
        y = (att @ v_all).transpose(1, 2).reshape(b, n, c)
        x = x + self.proj(y)
        x = x + self.fc_out(torch.nn.functional.gelu(self.fc_in(self.ln_mlp(x))))
        return x, k, v


class TinyTransformer(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.embed_dim)
        self.pos_emb = nn.Embedding(config.max_positions, config.embed_dim)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.num_layers))
        self.ln_final = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.vocab_size, bias=False)

    def trunk(
        self,
        ids: torch.Tensor,  # (B, n)
        position_ids: torch.Tensor,  # (B, n)
        bias: torch.Tensor,  # broadcastable to (B, 1, n, T + n)
        past: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
    ) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
        x = self.tok_emb(ids) + self.pos_emb(position_ids)
        fresh: list[tuple[torch.Tensor, torch.Tensor]] = []
        for i, block in enumerate(self.blocks):
            x, k, v = block(x, past[i] if past is not None else None, bias)
            fresh.append((k, v))
        return self.head(self.ln_final(x)), fresh


def init_model(config: ModelConfig, seed: int = 0) -> TinyTransformer:
    """Build a model with every parameter drawn from one seeded generator.

    Equal (config, seed) gives bitwise-equal parameters; construction-time
    default init is overwritten wholesale.
    """
    model = TinyTransformer(config)
    gen = torch.Generator().manual_seed(seed)
    scale = 0.02
    residual_scale = scale / math.sqrt(2 * config.num_layers)

    def normal(t: torch.Tensor, std: float) -> None:
        with torch.no_grad():
            t.normal_(0.0, std, generator=gen)

    normal(model.tok_emb.weight, scale)
    normal(model.pos_emb.weight, scale)
    for block in model.blocks:
        for ln in (block.ln_attn, block.ln_mlp):
            with torch.no_grad():
                ln.weight.fill_(1.0)
                ln.bias.zero_()
        normal(block.qkv.weight, scale)
        normal(block.fc_in.weight, scale)
        normal(block.proj.weight, residual_scale)
        normal(block.fc_out.weight, residual_scale)
        with torch.no_grad():
            block.qkv.bias.zero_()
            block.proj.bias.zero_()
            block.fc_in.bias.zero_()
            block.fc_out.bias.zero_()
    with torch.no_grad():
        model.ln_final.weight.fill_(1.0)
        model.ln_final.bias.zero_()
    normal(model.head.weight, scale)
    return model


@dataclass(frozen=True)
class CacheState:
    """Per-layer key/value history. Append-only: ``extended`` returns a new
    state and existing entries are never rewritten. One decode session owns
    one chain of these."""

    keys: tuple[torch.Tensor, ...]  # per layer, (num_heads, length, head_dim)
    values: tuple[torch.Tensor, ...]
    length: int
    prompt_len: int

    @classmethod
    def empty(cls, model: TinyTransformer) -> "CacheState":
        cfg = model.config
        zero = torch.zeros(cfg.num_heads, 0, cfg.head_dim)
        layers = tuple(zero for _ in range(cfg.num_layers))
        return cls(keys=layers, values=layers, length=0, prompt_len=0)

    def extended(
        self,
        new_keys: list[torch.Tensor],
        new_values: list[torch.Tensor],
        count: int,
    ) -> "CacheState":
        if count == 0:
            return self
        keys = tuple(
            torch.cat([k, nk[:, :count]], dim=1) for k, nk in zip(self.keys, new_keys)
        )
        values = tuple(
            torch.cat([v, nv[:, :count]], dim=1)
            for v, nv in zip(self.values, new_values)
        )
        return replace(self, keys=keys, values=values, length=self.length + count)


@dataclass(frozen=True)
class ForwardOutput:
    logits: torch.Tensor  # (len(new_tokens), vocab_size)
    new_cache: CacheState


def attention_bias(grid: np.ndarray) -> torch.Tensor:
    """Boolean visibility grid to additive 0/-inf float bias."""
    allowed = torch.from_numpy(np.ascontiguousarray(grid))
    return torch.where(allowed, 0.0, float("-inf"))


def _check_tokens(model: TinyTransformer, ids: torch.Tensor) -> None:
    if ids.numel() and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValueError(
            f"token ids outside [0, {model.config.vocab_size}): "
            f"{ids.min().item()}..{ids.max().item()}"
        )


def forward(
    model: TinyTransformer,
    cache: CacheState,
    new_tokens,
    mask: MaskSpec,
    materialize_prefix_len: int = 0,
) -> ForwardOutput:
    """One incremental pass: score ``new_tokens`` on top of the cache.

    Cached keys are always visible to every new position; visibility among
    the new positions follows ``mask``. The first ``materialize_prefix_len``
    new positions are appended to the returned cache, the rest are discarded
    (fresh candidates next round reuse their position ids).
    """
    ids = torch.as_tensor(new_tokens, dtype=torch.long).reshape(-1)
    n = ids.shape[0]
    if n == 0:
        raise ValueError("new_tokens must be non-empty")
    if mask.size != n:
        raise ValueError(f"mask size {mask.size} != {n} new tokens")
    if not 0 <= materialize_prefix_len <= n:
        raise ValueError(
            f"materialize_prefix_len {materialize_prefix_len} outside [0, {n}]"
        )
    if len(cache.keys) != model.config.num_layers:
        raise ValueError(
            f"cache has {len(cache.keys)} layers, model has {model.config.num_layers}"
        )
    if cache.length + n > model.config.max_positions:
        raise ValueError(
            f"{cache.length} cached + {n} new exceeds "
            f"max_positions {model.config.max_positions}"
        )
    _check_tokens(model, ids)

    with torch.no_grad():
        positions = torch.arange(cache.length, cache.length + n)
        new_bias = attention_bias(mask.grid)
        bias = torch.cat([torch.zeros(n, cache.length), new_bias], dim=1)
        past = [
            (k.unsqueeze(0), v.unsqueeze(0))
            for k, v in zip(cache.keys, cache.values)
        ]
        logits, fresh = model.trunk(
            ids.unsqueeze(0), positions.unsqueeze(0), bias.view(1, 1, n, -1), past
        )
        new_cache = cache.extended(
            [k.squeeze(0) for k, _ in fresh],
            [v.squeeze(0) for _, v in fresh],
            materialize_prefix_len,
        )
        return ForwardOutput(logits=logits.squeeze(0), new_cache=new_cache)


def encode_prompt(model: TinyTransformer, prompt_tokens) -> CacheState:
    """Causal pass over the prompt, materializing every position."""
    from .masks import full_causal_mask

    ids = list(prompt_tokens)
    empty = CacheState.empty(model)
    if not ids:
        return empty
    out = forward(model, empty, ids, full_causal_mask(len(ids)), len(ids))
    return replace(out.new_cache, prompt_len=len(ids))


def forward_training(
    model: TinyTransformer,
    ids: torch.Tensor,  # (B, n)
    position_ids: torch.Tensor,  # (B, n)
    bias: torch.Tensor,  # (B, n, n) or (n, n)
) -> torch.Tensor:
    """Batched full-grid pass used by the training objectives; no cache."""
    if ids.dim() != 2:
        raise ValueError(f"ids must be (batch, length), got {tuple(ids.shape)}")
    _check_tokens(model, ids)
    if ids.shape[1] > model.config.max_positions:
        raise ValueError(
            f"grid length {ids.shape[1]} exceeds max_positions "
            f"{model.config.max_positions}"
        )
    if bias.dim() == 2:
        bias = bias.unsqueeze(0)
    logits, _ = model.trunk(ids, position_ids, bias.unsqueeze(1))
    return logits


def token_confidence(logits_row, token_id: int) -> float:
    """Softmax probability of ``token_id`` under one row of logits."""
    row = torch.as_tensor(logits_row, dtype=torch.float32).reshape(-1)
    if not torch.isfinite(row).all():
        raise ValueError("logits must be finite")
    if not 0 <= token_id < row.shape[0]:
        raise ValueError(f"token id {token_id} outside [0, {row.shape[0]})")
    return float(torch.softmax(row, dim=0)[token_id])


def save_checkpoint(model: TinyTransformer, path) -> None:
    """Plain-text config header line, then raw little-endian float32
    parameters in module definition order."""
    cfg = model.config
    header = (
        f"{CHECKPOINT_MAGIC} vocab_size={cfg.vocab_size} embed_dim={cfg.embed_dim} "
        f"num_layers={cfg.num_layers} num_heads={cfg.num_heads} "
        f"max_positions={cfg.max_positions}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for param in model.parameters():
            fh.write(
                param.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
            )


def load_checkpoint(path) -> TinyTransformer:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        blob = fh.read()
    parts = header.split()
    if not parts or parts[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: {path}")
    fields = dict(piece.split("=", 1) for piece in parts[1:])
    try:
        config = ModelConfig(
            vocab_size=int(fields["vocab_size"]),
            embed_dim=int(fields["embed_dim"]),
            num_layers=int(fields["num_layers"]),
            num_heads=int(fields["num_heads"]),
            max_positions=int(fields["max_positions"]),
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"bad checkpoint header {header!r}: {exc}") from exc
    model = TinyTransformer(config)
    flat = np.frombuffer(blob, dtype="<f4")
    expected = sum(p.numel() for p in model.parameters())
    if flat.shape[0] != expected:
        raise ValueError(
            f"checkpoint holds {flat.shape[0]} floats, model needs {expected}"
        )
    offset = 0
    with torch.no_grad():
        for param in model.parameters():
            chunk = flat[offset : offset + param.numel()]
            param.copy_(torch.from_numpy(chunk.copy()).view(param.shape))
            offset += param.numel()
    return model
