"""Tiny frozen decoder-only transformer.

The model runs from raw embedding sequences (not just token ids) because the
whole point of the lab is feeding trained non-vocabulary vectors through a
frozen network. Pre-norm blocks, causal attention, GELU MLP; positions enter
either through rotary phases inside attention (default) or a learned absolute
table added to the input.

Every logits computation goes through ``TinyLM.logits_from_embeddings``, which
increments ``forward_count`` — one-pass/AR forward-count contracts are asserted
against that counter.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, CorruptionError, FormatVersionError, InputError, NumericError
from .runtime import sha256_bytes

ROTARY = "rotary"
LEARNED = "learned"

CHECKPOINT_MAGIC = b"PTLM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    d_ff: int = 512
    vocab_size: int = 512
    max_positions: int = 512
    positional_scheme: str = ROTARY
    tied_head: bool = False

    def validate(self) -> None:
        if self.layers < 1 or self.d_model < 1 or self.heads < 1 or self.d_ff < 1:
            raise ConfigurationError("model dimensions must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by heads={self.heads}"
            )
        if self.positional_scheme == ROTARY and (self.d_model // self.heads) % 2 != 0:
            raise ConfigurationError("rotary needs an even per-head width")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")
        if self.max_positions < 1:
            raise ConfigurationError("max_positions must be >= 1")
        if self.positional_scheme not in (ROTARY, LEARNED):
            raise ConfigurationError(f"unknown positional scheme {self.positional_scheme!r}")


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.heads = config.heads
        self.head_dim = d // config.heads
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)

    def forward(self, x, rope=None, cache=None):
        # x: (B, L, d); rope: (cos, sin) for the absolute positions of x's rows
        B, L, _ = x.shape
        q = self.q_proj(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        if rope is not None:
            cos, sin = rope
            q = _rotate(q, cos, sin)
            k = _rotate(k, cos, sin)
        if cache is not None:
            if cache.k is not None:
                k = torch.cat([cache.k, k], dim=2)
                v = torch.cat([cache.v, v], dim=2)
            cache.k, cache.v = k, v
        S = k.shape[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if L > 1 or S == L:
            # row i may attend keys 0..(S-L)+i; strictly later keys get -inf
            blocked = torch.ones(L, S, dtype=torch.bool, device=x.device).triu(S - L + 1)
            scores = scores.masked_fill(blocked, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).contiguous().view(B, L, -1)
        return self.o_proj(out)


def _rotate(x, cos, sin):
    # x: (B, H, L, hd); cos/sin: (L, hd/2), broadcast over batch and heads
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(d)
        self.up_proj = nn.Linear(d, config.d_ff, bias=False)
        self.down_proj = nn.Linear(config.d_ff, d, bias=False)

    def forward(self, x, rope=None, cache=None):
        x = x + self.attn(self.ln1(x), rope=rope, cache=cache)
        x = x + self.down_proj(F.gelu(self.up_proj(self.ln2(x))))
        return x


class LayerCache:
    """Per-layer rolling key/value store for incremental decoding."""

    __slots__ = ("k", "v")

    def __init__(self):
        self.k = None
        self.v = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]


class TinyLM(nn.Module):
    """Weights container plus the embedding-sequence forward pass."""

    def __init__(self, config: ModelConfig):
        config.validate()
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_embedding = nn.Embedding(config.vocab_size, d)
        if config.positional_scheme == LEARNED:
            self.pos_embedding = nn.Embedding(config.max_positions, d)
        else:
            self.pos_embedding = None
            cos, sin = _rope_tables(config.max_positions, d // config.heads)
            self.register_buffer("rope_cos", cos, persistent=False)
            self.register_buffer("rope_sin", sin, persistent=False)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size, bias=False)
        if config.tied_head:
            self.head.weight = self.tok_embedding.weight
        self.forward_count = 0

    def reset_forward_count(self) -> None:
        self.forward_count = 0

    def logits_from_embeddings(self, E: torch.Tensor, start_pos: int = 0, caches=None):
        """(L, d) -> (L, V) or (B, L, d) -> (B, L, V); one forward invocation."""
        self.forward_count += 1
        squeeze = E.dim() == 2
        if squeeze:
            E = E.unsqueeze(0)
        B, L, d = E.shape
        if start_pos + L > self.config.max_positions:
            raise InputError(
                f"sequence of length {start_pos + L} exceeds max_positions="
                f"{self.config.max_positions}"
            )
        x = E
        rope = None
        if self.pos_embedding is not None:
            pos = torch.arange(start_pos, start_pos + L, device=E.device)
            x = x + self.pos_embedding(pos).to(E.dtype)
        else:
            cos = self.rope_cos[start_pos : start_pos + L].to(E.dtype)
            sin = self.rope_sin[start_pos : start_pos + L].to(E.dtype)
            rope = (cos, sin)
        for i, block in enumerate(self.blocks):
            x = block(x, rope=rope, cache=None if caches is None else caches[i])
        logits = self.head(self.final_norm(x))
        return logits.squeeze(0) if squeeze else logits

    def new_caches(self) -> list[LayerCache]:
        return [LayerCache() for _ in self.blocks]

    def checksum(self) -> str:
        return sha256_bytes(serialize_weights(self))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _rope_tables(max_positions: int, head_dim: int):
    half = head_dim // 2
    inv_freq = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    angles = np.arange(max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = torch.from_numpy(np.cos(angles).astype(np.float32))
    sin = torch.from_numpy(np.sin(angles).astype(np.float32))
    return cos, sin


# ---------------------------------------------------------------------------
# init / freeze


def init_model(config: ModelConfig, seed: int) -> TinyLM:
    """Deterministic initialization: N(0, 0.02) matrices, residual projections
    scaled down by 1/sqrt(2*layers), unit norms."""
    model = TinyLM(config)
    gen = torch.Generator().manual_seed(seed)
    resid_scale = 1.0 / math.sqrt(2 * config.layers)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                p.normal_(0.0, 0.02, generator=gen)
                if name.endswith(("o_proj.weight", "down_proj.weight")):
                    p.mul_(resid_scale)
            elif name.endswith(".bias"):
                p.zero_()
            else:  # norm weights
                p.fill_(1.0)
    return model


def freeze(model: TinyLM) -> TinyLM:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def embed(model: TinyLM, ids) -> torch.Tensor:
    """Token-id rows of the embedding table, shape (len(ids), d_model)."""
    ids_t = torch.as_tensor(ids, dtype=torch.long)
    if ids_t.numel() == 0:
        return torch.empty(0, model.config.d_model)
    if ids_t.min() < 0 or ids_t.max() >= model.config.vocab_size:
        raise InputError("token id outside vocabulary")
    return model.tok_embedding.weight[ids_t].detach().clone()


# ---------------------------------------------------------------------------
# sampling / generation / one-pass decoding


@dataclass(frozen=True)
class SamplingSpec:
    mode: str = "argmax"  # "argmax" | "multinomial"
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("argmax", "multinomial"):
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "multinomial" and not self.temperature > 0:
            raise ConfigurationError("multinomial sampling needs temperature > 0")


def softmax_probabilities(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    return torch.softmax(logits / temperature, dim=-1)


def ar_generate(
    model: TinyLM,
    prefix_E: torch.Tensor,
    n: int,
    sampling: SamplingSpec = SamplingSpec(),
    use_cache: bool = True,
) -> list[int]:
    """Autoregressive generation seeded with an embedding prefix.

    The cached and uncached paths must emit identical token ids in argmax
    mode; the uncached path re-runs a full forward per step and is the
    forward-count reference (n tokens -> n invocations).
    """
    sampling.validate()
    P = prefix_E.shape[0]
    if P < 1:
        raise InputError("ar_generate needs a non-empty prefix")
    if P + n > model.config.max_positions:
        raise InputError(
            f"prefix {P} + n {n} exceeds max_positions={model.config.max_positions}"
        )
    gen = torch.Generator().manual_seed(sampling.seed)
    out: list[int] = []
    with torch.no_grad():
        if use_cache:
            caches = model.new_caches()
            logits = model.logits_from_embeddings(prefix_E, start_pos=0, caches=caches)
            for _ in range(n):
                nxt = _pick(logits[-1], sampling, gen)
                out.append(nxt)
                if len(out) == n:
                    break
                step_E = model.tok_embedding.weight[nxt].view(1, -1).detach()
                logits = model.logits_from_embeddings(
                    step_E, start_pos=caches[0].length, caches=caches
                )
        else:
            E = prefix_E
            for _ in range(n):
                logits = model.logits_from_embeddings(E)
                nxt = _pick(logits[-1], sampling, gen)
                out.append(nxt)
                if len(out) == n:
                    break
                row = model.tok_embedding.weight[nxt].view(1, -1).detach()
                E = torch.cat([E, row], dim=0)
    return out


def _pick(logits_row: torch.Tensor, sampling: SamplingSpec, gen: torch.Generator) -> int:
    if sampling.mode == "argmax":
        return int(logits_row.argmax())
    probs = softmax_probabilities(logits_row, sampling.temperature)
    return int(torch.multinomial(probs, 1, generator=gen))


def one_pass_decode(model: TinyLM, E: torch.Tensor, guided_positions) -> list[int]:
    """Argmax token per guided position from exactly one parallel forward."""
    with torch.no_grad():
        logits = model.logits_from_embeddings(E)
        return [int(logits[p].argmax()) for p in guided_positions]


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainSpec:
    steps: int = 3000
    batch_size: int = 16
    window: int = 64  # tokens predicted per row; input is [BOS] + window-1 ids
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0


def pretrain(model: TinyLM, corpus_ids, spec: PretrainSpec) -> tuple[TinyLM, list[float]]:
    """Causal-LM training on random corpus windows; returns (model, loss history).

    Each window is conditioned on BOS so the model learns a start-of-text
    distribution. steps=0 returns the model untouched with an empty history.
    """
    if spec.steps == 0:
        return model, []
    ids = torch.as_tensor(np.asarray(corpus_ids), dtype=torch.long)
    if ids.numel() < spec.window + 1:
        raise InputError("corpus shorter than one training window")
    if spec.window >= model.config.max_positions:
        raise ConfigurationError("window must fit in max_positions")
    bos = bos_id_for(model)
    model.train()
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    opt = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": spec.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=spec.lr,
        betas=spec.betas,
    )
    gen = torch.Generator().manual_seed(spec.seed)
    history: list[float] = []
    n_starts = ids.numel() - spec.window
    for step in range(spec.steps):
        starts = torch.randint(0, n_starts, (spec.batch_size,), generator=gen)
        batch = torch.stack([ids[s : s + spec.window] for s in starts.tolist()])
        inputs = torch.cat(
            [torch.full((spec.batch_size, 1), bos, dtype=torch.long), batch[:, :-1]], dim=1
        )
        E = model.tok_embedding(inputs)
        logits = model.logits_from_embeddings(E)
        loss = F.cross_entropy(logits.reshape(-1, model.config.vocab_size), batch.reshape(-1))
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(step, spec)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if spec.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), spec.grad_clip)
        opt.step()
        history.append(float(loss))
    model.eval()
    return model, history


def bos_id_for(model: TinyLM) -> int:
    from .tokenizer import BOS_ID

    if BOS_ID >= model.config.vocab_size:
        raise ConfigurationError("vocabulary too small to hold the BOS special")
    return BOS_ID


def _cosine_lr(step: int, spec: PretrainSpec) -> float:
    if step < spec.warmup_steps:
        return spec.lr * (step + 1) / spec.warmup_steps
    span = max(1, spec.steps - spec.warmup_steps)
    frac = (step - spec.warmup_steps) / span
    floor = spec.lr * spec.min_lr_ratio
    return floor + 0.5 * (spec.lr - floor) * (1 + math.cos(math.pi * frac))


def heldout_ce(model: TinyLM, ids, window: int = 64, max_windows: int = 64) -> float:
    """Mean nats/token on contiguous windows of a held-out slice, BOS-conditioned
    like the training rows."""
    ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
    bos = bos_id_for(model)
    total, count = 0.0, 0
    with torch.no_grad():
        n = min(max_windows, ids.numel() // window)
        if n == 0:
            raise InputError("held-out slice shorter than one window")
        for w in range(n):
            chunk = ids[w * window : (w + 1) * window]
            inputs = torch.cat([torch.tensor([bos]), chunk[:-1]])
            logits = model.logits_from_embeddings(model.tok_embedding(inputs))
            total += float(
                F.cross_entropy(logits, chunk, reduction="sum")
            )
            count += chunk.numel()
    return total / count


# ---------------------------------------------------------------------------
# checkpoint io — magic "PTLM", u32 version, config block, named tensors,
# trailing sha256 over all preceding bytes


_SCHEME_TAGS = {ROTARY: 0, LEARNED: 1}
_TAG_SCHEMES = {v: k for k, v in _SCHEME_TAGS.items()}


def serialize_weights(model: TinyLM) -> bytes:
    cfg = model.config
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack(
        "<8I",
        cfg.layers,
        cfg.d_model,
        cfg.heads,
        cfg.d_ff,
        cfg.vocab_size,
        cfg.max_positions,
        _SCHEME_TAGS[cfg.positional_scheme],
        1 if cfg.tied_head else 0,
    )
    items = [(n, p) for n, p in sorted(model.state_dict().items())]
    out += struct.pack("<I", len(items))
    for name, tensor in items:
        nb = name.encode("ascii")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", tensor.dim())
        for extent in tensor.shape:
            out += struct.pack("<I", extent)
        out += (
            tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        )
    import hashlib

    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def save_weights(model: TinyLM, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_weights(model))


def deserialize_weights(blob: bytes) -> TinyLM:
    import hashlib

    if len(blob) < 4 + 4 + 32:
        raise CorruptionError("checkpoint too short")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    if body[:4] != CHECKPOINT_MAGIC:
        raise CorruptionError("bad checkpoint magic")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise FormatVersionError(f"unsupported checkpoint version {version}")
    fields = struct.unpack_from("<8I", body, off)
    off += 32
    config = ModelConfig(
        layers=fields[0],
        d_model=fields[1],
        heads=fields[2],
        d_ff=fields[3],
        vocab_size=fields[4],
        max_positions=fields[5],
        positional_scheme=_TAG_SCHEMES.get(fields[6], "?"),
        tied_head=bool(fields[7]),
    )
    model = TinyLM(config)
    (n_items,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(n_items):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + name_len].decode("ascii")
        off += name_len
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", body, off) if rank else ()
        off += 4 * rank
        numel = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=numel, offset=off).reshape(shape)
        off += 4 * numel
        state[name] = torch.from_numpy(arr.copy())
    if off != len(body):
        raise CorruptionError("trailing bytes after last tensor")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptionError(f"checkpoint tensors do not match config: {exc}") from exc
    return freeze(model)


def load_weights(path) -> TinyLM:
    with open(path, "rb") as f:
        return deserialize_weights(f.read())
