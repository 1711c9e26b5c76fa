"""Differentiable forward surface and gradient checking.

The tensor engine underneath is torch (float32 by default); this module is
the contract boundary: validated embedding-sequence forward, cross-entropy
loss with exact input-embedding gradients, and a central finite-difference
checker that runs the same computation in float64 for headroom.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, NumericError
from .tinylm import ModelConfig, TinyLM, init_model

FD_STEP = 1e-3
REL_FLOOR = 1e-6


@dataclass(frozen=True)
class GradRequest:
    """Which input positions need gradients and which carry a CE target."""

    positions: frozenset
    guided_mask: tuple

    @classmethod
    def full(cls, n: int) -> "GradRequest":
        return cls(positions=frozenset(range(n)), guided_mask=(True,) * n)

    def validate(self, n: int) -> None:
        if any(p < 0 or p >= n for p in self.positions):
            raise InputError("requested gradient position outside [0, N)")
        if len(self.guided_mask) != n:
            raise InputError("guided_mask length must equal sequence length")

    def guided_positions(self) -> list[int]:
        return [i for i, g in enumerate(self.guided_mask) if g]


def forward(model: TinyLM, E: torch.Tensor) -> torch.Tensor:
    """Causal forward from an embedding sequence: (N, d_model) -> (N, V).

    Logits at position i depend only on rows 0..i; deterministic for fixed
    inputs in single-threaded mode.
    """
    if E.dim() != 2:
        raise ConfigurationError(f"expected (N, d_model) embeddings, got shape {tuple(E.shape)}")
    if E.shape[1] != model.config.d_model:
        raise ConfigurationError(
            f"embedding width {E.shape[1]} does not match d_model={model.config.d_model}"
        )
    if not torch.isfinite(E).all():
        raise NumericError("non-finite values in input embeddings")
    logits = model.logits_from_embeddings(E)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    return logits


def loss_and_input_grad(
    model: TinyLM,
    E: torch.Tensor,
    targets,
    req: GradRequest,
) -> tuple[float, torch.Tensor]:
    """Summed cross-entropy (nats) over guided positions and d(loss)/dE.

    The returned dE is the exact gradient for every row; rows outside
    req.positions carry no contract (callers must not rely on them).
    """
    n = E.shape[0]
    req.validate(n)
    guided = req.guided_positions()
    if not guided:
        raise InputError("loss evaluation needs at least one guided position")
    targets_t = torch.as_tensor(targets, dtype=torch.long)
    if targets_t.numel() != len(guided):
        raise InputError(
            f"{targets_t.numel()} targets supplied for {len(guided)} guided positions"
        )
    if targets_t.numel() and (
        targets_t.min() < 0 or targets_t.max() >= model.config.vocab_size
    ):
        raise InputError("target id outside vocabulary")
    leaf = E.detach().clone().requires_grad_(True)
    logits = forward(model, leaf)
    loss = F.cross_entropy(logits[guided], targets_t, reduction="sum")
    loss.backward()
    return float(loss), leaf.grad.detach()


def finite_difference_input_grad(
    model: TinyLM,
    E: torch.Tensor,
    targets,
    req: GradRequest,
    step: float = FD_STEP,
) -> torch.Tensor:
    """Central-difference gradient of the same loss; the independent oracle."""
    guided = req.guided_positions()
    targets_t = torch.as_tensor(targets, dtype=torch.long)

    def loss_at(e: torch.Tensor) -> float:
        with torch.no_grad():
            logits = model.logits_from_embeddings(e)
            return float(F.cross_entropy(logits[guided], targets_t, reduction="sum"))

    grad = torch.zeros_like(E)
    for i in range(E.shape[0]):
        if i not in req.positions:
            continue
        for j in range(E.shape[1]):
            probe = E.clone()
            probe[i, j] += step
            hi = loss_at(probe)
            probe[i, j] -= 2 * step
            lo = loss_at(probe)
            grad[i, j] = (hi - lo) / (2 * step)
    return grad


@dataclass(frozen=True)
class GradCheckEntry:
    seed: int
    max_rel_error: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    tolerance: float
    entries: tuple

    @property
    def all_passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max(e.max_rel_error for e in self.entries)


def check_gradients(
    config: ModelConfig,
    seq_len: int,
    seeds,
    tolerance: float = 1e-4,
    grad_fn=None,
) -> GradCheckReport:
    """Autograd-vs-finite-difference agreement on random tiny instances.

    Runs in float64. grad_fn defaults to :func:`loss_and_input_grad` and is
    injectable so a corrupted backward can be shown to trip the checker.
    """
    if seq_len * config.d_model > 256:
        raise ConfigurationError("gradient check limited to N * d_model <= 256")
    if grad_fn is None:
        grad_fn = loss_and_input_grad
    entries = []
    for seed in seeds:
        model = init_model(config, seed).double()
        gen = torch.Generator().manual_seed(seed + 1)
        E = torch.randn(seq_len, config.d_model, generator=gen, dtype=torch.float64)
        targets = torch.randint(0, config.vocab_size, (seq_len,), generator=gen)
        req = GradRequest.full(seq_len)
        _, g_ad = grad_fn(model, E, targets, req)
        g_fd = finite_difference_input_grad(model, E, targets, req)
        denom = torch.maximum(
            torch.maximum(g_ad.abs(), g_fd.abs()),
            torch.full_like(g_ad, REL_FLOOR),
        )
        err = float(((g_ad - g_fd).abs() / denom).max())
        entries.append(GradCheckEntry(seed=seed, max_rel_error=err, passed=err <= tolerance))
    return GradCheckReport(tolerance=tolerance, entries=tuple(entries))
