"""Proto-token optimization against a frozen model.

Two trainable vectors tile the input: `lead` (first position, per text) and
`fill` (repeated). AdamW drives their embeddings until the frozen model's
one-pass argmax output reproduces the target ids, with early stopping at
perfect reconstruction. `cram` is the group-size-1 case of the shared-group
optimizer, so shared and non-shared runs with equal seeds follow bit-identical
trajectories.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .datagen import TargetText
from .errors import InputError, NumericError
from .tinylm import TinyLM, SamplingSpec, ar_generate, bos_id_for, embed

LEAD = "lead"
FILL = "fill"

SINGLE = "single"  # lead copies only
HALVES = "halves"  # lead block then fill block
ALTERNATING = "alternating"  # lead,fill,lead,fill,...
LEAD_FILL = "lead_fill"  # one lead then fill copies

KINDS = (SINGLE, HALVES, ALTERNATING, LEAD_FILL)

SOLUTION_FORMAT_VERSION = 1

# Ladder of prefix lengths for the arrangement comparison table.
TABLE_LADDER = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
# Ladder of prefix lengths for capacity sweeps.
CAPACITY_LADDER = (
    4, 5, 8, 11, 16, 22, 32, 45, 64, 90, 128, 181, 256, 362, 512, 724, 1024, 1448,
)


@dataclass(frozen=True)
class Arrangement:
    """How copies of (lead, fill) tile the model input for an n-token target."""

    kind: str = LEAD_FILL
    guide_lead: bool = True  # lead_fill only: does position 0 carry t_1's loss?

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise InputError(f"unknown arrangement kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == LEAD_FILL:
            return f"{self.kind}:{'guided' if self.guide_lead else 'unguided'}"
        return self.kind

    def pattern(self, n: int) -> list[int]:
        """Input tiling as 0 (lead) / 1 (fill) flags."""
        if n < 1:
            raise InputError("target length must be >= 1")
        if self.kind == SINGLE:
            return [0] * n
        if self.kind == HALVES:
            lead_n = (n + 1) // 2  # odd n: lead gets the extra copy
            return [0] * lead_n + [1] * (n - lead_n)
        if self.kind == ALTERNATING:
            return [i % 2 for i in range(n)]
        if self.guide_lead:
            return [0] + [1] * (n - 1)
        return [0] + [1] * n

    def guided_positions(self, n: int) -> list[int]:
        """Input positions carrying loss terms; position k targets t_{k+1}."""
        L = len(self.pattern(n))
        if self.kind == LEAD_FILL and not self.guide_lead:
            return list(range(1, L))
        return list(range(L))


def build_input(
    lead: torch.Tensor, fill: torch.Tensor, arrangement: Arrangement, n: int
) -> tuple[torch.Tensor, list[int]]:
    """Materialize the input rows and the guided positions for an n-token target.

    guided[k] is the input position whose logits target the k-th token.
    """
    pattern = torch.tensor(arrangement.pattern(n), dtype=torch.long)
    E = torch.stack([lead, fill])[pattern]
    return E, arrangement.guided_positions(n)


@dataclass(frozen=True)
class OptSpec:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.9
    weight_decay: float = 0.01
    max_steps: int = 5000
    early_stop_on_perfect: bool = True
    eval_every: int = 10

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise InputError("betas must lie in (0, 1)")
        if self.max_steps < 0:
            raise InputError("max_steps must be >= 0")


@dataclass
class ProtoSolution:
    lead: torch.Tensor
    fill: torch.Tensor
    arrangement: Arrangement
    n: int
    seed: int
    steps_used: int
    loss_history: list[float] = field(repr=False)
    final_accuracy: float
    text_id: str
    context_id: str | None = None
    train_seconds: float = 0.0
    step_seconds: float = 0.0


@dataclass(frozen=True)
class SharedGroupSpec:
    group_texts: tuple
    shared: str  # LEAD or FILL
    restarts: int = 1

    def __post_init__(self) -> None:
        if len(self.group_texts) < 1:
            raise InputError("shared group needs at least one text")
        if self.shared not in (LEAD, FILL):
            raise InputError(f"shared must be '{LEAD}' or '{FILL}'")
        if self.restarts < 1:
            raise InputError("restarts must be >= 1")


def cram(
    model: TinyLM,
    text: TargetText,
    arrangement: Arrangement = Arrangement(),
    opt: OptSpec = OptSpec(),
    seed: int = 0,
) -> ProtoSolution:
    """Optimize (lead, fill) so one forward pass reconstructs `text`."""
    return _optimize_group(model, [text], arrangement, opt, seed, shared=None)[0]


def cram_shared(
    model: TinyLM,
    spec: SharedGroupSpec,
    arrangement: Arrangement = Arrangement(),
    opt: OptSpec = OptSpec(),
    seed: int = 0,
) -> list[ProtoSolution]:
    """Joint optimization with one vector shared across the group.

    Runs spec.restarts independent restarts with seeds seed, seed+1, ...;
    returns every (restart, text) solution so max/avg aggregation stays a
    reporting concern.
    """
    out: list[ProtoSolution] = []
    for r in range(spec.restarts):
        out.extend(
            _optimize_group(
                model, list(spec.group_texts), arrangement, opt, seed + r, shared=spec.shared
            )
        )
    return out


def _optimize_group(
    model: TinyLM,
    texts: list[TargetText],
    arrangement: Arrangement,
    opt: OptSpec,
    seed: int,
    shared: str | None,
) -> list[ProtoSolution]:
    t_start = time.perf_counter()
    d = model.config.d_model
    V = model.config.vocab_size
    G = len(texts)
    for text in texts:
        if max(text.ids) >= V or min(text.ids) < 0:
            raise InputError(f"text {text.text_id} has ids outside the vocabulary")
        L = len(arrangement.pattern(len(text)))
        if L > model.config.max_positions:
            raise InputError(
                f"input length {L} for text {text.text_id} exceeds max_positions"
            )

    gen = torch.Generator().manual_seed(seed)
    # Draw order is fixed (leads in text order, then fills) so that the
    # group-size-1 shared and non-shared cases consume identical randomness.
    n_lead = 1 if shared == LEAD else G
    n_fill = 1 if shared == FILL else G
    leads = [torch.randn(d, generator=gen).requires_grad_(True) for _ in range(n_lead)]
    fills = [torch.randn(d, generator=gen).requires_grad_(True) for _ in range(n_fill)]
    lead_of = lambda t: leads[0] if shared == LEAD else leads[t]
    fill_of = lambda t: fills[0] if shared == FILL else fills[t]

    patterns = [
        torch.tensor(arrangement.pattern(len(text)), dtype=torch.long) for text in texts
    ]
    guided = [arrangement.guided_positions(len(text)) for text in texts]
    targets = [torch.tensor(text.ids, dtype=torch.long) for text in texts]

    optimizer = torch.optim.AdamW(
        leads + fills,
        lr=opt.learning_rate,
        betas=(opt.beta1, opt.beta2),
        weight_decay=opt.weight_decay,
    )

    def batch_accuracy() -> list[float]:
        accs = []
        with torch.no_grad():
            for t in range(G):
                E = torch.stack([lead_of(t), fill_of(t)])[patterns[t]]
                logits = model.logits_from_embeddings(E)
                pred = logits[guided[t]].argmax(dim=-1)
                accs.append(float((pred == targets[t]).float().mean()))
        return accs

    history: list[float] = []
    step_seconds = 0.0
    steps_used = 0
    accs = batch_accuracy() if opt.max_steps == 0 else [0.0] * G
    for step in range(1, opt.max_steps + 1):
        t_step = time.perf_counter()
        optimizer.zero_grad(set_to_none=True)
        loss = None
        for t in range(G):
            E = torch.stack([lead_of(t), fill_of(t)])[patterns[t]]
            logits = model.logits_from_embeddings(E)
            term = F.cross_entropy(logits[guided[t]], targets[t], reduction="sum")
            loss = term if loss is None else loss + term
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite cramming loss at step {step} "
                f"(seed {seed}, texts {[t.text_id for t in texts]})"
            )
        loss.backward()
        optimizer.step()
        history.append(float(loss))
        steps_used = step
        if (
            opt.early_stop_on_perfect and step % opt.eval_every == 0
        ) or step == opt.max_steps:
            accs = batch_accuracy()
            if opt.early_stop_on_perfect and all(a >= 1.0 for a in accs):
                step_seconds += time.perf_counter() - t_step
                break
        step_seconds += time.perf_counter() - t_step

    train_seconds = time.perf_counter() - t_start
    sols = []
    for t, text in enumerate(texts):
        sols.append(
            ProtoSolution(
                lead=lead_of(t).detach().clone(),
                fill=fill_of(t).detach().clone(),
                arrangement=arrangement,
                n=len(text),
                seed=seed,
                steps_used=steps_used,
                loss_history=history,
                final_accuracy=accs[t],
                text_id=text.text_id,
                context_id=text.context_id,
                train_seconds=train_seconds,
                step_seconds=step_seconds,
            )
        )
    return sols


# ---------------------------------------------------------------------------
# metrics


def accuracy_from_vectors(
    model: TinyLM,
    lead: torch.Tensor,
    fill: torch.Tensor,
    arrangement: Arrangement,
    ids,
) -> tuple[float, int]:
    """(fraction, count) of argmax-correct guided positions; one forward pass."""
    n = len(ids)
    E, guided = build_input(lead, fill, arrangement, n)
    with torch.no_grad():
        logits = model.logits_from_embeddings(E)
        pred = logits[guided].argmax(dim=-1)
        count = int((pred == torch.tensor(ids, dtype=torch.long)).sum())
    return count / n, count


def token_accuracy(model: TinyLM, sol: ProtoSolution, text: TargetText) -> tuple[float, int]:
    """Correctly reconstructed token fraction and count for a solution."""
    if sol.n != len(text):
        raise InputError("solution length does not match text length")
    return accuracy_from_vectors(model, sol.lead, sol.fill, sol.arrangement, text.ids)


def lm_cross_entropy(model: TinyLM, ids) -> float:
    """Total nats the frozen model assigns the sequence autoregressively.

    Teacher-forced on real token embeddings, conditioned on BOS for the first
    token; independent of any proto vectors.
    """
    ids_t = torch.as_tensor(list(ids), dtype=torch.long)
    n = ids_t.numel()
    if n < 1:
        raise InputError("need at least one token")
    if n > model.config.max_positions:
        raise InputError("sequence exceeds max_positions")
    bos = bos_id_for(model)
    inputs = torch.cat([torch.tensor([bos]), ids_t[:-1]])
    with torch.no_grad():
        logits = model.logits_from_embeddings(model.tok_embedding(inputs))
        return float(F.cross_entropy(logits, ids_t, reduction="sum"))


# ---------------------------------------------------------------------------
# capacity sweep


@dataclass(frozen=True)
class CapacityRow:
    n: int
    best_accuracy: float
    best_seed: int
    best_steps: int
    c_tokens: int
    h_lm: float


@dataclass(frozen=True)
class CapacityResult:
    text_id: str
    source: str
    threshold: float
    rows: tuple
    max_n: int | None
    c_tokens_at_max: int | None
    h_lm_at_max: float | None


def capacity_sweep(
    model: TinyLM,
    base_text: TargetText,
    ladder,
    threshold: float = 0.99,
    restarts: int = 1,
    opt: OptSpec = OptSpec(),
    arrangement: Arrangement = Arrangement(),
    seed: int = 0,
) -> CapacityResult:
    """Cram prefixes of base_text at each ladder length; report the longest
    length whose best-over-restarts accuracy clears the threshold.

    Restart seeds are seed, seed+1, ...  max_n is None when no length
    qualifies (callers averaging capacities treat that as 0).
    """
    ladder = list(ladder)
    if not ladder:
        raise InputError("empty ladder")
    if ladder != sorted(ladder):
        raise InputError("ladder must be sorted ascending")
    if ladder[-1] > len(base_text):
        raise InputError(
            f"ladder length {ladder[-1]} exceeds base text length {len(base_text)}"
        )
    rows = []
    for n in ladder:
        prefix = base_text.prefix(n)
        best = None
        for r in range(restarts):
            sol = cram(model, prefix, arrangement, opt, seed + r)
            if best is None or sol.final_accuracy > best.final_accuracy:
                best = sol
        rows.append(
            CapacityRow(
                n=n,
                best_accuracy=best.final_accuracy,
                best_seed=best.seed,
                best_steps=best.steps_used,
                c_tokens=round(best.final_accuracy * n),
                h_lm=lm_cross_entropy(model, prefix.ids),
            )
        )
    max_row = None
    for row in rows:
        if row.best_accuracy >= threshold:
            max_row = row
    return CapacityResult(
        text_id=base_text.text_id,
        source=base_text.source,
        threshold=threshold,
        rows=tuple(rows),
        max_n=None if max_row is None else max_row.n,
        c_tokens_at_max=None if max_row is None else max_row.c_tokens,
        h_lm_at_max=None if max_row is None else max_row.h_lm,
    )


# ---------------------------------------------------------------------------
# proto-token probing


@dataclass(frozen=True)
class ProbeReport:
    ids: tuple
    tfidf_to_target: float | None
    tfidf_to_context: float | None


def probe_as_context(
    model: TinyLM,
    sol: ProtoSolution,
    bos_mode: str = "none",  # "none" | "bos_first"
    n: int = 0,
    sampling: SamplingSpec = SamplingSpec(),
    target: TargetText | None = None,
    context: TargetText | None = None,
) -> ProbeReport:
    """Generate autoregressively from the proto prefix [lead, fill] and report
    TF-IDF distances of the output to the target and (optionally) its context."""
    if bos_mode not in ("none", "bos_first"):
        raise InputError(f"unknown bos_mode {bos_mode!r}")
    if n == 0:
        return ProbeReport(ids=(), tfidf_to_target=None, tfidf_to_context=None)
    rows = [sol.lead.view(1, -1), sol.fill.view(1, -1)]
    if bos_mode == "bos_first":
        rows.insert(0, embed(model, [bos_id_for(model)]))
    prefix = torch.cat(rows, dim=0)
    out = tuple(ar_generate(model, prefix, n, sampling))

    from .geometry import DocStats, tfidf_distance

    pool = [list(out)]
    if target is not None:
        pool.append(list(target.ids))
    if context is not None:
        pool.append(list(context.ids))
    stats = DocStats.from_documents(pool)
    return ProbeReport(
        ids=out,
        tfidf_to_target=(
            None if target is None else tfidf_distance(out, target.ids, stats)
        ),
        tfidf_to_context=(
            None if context is None else tfidf_distance(out, context.ids, stats)
        ),
    )


# ---------------------------------------------------------------------------
# solution persistence (versioned JSON)


def solution_record(
    sol: ProtoSolution,
    *,
    model_checksum: str,
    tokenizer_checksum: str,
    c_tokens: int,
    h_lm: float,
) -> dict:
    return {
        "format_version": SOLUTION_FORMAT_VERSION,
        "model_checksum": model_checksum,
        "tokenizer_checksum": tokenizer_checksum,
        "arrangement": sol.arrangement.kind,
        "guide_lead": sol.arrangement.guide_lead,
        "n": sol.n,
        "seed": sol.seed,
        "opt": None,
        "steps_used": sol.steps_used,
        "final_accuracy": sol.final_accuracy,
        "c_tokens": c_tokens,
        "h_lm": h_lm,
        "text_id": sol.text_id,
        "context_id": sol.context_id,
        "lead": [float(x) for x in sol.lead.tolist()],
        "fill": [float(x) for x in sol.fill.tolist()],
    }


def save_solution(
    path,
    sol: ProtoSolution,
    *,
    model_checksum: str,
    tokenizer_checksum: str,
    c_tokens: int,
    h_lm: float,
    opt: OptSpec | None = None,
) -> None:
    record = solution_record(
        sol,
        model_checksum=model_checksum,
        tokenizer_checksum=tokenizer_checksum,
        c_tokens=c_tokens,
        h_lm=h_lm,
    )
    if opt is not None:
        record["opt"] = {
            "learning_rate": opt.learning_rate,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "weight_decay": opt.weight_decay,
            "max_steps": opt.max_steps,
        }
    with open(path, "w", encoding="ascii") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def load_solution(path) -> tuple[ProtoSolution, dict]:
    from .errors import FormatVersionError

    with open(path, "r", encoding="ascii") as f:
        record = json.load(f)
    if record.get("format_version") != SOLUTION_FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported solution format version {record.get('format_version')}"
        )
    sol = ProtoSolution(
        lead=torch.tensor(record["lead"], dtype=torch.float32),
        fill=torch.tensor(record["fill"], dtype=torch.float32),
        arrangement=Arrangement(record["arrangement"], record["guide_lead"]),
        n=record["n"],
        seed=record["seed"],
        steps_used=record["steps_used"],
        loss_history=[],
        final_accuracy=record["final_accuracy"],
        text_id=record["text_id"],
        context_id=record["context_id"],
    )
    return sol, record
