"""Self-attention and cross-attention kernels plus softmax-mass diagnostics.

Self-attention is the standard multi-head kind. Cross-attention reads a
separate key set (the prompts) and comes in two shapes:

* ``literal``: Q = X1.W_Q and K = V = X2.W_K, so the value path reuses the
  key projection and there is no output projection;
* ``full``: structurally identical to self-attention (adds W_V and W_O).

The diagnostics partition a softmaxed score matrix into the four blocks
induced by splitting the key/query index set into embedded tokens and
prompt tokens, and report how much probability mass each block holds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    concat_cols,
    matmul,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)


class ConfigError(ValueError):
    """A parameter bundle violates its structural contract."""


WEIGHT_INIT_STD = 0.02  # standard ViT linear-weight scale


@dataclass
class SelfAttentionParams:
    """Q/K/V/output projections (all d x d, no biases) for one block."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    head_count: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_o", self.w_o)):
            if w.shape != (d, d):
                raise ConfigError(f"self-attention {name} must be ({d}, {d}), got {w.shape}")
        if self.head_count < 1 or d % self.head_count != 0:
            raise ConfigError(f"head_count {self.head_count} must divide width {d}")

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


@dataclass
class CrossAttentionParams:
    """Prompt-reading attention; W_V/W_O exist only in full mode."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor | None = None
    w_o: Tensor | None = None
    head_count: int = 1
    mode: str = "literal"

    def __post_init__(self):
        if self.mode not in ("literal", "full"):
            raise ConfigError(f"cross-attention mode must be literal or full, got {self.mode!r}")
        d = self.w_q.shape[0]
        if self.w_q.shape != (d, d) or self.w_k.shape != (d, d):
            raise ConfigError(
                f"cross-attention projections must be square and equal sized, "
                f"got {self.w_q.shape} and {self.w_k.shape}"
            )
        if self.mode == "literal" and (self.w_v is not None or self.w_o is not None):
            raise ConfigError("literal cross-attention must not carry W_V or W_O")
        if self.mode == "full" and (self.w_v is None or self.w_o is None):
            raise ConfigError("full cross-attention requires both W_V and W_O")
        if self.head_count < 1 or d % self.head_count != 0:
            raise ConfigError(f"head_count {self.head_count} must divide width {d}")

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        if self.mode == "full":
            yield f"{prefix}.w_v", self.w_v
            yield f"{prefix}.w_o", self.w_o


def init_self_attention(rng: Rng, d: int, head_count: int) -> SelfAttentionParams:
    return SelfAttentionParams(
        w_q=Tensor(rng.split("w_q").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        w_k=Tensor(rng.split("w_k").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        w_v=Tensor(rng.split("w_v").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        w_o=Tensor(rng.split("w_o").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        head_count=head_count,
    )


def init_cross_attention(rng: Rng, d: int, head_count: int = 1, mode: str = "literal") -> CrossAttentionParams:
    w_v = w_o = None
    if mode == "full":
        w_v = Tensor(rng.split("w_v").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True)
        w_o = Tensor(rng.split("w_o").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True)
    return CrossAttentionParams(
        w_q=Tensor(rng.split("w_q").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        w_k=Tensor(rng.split("w_k").normal((d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        w_v=w_v,
        w_o=w_o,
        head_count=head_count,
        mode=mode,
    )


def _headed_attention(
    q: Tensor, k: Tensor, v: Tensor, head_count: int, scores_out: list[Tensor] | None
) -> Tensor:
    """softmax(Q_h.K_h^T / sqrt(d_h)).V_h per head, heads re-concatenated.

    The per-head loop always slices, even for a single head, so the op
    sequence (and therefore the activation meter) is uniform in head_count.
    """
    d = q.shape[1]
    d_h = d // head_count
    inv_scale = 1.0 / math.sqrt(d_h)
    heads = []
    for h in range(head_count):
        j0, j1 = h * d_h, (h + 1) * d_h
        qh = slice_cols(q, j0, j1)
        kh = slice_cols(k, j0, j1)
        vh = slice_cols(v, j0, j1)
        attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_scale))
        if scores_out is not None:
            scores_out.append(attn)
        heads.append(matmul(attn, vh))
    return concat_cols(heads)


def self_attention(x: Tensor, p: SelfAttentionParams, scores_out: list[Tensor] | None = None) -> Tensor:
    """Multi-head self-attention over a [t, d] token matrix.

    ``scores_out``, if given, receives each head's softmaxed [t, t] score
    matrix in head order; the mass diagnostics read those captures.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"self_attention needs a [t, d] matrix with t >= 1, got {x.shape}")
    if x.shape[1] != p.width:
        raise ConfigError(f"input width {x.shape[1]} does not match parameters ({p.width})")
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    merged = _headed_attention(q, k, v, p.head_count, scores_out)
    return matmul(merged, p.w_o)


def cross_attention(
    x1: Tensor, x2: Tensor, p: CrossAttentionParams, scores_out: list[Tensor] | None = None
) -> Tensor:
    """Attend from queries x1 [n, d] to keys/values x2 [m, d]; output [n, d].

    literal mode: K and V are the same projected tensor (one W_K matmul),
    and the head outputs are returned without an output projection.
    """
    if x1.data.ndim != 2 or x2.data.ndim != 2:
        raise ShapeError(f"cross_attention needs 2-D operands, got {x1.shape} and {x2.shape}")
    if x2.shape[0] == 0:
        raise ShapeError("cross_attention: empty key set (no prompt rows)")
    if x1.shape[0] == 0:
        raise ShapeError("cross_attention: empty query set")
    if x1.shape[1] != p.width or x2.shape[1] != p.width:
        raise ConfigError(
            f"operand widths {x1.shape[1]}/{x2.shape[1]} do not match parameters ({p.width})"
        )
    q = matmul(x1, p.w_q)
    k = matmul(x2, p.w_k)
    v = matmul(x2, p.w_v) if p.mode == "full" else k
    merged = _headed_attention(q, k, v, p.head_count, scores_out)
    return matmul(merged, p.w_o) if p.mode == "full" else merged


# ---------------------------------------------------------------------------
# Softmax-mass diagnostics
# ---------------------------------------------------------------------------


@dataclass
class AttentionMassReport:
    """Four-block partition of one softmaxed score matrix.

    ``mass_ee`` is the mean, over embedded-token query rows, of the total
    mass those rows place on embedded-token keys; ``mass_ep`` likewise for
    prompt keys, and ``mass_pe``/``mass_pp`` for prompt-query rows. Means
    over an empty query region are reported as 0.
    """

    n_embedded: int
    m_prompt: int
    mass_ee: float
    mass_ep: float
    mass_pe: float
    mass_pp: float
    per_query_prompt_mass: np.ndarray = field(repr=False)


def attention_mass_partition(scores, n: int, m: int, layout: str = "prompts-last") -> AttentionMassReport:
    """Partition a softmaxed [(n+m), (n+m)] score matrix by token kind.

    ``layout`` names which contiguous index block holds the prompts:
    ``prompts-first`` puts them at rows/cols [0, m), ``prompts-last`` at
    [n, n+m). Rows must already be probability distributions; per-query
    prompt mass is returned in the matrix's own row order.
    """
    a = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    t = n + m
    if a.ndim != 2 or a.shape != (t, t):
        raise ShapeError(f"score matrix must be ({t}, {t}) for n={n}, m={m}, got {a.shape}")
    if layout not in ("prompts-first", "prompts-last"):
        raise ValueError(f"unknown layout {layout!r}")
    # Accumulate in float64: the 1e-6 conservation window is too tight for
    # cascaded float32 row sums at t in the hundreds.
    a64 = a.astype(np.float64)
    row_sums = a64.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-4:
        worst = int(np.abs(row_sums - 1.0).argmax())
        raise ValueError(
            f"rows are not softmax-normalized (row {worst} sums to {row_sums[worst]:.6f})"
        )
    if layout == "prompts-first":
        prompt_lo, prompt_hi = 0, m
    else:
        prompt_lo, prompt_hi = n, t
    prompt_cols = np.zeros(t, dtype=bool)
    prompt_cols[prompt_lo:prompt_hi] = True

    per_query_prompt = a64[:, prompt_cols].sum(axis=1) if m > 0 else np.zeros(t)
    per_query_embedded = row_sums - per_query_prompt
    prompt_rows = prompt_cols  # square matrix, same index split

    def region_mean(values: np.ndarray, rows: np.ndarray) -> float:
        return float(values[rows].mean()) if rows.any() else 0.0

    return AttentionMassReport(
        n_embedded=n,
        m_prompt=m,
        mass_ee=region_mean(per_query_embedded, ~prompt_rows),
        mass_ep=region_mean(per_query_prompt, ~prompt_rows),
        mass_pe=region_mean(per_query_embedded, prompt_rows),
        mass_pp=region_mean(per_query_prompt, prompt_rows),
        per_query_prompt_mass=per_query_prompt,
    )


def cls_attention_profile(
    model,
    image: np.ndarray,
    layer: int,
    prompt_counts: list[int],
    out_path: str | None = None,
    force_uniform: bool = False,
) -> list[dict]:
    """Mass the cls query row places on prompts vs embedded tokens.

    The model must be a prompt-splicing (vpt) model whose prompt matrix has
    at least max(prompt_counts) rows; each requested count m evaluates the
    model restricted to the first m prompt rows, so the key sets are nested
    and the comparison isolates pure dilution. The cls position's own
    weight is excluded and the remaining row renormalized, so
    prompt_mass + embedded_mass = 1 per row. ``force_uniform`` replaces the
    observed scores with the uniform distribution (arithmetic cross-check).
    Returns one dict per prompt count; optionally writes them as CSV with
    columns prompt_count, layer, prompt_mass, embedded_mass.
    """
    from . import model as _model  # runtime import: this module is lower in the stack

    depth = model.config.depth
    if not (0 <= layer < depth):
        raise ValueError(f"layer {layer} out of range for depth {depth}")
    rows = []
    for count in prompt_counts:
        if count == 0:
            rows.append(
                {"prompt_count": 0, "layer": layer, "prompt_mass": 0.0, "embedded_mass": 1.0}
            )
            continue
        capture = _model.forward_with_scores(model, image, prompt_count=count)
        per_head = capture.sa_scores[layer]
        # mean over heads in float64, then the cls row (row 0 of [cls, P, E])
        mean_scores = np.mean([s.data.astype(np.float64) for s in per_head], axis=0)
        t = mean_scores.shape[0]
        if force_uniform:
            mean_scores = np.full((t, t), 1.0 / t)
        cls_row = mean_scores[0]
        prompt_mass = cls_row[1 : 1 + count].sum()
        off_self = 1.0 - cls_row[0]
        rows.append(
            {
                "prompt_count": count,
                "layer": layer,
                "prompt_mass": float(prompt_mass / off_self),
                "embedded_mass": float((off_self - prompt_mass) / off_self),
            }
        )
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["prompt_count", "layer", "prompt_mass", "embedded_mass"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
