"""Analytic FLOP / parameter / activation-memory model for the tuning
variants, as closed-form functions of token count n, prompt count m,
width d, and depth.

Conventions, pinned so the analytic numbers can be compared to the
instrumented tape exactly:

* FLOPs count matrix multiplies only, two ops per multiply-add, the same
  rule as ``Tape.matmul_flops``. Softmax, layer norm, GELU, bias adds
  and residual sums land in the tape's "other" counter and are excluded
  here; matmuls dominate at any realistic width.
* Attention FLOPs are head-count independent: the per-head score and
  context matmuls sum to the same 2·t²·d either way.
* The memory model counts the mathematically necessary forward
  intermediates of one trunk pass, all live at once, float32. A
  reverse-mode tape retains every forward intermediate until backward
  runs, so peak live memory is the sum, not the max, over ops.
  Incidental implementation views (per-head slices, pre-scale score
  copies) are excluded. Liveness table per block over t tokens with h
  score heads, in floats:

      norm before attention        t·d
      q, k, v projections        3·t·d
      softmaxed scores           h·t²
      merged head context          t·d
      attention output             t·d
      attention residual sum       t·d
      norm before mlp              t·d
      mlp hidden (ratio 4)       4·t·d
      mlp output                   t·d
      mlp residual sum             t·d
      -------------------------------------
      total                     14·t·d + h·t²

  The prompt-reading cross-attention adds, for n queries against m
  prompt rows with h_ca heads: q n·d, k m·d (plus v m·d and an output
  projection n·d in full mode), softmaxed scores h_ca·n·m, context n·d,
  and the residual sum n·d.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from fractions import Fraction

from .attention import ConfigError
from .blocks import MLP_RATIO
from .model import ViTConfig

BYTES_PER_FLOAT = 4

SWEEP_COLUMNS = (
    "variant",
    "n",
    "m",
    "d",
    "depth",
    "attn_flops",
    "block_flops",
    "total_flops",
    "trainable_params",
    "act_mem_bytes",
)


def _check(n: int, m: int, d: int, heads: int, m_min: int = 0) -> None:
    if n < 1:
        raise ConfigError(f"token count must be >= 1, got {n}")
    if m < m_min:
        raise ConfigError(f"prompt count must be >= {m_min}, got {m}")
    if d < 1 or heads < 1 or d % heads:
        raise ConfigError(f"width {d} not divisible into {heads} heads")


def flops_plain_attention(n: int, d: int) -> int:
    """Multi-head self-attention over n tokens: four d×d projections at
    2·n·d² each, score and context matmuls at 2·n²·d each."""
    return 8 * n * d * d + 4 * n * n * d


def flops_vpt_attention(n: int, m: int, d: int, heads: int = 1) -> int:
    """Prompt splicing runs the same self-attention on n+m rows."""
    _check(n, m, d, heads)
    return flops_plain_attention(n + m, d)


def flops_vpt_scores(n: int, m: int, d: int) -> int:
    """Just the score and context terms, the part that is quadratic in m."""
    _check(n, m, d, 1)
    t = n + m
    return 4 * t * t * d


def flops_cross_attention(n: int, m: int, d: int, heads: int = 1, mode: str = "literal") -> int:
    """Prompt read: queries from n tokens, keys from m prompt rows.

    literal shares one projection for K and V and has no output
    projection; full adds both.
    """
    _check(n, m, d, heads, m_min=1)
    if mode not in ("literal", "full"):
        raise ConfigError(f"ca mode must be literal or full, got {mode!r}")
    q_and_out = (4 if mode == "full" else 2) * n * d * d
    kv = (4 if mode == "full" else 2) * m * d * d
    return q_and_out + kv + 4 * n * m * d


def flops_cvpt_block(n: int, m: int, d: int, heads: int = 1, ca_mode: str = "literal") -> int:
    """Self-attention stays at n tokens; the prompt read adds a cost that
    is affine in m, never quadratic."""
    return flops_plain_attention(n, d) + flops_cross_attention(n, m, d, heads, ca_mode)


def flops_mlp(t: int, d: int) -> int:
    return 2 * 2 * MLP_RATIO * t * d * d


def analytic_trainable_params(config: ViTConfig, train_ca: bool = False) -> int:
    """Element counts under the frozen-backbone policies: classifier head
    always, prompts for the prompt variants, the cross-attention
    projections only on the learnable-CA arm."""
    d, m = config.d, config.prompt_count
    total = d * config.num_classes + config.num_classes
    if config.variant == "vpt":
        total += m * d if config.vpt_mode == "shallow" else m * d * config.depth
    elif config.variant == "cvpt":
        total += m * d * config.depth
        if train_ca:
            total += (4 if config.ca_mode == "full" else 2) * d * d * config.depth
    return total


def _block_activation_floats(t: int, d: int, heads: int) -> int:
    return 14 * t * d + heads * t * t


def activation_bytes_estimate(config: ViTConfig) -> int:
    """Peak live activations for one trunk forward under tape retention,
    per the module liveness table, plus the embedded input row block."""
    n, d, m = config.n_tokens, config.d, config.prompt_count
    if config.variant == "vpt":
        per_block = _block_activation_floats(n + m, d, config.head_count)
    elif config.variant == "cvpt":
        per_block = _block_activation_floats(n, d, config.head_count)
        ca_proj = (4 * n + 2 * m) * d if config.ca_mode == "full" else (3 * n + m) * d
        per_block += ca_proj + config.ca_heads * n * m
    else:
        per_block = _block_activation_floats(n, d, config.head_count)
    return BYTES_PER_FLOAT * (n * d + config.depth * per_block)


@dataclass
class CostReport:
    """One sweep row; the CSV columns in SWEEP_COLUMNS order."""

    variant: str
    n: int
    m: int
    d: int
    depth: int
    attention_flops: int
    block_flops: int
    total_flops: int
    trainable_params: int
    activation_memory_estimate: int

    def row(self) -> tuple:
        return (
            self.variant,
            self.n,
            self.m,
            self.d,
            self.depth,
            self.attention_flops,
            self.block_flops,
            self.total_flops,
            self.trainable_params,
            self.activation_memory_estimate,
        )


def cost_report(config: ViTConfig, train_ca: bool = False) -> CostReport:
    n, m, d = config.n_tokens, config.prompt_count, config.d
    if config.variant == "vpt":
        attn = flops_vpt_attention(n, m, d, config.head_count)
        block = attn + flops_mlp(n + m, d)
    elif config.variant == "cvpt":
        attn = flops_cvpt_block(n, m, d, config.ca_heads, config.ca_mode)
        block = attn + flops_mlp(n, d)
    else:
        attn = flops_plain_attention(n, d)
        block = attn + flops_mlp(n, d)
    return CostReport(
        variant=config.variant,
        n=n,
        m=m,
        d=d,
        depth=config.depth,
        attention_flops=attn,
        block_flops=block,
        # trunk only; the patch embedding and head are variant-independent
        total_flops=config.depth * block,
        trainable_params=analytic_trainable_params(config, train_ca),
        activation_memory_estimate=activation_bytes_estimate(config),
    )


def sweep(config: ViTConfig, prompt_counts: list) -> list:
    """Paired VPT and CVPT rows at each prompt count, sharing the given
    config's geometry. The base variant is ignored: the sweep exists to
    compare the two prompt mechanisms."""
    if not prompt_counts:
        raise ConfigError("prompt_counts must be nonempty")
    rows = []
    for m in prompt_counts:
        if m < 1:
            raise ConfigError(f"sweep prompt counts must be >= 1, got {m}")
        rows.append(cost_report(replace(config, variant="vpt", prompt_count=m)))
        rows.append(cost_report(replace(config, variant="cvpt", prompt_count=m)))
    return rows


def exact_poly_residual(xs: list, ys: list, degree: int) -> Fraction:
    """Sum of squared deviations of (xs, ys) from the unique polynomial of
    the given degree through the first degree+1 points, in exact rational
    arithmetic. Zero iff the data is exactly polynomial of that degree.
    """
    if len(xs) != len(ys):
        raise ConfigError("xs and ys must be the same length")
    if len(xs) < degree + 2:
        raise ConfigError(f"need at least {degree + 2} points to test degree {degree}")
    if len(set(xs)) != len(xs):
        raise ConfigError("xs must be distinct")
    base_x = [Fraction(x) for x in xs[: degree + 1]]
    base_y = [Fraction(y) for y in ys[: degree + 1]]

    def interpolate(x: Fraction) -> Fraction:
        total = Fraction(0)
        for i, (xi, yi) in enumerate(zip(base_x, base_y)):
            term = yi
            for j, xj in enumerate(base_x):
                if j != i:
                    term *= (x - xj) / (xi - xj)
            total += term
        return total

    residual = Fraction(0)
    for x, y in zip(xs[degree + 1 :], ys[degree + 1 :]):
        err = Fraction(y) - interpolate(Fraction(x))
        residual += err * err
    return residual


def sweep_fit_summary(rows: list) -> dict:
    """Exact-fit diagnostics over one sweep's rows: the VPT score term
    must be degree-2 in m, the CVPT block term degree-1, and the VPT-CVPT
    FLOP gap must widen monotonically."""
    vpt = sorted((r for r in rows if r.variant == "vpt"), key=lambda r: r.m)
    cvpt = sorted((r for r in rows if r.variant == "cvpt"), key=lambda r: r.m)
    ms = [r.m for r in vpt]
    if ms != [r.m for r in cvpt]:
        raise ConfigError("sweep rows must pair vpt and cvpt at the same prompt counts")
    score_col = [flops_vpt_scores(r.n, r.m, r.d) for r in vpt]
    vpt_resid = exact_poly_residual(ms, score_col, 2)
    cvpt_resid = exact_poly_residual(ms, [r.block_flops for r in cvpt], 1)
    gaps = [a.attention_flops - b.attention_flops for a, b in zip(vpt, cvpt)]
    widening = all(g2 > g1 for g1, g2 in zip(gaps, gaps[1:]))
    return {
        "vpt_scores_quadratic_r2": 1.0 if vpt_resid == 0 else float("nan"),
        "vpt_scores_quadratic_residual": vpt_resid,
        "cvpt_block_linear_r2": 1.0 if cvpt_resid == 0 else float("nan"),
        "cvpt_block_linear_residual": cvpt_resid,
        "gap_strictly_widening": widening,
    }


def write_sweep_csv(path, rows: list, echo: dict | None = None) -> None:
    """Pinned-column CSV; an optional config echo goes in a leading
    comment line so the data rows stay uniform."""
    with open(path, "w", newline="") as fh:
        if echo:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(echo.items())) + "\n")
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow(r.row())
