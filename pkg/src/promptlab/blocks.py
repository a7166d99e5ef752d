"""Encoder-block variants over a frozen transformer backbone.

Three block flavors share one pre-norm skeleton (x + SA(LN1(x)) followed
by + MLP(LN2(.))):

* ``plain_block``: the skeleton alone, token count t in, t out;
* ``vpt_block``: splices m learnable prompt rows between the cls row and
  the patch rows, runs the skeleton on t+m tokens, and returns the t
  non-prompt rows (deep mode re-splices fresh prompts per block and
  discards them after; shallow mode carries the prompt rows forward);
* ``cvpt_block``: never changes the token count; prompts contribute only
  through a residual cross-attention read, inserted at one of five
  positions around the skeleton.

The cross-attention insertion positions:

  1  before SA:        x <- x + CA(x, P), then the full skeleton
  2  parallel to SA:   X1 = x + SA(LN1(x)) + CA(LN1(x), P)
  3  after SA:         X1 = x + SA(LN1(x)); X2 = X1 + CA(X1, P)   (default)
  4  parallel to MLP:  out = X1 + MLP(LN2(X1)) + CA(LN2(X1), P)
  5  after MLP:        out = X2 + CA(X2, P), X2 = X1 + MLP(LN2(X1))

At positions 2-5 the self-attention call sees exactly the tokens the
plain skeleton would see, so its score matrices are bit-identical to the
plain block's for any prompt values; position 1 intentionally shifts the
SA input by the CA residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    ConfigError,
    CrossAttentionParams,
    SelfAttentionParams,
    WEIGHT_INIT_STD,
    cross_attention,
    self_attention,
)
from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    add,
    add_bias,
    concat_rows,
    delete_rows,
    gelu,
    layer_norm,
    matmul,
    slice_rows,
)

MLP_RATIO = 4  # hidden width of the token MLP, fixed

CA_POSITIONS = (1, 2, 3, 4, 5)
DEFAULT_CA_POSITION = 3

VPT_DROP_POINTS = ("after_block", "after_sa", "before_sa")


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def named_tensors(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class MlpParams:
    """Two linear layers d -> 4d -> d with GELU between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d = self.w1.shape[0]
        if self.w1.shape != (d, MLP_RATIO * d) or self.w2.shape != (MLP_RATIO * d, d):
            raise ConfigError(
                f"mlp must be d -> {MLP_RATIO}d -> d, got {self.w1.shape} and {self.w2.shape}"
            )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class PromptSet:
    """One block's learnable prompt matrix, m rows of width d."""

    p: Tensor
    init_spec: str

    @property
    def m(self) -> int:
        return self.p.shape[0]

    def named_tensors(self, prefix: str):
        yield f"{prefix}.p", self.p


def prompt_init_bound(d: int) -> float:
    """Uniform init half-width sqrt(6 / (fan_in + fan_out)) with both fans d."""
    return math.sqrt(6.0 / (d + d))


def init_prompt_set(rng: Rng, m: int, d: int) -> PromptSet:
    if m < 1:
        raise ConfigError(f"prompt count must be >= 1, got {m}")
    bound = prompt_init_bound(d)
    p = Tensor(rng.uniform((m, d), -bound, bound), requires_grad=True)
    return PromptSet(p=p, init_spec=f"uniform[-{bound:.6g}, {bound:.6g})")


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
        beta=Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
    )


def init_mlp(rng: Rng, d: int) -> MlpParams:
    return MlpParams(
        w1=Tensor(rng.split("w1").normal((d, MLP_RATIO * d), std=WEIGHT_INIT_STD), requires_grad=True),
        b1=Tensor(np.zeros(MLP_RATIO * d, dtype=np.float32), requires_grad=True),
        w2=Tensor(rng.split("w2").normal((MLP_RATIO * d, d), std=WEIGHT_INIT_STD), requires_grad=True),
        b2=Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
    )


@dataclass
class EncoderBlockParams:
    """Everything one block owns; CA and prompts exist only where the
    variant calls for them."""

    ln1: LayerNormParams
    sa: SelfAttentionParams
    ln2: LayerNormParams
    mlp: MlpParams
    variant: str = "plain"
    ca: CrossAttentionParams | None = None
    prompts: PromptSet | None = None
    ca_position: int = DEFAULT_CA_POSITION

    def __post_init__(self):
        if self.variant not in ("plain", "vpt", "cvpt"):
            raise ConfigError(f"unknown block variant {self.variant!r}")
        if self.variant == "plain" and (self.ca is not None or self.prompts is not None):
            raise ConfigError("plain blocks carry neither prompts nor cross-attention")
        if self.variant == "vpt" and self.ca is not None:
            raise ConfigError("prompt-splicing blocks have no cross-attention")
        if self.variant == "cvpt" and (self.ca is None or self.prompts is None):
            raise ConfigError("cross-attention blocks need both ca params and prompts")
        if self.ca_position not in CA_POSITIONS:
            raise ConfigError(f"ca_position must be one of {CA_POSITIONS}, got {self.ca_position}")

    def named_tensors(self, prefix: str):
        yield from self.ln1.named_tensors(f"{prefix}.ln1")
        yield from self.sa.named_tensors(f"{prefix}.sa")
        yield from self.ln2.named_tensors(f"{prefix}.ln2")
        yield from self.mlp.named_tensors(f"{prefix}.mlp")
        if self.ca is not None:
            yield from self.ca.named_tensors(f"{prefix}.ca")
        if self.prompts is not None:
            yield from self.prompts.named_tensors(f"{prefix}.prompts")


def _mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    h = gelu(add_bias(matmul(x, p.w1), p.b1))
    return add_bias(matmul(h, p.w2), p.b2)


def _sa_residual(x: Tensor, p: EncoderBlockParams, scores_out=None) -> Tensor:
    return add(x, self_attention(layer_norm(x, p.ln1.gamma, p.ln1.beta), p.sa, scores_out))


def _mlp_residual(x: Tensor, p: EncoderBlockParams) -> Tensor:
    return add(x, _mlp_forward(layer_norm(x, p.ln2.gamma, p.ln2.beta), p.mlp))


def plain_block(x: Tensor, p: EncoderBlockParams, scores_out=None) -> Tensor:
    """x + SA(LN1(x)), then + MLP(LN2(.)). Token count preserved."""
    if p.variant != "plain":
        raise ConfigError(f"plain_block called with a {p.variant!r} parameter bundle")
    return _mlp_residual(_sa_residual(x, p, scores_out), p)


def _splice_prompts(x: Tensor, prompt_rows: Tensor) -> Tensor:
    """[row 0, prompts, rows 1..]: prompts sit between cls and patches."""
    return concat_rows([slice_rows(x, 0, 1), prompt_rows, slice_rows(x, 1, x.shape[0])])


def vpt_block(
    x: Tensor,
    p: EncoderBlockParams,
    mode: str = "deep",
    carried_prompts: Tensor | None = None,
    is_first: bool = True,
    drop_point: str = "after_block",
    scores_out=None,
) -> tuple[Tensor, Tensor | None]:
    """Prompt-splicing block. Returns (embedded tokens [t, d], carried prompts).

    deep: fresh prompts from ``p.prompts`` are spliced in, the skeleton runs
    on t+m rows, and the prompt rows are discarded; the carried slot is None.

    shallow: the first block splices ``p.prompts``; later blocks must receive
    the previous block's prompt outputs via ``carried_prompts``. The prompt
    rows' outputs are returned for the next block instead of discarded.

    ``drop_point`` (deep only) moves the discard for the equivalence study:
    ``after_block`` is the reference semantics, ``after_sa`` drops prompt rows
    between the SA residual and the MLP, ``before_sa`` is the negative
    control that drops them before they can absorb any attention.
    """
    if p.variant != "vpt":
        raise ConfigError(f"vpt_block called with a {p.variant!r} parameter bundle")
    if mode not in ("shallow", "deep"):
        raise ConfigError(f"vpt mode must be shallow or deep, got {mode!r}")
    if drop_point not in VPT_DROP_POINTS:
        raise ConfigError(f"drop_point must be one of {VPT_DROP_POINTS}, got {drop_point!r}")

    if mode == "deep":
        if carried_prompts is not None:
            raise ConfigError("deep mode discards prompts; there is no carried state")
        if p.prompts is None or p.prompts.m < 1:
            raise ConfigError("vpt_block needs at least one prompt row")
        m = p.prompts.m
        spliced = _splice_prompts(x, p.prompts.p)
        if drop_point == "before_sa":
            kept = delete_rows(spliced, 1, 1 + m)
            return _mlp_residual(_sa_residual(kept, p, scores_out), p), None
        x1 = _sa_residual(spliced, p, scores_out)
        if drop_point == "after_sa":
            return _mlp_residual(delete_rows(x1, 1, 1 + m), p), None
        full = _mlp_residual(x1, p)
        return delete_rows(full, 1, 1 + m), None

    # shallow
    if is_first:
        if carried_prompts is not None:
            raise ConfigError("first shallow block initializes prompts; carried state must be None")
        if p.prompts is None or p.prompts.m < 1:
            raise ConfigError("vpt_block needs at least one prompt row")
        prompt_rows = p.prompts.p
    else:
        if carried_prompts is None:
            raise ConfigError("shallow block beyond the first needs carried prompt state")
        prompt_rows = carried_prompts
    m = prompt_rows.shape[0]
    spliced = _splice_prompts(x, prompt_rows)
    full = _mlp_residual(_sa_residual(spliced, p, scores_out), p)
    embedded = delete_rows(full, 1, 1 + m)
    carried = slice_rows(full, 1, 1 + m)
    return embedded, carried


def cvpt_block(x: Tensor, p: EncoderBlockParams, scores_out=None, ca_scores_out=None) -> Tensor:
    """Skeleton plus a residual cross-attention read of the prompts.

    The token count never changes; see the module docstring for the five
    insertion positions.
    """
    if p.variant != "cvpt":
        raise ConfigError(f"cvpt_block called with a {p.variant!r} parameter bundle")
    if p.prompts is None or p.prompts.m < 1:
        raise ConfigError("cvpt_block needs at least one prompt row")
    prompts = p.prompts.p
    pos = p.ca_position

    def ca(queries: Tensor) -> Tensor:
        return cross_attention(queries, prompts, p.ca, ca_scores_out)

    if pos == 1:
        x = add(x, ca(x))
        x1 = _sa_residual(x, p, scores_out)
        return _mlp_residual(x1, p)
    if pos == 2:
        h = layer_norm(x, p.ln1.gamma, p.ln1.beta)
        x1 = add(add(x, self_attention(h, p.sa, scores_out)), ca(h))
        return _mlp_residual(x1, p)
    if pos == 3:
        x1 = _sa_residual(x, p, scores_out)
        x2 = add(x1, ca(x1))
        return _mlp_residual(x2, p)
    if pos == 4:
        x1 = _sa_residual(x, p, scores_out)
        h2 = layer_norm(x1, p.ln2.gamma, p.ln2.beta)
        return add(add(x1, _mlp_forward(h2, p.mlp)), ca(h2))
    # pos == 5
    x1 = _sa_residual(x, p, scores_out)
    x2 = _mlp_residual(x1, p)
    return add(x2, ca(x2))


def init_encoder_block(
    rng: Rng,
    d: int,
    head_count: int,
    variant: str = "plain",
    prompt_count: int = 0,
    ca_mode: str = "literal",
    ca_heads: int = 1,
    ca_position: int = DEFAULT_CA_POSITION,
    with_prompts: bool = True,
) -> EncoderBlockParams:
    """Fresh parameter bundle; sub-initializers draw from split RNG streams.

    ``with_prompts=False`` builds a vpt bundle whose prompts live elsewhere
    (the shallow variant holds one shared set at the model level).
    """
    from .attention import init_cross_attention, init_self_attention

    ca = None
    prompts = None
    if variant == "cvpt":
        ca = init_cross_attention(rng.split("ca"), d, head_count=ca_heads, mode=ca_mode)
        prompts = init_prompt_set(rng.split("prompts"), prompt_count, d)
    elif variant == "vpt" and with_prompts:
        prompts = init_prompt_set(rng.split("prompts"), prompt_count, d)
    return EncoderBlockParams(
        ln1=init_layer_norm(d),
        sa=init_self_attention(rng.split("sa"), d, head_count),
        ln2=init_layer_norm(d),
        mlp=init_mlp(rng.split("mlp"), d),
        variant=variant,
        ca=ca,
        prompts=prompts,
        ca_position=ca_position,
    )
