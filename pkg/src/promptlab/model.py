"""End-to-end toy vision transformer plus checkpoint and freeze machinery.

The model is a standard patch-embed / cls-token / pre-norm-block / head
stack whose blocks come in the three variants defined in ``blocks``. One
binary container serves both checkpoints and datasets:

    magic b"CVPT" | u32 LE format version | u32 LE tensor count |
    per tensor: u16 LE name length, UTF-8 name, u8 rank,
                u32 LE per dim, raw float32 LE data.

Metadata travels as one JSON-text tensor named ``__meta__`` (UTF-8 JSON,
space-padded to a multiple of 4 bytes, stored as that many raw bytes).
Tensors are written in sorted-name order, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from fnmatch import fnmatchcase
from typing import NamedTuple

import numpy as np

from .attention import ConfigError, WEIGHT_INIT_STD
from .blocks import (
    CA_POSITIONS,
    DEFAULT_CA_POSITION,
    EncoderBlockParams,
    PromptSet,
    cvpt_block,
    init_encoder_block,
    init_prompt_set,
    plain_block,
    vpt_block,
)
from .tensor import Rng, ShapeError, Tensor, add, add_bias, concat_rows, matmul, reshape, slice_rows

VARIANTS = ("plain", "vpt", "cvpt")
VPT_MODES = ("shallow", "deep")
CA_MODES = ("literal", "full")


@dataclass
class ViTConfig:
    """Build-time description of one model; every field is echoed into
    checkpoint metadata so runs are self-describing."""

    image_size: int = 32
    patch_size: int = 8
    d: int = 64
    depth: int = 4
    head_count: int = 4
    num_classes: int = 10
    variant: str = "plain"
    vpt_mode: str = "deep"
    prompt_count: int = 0
    ca_mode: str = "literal"
    ca_position: int = DEFAULT_CA_POSITION
    ca_heads: int = 1
    ca_blocks: tuple[int, ...] | None = None  # None = cross-attention in every block
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.d % self.head_count != 0:
            raise ConfigError(f"width {self.d} not divisible by head count {self.head_count}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.vpt_mode not in VPT_MODES:
            raise ConfigError(f"vpt_mode must be one of {VPT_MODES}, got {self.vpt_mode!r}")
        if self.ca_mode not in CA_MODES:
            raise ConfigError(f"ca_mode must be one of {CA_MODES}, got {self.ca_mode!r}")
        if self.ca_position not in CA_POSITIONS:
            raise ConfigError(f"ca_position must be in {CA_POSITIONS}, got {self.ca_position}")
        if self.variant in ("vpt", "cvpt") and self.prompt_count < 1:
            raise ConfigError(f"variant {self.variant!r} needs prompt_count >= 1")
        if self.variant == "plain" and self.prompt_count != 0:
            raise ConfigError("plain variant carries no prompts")
        if self.ca_blocks is not None:
            self.ca_blocks = tuple(sorted(set(self.ca_blocks)))
            bad = [i for i in self.ca_blocks if not 0 <= i < self.depth]
            if bad:
                raise ConfigError(f"ca_blocks indices {bad} out of range for depth {self.depth}")

    @property
    def patches_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        """Embedded token count: patch grid plus the cls token."""
        return self.patches_per_side**2 + 1

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["ca_blocks"] is not None:
            out["ca_blocks"] = list(out["ca_blocks"])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        d = dict(d)
        if d.get("ca_blocks") is not None:
            d["ca_blocks"] = tuple(d["ca_blocks"])
        return cls(**d)


class Model:
    """Parameter container; all computation lives in free functions."""

    def __init__(self, config, patch_w, patch_b, cls_token, pos, blocks, head_w, head_b, shared_prompts=None):
        self.config = config
        self.patch_w = patch_w
        self.patch_b = patch_b
        self.cls_token = cls_token
        self.pos = pos
        self.blocks = blocks
        self.head_w = head_w
        self.head_b = head_b
        self.shared_prompts = shared_prompts  # vpt-shallow only

    def named_tensors(self):
        yield "patch.w", self.patch_w
        yield "patch.b", self.patch_b
        yield "cls", self.cls_token
        yield "pos", self.pos
        if self.shared_prompts is not None:
            yield from self.shared_prompts.named_tensors("prompts")
        for i, blk in enumerate(self.blocks):
            yield from blk.named_tensors(f"blocks.{i}")
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def tensor(self, name: str) -> Tensor:
        for tensor_name, t in self.named_tensors():
            if tensor_name == name:
                return t
        raise KeyError(name)


def build_model(config: ViTConfig) -> Model:
    """Fresh parameters, every stream split off Rng(config.seed)."""
    rng = Rng(config.seed)
    d = config.d
    patch_dim = config.patch_size * config.patch_size * 3
    shared_prompts = None
    blocks = []
    for i in range(config.depth):
        block_variant = config.variant
        with_prompts = True
        if config.variant == "vpt" and config.vpt_mode == "shallow":
            # one shared prompt set at the model level; blocks own none
            with_prompts = False
        if config.variant == "cvpt" and config.ca_blocks is not None and i not in config.ca_blocks:
            block_variant = "plain"
        blocks.append(
            init_encoder_block(
                rng.split(("block", i)),
                d,
                config.head_count,
                variant=block_variant,
                prompt_count=config.prompt_count,
                ca_mode=config.ca_mode,
                ca_heads=config.ca_heads,
                ca_position=config.ca_position,
                with_prompts=with_prompts,
            )
        )
    if config.variant == "vpt" and config.vpt_mode == "shallow":
        shared_prompts = init_prompt_set(rng.split("prompts"), config.prompt_count, d)
    return Model(
        config=config,
        patch_w=Tensor(rng.split("patch_w").normal((patch_dim, d), std=WEIGHT_INIT_STD), requires_grad=True),
        patch_b=Tensor(np.zeros(d, dtype=np.float32), requires_grad=True),
        cls_token=Tensor(rng.split("cls").normal((1, d), std=WEIGHT_INIT_STD), requires_grad=True),
        pos=Tensor(rng.split("pos").normal((config.n_tokens, d), std=WEIGHT_INIT_STD), requires_grad=True),
        blocks=blocks,
        head_w=Tensor(rng.split("head_w").normal((d, config.num_classes), std=WEIGHT_INIT_STD), requires_grad=True),
        head_b=Tensor(np.zeros(config.num_classes, dtype=np.float32), requires_grad=True),
        shared_prompts=shared_prompts,
    )


def patch_embed(image, model: Model) -> Tensor:
    """Non-overlapping patches, linear projection, cls token, positions.

    The image itself is data, not a parameter, so the patch rearrangement
    runs in plain numpy; everything from the projection on is taped.
    """
    cfg = model.config
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an [H, W, 3] image, got {arr.shape}")
    h, w, c = arr.shape
    ps = cfg.patch_size
    if h % ps != 0 or w % ps != 0:
        raise ShapeError(f"image {h}x{w} not divisible into {ps}x{ps} patches")
    gh, gw = h // ps, w // ps
    patches = (
        arr.reshape(gh, ps, gw, ps, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, ps * ps * c)
    )
    tokens = add_bias(matmul(Tensor(patches), model.patch_w), model.patch_b)
    with_cls = concat_rows([model.cls_token, tokens])
    if with_cls.shape[0] != model.pos.shape[0]:
        raise ShapeError(
            f"token count {with_cls.shape[0]} does not match positional table {model.pos.shape}"
        )
    return add(with_cls, model.pos)


class ForwardCapture(NamedTuple):
    logits: Tensor
    sa_scores: list  # per layer: list of per-head softmaxed score Tensors
    ca_scores: list  # per layer: list of per-head cross-attention scores


def _prompt_view(prompts: PromptSet, count: int | None) -> PromptSet:
    if count is None or count == prompts.m:
        return prompts
    if not 1 <= count <= prompts.m:
        raise ConfigError(f"prompt_count override {count} outside [1, {prompts.m}]")
    return PromptSet(p=slice_rows(prompts.p, 0, count), init_spec=prompts.init_spec)


def _block_view(blk: EncoderBlockParams, count: int | None) -> EncoderBlockParams:
    if blk.prompts is None or count is None or count == blk.prompts.m:
        return blk
    return EncoderBlockParams(
        ln1=blk.ln1,
        sa=blk.sa,
        ln2=blk.ln2,
        mlp=blk.mlp,
        variant=blk.variant,
        ca=blk.ca,
        prompts=_prompt_view(blk.prompts, count),
        ca_position=blk.ca_position,
    )


def _forward(model: Model, image, prompt_count=None, sa_scores=None, ca_scores=None) -> Tensor:
    cfg = model.config
    tokens = patch_embed(image, model)
    if cfg.variant == "vpt" and cfg.vpt_mode == "shallow":
        carried = None
        shared = _prompt_view(model.shared_prompts, prompt_count)
        for i, blk in enumerate(model.blocks):
            layer_sa = [] if sa_scores is not None else None
            if i == 0:
                staged = EncoderBlockParams(
                    ln1=blk.ln1, sa=blk.sa, ln2=blk.ln2, mlp=blk.mlp,
                    variant="vpt", prompts=shared,
                )
                tokens, carried = vpt_block(
                    tokens, staged, mode="shallow", is_first=True, scores_out=layer_sa
                )
            else:
                tokens, carried = vpt_block(
                    tokens, blk, mode="shallow", carried_prompts=carried, is_first=False,
                    scores_out=layer_sa,
                )
            if sa_scores is not None:
                sa_scores.append(layer_sa)
            if ca_scores is not None:
                ca_scores.append([])
    else:
        for blk in model.blocks:
            layer_sa = [] if sa_scores is not None else None
            layer_ca = [] if ca_scores is not None else None
            view = _block_view(blk, prompt_count)
            if view.variant == "plain":
                tokens = plain_block(tokens, view, scores_out=layer_sa)
            elif view.variant == "vpt":
                tokens, _ = vpt_block(tokens, view, mode="deep", scores_out=layer_sa)
            else:
                tokens = cvpt_block(tokens, view, scores_out=layer_sa, ca_scores_out=layer_ca)
            if sa_scores is not None:
                sa_scores.append(layer_sa)
            if ca_scores is not None:
                ca_scores.append(layer_ca)
    cls_row = slice_rows(tokens, 0, 1)
    logits = add_bias(matmul(cls_row, model.head_w), model.head_b)
    return reshape(logits, (model.config.num_classes,))


def model_forward(model: Model, image, prompt_count=None) -> Tensor:
    """Logits [num_classes] for one image; taped when a tape is active."""
    return _forward(model, image, prompt_count=prompt_count)


def forward_with_scores(model: Model, image, prompt_count=None) -> ForwardCapture:
    """Forward pass that also captures every softmaxed score matrix."""
    sa: list = []
    ca: list = []
    logits = _forward(model, image, prompt_count=prompt_count, sa_scores=sa, ca_scores=ca)
    return ForwardCapture(logits=logits, sa_scores=sa, ca_scores=ca)


# ---------------------------------------------------------------------------
# Binary container (checkpoints and datasets share it)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CVPT"
CHECKPOINT_VERSION = 1
META_NAME = "__meta__"


class CheckpointError(ValueError):
    """Container violations: bad magic, version, truncation, missing tensors."""


def write_named_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Serialize float32 arrays plus one JSON metadata record."""
    if META_NAME in arrays:
        raise CheckpointError(f"tensor name {META_NAME!r} is reserved for metadata")
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(meta_bytes) % 4:
        meta_bytes += b" " * (4 - len(meta_bytes) % 4)
    records: dict[str, bytes] = {META_NAME: meta_bytes}
    shapes: dict[str, tuple[int, ...]] = {META_NAME: (len(meta_bytes) // 4,)}
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float32)
        records[name] = a.astype("<f4").tobytes()
        shapes[name] = a.shape
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name in sorted(records):
        encoded = name.encode("utf-8")
        dims = shapes[name]
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", len(dims)))
        chunks.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        chunks.append(records[name])
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_named_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = 0

    def take(k: int) -> bytes:
        nonlocal offset
        if offset + k > len(buf):
            raise CheckpointError(
                f"{path}: truncated at byte {offset} (needed {k} more bytes, have {len(buf) - offset})"
            )
        piece = buf[offset : offset + k]
        offset += k
        return piece

    magic = take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported container version {version}; this build reads version {CHECKPOINT_VERSION}"
        )
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        elems = int(np.prod(dims)) if dims else 1
        raw = take(4 * elems)
        if name == META_NAME:
            meta = json.loads(raw.decode("utf-8").rstrip(" "))
        else:
            if name in arrays:
                raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes after tensor {count}")
    return arrays, meta


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    @classmethod
    def from_model(cls, model: Model) -> "Checkpoint":
        tensors = {name: t.data.copy() for name, t in model.named_tensors()}
        return cls(tensors=tensors, meta={"config": model.config.to_dict()})

    def save(self, path: str) -> None:
        write_named_arrays(path, self.tensors, self.meta)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        arrays, meta = read_named_arrays(path)
        return cls(tensors=arrays, meta=meta)


def save_checkpoint(model: Model, path: str) -> None:
    Checkpoint.from_model(model).save(path)


def load_checkpoint(path: str) -> Checkpoint:
    return Checkpoint.load(path)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Full restore: rebuild the model the checkpoint's own config
    describes and copy every tensor back. The tensor sets must match
    exactly in both directions."""
    if "config" not in ckpt.meta:
        raise CheckpointError("checkpoint carries no config record")
    config = ViTConfig.from_dict(ckpt.meta["config"])
    model = build_model(config)
    names = set()
    for name, t in model.named_tensors():
        names.add(name)
        if name not in ckpt.tensors:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        src = ckpt.tensors[name]
        if tuple(src.shape) != t.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(src.shape)}, model expects {t.shape}"
            )
        t.data = np.array(src, dtype=np.float32)
    extra = sorted(set(ckpt.tensors) - names)
    if extra:
        raise CheckpointError(f"checkpoint holds tensors the config does not place: {extra}")
    return model


# ---------------------------------------------------------------------------
# Freeze policy and fine-tune assembly
# ---------------------------------------------------------------------------

BACKBONE_TENSOR_PATTERNS = (
    "patch.*",
    "cls",
    "pos",
    "blocks.*.ln1.*",
    "blocks.*.ln2.*",
    "blocks.*.sa.*",
    "blocks.*.mlp.*",
)


@dataclass(frozen=True)
class FreezePolicy:
    """Glob patterns naming the trainable tensors; everything else is frozen."""

    trainable_patterns: tuple

    def is_trainable(self, name: str) -> bool:
        return any(fnmatchcase(name, pat) for pat in self.trainable_patterns)

    def apply(self, model: Model) -> None:
        for name, t in model.named_tensors():
            t.requires_grad = self.is_trainable(name)

    @classmethod
    def train_everything(cls) -> "FreezePolicy":
        return cls(trainable_patterns=("*",))

    @classmethod
    def linear_probe(cls) -> "FreezePolicy":
        return cls(trainable_patterns=("head.*",))

    @classmethod
    def prompt_tuning(cls, train_ca: bool = False) -> "FreezePolicy":
        """Prompts and head train; the backbone is frozen. Cross-attention
        projections stay frozen unless ``train_ca`` (the learnable-CA arm)."""
        patterns = ["head.*", "prompts.p", "blocks.*.prompts.p"]
        if train_ca:
            patterns.append("blocks.*.ca.*")
        return cls(trainable_patterns=tuple(patterns))


def count_params(model: Model, policy: FreezePolicy | None = None) -> dict:
    """Exact element counts. Without a policy, trainable follows the
    tensors' current requires_grad flags."""
    total = 0
    trainable = 0
    for name, t in model.named_tensors():
        total += t.size
        if policy.is_trainable(name) if policy is not None else t.requires_grad:
            trainable += t.size
    return {"total": total, "trainable": trainable}


def _is_backbone_name(name: str) -> bool:
    return any(fnmatchcase(name, pat) for pat in BACKBONE_TENSOR_PATTERNS)


def build_from_backbone(
    ckpt: Checkpoint, config: ViTConfig, ca_init: str = "shared", copy_head: bool = True
) -> Model:
    """Fresh model for ``config`` with all backbone tensors copied from a
    plain-backbone checkpoint. The classifier head is copied too by
    default (all fine-tuning arms then share one starting point; pass
    ``copy_head=False`` to keep the fresh seeded head, e.g. for a new
    label set). Prompts always keep their fresh seeded init. For cvpt
    configs, ``ca_init="shared"`` copies each block's SA projections into
    its CA projections (by value); ``"random"`` keeps the fresh CA draw.
    Loaded-backbone models default to the frozen policy for their variant.
    """
    if ca_init not in ("shared", "random"):
        raise ConfigError(f"ca_init must be shared or random, got {ca_init!r}")
    model = build_model(config)
    for name, t in model.named_tensors():
        if not (_is_backbone_name(name) or (copy_head and name.startswith("head."))):
            continue
        if name not in ckpt.tensors:
            raise CheckpointError(f"backbone tensor {name!r} missing from checkpoint")
        src = ckpt.tensors[name]
        if tuple(src.shape) != t.shape:
            raise CheckpointError(
                f"backbone tensor {name!r} has shape {tuple(src.shape)}, model expects {t.shape}"
            )
        t.data = np.array(src, dtype=np.float32)
    if config.variant == "cvpt" and ca_init == "shared":
        for blk in model.blocks:
            if blk.ca is None:
                continue
            blk.ca.w_q.data = blk.sa.w_q.data.copy()
            blk.ca.w_k.data = blk.sa.w_k.data.copy()
            if blk.ca.mode == "full":
                blk.ca.w_v.data = blk.sa.w_v.data.copy()
                blk.ca.w_o.data = blk.sa.w_o.data.copy()
    if config.variant == "plain":
        FreezePolicy.linear_probe().apply(model)
    else:
        FreezePolicy.prompt_tuning(train_ca=False).apply(model)
    return model


def load_checkpoint_with_weight_sharing(ckpt: Checkpoint, config: ViTConfig) -> Model:
    """Cross-attention projections start as bit-copies of the frozen
    self-attention projections; prompts are freshly seeded; CA stays
    frozen under the default policy."""
    if config.variant != "cvpt":
        raise ConfigError("weight-sharing load applies to cvpt configs only")
    return build_from_backbone(ckpt, config, ca_init="shared")
