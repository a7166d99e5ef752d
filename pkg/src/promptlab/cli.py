"""Command-line front end.

One subcommand per experiment plus train/eval plumbing. Every run writes
its artifacts as CSV files under --out, each prefixed with a config-echo
comment line, and exits 0 only if every built-in direction check passed.

Options resolve in three layers: command-line flags win, then key=value
pairs from --config (UTF-8, one pair per line, # comments), then the
canonical defaults. File keys use the flag spelling without the dashes,
e.g. ``ca-mode=literal``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .attention import ConfigError
from .blocks import CA_POSITIONS
from .costmodel import SWEEP_COLUMNS, sweep, sweep_fit_summary
from .datasets import load_data
from .experiments import (
    ARM_CFG,
    BACKBONE_CACHE_NAME,
    CANONICAL_CA_MODE,
    CANONICAL_PROMPTS,
    DOWNSTREAM_EVAL,
    DOWNSTREAM_TRAIN,
    MODEL_SEED,
    ExperimentResult,
    Verdict,
    pretrain_backbone,
    run_dilution_experiment,
    run_gradcheck,
    run_position_ablation,
    run_prompt_drop_equivalence,
    run_sharing_ablation,
    run_trend_experiment,
)
from .model import (
    CheckpointError,
    FreezePolicy,
    ViTConfig,
    build_from_backbone,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .tensor import NonFiniteError
from .train import TrainConfig, evaluate, train

FIG_PROMPT_COUNTS = "1,10,20,50,100,150,200"
VARIANTS = ("plain", "vpt-shallow", "vpt-deep", "cvpt")

# every option a config file may set, with its coercion
OPTION_TYPES = {
    "seed": int,
    "out": str,
    "data": str,
    "eval-data": str,
    "variant": str,
    "prompts": int,
    "ca-mode": str,
    "ca-position": int,
    "ca-heads": int,
    "ca-init": str,
    "train-ca": None,  # bool, parsed specially
    "steps": int,
    "lr": float,
    "batch-size": int,
    "counts": str,
    "positions": str,
    "layer": int,
    "inputs": int,
    "tol": float,
    "samples": int,
    "step": float,
    "band": float,
    "ckpt": str,
    "save": str,
    "d": int,
    "depth": int,
    "heads": int,
    "image-size": int,
    "patch-size": int,
}

TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


def read_config_file(path: str) -> dict:
    """key=value pairs, one per line; blank lines and # comments allowed."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in OPTION_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown option {key!r}")
            values[key] = value
    return values


def _coerce(key: str, raw: str):
    if key == "train-ca":
        if raw.lower() in TRUE_WORDS:
            return True
        if raw.lower() in FALSE_WORDS:
            return False
        raise ConfigError(f"option {key!r}: expected a boolean, got {raw!r}")
    try:
        return OPTION_TYPES[key](raw)
    except ValueError as err:
        raise ConfigError(f"option {key!r}: {err}") from err


class Options:
    """Flag value if given, else config-file value, else the default."""

    def __init__(self, args: argparse.Namespace, file_values: dict):
        self._args = vars(args)
        self._file = file_values

    def get(self, key: str, default=None):
        flag = self._args.get(key.replace("-", "_"))
        if flag is not None:
            return flag
        if key in self._file:
            return _coerce(key, self._file[key])
        return default


def _int_list(raw: str, what: str) -> list:
    try:
        values = [int(part) for part in str(raw).split(",") if part.strip() != ""]
    except ValueError as err:
        raise ConfigError(f"{what}: expected comma-separated ints, got {raw!r}") from err
    if not values:
        raise ConfigError(f"{what}: empty list")
    return values


def _model_config(opts: Options, num_classes: int) -> ViTConfig:
    variant = opts.get("variant", "cvpt")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    kw = dict(num_classes=num_classes, seed=MODEL_SEED)
    if variant == "plain":
        return ViTConfig(variant="plain", prompt_count=0, **kw)
    prompts = opts.get("prompts", CANONICAL_PROMPTS)
    if variant == "cvpt":
        return ViTConfig(
            variant="cvpt",
            prompt_count=prompts,
            ca_mode=opts.get("ca-mode", CANONICAL_CA_MODE),
            ca_position=opts.get("ca-position", 3),
            ca_heads=opts.get("ca-heads", 1),
            **kw,
        )
    mode = variant.split("-", 1)[1]
    return ViTConfig(variant="vpt", vpt_mode=mode, prompt_count=prompts, **kw)


def _arm_train_config(opts: Options) -> TrainConfig:
    updates = {}
    for key, attr in (("steps", "steps"), ("lr", "lr"),
                      ("batch-size", "batch_size"), ("seed", "seed")):
        value = opts.get(key)
        if value is not None:
            updates[attr] = value
    return replace(ARM_CFG, **updates) if updates else ARM_CFG


def _backbone(opts: Options, out: str):
    return pretrain_backbone(cache_path=os.path.join(out, BACKBONE_CACHE_NAME))


# ---------------------------------------------------------------------------
# Subcommand handlers; each returns a list of ExperimentResult
# ---------------------------------------------------------------------------


def cmd_train(opts: Options, out: str) -> list:
    tr = load_data(opts.get("data", DOWNSTREAM_TRAIN))
    ev = load_data(opts.get("eval-data", DOWNSTREAM_EVAL))
    config = _model_config(opts, tr.class_count)
    cfg = _arm_train_config(opts)
    train_ca = bool(opts.get("train-ca", False))
    ca_init = opts.get("ca-init", "shared")

    model = build_from_backbone(_backbone(opts, out), config, ca_init=ca_init, copy_head=False)
    if train_ca and config.variant == "cvpt":
        FreezePolicy.prompt_tuning(train_ca=True).apply(model)
    result = train(model, tr, cfg, eval_set=ev)
    ckpt_path = os.path.join(out, opts.get("save", "model.bin"))
    save_checkpoint(model, ckpt_path)
    final_eval = result.final_eval_acc

    rows = [
        (h["step"], h["loss"], h["train_acc"], "" if h["eval_acc"] is None else h["eval_acc"])
        for h in result.history
    ]
    echo = {"variant": opts.get("variant", "cvpt"), "prompts": config.prompt_count,
            "ca_mode": config.ca_mode, "ca_init": ca_init, "train_ca": train_ca,
            "steps": cfg.steps, "lr": cfg.lr, "batch": cfg.batch_size, "seed": cfg.seed,
            "train": opts.get("data", DOWNSTREAM_TRAIN),
            "eval": opts.get("eval-data", DOWNSTREAM_EVAL)}
    verdicts = [
        Verdict("training-completed",
                True,
                f"{cfg.steps} steps, final loss {result.final_train_loss:.4f}, "
                f"eval acc {final_eval:.4f}, checkpoint {os.path.basename(ckpt_path)}"),
    ]
    return [ExperimentResult(name="train_history", echo=echo,
                             columns=("step", "loss", "train_acc", "eval_acc"),
                             rows=rows, verdicts=verdicts)]


def cmd_eval(opts: Options, out: str) -> list:
    ckpt_path = opts.get("ckpt")
    if not ckpt_path:
        raise ConfigError("eval needs --ckpt (or ckpt= in the config file)")
    data_spec = opts.get("data", DOWNSTREAM_EVAL)
    data = load_data(data_spec)
    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    if model.config.num_classes != data.class_count:
        raise ConfigError(
            f"checkpoint head has {model.config.num_classes} classes, data has {data.class_count}"
        )
    acc = evaluate(model, data)
    echo = {"ckpt": os.path.basename(ckpt_path), "data": data_spec,
            "variant": model.config.variant, "prompts": model.config.prompt_count}
    result = ExperimentResult(
        name="eval", echo=echo,
        columns=("data", "samples", "accuracy"),
        rows=[(data_spec, len(data), acc)],
        verdicts=[Verdict("evaluation-completed", True, f"accuracy {acc:.4f} on {len(data)} samples")],
    )
    return [result]


def cmd_gradcheck(opts: Options, out: str) -> list:
    config = _model_config(opts, 10)
    return [run_gradcheck(
        config=config,
        seed=opts.get("seed", 0),
        sample_limit=opts.get("samples", 6),
        tol=opts.get("tol", 1e-4),
        step=opts.get("step", 3e-3),
    )]


def cmd_analyze_attention(opts: Options, out: str) -> list:
    counts = _int_list(opts.get("counts", FIG_PROMPT_COUNTS), "counts")
    return [run_dilution_experiment(counts, layer=opts.get("layer", 0), seed=opts.get("seed", 0))]


def cmd_prompt_drop(opts: Options, out: str) -> list:
    return [run_prompt_drop_equivalence(
        m=opts.get("prompts", CANONICAL_PROMPTS),
        seed=opts.get("seed", 0),
        inputs=opts.get("inputs", 10),
        tol=opts.get("tol", 1e-6),
    )]


def cmd_cost_sweep(opts: Options, out: str) -> list:
    counts = sorted(set(_int_list(opts.get("counts", FIG_PROMPT_COUNTS), "counts")))
    if len(counts) < 4:
        raise ConfigError("cost-sweep needs at least 4 distinct counts for the exact fits")
    # full-scale geometry by default; the formulas are closed-form either way
    config = ViTConfig(
        image_size=opts.get("image-size", 224),
        patch_size=opts.get("patch-size", 16),
        d=opts.get("d", 768),
        depth=opts.get("depth", 12),
        head_count=opts.get("heads", 12),
        ca_mode=opts.get("ca-mode", "literal"),
        ca_heads=opts.get("ca-heads", 1),
    )
    reports = sweep(config, counts)
    summary = sweep_fit_summary(reports)
    verdicts = [
        Verdict("splice-score-flops-quadratic",
                summary["vpt_scores_quadratic_residual"] == 0,
                f"degree-2 interpolation residual {summary['vpt_scores_quadratic_residual']}"),
        Verdict("prompt-read-block-flops-linear",
                summary["cvpt_block_linear_residual"] == 0,
                f"degree-1 interpolation residual {summary['cvpt_block_linear_residual']}"),
        Verdict("flops-gap-strictly-widening",
                bool(summary["gap_strictly_widening"]),
                "attention FLOP gap grows with every added prompt"),
    ]
    echo = {"n": config.n_tokens, "d": config.d, "depth": config.depth,
            "heads": config.head_count, "ca_mode": config.ca_mode,
            "ca_heads": config.ca_heads, "counts": "/".join(map(str, counts))}
    return [ExperimentResult(name="cost_sweep", echo=echo, columns=SWEEP_COLUMNS,
                             rows=[r.row() for r in reports], verdicts=verdicts)]


def cmd_ablate_position(opts: Options, out: str) -> list:
    positions = _int_list(opts.get("positions", "1,2,3,4,5"), "positions")
    bad = [p for p in positions if p not in CA_POSITIONS]
    if bad:
        raise ConfigError(f"positions outside {CA_POSITIONS}: {bad}")
    return [run_position_ablation(
        positions=positions,
        backbone=_backbone(opts, out),
        prompts=opts.get("prompts", CANONICAL_PROMPTS),
        arm_cfg=_arm_train_config(opts),
        train_data=opts.get("data", DOWNSTREAM_TRAIN),
        eval_data=opts.get("eval-data", DOWNSTREAM_EVAL),
        ca_mode=opts.get("ca-mode", CANONICAL_CA_MODE),
    )]


def cmd_ablate_sharing(opts: Options, out: str) -> list:
    return [run_sharing_ablation(
        backbone=_backbone(opts, out),
        prompts=opts.get("prompts", CANONICAL_PROMPTS),
        arm_cfg=_arm_train_config(opts),
        train_data=opts.get("data", DOWNSTREAM_TRAIN),
        eval_data=opts.get("eval-data", DOWNSTREAM_EVAL),
        ca_mode=opts.get("ca-mode", CANONICAL_CA_MODE),
    )]


def cmd_trend(opts: Options, out: str) -> list:
    counts = _int_list(opts.get("counts", "4,16,64"), "counts")
    return [run_trend_experiment(
        prompt_counts=counts,
        backbone=_backbone(opts, out),
        arm_cfg=_arm_train_config(opts),
        spread_band=opts.get("band", 0.03),
        train_data=opts.get("data", DOWNSTREAM_TRAIN),
        eval_data=opts.get("eval-data", DOWNSTREAM_EVAL),
        ca_mode=opts.get("ca-mode", CANONICAL_CA_MODE),
    )]


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "analyze-attention": cmd_analyze_attention,
    "prompt-drop": cmd_prompt_drop,
    "cost-sweep": cmd_cost_sweep,
    "ablate-position": cmd_ablate_position,
    "ablate-sharing": cmd_ablate_sharing,
    "trend": cmd_trend,
}


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value options file; flags override it")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory for CSV artifacts (default runs)")
    shared.add_argument("--data", help="dataset spec, e.g. synth:10x24@2.0#102, or a .npz path")
    shared.add_argument("--variant", choices=VARIANTS)
    shared.add_argument("--prompts", type=int, help="prompt vector count")
    shared.add_argument("--ca-mode", choices=("literal", "full"))
    shared.add_argument("--ca-position", type=int, choices=sorted(CA_POSITIONS))
    shared.add_argument("--ca-heads", type=int)

    parser = argparse.ArgumentParser(
        prog="promptlab",
        description="Prompt-tuning laboratory for a small frozen vision transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="fine-tune one arm from the cached backbone")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-ca", action="store_true", default=None,
                   help="unfreeze the prompt-read projections")
    p.add_argument("--ca-init", choices=("shared", "random"))
    p.add_argument("--eval-data")
    p.add_argument("--save", help="checkpoint filename under --out (default model.bin)")

    p = sub.add_parser("eval", parents=[shared], help="accuracy of a saved checkpoint")
    p.add_argument("--ckpt", help="checkpoint path to evaluate")

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="tape gradients vs central finite differences")
    p.add_argument("--samples", type=int, help="entries sampled per tensor")
    p.add_argument("--tol", type=float)
    p.add_argument("--step", type=float, help="finite-difference step")

    p = sub.add_parser("analyze-attention", parents=[shared],
                       help="attention-mass dilution profile")
    p.add_argument("--counts", help="comma-separated prompt counts")
    p.add_argument("--layer", type=int)

    p = sub.add_parser("prompt-drop", parents=[shared],
                       help="prompt-drop equivalence and its negative control")
    p.add_argument("--inputs", type=int)
    p.add_argument("--tol", type=float)

    p = sub.add_parser("cost-sweep", parents=[shared],
                       help="analytic FLOP/memory/parameter sweep over prompt counts")
    p.add_argument("--counts")
    p.add_argument("--d", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)

    p = sub.add_parser("ablate-position", parents=[shared],
                       help="fine-tune once per prompt-read insertion point")
    p.add_argument("--positions", help="comma-separated insertion points")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-data")

    p = sub.add_parser("ablate-sharing", parents=[shared],
                       help="init-source x trainability grid vs linear probe")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-data")

    p = sub.add_parser("trend", parents=[shared],
                       help="accuracy vs prompt count for both mechanisms")
    p.add_argument("--counts")
    p.add_argument("--band", type=float, help="allowed prompt-read accuracy spread")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-data")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        opts = Options(args, file_values)
        out = opts.get("out", "runs")
        os.makedirs(out, exist_ok=True)
        results = HANDLERS[args.command](opts, out)
    except (ConfigError, CheckpointError, NonFiniteError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    ok = True
    for result in results:
        path = os.path.join(out, f"{result.name}.csv")
        result.write_csv(path)
        print(f"wrote {path}")
        for line in result.summary_lines():
            print(line)
        ok = ok and result.passed
    print("OK" if ok else "FAILED")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
