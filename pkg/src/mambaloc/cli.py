"""Command-line entry point.

Subcommands: synth (write a synthetic dataset), train, eval, predict,
gradcheck (finite-difference audit of the whole network), bench
(sequence-length scaling against quadratic attention). Every command
writes a ``run.cfg`` with its resolved settings and seed next to its
outputs so any run can be repeated exactly.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
from PIL import Image

from . import data as D
from .bench import LENGTHS as BENCH_LENGTHS
from .bench import format_table, op_count_report, scaling_table
from .checkpoint import decode_value, encode_value, restore_model
from .metrics import dataset_average, format_report, pixel_scores
from .model import Model, ModelConfig, build
from .tensor import GradTape, Tensor
from .train import TrainConfig, limit_threads, train_model, write_history
from . import tensor as T

VARIANTS = {"default": ModelConfig, "tiny": ModelConfig.tiny, "micro": ModelConfig.micro}


# ---------------------------------------------------------------------------
# configuration plumbing


def parse_config_file(path: str) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    cfg = {}
    with open(path, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key = value")
            key, _, value = line.partition("=")
            cfg[key.strip()] = decode_value(value)
    return cfg


def model_config_from(cfg: dict) -> ModelConfig:
    variant = cfg.get("variant", "tiny")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {tuple(VARIANTS)}, got {variant!r}")
    overrides = {k[len("model."):]: v for k, v in cfg.items() if k.startswith("model.")}
    return VARIANTS[variant](**overrides)


def train_config_from(cfg: dict) -> TrainConfig:
    overrides = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.")}
    if "augment_ops" in overrides:
        ops = overrides["augment_ops"]
        if ops in (None, ""):
            ops = ()
        elif isinstance(ops, str):
            ops = (ops,)
        overrides["augment_ops"] = ops
    return TrainConfig(**overrides)


def write_run_manifest(out_dir: str, args, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"command = {args.command}", f"seed = {args.seed}",
             f"threads = {args.threads}",
             f"deterministic = {encode_value(bool(args.deterministic))}"]
    for key in ("config", "data_root", "checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            lines.append(f"{key} = {value}")
    for key, value in sorted(resolved.items()):
        lines.append(f"{key} = {encode_value(value)}")
    with open(os.path.join(out_dir, "run.cfg"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _load_split_pairs(root: str, tags) -> dict:
    manifest_path = os.path.join(root, "manifest.tsv")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no manifest.tsv under {root}")
    manifest = D.Manifest.load(manifest_path)
    manifest.validate(root)
    present = [t for t in dict.fromkeys(e[2] for e in manifest.entries)
               if tags is None or t in tags]
    return {tag: D.load_pairs(manifest, root, tag) for tag in present}


def _predict_probs(model: Model, images, batch_size: int = 8):
    model.eval()
    dtype = next(iter(model.named_parameters()))[1].data.dtype
    probs = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack(images[start:start + batch_size]).astype(dtype)
        probs.extend(model(Tensor(chunk)).data[..., 0].astype(np.float64))
    return probs


# ---------------------------------------------------------------------------
# subcommands


def parse_splits(text: str) -> list:
    out = []
    for part in text.split(","):
        name, _, count = part.partition("=")
        if not name or not count.isdigit() or int(count) < 1:
            raise ValueError(f"bad splits spec {text!r} (want e.g. train=450,val=50)")
        out.append((name.strip(), int(count)))
    return out


def cmd_synth(args) -> int:
    splits = parse_splits(args.splits)
    root = args.out
    os.makedirs(root, exist_ok=True)
    entries = []
    for i, (tag, count) in enumerate(splits):
        tag_seed = int(np.random.SeedSequence((args.seed, i)).generate_state(1)[0])
        records = D.synth_generate(tag_seed, count, args.size)
        entries.extend(D.write_dataset(records, root, tag).entries)
    manifest = D.Manifest(entries=entries)
    manifest.save(os.path.join(root, "manifest.tsv"))
    manifest.validate(root)
    write_run_manifest(root, args, {"size": args.size, "splits": args.splits})
    print(f"wrote {len(entries)} samples to {root}")
    return 0


def cmd_train(args) -> int:
    if args.data_root is None:
        raise ValueError("train needs --data-root")
    file_cfg = parse_config_file(args.config) if args.config else {}
    mcfg = model_config_from(file_cfg)
    tcfg = train_config_from(file_cfg)
    pairs = _load_split_pairs(args.data_root, ("train", "val"))
    if "train" not in pairs or "val" not in pairs:
        raise ValueError("training manifest must provide train and val splits")
    out = args.out
    resolved = {f"model.{k}": v for k, v in mcfg.to_dict().items()}
    resolved.update({f"train.{k}": v for k, v in tcfg.to_dict().items()})
    resolved["variant"] = file_cfg.get("variant", "tiny")
    write_run_manifest(out, args, resolved)
    model = build(mcfg, seed=args.seed)
    history = train_model(model, pairs["train"], pairs["val"], tcfg,
                          seed=args.seed, log=print,
                          checkpoint_path=os.path.join(out, "best.ckpt"))
    write_history(os.path.join(out, "history.tsv"), history)
    best = max(row["val_f1"] for row in history)
    print(f"done: best val_f1={best:.4f}, checkpoint {os.path.join(out, 'best.ckpt')}")
    return 0


def cmd_eval(args) -> int:
    if args.data_root is None or (args.checkpoint is None and not args.oracle):
        raise ValueError("eval needs --data-root, plus --checkpoint unless --oracle")
    model = None if args.oracle else restore_model(args.checkpoint)[0]
    tags = tuple(args.split.split(",")) if args.split else None
    split_pairs = _load_split_pairs(args.data_root, tags)
    if not split_pairs or not any(split_pairs.values()):
        raise ValueError(f"no samples to evaluate under {args.data_root}")
    groups = {}
    for tag, pairs in split_pairs.items():
        masks = [m for _, m in pairs]
        if args.oracle:
            probs = masks
        else:
            probs = _predict_probs(model, [img for img, _ in pairs])
        groups[tag] = [pixel_scores(p, g) for p, g in zip(probs, masks)]
    report = format_report(groups)
    write_run_manifest(args.out, args, {"split": args.split or "all",
                                        "oracle": bool(args.oracle)})
    with open(os.path.join(args.out, "eval.tsv"), "w", encoding="utf-8") as f:
        f.write(report + "\n")
    print(report)
    return 0


def cmd_predict(args) -> int:
    if args.checkpoint is None or args.data_root is None:
        raise ValueError("predict needs --checkpoint and --data-root")
    model, _, _ = restore_model(args.checkpoint)
    manifest_path = os.path.join(args.data_root, "manifest.tsv")
    if os.path.exists(manifest_path):
        manifest = D.Manifest.load(manifest_path)
        paths = [os.path.join(args.data_root, e[0]) for e in manifest.entries]
    else:
        paths = sorted(
            os.path.join(args.data_root, n) for n in os.listdir(args.data_root)
            if n.lower().endswith(".png"))
    if not paths:
        raise ValueError(f"no input images under {args.data_root}")
    prob_dir = os.path.join(args.out, "prob")
    mask_dir = os.path.join(args.out, "mask")
    os.makedirs(prob_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for path in paths:
        image = D.load_image(path)
        prob = _predict_probs(model, [image])[0]
        name = os.path.basename(path)
        gray = np.clip(prob * 255.0, 0.0, 255.0).round().astype(np.uint8)
        Image.fromarray(gray, "L").save(os.path.join(prob_dir, name))
        D.save_mask(os.path.join(mask_dir, name), (prob >= 0.5).astype(np.float64))
    write_run_manifest(args.out, args, {"inputs": len(paths)})
    print(f"wrote {len(paths)} probability/mask pairs to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# whole-network finite-difference audit


def end_to_end_grad_check(coord_limit: int | None = None, seed: int = 1,
                          log=lambda line: None):
    """Compare every parameter gradient of the smallest pipeline against
    central differences in double precision.

    The readout is a fixed-weight mean of the output map, centered at the
    sigmoid resting value so the scalar's magnitude does not drown tiny
    derivatives in rounding noise. Returns (max relative error, worst
    parameter name).
    """
    model = build(ModelConfig.micro(), seed=0, dtype=np.float64)
    model.train()
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.05, 0.95, (2, 16, 16, 3)))
    n = 2 * 16 * 16
    weights = Tensor(np.linspace(0.5, 1.5, n).reshape(2, 16, 16, 1) / n)

    def readout():
        return T.sum_(T.mul(T.sub(model(x), 0.5), weights))

    with GradTape() as tape:
        loss = readout()
    tape.backward(loss)
    eps = 1e-5
    worst = (0.0, "")
    for name, p in model.named_parameters():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        count = flat.size if coord_limit is None else min(flat.size, coord_limit)
        picks = (np.arange(flat.size) if count == flat.size
                 else rng.choice(flat.size, size=count, replace=False))
        tensor_worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            hi = readout().item()
            flat[i] = orig - eps
            lo = readout().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            rel = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-8)
            tensor_worst = max(tensor_worst, rel)
            if rel > worst[0]:
                worst = (rel, f"{name}[{i}]")
        log(f"{name}: max rel err {tensor_worst:.3e} over {count} coords")
    return worst


def cmd_gradcheck(args) -> int:
    limit = args.quick
    err, name = end_to_end_grad_check(coord_limit=limit, seed=args.seed or 1,
                                      log=print)
    ok = err <= 1e-3
    print(f"max relative error {err:.3e} at {name} "
          f"(threshold 1e-3): {'PASS' if ok else 'FAIL'}")
    write_run_manifest(args.out, args, {"quick": bool(args.quick),
                                        "max_rel_err": f"{err:.6e}"})
    return 0 if ok else 1


def cmd_bench(args) -> int:
    lengths = tuple(int(s) for s in args.lengths.split(","))
    rows = scaling_table(lengths=lengths)
    table = format_table(rows)
    counts = op_count_report()
    write_run_manifest(args.out, args, {"lengths": args.lengths})
    with open(os.path.join(args.out, "bench.tsv"), "w", encoding="utf-8") as f:
        f.write(table + "\n" + counts + "\n")
    print(table)
    print(counts)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mambaloc",
        description="Train, evaluate, and probe the forgery-localization model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, default_out):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--data-root", dest="data_root", help="dataset directory")
        sp.add_argument("--checkpoint", help="checkpoint path")
        sp.add_argument("--out", default=default_out, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--deterministic", action="store_true",
                        help="force single-threaded numerics")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, "runs/synth")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--splits", default="train=450,val=50,test=100")

    sp = sub.add_parser("train", help="train and save the best checkpoint")
    common(sp, "runs/train")

    sp = sub.add_parser("eval", help="score a checkpoint, write a report table")
    common(sp, "runs/eval")
    sp.add_argument("--split", help="comma-separated manifest splits (default all)")
    sp.add_argument("--oracle", action="store_true",
                    help="score ground truth against itself (plumbing check)")

    sp = sub.add_parser("predict", help="write probability and mask images")
    common(sp, "runs/predict")

    sp = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    common(sp, "runs/gradcheck")
    sp.add_argument("--quick", nargs="?", const=20, default=None, type=int,
                    metavar="N",
                    help="sample N coordinates per tensor (default all, bare flag 20)")

    sp = sub.add_parser("bench", help="sequence-length scaling measurements")
    common(sp, "runs/bench")
    sp.add_argument("--lengths", default=",".join(str(n) for n in BENCH_LENGTHS),
                    help="comma-separated sequence lengths")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic else max(1, args.threads)
    limit_threads(threads)
    try:
        return COMMANDS[args.command](args)
    except Exception as e:  # one-line cause, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
