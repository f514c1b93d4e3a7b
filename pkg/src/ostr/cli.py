"""Command-line entry point: ``ostr <command> [flags]``.

Every command ends by printing ``OSTR <command> status=<ok|err> key=value ...``
and exits non-zero on failure.
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import episodes as ep
from . import net, objective, trainer
from .dirmaps import Direction, all_directional_maps


class CommandError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        cmd = getattr(self, "_ostr_command", "cli")
        print(f"OSTR {cmd} status=err error={_quote(message)}")
        sys.exit(2)


def _quote(v):
    s = str(v)
    return json.dumps(s) if (" " in s or not s) else s


def summary(command, status="ok", **kv):
    parts = [f"OSTR {command} status={status}"] + [f"{k}={_quote(v)}" for k, v in kv.items()]
    print(" ".join(parts))


def _default_seed():
    return int(os.environ.get("OSTR_SEED", "0"))


def _add_data_flags(p):
    g = p.add_argument_group("texture data")
    g.add_argument("--bank", type=Path, help="directory of <class>/*.png textures")
    g.add_argument("--n-classes", type=int, default=16)
    g.add_argument("--images-per-class", type=int, default=8)
    g.add_argument("--bank-seed", type=int, default=0)
    g.add_argument("--split", choices=["holdout", "dtd"], default="holdout")
    g.add_argument("--n-test", type=int, default=4)
    g.add_argument("--n-subsets", type=int, default=1)


def _data_args(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in {
        "bank": args.bank, "n_classes": args.n_classes, "images_per_class": args.images_per_class,
        "bank_seed": args.bank_seed, "split": args.split, "n_test": args.n_test,
        "n_subsets": args.n_subsets}.items()}


def _load_data(d, size):
    if d.get("bank"):
        bank = ep.load_bank(d["bank"], min_size=size)
    else:
        bank = ep.procedural_bank(d["n_classes"], d["images_per_class"], size, d["bank_seed"])
    if d["split"] == "dtd":
        split = ep.dtd_split()
    else:
        split = ep.holdout_split(bank, d["n_test"], d["n_subsets"])
    return bank, split


def _data_for_checkpoint(args, checkpoint, size):
    """Flags win; otherwise reuse the data settings recorded next to the checkpoint."""
    run = Path(checkpoint).parent / "run.json"
    d = _data_args(args)
    if run.exists():
        recorded = json.loads(run.read_text())["data"]
        defaults = _data_args(_build_parser().parse_args(["eval", "--checkpoint", "x"]))
        d = {k: (d[k] if d[k] != defaults[k] else recorded.get(k, d[k])) for k in d}
    return _load_data(d, size)


def _load_model(path):
    try:
        params, config = net.load_checkpoint(path)
    except FileNotFoundError:
        raise CommandError(f"checkpoint not found: {path}") from None
    return params, config


def _check_threshold(t):
    t = float(t)
    if not 0 < t < 1:
        raise argparse.ArgumentTypeError("threshold must lie in the open interval (0, 1)")
    return t


def _read_kv_file(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CommandError(f"{path}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# -- commands -------------------------------------------------------------------

def cmd_synth_data(args):
    size = args.size
    bank, split = _load_data(_data_args(args), size)
    out = Path(args.out)
    if not args.bank:
        ep.save_bank(bank, out / "bank")
    phase = "train" if args.phase == "train" else ("test", args.subset)
    eps = ep.episodes(bank, split, phase, args.seed, args.n, size)
    for i, e in enumerate(eps):
        ep.save_episode(e, out / "episodes" / f"{i:05d}")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=1))
    summary("synth-data", n=len(eps), out=out)


def cmd_dump_dirmaps(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = args.width or args.size
    maps = all_directional_maps(args.size, width)
    for d, m in zip(Direction, maps):
        Image.fromarray(np.round(m * 255).astype(np.uint8), "L").save(out / f"{d.value}_{d.name.lower()}.png")
    summary("dump-dirmaps", n=len(maps), height=args.size, width=width)


TRAIN_FLAGS = ("lr", "weight_decay", "momentum", "epochs", "episodes_per_epoch", "batch_size", "clip_norm",
               "eval_every", "eval_episodes", "lr_decay", "lr_decay_every")


def cmd_train(args):
    options = _read_kv_file(args.config) if args.config else {}
    net_keys = {"preset", "no_dirconv", "no_gating"}
    net_opts = {k: options.pop(k) for k in list(options) if k in net_keys}
    for k in TRAIN_FLAGS:
        v = getattr(args, k)
        if v is not None:
            options[k] = v
    options["seed"] = args.seed
    tc = trainer.TrainConfig.from_mapping(options)

    truthy = {"1", "true", "yes", "on"}
    config = net.preset(args.preset or net_opts.get("preset", "tiny"))
    use_dir = not (args.no_dirconv or str(net_opts.get("no_dirconv", "")).lower() in truthy)
    use_gate = not (args.no_gating or str(net_opts.get("no_gating", "")).lower() in truthy)
    config = replace(config, use_dirconv=use_dir, use_gating=use_gate)

    bank, split = _load_data(_data_args(args), config.input_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(
        {"data": _data_args(args), "train": asdict(tc), "net": config.to_dict()}, indent=1))
    params, record = trainer.train(bank, split, config, tc, out_dir=out)
    summary("train", steps=len(record.steps), final_loss=f"{record.steps[-1][2]:.6g}",
            best_iou=f"{record.best_iou:.4f}", out=out)


def cmd_eval(args):
    params, config = _load_model(args.checkpoint)
    bank, split = _data_for_checkpoint(args, args.checkpoint, config.input_size)
    subsets = None if args.subset is None else [args.subset]
    res = trainer.evaluate(params, config, bank, split, args.n, args.seed, subsets, args.threshold)
    if args.out:
        res.write_csv(args.out)
    means = {f"iou_subset{k}": f"{v:.4f}" for k, v in res.subset_means.items()}
    summary("eval", n=len(res.rows), **means, mean_iou=f"{res.overall:.4f}")


def cmd_segment(args):
    params, config = _load_model(args.checkpoint)
    size = config.input_size
    try:
        Q = ep.load_image(args.query, size)
        R = ep.load_image(args.reference, size)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read image: {exc}") from None
    A, _ = net.predict(Q[None], R[None], params, config)
    prob = A[0, 0]
    mask = objective.binarize(prob, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask * 255, "L").save(out)
    prob_path = Path(args.prob_out) if args.prob_out else out.with_name(out.stem + "_prob.png")
    Image.fromarray(np.round(prob * 65535).astype(np.uint16)).save(prob_path)
    extra = {}
    if args.truth:
        truth = np.asarray(Image.open(args.truth).convert("L").resize((size, size), Image.NEAREST)) > 127
        extra["iou"] = f"{objective.iou(mask, truth):.4f}"
    summary("segment", mask=out, prob=prob_path, foreground=int(mask.sum()), **extra)


def _levels(mode, magnitude):
    if mode == "scale":
        return list(ep.SCALES)
    return [0.0, 0.5 * magnitude, magnitude]


def cmd_invariance(args):
    params, config = _load_model(args.checkpoint)
    bank, split = _data_for_checkpoint(args, args.checkpoint, config.input_size)
    subsets = list(range(len(split.test_subsets))) if args.subset is None else [args.subset]
    base = trainer.evaluate(params, config, bank, split, args.n, args.seed, subsets, args.threshold)
    base_iou = {r["episode_id"]: r["iou"] for r in base.rows}
    rows, means = [], {}
    for level in _levels(args.mode, args.magnitude):
        if args.mode == "scale":
            fn = lambda r, e, s=level: ep.rescale_reference(r, s)  # noqa: E731
        else:
            ranges = {k: v * level for k, v in ep.AFFINE_RANGES.items()}

            def fn(r, e, ranges=ranges):
                rng = np.random.default_rng([args.seed, *map(int, e.collage.rng_seed)])
                return ep.perturb_reference(r, "affine", rng, ranges=ranges)
        res = trainer.evaluate(params, config, bank, split, args.n, args.seed, subsets,
                               args.threshold, reference_fn=fn)
        for r in res.rows:
            rows.append((r["episode_id"], r["subset"], r["class"], level, r["iou"],
                         base_iou[r["episode_id"]]))
        means[level] = res.overall
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode_id", "subset", "class", "level", "iou", "baseline_iou", "delta"])
        for eid, s, c, level, v, b in rows:
            w.writerow([eid, s, c, f"{level:g}", f"{v:.6f}", f"{b:.6f}", f"{v - b:.6f}"])
    kv = {f"iou@{level:g}": f"{m:.4f}" for level, m in means.items()}
    summary("invariance", mode=args.mode, rows=len(rows), baseline=f"{base.overall:.4f}", **kv)


def gate_similarity(labels, gammas):
    """Mean cosine similarity of gate vectors within and across classes."""
    G = np.asarray(gammas, dtype=np.float64)
    G = G / np.linalg.norm(G, axis=1, keepdims=True)
    sim = G @ G.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra = sim[same & off].mean() if (same & off).any() else float("nan")
    inter = sim[~same].mean() if (~same).any() else float("nan")
    return float(intra), float(inter)


def cmd_export_gates(args):
    params, config = _load_model(args.checkpoint)
    if not config.use_gating:
        raise CommandError("checkpoint was trained without gating; no gate vectors to export")
    bank, split = _data_for_checkpoint(args, args.checkpoint, config.input_size)
    subsets = None if args.subset is None else [args.subset]
    res = trainer.evaluate(params, config, bank, split, args.n, args.seed, subsets)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class"] + [f"g{i}" for i in range(config.metric_channels)])
        for cls, g in res.gammas:
            w.writerow([cls] + [f"{x:.8f}" for x in g])
    intra, inter = gate_similarity([c for c, _ in res.gammas], [g for _, g in res.gammas])
    summary("export-gates", rows=len(res.gammas), channels=config.metric_channels,
            intra_cos=f"{intra:.4f}", inter_cos=f"{inter:.4f}")


def cmd_gradcheck(args):
    config = net.preset(args.preset)
    if args.toy:
        config = trainer.linear_toy_config(config)
    report = trainer.gradcheck(
        config, seed=args.seed, tolerance=args.tolerance, n_samples=args.samples, size=args.size,
        richardson=args.toy, analytic_dtype=np.longdouble if args.toy else np.float64)
    status = "ok" if report.passed else "err"
    summary("gradcheck", status=status, result="PASS" if report.passed else "FAIL",
            max_rel_error=f"{report.max_rel_error:.3e}", checked=report.n_checked, worst=report.worst)
    return 0 if report.passed else 1


# -- parser -----------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="ostr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p._ostr_command = name
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=_default_seed())
        return p

    p = command("synth-data", cmd_synth_data, "write a texture bank and episode dumps")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--phase", choices=["train", "test"], default="train")
    p.add_argument("--subset", type=int, default=0)
    _add_data_flags(p)

    p = command("dump-dirmaps", cmd_dump_dirmaps, "write the eight directional maps as PNG")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--width", type=int)

    p = command("train", cmd_train, "train a model on sampled episodes")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--preset", choices=sorted(net.PRESETS))
    p.add_argument("--no-dirconv", action="store_true")
    p.add_argument("--no-gating", action="store_true")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--clip-norm", type=float, help="global gradient-norm ceiling (0 = off)")
    _add_data_flags(p)

    p = command("eval", cmd_eval, "evaluate a checkpoint on held-out subsets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=240)
    p.add_argument("--subset", type=int)
    p.add_argument("--threshold", type=_check_threshold, default=0.5)
    p.add_argument("--out", help="per-episode metrics CSV")
    _add_data_flags(p)

    p = command("segment", cmd_segment, "segment one query image given a reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="binary mask PNG (0/255)")
    p.add_argument("--prob-out", help="16-bit probability PNG (default: <out>_prob.png)")
    p.add_argument("--threshold", type=_check_threshold, default=0.5)
    p.add_argument("--truth", help="ground-truth mask PNG; prints IoU")

    p = command("invariance", cmd_invariance, "IoU under perturbed references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["affine", "scale"], required=True)
    p.add_argument("--n", type=int, default=240)
    p.add_argument("--subset", type=int)
    p.add_argument("--magnitude", type=float, default=1.0,
                   help="affine mode: fraction of the full parameter ranges at the top level")
    p.add_argument("--threshold", type=_check_threshold, default=0.5)
    p.add_argument("--out", required=True)
    _add_data_flags(p)

    p = command("export-gates", cmd_export_gates, "export per-episode gate vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=240)
    p.add_argument("--subset", type=int)
    p.add_argument("--out", required=True)
    _add_data_flags(p)

    p = command("gradcheck", cmd_gradcheck, "finite-difference check of the backward pass")
    p.add_argument("--preset", choices=sorted(net.PRESETS), default="tiny")
    p.add_argument("--toy", action="store_true", help="linear toy config (identity activations, no BN)")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (CommandError, net.CheckpointError, ValueError, OSError, FloatingPointError) as exc:
        summary(args.command, status="err", error=str(exc))
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
