"""Command-line front end: ``wdis <subcommand> [--config PATH] [--out DIR] [--seed N]``.

Failures exit nonzero and print one JSON object ``{"error": {"code", "message"}}``
on stderr. Metrics files are deterministic given config and seed; wall-clock
timestamps go to ``run_info.json`` only.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import guide, models, ot, probe, synth
from .checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import BackgroundSource, ConfigError, ForegroundSource, RunConfig, config_from_dict, parse_config
from .trainer import TrainingAborted, run_training

log = logging.getLogger("wdis")

EXIT_CODES = {
    "INTERNAL_ERROR": 1,
    "CONFIG_INVALID": 2,
    "CONFIG_NOT_FOUND": 2,
    "DATASET_NOT_FOUND": 3,
    "CHECKPOINT_NOT_FOUND": 3,
    "INPUT_NOT_FOUND": 3,
    "DATASET_CORRUPT": 4,
    "CHECKPOINT_CORRUPT": 4,
    "TRAINING_ABORTED": 5,
    "BACKEND_FAILED": 6,
}

# dataset split name -> stream id under the run seed
SPLITS = {"train": 1, "val": 2, "corr_train": 3, "corr_val": 4, "anticorr_val": 5}
VARIANT_FILES = {"wdis": "wdis.ckpt", "baseline": "baseline.ckpt"}
DEFAULT_FOREGROUNDS = [
    ForegroundSource("otter", "freshwater carnivorous mammal having webbed and clawed feet and dark brown fur"),
    ForegroundSource("thatch", "a house roof made with a plant material (as straw)"),
]


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# file helpers


def write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path: Path, code: str = "INPUT_NOT_FOUND"):
    if not path.exists():
        raise CLIError(code, f"{path} does not exist")
    return json.loads(path.read_text(encoding="utf-8"))


def provenance(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "config": cfg.to_dict()}


# --------------------------------------------------------------------------
# context


class Context:
    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    def dataset_path(self, split: str) -> Path:
        if split == "train" and self.cfg.dataset:
            return Path(self.cfg.dataset)
        return self.data_dir / f"{split}.bin"

    def load_dataset(self, split: str) -> synth.SynthDataset:
        path = self.dataset_path(split)
        if not path.exists() or not Path(str(path) + ".json").exists():
            raise CLIError("DATASET_NOT_FOUND", f"dataset {path} not found (run gen-data first)")
        try:
            return synth.SynthDataset.load(path)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CLIError("DATASET_CORRUPT", f"{path}: {exc}") from exc

    def checkpoint_path(self, variant: str) -> Path:
        return self.out / "checkpoints" / VARIANT_FILES[variant]

    def load_checkpoint(self, variant: str):
        path = self.checkpoint_path(variant)
        if not path.exists():
            raise CLIError("CHECKPOINT_NOT_FOUND", f"checkpoint {path} not found (run train first)")
        try:
            return load_checkpoint(path)
        except CheckpointError as exc:
            raise CLIError("CHECKPOINT_CORRUPT", f"{path}: {exc}") from exc

    def features(self, variant: str, x: np.ndarray) -> np.ndarray:
        state, tcfg, _ = self.load_checkpoint(variant)
        z_fg, z_bg = models.extract(state.params, x, tcfg.architecture())
        return np.concatenate([z_fg, z_bg], axis=1)

    def probe_params(self) -> dict:
        p = self.cfg.probe
        return {"lr": p.lr, "steps": p.steps, "batch_size": p.batch_size}


def _pairing(cfg: RunConfig) -> dict[int, int]:
    d = cfg.data
    if d.pairing is None:
        return synth.default_pairing(d.n_fg, d.n_bg)
    return {int(k): int(v) for k, v in d.pairing.items()}


def _correlation(cfg: RunConfig, kind: str) -> synth.CorrelationSpec:
    d = cfg.data
    if kind == "unbiased":
        return synth.CorrelationSpec.unbiased(d.n_fg, d.n_bg)
    if kind == "corr":
        return synth.CorrelationSpec.corr(_pairing(cfg), d.n_fg, d.n_bg)
    return synth.CorrelationSpec.anticorr(_pairing(cfg), d.n_fg, d.n_bg)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(ctx: Context, args) -> dict:
    cfg, d = ctx.cfg, ctx.cfg.data
    spec = synth.FactorSpec(d.n_fg, d.n_bg, d.d_x, d.gamma, d.sigma, cfg.seed)
    plan = {
        "train": (d.correlation, d.n_train, d.missing_bg_fraction),
        "val": ("unbiased", d.n_val, 0.0),
        "corr_train": ("corr", d.n_corr_train, 0.0),
        "corr_val": ("corr", d.n_corr_val, 0.0),
        "anticorr_val": ("anticorr", d.n_corr_val, 0.0),
    }
    summary = {}
    for split, (kind, n, missing) in plan.items():
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(100 + SPLITS[split],)))
        ds = synth.make_dataset(spec, _correlation(cfg, kind), n, rng, missing)
        ds.provenance.update({"split": split, **provenance(cfg)})
        ds.save(ctx.data_dir / f"{split}.bin")
        summary[split] = {"n": n, "correlation": kind}
    return {"datasets": summary}


def cmd_train(ctx: Context, args) -> dict:
    cfg = ctx.cfg
    variant = "baseline" if args.baseline else "wdis"
    tcfg = cfg.train_config(adversarial=not args.baseline)
    data = ctx.load_dataset("train")
    if data.x.shape[1] != tcfg.d_x:
        raise CLIError("CONFIG_INVALID", f"dataset has {data.x.shape[1]} features but data.d_x is {tcfg.d_x}")
    state = None
    if args.resume:
        state, saved_cfg, _ = ctx.load_checkpoint(variant)
        if saved_cfg.to_dict() != tcfg.to_dict():
            raise CLIError("CONFIG_INVALID", "checkpoint was written with a different training configuration")
    metrics_name = "metrics.jsonl" if variant == "wdis" else "metrics_baseline.jsonl"
    started = time.time()
    try:
        state = run_training(tcfg, data.x, data.labels, state=state, iterations=args.iterations)
    except TrainingAborted as exc:
        if exc.last_good is not None:
            save_checkpoint(ctx.checkpoint_path(variant), exc.last_good, tcfg, provenance(cfg))
        raise CLIError("TRAINING_ABORTED", str(exc)) from exc
    save_checkpoint(ctx.checkpoint_path(variant), state, tcfg, provenance(cfg))
    lines = [json.dumps({"type": "header", "variant": variant, **provenance(cfg)}, sort_keys=True)]
    lines += [json.dumps({"type": "snapshot", **rec}, sort_keys=True) for rec in state.history]
    write_text(ctx.out / metrics_name, "\n".join(lines) + "\n")
    write_json(
        ctx.out / f"run_info_{variant}.json",
        {"started": started, "finished": time.time(), "duration_s": time.time() - started},
    )
    final = state.history[-1] if state.history else None
    return {"variant": variant, "iteration": state.iteration, "final": final}


def _probe_results(ctx: Context, variant: str) -> dict:
    cfg, d = ctx.cfg, ctx.cfg.data
    train, val = ctx.load_dataset("train"), ctx.load_dataset("val")
    z_train, z_val = ctx.features(variant, train.x), ctx.features(variant, val.x)
    split = cfg.train.split
    report = probe.probe_grid(
        z_train, train.fg, train.bg, z_val, val.fg, val.bg, split, d.n_fg, d.n_bg, ctx.probe_params(), cfg.seed
    )
    mi = {
        "z_fg_l_bg": ot.binned_mi(z_val[:, :split], val.bg, cfg.probe.n_anchors),
        "z_bg_l_fg": ot.binned_mi(z_val[:, split:], val.fg, cfg.probe.n_anchors),
    }
    return {"variant": variant, "probe_grid": report.accuracies, "top5": report.top5, "binned_mi": mi}


def cmd_probe(ctx: Context, args) -> dict:
    result = _probe_results(ctx, args.variant)
    name = "probe.json" if args.variant == "wdis" else "probe_baseline.json"
    write_json(ctx.out / name, {**result, **provenance(ctx.cfg)})
    return result


def cmd_corr_exp(ctx: Context, args) -> dict:
    cfg, d = ctx.cfg, ctx.cfg.data
    splits = {name: ctx.load_dataset(name) for name in ("corr_train", "corr_val", "anticorr_val", "val")}
    feats = {}
    for variant, source in (("correct", "wdis"), ("all", "wdis"), ("baseline", "baseline")):
        feats[variant] = tuple(ctx.features(source, splits[s].x) for s in ("corr_train", "corr_val", "anticorr_val", "val"))
    labels = {
        "corr_train": (splits["corr_train"].fg, splits["corr_train"].bg),
        "corr_val": (splits["corr_val"].fg, splits["corr_val"].bg),
        "anticorr_val": (splits["anticorr_val"].fg, splits["anticorr_val"].bg),
        "unbiased_val": (splits["val"].fg, splits["val"].bg),
    }
    table = probe.corr_experiment(feats, labels, cfg.train.split, d.n_fg, d.n_bg, ctx.probe_params(), cfg.seed)
    write_text(ctx.out / "corr_exp.csv", table.to_csv())
    write_json(ctx.out / "corr_exp.json", {"table": table.to_dict(), "pairing": _pairing(cfg), **provenance(cfg)})
    return {"table": table.to_dict()}


def cmd_oracle_check(ctx: Context, args) -> dict:
    cfg, o = ctx.cfg, ctx.cfg.oracle
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(200,)))
    agreement = []
    for n in range(1, 7):
        p = ot.DiscreteDistribution.uniform(rng.normal(size=(n, o.dim)))
        q = ot.DiscreteDistribution.uniform(rng.normal(size=(n, o.dim)))
        exact, brute = ot.exact_w1(p, q), ot.brute_force_w1(p, q)
        agreement.append({"n": n, "exact": exact, "brute_force": brute, "equal": bool(exact == brute)})
    pairs = []
    for k in range(o.n_pairs):
        p, q = ot.shifted_cloud_pair(rng, o.n_points, o.dim, o.separation)
        _, critic = ot.fit_dual_critic(p, q, steps=o.steps, lam=o.lam, lr=o.lr, seed=cfg.seed + k)
        gap = ot.dual_gap(critic, p, q)
        rel = abs(gap.gap) / gap.exact if gap.exact > 0 else 0.0
        pairs.append({**gap.to_dict(), "relative_error": rel})
    report = {"assignment_vs_flow": agreement, "dual_pairs": pairs, **provenance(cfg)}
    write_json(ctx.out / "oracle.json", report)
    return {"assignment_vs_flow": agreement, "dual_pairs": pairs}


def _synthetic_image(rng: np.random.Generator, width: int, height: int) -> guide.RGBImage:
    """Smooth two-colour gradient, used when no image file is configured."""
    a, b = rng.integers(0, 256, size=(2, 3))
    t = np.linspace(0.0, 1.0, width)[None, :, None]
    arr = np.broadcast_to(np.rint(a + (b - a) * t), (height, width, 3))
    return guide.RGBImage.from_array(arr.astype(np.uint8))


def cmd_compose_guides(ctx: Context, args) -> dict:
    cfg, g = ctx.cfg, ctx.cfg.guide
    backend_spec = args.backend or g.backend
    try:
        backend = guide.backend_from_spec(backend_spec, g.timeout)
    except ValueError as exc:
        raise CLIError("CONFIG_INVALID", str(exc)) from exc
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(300,)))
    fgs = g.foregrounds or DEFAULT_FOREGROUNDS
    bgs = g.backgrounds or [BackgroundSource(phrase) for phrase in guide.BACKGROUNDS]

    def load(path, w, h):
        if path is None:
            return _synthetic_image(rng, w, h)
        if not Path(path).exists():
            raise CLIError("INPUT_NOT_FOUND", f"image {path} not found")
        return guide.read_p6(path)

    requests, rects = [], []
    for i in range(g.n_guides):
        fg_src = fgs[int(rng.integers(len(fgs)))]
        bg_src = bgs[int(rng.integers(len(bgs)))]
        fg_img, bg_img = load(fg_src.path, 48, 48), load(bg_src.path, 96, 64)
        scale = float(rng.uniform(g.scale_min, g.scale_max))
        composite, rect = guide.compose_guide(fg_img, bg_img, scale, rng)
        prompt = guide.build_prompt(guide.PromptSpec(fg_src.label, fg_src.definition, bg_src.phrase))
        requests.append(guide.BackendRequest(prompt, composite, g.strength, int(rng.integers(2**31)), i))
        rects.append({"scale": scale, "rect": rect.to_dict()})
    try:
        results = guide.generate_many(requests, backend, max_workers=g.max_workers, retries=g.retries)
    except guide.BackendError as exc:
        raise CLIError("BACKEND_FAILED", str(exc)) from exc
    lines = []
    for req, (image, prov), placement in zip(requests, results, rects):
        atomic_write_bytes(ctx.out / "guides" / f"guide_{req.request_id:04d}.ppm", guide.encode_p6(req.guide))
        atomic_write_bytes(ctx.out / "images" / f"image_{req.request_id:04d}.ppm", guide.encode_p6(image))
        lines.append(json.dumps({**prov, **placement, "backend": backend_spec}, sort_keys=True))
    header = json.dumps({"type": "header", **provenance(cfg)}, sort_keys=True)
    write_text(ctx.out / "guides" / "provenance.jsonl", "\n".join([header, *lines]) + "\n")
    return {"n_guides": len(requests), "backend": backend_spec}


def cmd_report(ctx: Context, args) -> dict:
    cfg = ctx.cfg
    metrics_path = ctx.out / "metrics.jsonl"
    if not metrics_path.exists():
        raise CLIError("INPUT_NOT_FOUND", f"{metrics_path} not found (run train first)")
    records = [json.loads(line) for line in metrics_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    snapshots = [r for r in records if r.get("type") == "snapshot"]
    probe_doc = read_json(ctx.out / "probe.json")
    grid = {key: probe_doc["probe_grid"][key] for key in probe.GRID}
    summary = {
        "training": {
            "n_snapshots": len(snapshots),
            "final": snapshots[-1] if snapshots else None,
        },
        "probe_grid": grid,
        "top5": probe_doc.get("top5", {}),
        "binned_mi": probe_doc.get("binned_mi", {}),
    }
    base_path = ctx.out / "probe_baseline.json"
    if base_path.exists():
        base = read_json(base_path)
        summary["baseline"] = {"probe_grid": base["probe_grid"], "binned_mi": base["binned_mi"]}
    corr_path = ctx.out / "corr_exp.json"
    if corr_path.exists():
        summary["corr_exp"] = read_json(corr_path)["table"]
    write_json(ctx.out / "report.json", {**summary, **provenance(cfg)})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["probe", "accuracy"])
    for key, value in grid.items():
        writer.writerow([key, repr(value)])
    write_text(ctx.out / "report.csv", buf.getvalue())
    return summary


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "corr-exp": cmd_corr_exp,
    "oracle-check": cmd_oracle_check,
    "compose-guides": cmd_compose_guides,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    common.add_argument("--out", help="output directory (default: $WDIS_OUT or ./wdis_out)")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wdis", description="Wasserstein feature disentanglement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic train/val/corr/anticorr datasets")
    p = sub.add_parser("train", parents=[common], help="train the extractor (or the cross-entropy baseline)")
    p.add_argument("--baseline", action="store_true", help="train with foreground cross-entropy only")
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    p.add_argument("--iterations", type=int, help="run this many iterations instead of the configured total")
    p = sub.add_parser("probe", parents=[common], help="linear-probe grid on frozen features")
    p.add_argument("--variant", choices=sorted(VARIANT_FILES), default="wdis")
    sub.add_parser("corr-exp", parents=[common], help="spurious-correlation probe table")
    sub.add_parser("oracle-check", parents=[common], help="exact-OT and dual-critic checks (JSON on stdout)")
    p = sub.add_parser("compose-guides", parents=[common], help="compose guide images and call the backend")
    p.add_argument("--backend", help="identity or remote:<url>")
    sub.add_parser("report", parents=[common], help="aggregate metrics and probe results")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        if not Path(args.config).exists():
            raise CLIError("CONFIG_NOT_FOUND", f"config {args.config} not found")
        cfg = parse_config(args.config)
    else:
        cfg = config_from_dict({})
    if args.seed is not None:
        cfg = config_from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out or cfg.out_dir or os.environ.get("WDIS_OUT") or "wdis_out")
        result = COMMANDS[args.command](Context(cfg, out), args)
    except CLIError as exc:
        return _fail(exc.code, str(exc))
    except ConfigError as exc:
        return _fail("CONFIG_INVALID", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort report in the stable format
        log.debug("unhandled error", exc_info=True)
        return _fail("INTERNAL_ERROR", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"ok": True, "command": args.command, "result": result}, sort_keys=True))
    return 0


def _fail(code: str, message: str) -> int:
    print(json.dumps({"error": {"code": code, "message": message}}, sort_keys=True), file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
