"""Command-line entry point: gen-synth, train, evaluate, ablate."""

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATIONS = {
    "w/o-structure": "s",
    "w/o-relation": "r",
    "w/o-attribute": "a",
    "w/o-visual": "v",
}
SWEEPS = {
    "modality": [("w/o structure", {"ablate": ["s"]}), ("w/o relation", {"ablate": ["r"]}),
                 ("w/o attribute", {"ablate": ["a"]}), ("w/o visual", {"ablate": ["v"]})],
    "distribution": [(d, {"pmf.distribution": d})
                     for d in ("beta", "cauchy", "gamma", "gumbel", "laplace")],
    "pivot": [(p, {"pmf.pivot": p}) for p in ("attribute", "relation", "visual", "structural")],
}

log = logging.getLogger("mimea")


def _limit_threads(n):
    # only effective before the BLAS library is loaded
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="INI-style config file ([pmf] lambda = 0.1, ...)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed-ratio", type=float)
    p.add_argument("--optimizer", choices=["adamw", "sgd"])
    p.add_argument("--distribution", choices=["beta", "cauchy", "gamma", "gumbel", "laplace"])
    p.add_argument("--pivot", choices=["structural", "relation", "attribute", "visual"])
    p.add_argument("--patience", type=int, help="early-stopping patience in evaluations (0 = off)")
    p.add_argument("--no-iterative", action="store_true", help="disable probation pseudo-labeling")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                   help="drop a modality; repeatable")
    p.add_argument("--bidirectional", action="store_true", help="pool both ranking directions")
    p.add_argument("--full-scale", action="store_true",
                   help="d=400, lr=5e-4, batch 512, 1000 epochs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. otma.epsilon=0.1")


def build_parser():
    parser = argparse.ArgumentParser(prog="mimea", description="Multi-modal entity alignment.")
    parser.add_argument("--threads", type=int, default=0, help="cap BLAS threads")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write a synthetic KG pair")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dv", type=int, default=16, help="visual feature width")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train and write checkpoint + metric log")
    _add_train_flags(t)
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("evaluate", help="score a trained run on its test pairs")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--checkpoint", help="defaults to <run>/model.ckpt")
    e.add_argument("--bidirectional", action="store_true")

    a = sub.add_parser("ablate", help="sweep modality removal, distribution or pivot")
    _add_train_flags(a)
    a.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
    a.add_argument("--out", help="write the report as JSON here")
    return parser


def resolve_config(args, extra=None):
    """Defaults < full-scale preset < config file < flags < --set < ``extra``."""
    from .config import FULL_SCALE_DEFAULTS, TrainConfig, apply_overrides, read_config_file

    cfg = TrainConfig()
    if args.full_scale:
        apply_overrides(cfg, FULL_SCALE_DEFAULTS)
    if args.config:
        apply_overrides(cfg, read_config_file(args.config))
    flags = {"seed": args.seed, "dim": args.dim, "lr": args.lr, "epochs": args.epochs,
             "batch_size": args.batch_size, "seed_ratio": args.seed_ratio,
             "optimizer": args.optimizer, "pmf.distribution": args.distribution,
             "pmf.pivot": args.pivot, "patience": args.patience}
    apply_overrides(cfg, {k: v for k, v in flags.items() if v is not None})
    if args.no_iterative:
        cfg.iterative = False
    if args.bidirectional:
        cfg.bidirectional = True
    drop = {ABLATIONS[a] for a in args.ablate}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            from .errors import ConfigError
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        apply_overrides(cfg, {key.strip(): value.strip()})
    extra = dict(extra or {})
    drop |= set(extra.pop("ablate", []))
    apply_overrides(cfg, extra)
    if drop:
        cfg.mcl.modalities = tuple(k for k in cfg.mcl.modalities if k not in drop)
    return cfg.validate()


def _load(data_dir, cfg):
    from .data import load_kg_pair, split_seeds

    kg1, kg2, seeds = load_kg_pair(data_dir)
    return kg1, kg2, split_seeds(seeds.test_pairs, cfg.seed_ratio, cfg.seed)


def cmd_gen_synth(args):
    from .data import gen_synthetic_pair, write_kg_pair

    kg1, kg2, seeds = gen_synthetic_pair(args.n, d_v=args.dv, noise=args.noise, seed=args.seed)
    out = write_kg_pair(args.out, kg1, kg2, sorted(seeds.all_pairs))
    print(out)
    return EXIT_OK


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .data import fingerprint
    from .trainer import train

    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "data": str(Path(args.data).resolve()),
        "fingerprints": fingerprint(args.data),
        "seed": cfg.seed,
        "git": _git_describe(),
        "out": str(out.resolve()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    kg1, kg2, seeds = _load(args.data, cfg)
    result = train(kg1, kg2, seeds, cfg, log_path=out / "metrics.jsonl")
    save_checkpoint(out / "model.ckpt", result.model.state(), cfg.digest())
    final = result.history[-1]
    print(json.dumps({k: final[k] for k in ("epoch", "mrr", "hits1", "hits10") if k in final}))
    return EXIT_OK


def format_table(rows, label="model"):
    width = max([len(label)] + [len(r[0]) for r in rows])
    lines = [f"{label:<{width}}  {'MRR':>6}  {'H@1':>6}  {'H@10':>6}"]
    for name, m in rows:
        lines.append(f"{name:<{width}}  {m['mrr']:6.3f}  {m['hits1']:6.3f}  {m['hits10']:6.3f}")
    return "\n".join(lines)


def cmd_evaluate(args):
    from .checkpoint import load_checkpoint
    from .config import TrainConfig
    from .errors import DataError
    from .model import MimeaModel
    from .trainer import evaluate

    run = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "model.ckpt"
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    manifest_path = run / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    digest, arrays = load_checkpoint(ckpt)
    if digest != cfg.digest():
        raise DataError(f"{ckpt} was written under a different config than {manifest_path}")
    kg1, kg2, seeds = _load(manifest["data"], cfg)
    model = MimeaModel(kg1, kg2, cfg)
    model.load_state(arrays)
    res = evaluate(model, seeds.test_pairs, args.bidirectional or cfg.bidirectional)
    metrics = res.as_dict()
    print(format_table([("MIMEA", metrics)]))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args):
    from .trainer import train

    rows = []
    for name, extra in SWEEPS[args.sweep]:
        cfg = resolve_config(args, extra)
        kg1, kg2, seeds = _load(args.data, cfg)
        final = train(kg1, kg2, seeds, cfg).history[-1]
        rows.append((name, {k: final[k] for k in ("mrr", "hits1", "hits10")}))
        log.info("%s: mrr %.4f", name, final["mrr"])
    print(format_table(rows, label=args.sweep))
    report = [{"variant": name, **m} for name, m in rows]
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"gen-synth": cmd_gen_synth, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    level = os.environ.get("MIMEA_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        parser.error(f"MIMEA_LOG must be error, info or debug, got {level.lower()!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    from .errors import ConfigError, DataError, NumericError

    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"mimea: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"mimea: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mimea: numeric failure: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out and Path(out).is_dir():
            (Path(out) / "divergence.json").write_text(json.dumps(exc.state, indent=2) + "\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
