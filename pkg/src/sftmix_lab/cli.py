"""``sftmix-lab``: data generation, training, dynamics, split, eval and reports.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .corpus import FAMILIES, CorpusSpec, family_counts, generate_corpus, read_jsonl, write_jsonl
from .errors import SFTMixError
from .trainer import Recipe, TrainConfig, train

log = logging.getLogger("sftmix_lab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_MUS = (0.1, 0.2, 0.5)


class UsageError(Exception):
    pass


def _env_seed() -> int | None:
    raw = os.environ.get("SFTMIX_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SFTMIX_SEED must be an integer, got {raw!r}") from None


def _dump(obj, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- gen-data -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .evalreport import HELDOUT_SIZE, heldout_spec

    fractions = json.loads(args.fractions) if args.fractions else None
    seed = args.seed if args.seed is not None else _env_seed()
    kw = {
        "num_examples": None if args.heldout else args.num,
        "family_fractions": fractions,
        "alphabet_size": args.alphabet,
        "min_len": args.min_len,
        "max_len": args.max_len,
        "seed": seed,
        "map_seed": args.map_seed,
    }
    spec = CorpusSpec(**{k: v for k, v in kw.items() if v is not None})
    if args.heldout:
        spec = heldout_spec(spec, size=args.num or HELDOUT_SIZE)
    examples = generate_corpus(spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(examples, args.out)
    counts = family_counts(spec)
    print(f"wrote {len(examples)} examples to {args.out} (seed {spec.seed})")
    for f in FAMILIES:
        if f in counts:
            print(f"  {f:<10} {counts[f]}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------


def resolve_train_config(args) -> TrainConfig:
    """Defaults < JSON config file < flags; the seed falls back to SFTMIX_SEED."""
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = TrainConfig.from_dict(base)
    if "seed" not in base:
        env = _env_seed()
        if env is not None:
            cfg = replace(cfg, seed=env)
    flags = {
        "recipe": args.recipe,
        "seed": args.seed,
        "mu": args.mu,
        "alpha": args.alpha,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
        "warmup_ratio": args.warmup,
        "checkpoint_count": args.checkpoints,
        "reduction": args.reduction,
        "grad_clip": args.grad_clip,
    }
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    model_flags = {
        "d_model": args.d_model,
        "n_layers": args.layers,
        "n_heads": args.heads,
        "d_ff": args.d_ff,
        "max_seq_len": args.max_seq_len,
        "init_seed": args.init_seed,
    }
    model_flags = {k: v for k, v in model_flags.items() if v is not None}
    if model_flags:
        cfg = replace(cfg, model=replace(cfg.model, **model_flags))
    return replace(cfg, data_path=args.data, split_path=args.split, out_dir=args.out)


def cmd_train(args) -> int:
    from .dynamics import read_split

    cfg = resolve_train_config(args)
    recipe = Recipe.parse(cfg.recipe)
    if recipe.needs_split and not cfg.split_path:
        raise UsageError(
            f"recipe {recipe.value} pairs confident with unconfident examples and needs "
            "--split (produce one with the dynamics and split commands)"
        )
    data = read_jsonl(cfg.data_path)
    split = read_split(cfg.split_path) if cfg.split_path else None
    res = train(cfg, data, split=split, out_dir=cfg.out_dir)
    last = res.metrics[-1]
    print(
        f"{recipe.value}: {len(res.metrics)} steps, final loss {last['loss_total']:.4f}, "
        f"{len(res.checkpoint_steps)} checkpoints in {cfg.out_dir}"
    )
    return EXIT_OK


# -- dynamics / split ------------------------------------------------------------------


def _require_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"run directory {path} does not exist")
    return p


def cmd_dynamics(args) -> int:
    from .dynamics import compute_confidence, write_confidence
    from .trainer import load_run_params

    run = _require_dir(args.run)
    params = load_run_params(run)
    data = read_jsonl(args.data)
    records = compute_confidence(params, data)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_confidence(records, args.out)
    print(f"wrote confidence for {len(records)} examples over {len(params)} checkpoints to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .dynamics import read_confidence, split, write_split

    s = split(read_confidence(args.confidence))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_split(s, args.out)
    print(f"confident {len(s.confident_ids)}, unconfident {len(s.unconfident_ids)} -> {args.out}")
    return EXIT_OK


# -- eval / report -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .evalreport import evaluate, write_eval
    from .trainer import final_params

    run = _require_dir(args.run)
    result = evaluate(final_params(run), read_jsonl(args.data))
    out = Path(args.out) if args.out else run / "eval.json"
    write_eval(result, out)
    ppl = result["perplexity"]
    acc = result["accuracy"]
    print(f"held-out perplexity {ppl['overall']:.4f}")
    for f, v in ppl["per_family"].items():
        a = acc["per_family"].get(f)
        print(f"  {f:<10} ppl {v:8.4f}  acc {'-' if a is None else f'{a:.4f}'}")
    return EXIT_OK


def _split_list(raw: str) -> list[str]:
    return [x for x in (s.strip() for s in raw.split(",")) if x]


def cmd_report(args) -> int:
    from .evalreport import compare_recipes, render_table
    from .plotting import plot_loss_curves, plot_perplexity_bars
    from .trainer import read_metrics

    runs = _split_list(args.runs)
    for r in runs:
        _require_dir(r)
    names = _split_list(args.names) if args.names else None
    report = compare_recipes(runs, names)
    out = Path(args.out)
    _dump(report, out)
    print(render_table(report))
    figs = out.parent
    plot_loss_curves({r["name"]: read_metrics(r["run_dir"]) for r in report["rows"]},
                     figs / f"{out.stem}_loss.png")
    plot_perplexity_bars(report, figs / f"{out.stem}_perplexity.png")
    bad = [r["name"] for r in report["rows"] if not r["consistent"]]
    if bad:
        print(f"logged total != NTP + mu * Mixup for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- check -----------------------------------------------------------------------------


def cmd_check(args) -> int:
    from .checks import SUITES, run_checks

    names = _split_list(args.only) if args.only else None
    unknown = sorted(set(names or []) - set(SUITES))
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; choose from {sorted(SUITES)}")
    results = run_checks(names)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  ({r.detail})")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


# -- extras: composition, embeddings, mu sweep -------------------------------------------


def cmd_composition(args) -> int:
    from .dynamics import read_split
    from .evalreport import confidence_composition
    from .plotting import plot_composition

    comp = confidence_composition(read_split(args.split), read_jsonl(args.data))
    out = Path(args.out)
    _dump(comp, out)
    plot_composition(comp, out.with_suffix(".png"))
    print(f"{'family':<10} {'confident':>10} {'unconfident':>12} {'share conf.':>12}")
    for f, share in comp["share_in_confident"].items():
        c = comp["fractions"]["confident"][f]
        u = comp["fractions"]["unconfident"][f]
        print(f"{f:<10} {c:10.3f} {u:12.3f} {share:12.3f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .checkpoint import load_checkpoint
    from .dynamics import export_embeddings, write_embeddings
    from .trainer import list_checkpoints

    run = _require_dir(args.run)
    files = list_checkpoints(run)
    k = len(files) if args.checkpoint == -1 else args.checkpoint
    if not 1 <= k <= len(files):
        raise UsageError(f"--checkpoint must be in 1..{len(files)} or -1")
    params = load_checkpoint(files[k - 1]).params
    rows = export_embeddings(params, read_jsonl(args.data))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(rows, args.out)
    print(f"wrote {len(rows)} final-token embeddings to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .dynamics import read_split
    from .evalreport import compare_recipes, evaluate, render_table, write_eval

    mus = [float(m) for m in _split_list(args.mus)]
    data = read_jsonl(args.data)
    split = read_split(args.split)
    heldout = read_jsonl(args.heldout)
    root = Path(args.out)
    dirs = []
    for mu in mus:
        seed = args.seed if args.seed is not None else (_env_seed() or 0)
        cfg = TrainConfig(recipe="sftmix", mu=mu, seed=seed, data_path=args.data,
                          split_path=args.split)
        if args.epochs is not None:
            cfg = replace(cfg, epochs=args.epochs)
        run = root / f"sftmix_mu{mu:g}"
        cfg = replace(cfg, out_dir=str(run))
        res = train(cfg, data, split=split, out_dir=run)
        write_eval(evaluate(res.params, heldout), run / "eval.json")
        dirs.append(run)
    report = compare_recipes(dirs, [f"mu={m:g}" for m in mus])
    _dump(report, root / "sweep.json")
    print(render_table(report))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sftmix-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic instruction corpus (JSONL)")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=None, help="number of examples (even; default 2048)")
    g.add_argument("--seed", type=int, default=None, help="corpus seed (default 7)")
    g.add_argument("--fractions", default=None, help='JSON, e.g. {"copy": 0.5, "noisy": 0.5}')
    g.add_argument("--alphabet", type=int, default=None)
    g.add_argument("--min-len", type=int, default=None)
    g.add_argument("--max-len", type=int, default=None)
    g.add_argument("--map-seed", type=int, default=None, help="seed of the const_map substitution")
    g.add_argument("--heldout", action="store_true",
                   help="write the held-out companion of the corpus these flags describe")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one recipe")
    t.add_argument("--recipe", choices=[r.value for r in Recipe], default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default=None)
    t.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--mu", type=float, default=None)
    t.add_argument("--alpha", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--weight-decay", type=float, default=None)
    t.add_argument("--warmup", type=float, default=None)
    t.add_argument("--checkpoints", type=int, default=None)
    t.add_argument("--reduction", choices=["mean", "sum"], default=None)
    t.add_argument("--grad-clip", type=float, default=None)
    t.add_argument("--d-model", type=int, default=None)
    t.add_argument("--layers", type=int, default=None)
    t.add_argument("--heads", type=int, default=None)
    t.add_argument("--d-ff", type=int, default=None)
    t.add_argument("--max-seq-len", type=int, default=None)
    t.add_argument("--init-seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("dynamics", help="per-example perplexity across a run's checkpoints")
    d.add_argument("--run", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dynamics)

    s = sub.add_parser("split", help="split a confidence file into equal halves")
    s.add_argument("--confidence", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    e = sub.add_parser("eval", help="held-out perplexity and exact-match accuracy")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None, help="default: <run>/eval.json")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="compare evaluated runs")
    r.add_argument("--runs", required=True, help="comma-separated run directories")
    r.add_argument("--names", default=None, help="comma-separated row names")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("check", help="run the numeric verification suites")
    c.add_argument("--only", default=None, help="comma-separated suite names")
    c.set_defaults(func=cmd_check)

    cp = sub.add_parser("composition", help="task-family make-up of each confidence half")
    cp.add_argument("--split", required=True)
    cp.add_argument("--data", required=True)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_composition)

    em = sub.add_parser("embed", help="export final-token hidden states")
    em.add_argument("--run", required=True)
    em.add_argument("--data", required=True)
    em.add_argument("--out", required=True)
    em.add_argument("--checkpoint", type=int, default=-1, help="1-based index; -1 = last")
    em.set_defaults(func=cmd_embed)

    sw = sub.add_parser("sweep", help="train and evaluate SFTMix over several mu values")
    sw.add_argument("--data", required=True)
    sw.add_argument("--split", required=True)
    sw.add_argument("--heldout", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--mus", default=",".join(f"{m:g}" for m in SWEEP_MUS))
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--epochs", type=int, default=None)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, SFTMixError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"sftmix-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
