"""Command line entry point: ``neatmol {train,sample,complete,eval,split-demo,toy-gen}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("neatmol")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _require_file(path: str | None, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _set_threads(n: int | None) -> None:
    # only effective before numpy's BLAS initialises, i.e. when run as a program
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _parse_overrides(extra: list[str]) -> dict:
    from .trainer import TrainConfig
    from dataclasses import fields

    known = {f.name for f in fields(TrainConfig)}
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        if key not in known:
            raise UsageError(f"unknown option or config key {tok!r}")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_toy_gen(args) -> int:
    from .toy import ToySpec, generate_toy_corpus, write_corpus

    spec = ToySpec(max_heavy_atoms=args.max_heavy, count=args.n, seed=args.seed)
    paths = write_corpus(generate_toy_corpus(spec), args.out)
    print(f"wrote {len(paths)} molecules to {args.out}")
    return EXIT_OK


def cmd_split_demo(args) -> int:
    import numpy as np

    from .chem import ingest_dataset
    from .sampler import SamplerConfig, split_statistics
    from .toy import ToySpec, generate_toy_corpus

    if args.data:
        ds = ingest_dataset(_require_file(args.data, "data directory"))
        graphs, eccs = ds.graphs, ds.eccentricities
    else:
        graphs, eccs = generate_toy_corpus(ToySpec(count=50, seed=args.seed)), None
    stats = split_statistics(graphs, SamplerConfig(args.beta, args.gamma), args.n, np.random.default_rng(args.seed), eccs)
    edges, src, tgt = stats.histogram(args.bins)
    rows = ["bin_lo,bin_hi,source_count,target_count"]
    rows += [f"{edges[k]:.4f},{edges[k + 1]:.4f},{src[k]},{tgt[k]}" for k in range(args.bins)]
    text = "\n".join(rows) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        out.with_name(out.stem + "_draws.csv").write_text(stats.to_csv())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    from .chem import ingest_dataset
    from .trainer import TrainConfig, load_config, train

    cfg = load_config(_require_file(args.config, "config file")) if args.config else TrainConfig()
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.replace(**overrides)
    ds = ingest_dataset(_require_file(args.data, "data directory"))
    if not ds.graphs:
        raise RuntimeError(f"no usable molecules in {args.data}")
    val = ingest_dataset(_require_file(args.val, "validation directory"), vocab=ds.vocab) if args.val else None
    result = train(cfg, ds.graphs, val.graphs if val else None, args.out, eccs=ds.eccentricities,
                   val_eccs=val.eccentricities if val else None, time_budget=args.time_budget)
    print(f"best validation loss {result.best_val:.6f} at epoch {result.best_epoch}; checkpoint in {args.out}")
    return EXIT_OK


def _gen_config(args):
    from .generator import GenConfig

    return GenConfig(integrator=args.integrator, steps=args.steps, tau=args.tau, max_atoms=args.max_atoms,
                     type_sampling="greedy" if args.greedy else "multinomial", seed=args.seed or 0)


def cmd_sample(args) -> int:
    from .generator import generate, write_results
    from .model import NeatModel

    model, _ = NeatModel.load(_require_file(args.ckpt, "checkpoint"))
    results = generate(model, _gen_config(args), args.n)
    manifest = write_results(results, args.out, model)
    print(f"wrote {len(results)} molecules; manifest {manifest}")
    return EXIT_OK


def cmd_complete(args) -> int:
    from .chem import parse_xyz
    from .generator import complete_prefix, write_results
    from .model import NeatModel

    model, _ = NeatModel.load(_require_file(args.ckpt, "checkpoint"))
    symbols, pos = parse_xyz(_require_file(args.prefix, "prefix file").read_text(encoding="utf-8"))
    if args.prefix_atoms:
        symbols, pos = symbols[:args.prefix_atoms], pos[:args.prefix_atoms]
    try:
        types = model.vocab.encode(symbols)
    except KeyError as exc:
        raise ValueError(f"prefix element not in the model vocabulary: {exc}") from None
    results = complete_prefix(model, types, pos, _gen_config(args), args.n)
    manifest = write_results(results, args.out, model, prefix="complete")
    print(f"wrote {len(results)} completions; manifest {manifest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .chem import BondTable, ingest_dataset, load_generated, molecule_metrics

    table = BondTable.default()
    graphs = load_generated(_require_file(args.inp, "input directory"), table)
    ref = ingest_dataset(_require_file(args.ref, "reference directory"), table).reference_hashes if args.ref else ()
    report = molecule_metrics(graphs, ref, single_bond_reduction=args.single_bond)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neatmol", description="Autoregressive 3D molecule generation with neighbourhood guidance.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        sp.add_argument("--threads", type=int, default=None, help="BLAS worker threads")

    t = sub.add_parser("train", help="train a model; any TrainConfig field is accepted as --key value")
    t.add_argument("--data", required=True, help="directory of .xyz (+ optional .bonds) training files")
    t.add_argument("--val", help="validation directory (default: the training set)")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True, help="output directory for model.ckpt, last.ckpt, train_log.csv")
    t.add_argument("--time-budget", type=float, default=None, help="stop after this many seconds")
    common(t)

    def gen_flags(sp):
        sp.add_argument("--ckpt", required=True, help="checkpoint file")
        sp.add_argument("--n", type=int, default=100, help="number of molecules")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--integrator", choices=("euler", "euler_maruyama"), default="euler")
        sp.add_argument("--steps", type=int, default=60, help="integration steps")
        sp.add_argument("--tau", type=float, default=0.3, help="noise scale for euler_maruyama")
        sp.add_argument("--max-atoms", type=int, default=None, help="atom cap (default: 110%% of training max)")
        sp.add_argument("--greedy", action="store_true", help="argmax atom types instead of sampling")
        common(sp)

    s = sub.add_parser("sample", help="generate molecules to an XYZ directory plus manifest.jsonl")
    gen_flags(s)
    c = sub.add_parser("complete", help="complete a fixed prefix fragment")
    gen_flags(c)
    c.add_argument("--prefix", required=True, help="XYZ file holding the prefix")
    c.add_argument("--prefix-atoms", type=int, default=None, help="use only the first k atoms of the file")

    e = sub.add_parser("eval", help="lookup-pipeline metrics of an XYZ directory as JSON")
    e.add_argument("--in", dest="inp", required=True, help="directory of generated .xyz files")
    e.add_argument("--ref", help="training directory for novelty")
    e.add_argument("--out", help="write the JSON report here as well")
    e.add_argument("--single-bond", action="store_true", help="uniqueness/novelty from the single-bond variant")
    common(e)

    d = sub.add_parser("split-demo", help="histogram CSV of relative source/target sizes")
    d.add_argument("--data", help="directory of molecules (default: a toy corpus)")
    d.add_argument("--n", type=int, default=10000, help="number of splits")
    d.add_argument("--bins", type=int, default=20)
    d.add_argument("--beta", type=float, default=1.5)
    d.add_argument("--gamma", type=float, default=0.45)
    d.add_argument("--out", help="CSV path (default: stdout)")
    common(d)

    g = sub.add_parser("toy-gen", help="write a procedural toy corpus (.xyz + .bonds)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=20, help="number of molecules")
    g.add_argument("--max-heavy", type=int, default=6, help="maximum heavy atoms per molecule")
    common(g)
    return p


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "neatmol: error: a command is required")
        overrides = {}
        if extra:
            if args.command != "train":
                raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
            overrides = _parse_overrides(extra)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _set_threads(args.threads)
    from .trainer import ConfigError

    handlers = {"toy-gen": cmd_toy_gen, "split-demo": cmd_split_demo, "sample": cmd_sample,
                "complete": cmd_complete, "eval": cmd_eval}
    try:
        if args.command == "train":
            return cmd_train(args, overrides)
        if args.seed is None:
            args.seed = 0
        return handlers[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"neatmol {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
