"""Command-line entry point: data generation, training, evaluation and analytics.

Configuration precedence is flags > ``--config`` file > defaults. Every command
echoes the resolved configuration as ``# key = value`` lines before its report,
so a run can be reproduced from its own output.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or malformed dataset/checkpoint), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path


from . import analytics
from .config import MODALITY_NAMES, ConfigError, RunConfig, load_config, modality_index, modality_names
from .model import CheckpointError, NonFiniteError, load_checkpoint
from .numerics import GradCheckError
from .probe import FEATURE_KINDS, probe_report
from .retrieval import RetrievalConfig, evaluate_retrieval, tune_delta
from .synthdata import Dataset, DatasetFormatError, generate, read_dataset, split, write_dataset
from .trainer import fit, model_grad_check

COMMANDS = ("gen-data", "train", "eval-retrieval", "eval-probe", "analyze-uncertainty", "analyze-gap", "diversity-map", "grad-check")
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prom3e", description="Probabilistic masked multimodal embedding model at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=False, checkpoint=False, out=False):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="run seed (overrides the config file)")
        if data:
            p.add_argument("--data", type=Path, required=True, help="dataset file (.pm3e)")
            p.add_argument("--split", default="10,1,1", help="train,val,test proportions (default 10,1,1)")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file (.pm3c)")
        if out:
            p.add_argument("--out", type=Path, help="output path")
        return p

    p = common(sub.add_parser("gen-data", help="generate a synthetic dataset"), out=True)
    p.add_argument("--records", type=int)
    p.add_argument("--species", type=int)
    p.add_argument("--dim", type=int, help="input embedding dim")
    p.add_argument("--modalities", type=int)
    p.add_argument("--diversity-gradient", action="store_true", help="longitude-dependent species mix")

    p = common(sub.add_parser("train", help="train a model on a dataset"), data=True, out=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", type=Path, help="alias for --out")

    p = common(sub.add_parser("eval-retrieval", help="cross-modal retrieval recall@k"), data=True, checkpoint=True)
    p.add_argument("--query", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--tune-delta", action="store_true", help="pick delta on the validation split")

    p = common(sub.add_parser("eval-probe", help="linear species probe on frozen features"), data=True, checkpoint=True)
    p.add_argument("--visible", default="image")
    p.add_argument("--feature-kind", choices=FEATURE_KINDS + ("all",), default="all")

    p = common(sub.add_parser("analyze-uncertainty", help="mean ||sigma||_1 and MSE per visible set"), data=True, checkpoint=True, out=True)
    p.add_argument("--visible", action="append", help="visible set MOD[,MOD]; repeatable (default: all singletons and pairs)")

    p = common(sub.add_parser("analyze-gap", help="modality gap per stage and context"), data=True, checkpoint=True)
    p.add_argument("--pair", default="image,satellite")

    p = common(sub.add_parser("diversity-map", help="gridded Shannon index, richness and location ||sigma||_1"), out=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--grid", default="25x50", help="ROWSxCOLS")
    p.add_argument("--smoothing", type=float, default=2.0)

    p = common(sub.add_parser("grad-check", help="finite-difference check of the training loss"))
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--modalities", type=int, default=3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


# helpers ---------------------------------------------------------------------------


def _resolve(args, base: RunConfig | None = None, **flags) -> RunConfig:
    rc = base if base is not None else RunConfig()
    if args.config is not None:
        rc.update(load_config(args.config))
    overrides = {k: v for k, v in flags.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    rc.update(overrides)
    return rc


def _echo(out, command: str, rc: RunConfig, **extra) -> None:
    out.write(f"# command = {command}\n")
    for k, v in extra.items():
        out.write(f"# {k} = {v}\n")
    for line in rc.to_text().splitlines():
        out.write(f"# {line}\n")


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--split expects three numbers, got {text!r}") from None
    if len(parts) != 3 or any(x <= 0 for x in parts):
        raise UsageError(f"--split expects three positive numbers, got {text!r}")
    total = sum(parts)
    a, b = parts[0] / total, parts[1] / total
    return a, b, 1.0 - a - b


def _splits(args, ds: Dataset, rc: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    return split(ds, _fractions(args.split), seed=rc.train.seed)


def _modality(name: str, count: int) -> int:
    try:
        return modality_index(name.strip(), count)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _visible(text: str, count: int) -> tuple[int, ...]:
    return tuple(sorted({_modality(n, count) for n in text.split(",") if n.strip()}))


def _load_model(args, ds: Dataset):
    params, rc = load_checkpoint(args.checkpoint)
    if params.config.modality_count != ds.modality_count or params.config.d_in != ds.dims[0]:
        raise DatasetFormatError("checkpoint and dataset disagree on modality count or dimension")
    return params, _resolve(args, rc)


# commands ------------------------------------------------------------------------------


def cmd_gen_data(args, out) -> int:
    rc = _resolve(args, records=args.records, species=args.species, d_in=args.dim, modality_count=args.modalities)
    if args.diversity_gradient:
        rc.synth.diversity_gradient = True
    rc.synth.validate()
    path = args.out or Path("data.pm3e")
    ds = generate(rc.synth)
    write_dataset(ds, path)
    _echo(out, "gen-data", rc)
    out.write(f"wrote {len(ds)} records, {ds.modality_count} modalities x {ds.dims[0]} dims, {ds.species_count} species to {path}\n")
    return 0


def cmd_train(args, out) -> int:
    ds = read_dataset(args.data)
    rc = _resolve(args, epochs=args.epochs, modality_count=ds.modality_count, d_in=ds.dims[0])
    rc.validate()
    train, val, test = _splits(args, ds, rc)
    path = args.out or args.checkpoint or Path("model.pm3c")
    _echo(out, "train", rc, data=args.data, split=args.split)
    out.write("epoch\ttrain_total\tval_total\n")

    def progress(epoch, report):
        out.write(f"{epoch}\t{report.train_total[-1]!r}\t{report.val_total[-1]!r}\n")

    _, report = fit(train, val, rc, checkpoint_path=path, progress=progress)
    out.write(
        f"# best_epoch = {report.best_epoch}\n# best_val = {report.best_val!r}\n"
        f"# wall_clock_s = {report.wall_clock:.1f}\n# checkpoint = {path}\n"
    )
    return 0


def cmd_eval_retrieval(args, out) -> int:
    ds = read_dataset(args.data)
    params, rc = _load_model(args, ds)
    M = ds.modality_count
    q, t = _modality(args.query, M), _modality(args.target, M)
    if q == t:
        raise UsageError("query and target modality must differ")
    if not 0.0 <= args.delta <= 1.0:
        raise UsageError("--delta must lie in [0, 1]")
    _, val, test = _splits(args, ds, rc)
    delta = args.delta
    if args.tune_delta:
        delta, _ = tune_delta(params, val, RetrievalConfig(q, t))
    result = evaluate_retrieval(params, test, RetrievalConfig(q, t, delta))
    _echo(out, "eval-retrieval", rc, data=args.data, checkpoint=args.checkpoint)
    names = modality_names(M)
    out.write("query_mod\ttarget_mod\tdelta\tR@1\tR@5\tR@10\tgallery_size\n")
    r = result.recall
    out.write(f"{names[q]}\t{names[t]}\t{delta!r}\t{r[1]:.4f}\t{r[5]:.4f}\t{r[10]:.4f}\t{result.gallery_size}\n")
    return 0


def cmd_eval_probe(args, out) -> int:
    ds = read_dataset(args.data)
    params, rc = _load_model(args, ds)
    visible = _visible(args.visible, ds.modality_count)
    if not visible:
        raise UsageError("--visible needs at least one modality")
    kinds = FEATURE_KINDS if args.feature_kind == "all" else (args.feature_kind,)
    if args.feature_kind == "register_tokens" and params.config.registers == 0:
        raise UsageError("model has no register tokens")
    train, _, test = _splits(args, ds, rc)
    report = probe_report(params, train, test, visible, kinds)
    _echo(out, "eval-probe", rc, data=args.data, checkpoint=args.checkpoint, visible=args.visible)
    out.write("kind\tdim\ttop1\n")
    for kind, acc in report.accuracy.items():
        out.write(f"{kind}\t{report.dims[kind]}\t{acc:.4f}\n")
    return 0


def cmd_analyze_uncertainty(args, out) -> int:
    ds = read_dataset(args.data)
    params, rc = _load_model(args, ds)
    M = ds.modality_count
    if args.visible:
        sets = [_visible(v, M) for v in args.visible]
    else:
        sets = [(a,) for a in range(M)] + [(a, b) for a in range(M) for b in range(a + 1, M)] + [tuple(range(M))]
    _, _, test = _splits(args, ds, rc)
    report = analytics.uncertainty_sweep(params, test, sets)
    names = modality_names(M)
    lines = ["visible\tmean_sigma_l1\tmean_mse"]
    for vs, s, e in zip(report.visible_sets, report.mean_sigma_l1, report.mean_mse):
        lines.append(f"{','.join(names[m] for m in vs)}\t{s!r}\t{e!r}")
    text = "\n".join(lines) + "\n"
    _echo(out, "analyze-uncertainty", rc, data=args.data, checkpoint=args.checkpoint)
    out.write(text)
    out.write(f"# pearson = {report.pearson!r}\n# spearman = {report.spearman!r}\n# spearman_p = {report.spearman_p!r}\n")
    if args.out:
        args.out.write_text(text)
    return 0


def cmd_analyze_gap(args, out) -> int:
    ds = read_dataset(args.data)
    params, rc = _load_model(args, ds)
    M = ds.modality_count
    pair = _visible(args.pair, M)
    if len(pair) != 2:
        raise UsageError("--pair needs two distinct modalities")
    rest = [m for m in range(M) if m not in pair]
    contexts = [pair + tuple(rest[:k]) for k in range(len(rest) + 1)]
    _, _, test = _splits(args, ds, rc)
    report = analytics.gap_sweep(params, test, pair, contexts)
    names = modality_names(M)
    _echo(out, "analyze-gap", rc, data=args.data, checkpoint=args.checkpoint, pair=args.pair)
    out.write("stage\tcontext\tgap\n")
    out.write(f"input\t-\t{report.input_gap!r}\n")
    out.write(f"projected\t-\t{report.projected_gap!r}\n")
    for ctx, g in zip(report.contexts, report.hidden_gap):
        out.write(f"hidden\t{','.join(names[m] for m in ctx)}\t{g!r}\n")
    return 0


def cmd_diversity_map(args, out) -> int:
    ds = read_dataset(args.data)
    try:
        rows, cols = (int(x) for x in args.grid.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects ROWSxCOLS, got {args.grid!r}") from None
    if rows < 1 or cols < 1:
        raise UsageError("--grid dimensions must be positive")
    if args.smoothing < 0:
        raise UsageError("--smoothing must be >= 0")
    params = None
    if args.checkpoint is not None:
        params, rc = _load_model(args, ds)
    else:
        rc = _resolve(args)
    location = MODALITY_NAMES.index("location") if ds.modality_count > 2 else 0
    grid = analytics.build_diversity_grid(ds, (rows, cols), None, args.smoothing, params, location)
    _echo(out, "diversity-map", rc, data=args.data, grid=args.grid, smoothing=args.smoothing)
    text = grid.to_tsv()
    if args.out:
        args.out.write_text(text)
        out.write(f"# wrote {int(grid.present.sum())} cells to {args.out}\n")
    else:
        out.write(text)
    if params is not None and int(grid.present.sum()) >= 3:
        try:
            rho, p = analytics.grid_correlation(grid)
            out.write(f"# spearman_sigma_shannon = {rho!r}\n# p_value = {p!r}\n")
        except ValueError as exc:
            out.write(f"# spearman_sigma_shannon undefined: {exc}\n")
    return 0


def cmd_grad_check(args, out) -> int:
    rc = _resolve(args)
    seed = rc.train.seed
    t0 = time.perf_counter()
    err, where = model_grad_check(encoder_dim=args.dim, modality_count=args.modalities, batch=args.batch, seed=seed, step=args.step)
    elapsed = time.perf_counter() - t0
    _echo(out, "grad-check", rc, dim=args.dim, modalities=args.modalities, batch=args.batch, step=args.step)
    out.write(f"max_relative_error\t{err:.3e}\nworst_parameter\t{where}\nseconds\t{elapsed:.2f}\n")
    ok = err < GRAD_TOLERANCE
    out.write(f"{'PASS' if ok else 'FAIL'} (tolerance {GRAD_TOLERANCE:g})\n")
    return 0 if ok else 3


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-probe": cmd_eval_probe,
    "analyze-uncertainty": cmd_analyze_uncertainty,
    "analyze-gap": cmd_analyze_gap,
    "diversity-map": cmd_diversity_map,
    "grad-check": cmd_grad_check,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return HANDLERS[args.command](args, out)
    except (UsageError, ConfigError) as exc:
        print(f"prom3e {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DatasetFormatError, CheckpointError, OSError, ValueError) as exc:
        print(f"prom3e {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, GradCheckError, FloatingPointError) as exc:
        print(f"prom3e {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
