"""Command-line interface: ingest, fit, simulate, cluster, bootstrap, report.

Exit codes: 0 success, 2 bad arguments, 3 data errors, 4 every restart failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ingest
from .model import ProcTopicError, load_params, save_params

log = logging.getLogger("proctopic")

EXIT_ARGS, EXIT_DATA, EXIT_FAILED = 2, 3, 4


class UsageError(Exception):
    """Bad or missing arguments (exit 2)."""


class MissingFile(ProcTopicError):
    def __init__(self, path):
        super().__init__(f"MissingFile: {path}")
        self.path = path


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _short(x) -> str:
    return format(float(x), ".4g")


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(path)
    return p


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("PROCTOPIC_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"PROCTOPIC_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --- summaries ---------------------------------------------------------------------


def _matrix(name: str, M: np.ndarray, row_label: str = "k'") -> list[str]:
    K = M.shape[1]
    lines = [name, "  " + row_label.ljust(4) + "".join(f"{j + 1:>11d}" for j in range(K))]
    for i, row in enumerate(M):
        lines.append(f"  {i + 1:<4d}" + "".join(f"{_short(v):>11s}" for v in row))
    return lines


def summary_text(params, codebook: ingest.Codebook | None = None, top: int = 5, elbo: float | None = None,
                 iterations: int | None = None) -> str:
    """Human-readable tables: top events per topic, G, p0 and norm(R)."""
    book = codebook or ingest.Codebook.numeric(params.V)
    lines = [f"K = {params.K}, V = {params.V}"]
    if elbo is not None:
        lines.append(f"ELBO = {_short(elbo)} after {iterations} iterations")
    lines.append("")
    lines.append("Top events per topic")
    for k in range(params.K):
        order = np.argsort(-params.B[k], kind="stable")[:top]
        cells = ", ".join(f"{book.label_of(int(v) + 1)} {_short(params.B[k, v])}" for v in order)
        lines.append(f"  topic {k + 1}: {cells}")
    lines.append("")
    lines.extend(_matrix("G (log intensity, row = from topic)", params.G))
    lines.append("")
    lines.append("p0: " + "  ".join(_short(v) for v in params.p0))
    lines.append("")
    lines.extend(_matrix("norm(R)", params.norm_R()))
    lines.append("")
    lines.append(f"a = {_short(params.a)}, d = {_short(params.d)}")
    return "\n".join(lines) + "\n"


# --- commands ------------------------------------------------------------------------


def _load_profile(arg: str | None) -> ingest.CleaningProfile:
    if arg is None or arg == "climate":
        return ingest.CLIMATE
    data = json.loads(_need_file(arg).read_text(encoding="utf-8"))
    keep = {str(k).lower(): v for k, v in data["keep"].items()}
    drop = frozenset(str(x).upper() for x in data.get("drop_events", ["START_ITEM", "END_ITEM"]))
    return ingest.CleaningProfile(keep=keep, drop_events=drop)


def cmd_ingest(args) -> int:
    if not args.log:
        raise UsageError("ingest needs --log")
    if not args.out:
        raise UsageError("ingest needs --out")
    groups = ingest.parse_log(_need_file(args.log), id_column=args.id_column)
    seqs, excluded = ingest.clean_all(groups, _load_profile(args.profile))
    if not seqs:
        raise ingest.EmptySequence("(all examinees)")
    book, events = ingest.build_codebook(seqs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_corpus(out / "corpus.csv", events, book)
    ingest.write_codebook(out / "codebook.csv", book)
    with open(out / "excluded.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["examinee_id", "reason"])
        for ex in excluded:
            w.writerow([ex, "empty after cleaning"])
    print(f"ingest: {len(events)} examinees, {sum(len(s) for s in events)} events, V = {book.V}, "
          f"{len(excluded)} excluded")
    return 0


def cmd_fit(args) -> int:
    from .fit import FitConfig, fit, save_report

    if not args.corpus:
        raise UsageError("fit needs --corpus")
    if args.k is None:
        raise UsageError("fit needs --k")
    try:
        config = FitConfig(K=args.k, max_iters=args.max_iters, rel_tol=args.rel_tol, restarts=args.restarts,
                           seed=args.seed, use_time=not args.ignore_time)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seqs, book = ingest.read_corpus(_need_file(args.corpus))
    if not seqs:
        raise ingest.EmptySequence("(corpus)")
    if args.codebook:
        book = ingest.read_codebook(_need_file(args.codebook))
    report = fit(seqs, config, V=book.V)
    text = summary_text(report.params, book, args.top, report.elbo, report.iterations)
    if args.out:
        out = Path(args.out)
        save_report(report, out)
        ingest.write_codebook(out / "codebook.csv", book)
        (out / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _stop_from_args(args, default):
    from .simulate import StopRule

    if args.terminal_event is None and args.max_events is None and args.max_time is None:
        return default
    return StopRule(terminal_event=None if args.terminal_event is None else args.terminal_event - 1,
                    max_events=args.max_events, max_time=args.max_time)


def cmd_simulate(args) -> int:
    from .simulate import preset, simulate_corpus, study1_generator, study1_spec

    if args.m is None or args.m < 1:
        raise UsageError("--m must be >= 1")
    if not args.out:
        raise UsageError("simulate needs --out")
    if bool(args.preset) == bool(args.params):
        raise UsageError("give exactly one of --preset and --params")
    out = Path(args.out)
    truth = None
    if args.preset == "study1":
        seqs = study1_generator(args.m, args.seed)
        spec = study1_spec()
        book = ingest.Codebook(spec["labels"])
        if args.emit_truth:
            truth = {"preset": "study1", "design": spec}
    else:
        if args.preset:
            try:
                params, stop = preset(args.preset)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            if args.preset == "study3" and args.full:
                from .simulate import max_events

                stop = max_events(500)
        else:
            params, stop = load_params(_need_file(args.params)), None
        stop = _stop_from_args(args, stop)
        if stop is None:
            raise UsageError("--params needs a stop rule (--terminal-event, --max-events or --max-time)")
        seqs, paths = simulate_corpus(params, args.m, stop, seed=args.seed)
        book = ingest.Codebook.numeric(params.V)
        if args.emit_truth:
            truth = {
                "params": params.to_dict(),
                "paths": [{"examinee_id": s.examinee_id, "topics": (p.topics + 1).tolist(), "xi": p.xi,
                           "lambda": p.lam.tolist()} for s, p in zip(seqs, paths)],
            }
            save_params(params, out.with_name(out.name + ".params.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.write_corpus(out, seqs, book)
    if truth is not None:
        out.with_name(out.name + ".truth.json").write_text(json.dumps(truth) + "\n", encoding="utf-8")
    print(f"simulate: {len(seqs)} examinees, {sum(len(s) for s in seqs)} events -> {out}")
    return 0


def _read_bundle(fit_dir):
    from .fit import load_states

    d = Path(fit_dir)
    params = load_params(_need_file(d / "params.json"))
    states = load_states(_need_file(d / "states.jsonl"))
    meta = json.loads(_need_file(d / "fit.json").read_text(encoding="utf-8"))
    book = ingest.read_codebook(d / "codebook.csv") if (d / "codebook.csv").is_file() else None
    return params, states, meta, book


def cmd_cluster(args) -> int:
    from .analyze import kmeans, norm_gamma_features, silhouette_scores

    if not args.fit:
        raise UsageError("cluster needs --fit")
    if args.n_clusters is None or args.n_clusters < 1:
        raise UsageError("--n-clusters must be >= 1")
    if not args.out:
        raise UsageError("cluster needs --out")
    _, states, _, _ = _read_bundle(args.fit)
    X = norm_gamma_features(states)
    if args.n_clusters > len(X):
        raise UsageError(f"--n-clusters {args.n_clusters} exceeds the {len(X)} examinees")
    res = kmeans(X, args.n_clusters, seed=args.seed, restarts=args.restarts)
    sil = silhouette_scores(X, range(2, 9), seed=args.seed, restarts=args.restarts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "assignments.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["examinee_id", "cluster"])
        for st, lab in zip(states, res.labels):
            w.writerow([st["examinee_id"], int(lab) + 1])
    K = int(round(np.sqrt(X.shape[1])))
    with open(out / "centers.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster"] + [f"r{i + 1}c{j + 1}" for i in range(K) for j in range(K)])
        for c, row in enumerate(res.centers, start=1):
            w.writerow([c] + [_fmt(v) for v in row])
    with open(out / "silhouette.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_clusters", "silhouette"])
        for k, s in sil.items():
            w.writerow([k, _fmt(s)])
    sizes = np.bincount(res.labels, minlength=args.n_clusters)
    print("cluster sizes: " + " ".join(str(int(s)) for s in sizes))
    for c, row in enumerate(res.centers, start=1):
        print(f"cluster {c} center (norm gamma rows):")
        for i in range(K):
            print("  " + " ".join(f"{_short(v):>8s}" for v in row[i * K:(i + 1) * K]))
    print("silhouette: " + ", ".join(f"{k}: {_short(s)}" for k, s in sil.items()))
    return 0


def cmd_bootstrap(args) -> int:
    from .analyze import bootstrap_se
    from .fit import FitConfig

    if not args.fit:
        raise UsageError("bootstrap needs --fit")
    if args.n_boot < 2:
        raise UsageError("--n-boot must be >= 2")
    if not args.out:
        raise UsageError("bootstrap needs --out")
    params, states, meta, _ = _read_bundle(args.fit)
    lengths = [len(st["phi"]) for st in states]
    config = FitConfig(K=params.K, max_iters=args.max_iters, rel_tol=args.rel_tol, restarts=args.restarts,
                       seed=args.seed, use_time=meta.get("use_time", True))
    res = bootstrap_se(params, config, n_boot=args.n_boot, template=lengths, seed=args.seed,
                       warm_start=not args.cold_start)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res.write(out)
    print(f"bootstrap: {len(res.estimates)} replicates ({res.n_failed} failed)")
    for name in ("B", "G", "p0", "norm_R"):
        arr = np.atleast_2d(res.se[name])
        print(f"SE {name} (x1000):")
        for row in arr:
            print("  " + " ".join(f"{_short(1000 * v):>9s}" for v in row))
    print(f"SE a = {_short(res.se['a'])}, SE d = {_short(res.se['d'])}")
    return 0


def cmd_report(args) -> int:
    if not args.fit:
        raise UsageError("report needs --fit")
    params, _, meta, book = _read_bundle(args.fit)
    if args.codebook:
        book = ingest.read_codebook(_need_file(args.codebook))
    sys.stdout.write(summary_text(params, book, args.top, meta.get("elbo"), meta.get("iterations")))
    return 0


# --- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="proctopic", description="Latent topic model with Markovian transitions for process data.")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $PROCTOPIC_THREADS or all cores)")
    p.add_argument("--config", default=None, help="JSON file of option defaults, flat or keyed by command")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("ingest", help="clean a raw log into a corpus and codebook")
    s.add_argument("--log")
    s.add_argument("--out", help="output directory")
    s.add_argument("--profile", help='"climate" (default) or a JSON cleaning profile')
    s.add_argument("--id-column", default="examinee_id")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", help="fit the model by forward-backward variational EM")
    s.add_argument("--corpus")
    s.add_argument("--k", type=int)
    s.add_argument("--restarts", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--rel-tol", type=float, default=1e-6)
    s.add_argument("--ignore-time", action="store_true")
    s.add_argument("--codebook")
    s.add_argument("--top", type=int, default=5)
    s.add_argument("--out", help="output directory for the fit bundle")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="simulate a corpus from a preset or a params file")
    s.add_argument("--preset", choices=["study1", "study2", "study3"])
    s.add_argument("--params")
    s.add_argument("--m", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--terminal-event", type=int, help="1-based event id that ends a sequence")
    s.add_argument("--max-events", type=int)
    s.add_argument("--max-time", type=float)
    s.add_argument("--full", action="store_true", help="study3 at full length (500 events per examinee)")
    s.add_argument("--emit-truth", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("cluster", help="k-means on normalized gamma of a fit bundle")
    s.add_argument("--fit")
    s.add_argument("--n-clusters", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("bootstrap", help="parametric bootstrap standard errors of a fit bundle")
    s.add_argument("--fit")
    s.add_argument("--n-boot", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=1)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--rel-tol", type=float, default=1e-6)
    s.add_argument("--cold-start", action="store_true", help="refit from random starts instead of the fitted params")
    s.add_argument("--out", help="output CSV of standard errors")
    s.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("report", help="print the summary tables of a fit bundle")
    s.add_argument("--fit")
    s.add_argument("--codebook")
    s.add_argument("--top", type=int, default=5)
    s.set_defaults(func=cmd_report)
    return p


def _apply_config(parser, argv) -> None:
    """Install config-file values as defaults of the chosen subcommand (flags still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    data = json.loads(_need_file(known.config).read_text(encoding="utf-8"))
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub.choices.items():
        flat = {k.replace("-", "_"): v for k, v in data.items() if not isinstance(v, dict)}
        flat.update({k.replace("-", "_"): v for k, v in data.get(name, {}).items()})
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in flat.items() if k in dests})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    stage = "arguments"
    try:
        _apply_config(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            # --help and usage errors from argparse
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_ARGS
        _set_threads(args.threads)
        stage = args.command
        return args.func(args)
    except UsageError as exc:
        print(f"proctopic {stage}: bad arguments: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (ProcTopicError, OSError, ValueError, KeyError) as exc:
        from .fit import AllRestartsFailed

        if isinstance(exc, AllRestartsFailed):
            print(f"proctopic {stage}: fit failed: {exc}", file=sys.stderr)
            return EXIT_FAILED
        print(f"proctopic {stage}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
