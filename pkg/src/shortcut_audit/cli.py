"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 fit did not converge
(the report is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import interventions, lme, metrics, nuisance, toy
from .manifest import ManifestError, load_manifest

log = logging.getLogger("shortcut_audit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _spec_from_args(args) -> interventions.InterventionSpec:
    if args.kind is None:
        raise UsageError("--kind is required")
    if args.kind == "external_codec" and not args.codec_cmd:
        raise UsageError("external_codec needs --codec-cmd")
    base = interventions.InterventionSpec.default(args.kind, args.codec_cmd)
    low = base.low if args.low is None else args.low
    high = base.high if args.high is None else args.high
    choices = base.choices
    if args.choices:
        choices = tuple(float(c) for c in str(args.choices).split(",") if c.strip())
        low = high = None
    return interventions.InterventionSpec(args.kind, low, high, choices, base.codec_cmd)


def _grid_dir_name(test_neg: float, test_pos: float) -> str:
    return f"grid_neg{test_neg:g}_pos{test_pos:g}"


def cmd_intervene(args) -> int:
    manifest = load_manifest(args.manifest)
    spec = _spec_from_args(args)
    out = Path(args.out)
    if (args.config is None) == (args.grid is None):
        raise UsageError("give exactly one of --config or --grid")
    if args.config is not None:
        plan = interventions.assign(manifest, spec, interventions.config_from_name(args.config), args.seed)
        interventions.apply_plan(manifest, plan, out, args.jobs)
        print(f"{len(plan.intervened_ids())} of {len(manifest)} items intervened -> {out}")
        return EXIT_OK
    grid = interventions.parse_grid(args.grid)
    plans = interventions.grid_plans(manifest, spec, args.train_corner, grid, args.seed)
    for (test_neg, test_pos), plan in zip(grid, plans):
        interventions.apply_plan(manifest, plan, out / _grid_dir_name(test_neg, test_pos), args.jobs)
    print(f"{len(plans)} grid manifests -> {out}")
    return EXIT_OK


def cmd_nuisance(args) -> int:
    manifest = load_manifest(args.manifest)
    scores = nuisance.score_dataset(manifest, args.feature, args.components, args.seed)
    summary = nuisance.fit_nuisance_summary([(s.llr, s.y_cls) for s in scores])
    empirical = metrics.eer([s.llr for s in scores], [s.y_cls for s in scores])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nuisance.save_scores(scores, out / "nuisance_scores.csv")
    nuisance.save_summary(summary, empirical, out / "nuisance_summary.csv")
    print(f"d_ell={summary.d_ell:.4f} gaussian_eer={summary.gaussian_eer:.4f} empirical_eer={empirical:.4f}")
    return EXIT_OK


_DEFAULT_GROUPS = {"interventional": (None, None), "observational": ("speaker", "attack"), "asv": ("speaker", None)}


def cmd_fit(args) -> int:
    formula = lme.FORMULAS[args.formula]
    default_a, default_b = _DEFAULT_GROUPS[args.formula]
    if args.random is None:
        factors = formula.random_factors
    elif args.random == "none":
        factors = ()
    else:
        factors = tuple(f.strip() for f in args.random.split(",") if f.strip())
    formula = lme.ModelFormula(formula.fixed_terms, factors)
    table = lme.ScoreTable.from_csv(
        args.scores, args.score_column, args.class_column,
        group_a=(args.group_a or default_a) if "group_a" in factors else None,
        group_b=(args.group_b or default_b) if "group_b" in factors else None,
    )
    if np.unique(table.y_cls).size < 2:
        raise metrics.OneClassError("score file holds a single class; the class effect is not estimable")
    if args.zscore:
        table.scores = lme.zscore_normalize(table.scores)
    fit = lme.fit_reml(lme.build_design(table, formula))
    report = lme.format_fit_report(fit)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    else:
        sys.stdout.write(report)
    if not fit.converged:
        log.error("variance-component search did not converge; report written with converged=0")
        return EXIT_NONCONVERGED
    return EXIT_OK


def _read_score_rows(paths) -> list[dict]:
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as f:
            rows += list(csv.DictReader(f))
    if not rows:
        raise ValueError("no score rows")
    return rows


def cmd_eer(args) -> int:
    rows = _read_score_rows(args.scores)
    keys = [k.strip() for k in args.group_by.split(",") if k.strip()] if args.group_by else []
    for key in keys + [args.score_column, args.class_column]:
        if key not in rows[0]:
            raise ValueError(f"score files have no column {key!r}")
    groups: "OrderedDict[tuple, list]" = OrderedDict()
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    lines = [",".join(keys + ["eer"])]
    for key in sorted(groups):
        members = groups[key]
        scores = [float(r[args.score_column]) for r in members]
        labels = [int(r[args.class_column]) for r in members]
        try:
            value = metrics.eer(scores, labels)
        except metrics.OneClassError:
            log.warning("group %s has a single class; omitted", dict(zip(keys, key)))
            continue
        lines.append(",".join(list(key) + [repr(value)]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.heatmap:
        write_heatmap(rows, args.heatmap, args.score_column, args.class_column)
    return EXIT_OK


def write_heatmap(rows, path, score_column="score", class_column="y_cls") -> np.ndarray:
    """EER matrix with rows rho_test_pos and columns rho_test_neg (both ascending)."""
    for key in ("rho_test_neg", "rho_test_pos"):
        if key not in rows[0]:
            raise ValueError(f"heatmap needs a {key!r} column")
    negs = sorted({float(r["rho_test_neg"]) for r in rows})
    poss = sorted({float(r["rho_test_pos"]) for r in rows})
    matrix = np.full((len(poss), len(negs)), np.nan)
    for i, pos in enumerate(poss):
        for j, neg in enumerate(negs):
            cell = [r for r in rows if float(r["rho_test_pos"]) == pos and float(r["rho_test_neg"]) == neg]
            try:
                matrix[i, j] = metrics.eer([float(r[score_column]) for r in cell],
                                           [int(r[class_column]) for r in cell])
            except (metrics.OneClassError, ValueError):
                log.warning("heatmap cell rho_test_pos=%g rho_test_neg=%g is empty; left as nan", pos, neg)
    lines = ["rho_test_pos\\rho_test_neg," + ",".join(f"{v:g}" for v in negs)]
    for pos, row in zip(poss, matrix):
        lines.append(f"{pos:g}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return matrix


def _corpus_spec(args) -> toy.CorpusSpec:
    values = {
        "n_per_cell": args.n_per_cell,
        "duration_s": args.duration,
        "class_separation": args.separation,
        "n_speakers": args.speakers,
        "n_attacks": args.attacks,
        "seed": args.seed,
        "class_snr_offset_db": args.class_snr_offset,
    }
    if args.background_snr:
        values["background_snr_db"] = tuple(float(v) for v in str(args.background_snr).split(","))
    return toy.CorpusSpec.from_mapping({k: v for k, v in values.items() if v is not None})


def cmd_toy_gen(args) -> int:
    spec = _corpus_spec(args)
    manifest = toy.generate_corpus(spec, args.out, args.jobs)
    Path(args.out, "corpus.json").write_text(json.dumps(toy.corpus_spec_dict(spec), indent=2) + "\n")
    print(f"{len(manifest)} items -> {args.out}")
    return EXIT_OK


def cmd_toy_run(args) -> int:
    out = Path(args.out)
    if args.corpus:
        manifest = load_manifest(Path(args.corpus) / "manifest.csv")
    else:
        manifest = toy.generate_corpus(_corpus_spec(args), out / "corpus", args.jobs)
    spec = _spec_from_args(args)
    lines = ["config,intervention,rho_test_neg,rho_test_pos,eer"]
    if args.grid:
        grid = interventions.parse_grid(args.grid)
        train_neg, train_pos = interventions.TRAIN_CORNERS[args.train_corner]
        runs = [(_grid_dir_name(n, p), interventions.ConfigQuadruple((train_neg, train_pos, n, p),
                                                                      interventions.config_name_for((train_neg, train_pos, n, p))))
                for n, p in grid]
    else:
        names = [c.strip() for c in args.configs.split(",") if c.strip()]
        runs = [(name, interventions.config_from_name(name)) for name in names]
    for label, config in runs:
        result = toy.run_experiment(manifest, spec, config, args.seed, out / label, args.jobs)
        lines.append(f"{config.name},{spec.kind},{config.rho[2]:g},{config.rho[3]:g},{result.eer!r}")
        print(f"{label}: EER={result.eer:.4f}")
    (out / "eer.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.grid:
        rows = _read_score_rows(sorted(out.glob("grid_*/scores.csv")))
        write_heatmap(rows, out / "heatmap.csv")
    return EXIT_OK


def _add_intervention_flags(p):
    p.add_argument("--kind", choices=interventions.KINDS)
    p.add_argument("--low", type=float, help="lower bound of the control interval")
    p.add_argument("--high", type=float, help="upper bound of the control interval")
    p.add_argument("--choices", help="comma-separated discrete control values")
    p.add_argument("--codec-cmd", help="codec template with {in}, {out} and {z} placeholders")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--train-corner", default="O-train", choices=sorted(interventions.TRAIN_CORNERS))


def _add_corpus_flags(p):
    p.add_argument("--n-per-cell", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--separation", type=float)
    p.add_argument("--speakers", type=int)
    p.add_argument("--attacks", type=int)
    p.add_argument("--class-snr-offset", type=float)
    p.add_argument("--background-snr", help="low,high background SNR range in dB")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shortcut-audit", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--config-file", help="JSON file of defaults, one object per subcommand")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("intervene", help="assign and apply an intervention configuration")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="named configuration, e.g. IT_p")
    p.add_argument("--grid", help="comma-separated test-side probabilities, e.g. 0,0.5,1")
    p.add_argument("--out", required=True)
    _add_intervention_flags(p)
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("nuisance", help="nuisance-feature GMM classifier and LLR summary")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", default="snr_db", choices=("snr_db", "nonspeech_proportion"))
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nuisance)

    p = sub.add_parser("fit", help="fit a score model by REML")
    p.add_argument("--scores", required=True, nargs="+", help="score files, pooled")
    p.add_argument("--formula", required=True, choices=sorted(lme.FORMULAS))
    p.add_argument("--random", help="comma-separated factors from group_a,group_b, or 'none'")
    p.add_argument("--group-a", help="column holding the first grouping factor")
    p.add_argument("--group-b", help="column holding the second grouping factor")
    p.add_argument("--score-column", default="score")
    p.add_argument("--class-column", default="y_cls")
    p.add_argument("--zscore", action="store_true", help="standardize scores before fitting")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eer", help="EER table, optionally grouped, plus grid heatmap")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--group-by", help="comma-separated grouping columns")
    p.add_argument("--score-column", default="score")
    p.add_argument("--class-column", default="y_cls")
    p.add_argument("--heatmap", help="write an EER matrix (rows rho_test_pos, columns rho_test_neg)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eer)

    p = sub.add_parser("toy-gen", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_toy_gen)

    p = sub.add_parser("toy-run", help="end-to-end intervention, training, scoring and EER on the toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="existing corpus directory; generated under OUT/corpus when omitted")
    p.add_argument("--configs", default="O,IT_p,IV_pn")
    p.add_argument("--grid", help="run the test-side grid instead of named configurations")
    _add_intervention_flags(p)
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_toy_run, kind="white_noise")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> None:
    """Install file values as subcommand defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config-file")
    known, _ = pre.parse_known_args(argv)
    if not known.config_file:
        return
    try:
        data = json.loads(Path(known.config_file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {known.config_file}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, section in data.items():
        if name not in subparsers.choices or not isinstance(section, dict):
            raise UsageError(f"config file section {name!r} is not a subcommand object")
        sub = subparsers.choices[name]
        dests = {a.dest for a in sub._actions}
        values = {k.replace("-", "_"): v for k, v in section.items()}
        unknown = set(values) - dests
        if unknown:
            raise UsageError(f"config file section {name!r} has unknown keys {sorted(unknown)}")
        for action in sub._actions:
            if action.dest in values:
                action.required = False
        sub.set_defaults(**values)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
    except UsageError as exc:
        print(f"shortcut-audit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"shortcut-audit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, lme.LmeError, metrics.OneClassError, nuisance.FeatureExtractionError,
            interventions.InterventionError, toy.DegenerateFeatureError, OSError, ValueError, KeyError) as exc:
        print(f"shortcut-audit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
