"""Command-line pipeline: data, model, bank, heads, explanations, evaluation.

Every command writes a JSON run manifest (``--manifest``, default next to
``--out``) with the resolved parameters, seeds, paths, version and wall time.
``rangexplain --replay MANIFEST`` re-runs the recorded command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, data, disentangle, evaluation, experts, nn
from .attribution import (AttributionMatrix, ConditionalBaseline, FixedBaseline, MeanBaseline, attribution_basis,
                          canonical_method, explain_from_basis, explain_model, explain_query, resolve_baseline)
from .errors import ConfigurationError, RangeExplainError, ValidationError
from .query import StepDescriptor, parse_query_spec

log = logging.getLogger("rangexplain")


@dataclass
class RunManifest:
    command: str
    argv: list
    params: dict
    seeds: dict
    inputs: dict
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0
    status: str = "ok"
    error: dict | None = None
    results: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


# ------------------------------------------------------------------ argument helpers

def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def parse_baseline_spec(spec: str, n_features: int | None = None):
    """``mean`` | ``zero`` | ``fixed:v1,v2,...`` | ``conditional:ref=<f>,delta=<f>[,draws=<n>]``."""
    kind, _, rest = spec.partition(":")
    if kind == "mean":
        return MeanBaseline()
    if kind == "zero":
        if n_features is None:
            raise ConfigurationError("zero baseline needs the feature count")
        return FixedBaseline(np.zeros(n_features))
    if kind == "fixed":
        return FixedBaseline(np.array(_floats(rest)))
    if kind == "conditional":
        kv = dict(item.split("=", 1) for item in rest.split(",") if item)
        try:
            return ConditionalBaseline(float(kv["ref"]), float(kv["delta"]), int(kv.get("draws", 5)))
        except KeyError as exc:
            raise ConfigurationError(f"conditional baseline needs {exc.args[0]}=") from None
    raise ConfigurationError(f"unknown baseline spec {spec!r}; expected mean, zero, fixed:... or conditional:...")


def select_samples(selector: str, n: int) -> np.ndarray:
    """``all``, ``a:b`` (half-open range) or a comma list of row indices."""
    if selector == "all":
        return np.arange(n)
    if ":" in selector:
        lo, hi = selector.split(":")
        idx = np.arange(int(lo or 0), int(hi) if hi else n)
    else:
        idx = np.array(_ints(selector), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"sample index outside 0..{n - 1}")
    return idx


def _load_dataset(args):
    ds = data.load_csv(args.data, args.target)
    if getattr(args, "stats", None):
        ds = data.standardize(ds, data.load_stats(args.stats))
    return ds


def _load_heads(args):
    return disentangle.load_heads(args.heads) if getattr(args, "heads", None) else None


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# ------------------------------------------------------------------ commands
# each returns (outputs, results) for the manifest

def cmd_gen(args):
    _ensure_parent(args.out)
    outputs = {"dataset": args.out}
    if args.kind == "friedman":
        ds = data.gen_friedman(args.n, args.noise, args.seed)
        side = None
    elif args.kind == "range_strategy":
        ds, _ = data.gen_range_strategy(args.n, args.m, args.seed, args.noise)
        side = {"regime": ds.extras["regime"], "driving_feature": ds.extras["driving_feature"]}
    else:
        ds = data.gen_wind_scada(data.WindSimConfig(n=args.n, seed=args.seed))
        side = {k: ds.extras[k] for k in ("base_power", "loss", "below_rated")}
    data.save_csv(ds, args.out, args.target)
    if side is not None:
        side_path = str(Path(args.out).with_suffix("")) + ".truth.csv"
        data.save_side_file(side, side_path)
        outputs["ground_truth"] = side_path
    print(f"wrote {ds.n} rows x {ds.d} features to {args.out}")
    return outputs, {"rows": ds.n, "features": ds.d}


def cmd_train(args):
    ds = data.load_csv(args.data, args.target)
    outputs = {"model": args.out}
    if args.standardize:
        ds = data.standardize(ds)
        stats_path = str(Path(args.out).with_suffix("")) + ".stats.csv"
        data.save_stats(ds.standardization, ds.feature_names, stats_path)
        outputs["stats"] = stats_path
    train_ds, test_ds = ds.split(args.test_fraction, args.seed) if args.test_fraction > 0 else (ds, None)
    model = nn.init_mlp(ds.d, _ints(args.hidden), args.seed, ds.feature_names)
    cfg = nn.TrainConfig(args.lr, args.epochs, args.batch_size, args.seed, args.l2, args.lr_schedule)
    if cfg.epochs == 0:
        print("warning: --epochs 0; the saved model is the initialisation", file=sys.stderr)
    model = nn.train(model, train_ds, cfg)
    _ensure_parent(args.out)
    nn.save_model(model, args.out)
    results = {"train_mse": nn.mse(model, train_ds.features, train_ds.targets)}
    if test_ds is not None and test_ds.n > 1:
        results["test_r2"] = nn.r2_score(model, test_ds.features, test_ds.targets)
        results["test_rmse"] = float(np.sqrt(nn.mse(model, test_ds.features, test_ds.targets)))
    for k, v in results.items():
        print(f"{k}: {v:.6g}")
    return outputs, results


def cmd_fit_experts(args):
    model = nn.load_model(args.model)
    ds = _load_dataset(args)
    preds = nn.predict(model, ds.features)
    bps = _floats(args.breakpoints) if args.breakpoints else None
    bank = experts.fit_bank(preds, args.experts, bps, top_unbounded=not args.bounded_top)
    _ensure_parent(args.out)
    experts.save_bank(bank, args.out)
    print(f"offset: {bank.offset!r}\nspan: {bank.span!r}\nbreakpoints: {list(bank.breakpoints)}")
    return {"bank": args.out}, {"offset": bank.offset, "span": bank.span, "breakpoints": list(bank.breakpoints)}


def cmd_fit_surrogate(args):
    model = nn.load_model(args.model)
    bank = experts.load_bank(args.bank)
    ds = _load_dataset(args)
    cfg = disentangle.SurrogateFitConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        dropout_augmentation=not args.no_dropout, init=args.init, freeze_bias=not args.train_bias,
        attach_layer=args.attach_layer, perturbation_target=args.perturbation_target, lr_schedule=args.lr_schedule)
    heads = disentangle.fit_surrogate(model, bank, ds, cfg)
    _ensure_parent(args.out)
    disentangle.save_heads(heads, args.out)
    rep = heads.training_report
    print("surrogate training report")
    for key in ("attach_layer", "init", "epochs", "initial_loss", "final_loss"):
        print(f"  {key}: {rep[key]}")
    print(f"  cap: {'none (top expert bounded)' if rep['cap'] is None else repr(rep['cap'])}")
    for m, (tau, mae, side) in enumerate(zip(rep["taus"], rep["within_range_mae"], rep["side_accuracy"])):
        print(f"  expert {m}: tau={tau:.6g} within_range_mae={mae:.6g} side_accuracy={side:.4f}")
    results = dict(rep)
    if args.validate:
        report = disentangle.validate_surrogate(model, bank, heads, ds, args.validate, args.seed)
        for line in report.lines()[-2:]:
            print("  " + line)
        results["cosine_mean"] = report.cosine_mean
    return {"heads": args.out}, results


def _method_opts(method, args):
    if method == "integrated_gradients":
        return {"steps": args.steps}
    if method == "shapley_sampled":
        return {"n_permutations": args.permutations, "seed": args.seed}
    return {}


def _baselines_for(method, spec, ds, model, seed):
    if method == "lrp":
        return None
    return resolve_baseline(spec, ds.features, model, rng=np.random.default_rng(seed))


def cmd_explain(args):
    model = nn.load_model(args.model)
    bank = experts.load_bank(args.bank)
    heads = _load_heads(args)
    ds = _load_dataset(args)
    query = parse_query_spec(args.query, bank)
    method = canonical_method(args.method)
    idx = select_samples(args.samples, ds.n)
    records = [query.record()]
    if args.from_basis:
        for i in idx:
            path = Path(args.from_basis) / f"sample_{i}.csv"
            if not path.is_file():
                raise FileNotFoundError(f"no precomputed basis for sample {i}: {path}")
            e = explain_from_basis(AttributionMatrix.from_csv(path), query)
            records.append(f"# sample {i}\n" + e.record())
    else:
        spec = parse_baseline_spec(args.baseline, ds.d)
        base = _baselines_for(method, spec, ds, model, args.seed)
        for i in idx:
            e = explain_query(method, model, bank, query, ds.features[i], base, heads, args.mode,
                              baseline_desc=str(spec) if method != "lrp" else None, **_method_opts(method, args))
            records.append(f"# sample {i}\n" + e.record())
    text = "\n".join(records)
    if args.out:
        _ensure_parent(args.out)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return ({"records": args.out} if args.out else {}), {"samples": len(idx)}


def cmd_precompute(args):
    model = nn.load_model(args.model)
    bank = experts.load_bank(args.bank)
    heads = _load_heads(args)
    ds = _load_dataset(args)
    method = canonical_method(args.method)
    spec = parse_baseline_spec(args.baseline, ds.d)
    base = _baselines_for(method, spec, ds, model, args.seed)
    idx = select_samples(args.samples, ds.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = _method_opts(method, args)
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "file"])
        for i in idx:
            basis = attribution_basis(method, model, bank, ds.features[i], base, heads,
                                      baseline_desc=str(spec) if method != "lrp" else None, **opts)
            basis.to_csv(out / f"sample_{i}.csv")
            w.writerow([int(i), f"sample_{i}.csv"])
    print(f"wrote {len(idx)} attribution matrices ({ds.d} x {bank.n_experts}) to {out}")
    return {"archive": str(out)}, {"samples": len(idx)}


def _default_slice(query, bank):
    desc = query.descriptor
    lo = desc.snapped if isinstance(desc, StepDescriptor) else bank.offset
    return lo, bank.offset + bank.span


def cmd_evaluate(args):
    model = nn.load_model(args.model)
    bank = experts.load_bank(args.bank)
    heads = _load_heads(args)
    ds = _load_dataset(args)
    query = parse_query_spec(args.query, bank)
    method = canonical_method(args.method)
    lo, hi = _floats(args.slice) if args.slice else _default_slice(query, bank)
    ref = args.eval_ref if args.eval_ref is not None else lo
    eval_base = ConditionalBaseline(ref, args.delta_frac * bank.span, args.draws, args.seed)
    explain_base = parse_baseline_spec(args.baseline, ds.d)
    report = evaluation.compare_faithfulness(
        model, bank, heads, ds, (lo, hi), method, query, eval_base, args.n, args.seed,
        explain_baseline=explain_base, steps=args.steps, n_permutations=args.permutations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"report": str(out / "report.txt")}
    text = report.text()
    curves = report.mean_curves
    for key, y in curves.items():
        path = out / f"curve_{key}.csv"
        evaluation.FlippingCurve(y, np.arange(len(y) - 1), key.rsplit("_", 1)[1], np.array([])).to_csv(path)
        outputs[f"curve_{key}"] = str(path)
    if args.subtraction:
        text += _subtraction_sweep(model, bank, heads, ds, method, report.sample_indices, args, out, outputs)
    (out / "report.txt").write_text(text)
    if args.svg and curves:
        t = np.linspace(0.0, 1.0, len(next(iter(curves.values()))))
        evaluation.svg_line_chart({k: (t, v) for k, v in curves.items()}, out / "curves.svg",
                                  f"{method}: mean flipping curves", y_label="f(flipped) - f(x)")
        outputs["svg"] = str(out / "curves.svg")
    print(text, end="")
    return outputs, {"n": report.n, "mean_naive_abc": report.mean_naive, "mean_query_abc": report.mean_xpert,
                     "relative_improvement": report.relative_improvement, "skipped_pairs": report.skipped_pairs}


def _subtraction_sweep(model, bank, heads, ds, method, sample_indices, args, out, outputs):
    """Mean subtraction-flipping curves (zero baseline) for k = 0..M-1."""
    if not sample_indices:
        return ""
    zero = np.zeros((1, ds.d))
    opts = _method_opts(method, args)
    base = None if method == "lrp" else zero
    lines = ["", "# subtraction flipping (zero baseline)", "k,breakpoint,plateau_length"]
    sums = np.zeros((bank.n_experts, ds.d + 1))
    for i in sample_indices:
        x = ds.features[i]
        basis = attribution_basis(method, model, bank, x, base, heads, **opts)
        naive = explain_model(method, model, x, base, **opts).values
        for k in range(bank.n_experts):
            sums[k] += evaluation.subtraction_flipping(model, bank, x, naive, basis, k).outputs
    mean = sums / len(sample_indices)
    t = np.linspace(0.0, 1.0, ds.d + 1)
    for k in range(bank.n_experts):
        level = bank.offset + bank.breakpoints[k]
        plateau = evaluation.plateau_length(mean[k], level, 0.1 * bank.span)
        lines.append(f"{k},{level!r},{plateau!r}")
        path = out / f"subtraction_k{k}.csv"
        evaluation.FlippingCurve(mean[k], np.arange(ds.d), "descending", np.zeros(ds.d)).to_csv(path)
        outputs[f"subtraction_k{k}"] = str(path)
    if args.svg:
        evaluation.svg_line_chart({f"k={k}": (t, mean[k]) for k in range(bank.n_experts)},
                                  out / "subtraction.svg", "subtraction flipping")
        outputs["subtraction_svg"] = str(out / "subtraction.svg")
    return "\n".join(lines) + "\n"


def read_report(path) -> dict:
    """``key: value`` pairs of a faithfulness report file."""
    fields = {}
    for line in Path(path).read_text().splitlines():
        key, sep, val = line.partition(": ")
        if sep and not key.startswith("#") and "," not in key:
            fields[key] = val
    return fields


REPORT_COLUMNS = ("method", "query", "n", "seed", "mean_naive_abc", "mean_query_abc", "relative_improvement")


def cmd_report(args):
    rows = []
    for path in args.reports:
        p = Path(path)
        fields = read_report(p / "report.txt" if p.is_dir() else p)
        missing = [c for c in REPORT_COLUMNS if c not in fields]
        if missing:
            raise ValidationError(f"{path}: not a faithfulness report (missing {', '.join(missing)})")
        rows.append([str(path)] + [fields[c] for c in REPORT_COLUMNS])
    header = ["source", *REPORT_COLUMNS]
    if args.out:
        _ensure_parent(args.out)
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows([header, *rows])
    w = csv.writer(sys.stdout)
    w.writerows([header, *rows])
    return ({"summary": args.out} if args.out else {}), {"reports": len(rows)}


# ------------------------------------------------------------------ parser

COMMANDS = {"gen": cmd_gen, "train": cmd_train, "fit-experts": cmd_fit_experts,
            "fit-surrogate": cmd_fit_surrogate, "explain": cmd_explain, "precompute": cmd_precompute,
            "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rangexplain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required)
        p.add_argument("--manifest", help="manifest path (default: next to --out)")
        return p

    def model_inputs(p, bank=True, heads=False):
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True, help="dataset CSV")
        p.add_argument("--target", default="target", help="target column name")
        p.add_argument("--stats", help="standardization stats written by train --standardize")
        if bank:
            p.add_argument("--bank", required=True)
        if heads:
            p.add_argument("--heads", help="surrogate heads (required for LRP of experts and queries)")

    def method_args(p, default="ig"):
        p.add_argument("--method", default=default, help="shapley | shapley_sampled | ig | lrp")
        p.add_argument("--steps", type=int, default=256, help="integrated gradients steps")
        p.add_argument("--permutations", type=int, default=1000, help="sampled Shapley permutations")

    p = command("gen", "generate a synthetic dataset")
    p.add_argument("kind", choices=("friedman", "range_strategy", "wind"))
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--m", type=int, default=3, help="number of output ranges (range_strategy)")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--target", default="target")

    p = command("train", "train an MLP regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="target")
    p.add_argument("--hidden", default="64,64")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr-schedule", choices=("constant", "linear"), default="constant")
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = command("fit-experts", "fit a range-expert bank to model outputs")
    model_inputs(p, bank=False)
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--breakpoints", help="custom breakpoints relative to the offset, starting at 0")
    p.add_argument("--bounded-top", action="store_true")

    p = command("fit-surrogate", "fit surrogate expert heads")
    model_inputs(p)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--init", choices=disentangle.INITS, default="conditional_pca")
    p.add_argument("--attach-layer", type=int)
    p.add_argument("--perturbation-target", choices=("clean", "model"), default="clean")
    p.add_argument("--lr-schedule", choices=("constant", "linear"), default="linear")
    p.add_argument("--no-dropout", action="store_true")
    p.add_argument("--train-bias", action="store_true")
    p.add_argument("--validate", type=int, default=0, metavar="N", help="probe N samples for strategy agreement")

    p = command("explain", "explain a range query", out_required=False)
    model_inputs(p, heads=True)
    method_args(p)
    p.add_argument("--query", required=True, help="step:ref=<f> | sigmoid:center=<f>,temp=<f> | weights:<f>,...")
    p.add_argument("--samples", default="0", help="all | a:b | i,j,k")
    p.add_argument("--baseline", default="mean", help="mean | zero | fixed:... | conditional:ref=,delta=,draws=")
    p.add_argument("--mode", choices=("basis_sum", "direct"), default="basis_sum")
    p.add_argument("--from-basis", help="answer from a precomputed basis archive")

    p = command("precompute", "precompute per-sample attribution matrices")
    model_inputs(p, heads=True)
    method_args(p)
    p.add_argument("--samples", default="all")
    p.add_argument("--baseline", default="mean")

    p = command("evaluate", "compare naive and range-query faithfulness (ABC)")
    model_inputs(p, heads=True)
    method_args(p)
    p.add_argument("--query", required=True)
    p.add_argument("--slice", help="lo,hi prediction window (default: snapped step reference to top)")
    p.add_argument("--baseline", default="mean", help="explanation baseline (ignored by lrp)")
    p.add_argument("--eval-ref", type=float, help="conditional baseline reference (default: slice start)")
    p.add_argument("--delta-frac", type=float, default=0.025, help="baseline tolerance as a fraction of the span")
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--subtraction", action="store_true", help="also run the subtraction-flipping sweep")
    p.add_argument("--svg", action="store_true", help="write SVG plots of the mean curves")

    p = command("report", "summarize evaluation reports as CSV", out_required=False)
    p.add_argument("reports", nargs="+", help="report files or evaluate output directories")
    return parser


def _manifest_path(args):
    if args.manifest:
        return Path(args.manifest)
    if args.out:
        out = Path(args.out)
        return out / "manifest.json" if out.is_dir() or not out.suffix else out.with_suffix(".manifest.json")
    return Path(f"rangexplain-{args.command}.manifest.json")


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    params = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    inputs = {k: v for k, v in params.items()
              if k in ("data", "model", "bank", "heads", "stats", "from_basis", "reports") and v}
    manifest = RunManifest(args.command, list(argv), params, {"seed": args.seed}, inputs)
    start = time.perf_counter()
    status = 0
    try:
        manifest.outputs, manifest.results = COMMANDS[args.command](args)
    except (RangeExplainError, OSError) as exc:
        manifest.status = "error"
        manifest.error = {"type": type(exc).__name__, "message": str(exc)}
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        status = 1
    manifest.duration_s = time.perf_counter() - start
    path = _manifest_path(args)
    try:
        _ensure_parent(path)
        manifest.write(path)
    except OSError as exc:
        print(f"error: cannot write manifest {path}: {exc}", file=sys.stderr)
        status = 1
    return status


def replay(manifest_path) -> int:
    """Re-run the command recorded in a manifest."""
    recorded = json.loads(Path(manifest_path).read_text())
    return run(recorded["argv"])


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv[:1] == ["--replay"]:
        if len(argv) != 2:
            print("usage: rangexplain --replay MANIFEST", file=sys.stderr)
            return 2
        try:
            return replay(argv[1])
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot replay {argv[1]}: {exc}", file=sys.stderr)
            return 1
    try:
        return run(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
