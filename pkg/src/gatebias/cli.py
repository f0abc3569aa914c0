"""Command-line driver: one subcommand per pipeline stage.

Stages communicate through files in the work directory; human-facing reports
(JSON, CSV, SVG) go to the report directory. Every JSON artifact carries the
config hash and seed of the run that produced it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import dataset as dsm
from . import diagnosis, discovery, plots, probe, sae, steering, surrogate
from .config import REPORT_DIR_ENV, PipelineConfig, load_config
from .errors import ConfigError, DataError, GateBiasError

log = logging.getLogger("gatebias")

ACTIVATIONS = "activations.bin"
SPLIT = "split.bin"
GROUND_TRUTH = "ground_truth.json"
CHECKPOINT = "sae.ckpt"
BASIS = "basis.json"
PLANS = "plans.json"

REQUIRED_REPORTS = ("sae", "discovery", "probe", "bias", "calibration", "results")


# -- artifact helpers ---------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, payload: dict, cfg: PipelineConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": cfg.config_hash, "seed": cfg.seed, **_clean(payload)}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the stage that produces it first)")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def _write_cache(ds: dsm.ActivationDataset, path: Path, cfg: PipelineConfig) -> None:
    dsm.write_cache(ds, path)
    write_json(Path(str(path) + ".json"), {"n": len(ds), "d": ds.d, "provenance": ds.provenance.name}, cfg)


def _read_cache(path: Path) -> dsm.ActivationDataset:
    if not path.exists():
        raise DataError(f"missing activation cache: {path} (run the stage that produces it first)")
    return dsm.read_cache(path)


def _write_rows(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _ground_truth(cfg: PipelineConfig):
    path = cfg.workdir() / GROUND_TRUTH
    if not path.exists():
        return None
    return surrogate.GroundTruth.from_json(read_json(path, "ground truth")["ground_truth"])


def _load_sae(cfg: PipelineConfig) -> sae.SaeModel:
    path = cfg.workdir() / CHECKPOINT
    if not path.exists():
        raise DataError(f"missing SAE checkpoint: {path} (run train-sae first)")
    return sae.load_checkpoint(path)


def _load_basis(cfg: PipelineConfig, model: sae.SaeModel):
    doc = read_json(cfg.workdir() / BASIS, "feature basis")
    return (discovery.FeatureSet.from_json(doc["CALL"], model.M),
            discovery.FeatureSet.from_json(doc["NO_CALL"], model.M))


def _load_plans(cfg: PipelineConfig) -> list[steering.SteeringPlan]:
    doc = read_json(cfg.workdir() / PLANS, "steering plan file")
    return [steering.SteeringPlan.from_json(p) for p in doc["plans"]]


def _cal(cfg: PipelineConfig) -> dsm.ActivationDataset:
    return _read_cache(cfg.workdir() / SPLIT).in_split(dsm.Split.CAL)


def _test(cfg: PipelineConfig) -> dsm.ActivationDataset:
    return _read_cache(cfg.workdir() / SPLIT).in_split(dsm.Split.TEST)


# -- stages ------------------------------------------------------------------------------


def cmd_simulate(cfg: PipelineConfig, args) -> None:
    ds, gt = surrogate.generate(cfg.surrogate)
    _write_cache(ds, cfg.workdir() / ACTIVATIONS, cfg)
    write_json(cfg.workdir() / GROUND_TRUTH, {"ground_truth": gt.to_json()}, cfg)
    write_json(cfg.report_dir() / "simulate.json", {
        "n": len(ds),
        "d": ds.d,
        "counts": dsm.counts(ds),
        "planted_neutral_margin": cfg.surrogate.neutral_margin,
        "call_rate": float(ds.call_mask.mean()) if len(ds) else None,
        "required_call_rate": float(gt.required_call.mean()) if len(ds) else None,
    }, cfg)


def cmd_ingest(cfg: PipelineConfig, args) -> None:
    if not args.input:
        raise ConfigError("ingest needs --input path/to/records.jsonl")
    d = args.d if args.d is not None else cfg.surrogate.d
    ds = dsm.ingest(args.input, d)
    _write_cache(ds, cfg.workdir() / ACTIVATIONS, cfg)
    write_json(cfg.report_dir() / "ingest.json", {"n": len(ds), "d": ds.d, "counts": dsm.counts(ds)}, cfg)


def cmd_split(cfg: PipelineConfig, args) -> None:
    ds = _read_cache(cfg.workdir() / ACTIVATIONS)
    out = dsm.split(ds, cfg.split.cal_fraction, seed=cfg.stage_seed("split"))
    _write_cache(out, cfg.workdir() / SPLIT, cfg)
    per = {s.name: dsm.counts(out.in_split(s)) for s in (dsm.Split.CAL, dsm.Split.TEST)}
    write_json(cfg.report_dir() / "split.json", {"cal_fraction": cfg.split.cal_fraction, "counts": per}, cfg)


def cmd_train_sae(cfg: PipelineConfig, args) -> None:
    ds = _read_cache(cfg.workdir() / SPLIT)
    pool = ds.subset(ds.split != dsm.Split.TEST)
    gt = _ground_truth(cfg)
    seed = cfg.stage_seed("train-sae")
    if gt is not None and ds.provenance is dsm.Provenance.SURROGATE:
        stage1 = surrogate.broad_corpus(gt, cfg.corpus.size, seed, cfg.corpus.n_active, cfg.corpus.scale)
    else:
        stage1 = pool.H
    model, trace = sae.train(stage1, pool.H, cfg.sae, seed=seed)
    sae.save_checkpoint(model, cfg.workdir() / CHECKPOINT, {
        "config_hash": cfg.config_hash, "seed": cfg.seed, "stage_seed": seed,
        "hyper": cfg.sae.model_dump(mode="json"), "stage_boundary": trace.stage_boundary,
    })
    diag = sae.diagnostics(model, pool.H)
    idx = np.unique(np.linspace(0, trace.losses.size - 1, min(400, trace.losses.size)).astype(np.int64))
    write_json(cfg.report_dir() / "sae.json", {
        "d": model.d,
        "M": model.M,
        "K": model.k,
        "diagnostics": diag,
        "final_loss": float(trace.losses[-1]),
        "dead_features_per_stage": list(trace.dead_features),
        "stage_boundary": trace.stage_boundary,
        "loss_curve": {"step": idx.tolist(), "loss": trace.losses[idx].tolist()},
    }, cfg)


def cmd_discover(cfg: PipelineConfig, args) -> None:
    cal = _cal(cfg)
    model = _load_sae(cfg)
    runs, basis = [], None
    for R in cfg.discovery.R:
        C, N = discovery.discover(cal, model, R)
        runs.append({"R": R, "CALL": C.to_json(), "NO_CALL": N.to_json()})
        if R == cfg.discovery.use_R:
            basis = (C, N)
    C, N = basis
    write_json(cfg.workdir() / BASIS, {"CALL": C.to_json(), "NO_CALL": N.to_json()}, cfg)
    rep = cfg.report_dir()
    write_json(rep / "discovery.json", {"use_R": cfg.discovery.use_R, "runs": runs,
                                        "sizes": {"CALL": len(C), "NO_CALL": len(N)}}, cfg)
    for fs in (C, N):
        discovery.write_feature_csv(fs, rep / f"features_{fs.side.value}.csv")
    coords = discovery.dictionary_pca(model)
    _write_rows(rep / "dictionary_pca.csv",
                [["feature_id", "pc1", "pc2"]] + [[j, f"{a:.6g}", f"{b:.6g}"] for j, (a, b) in enumerate(coords)])


def cmd_probe(cfg: PipelineConfig, args) -> None:
    cal = _cal(cfg)
    model = _load_sae(cfg)
    C, N = _load_basis(cfg, model)
    out = {}
    seed = cfg.stage_seed("probe")
    for sets in ([C], [N], [C, N]):
        curve = probe.cv_curves(cal, model, sets, cfg.probe.counts, cfg.probe.folds, seed, cfg.probe.l2)
        out[curve.side] = curve.to_json()
        rows = [["count", *(f"{k}_{s}" for k in probe.InputKind for s in ("mean", "std"))]]
        for i, k in enumerate(curve.counts):
            rows.append([k, *(f"{getattr(curve, s)[kind.value][i]:.6f}" for kind in probe.InputKind
                              for s in ("mean", "std"))])
        _write_rows(cfg.report_dir() / f"probe_{curve.side}.csv", rows)
    write_json(cfg.report_dir() / "probe.json", {"folds": cfg.probe.folds, "curves": out}, cfg)


def cmd_diagnose(cfg: PipelineConfig, args) -> None:
    cal = _cal(cfg)
    model = _load_sae(cfg)
    C, N = _load_basis(cfg, model)
    fit = diagnosis.diagnose(cal, model, C.ids, N.ids)
    geo = diagnosis.geometry_export(cal, model, C.ids, N.ids, fit)
    geo.write_csv(cfg.report_dir() / "geometry.csv")
    contrast = []
    if cal.has_correctness:
        contrast = [diagnosis.failure_contrast(cal, model, fs).to_json() for fs in (C, N)]
    write_json(cfg.report_dir() / "bias.json", {
        **fit.to_json(),
        "curve": {"grid": geo.grid, "p_call": geo.curve},
        "failure_contrast": contrast,
    }, cfg)


def cmd_calibrate(cfg: PipelineConfig, args) -> None:
    cal = _cal(cfg)
    model = _load_sae(cfg)
    C, N = _load_basis(cfg, model)
    plans = steering.budget_sweep(cal, model, C, N, cfg.steering.rs, cfg.steering.alpha)
    write_json(cfg.workdir() / PLANS, {"plans": [p.to_json() for p in plans]}, cfg)
    write_json(cfg.report_dir() / "calibration.json", {
        "alpha": cfg.steering.alpha,
        "plans": [{"r": p.r, "status": p.status.value, "delta_r": p.delta_r, "beta_r": p.fit.beta,
                   "beta0_r": p.fit.beta0} for p in plans],
        "skipped": [p.r for p in plans if p.status is steering.PlanStatus.SKIPPED],
    }, cfg)


def _margin_shifts(model, H, plans) -> dict:
    return {str(p.r): steering.realized_margin_shift(model, H, p)
            for p in plans if p.status is steering.PlanStatus.OK}


def cmd_steer(cfg: PipelineConfig, args) -> None:
    plans = _load_plans(cfg)
    test = _test(cfg)
    model = _load_sae(cfg)
    ok = [p for p in plans if p.status is steering.PlanStatus.OK]
    if not ok:
        raise DataError("every steering plan was skipped; nothing to apply")
    r = cfg.steering.steer_r if cfg.steering.steer_r is not None else ok[0].r
    plan = next((p for p in plans if p.r == r), None)
    if plan is None:
        raise DataError(f"no steering plan for r={r} in {cfg.workdir() / PLANS}")
    steered = test.with_activations(steering.apply(test.H, plan).astype(np.float32))
    _write_cache(steered, cfg.workdir() / f"steered_r{r}.bin", cfg)
    write_json(cfg.report_dir() / "margin_shift.json", {"applied_r": r, "shifts": _margin_shifts(model, test.H, plans)},
               cfg)


def cmd_evaluate(cfg: PipelineConfig, args) -> None:
    plans = _load_plans(cfg)
    test = _test(cfg)
    model = _load_sae(cfg)
    C, N = _load_basis(cfg, model)
    gt = _ground_truth(cfg)
    skipped = [p.r for p in plans if p.status is steering.PlanStatus.SKIPPED]
    rs = [p.r for p in plans]
    if test.provenance is not dsm.Provenance.SURROGATE or gt is None:
        log.warning("no planted decision process for these activations; reporting margin shifts only")
        write_json(cfg.report_dir() / "results.json", {"methods": [], "skipped": skipped,
                                                       "margin_shifts": _margin_shifts(model, test.H, plans)}, cfg)
        return
    seed = cfg.stage_seed("evaluate")
    results = [
        steering.evaluate(test, gt, cfg.surrogate, m, rs, sae=model, C=C, N=N, plans=plans, seed=seed,
                          suppress_factor=cfg.steering.suppress_factor, promote_factor=cfg.steering.promote_factor)
        for m in steering.Method
    ]
    steering.write_results_csv(results, cfg.report_dir() / "results.csv")
    write_json(cfg.report_dir() / "results.json", {"methods": [r.to_json() for r in results], "skipped": skipped,
                                                   "n_test": len(test)}, cfg)


# -- report --------------------------------------------------------------------------------


def _read_geometry(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"missing geometry export: {path} (run diagnose first)")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plots(reports: dict, geometry: list[dict], outdir: Path) -> list[Path]:
    """Write the SVG figures for a set of stage reports; returns the paths written."""
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, svg):
        p = outdir / name
        p.write_text(svg, encoding="utf-8")
        written.append(p)

    s = reports["sae"]
    steps = s["loss_curve"]["step"]
    logloss = [math.log10(max(v, 1e-300)) for v in s["loss_curve"]["loss"]]
    put("sae_loss.svg", plots.line_chart(steps, {"loss": logloss}, "SAE training loss", "step", "log10 loss"))

    use = reports["discovery"]["use_R"]
    run = next(r for r in reports["discovery"]["runs"] if r["R"] == use)
    for side in ("CALL", "NO_CALL"):
        feats = run[side]["features"][:20]
        put(f"features_{side}.svg", plots.bar_chart(
            [f["id"] for f in feats], [f["delta_ce"] for f in feats],
            f"{side} features: mean activation gap (R={use})", "feature id", "mean gap"))

    for side, curve in reports["probe"]["curves"].items():
        series = {k: [float("nan") if v is None else v for v in curve["mean"][k]] for k in curve["mean"]}
        put(f"probe_{side}.svg", plots.line_chart(curve["counts"], series, f"{side} probe AUROC",
                                                  "feature count", "mean AUROC", (0.4, 1.02), dashed=("RAW",)))

    groups: dict[str, tuple[list, list]] = {"CALL": ([], []), "NO_CALL": ([], [])}
    for row in geometry:
        g = groups[row["decision"]]
        g[0].append(float(row["a_N"]))
        g[1].append(float(row["a_C"]))
    put("geometry.svg", plots.scatter(groups, "Response-conditioned activation geometry", "a_N", "a_C"))

    b = reports["bias"]
    grid, p = b["curve"]["grid"], b["curve"]["p_call"]
    if p is None:
        p = [float("nan")] * len(grid)
    put("decision_curve.svg", plots.line_chart(grid, {"P(CALL)": p, "0.5": [0.5] * len(grid)},
                                               f"Decision curve (m* = {b['m_star']:.3g})",
                                               "standardized margin", "P(CALL)", (0.0, 1.0), dashed=("0.5",)))
    return written


def cmd_report(cfg: PipelineConfig, args) -> None:
    rep = cfg.report_dir()
    reports, hashes = {}, {}
    for name in REQUIRED_REPORTS + ("simulate", "split", "margin_shift"):
        path = rep / f"{name}.json"
        if name not in REQUIRED_REPORTS and not path.exists():
            continue
        doc = read_json(path, f"{name} report")
        reports[name] = doc
        hashes[name] = doc.get("config_hash")
    bad = sorted(n for n, h in hashes.items() if h != cfg.config_hash)
    if bad:
        raise DataError(f"reports {', '.join(bad)} were produced under a different config hash; "
                        f"re-run those stages with this config")
    geometry = _read_geometry(rep / "geometry.csv")
    figures = emit_plots(reports, geometry, rep / "figures")
    b = reports["bias"]
    summary = {
        "sae": {"fraction_variance_explained": reports["sae"]["diagnostics"]["fraction_variance_explained"],
                "dead_feature_count": reports["sae"]["diagnostics"]["dead_feature_count"]},
        "basis_sizes": reports["discovery"]["sizes"],
        "bias": {k: b[k] for k in ("beta", "beta0", "m_star", "n", "valid")},
        "m_star_negative": b["m_star"] is not None and b["m_star"] < 0,
        "steering": {m["method"]: m["mean"] for m in reports["results"]["methods"]},
        "skipped_r": reports["results"]["skipped"],
        "geometry_points": len(geometry),
        "figures": [p.name for p in figures],
    }
    write_json(rep / "summary.json", summary, cfg)
    print(json.dumps(_clean(summary), indent=2, sort_keys=True))


COMMANDS = {
    "simulate": (cmd_simulate, "generate surrogate activations with a planted calling offset"),
    "ingest": (cmd_ingest, "load external residual dumps and judge labels from JSONL"),
    "split": (cmd_split, "assign stratified calibration/test splits"),
    "train-sae": (cmd_train_sae, "train the TopK sparse autoencoder"),
    "discover": (cmd_discover, "rank CALL and NO_CALL features"),
    "probe": (cmd_probe, "cross-validated probe AUROC curves"),
    "diagnose": (cmd_diagnose, "fit the margin bias model and export activation geometry"),
    "calibrate": (cmd_calibrate, "build steering plans over the budget sweep"),
    "steer": (cmd_steer, "apply a plan to test activations and measure realized margin shifts"),
    "evaluate": (cmd_evaluate, "score INIT, SUPPRESS, PROMOTE and AMCS on the test split"),
    "report": (cmd_report, "aggregate stage reports into a summary with SVG figures"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field by dotted path, e.g. steering.alpha=0.5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(
        prog="gatebias",
        description="Diagnose and correct a calling offset in tool-use gating decisions.",
        epilog=f"Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure. "
               f"${REPORT_DIR_ENV} overrides the report directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "ingest":
            p.add_argument("--input", help="JSONL file of records")
            p.add_argument("--d", type=int, help="activation width (default: surrogate.d)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command][0](cfg, args)
    except GateBiasError as exc:
        print(f"gatebias {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
