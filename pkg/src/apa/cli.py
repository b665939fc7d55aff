"""
Command-line front end.

Every command reads one JSON run config (``--config``), lets a few flags
override it, and writes its artifacts under the configured output directory::

    apa synth --spec phantom.json --out study
    apa run --config study/config.json
    apa evaluate --config study/config.json --emit-plots

Failures print a JSON object ``{"status": "error", "stage": ..., "field": ...,
"message": ...}`` on stderr and exit nonzero (2 for configuration problems,
1 for stage failures).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apa.classify import (ClassifierConfig, EcocModel, EnsembleClassifier, LabeledDataset,
                          train_ecoc_ova, train_imbalance_adaboost)
from apa.evaluation import correlation_dump, cross_validate, roc_curve, write_matrix_csv, write_roc_csv
from apa.extract import (FeatureTable, ProcessedSession, apply_beta_mask,
                         build_feature_table, partition_conditions, pool_atlas_features, sum_condition)
from apa.glm import (HrfParams, NoiseModel, OnsetTable, PositiveBetaMaps, build_design_matrix,
                     estimate_gls, positive_mask, stack_maps, unstack_maps)
from apa.parallel import parallel_map, worker_count
from apa.pipeline import REGISTRATION_MODES, PipelineConfig, register_condition
from apa.register import METRIC_ALIASES, METRICS, SearchConfig, SimilarityMetric
from apa.synth import generate_study, load_spec, reference_template, save_spec
from apa.volume import AtlasVolume, SessionMeta, Volume4D, load_volume, save_volume

logger = logging.getLogger("apa")

STAGES = ("glm", "extract", "register", "features", "train", "evaluate")
SESSION_FILES = ("bold.apav", "onsets.csv", "session.json")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, field_name: str | None = None):
        super().__init__(message)
        self.stage = stage
        self.field = field_name


@dataclass
class RunConfig:
    output_dir: Path
    sessions: list = field(default_factory=list)
    atlas: Path | None = None
    reference: Path | None = None
    pipeline: PipelineConfig = PipelineConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    eval_mode: str = "multiclass"
    positive: str | None = None
    baseline: bool = True
    stages: tuple = STAGES

    @property
    def features_path(self) -> Path:
        return self.output_dir / "features.csv"

    @property
    def model_path(self) -> Path:
        return self.output_dir / "model.json"


def _section(cfg: dict, name: str, allowed) -> dict:
    sec = cfg.get(name, {})
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(name, f"section {name!r} must be an object")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", f"unknown key {unknown[0]!r} in section {name!r}")
    return sec


def _build(cls, sec: dict, section: str, **extra):
    try:
        return cls(**sec, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, f"invalid {section} settings: {exc}") from None


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Turn a JSON object into a RunConfig; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config", "config must be a JSON object")
    top = {"paths", "hrf", "noise", "extract", "registration", "classifier", "evaluation", "stages"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(unknown[0], f"unknown config section {unknown[0]!r}")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    paths = _section(raw, "paths", {"sessions", "atlas", "reference", "output_dir"})
    sessions = paths.get("sessions", [])
    if isinstance(sessions, str):
        pattern = str(resolve(sessions))
        sessions = sorted(glob.glob(pattern))
        if not sessions:
            raise ConfigError("paths.sessions", f"no session directories match {pattern}")
    elif not isinstance(sessions, list):
        raise ConfigError("paths.sessions", "sessions must be a list of directories or a glob pattern")
    out = paths.get("output_dir", "out")

    hrf = _build(HrfParams, _section(raw, "hrf", [f.name for f in dataclasses.fields(HrfParams)]), "hrf")
    noise = _build(NoiseModel, _section(raw, "noise", ["kind", "rho", "sigma2"]), "noise")
    ext = _section(raw, "extract", ["lag_scans"])
    search_keys = [f.name for f in dataclasses.fields(SearchConfig)]
    reg = dict(_section(raw, "registration", ["mode", "metric", "n_bins"] + search_keys))
    mode = reg.pop("mode", "per_condition")
    if mode not in REGISTRATION_MODES:
        raise ConfigError("registration.mode", f"registration mode must be one of {REGISTRATION_MODES}")
    metric_name = reg.pop("metric", "normalized_mutual_information")
    metric_name = METRIC_ALIASES.get(metric_name, metric_name)
    if metric_name not in METRICS:
        raise ConfigError("registration.metric", f"unknown metric {metric_name!r}")
    metric = _build(SimilarityMetric, {"kind": metric_name, "n_bins": reg.pop("n_bins", 64)},
                    "registration")
    if "levels" in reg:
        reg["levels"] = tuple(reg["levels"])
    try:
        search = dataclasses.replace(PipelineConfig().search, **reg)
    except (TypeError, ValueError) as exc:
        raise ConfigError("registration", f"invalid registration settings: {exc}") from None
    pipeline = _build(PipelineConfig, {"hrf": hrf, "noise": noise, "lag_scans": ext.get("lag_scans", 2),
                                       "registration": mode, "metric": metric, "search": search}, "extract")
    clf = _build(ClassifierConfig, _section(raw, "classifier", ["seed", "max_depth", "min_leaf_weight"]),
                 "classifier")
    ev = _section(raw, "evaluation", ["mode", "positive", "baseline"])
    eval_mode = ev.get("mode", "multiclass")
    if eval_mode not in ("multiclass", "binary"):
        raise ConfigError("evaluation.mode", "evaluation mode must be 'multiclass' or 'binary'")
    stages = raw.get("stages", list(STAGES))
    bad = [s for s in stages if s not in STAGES] if isinstance(stages, list) else ["?"]
    if bad:
        raise ConfigError("stages", f"stages must be a list drawn from {STAGES}")
    return RunConfig(output_dir=resolve(out), sessions=[resolve(s) for s in sessions],
                     atlas=resolve(paths["atlas"]) if paths.get("atlas") else None,
                     reference=resolve(paths["reference"]) if paths.get("reference") else None,
                     pipeline=pipeline, classifier=clf, eval_mode=eval_mode,
                     positive=ev.get("positive"), baseline=bool(ev.get("baseline", True)),
                     stages=tuple(s for s in STAGES if s in stages))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
    return parse_config(raw, path.parent)


def validate_inputs(cfg: RunConfig, stages) -> None:
    """Check that the files the selected stages read exist."""
    needs_sessions = bool({"glm", "extract", "register", "features"} & set(stages))
    if needs_sessions:
        if not cfg.sessions:
            raise ConfigError("paths.sessions", "no sessions configured")
        for i, s in enumerate(cfg.sessions):
            for name in SESSION_FILES:
                if not (s / name).is_file():
                    raise ConfigError(f"paths.sessions[{i}]", f"session {s} is missing {name}")
    if {"features"} & set(stages) or "register" in stages:
        if cfg.atlas is None or not cfg.atlas.is_file():
            raise ConfigError("paths.atlas", f"atlas file not found: {cfg.atlas}")
    if "register" in stages and cfg.pipeline.registration == "per_condition":
        if cfg.reference is None or not cfg.reference.is_file():
            raise ConfigError("paths.reference", f"reference file not found: {cfg.reference}")


# --- session I/O -------------------------------------------------------------

def load_session(path: Path):
    meta = SessionMeta.load(path / "session.json")
    data = load_volume(path / "bold.apav")
    if not isinstance(data, Volume4D):
        raise StageError("glm", f"{path / 'bold.apav'} is not a 4D series")
    onsets = OnsetTable.from_csv(path / "onsets.csv", meta.n_categories)
    return data, onsets, meta


def session_key(meta: SessionMeta) -> str:
    return f"{meta.subject_id}_{meta.session_id}"


def _stage_dir(cfg: RunConfig, stage: str, meta: SessionMeta) -> Path:
    d = cfg.output_dir / stage / session_key(meta)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cond_name(p: int, q: int) -> str:
    return f"c{p:03d}_{q:04d}.apav"


# --- stages ------------------------------------------------------------------

def stage_glm(cfg: RunConfig) -> None:
    for path in cfg.sessions:
        data, onsets, meta = load_session(path)
        design = build_design_matrix(onsets, cfg.pipeline.hrf, data.n_scans, meta.tr_seconds)
        betas = estimate_gls(data, design, cfg.pipeline.noise)
        d = _stage_dir(cfg, "glm", meta)
        save_volume(stack_maps(betas.maps), d / "betas.apav")
        save_volume(stack_maps(positive_mask(betas).maps), d / "positive_betas.apav")
        save_volume(betas.residual_variance, d / "residual_variance.apav")
        with open(d / "design.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(meta.categories)
            for row in design.values:
                w.writerow([repr(float(v)) for v in row])
        logger.info("glm: %s", session_key(meta))


def stage_extract(cfg: RunConfig) -> None:
    for path in cfg.sessions:
        data, onsets, meta = load_session(path)
        src = cfg.output_dir / "glm" / session_key(meta) / "positive_betas.apav"
        if not src.is_file():
            raise StageError("extract", f"missing upstream artifact {src}; run the glm stage first")
        pos = PositiveBetaMaps(unstack_maps(load_volume(src)))
        d = _stage_dir(cfg, "extract", meta)
        rows = []
        for cond in partition_conditions(data, onsets, meta.tr_seconds, cfg.pipeline.lag_scans):
            masked = apply_beta_mask(sum_condition(cond), pos)
            save_volume(masked.image, d / _cond_name(masked.category_index, masked.condition_index))
            rows.append([masked.category_index, masked.condition_index, " ".join(map(str, cond.scan_indices))])
        with open(d / "conditions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", "condition", "scans"])
            w.writerows(rows)
        logger.info("extract: %s, %d conditions", session_key(meta), len(rows))


def _conditions(cfg: RunConfig, meta: SessionMeta, stage: str):
    d = cfg.output_dir / "extract" / session_key(meta)
    index = d / "conditions.csv"
    if not index.is_file():
        raise StageError(stage, f"missing upstream artifact {index}; run the extract stage first")
    with open(index, newline="") as fh:
        rows = [(int(r["category"]), int(r["condition"])) for r in csv.DictReader(fh)]
    return d, rows


def _register_job(job):
    image, reference, pipeline = job
    return register_condition(image, reference, pipeline)


def stage_register(cfg: RunConfig) -> None:
    reference = load_volume(cfg.reference) if cfg.pipeline.registration == "per_condition" else None
    for path in cfg.sessions:
        meta = SessionMeta.load(path / "session.json")
        src, rows = _conditions(cfg, meta, "register")
        images = [load_volume(src / _cond_name(p, q)) for p, q in rows]
        results = parallel_map(_register_job, [(im, reference, cfg.pipeline) for im in images])
        d = _stage_dir(cfg, "register", meta)
        transforms = []
        for (p, q), (image, t) in zip(rows, results):
            save_volume(image, d / _cond_name(p, q))
            transforms.append({"category": p, "condition": q, "transform": t.to_dict()})
        _write_json(d / "transforms.json", transforms)
        logger.info("register: %s, %d conditions", session_key(meta), len(rows))


def stage_features(cfg: RunConfig) -> FeatureTable:
    atlas = load_volume(cfg.atlas)
    if not isinstance(atlas, AtlasVolume):
        raise ConfigError("paths.atlas", f"{cfg.atlas} is not an atlas volume")
    sessions = []
    for path in cfg.sessions:
        meta = SessionMeta.load(path / "session.json")
        _, rows = _conditions(cfg, meta, "features")
        src = cfg.output_dir / "register" / session_key(meta)
        if not src.is_dir():
            raise StageError("features", f"missing upstream artifact {src}; run the register stage first")
        feats = [pool_atlas_features(load_volume(src / _cond_name(p, q)), atlas, p, q,
                                     meta.subject_id, meta.session_id) for p, q in rows]
        sessions.append(ProcessedSession(meta.subject_id, meta.session_id, meta.categories,
                                         atlas.atlas_id, tuple(feats)))
    table = build_feature_table(sessions)
    table.to_csv(cfg.features_path)
    logger.info("features: %d rows x %d regions", len(table.rows), table.n_features)
    return table


def _load_table(cfg: RunConfig, stage: str) -> FeatureTable:
    if not cfg.features_path.is_file():
        raise StageError(stage, f"missing upstream artifact {cfg.features_path}; run the features stage first")
    return FeatureTable.from_csv(cfg.features_path)


def _binary_labels(table: FeatureTable, positive: str | None):
    if len(table.categories) != 2:
        raise StageError("train", f"binary mode needs 2 categories, found {list(table.categories)}")
    y = table.y
    pos = table.categories.index(positive) if positive else int(np.argmin(np.bincount(y, minlength=2)))
    return np.where(y == pos, 1, -1), [table.categories[1 - pos], table.categories[pos]]


def stage_train(cfg: RunConfig) -> None:
    table = _load_table(cfg, "train")
    if cfg.eval_mode == "binary":
        y, cats = _binary_labels(table, cfg.positive)
        model = train_imbalance_adaboost(LabeledDataset(table.X, y), cfg.classifier.tree,
                                         rng_seed=cfg.classifier.seed)
        payload = {"mode": "binary", "categories": cats, "model": model.to_dict()}
    else:
        model = train_ecoc_ova(LabeledDataset(table.X, table.y), cfg.classifier, table.categories)
        payload = {"mode": "multiclass", "categories": list(table.categories), "model": model.to_dict()}
    _write_json(cfg.model_path, payload)
    logger.info("train: model written to %s", cfg.model_path)


def predict_table(model_path: Path, table: FeatureTable) -> list:
    payload = json.loads(Path(model_path).read_text())
    cats = payload["categories"]
    X = table.X
    rows = []
    if payload["mode"] == "binary":
        model = EnsembleClassifier.from_dict(payload["model"])
        label, margin = model.decision(X)
        score = margin * model.small_label
        names = [cats[1] if l > 0 else cats[0] for l in label]
    else:
        model = EcocModel.from_dict(payload["model"])
        idx = model.predict(X)
        score = model.class_scores(X).max(axis=1)
        names = [cats[i] for i in idx]
    for r, name, s in zip(table.rows, names, score):
        rows.append([r.subject_id, r.session_id, table.categories[r.category_index], r.condition_index,
                     name, repr(float(s))])
    return rows


def stage_evaluate(cfg: RunConfig, emit_plots: bool = False, stream=None) -> dict:
    stream = stream or sys.stdout
    table = _load_table(cfg, "evaluate")
    out = cfg.output_dir
    report = cross_validate(table, cfg.classifier, mode=cfg.eval_mode, positive=cfg.positive)
    report.save(out / "report.json")
    write_matrix_csv(out / "confusion.csv", report.confusion_matrix, report.categories)
    C = correlation_dump(table, out / "correlation.csv")
    reports = {"apa": report}
    if cfg.baseline:
        base = cross_validate(table, cfg.classifier, mode=cfg.eval_mode, method="tree", positive=cfg.positive)
        base.save(out / "report_tree.json")
        reports["tree"] = base
    for name, rep in reports.items():
        print(rep.format_table(), file=stream)
        print("", file=stream)
    if emit_plots:
        emit_figures(out, table, C, report)
    return reports


def emit_figures(out: Path, table: FeatureTable, C, report) -> None:
    """CSV data for ROC curves plus PNG renderings when matplotlib is available."""
    from apa import plots

    write_roc_csv(report, out / "roc.csv")
    order = np.argsort(table.y, kind="stable")
    labels = [table.categories[i] for i in table.y[order]]
    plots.plot_correlation(C[np.ix_(order, order)], labels, out / "correlation.png")
    plots.plot_confusion(report.confusion_matrix, report.categories, out / "confusion.png")
    truth = np.array([p["truth"] for p in report.predictions])
    scores = np.array([p["scores"] for p in report.predictions], dtype=np.float64)
    if report.mode == "binary":
        curves = [(report.categories[1],) + roc_curve(scores[:, 0], truth > 0)[:2]]
    else:
        curves = [(c,) + roc_curve(scores[:, p], truth == p)[:2]
                  for p, c in enumerate(report.categories) if 0 < np.sum(truth == p) < len(truth)]
    plots.plot_roc(curves, out / "roc.png")


STAGE_FUNCS = {"glm": stage_glm, "extract": stage_extract, "register": stage_register,
               "features": stage_features, "train": stage_train}


# --- commands ----------------------------------------------------------------

def _prepare(args, stages=None) -> RunConfig:
    """Load the config, apply flag overrides and check inputs of ``stages`` (default: configured)."""
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = Path(args.output_dir)
    if getattr(args, "seed", None) is not None:
        overrides["classifier"] = dataclasses.replace(cfg.classifier, seed=args.seed)
    pipe = cfg.pipeline
    if getattr(args, "metric", None):
        kind = METRIC_ALIASES.get(args.metric, args.metric)
        if kind not in METRICS:
            raise ConfigError("registration.metric", f"unknown metric {args.metric!r}")
        pipe = dataclasses.replace(pipe, metric=SimilarityMetric(kind, pipe.metric.n_bins))
    if getattr(args, "registration", None):
        pipe = dataclasses.replace(pipe, registration=args.registration)
    if getattr(args, "lag_scans", None) is not None:
        pipe = dataclasses.replace(pipe, lag_scans=args.lag_scans)
    overrides["pipeline"] = pipe
    if getattr(args, "mode", None):
        overrides["eval_mode"] = args.mode
    cfg = dataclasses.replace(cfg, **overrides)
    validate_inputs(cfg, cfg.stages if stages is None else stages)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def _run_stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def cmd_stage(args) -> int:
    cfg = _prepare(args, [args.command])
    _run_stage(args.command, STAGE_FUNCS[args.command], cfg)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _prepare(args, ["evaluate"])
    _run_stage("evaluate", stage_evaluate, cfg, emit_plots=args.emit_plots)
    return 0


def cmd_predict(args) -> int:
    cfg = _prepare(args, ["predict"])
    model = Path(args.model) if args.model else cfg.model_path
    if not model.is_file():
        raise ConfigError("model", f"model file not found: {model}")
    feats = Path(args.features) if args.features else cfg.features_path
    if not feats.is_file():
        raise ConfigError("features", f"feature table not found: {feats}")
    rows = _run_stage("predict", predict_table, model, FeatureTable.from_csv(feats))
    with open(cfg.output_dir / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "session", "category", "condition", "predicted", "score"])
        w.writerows(rows)
    return 0


def cmd_run(args) -> int:
    cfg = _prepare(args)
    for name in cfg.stages:
        if name == "evaluate":
            _run_stage(name, stage_evaluate, cfg, emit_plots=args.emit_plots)
        else:
            _run_stage(name, STAGE_FUNCS[name], cfg)
    return 0


def cmd_synth(args) -> int:
    if not Path(args.spec).is_file():
        raise ConfigError("spec", f"phantom spec {args.spec} does not exist")
    try:
        spec, n_subjects = load_spec(args.spec)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("spec", f"invalid phantom spec: {exc}") from None
    if args.subjects is not None:
        n_subjects = args.subjects
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    study = _run_stage("synth", generate_study, spec, n_subjects)
    atlas = study[0].atlas
    save_volume(atlas, out / "atlas.apav")
    save_volume(reference_template(atlas), out / "reference.apav")
    save_spec(spec, out / "spec.json", n_subjects)
    sessions = []
    for ph in study:
        d = out / ph.meta.subject_id / ph.meta.session_id
        d.mkdir(parents=True, exist_ok=True)
        save_volume(ph.data, d / "bold.apav")
        ph.onsets.to_csv(d / "onsets.csv")
        ph.meta.save(d / "session.json")
        save_volume(stack_maps(ph.truth.maps), d / "true_betas.apav")
        sessions.append(str(d.relative_to(out)))
    config = {"paths": {"sessions": sessions, "atlas": "atlas.apav", "reference": "reference.apav",
                        "output_dir": "out"},
              "extract": {"lag_scans": 2},
              "registration": {"mode": "per_condition", "metric": "normalized_mutual_information"},
              "classifier": {"seed": 0, "max_depth": 8, "min_leaf_weight": 1.0},
              "evaluation": {"mode": "multiclass" if spec.n_categories > 2 else "binary", "baseline": True}}
    _write_json(out / "config.json", config)
    print(f"wrote {n_subjects} session(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apa", description="Anatomical pattern analysis pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom study")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", default="study", help="output directory (default: study)")
    p.add_argument("--subjects", type=int, default=None, help="override n_subjects in the spec")
    p.set_defaults(func=cmd_synth)

    def common(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--output-dir", help="override paths.output_dir")
        p.add_argument("--seed", type=int, help="override classifier.seed")
        p.add_argument("--metric", help="override registration.metric (nmi, mi, je, cr, w or full name)")
        p.add_argument("--registration", choices=REGISTRATION_MODES, help="override registration.mode")
        p.add_argument("--lag-scans", type=int, help="override extract.lag_scans")
        p.add_argument("--mode", choices=("multiclass", "binary"), help="override evaluation.mode")

    for name, text in (("glm", "estimate beta maps per session"),
                       ("extract", "sum and mask condition images"),
                       ("register", "register condition images to the reference"),
                       ("features", "pool registered images over atlas regions"),
                       ("train", "train a classifier on the feature table")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("predict", help="predict categories for a feature table")
    common(p)
    p.add_argument("--model", help="model JSON (default: <output_dir>/model.json)")
    p.add_argument("--features", help="feature CSV (default: <output_dir>/features.csv)")
    p.set_defaults(func=cmd_predict)

    for name, func, text in (("evaluate", cmd_evaluate, "leave-one-subject-out evaluation"),
                             ("run", cmd_run, "run every configured stage in order")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--emit-plots", action="store_true",
                       help="also write ROC data as CSV and PNG figures (needs matplotlib)")
        p.set_defaults(func=func)
    return parser


def _fail(stage, field_name, exc, code) -> int:
    err = {"status": "error", "stage": stage, "field": field_name,
           "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        worker_count()
        return args.func(args)
    except ConfigError as exc:
        return _fail(args.command, exc.field, exc, 2)
    except StageError as exc:
        return _fail(exc.stage, exc.field, exc, 1)
    except ValueError as exc:
        return _fail(args.command, None, exc, 2)


if __name__ == "__main__":
    sys.exit(main())
