"""Command-line entry point: ``emgauth <command> ...``.

Exit codes: 0 success, 1 domain error (bad data, unknown template, ...),
2 usage error (bad flags or config file).

Config files are JSON. Every key is optional; flags given on the command
line win over the file::

    {
      "dataset_root": "data/grabmyo",
      "output_dir": "out",
      "template_store": "out/templates.json",
      "selection": "forearm",
      "selections": ["forearm", "wrist"],
      "channel_map": {"forearm": [0, 1, 2, 3, 4, 5, 6, 7]},
      "window": {"window_len_samples": 410, "step_samples": 102},
      "fdt": {"bands": [[20, 92], [92, 163]], "taper": "none", "spectrum": "amplitude"},
      "shrinkage": 0.01,
      "reduce": "mean",
      "protocols": ["within_day", "single_cross_day", "cumulative_cross_day"],
      "scenarios": ["normal", "leaked"],
      "codelengths": [1, 2, 3, 4, 5, 6],
      "sequence_count": 50,
      "sweep_size": 512,
      "grid": {"sessions": 3, "subjects": 43, "gestures": 17, "trials": 7},
      "seed": 0
    }
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import ConfigError, FdtConfig, WindowSpec, extract_series, write_series
from .evaluation import PROTOCOLS, SCENARIOS, InvariantError, det_from_values
from .fusion import CODE_GESTURES, CodeSequence, certainty_from_score, fuse, normalize_weights
from .grabmyo_io import Grid, WfdbError, load_overrides, read_record, scan_dataset
from .harness import EvalSettings, load_features, load_report, run_evaluation, write_report
from .matcher import (
    ConfigMismatchError, enroll, load_templates, save_templates, score_attempt, score_matrix,
)
from .synthgen import GROUND_TRUTH_FILE, GroundTruth, SynthConfig, generate

log = logging.getLogger("emgauth")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or config file (exit code 2)."""


# -- run configuration -------------------------------------------------------------


@dataclass
class RunConfig:
    dataset_root: str | None = None
    output_dir: str | None = None
    template_store: str | None = None
    selection: str = "forearm"
    selections: tuple[str, ...] = ("forearm", "wrist")
    channel_map: dict | None = None
    window: WindowSpec = field(default_factory=WindowSpec)
    fdt: FdtConfig = field(default_factory=FdtConfig)
    shrinkage: float = 0.01
    reduce: str = "mean"
    protocols: tuple[str, ...] = PROTOCOLS
    scenarios: tuple[str, ...] = SCENARIOS
    codelengths: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    sequence_count: int = 50
    sweep_size: int = 512
    grid: Grid | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        doc = dict(doc)
        try:
            if "window" in doc:
                doc["window"] = WindowSpec(**doc["window"])
            if "fdt" in doc:
                fdt = dict(doc["fdt"])
                if "bands" in fdt:
                    fdt["bands"] = tuple(tuple(b) for b in fdt["bands"])
                doc["fdt"] = FdtConfig(**fdt)
            if "grid" in doc:
                doc["grid"] = Grid(**doc["grid"])
            for key in ("selections", "protocols", "scenarios", "codelengths"):
                if key in doc:
                    doc[key] = tuple(doc[key])
            return cls(**doc)
        except (TypeError, ConfigError) as exc:
            raise UsageError(f"invalid config: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fdt"]["bands"] = [list(b) for b in self.fdt.bands]
        return d

    def settings(self, selections=None) -> EvalSettings:
        try:
            return EvalSettings(
                protocols=tuple(self.protocols), scenarios=tuple(self.scenarios),
                selections=tuple(selections or self.selections), codelengths=tuple(self.codelengths),
                sequence_count=self.sequence_count, rng_seed=self.seed, shrinkage=self.shrinkage,
                reduce=self.reduce, sweep_size=self.sweep_size, window=self.window, fdt=self.fdt,
                channel_map=self.channel_map,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def load_run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    for flag in ("selection", "shrinkage", "sequence_count"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    for flag in ("selections", "protocols", "scenarios", "codelengths"):
        value = getattr(args, flag, None)
        if value:
            setattr(cfg, flag, tuple(value))
    return cfg


def _grid_for(root: Path, cfg: RunConfig, args) -> Grid:
    """Explicit ``--grid``, else the config, else a synthetic tree's own size, else the full grid."""
    if getattr(args, "grid", None):
        return Grid(*args.grid)
    if cfg.grid is not None:
        return cfg.grid
    truth = root / GROUND_TRUTH_FILE
    if truth.is_file():
        c = GroundTruth.from_json(truth.read_text()).config
        return Grid(c.session_count, c.subject_count, c.gesture_count, c.trial_count)
    return Grid()


def _root(args, cfg: RunConfig) -> Path:
    root = getattr(args, "root", None) or cfg.dataset_root
    if not root:
        raise UsageError("no dataset root given (positional ROOT or dataset_root in the config)")
    return Path(root)


def _scan(args, cfg):
    root = _root(args, cfg)
    overrides = load_overrides(args.overrides) if getattr(args, "overrides", None) else None
    return scan_dataset(root, _grid_for(root, cfg, args), overrides)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# -- commands ----------------------------------------------------------------------


def cmd_scan(args, cfg: RunConfig) -> int:
    manifest = _scan(args, cfg)
    print(f"root: {manifest.root}")
    print(f"records: {len(manifest.entries)}")
    print(f"missing: {len(manifest.missing)}")
    print(f"warnings: {len(manifest.warnings)}")
    for w in manifest.warnings:
        log.warning(w)
    summary = {
        "root": manifest.root,
        "grid": asdict(manifest.grid),
        "records": len(manifest.entries),
        "complete": manifest.complete,
        "missing": [list(k) for k in manifest.missing],
        "warnings": manifest.warnings,
        "subjects": manifest.subjects(),
    }
    print(json.dumps(summary, sort_keys=True))
    if args.output:
        Path(args.output).write_text(manifest.to_json())
    if not manifest.entries:
        log.error("no records found below %s", manifest.root)
        return EXIT_DOMAIN
    if manifest.complete or args.allow_partial:
        return EXIT_OK
    log.error("%d records missing (use --allow-partial to accept)", len(manifest.missing))
    return EXIT_DOMAIN


def cmd_features(args, cfg: RunConfig) -> int:
    manifest = _scan(args, cfg)
    settings = cfg.settings([cfg.selection])
    selection = settings.selection(cfg.selection)
    out = Path(args.output or cfg.output_dir or "features")
    n = 0
    for entry in manifest.entries:
        series = extract_series(read_record(manifest.path(*entry.key())), selection, cfg.window, cfg.fdt)
        path = out / entry.path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_series(path.with_suffix(".csv"), series)
        n += 1
    meta = {"config_hash": settings.feature_hash(cfg.selection), "seed": cfg.seed,
            "config": cfg.to_dict(), "records": n}
    out.mkdir(parents=True, exist_ok=True)
    (out / "features.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    print(f"wrote {n} feature series to {out}")
    return EXIT_OK


def eer_threshold(genuine, impostor) -> float:
    """Score threshold at the equal-error point (accept iff score <= threshold).

    Among sweep points with the smallest max(FAR, FRR) the first is taken,
    then moved halfway to the next pooled score so the calibration decisions
    are unchanged but unseen attempts get some margin.
    """
    curve = det_from_values(genuine, impostor)
    t = np.asarray(curve.thresholds)
    gap = np.maximum(curve.far, curve.frr)
    finite = np.isfinite(t)
    best = float(t[np.flatnonzero(finite & (gap == gap[finite].min()))[0]])
    pooled = np.concatenate([np.asarray(genuine, float), np.asarray(impostor, float)])
    above = pooled[pooled > best]
    return (best + float(above.min())) / 2.0 if above.size else best


def cmd_enroll(args, cfg: RunConfig) -> int:
    manifest = _scan(args, cfg)
    settings = cfg.settings([cfg.selection])
    selection = settings.selection(cfg.selection)
    gestures = tuple(args.gestures or CODE_GESTURES)
    session = args.session
    trials = tuple(args.trials or range(1, manifest.grid.trials + 1))
    if len(trials) < 2:
        raise UsageError("enrollment needs at least two trials")
    subjects = [j for j in manifest.subjects()
                if manifest.session_complete(j, session, gestures, trials)]
    if len(subjects) < 2:
        raise ValueError(f"session {session}: fewer than two subjects with complete enrollment data")
    feats = load_features(manifest, selection, cfg.window, cfg.fdt, gestures, set(subjects), args.jobs,
                          sessions={session})

    templates, accuracy = [], {}
    for g in gestures:
        eers = []
        for j in subjects:
            own = [feats[(session, j, g, t)] for t in trials]
            full = enroll(np.concatenate(own), j, g, cfg.shrinkage)
            genuine = []
            for i in range(len(trials)):  # leave one trial out
                rest = np.concatenate([v for k, v in enumerate(own) if k != i])
                genuine.append(score_matrix(own[i], enroll(rest, j, g, cfg.shrinkage)).mean())
            impostor = [score_matrix(feats[(session, k, g, t)], full).mean()
                        for k in subjects if k != j for t in trials]
            threshold = eer_threshold(genuine, impostor)
            eers.append(float(det_from_values(genuine, impostor).eer))
            templates.append(full.with_threshold(threshold))
        accuracy[str(g)] = 1.0 - float(np.mean(eers))
        log.info("gesture %d: mean enrollment EER %.4f", g, np.mean(eers))

    store = Path(args.store or cfg.template_store or "templates.json")
    store.parent.mkdir(parents=True, exist_ok=True)
    extra = {"accuracy": accuracy, "session": session, "trials": list(trials), "seed": cfg.seed,
             "config": cfg.to_dict()}
    save_templates(store, templates, cfg.selection, settings.feature_hash(cfg.selection), extra)
    print(f"enrolled {len(templates)} templates ({len(subjects)} users x {len(gestures)} gestures) -> {store}")
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    store_path = args.store or cfg.template_store
    if not store_path:
        raise UsageError("no template store given (--store or template_store in the config)")
    settings = cfg.settings([cfg.selection])
    store = load_templates(store_path, settings.feature_hash(cfg.selection))
    selection = settings.selection(store.selection)
    try:
        sequence = CodeSequence(tuple(args.sequence))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(args.records) != len(sequence):
        raise UsageError(f"{len(sequence)} codes but {len(args.records)} records")
    templates = [store.get(args.user, g) for g in sequence]
    if any(t.threshold is None for t in templates):
        raise ValueError("template store has no thresholds; re-run enroll")
    weights = normalize_weights({int(k): v for k, v in store.extra["accuracy"].items()}, sequence)

    rows, certainties = [], []
    for code, path, t, w in zip(sequence, args.records, templates, weights.normalized):
        base = str(path)[:-4] if str(path).endswith((".hea", ".dat")) else str(path)
        series = extract_series(read_record(base), selection, cfg.window, cfg.fdt)
        score = score_attempt(series, t, cfg.reduce)
        d = certainty_from_score(score, t.threshold)
        certainties.append(d)
        rows.append({"code": code, "record": base, "score": score.value, "threshold": t.threshold,
                     "certainty": d, "weight": w})
    decision = fuse(certainties, weights)
    if args.json:
        print(json.dumps({"user": args.user, "codes": rows, "g": decision.discriminant,
                          "accepted": decision.accepted, "config_hash": store.config_hash},
                         sort_keys=True))
    else:
        for r in rows:
            print(f"code {r['code']:2d}  score {r['score']:.4f}  threshold {r['threshold']:.4f}  "
                  f"d={r['certainty']}  w={r['weight']:.4f}  {r['record']}")
        print(f"g = {decision.discriminant:.4f}")
        print("ACCEPT" if decision.accepted else "REJECT")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = _scan(args, cfg)
    if not manifest.entries:
        raise ValueError(f"no records found below {manifest.root}")
    if manifest.missing:
        log.warning("%d records missing; incomplete subjects are skipped", len(manifest.missing))
    settings = cfg.settings()
    output = run_evaluation(manifest, settings, jobs=args.jobs)
    out = Path(args.output or cfg.output_dir or "report")
    paths = write_report(output, out)
    print(render_report(output.report))
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


def render_report(report) -> str:
    lengths = sorted({r.codelength for r in report.results})
    lines = [f"config {report.config_hash}  seed {report.seeds.get('rng_seed')}",
             f"{'protocol':22s} {'scenario':8s} {'selection':9s} " + " ".join(f"M={m:<7d}" for m in lengths)]
    groups = sorted({(r.protocol, r.scenario, r.selection) for r in report.results},
                    key=lambda k: (PROTOCOLS.index(k[0]), SCENARIOS.index(k[1]), k[2]))
    for p, s, sel in groups:
        cells = [f"{report.median(p, s, sel, m):<9.4f}" for m in lengths]
        lines.append(f"{p:22s} {s:8s} {sel:9s} " + " ".join(cells))
    for protocol, entries in sorted(report.skipped.items()):
        for j, why in entries:
            lines.append(f"skipped ({protocol}): subject {j}: {why}")
    return "\n".join(lines)


def cmd_report(args, cfg: RunConfig) -> int:
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.json"
    print(render_report(load_report(path)))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    overrides = {k: getattr(args, k) for k in (
        "subject_count", "session_count", "gesture_count", "trial_count", "sample_count",
        "channel_count", "separation", "session_drift", "noise_level") if getattr(args, k) is not None}
    try:
        scfg = SynthConfig(rng_seed=cfg.seed, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    generate(scfg, args.root, jobs=args.jobs)
    n = scfg.session_count * scfg.subject_count * scfg.gesture_count * scfg.trial_count
    print(f"wrote {n} records to {args.root}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for every random draw (default 0)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="emgauth", description="EMG gesture-code authentication toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def dataset_args(p, root_required=False):
        p.add_argument("root", nargs=None if root_required else "?", help="dataset root")
        p.add_argument("--grid", type=_int_list, metavar="S,J,G,T",
                       help="expected sessions,subjects,gestures,trials")
        p.add_argument("--overrides", help="JSON file mapping record names to identities")

    p = sub.add_parser("scan", parents=[common], help="index a dataset tree")
    dataset_args(p)
    p.add_argument("--allow-partial", action="store_true", help="exit 0 even if records are missing")
    p.add_argument("-o", "--output", help="write the full manifest JSON here")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("features", parents=[common], help="write FDT feature series as CSV")
    dataset_args(p)
    p.add_argument("--selection")
    p.add_argument("-o", "--output", help="output directory")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("enroll", parents=[common], help="build templates with thresholds")
    dataset_args(p)
    p.add_argument("--store", help="template store to write")
    p.add_argument("--selection")
    p.add_argument("--shrinkage", type=float)
    p.add_argument("--session", type=int, default=1, help="enrollment session (default 1)")
    p.add_argument("--trials", type=_int_list, help="enrollment trials (default all)")
    p.add_argument("--gestures", type=_int_list, help="gestures to enroll (default 1..16)")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", parents=[common], help="one authentication attempt")
    p.add_argument("--store", help="template store")
    p.add_argument("--user", type=int, required=True, help="claimed user")
    p.add_argument("--sequence", type=_int_list, required=True, metavar="G1,G2,...")
    p.add_argument("--selection")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("records", nargs="+", help="one record per code, in order")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", parents=[common], help="run the verification protocols")
    dataset_args(p)
    p.add_argument("-o", "--output", help="report directory")
    p.add_argument("--protocols", type=_str_list)
    p.add_argument("--scenarios", type=_str_list)
    p.add_argument("--selections", type=_str_list)
    p.add_argument("--codelengths", type=_int_list)
    p.add_argument("--sequence-count", dest="sequence_count", type=int)
    p.add_argument("--shrinkage", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset tree")
    p.add_argument("root", help="output root")
    for name, typ in (("subject_count", int), ("session_count", int), ("gesture_count", int),
                      ("trial_count", int), ("sample_count", int), ("channel_count", int),
                      ("separation", float), ("session_drift", float), ("noise_level", float)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", parents=[common], help="summarize a report.json")
    p.add_argument("report", help="report.json or the directory holding it")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "grid", None) is not None and len(args.grid) != 4:
            raise UsageError("--grid needs four numbers: sessions,subjects,gestures,trials")
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        cfg = load_run_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"emgauth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WfdbError, ConfigMismatchError, InvariantError, KeyError, ValueError,
            OSError, np.linalg.LinAlgError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"emgauth: error: {msg}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
