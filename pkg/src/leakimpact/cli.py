"""Command-line pipeline: ``gen``, ``split``, ``train``, ``lis``, ``align``, ``report``.

Every command reads one JSON run config (``--config``; defaults apply to
missing sections), resolves file paths under ``--out`` and writes
deterministic reports that embed the config hash and seeds. ``--seed``
replaces every seed in the config. Log verbosity comes from
``LEAKIMPACT_LOG_LEVEL``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""
import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import AlignConfig, two_period_protocol
from .errors import AUCUndefinedError, ConfigError, DataError, LeakImpactError
from .eventlog import (DAY, GroundTruth, ItemContentTable, SyntheticConfig, TemporalSplit,
                       generate_synthetic, load_events, save_events, temporal_split)
from .leakage import (DEFAULT_THRESHOLD, LISReport, LeakSpec, coclick_side_values, compute_lis,
                      config_hash, fit_baseline)
from .ranker import FeatureSchema, TrainConfig, auc_score, predict_log

logger = logging.getLogger("leakimpact")

COMMANDS = ("gen", "split", "train", "lis", "align", "report")
SUMMARY_FIELDS = ("leak", "auc_base", "auc_leak", "lis", "ci_low", "ci_high", "significant")


# --------------------------------------------------------------------------
# Run config


@dataclass(frozen=True)
class SplitSection:
    train_end_day: float = 18
    eval_days: float = 2
    leak_horizon_n: int = 0

    def split(self):
        return TemporalSplit.from_days(self.train_end_day, self.eval_days, self.leak_horizon_n)


@dataclass(frozen=True)
class LISSection:
    n_boot: int = 200
    threshold: float = DEFAULT_THRESHOLD
    leak_epochs: int = 1


@dataclass(frozen=True)
class AlignSection:
    period_a_end_day: float = 20
    period_b_start_day: float = 25
    b_train_end_day: float = 36
    b_eval_days: float = 2
    n_boot: int = 200
    hyper: AlignConfig = field(default_factory=AlignConfig)


DEFAULT_LEAKS = (
    {"kind": "next_click"},
    {"kind": "future_embedding", "horizon_n_days": 7},
    {"kind": "similar_items", "k": 5},
)

DEFAULT_PATHS = {"events": "events.jsonl", "content": "content.npz", "truth": "truth.npz",
                 "model": "model.npz"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=lambda: dict(DEFAULT_PATHS))
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    split: SplitSection = field(default_factory=SplitSection)
    schema: FeatureSchema = field(default_factory=FeatureSchema)
    train: TrainConfig = field(default_factory=TrainConfig)
    leaks: tuple = DEFAULT_LEAKS
    lis: LISSection = field(default_factory=LISSection)
    align: AlignSection = field(default_factory=AlignSection)

    def to_dict(self):
        return {
            "seed": self.seed, "paths": dict(self.paths),
            "synthetic": self.synthetic.to_dict(),
            "split": dataclasses.asdict(self.split),
            "schema": self.schema.to_dict(),
            "train": self.train.to_dict(),
            "leaks": [dict(x) for x in self.leaks],
            "lis": dataclasses.asdict(self.lis),
            "align": dataclasses.asdict(self.align),
        }

    def hash(self):
        return config_hash(self.to_dict())

    def with_seed(self, seed):
        return dataclasses.replace(
            self, seed=seed,
            synthetic=dataclasses.replace(self.synthetic, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            align=dataclasses.replace(self.align,
                                      hyper=dataclasses.replace(self.align.hyper, seed=seed)),
        )


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown fields in section {name!r}: {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def run_config_from_dict(d):
    d = dict(d or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    paths = dict(DEFAULT_PATHS)
    extra = sorted(set(d.get("paths") or {}) - set(DEFAULT_PATHS))
    if extra:
        raise ConfigError(f"unknown paths: {extra}")
    paths.update(d.get("paths") or {})
    syn = dict(d.get("synthetic") or {})
    syn.setdefault("seed", seed)
    tr = dict(d.get("train") or {})
    tr.setdefault("seed", seed)
    al = dict(d.get("align") or {})
    hyper = dict(al.pop("hyper", None) or {})
    hyper.setdefault("seed", seed)
    align = _section(AlignSection, al, "align")
    align = dataclasses.replace(align, hyper=_section(AlignConfig, hyper, "align.hyper"))
    schema = d.get("schema")
    try:
        schema = FeatureSchema.from_dict({**FeatureSchema().to_dict(), **(schema or {})})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"section 'schema': {exc}") from None
    leaks = d.get("leaks", DEFAULT_LEAKS)
    if not isinstance(leaks, (list, tuple)) or not all(isinstance(x, dict) and "kind" in x for x in leaks):
        raise ConfigError("leaks must be a list of objects with a 'kind'")
    return RunConfig(
        seed=seed, paths=paths,
        synthetic=_section(SyntheticConfig, syn, "synthetic"),
        split=_section(SplitSection, d.get("split"), "split"),
        schema=schema,
        train=_section(TrainConfig, tr, "train"),
        leaks=tuple(dict(x) for x in leaks),
        lis=_section(LISSection, d.get("lis"), "lis"),
        align=align,
    )


def load_run_config(path=None, seed=None, overrides=()):
    d = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc.msg} (line {exc.lineno})") from None
    for item in overrides:
        _apply_override(d, item)
    cfg = run_config_from_dict(d)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _apply_override(d, item):
    """``section.field=value`` with a JSON value (bare strings allowed)."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p!r} is not a section")
    node[parts[-1]] = value


# --------------------------------------------------------------------------
# File helpers


def _path(cfg, out, name):
    p = Path(cfg.paths[name])
    return p if p.is_absolute() else out / p


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    if not path.exists():
        raise DataError(f"{path}: not found (run the earlier pipeline step first)")
    return json.loads(path.read_text())


def _stamp(cfg):
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _load_log(cfg, out):
    p = _path(cfg, out, "events")
    if not p.exists():
        raise DataError(f"{p}: event file not found (run 'gen' first or set paths.events)")
    return load_events(p)


def _split_log(cfg, log):
    return temporal_split(log, cfg.split.split())


def _leak_spec(d, log, truth, eval_slice):
    d = dict(d)
    kind = d.pop("kind")
    if kind in ("next_click", "similar_items", "future_embedding"):
        return LeakSpec(kind, source=log, **d)
    if kind == "constant":
        return LeakSpec(kind, **d)
    if kind == "oracle":
        if truth is None:
            raise ConfigError("oracle leak needs the ground-truth sidecar (paths.truth)")
        if len(truth.event_prob) != len(log):
            raise DataError("ground-truth sidecar does not match the event log")
        return LeakSpec(kind, values=(None, truth.event_prob[eval_slice]), **d)
    raise ConfigError(f"leak kind {kind!r} cannot be configured from a file")


def _summary_tables(rows):
    """Fixed-width text and CSV renderings of the LIS summary rows."""
    fmt = {"auc_base": "{:.6f}", "auc_leak": "{:.6f}", "lis": "{:+.6f}",
           "ci_low": "{:+.6f}", "ci_high": "{:+.6f}"}
    cells = [[fmt[k].format(r[k]) if k in fmt else str(r[k]) for k in SUMMARY_FIELDS] for r in rows]
    widths = [max([len(h)] + [len(c[j]) for c in cells]) for j, h in enumerate(SUMMARY_FIELDS)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(SUMMARY_FIELDS, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in SUMMARY_FIELDS])
    return "\n".join(lines) + "\n", buf.getvalue()


# --------------------------------------------------------------------------
# Commands


def cmd_gen(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    log, content, truth = generate_synthetic(cfg.synthetic)
    events = _path(cfg, out, "events")
    events.parent.mkdir(parents=True, exist_ok=True)
    save_events(log, events)
    content.save(_path(cfg, out, "content"))
    truth.save(_path(cfg, out, "truth"))
    with open(events, "rb") as fh:
        n_lines = sum(1 for _ in fh)
    if events.suffix == ".csv":
        n_lines -= 1
    manifest = {
        **_stamp(cfg), "command": "gen", "synthetic": cfg.synthetic.to_dict(),
        "n_events": len(log), "n_lines": n_lines, "n_clicks": int(log.label.sum()),
        "files": {name: {"path": cfg.paths[name], "sha256": _sha256(_path(cfg, out, name))}
                  for name in ("events", "content", "truth")},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(log)} events to {events}")
    return manifest


def cmd_split(cfg, out):
    log = _load_log(cfg, out)
    tr, ev = _split_log(cfg, log)
    sp = cfg.split.split()
    report = {
        **_stamp(cfg), "command": "split", "train_end_T": sp.train_end_T, "eval_end": sp.eval_end,
        "leak_horizon_n": sp.leak_horizon_n, "n_total": len(log), "n_train": len(tr),
        "n_eval": len(ev), "n_after_eval": len(log) - len(tr) - len(ev),
        "eval_ctr": float(ev.label.mean()), "train_ctr": float(tr.label.mean()) if len(tr) else None,
    }
    _write_json(out / "split.json", report)
    print(f"train {len(tr)} / eval {len(ev)} events")
    return report


def cmd_train(cfg, out):
    log = _load_log(cfg, out)
    tr, ev = _split_log(cfg, log)
    if ev.label.min() == ev.label.max():
        n_pos = int(ev.label.sum())
        raise AUCUndefinedError(n_pos, len(ev) - n_pos)
    model, _, _ = fit_baseline(tr, ev, cfg.schema, cfg.train, leak_epochs=cfg.lis.leak_epochs)
    model_path = _path(cfg, out, "model")
    model_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(model_path)
    auc = auc_score(predict_log(model, ev), ev.label)
    report = {
        **_stamp(cfg), "command": "train", "auc": float(auc), "n_train": len(tr), "n_eval": len(ev),
        "schema": cfg.schema.to_dict(), "train_config": cfg.train.to_dict(),
        "epoch_losses": [float(x) for x in model.epoch_losses], "warnings": list(model.warnings),
        "model_sha256": _sha256(model_path),
    }
    _write_json(out / "train_report.json", report)
    print(f"eval AUC {auc:.6f}")
    return report


def cmd_lis(cfg, out):
    log = _load_log(cfg, out)
    tr, ev = _split_log(cfg, log)
    truth_path = _path(cfg, out, "truth")
    truth = GroundTruth.load(truth_path) if truth_path.exists() else None
    start = np.searchsorted(log.timestamp, cfg.split.split().train_end_T)
    eval_slice = slice(start, start + len(ev))
    specs = [_leak_spec(d, log, truth, eval_slice) for d in cfg.leaks]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate leak labels: {labels}")
    side = None
    if "coclick" in cfg.schema.slots:
        side = coclick_side_values(tr, ev)
    base = fit_baseline(tr, ev, cfg.schema, cfg.train, side, cfg.lis.leak_epochs)
    rows = []
    lis_dir = out / "lis"
    for spec in specs:
        rep = compute_lis(tr, ev, cfg.schema, spec, cfg.train, n_boot=cfg.lis.n_boot,
                          threshold=cfg.lis.threshold, split=cfg.split.split(), side_values=side,
                          base=base, leak_epochs=cfg.lis.leak_epochs)
        rep.metadata.update(_stamp(cfg))
        _write_json(lis_dir / f"{spec.label}.json", rep.to_dict())
        rows.append(rep.summary_row())
        logger.info("%s: lis %+.6f [%+.6f, %+.6f]", spec.label, rep.lis, rep.ci_low, rep.ci_high)
    txt, csv_text = _summary_tables(rows)
    (lis_dir / "summary.txt").write_text(f"# config {cfg.hash()} seed {cfg.seed}\n" + txt)
    (lis_dir / "summary.csv").write_text(csv_text)
    print(txt, end="")
    return rows


def cmd_align(cfg, out):
    log = _load_log(cfg, out)
    content_path = _path(cfg, out, "content")
    if not content_path.exists():
        raise DataError(f"{content_path}: content table not found")
    content = ItemContentTable.load(content_path)
    a = cfg.align
    b_split = TemporalSplit(int(a.b_train_end_day * DAY), int(a.b_eval_days * DAY))
    run = two_period_protocol(log, content, int(a.period_a_end_day * DAY),
                              int(a.period_b_start_day * DAY), b_split, cfg.schema, cfg.train,
                              a.hyper, n_boot=a.n_boot, threshold=cfg.lis.threshold)
    d = out / "align"
    d.mkdir(parents=True, exist_ok=True)
    run.encoder.save(d / "encoder.npz")
    run.dataset.export(d / "alignment_data.jsonl")
    history = [h.to_dict() for h in run.history]
    _write_json(d / "recall_history.json", {**_stamp(cfg), "history": history,
                                            "best_epoch": run.encoder.meta["best_epoch"]})
    down = run.downstream.to_dict()
    down["metadata"].update(_stamp(cfg))
    down["metadata"]["min_updates_ratio_to_production"] = a.hyper.min_updates / 10000
    _write_json(d / "downstream.json", down)
    summary = run.summary()
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_report(cfg, out):
    from .plots import plot_downstream, plot_lis, plot_recall

    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    sections = []
    csv_rows = []
    train = out / "train_report.json"
    if train.exists():
        t = _read_json(train)
        sections.append(("train", [f"auc = {t['auc']:.6f}", f"n_train = {t['n_train']}",
                                   f"n_eval = {t['n_eval']}"]))
        csv_rows.append(("train", "auc", t["auc"]))
    lis_dir = out / "lis"
    reports = sorted(lis_dir.glob("*.json")) if lis_dir.exists() else []
    if reports:
        rows = [LISReport.from_dict(_read_json(p)).summary_row() for p in reports]
        txt, _ = _summary_tables(rows)
        sections.append(("lis", txt.rstrip("\n").split("\n")))
        for r in rows:
            for k in ("lis", "ci_low", "ci_high"):
                csv_rows.append(("lis:" + r["leak"], k, r[k]))
        plot_lis(rows, fig_dir / "lis.png", threshold=cfg.lis.threshold)
    align_dir = out / "align"
    if (align_dir / "downstream.json").exists():
        down = _read_json(align_dir / "downstream.json")
        hist = _read_json(align_dir / "recall_history.json")
        best = hist["best_epoch"]
        h = hist["history"]
        sections.append(("align", [
            f"recall@{h[0]['k']} untrained = {h[0]['mean_recall_at_k']:.4f}",
            f"recall@{h[0]['k']} best (epoch {best}) = {h[best]['mean_recall_at_k']:.4f}",
            f"delta encoder = {down['delta_encoder']:+.6f} "
            f"[{down['ci_encoder'][0]:+.6f}, {down['ci_encoder'][1]:+.6f}]",
            f"delta raw leaked = {down['delta_raw']:+.6f} (null: {down['raw_null']})",
        ]))
        csv_rows += [("align", "delta_encoder", down["delta_encoder"]),
                     ("align", "delta_raw", down["delta_raw"]),
                     ("align", "recall_best", h[best]["mean_recall_at_k"])]
        plot_recall(h, fig_dir / "recall.png", best)
        plot_downstream(down, fig_dir / "downstream.png")
    if not sections:
        raise DataError(f"{out}: nothing to report (run train, lis or align first)")
    lines = [f"# leakimpact report  config={cfg.hash()}  seed={cfg.seed}"]
    for name, body in sections:
        lines += [f"===== {name} =====", *body]
    lines.append("===== end =====")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("section", "metric", "value"))
    for s, m, v in csv_rows:
        w.writerow((s, m, repr(float(v))))
    (out / "report.csv").write_text(buf.getvalue())
    print(text, end="")
    return text


HELP = {
    "gen": "draw a synthetic log, content table and ground-truth sidecar",
    "split": "report the temporal train/eval split",
    "train": "train the baseline ranker and report eval AUC",
    "lis": "score every configured leak against the baseline",
    "align": "distil leaked embeddings into a content encoder and test transfer",
    "report": "collect reports into text, CSV and figures",
}

HANDLERS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train, "lis": cmd_lis,
            "align": cmd_align, "report": cmd_report}


# --------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="leakimpact", description="Leakage impact scoring pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        p.add_argument("--out", type=Path, default=Path("leakimpact_out"), help="working directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.epochs=3")
    return parser


def _setup_logging():
    level = getattr(logging, os.environ.get("LEAKIMPACT_LOG_LEVEL", "WARNING").upper(), None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.seed, args.set)
        HANDLERS[args.command](cfg, args.out)
    except LeakImpactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
