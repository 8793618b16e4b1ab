"""Command-line entry point: ``dmasum {synth,train,eval,rank-diag,summarize}``.

Exit codes: 0 success, 2 configuration / validation error, 3 numeric or
runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .attention import BUCKETS, rank_diagnose, write_rank_csv
from .data import SETTINGS, assemble_setting, load_dataset, synth_dataset
from .errors import DatasetLoadError, DmaSumError, InputError, NumericError
from .meta import MetaConfig, Trainer, VideoTask, write_log
from .model import CHANNELS, DmaSumModel, ModelConfig, load_checkpoint, save_checkpoint

PUBLISHED_REFERENCE = {
    "summe": {"f1": 54.3, "tau": 0.063, "rho": 0.089},
    "tvsum": {"f1": 61.4, "tau": 0.203, "rho": 0.267},
}

DEFAULTS = {
    "dataset": None,
    "aux": [],
    "setting": "canonical",
    "k": 5,
    "seed": 0,
    "model": {"attn_dim": 32, "lstm_hidden": 32, "lstm_layers": 2, "head_hidden": 64,
              "n_visual": 4, "n_sequential": 2, "dropout": 0.0, "channel": "dual",
              "plain_softmax": False, "renormalize_rows": False},
    "meta": {"learner_rate": 3e-5, "meta_rate": 6e-5, "inner_steps": 3, "epochs": 1,
             "optimizer": "adam", "inner_adam": False},
    "trainer": {"kind": "meta", "batch": 1},
    "eval": {"budget": 0.15, "f1_aggregation": None, "kts_penalty": 1.0,
             "kts_max_segments": None, "rank_tol": 1e-6, "curve_samples": 101},
}


class ConfigError(DmaSumError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


# -- configuration ---------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    """Defaults < ``--config`` JSON < explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    flat = {
        ("dataset",): getattr(args, "dataset", None),
        ("aux",): getattr(args, "aux", None),
        ("setting",): args.setting,
        ("k",): getattr(args, "k", None),
        ("seed",): args.seed,
        ("model", "channel"): args.channel,
        ("model", "plain_softmax"): True if args.plain_softmax else None,
        ("model", "attn_dim"): getattr(args, "attn_dim", None),
        ("model", "lstm_hidden"): getattr(args, "lstm_hidden", None),
        ("model", "head_hidden"): getattr(args, "head_hidden", None),
        ("model", "n_visual"): getattr(args, "n_visual", None),
        ("model", "n_sequential"): getattr(args, "n_sequential", None),
        ("model", "dropout"): getattr(args, "dropout", None),
        ("meta", "epochs"): getattr(args, "epochs", None),
        ("meta", "inner_steps"): getattr(args, "inner_steps", None),
        ("meta", "learner_rate"): getattr(args, "learner_rate", None),
        ("meta", "meta_rate"): getattr(args, "meta_rate", None),
        ("meta", "optimizer"): getattr(args, "optimizer", None),
        ("eval", "budget"): getattr(args, "budget", None),
        ("eval", "f1_aggregation"): getattr(args, "f1_agg", None),
        ("eval", "kts_penalty"): getattr(args, "kts_penalty", None),
        ("eval", "rank_tol"): getattr(args, "rank_tol", None),
    }
    for path, value in flat.items():
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    if args.no_meta:
        cfg["trainer"]["kind"] = "plain"
    if getattr(args, "fomaml", False):
        cfg["trainer"]["kind"] = "fomaml"
    if args.batch_meta is not None:
        cfg["trainer"] = {"kind": "batch-meta", "batch": args.batch_meta}
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["setting"] not in SETTINGS:
        raise ConfigError(f"setting must be one of {SETTINGS}")
    if cfg["model"]["channel"] not in CHANNELS:
        raise ConfigError(f"channel must be one of {CHANNELS}")
    if cfg["trainer"]["kind"] not in ("meta", "plain", "batch-meta", "fomaml"):
        raise ConfigError("unknown trainer kind")
    if int(cfg["trainer"].get("batch", 1)) < 1:
        raise ConfigError("--batch-meta must be >= 1")
    if int(cfg["k"]) < 1:
        raise ConfigError("k must be >= 1")
    if not 0 < float(cfg["eval"]["budget"]) <= 1:
        raise ConfigError("budget must lie in (0, 1]")
    if cfg["eval"]["f1_aggregation"] not in (None, "mean", "max"):
        raise ConfigError("f1 aggregation must be 'mean' or 'max'")
    try:
        MetaConfig(seed=int(cfg["seed"]), **cfg["meta"])
        ModelConfig(input_dim=1, **cfg["model"])
    except (InputError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def echo_comment(echo: dict) -> str:
    return json.dumps(echo, sort_keys=True, separators=(",", ":"))


# -- shared helpers --------------------------------------------------------


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DMASUM_THREADS", "1")))
    except ValueError:
        return 1


def _load_all(cfg: dict):
    if not cfg["dataset"]:
        raise ConfigError("--dataset is required")
    target = load_dataset(cfg["dataset"])
    aux = [load_dataset(p) for p in cfg["aux"]]
    return target, aux


def _video_index(target, aux) -> dict:
    index = {}
    for d in [target, *aux]:
        for v in d.videos:
            index[v.video_id] = v
    return index


def _run_folds(fn, n: int) -> list:
    workers = min(_threads(), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _read_run(run_dir: Path) -> dict:
    try:
        return json.loads((run_dir / "run.json").read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{run_dir}: not a training run directory ({exc})") from exc


def _eval_cfg(run: dict, cfg: dict) -> dict:
    """Evaluation options from the command line win over the stored run."""
    out = copy.deepcopy(run["config"])
    out["eval"] = cfg["eval"]
    if cfg.get("dataset"):
        out["dataset"] = cfg["dataset"]
    return out


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        lo, hi = (int(x) for x in args.t.split(":"))
    except ValueError:
        raise ConfigError(f"--t expects LO:HI, got {args.t!r}")
    if args.u < 1 or args.videos < 1 or args.d < 1:
        raise ConfigError("--videos, --d and --u must be >= 1")
    seed = 0 if args.seed is None else args.seed
    path = synth_dataset(args.out, args.videos, (lo, hi), args.d, args.u, seed,
                         name=args.name, label_style=args.label_style,
                         f1_aggregation=args.f1_agg)
    print(path)
    return 0


def train_fold(cfg: dict, fold_index: int, fold, index, out_dir: Path, input_dim: int) -> Path:
    seed = int(cfg["seed"])
    model = DmaSumModel(ModelConfig(input_dim=input_dim, **cfg["model"]), seed=seed)
    meta_cfg = MetaConfig(seed=seed + fold_index, **cfg["meta"])
    trainer = Trainer(model, meta_cfg, cfg["trainer"]["kind"],
                      batch=int(cfg["trainer"].get("batch", 1)))
    tasks = [VideoTask(v, index[v].features, index[v].scores) for v in fold.train]
    if not tasks:
        raise ConfigError(f"fold {fold_index} has no training videos")
    try:
        trainer.fit(tasks)
    except NumericError as exc:
        raise NumericError(f"fold {fold_index}: {exc}") from exc
    fdir = out_dir / f"fold{fold_index}"
    fdir.mkdir(parents=True, exist_ok=True)
    extra = {"config": cfg, "fold": fold_index, "seed": seed,
             "trainer": trainer.kind, "meta_updates": trainer.meta_updates}
    save_checkpoint(fdir / "model.ckpt", model, extra)
    write_log(fdir / "train_log.csv", trainer, cfg)
    return fdir


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    target, aux = _load_all(cfg)
    plan = assemble_setting(target, aux, cfg["setting"], int(cfg["k"]), int(cfg["seed"]))
    index = _video_index(target, aux)
    dims = {index[v].features.shape[1] for f in plan.folds for v in f.train + f.test}
    if len(dims) != 1:
        raise ConfigError(f"datasets disagree on feature width: {sorted(dims)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = {"config": cfg, "plan": plan.to_dict(), "trainer": cfg["trainer"]["kind"]}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    dim = dims.pop()
    _run_folds(lambda i: train_fold(cfg, i, plan.folds[i], index, out, dim),
               len(plan.folds))
    print(out)
    return 0


def _predict(model, video, oracle: bool) -> np.ndarray:
    return video.scores.copy() if oracle else model.predict(video.features)


def _video_result(video, pred, ecfg, agg):
    segs = ev.kts_segment(video.features, ecfg["kts_penalty"], ecfg["kts_max_segments"])
    summary = ev.knapsack_select(pred, segs, ecfg["budget"])
    f1 = ev.f1_keyshot(summary, video.user_summaries, agg)
    corr = ev.rank_correlation_protocol(pred, video.user_scores)
    res = ev.VideoResult(video.video_id, f1, corr.tau, corr.rho,
                         corr.skipped_tau + corr.skipped_rho)
    return res, segs, summary


def _fold_models(run_dir: Path, run: dict, oracle: bool):
    n = len(run["plan"]["folds"])
    models = []
    for i in range(n):
        ckpt = run_dir / f"fold{i}" / "model.ckpt"
        if oracle and not ckpt.exists():
            models.append(None)
            continue
        try:
            models.append(load_checkpoint(ckpt)[0])
        except OSError as exc:
            raise ConfigError(f"missing checkpoint {ckpt}: {exc}") from exc
    return models


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run = _read_run(run_dir)
    cfg = _eval_cfg(run, resolve_config(args))
    target, aux = _load_all(cfg)
    index = _video_index(target, aux)
    ecfg = cfg["eval"]
    agg = ecfg["f1_aggregation"] or target.f1_aggregation
    models = _fold_models(run_dir, run, args.oracle)
    out = Path(args.out or run_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    comment = echo_comment(cfg)

    def eval_fold(i):
        rows = []
        for vid in run["plan"]["folds"][i]["test"]:
            video = index[vid]
            pred = _predict(models[i], video, args.oracle)
            res, _, _ = _video_result(video, pred, ecfg, agg)
            curve = ev.correlation_curve(pred, video.user_scores, ecfg["curve_samples"])
            ev.write_curve_csv(out / "curves" / f"{vid}.csv", curve, comment)
            (out / "curves" / f"{vid}.svg").write_text(ev.curve_svg(curve))
            rows.append(res)
        return rows

    results = [r for rows in _run_folds(eval_fold, len(models)) for r in rows]
    inter = {}
    for vid in (r.video_id for r in results):
        v = index[vid]
        c = ev.rank_correlation_protocol(v.scores, v.user_scores)
        h = ev.inter_annotator_correlation(v.user_scores) if v.user_scores.shape[0] > 1 else None
        inter[vid] = {"tau": c.tau, "rho": c.rho,
                      "leave_one_out_tau": h.tau if h else None,
                      "leave_one_out_rho": h.rho if h else None}
    extra = {
        "variant": {"trainer": run["config"]["trainer"]["kind"],
                    "batch": run["config"]["trainer"].get("batch", 1),
                    "channel": run["config"]["model"]["channel"],
                    "plain_softmax": run["config"]["model"]["plain_softmax"],
                    "oracle": bool(args.oracle)},
        "f1_aggregation": agg,
        "setting": run["plan"]["setting"],
        "label_styles": {"binary": run["plan"]["binary_label_datasets"]},
        "skipped_annotators": {r.video_id: r.skipped_annotators for r in results},
        "inter_annotator": inter,
    }
    ref = PUBLISHED_REFERENCE.get(target.name.lower())
    if ref is not None and run["plan"]["setting"] == "canonical":
        extra["published_reference"] = ref
    report = ev.build_report(results, cfg, **extra)
    ev.write_report(out / "report.json", report)
    if not args.oracle:
        write_rank_outputs(models, run, index, cfg, {r.video_id: r.f1 for r in results}, out)
    print(out / "report.json")
    return 0


def _pick_map(maps, which: str):
    if which == "A":
        return maps.A
    return maps.A_moa


def write_rank_outputs(models, run, index, cfg, f1s, out: Path, layer=-1,
                       which="moa") -> Path:
    """Per-channel/mode rank CSVs plus the bucket histogram with mean F1."""
    tol = cfg["eval"]["rank_tol"]
    rows = {}  # (channel, mode) -> [(video_id, RankDiagnostic)]
    for i, model in enumerate(models):
        for vid in run["plan"]["folds"][i]["test"]:
            trace = model.attention_maps(index[vid].features)
            for channel in ("visual", "sequential"):
                layers = getattr(trace, channel).layers
                if not layers:
                    continue
                amap = _pick_map(layers[layer], which)
                for mode in ("raw", "log"):
                    rows.setdefault((channel, mode), []).append(
                        (vid, rank_diagnose(amap, mode, tol)))
    comment = "# " + echo_comment(cfg) + "\n"
    for (channel, mode), items in rows.items():
        path = out / f"rank_{channel}_{mode}.csv"
        write_rank_csv(path, items)
        path.write_text(comment + path.read_text())
    hist = out / "rank_hist.csv"
    with open(hist, "w", newline="") as fh:
        fh.write(comment)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HIST_HEADER)
        for (channel, mode), items in rows.items():
            for b in BUCKETS:
                vals = [f1s[vid] for vid, d in items if d.bucket == b and vid in f1s]
                n = sum(1 for _, d in items if d.bucket == b)
                w.writerow([channel, mode, b, n,
                            repr(float(np.mean(vals))) if vals else ""])
    return hist


HIST_HEADER = ["channel", "mode", "bucket", "count", "mean_f1"]


def cmd_rank_diag(args) -> int:
    run_dir = Path(args.run)
    run = _read_run(run_dir)
    cfg = _eval_cfg(run, resolve_config(args))
    target, aux = _load_all(cfg)
    index = _video_index(target, aux)
    agg = cfg["eval"]["f1_aggregation"] or target.f1_aggregation
    models = _fold_models(run_dir, run, oracle=False)
    out = Path(args.out or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    f1s = {}
    for i, model in enumerate(models):
        for vid in run["plan"]["folds"][i]["test"]:
            v = index[vid]
            if v.user_summaries.any():
                f1s[vid] = _video_result(v, model.predict(v.features),
                                         cfg["eval"], agg)[0].f1
    print(write_rank_outputs(models, run, index, cfg, f1s, out, args.layer, args.map))
    return 0


SUMMARY_HEADER = ["frame", "score", "segment_id", "selected"]


def cmd_summarize(args) -> int:
    run_dir = Path(args.run)
    run = _read_run(run_dir)
    cfg = _eval_cfg(run, resolve_config(args))
    target, aux = _load_all(cfg)
    index = _video_index(target, aux)
    ecfg = cfg["eval"]
    models = _fold_models(run_dir, run, oracle=False)
    out = Path(args.out or run_dir) / "summaries"
    out.mkdir(parents=True, exist_ok=True)
    comment = echo_comment(cfg)
    for i, model in enumerate(models):
        for vid in run["plan"]["folds"][i]["test"]:
            video = index[vid]
            pred = model.predict(video.features)
            segs = ev.kts_segment(video.features, ecfg["kts_penalty"],
                                  ecfg["kts_max_segments"])
            summary = ev.knapsack_select(pred, segs, ecfg["budget"])
            labels = segs.labels()
            with open(out / f"{vid}.csv", "w", newline="") as fh:
                fh.write("# " + comment + "\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SUMMARY_HEADER)
                for t in range(video.T):
                    w.writerow([t, repr(float(pred[t])), int(labels[t]),
                                int(summary.selection[t])])
    print(out)
    return 0


def read_summary_csv(path):
    """Returns ``(scores, SegmentList, Summary)`` from a summarize CSV."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != SUMMARY_HEADER:
        raise InputError(f"unexpected header {reader.fieldnames}")
    rows = list(reader)
    scores = np.array([float(r["score"]) for r in rows])
    seg = np.array([int(r["segment_id"]) for r in rows])
    sel = np.array([r["selected"] == "1" for r in rows])
    bounds = [0] + [t for t in range(1, len(seg)) if seg[t] != seg[t - 1]] + [len(seg)]
    segs = ev.SegmentList(tuple(bounds))
    picks = sorted({int(seg[t]) for t in np.flatnonzero(sel)})
    return scores, segs, ev.Summary(sel, segments=picks)


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--setting", choices=SETTINGS)
    common.add_argument("--no-meta", action="store_true",
                        help="train with plain Adam instead of meta learning")
    common.add_argument("--plain-softmax", action="store_true",
                        help="use A instead of the mixture map")
    common.add_argument("--channel", choices=CHANNELS)
    common.add_argument("--batch-meta", type=int, metavar="N")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="target dataset manifest")
    data.add_argument("--aux", nargs="*", help="auxiliary dataset manifests")
    data.add_argument("--budget", type=float)
    data.add_argument("--f1-agg", choices=("mean", "max"))
    data.add_argument("--kts-penalty", type=float)
    data.add_argument("--rank-tol", type=float)

    p = _Parser(prog="dmasum", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--videos", type=int, default=6)
    s.add_argument("--t", default="40:80", help="frame-count range LO:HI")
    s.add_argument("--d", type=int, default=16)
    s.add_argument("--u", type=int, default=5)
    s.add_argument("--name", default="synthetic")
    s.add_argument("--label-style", choices=("continuous", "binary"), default="continuous")
    s.add_argument("--f1-agg", choices=("mean", "max"), default="mean")

    t = sub.add_parser("train", parents=[common, data], help="train one model per fold")
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--inner-steps", type=int)
    t.add_argument("--learner-rate", type=float)
    t.add_argument("--meta-rate", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--fomaml", action="store_true", help="first-order MAML trainer")
    t.add_argument("--attn-dim", type=int)
    t.add_argument("--lstm-hidden", type=int)
    t.add_argument("--head-hidden", type=int)
    t.add_argument("--n-visual", type=int)
    t.add_argument("--n-sequential", type=int)
    t.add_argument("--dropout", type=float)

    for name, helptext in (("eval", "evaluate test folds"),
                           ("rank-diag", "attention-map rank histogram"),
                           ("summarize", "write per-video key-shot summaries")):
        e = sub.add_parser(name, parents=[common, data], help=helptext)
        e.add_argument("--run", required=True, help="training output directory")
        if name == "eval":
            e.add_argument("--oracle", action="store_true",
                           help="use mean annotator scores as predictions")
        if name == "rank-diag":
            e.add_argument("--layer", type=int, default=-1)
            e.add_argument("--map", choices=("moa", "A"), default="moa")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "rank-diag": cmd_rank_diag, "summarize": cmd_summarize}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("synth", "train") and not args.out:
        parser.error("--out is required")
    try:
        # non-finite values are caught and reported by the tape itself
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return COMMANDS[args.command](args)
    except (ConfigError, DatasetLoadError, InputError) as exc:
        print(f"dmasum: error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, DmaSumError, ArithmeticError) as exc:
        print(f"dmasum: numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
