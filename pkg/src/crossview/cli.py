"""Command-line entry point.

Every subcommand accepts ``--seed``, ``--config <json>`` and ``--out``;
explicit flags override config values, which override built-in defaults.
Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .align import sen_embed
from .errors import CrossviewError, ParameterError, SchemaError
from .evaluation import map_report, retrieve_topk, top1_accuracy
from .gradsuite import run_suite
from .pooling import AttentionScorer, pool_dataset
from .store import (
    dump_json,
    load_checkpoint,
    load_dataset,
    load_matrix,
    load_prompt_set,
    save_dataset,
    save_matrix,
    save_prompt_set,
    synth_dataset,
    write_synth,
)
from .trainer import TrainConfig, train
from .zeroshot import LinkFunction, classify, prompt_scores, select_prompts

log = logging.getLogger("crossview")


class UsageError(CrossviewError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# name -> (default, type, help); None default means required
COMMANDS = {
    "synth": {
        "classes": (10, int, "number of classes"),
        "per_class": (50, int, "locations per class"),
        "dim": (32, int, "embedding dimension"),
        "noise": (0.1, float, "per-coordinate Gaussian noise"),
        "prompts_per_class": (10, int, "prompts per class"),
    },
    "ingest": {
        "manifest": (None, str, "quadruplet manifest JSON (matrices may be .emb1 or .npy)"),
        "prompts": ([], "list", "prompt set JSON files to ingest alongside"),
    },
    "train": {
        "data": (None, str, "dataset directory or manifest"),
        "pool": ("avg", str, "avg | att"),
        "epochs": (20, int, "training epochs"),
        "batch_size": (32, int, "batch size"),
        "lr": (1e-3, float, "initial learning rate"),
        "tau": (0.07, float, "InfoNCE temperature"),
        "step_size": (5, int, "epochs per LR decay step"),
        "gamma": (0.95, float, "LR decay multiplier"),
        "queue": (4096, int, "key queue capacity"),
        "weight_decay": (0.01, float, "AdamW decoupled weight decay"),
        "loss_form": ("moco", str, "moco | ground_anchor"),
        "dropout": (0.1, float, "projection head dropout rate"),
    },
    "embed": {
        "ckpt": (None, str, "checkpoint directory"),
        "data": (None, str, "dataset directory or manifest"),
    },
    "select-prompts": {
        "prompts": (None, str, "prompt set JSON"),
        "k": (None, int, "prompts to keep per class"),
        "mode": ("best", str, "best | worst | random"),
    },
    "classify": {
        "emb": (None, str, "EMB1 file of satellite embeddings"),
        "prompts": (None, str, "prompt set JSON"),
        "link": ("shifted", str, "shifted | exponential"),
        "link_eps": (1e-6, float, "floor of the shifted link"),
        "link_tau": (0.07, float, "temperature of the exponential link"),
        "prior_ref": ("", str, "EMB1 reference set for priors (default: the classified set)"),
        "ids": ("", str, "JSON list of item ids, e.g. ids.json from embed"),
    },
    "evaluate": {
        "preds": (None, str, "predictions JSON from classify"),
        "data": (None, str, "dataset with gold labels"),
        "metric": ("auto", str, "top1 | map | auto"),
    },
    "retrieve": {
        "queries": (None, str, "EMB1 query embeddings"),
        "gallery": (None, str, "EMB1 gallery embeddings"),
        "k": (2, int, "neighbors per query"),
        "query_ids": ("", str, "JSON list of query ids"),
        "gallery_ids": ("", str, "JSON list of gallery ids"),
    },
    "gradcheck": {
        "configs": (100, int, "random configurations"),
        "h": (1e-6, float, "central-difference step"),
        "tol": (1e-4, float, "relative error tolerance"),
    },
}

DIR_OUTPUTS = {"synth", "ingest", "train", "embed"}


def build_parser():
    parser = _Parser(prog="crossview", description="cross-view embedding alignment and zero-shot classification")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int)
        p.add_argument("--config", type=str, help="JSON file of option values")
        p.add_argument("--out", type=str, help="output path")
        p.add_argument("-v", "--verbose", action="store_true")
        for opt, (default, kind, help_) in opts.items():
            flag = "--" + opt.replace("_", "-")
            if kind == "list":
                p.add_argument(flag, dest=opt, nargs="*", help=help_)
            else:
                shown = "required" if default is None else f"default {default!r}"
                p.add_argument(flag, dest=opt, type=kind, help=f"{help_} ({shown})")
    return parser


def resolve(command, args: dict) -> dict:
    opts = COMMANDS[command]
    resolved = {"seed": 0, "out": None}
    resolved.update({k: v[0] for k, v in opts.items()})
    cfg_path = args.pop("config", None)
    if cfg_path:
        cfg = _load_json(cfg_path)
        if not isinstance(cfg, dict):
            raise UsageError(f"config {cfg_path}: expected a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(resolved)
        if unknown:
            raise UsageError(f"config {cfg_path}: unknown option(s) {sorted(unknown)}")
        for key, value in cfg.items():
            resolved[key] = _coerce(opts, key, value, cfg_path)
    args.pop("verbose", None)
    args.pop("command", None)
    resolved.update(args)
    missing = [k for k, v in resolved.items() if v is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def _coerce(opts, key, value, source):
    kind = int if key == "seed" else str if key == "out" else opts[key][1]
    if kind == "list":
        if not isinstance(value, list):
            raise UsageError(f"config {source}: {key} must be a list")
        return value
    if isinstance(value, bool) or (kind is not str and isinstance(value, str)):
        raise UsageError(f"config {source}: {key} must be {kind.__name__}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"config {source}: {key} must be {kind.__name__}") from None


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None


def _run_manifest_path(command, out):
    out = Path(out)
    return out / "run.json" if command in DIR_OUTPUTS else out.with_name(out.name + ".run.json")


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dump_json(obj, path)


def _read_ids(path):
    if not path:
        return None
    ids = _load_json(path)
    if not isinstance(ids, list):
        raise SchemaError(f"{path}: expected a JSON list of ids")
    return ids


def cmd_synth(o):
    ds, clean, corrupted = synth_dataset(
        o["classes"], o["per_class"], o["dim"], o["noise"], o["seed"], o["prompts_per_class"],
    )
    write_synth(o["out"], ds, clean, corrupted)
    log.info("wrote %d locations, %d classes to %s", ds.n, o["classes"], o["out"])


def cmd_ingest(o):
    ds = load_dataset(o["manifest"])
    ds.ground_ref, ds.sat_ref = "ground.emb1", "sat.emb1"
    out = Path(o["out"])
    save_dataset(ds, out)
    for path in o["prompts"]:
        ps = load_prompt_set(path)
        ps.matrix_ref = None
        save_prompt_set(ps, out / Path(path).with_suffix(".json").name)
    log.info("ingested %d locations into %s", ds.n, out)


def cmd_train(o):
    ds = load_dataset(o["data"])
    cfg = TrainConfig(
        epochs=o["epochs"], batch_size=o["batch_size"], lr=o["lr"], tau=o["tau"],
        step_size=o["step_size"], gamma=o["gamma"], queue_capacity=o["queue"],
        weight_decay=o["weight_decay"], pool=o["pool"], loss_form=o["loss_form"],
        dropout_rate=o["dropout"], seed=o["seed"],
    )
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt, loss_log = train(ds, cfg, checkpoint_dir=out, log_path=out / "loss_log.jsonl")
    if loss_log:
        log.info("final batch loss %.6f", loss_log[-1]["loss"])


def cmd_embed(o):
    ckpt = load_checkpoint(o["ckpt"])
    ds = load_dataset(o["data"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    sat = sen_embed(ds.sat_features(), ckpt, mode="eval")
    if ckpt.pool_mode == "att":
        scorer = AttentionScorer(ckpt.params["scorer.w"], float(ckpt.params["scorer.b"].reshape(-1)[0]))
        pooled = pool_dataset(ds, "att", scorer)
    else:
        pooled = pool_dataset(ds, "avg")
    save_matrix(sat, out / "sat.emb1")
    save_matrix(pooled, out / "ground_pooled.emb1")
    _write_json(ds.ids, out / "ids.json")
    log.info("embedded %d locations into %s", ds.n, out)


def cmd_select_prompts(o):
    ps = load_prompt_set(o["prompts"])
    report = prompt_scores(ps)
    chosen = select_prompts(ps, o["k"], o["mode"], seed=o["seed"], report=report)
    out = Path(o["out"])
    chosen.view_tag = ps.view_tag
    chosen.meta = {**ps.meta, "selection": {"k": o["k"], "mode": o["mode"], "seed": o["seed"]}}
    save_prompt_set(chosen, out)
    _write_json(report.to_json(), out.with_name(out.stem + ".scores.json"))


def cmd_classify(o):
    emb = load_matrix(o["emb"]).astype(np.float64)
    ps = load_prompt_set(o["prompts"])
    link = LinkFunction(o["link"], eps=o["link_eps"], tau=o["link_tau"])
    ref = load_matrix(o["prior_ref"]).astype(np.float64) if o["prior_ref"] else None
    # stored rows are float32; bring them back to unit norm before scoring
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    if ref is not None:
        ref = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    result = classify(emb, ps, link, reference=ref)
    ids = _read_ids(o["ids"])
    if ids is not None and len(ids) != emb.shape[0]:
        raise SchemaError(f"{len(ids)} ids for {emb.shape[0]} embeddings")
    items = []
    for i in range(emb.shape[0]):
        item = {"index": i, "pred": int(result.labels[i]), "scores": result.scores[i].tolist()}
        if ids is not None:
            item["id"] = ids[i]
        items.append(item)
    _write_json({
        "link": link.to_json(),
        "prior_source": result.priors.source,
        "classes": ps.class_names,
        "items": items,
    }, o["out"])


def cmd_evaluate(o):
    preds = _load_json(o["preds"])
    ds = load_dataset(o["data"])
    try:
        items = preds["items"]
        pred = np.array([it["pred"] for it in items], dtype=np.int64)
        scores = np.array([it["scores"] for it in items], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{o['preds']}: malformed predictions ({exc!r})") from None
    if len(items) != ds.n:
        raise SchemaError(f"{len(items)} predictions for {ds.n} locations")
    if all("id" in it for it in items) and [it["id"] for it in items] != ds.ids:
        raise SchemaError("prediction ids do not follow manifest order")
    metric = o["metric"]
    if metric == "auto":
        metric = "top1" if all(loc.labels and len(loc.labels) == 1 for loc in ds.locations) else "map"
    if metric == "top1":
        report = {"metric": "top1", "top1": top1_accuracy(pred, ds.single_labels()), "n": ds.n}
    elif metric == "map":
        report = {"metric": "map", "n": ds.n, **map_report(scores, ds.label_sets()).to_json()}
    else:
        raise ParameterError(f"unknown metric {metric!r}")
    _write_json(report, o["out"])
    log.info("%s", {k: v for k, v in report.items() if k in ("top1", "mAP")})


def cmd_retrieve(o):
    q = load_matrix(o["queries"]).astype(np.float64)
    g = load_matrix(o["gallery"]).astype(np.float64)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    res = retrieve_topk(q, g, o["k"])
    _write_json({"k": o["k"], "results": res.to_json(_read_ids(o["query_ids"]), _read_ids(o["gallery_ids"]))},
                o["out"])


def cmd_gradcheck(o):
    cases = run_suite(o["configs"], seed=o["seed"], h=o["h"], tol=o["tol"])
    failed = [c for c in cases if not c.report.passed]
    for c in cases:
        status = "ok" if c.report.passed else "FAIL"
        log.info("case %d D=%d B=%d extra=%d form=%s max_rel=%.3g %s",
                 c.index, c.dim, c.batch, c.n_extra, c.loss_form, c.report.max_rel_error, status)
    if o["out"]:
        _write_json({
            "cases": len(cases),
            "failed": [c.index for c in failed],
            "max_rel_error": max(c.report.max_rel_error for c in cases) if cases else 0.0,
            "tol": o["tol"],
        }, o["out"])
    if failed:
        raise ParameterError(f"gradient check failed for {len(failed)} of {len(cases)} configurations")


HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "embed": cmd_embed,
    "select-prompts": cmd_select_prompts,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "retrieve": cmd_retrieve,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        ns = build_parser().parse_args(argv)
        args = vars(ns)
        command = args["command"]
        if args.get("verbose"):
            logging.getLogger().setLevel(logging.DEBUG)
        opts = resolve(command, args)
        if opts["out"] is None and command != "gradcheck":
            raise UsageError(f"{command}: --out is required")
        HANDLERS[command](opts)
        if opts["out"] is not None:
            _write_json({"command": command, "version": __version__, "params": opts},
                        _run_manifest_path(command, opts["out"]))
    except CrossviewError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
