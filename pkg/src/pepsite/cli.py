"""Command-line pipeline: ``ingest``, ``train``, ``predict``, ``evaluate``,
``gradcheck`` and ``report``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command resolves its settings from built-in defaults, an optional
``key = value`` config file and command-line flags (highest priority), and
echoes the resolved values with their source on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import (
    CoverageError,
    EmbeddingFormatError,
    FilterRules,
    LabeledPair,
    encode_features,
    expand_labels,
    filter_complexes,
    label_interface,
    load_external_embeddings,
    split_dataset,
)
from .metrics import (
    UndefinedCurveError,
    confusion_at_threshold,
    delta_rsa,
    delta_rsa_stats,
    distance_loss_eval,
    pr_curve,
    recall_vs_interface_ratio,
    roc_auc,
    roc_curve,
    tpvr_at_threshold,
)
from .model import InputScaler, build_stack, load_checkpoint, save_checkpoint, stack_forward
from .structio import (
    AlignmentError,
    EmptyStructureError,
    PdbParseError,
    PredictionFormatError,
    read_pdb,
    read_predictions,
    write_predictions,
)
from .synthetic import random_instance
from .train import (
    LOG_FIELDS,
    DivergenceError,
    NumericalError,
    TrainConfig,
    gradient_check,
    make_instances,
    parse_config_text,
    train_model,
)

log = logging.getLogger("pepsite")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- resolved configuration ------------------------------------------------------

TUPLE = "tuple[int, ...]"

# key -> (type, default); types follow parse_config_text conventions
INGEST_KEYS = {
    "seed": (int, 0),
    "cutoff": (float, 6.0),
    "train_fraction": (float, 0.9),
    "min_peptide_exclusive": (int, 10),
    "max_peptide": (int, 50),
    "max_protein_exclusive": (int, 500),
    "max_resolution": (float, 2.5),
}

_TRAIN_TYPES = {"epochs": int, "batch_size": int, "seed": int, "lr": float, "lam": float,
                "mode": str, "loss_mode": str, "hidden": TUPLE, "grid_size": int,
                "degree": int, "use_base": bool, "patience": int, "beta1": float,
                "beta2": float, "eps": float}
TRAIN_KEYS = {f.name: (_TRAIN_TYPES[f.name], f.default) for f in dataclasses.fields(TrainConfig)}
TRAIN_KEYS["hidden"] = (TUPLE, TrainConfig().hidden)
TRAIN_KEYS.update({"scheme": (str, "onehot"), "embeddings": (str, "")})

PREDICT_KEYS = {"split": (str, "all"), "embeddings": (str, "")}

EVALUATE_KEYS = {
    "threshold": (float, 0.8),
    "window": (int, 0),
    "seed": (int, 0),
    "n_boot": (int, 10000),
    "split": (str, "all"),
    "rsa": (bool, True),
    "sasa_points": (int, 960),
    "probe": (float, 1.4),
    "bin_width": (float, 0.05),
}

GRADCHECK_KEYS = {
    "seeds": (int, 20),
    "seed": (int, 0),
    "mode": (str, "both"),
    "lam": (float, 0.5),
    "loss_mode": (str, "composite"),
    "tolerance": (float, 1e-5),
    "residues": (int, 12),
    "input_dim": (int, 6),
    "hidden": (TUPLE, (5,)),
    "grid_size": (int, 8),
    "degree": (int, 3),
}

REPORT_KEYS: dict = {}

COMMAND_KEYS = {"ingest": INGEST_KEYS, "train": TRAIN_KEYS, "predict": PREDICT_KEYS,
                "evaluate": EVALUATE_KEYS, "gradcheck": GRADCHECK_KEYS, "report": REPORT_KEYS}

_FLAG_ALIASES = {"lam": ["--lambda"], "loss_mode": ["--loss"]}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    """Resolved settings of one command and where each value came from."""

    command: str
    values: dict
    sources: dict          # key -> "default" | "config" | "flag"

    def __getitem__(self, key):
        return self.values[key]

    def lines(self) -> list[str]:
        return [f"{k} = {_fmt(self.values[k])}  ({self.sources[k]})" for k in sorted(self.values)]

    def as_dict(self) -> dict:
        return {k: {"value": _jsonable(self.values[k]), "source": self.sources[k]}
                for k in sorted(self.values)}


def resolve_config(command: str, config_path: str | None, flags: dict) -> RunConfig:
    """Defaults, then the config file, then flags that were given."""
    schema = COMMAND_KEYS[command]
    values = {k: default for k, (_, default) in schema.items()}
    sources = {k: "default" for k in schema}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from None
        try:
            parsed = parse_config_text(text, {k: t for k, (t, _) in schema.items()})
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{config_path}: {exc.args[0] if exc.args else exc}") from None
        for k, v in parsed.items():
            values[k] = v
            sources[k] = "config"
    for k, v in flags.items():
        if v is None:
            continue
        if k not in schema:
            raise UsageError(f"unknown option {k}")
        kind = schema[k][0]
        if kind == TUPLE and isinstance(v, str):
            try:
                v = tuple(int(s) for s in v.split(",") if s.strip())
            except ValueError:
                raise UsageError(f"--{k}: expected comma separated integers") from None
        values[k] = v
        sources[k] = "flag"
    return RunConfig(command, values, sources)


def _add_key_flags(p: argparse.ArgumentParser, schema: dict) -> None:
    for key, (kind, _) in schema.items():
        names = [f"--{key.replace('_', '-')}"] + _FLAG_ALIASES.get(key, [])
        if kind is bool:
            p.add_argument(*names, dest=key, default=None, action=argparse.BooleanOptionalAction)
        elif kind == TUPLE:
            p.add_argument(*names, dest=key, default=None, metavar="N[,N...]")
        else:
            p.add_argument(*names, dest=key, default=None, type=kind)


def _echo_config(run: RunConfig) -> None:
    print(f"[{run.command}] resolved config:", file=sys.stderr)
    for line in run.lines():
        print(f"  {line}", file=sys.stderr)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


# -- manifest --------------------------------------------------------------------
#
#   #pepsite-manifest v1
#   #key=value                           (seed, cutoff, counts ...)
#   instance_id<TAB>split<TAB>pdb_path<TAB>peptide_chain<TAB>protein_chain
#
# pdb_path is relative to the manifest's directory; blank chain ids are '-'.

MANIFEST_MAGIC = "#pepsite-manifest v1"
EXCLUSION_RULES = ("unreadable", "peptide_too_short", "peptide_too_long", "protein_empty",
                   "protein_too_long", "resolution", "no_contact", "duplicate")


@dataclass(frozen=True)
class ManifestEntry:
    instance_id: str
    split: str
    path: Path
    peptide_chain: str
    protein_chain: str


@dataclass
class Manifest:
    header: dict
    entries: list[ManifestEntry]

    @property
    def cutoff(self) -> float:
        return float(self.header.get("cutoff", 6.0))

    def select(self, split: str) -> list[ManifestEntry]:
        if split not in ("all", "train", "val"):
            raise UsageError(f"unknown split {split!r}")
        return [e for e in self.entries if split == "all" or e.split == split]


def _chain_field(cid: str) -> str:
    return cid if cid else "-"


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise DataError(f"{path}: not a pepsite manifest")
    header, entries = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            header[k.strip()] = v.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[1] not in ("train", "val"):
            raise DataError(f"{path}: line {lineno}: malformed entry")
        ident, split, rel, pep, prot = parts
        entries.append(ManifestEntry(ident, split, (path.parent / rel),
                                     "" if pep == "-" else pep, "" if prot == "-" else prot))
    return Manifest(header, entries)


def _load_pairs(manifest: Manifest, entries: Sequence[ManifestEntry]):
    """Re-derive labeled pairs from the structures named in the manifest."""
    cache = {}
    out = []
    for e in entries:
        if e.path not in cache:
            try:
                cache[e.path] = read_pdb(e.path)
            except (OSError, PdbParseError, EmptyStructureError) as exc:
                raise DataError(f"{e.instance_id}: cannot read {e.path}: {exc}") from None
        comp = cache[e.path]
        try:
            pair = label_interface((comp, e.peptide_chain, e.protein_chain), manifest.cutoff)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{e.instance_id}: {exc}") from None
        if pair.instance_id != e.instance_id:
            raise DataError(f"manifest id {e.instance_id} does not match structure "
                            f"({pair.instance_id})")
        out.append((e, comp, pair))
    return out


def _features(pairs: Sequence[LabeledPair], scheme: str, emb_dir: str):
    feats = []
    for pair in pairs:
        table = None
        if scheme == "external":
            if not emb_dir:
                raise UsageError("scheme external needs --embeddings DIR")
            f = Path(emb_dir) / f"{pair.pdb_id}_{pair.protein_chain or '-'}.emb"
            try:
                table = load_external_embeddings(f)
            except OSError as exc:
                raise DataError(f"cannot read embeddings {f}: {exc}") from None
        try:
            feats.append(encode_features(pair, scheme, table))
        except (CoverageError, EmbeddingFormatError) as exc:
            raise DataError(str(exc)) from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return feats


# -- ingest ------------------------------------------------------------------------

def cmd_ingest(args, run: RunConfig) -> int:
    pdb_dir = Path(args.pdb_dir)
    if not pdb_dir.is_dir():
        raise DataError(f"{pdb_dir} is not a directory")
    files = sorted(p for p in pdb_dir.iterdir()
                   if p.is_file() and p.suffix.lower() in (".pdb", ".ent"))
    if not files:
        raise DataError(f"no .pdb files in {pdb_dir}")
    out = Path(args.out)
    labels_path = Path(args.labels) if args.labels else out.with_name(out.name + ".labels.csv")

    excluded = Counter()
    comps, paths = [], {}
    for f in files:
        try:
            comp = read_pdb(f)
        except (OSError, UnicodeError, PdbParseError, EmptyStructureError) as exc:
            log.warning("skipping %s: %s", f.name, exc)
            excluded["unreadable"] += 1
            continue
        if comp.pdb_id in paths:
            log.warning("skipping %s: duplicate entry id %s", f.name, comp.pdb_id)
            excluded["duplicate"] += 1
            continue
        paths[comp.pdb_id] = f
        comps.append(comp)
    if not comps:
        raise DataError("no readable structures")

    rules = FilterRules(run["min_peptide_exclusive"], run["max_peptide"],
                        run["max_protein_exclusive"], run["max_resolution"])
    pairs = []
    for trip in filter_complexes(comps, rules, excluded):
        pair = label_interface(trip, run["cutoff"])
        if not pair.real_labels.any():
            excluded["no_contact"] += 1
            continue
        pairs.append(pair)

    for rule in EXCLUSION_RULES:
        print(f"excluded {rule}: {excluded[rule]}")
    if not pairs:
        raise DataError("no instance passed the filters")

    by_id = {p.instance_id: p for p in pairs}
    split = split_dataset(sorted(by_id), run["seed"], run["train_fraction"])
    lines = [MANIFEST_MAGIC]
    for k in sorted(run.values):
        lines.append(f"#{k}={_fmt(run.values[k])}")
    lines.append(f"#n_train={len(split.train_ids)}")
    lines.append(f"#n_val={len(split.val_ids)}")
    rows = [("train", i) for i in split.train_ids] + [("val", i) for i in split.val_ids]
    base = out.resolve().parent
    for kind, ident in rows:
        p = by_id[ident]
        rel = Path(_relpath(paths[p.pdb_id].resolve(), base))
        lines.append("\t".join([ident, kind, rel.as_posix(), _chain_field(p.peptide_chain),
                                _chain_field(p.protein_chain)]))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")

    csv_lines = ["instance_id,split,res_seq,icode,resname,label"]
    for kind, ident in rows:
        p = by_id[ident]
        for (seq, ic), aa, lab in zip(p.residue_keys, p.protein_seq, p.real_labels):
            csv_lines.append(f"{ident},{kind},{seq},{ic},{aa},{int(lab)}")
    labels_path.write_text("\n".join(csv_lines) + "\n")
    print(f"instances: {len(pairs)} (train {len(split.train_ids)}, val {len(split.val_ids)})")
    print(f"manifest: {out}")
    print(f"labels: {labels_path}")
    return EXIT_OK


def _relpath(target: Path, base: Path) -> str:
    return os.path.relpath(target, base)


# -- train -------------------------------------------------------------------------

def cmd_train(args, run: RunConfig) -> int:
    manifest = read_manifest(args.manifest)
    try:
        cfg = TrainConfig(**{k: run[k] for k in TRAIN_KEYS if k not in ("scheme", "embeddings")})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if cfg.loss_mode == "ce_only" and run.sources["lam"] != "default" and cfg.lam != 0:
        log.warning("loss mode ce_only ignores lambda = %s", _fmt(cfg.lam))

    loaded = {"train": [], "val": []}
    for e, _, pair in _load_pairs(manifest, manifest.entries):
        loaded[e.split].append(pair)
    if not loaded["train"]:
        raise DataError("manifest has no training instances")
    insts = {}
    for k, pairs in loaded.items():
        insts[k] = make_instances(pairs, _features(pairs, run["scheme"], run["embeddings"]))

    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    input_dim = insts["train"][0].x.shape[1]
    stack = build_stack(cfg.mode, input_dim, cfg.hidden, grid_size=cfg.grid_size,
                        degree=cfg.degree, use_base=cfg.use_base, seed=cfg.seed)
    rows = np.concatenate([t.x[t.mask.astype(bool)] for t in insts["train"]])
    stack.scaler = InputScaler.fit(rows)
    stack.meta["scheme"] = run["scheme"]
    stack.meta["manifest_sha256"] = _sha256(args.manifest)
    for k in sorted(run.values):
        stack.meta[f"config.{k}"] = _fmt(run.values[k])

    try:
        result = train_model(insts["train"], insts["val"], cfg, stack=stack)
    except DivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out)
            log.error("training diverged: %s; last good parameters saved to %s", exc, out)
        else:
            log.error("training diverged: %s", exc)
        return EXIT_NUMERIC

    result.stack.meta["best_epoch"] = str(result.best_epoch)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.stack, out)
    log_path.write_text(_train_log_csv(cfg.mode, result.log))
    auc = "n/a" if result.best_val_auc is None else f"{result.best_val_auc:.4f}"
    print(f"model: {cfg.mode} ({result.stack.n_params} parameters)")
    print(f"epochs run: {len(result.log) - 1}; best epoch {result.best_epoch}, val AUC {auc}")
    print(f"checkpoint: {out}")
    print(f"log: {log_path}")
    return EXIT_OK


def _train_log_csv(mode: str, history) -> str:
    lines = [",".join(("mode",) + LOG_FIELDS)]
    for row in history:
        vals = [mode]
        for k in LOG_FIELDS:
            v = row.get(k)
            vals.append("" if v is None else (str(v) if isinstance(v, int) else repr(float(v))))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def read_train_log(path) -> list[dict]:
    """Rows of a training log CSV with numeric fields converted."""
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split(",")
    out = []
    for line in lines[1:]:
        row = {}
        for k, v in zip(keys, line.split(",")):
            if k == "mode":
                row[k] = v
            elif v == "":
                row[k] = None
            else:
                row[k] = int(v) if k in ("epoch", "instances") else float(v)
        out.append(row)
    return out


# -- predict -----------------------------------------------------------------------

def _load_model(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from None


def cmd_predict(args, run: RunConfig) -> int:
    stack = _load_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    loaded = _load_pairs(manifest, manifest.select(run["split"]))
    if not loaded:
        raise DataError(f"no instances in split {run['split']}")
    pairs = [pair for _, _, pair in loaded]
    scheme = stack.meta.get("scheme", "onehot")
    insts = make_instances(pairs, _features(pairs, scheme, run["embeddings"]))
    if insts[0].x.shape[1] != stack.input_dim:
        raise DataError(f"features have width {insts[0].x.shape[1]}, "
                        f"model expects {stack.input_dim}")
    probs = [stack_forward(stack, inst.x, inst.mask) for inst in insts]
    text = write_predictions(zip(pairs, probs))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"predictions: {args.out} ({sum(p.n_residues for p in pairs)} residues)")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------------

def _mean(values) -> float | None:
    v = [x for x in values if x is not None]
    return float(np.mean(v)) if v else None


def _complex_record(pair: LabeledPair, p: np.ndarray, y: np.ndarray, threshold: float) -> dict:
    n = pair.n_residues
    mask = np.ones(n, dtype=np.int8)
    cc = confusion_at_threshold(p, y, mask, threshold)
    try:
        auc = roc_auc(p, y)
    except UndefinedCurveError:
        auc = None
    rec = {
        "instance_id": pair.instance_id,
        "n_residues": n,
        "n_interface": int(y.sum()),
        "interface_ratio": float(y.sum()) / n,
        "confusion": cc.as_dict(),
        "auc": auc,
        "tpvr_0.5": tpvr_at_threshold(p, y, pair.centers, 0.5),
        "tpvr_0.8": tpvr_at_threshold(p, y, pair.centers, 0.8),
        "distance_loss_raw": distance_loss_eval(p, y, pair.heavy_atoms, mask, threshold, "raw"),
        "distance_loss_thresholded": distance_loss_eval(p, y, pair.heavy_atoms, mask, threshold,
                                                        "thresholded"),
    }
    return rec


def _evaluate_method(loaded, table, run: RunConfig, drsa_cache: dict):
    threshold = run["threshold"]
    records, missing = [], []
    pooled_p, pooled_y = [], []
    ratio_inputs, rsa_entries = [], []
    for e, comp, pair in loaded:
        try:
            p = table.lookup(pair.pdb_id, pair.protein_chain, pair.peptide_chain, pair.residue_keys)
        except KeyError:
            missing.append(pair.instance_id)
            continue
        y = pair.real_labels.astype(np.int8)
        if run["window"] > 0:
            y = expand_labels(y, run["window"])
        records.append(_complex_record(pair, p, y, threshold))
        pooled_p.append(p)
        pooled_y.append(y)
        ratio_inputs.append((p, y, None))
        if run["rsa"]:
            key = pair.instance_id
            if key not in drsa_cache:
                drsa_cache[key] = delta_rsa(comp, pair.peptide_chain, pair.protein_chain,
                                            run["probe"], run["sasa_points"])
            rsa_entries.append((drsa_cache[key], p >= threshold))
    if not records:
        return None, missing, None
    P = np.concatenate(pooled_p)
    Y = np.concatenate(pooled_y)
    cc = confusion_at_threshold(P, Y, None, threshold)
    agg = {
        "n_complexes": len(records),
        "n_residues": int(len(Y)),
        "confusion": cc.as_dict(),
        "precision": cc.precision,
        "recall": cc.recall,
        "f1": cc.f1,
        "accuracy": cc.accuracy,
        "auc_pooled": None,
        "pr_auc_pooled": None,
        "auc_mean": _mean(r["auc"] for r in records),
        "tpvr_0.5_mean": _mean(r["tpvr_0.5"] for r in records),
        "tpvr_0.5_null": sum(r["tpvr_0.5"] is None for r in records),
        "tpvr_0.8_mean": _mean(r["tpvr_0.8"] for r in records),
        "tpvr_0.8_null": sum(r["tpvr_0.8"] is None for r in records),
        "distance_loss_raw_mean": _mean(r["distance_loss_raw"] for r in records),
        "distance_loss_thresholded_mean": _mean(r["distance_loss_thresholded"] for r in records),
    }
    curves = {}
    try:
        curves["roc"] = roc_curve(P, Y)
        curves["pr"] = pr_curve(P, Y)
        agg["auc_pooled"] = curves["roc"].area
        agg["pr_auc_pooled"] = curves["pr"].area
    except UndefinedCurveError:
        pass
    bins = recall_vs_interface_ratio(ratio_inputs, threshold, run["bin_width"])
    agg["recall_vs_interface_ratio"] = [dataclasses.asdict(b) for b in bins]
    if run["rsa"]:
        st = delta_rsa_stats(rsa_entries, run["n_boot"], run["seed"])
        agg["delta_rsa"] = st.as_dict() if st is not None else None
    curves["bins"] = bins
    return {"aggregate": agg, "per_complex": records}, missing, curves


COMPARISON_KEYS = ("precision", "recall", "f1", "accuracy", "auc_pooled", "pr_auc_pooled",
                   "tpvr_0.8_mean", "distance_loss_raw_mean", "distance_loss_thresholded_mean")


def cmd_evaluate(args, run: RunConfig) -> int:
    manifest = read_manifest(args.manifest)
    loaded = _load_pairs(manifest, manifest.select(run["split"]))
    names = args.names.split(",") if args.names else [Path(f).stem for f in args.predictions]
    if len(names) != len(args.predictions) or len(set(names)) != len(names):
        raise UsageError("--names must give one distinct name per predictions file")

    report = {
        "format": "pepsite-metrics v1",
        "version": __version__,
        "config": run.as_dict(),
        "seed": run["seed"],
        "threshold": run["threshold"],
        "window": run["window"],
        "relaxed_labels": run["window"] > 0,
        "inputs": {
            "manifest": {"path": str(args.manifest), "sha256": _sha256(args.manifest)},
            "predictions": [{"name": n, "path": str(f), "sha256": _sha256(f)}
                            for n, f in zip(names, args.predictions)],
        },
        "methods": {},
        "comparison": [],
    }
    drsa_cache: dict = {}
    all_curves = {}
    for name, f in zip(names, args.predictions):
        try:
            table = read_predictions(Path(f).read_text())
        except OSError as exc:
            raise DataError(f"cannot read {f}: {exc}") from None
        except PredictionFormatError as exc:
            raise DataError(f"{f}: {exc}") from None
        result, missing, curves = _evaluate_method(loaded, table, run, drsa_cache)
        if result is None:
            raise DataError(f"{f}: no predictions for any instance in split {run['split']}")
        if missing:
            log.warning("%s: %d instances without predictions", name, len(missing))
        result["missing"] = missing
        report["methods"][name] = result
        row = {"method": name}
        row.update({k: result["aggregate"][k] for k in COMPARISON_KEYS})
        report["comparison"].append(row)
        all_curves[name] = (curves, result)

    text = json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    if args.plots:
        _write_plots(Path(args.plots), all_curves)
    print(format_report(report))
    return EXIT_OK


# -- plots ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _svg_frame(title: str, xlabel: str, ylabel: str, body: list[str], legend: list[str]) -> str:
    w, h = 360, 300
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
        '<rect x="50" y="30" width="280" height="220" fill="none" stroke="black"/>',
        f'<text x="190.0" y="285" text-anchor="middle">{xlabel}</text>',
        f'<text x="14" y="140.0" text-anchor="middle" transform="rotate(-90 14 140)">{ylabel}</text>',
    ]
    for t in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{50 + 280 * t:.1f}" y="264" text-anchor="middle">{t:.1f}</text>')
        parts.append(f'<text x="44" y="{250 - 220 * t + 4:.1f}" text-anchor="end">{t:.1f}</text>')
    parts.extend(body)
    for i, label in enumerate(legend):
        y = 44 + 14 * i
        parts.append(f'<line x1="230" y1="{y}" x2="250" y2="{y}" '
                     f'stroke="{_COLORS[i % len(_COLORS)]}" stroke-width="2"/>')
        parts.append(f'<text x="254" y="{y + 4}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _polyline(xs, ys, color: str) -> str:
    pts = " ".join(f"{50 + 280 * x:.2f},{250 - 220 * y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'


def curves_svg(title: str, xlabel: str, ylabel: str, series: dict) -> str:
    """Line plot on the unit square; ``series`` maps label to (xs, ys)."""
    body, legend = [], []
    for i, (label, (xs, ys)) in enumerate(series.items()):
        body.append(_polyline(xs, ys, _COLORS[i % len(_COLORS)]))
        legend.append(label)
    return _svg_frame(title, xlabel, ylabel, body, legend)


def histogram_svg(title: str, xlabel: str, series: dict, bins: int = 20) -> str:
    """Step histograms (fraction per bin) of values on [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    body, legend = [], []
    for i, (label, values) in enumerate(series.items()):
        v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
        counts, _ = np.histogram(v, bins=edges)
        frac = counts / max(len(v), 1)
        xs = np.repeat(edges, 2)[1:-1]
        ys = np.repeat(frac, 2)
        body.append(_polyline(np.r_[0.0, xs, 1.0], np.r_[0.0, ys, 0.0],
                              _COLORS[i % len(_COLORS)]))
        legend.append(label)
    return _svg_frame(title, xlabel, "fraction", body, legend)


def _write_plots(out_dir: Path, all_curves: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    roc, pr, dist = {}, {}, {}
    for name, (curves, result) in all_curves.items():
        if "roc" in curves:
            (out_dir / f"{name}_roc.csv").write_text(curves["roc"].to_csv("fpr", "tpr"))
            (out_dir / f"{name}_pr.csv").write_text(curves["pr"].to_csv("recall", "precision"))
            roc[name] = (curves["roc"].xs, curves["roc"].ys)
            pr[name] = (curves["pr"].xs, curves["pr"].ys)
        vals = [(r["instance_id"], r["distance_loss_raw"], r["distance_loss_thresholded"])
                for r in result["per_complex"]]
        lines = ["instance_id,distance_loss_raw,distance_loss_thresholded"]
        lines += [f"{i},{'' if a is None else repr(a)},{'' if b is None else repr(b)}"
                  for i, a, b in vals]
        (out_dir / f"{name}_distance_loss.csv").write_text("\n".join(lines) + "\n")
        dist[name] = [a for _, a, _ in vals if a is not None]
        lines = ["lo,hi,mean_recall,count"]
        lines += [f"{b.lo!r},{b.hi!r},{b.mean_recall!r},{b.count}" for b in curves["bins"]]
        (out_dir / f"{name}_recall_ratio.csv").write_text("\n".join(lines) + "\n")
    if roc:
        (out_dir / "roc.svg").write_text(curves_svg("ROC", "false positive rate",
                                                     "true positive rate", roc))
        (out_dir / "pr.svg").write_text(curves_svg("Precision-recall", "recall", "precision", pr))
    (out_dir / "distance_loss.svg").write_text(
        histogram_svg("3-D distance loss", "per-complex loss", dist))


# -- report --------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_report(report: dict) -> str:
    """Plain-text summary of a metrics report."""
    out = [f"threshold {report['threshold']}, window {report['window']}"
           + (" (relaxed labels)" if report.get("relaxed_labels") else "")]
    header = ["method"] + list(COMPARISON_KEYS)
    rows = [[r["method"]] + [_cell(r.get(k)) for k in COMPARISON_KEYS]
            for r in report["comparison"]]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        out.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    for name, m in report["methods"].items():
        st = m["aggregate"].get("delta_rsa")
        if st:
            out.append(f"{name}: dRSA pos-neg mean {st['diff_mean']:.4f} "
                       f"[{st['ci_mean'][0]:.4f}, {st['ci_mean'][1]:.4f}], "
                       f"median {st['diff_median']:.4f}, W = {st['wilcoxon_w']}, "
                       f"p = {st['p_value']:.3g}, r = {st['effect_r']:.3f} "
                       f"(n = {st['n_entries']})")
        bins = m["aggregate"].get("recall_vs_interface_ratio") or []
        if bins:
            cells = ", ".join(f"[{b['lo']:.2f},{b['hi']:.2f}) {b['mean_recall']:.3f} (n={b['count']})"
                              for b in bins)
            out.append(f"{name}: recall by interface ratio: {cells}")
    return "\n".join(out)


def cmd_report(args, run: RunConfig) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {args.report}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.report}: not JSON ({exc})") from None
    if report.get("format") != "pepsite-metrics v1":
        raise DataError(f"{args.report}: not a pepsite metrics report")
    text = format_report(report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------------

def cmd_gradcheck(args, run: RunConfig) -> int:
    modes = {"both": ("kan", "mlp"), "kan": ("kan",), "mlp": ("mlp",)}.get(run["mode"])
    if modes is None:
        raise UsageError(f"unknown mode {run['mode']!r}")
    if run["residues"] > 20:
        log.warning("gradient check on %d residues will be slow", run["residues"])
    worst, failed, n = 0.0, 0, 0
    for mode in modes:
        for k in range(run["seeds"]):
            seed = run["seed"] + k
            inst = random_instance(seed, run["residues"], run["input_dim"],
                                   padded=run["residues"] + 4)
            stack = build_stack(mode, run["input_dim"], run["hidden"],
                                grid_size=run["grid_size"], degree=run["degree"], seed=seed)
            rep = gradient_check(stack, inst, run["tolerance"], run["lam"], run["loss_mode"])
            n += 1
            worst = max(worst, rep.max_error)
            status = "PASS" if rep.passed else "FAIL"
            failed += not rep.passed
            print(f"{mode} seed {seed}: max relative error {rep.max_error:.3e} {status}")
            if not rep.passed or args.all_tensors:
                for line in rep.lines():
                    print(f"  {line}")
    verdict = "PASS" if failed == 0 else "FAIL"
    print(f"gradcheck {verdict}: {n - failed}/{n} within {run['tolerance']:g}, "
          f"worst {worst:.3e}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pepsite", description="Peptide binding-site prediction pipeline.")
    parser.add_argument("--version", action="version", version=f"pepsite {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("ingest", help="parse, filter, label and split a PDB directory")
    p.add_argument("pdb_dir")
    p.add_argument("-o", "--out", required=True, help="manifest path")
    p.add_argument("--labels", help="labels CSV (default: <manifest>.labels.csv)")

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <checkpoint>.log.csv)")

    p = sub.add_parser("predict", help="per-residue probabilities from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("-o", "--out", help="predictions CSV (default: stdout)")

    p = sub.add_parser("evaluate", help="metrics report for one or more prediction files")
    p.add_argument("predictions", nargs="+")
    p.add_argument("-m", "--manifest", required=True)
    p.add_argument("-o", "--out", required=True, help="JSON report path")
    p.add_argument("--plots", help="directory for curve CSVs and SVG plots")
    p.add_argument("--names", help="comma separated method names (default: file stems)")

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--all-tensors", dest="all_tensors", action="store_true",
                   help="print per-tensor errors for passing checks too")

    p = sub.add_parser("report", help="summarize a metrics report")
    p.add_argument("report")
    p.add_argument("-o", "--out")

    for name, sp in sub.choices.items():
        sp.add_argument("-c", "--config", help="key = value config file")
        _add_key_flags(sp, COMMAND_KEYS[name])
    return parser


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pepsite: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        flags = {k: getattr(args, k, None) for k in COMMAND_KEYS[args.command]}
        run = resolve_config(args.command, args.config, flags)
        _echo_config(run)
        return COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"pepsite: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, AlignmentError, PredictionFormatError) as exc:
        print(f"pepsite: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"pepsite: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
