"""Command-line entry point: ``aesnet <subcommand> --out DIR [--config FILE] [--seed N]``.

Subcommands run the workflow end to end::

    aesnet gen-data --out data
    aesnet train    --data data --out run
    aesnet baseline --data data --out base
    aesnet eval     --data data --model run --out eval
    aesnet retrieve --data data --model run --out retr
    aesnet explain  --data data --model run --out expl

The config file is INI; every section maps onto one dataclass below and any
key left out keeps its default. One global seed (``[run] seed`` or ``--seed``)
feeds the generator, split, initialisation, training shuffles and CV folds.
Every run writes ``manifest.json`` with the resolved config and version.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as D
from . import explain as X
from . import network as N
from . import retrieval as R
from . import svm as S
from . import training as TR

log = logging.getLogger("aesnet")

BASELINE_ROWS = (("linear", 4), ("linear", 7), ("rbf", 4), ("rbf", 7))


class ConfigError(ValueError):
    pass


@dataclass
class BaselineConfig:
    folds: int = 5
    gamma: float = 3.0
    standardize: bool = True
    noise_px: float = 1.0  # simulated annotation error on the keypoints fed to the SVMs


@dataclass
class RetrieveConfig:
    k: int = 3
    heatmap: bool = True
    scale: int = 3


@dataclass
class ExplainConfig:
    eps: float = 1e-6
    limit: int = 0  # 0 means every test image
    scale: int = 3
    dump: bool = False
    region_threshold: float = 0.6


SECTIONS = {
    "data": D.SynthConfig,
    "split": D.SplitSpec,
    "network": N.NetworkConfig,
    "train": TR.TrainConfig,
    "svm": BaselineConfig,
    "retrieve": RetrieveConfig,
    "explain": ExplainConfig,
}
_SEEDED = ("data", "split", "network", "train")


def _coerce(raw: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            return {"1": True, "true": True, "yes": True, "on": True,
                    "0": False, "false": False, "no": False, "off": False}[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except (KeyError, ValueError) as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: cannot parse as {type(default).__name__}") from e


@dataclass
class RunConfig:
    seed: int
    sections: dict

    def get(self, name: str):
        return self.sections[name]

    def resolved(self) -> dict:
        return {"seed": self.seed, **{k: asdict(v) for k, v in self.sections.items()}}


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    """Merge an optional INI file over the defaults; ``seed`` overrides ``[run] seed``."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
    for name in parser.sections():
        if name != "run" and name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
    run = dict(parser["run"]) if parser.has_section("run") else {}
    if set(run) - {"seed"}:
        raise ConfigError(f"unknown keys in [run]: {sorted(set(run) - {'seed'})}")
    if seed is None:
        seed = _coerce(run["seed"], 0, "run", "seed") if "seed" in run else 0
    raw = {name: dict(parser[name]) if parser.has_section(name) else {} for name in SECTIONS}
    # the network input size follows the data unless given explicitly
    for key in ("height", "width"):
        if key in raw["data"] and key not in raw["network"]:
            raw["network"][key] = raw["data"][key]
    built = {}
    for name, cls in SECTIONS.items():
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        kwargs = {}
        for key, value in raw[name].items():
            if key not in defaults or key == "seed":
                raise ConfigError(f"unknown key [{name}] {key}")
            kwargs[key] = _coerce(value, defaults[key], name, key)
        if name in _SEEDED:
            kwargs["seed"] = seed
        try:
            built[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}]: {e}") from e
    return RunConfig(seed, built)


# ------------------------------------------------------------------ plumbing

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, outputs: list[str]) -> None:
    _dump_json(out / "manifest.json", {
        "tool": "aesnet", "version": __version__, "command": command,
        "config": cfg.resolved(), "inputs": inputs, "outputs": sorted(outputs),
    })


def _require_dir(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory {p} not found")
    return p


def _load_samples(data: str | Path) -> list[D.ImageSample]:
    return D.load_dataset(_require_dir(data, "data"))


def _split(samples: list[D.ImageSample], cfg: RunConfig, model_dir: Path | None = None):
    """The split recorded by ``train`` when available, else a fresh one from the config."""
    if model_dir is not None and (model_dir / "split.json").exists():
        ids = json.loads((model_dir / "split.json").read_text())
        by_id = {s.id: s for s in samples}
        missing = [i for part in ids.values() for i in part if i not in by_id]
        if missing:
            raise ValueError(f"split.json names {len(missing)} ids absent from the dataset, e.g. {missing[0]}")
        return tuple([by_id[i] for i in ids[part]] for part in ("train", "val", "test"))
    return D.split(samples, cfg.get("split"))


def _load_model(model_dir: str | Path) -> tuple[N.NetworkModel, Path]:
    d = _require_dir(model_dir, "model")
    path = d / "model.aesn"
    if not path.is_file():
        raise FileNotFoundError(f"no model.aesn in {d}")
    return N.load(path), d


def _size(model: N.NetworkModel) -> tuple[int, int]:
    return model.config.height, model.config.width


def _fmt_table(rows: list[dict], header: str) -> str:
    lines = [header, f"{'model':<16}{'accuracy':>10}{'balanced accuracy':>20}"]
    for r in rows:
        lines.append(f"{r['model']:<16}{r['accuracy']:>10.4f}{r['balanced_accuracy']:>20.4f}")
    return "\n".join(lines) + "\n"


def _class_counts(samples) -> dict:
    return {c: sum(s.binary_label == c for s in samples) for c in D.BINARY_CLASSES}


# ----------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, out: Path) -> list[str]:
    synth = cfg.get("data")
    samples = D.generate_synth(synth)
    D.save_dataset(out, samples, synth)
    log.info("wrote %d samples to %s", len(samples), out)
    return ["images/", "labels.csv", "keypoints.csv", "geometry.csv"]


def cmd_train(cfg: RunConfig, out: Path, data: str) -> list[str]:
    samples = _load_samples(data)
    train, val, test = _split(samples, cfg)
    net_cfg = cfg.get("network")
    size = (net_cfg.height, net_cfg.width)
    _dump_json(out / "split.json", {"train": [s.id for s in train], "val": [s.id for s in val],
                                    "test": [s.id for s in test]})
    model = N.build(net_cfg)
    log.info("training %d parameters on %d/%d (train/val)", N.param_count(model), len(train), len(val))
    model, records = TR.train(model, TR.prepare(train, size), TR.prepare(val, size), cfg.get("train"), out)
    N.save(model, out / "model.aesn")
    s1 = [r for r in records if r.stage == 1]
    s2 = [r for r in records if r.stage == 2]
    best1 = min(s1, key=lambda r: (r.val_mse, r.epoch))
    best2 = max(s2, key=lambda r: (TR._nan_low(r.val_bacc), TR._nan_low(r.val_acc), -r.epoch))
    _dump_json(out / "summary.json", {
        "parameters": N.param_count(model),
        "stage1": {"best_epoch": best1.epoch, "val_mse": best1.val_mse},
        "stage2": {"best_epoch": best2.epoch, "val_acc": best2.val_acc, "val_bacc": best2.val_bacc},
    })
    return ["split.json", "epochs.csv", "stage1.aesn", "stage2.aesn", "model.aesn", "summary.json"]


def _run_baselines(cfg: RunConfig, trainval, test, out: Path | None) -> list[dict]:
    """Fit the four SVM rows on train+val with CV-selected C; score on test."""
    bc = cfg.get("svm")
    rows = []
    for kernel, nf in BASELINE_ROWS:
        Xtr, ytr = S.baseline_features(trainval, nf, bc.noise_px, cfg.seed)
        Xte, yte = S.baseline_features(test, nf, bc.noise_px, cfg.seed)
        spec = S.CvSpec(folds=bc.folds, gamma=bc.gamma, standardize=bc.standardize, seed=cfg.seed)
        cv = S.cv_select(Xtr, ytr, kernel, spec)
        model = S.smo_train(Xtr, ytr, kernel, cv["best_C"], bc.gamma, "balanced", bc.standardize)
        pred = (S.predict(model, Xte)[0] > 0).astype(float)
        truth = (yte > 0).astype(int)
        name = f"SVM {kernel} {nf}"
        rows.append({"model": name, "accuracy": TR.accuracy(pred, truth),
                     "balanced_accuracy": TR.balanced_accuracy(pred, truth),
                     "C": cv["best_C"], "cv_balanced_accuracy": max(cv["scores"])})
        log.info("%s: C=%.4g test bacc %.4f", name, cv["best_C"], rows[-1]["balanced_accuracy"])
        if out is not None:
            S.write_feature_csv(out / f"features{nf}_trainval.csv", [s.id for s in trainval], Xtr, ytr)
            S.write_feature_csv(out / f"features{nf}_test.csv", [s.id for s in test], Xte, yte)
            S.save_model(model, out / f"svm_{kernel}_{nf}.txt")
    return rows


def cmd_baseline(cfg: RunConfig, out: Path, data: str, model_dir: str | None = None) -> list[str]:
    samples = _load_samples(data)
    mdir = _require_dir(model_dir, "model") if model_dir else None
    train, val, test = _split(samples, cfg, mdir)
    rows = _run_baselines(cfg, train + val, test, out)
    _dump_json(out / "results.json", {"test_size": len(test), "rows": rows})
    (out / "results.txt").write_text(_fmt_table(rows, f"test set: {len(test)} images"))
    files = ["results.json", "results.txt"]
    for kernel, nf in BASELINE_ROWS:
        files.append(f"svm_{kernel}_{nf}.txt")
    for nf in (4, 7):
        files += [f"features{nf}_trainval.csv", f"features{nf}_test.csv"]
    return files


def cmd_eval(cfg: RunConfig, out: Path, data: str, model_dir: str, baseline_dir: str | None = None) -> list[str]:
    samples = _load_samples(data)
    model, mdir = _load_model(model_dir)
    train, val, test = _split(samples, cfg, mdir)
    if baseline_dir is not None:
        path = _require_dir(baseline_dir, "baseline") / "results.json"
        rows = [{k: r[k] for k in ("model", "accuracy", "balanced_accuracy")}
                for r in json.loads(path.read_text())["rows"]]
    else:
        rows = [{k: r[k] for k in ("model", "accuracy", "balanced_accuracy")}
                for r in _run_baselines(cfg, train + val, test, None)]
    ev = TR.evaluate(model, TR.prepare(test, _size(model)))
    rows.append({"model": "CNN", "accuracy": ev["acc"], "balanced_accuracy": ev["bacc"]})
    counts = _class_counts(test)
    majority = max(counts.values()) / len(test)
    report = {"test_size": len(test), "class_counts": counts, "rows": rows,
              "majority_baseline": {"accuracy": majority, "balanced_accuracy": 0.5},
              "cnn_keypoint_mse": ev["mse"]}
    _dump_json(out / "report.json", report)
    header = f"test set: {len(test)} images ({', '.join(f'{v} {k}' for k, v in counts.items())})"
    (out / "report.txt").write_text(_fmt_table(rows, header))
    return ["report.json", "report.txt"]


def _display(sample: D.ImageSample, size: tuple[int, int]) -> np.ndarray:
    px = sample.pixels
    return px if px.shape[:2] == size else D.resize_bilinear(px, *size)


def cmd_retrieve(cfg: RunConfig, out: Path, data: str, model_dir: str, k: int | None = None) -> list[str]:
    rc = cfg.get("retrieve")
    k = rc.k if k is None else k
    samples = _load_samples(data)
    model, mdir = _load_model(model_dir)
    train, val, test = _split(samples, cfg, mdir)
    past = train + val
    index = R.build_index(model, past)
    R.save_index(index, out / "index.aesi")
    size = _size(model)
    by_id = {s.id: s for s in past}
    images = np.stack([D.preprocess(s.pixels, size) for s in test]) if test else np.zeros((0, 3) + size)
    emb = N.predict_batches(model, images)[3] if test else np.zeros((0, index.dim))
    (out / "grids").mkdir(exist_ok=True)
    entries, lines = [], []
    for s, e, img in zip(test, emb, images):
        hits = R.query(index, e, k)
        entries.append({"id": s.id, "ordinal": s.ordinal_label,
                        "neighbours": [{"id": h, "distance": d, "ordinal": index.ordinal_of(h)} for h, d in hits]})
        lines.append(f"{s.id} [{s.ordinal_label}] -> " +
                     ", ".join(f"{h} [{index.ordinal_of(h)}] {d:.4f}" for h, d in hits))
        heat = X.overlay(X.lrp(model, img), _display(s, size)) if rc.heatmap else None
        R.render_grid(_display(s, size), s.ordinal_label,
                      [(_display(by_id[h], size), index.ordinal_of(h), d) for h, d in hits],
                      out / "grids" / f"{s.id}.png", heatmap=heat, scale=rc.scale)
    adjacency = R.adjacency_score(index, zip(emb, [s.ordinal_label for s in test]), k) if test else None
    _dump_json(out / "retrieval.json", {"k": k, "index_size": len(index), "adjacency": adjacency,
                                        "queries": entries})
    summary = f"k={k} index={len(index)} queries={len(test)} adjacency={adjacency}\n"
    (out / "retrieval.txt").write_text(summary + "\n".join(lines) + "\n")
    return ["index.aesi", "retrieval.json", "retrieval.txt", "grids/"]


def cmd_explain(cfg: RunConfig, out: Path, data: str, model_dir: str, limit: int | None = None,
                dump: bool | None = None) -> list[str]:
    ec = cfg.get("explain")
    limit = ec.limit if limit is None else limit
    dump = ec.dump if dump is None else dump
    samples = _load_samples(data)
    model, mdir = _load_model(model_dir)
    _, _, test = _split(samples, cfg, mdir)
    if limit > 0:
        test = test[:limit]
    size = _size(model)
    (out / "heatmaps").mkdir(exist_ok=True)
    if dump:
        (out / "relevance").mkdir(exist_ok=True)
    entries = []
    for s in test:
        rmap = X.lrp(model, D.preprocess(s.pixels, size), ec.eps)
        X.render_heatmap(rmap, _display(s, size), out / "heatmaps" / f"{s.id}.png", scale=ec.scale)
        if dump:
            X.dump_relevance(rmap, out / "relevance" / f"{s.id}.csv")
        frac = X.positive_mass_fraction(rmap, D.breast_regions(s.geometry, *size)) if s.geometry else None
        entries.append({"id": s.id, "score": rmap.score, "total": rmap.total, "region_fraction": frac})
    fracs = [e["region_fraction"] for e in entries if e["region_fraction"] is not None]
    share = float(np.mean([f >= ec.region_threshold for f in fracs])) if fracs else None
    _dump_json(out / "explain.json", {"eps": ec.eps, "images": len(entries),
                                      "region_threshold": ec.region_threshold,
                                      "share_above_threshold": share, "maps": entries})
    return ["explain.json", "heatmaps/"] + (["relevance/"] if dump else [])


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aesnet", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"aesnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, data=True, model=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if model:
            sp.add_argument("--model", required=True, help="train output directory")
        return sp

    add("gen-data", "render the synthetic dataset", data=False)
    add("train", "two-stage training")
    sp = add("baseline", "SVM baselines on annotated keypoint features")
    sp.add_argument("--model", help="reuse the split recorded by a train run")
    sp = add("eval", "test-set table: four SVM rows and the CNN", model=True)
    sp.add_argument("--baseline", help="reuse results.json from a baseline run")
    sp = add("retrieve", "nearest past cases for every test image", model=True)
    sp.add_argument("--k", type=int, help="neighbours per query")
    sp = add("explain", "LRP heatmaps for test images", model=True)
    sp.add_argument("--limit", type=int, help="explain only the first N test images")
    sp.add_argument("--dump", action="store_true", default=None, help="also write raw relevance CSVs")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = {k: getattr(args, k) for k in ("config", "data", "model", "baseline") if getattr(args, k, None)}
        if args.command == "gen-data":
            files = cmd_gen_data(cfg, out)
        elif args.command == "train":
            files = cmd_train(cfg, out, args.data)
        elif args.command == "baseline":
            files = cmd_baseline(cfg, out, args.data, args.model)
        elif args.command == "eval":
            files = cmd_eval(cfg, out, args.data, args.model, args.baseline)
        elif args.command == "retrieve":
            files = cmd_retrieve(cfg, out, args.data, args.model, args.k)
        else:
            files = cmd_explain(cfg, out, args.data, args.model, args.limit, args.dump)
        _write_manifest(out, args.command, cfg, inputs, files)
    except (ConfigError, FileNotFoundError, ValueError, KeyError, S.ConvergenceError) as e:
        print(f"aesnet {args.command}: error: {e}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
