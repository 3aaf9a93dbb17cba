"""Command-line entry point: ``sparseseg <command> [options]``.

Commands: train, infer, cost, eval, equiv, gradcheck.  Configuration comes
from a flat ``key=value`` file (``--config``) overridden by flags.  Results
go to stdout as ``key=value`` lines; failures exit nonzero after printing
one line ``error kind=<kind> detail=<json string>`` to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import data
from .builders import build_two_column, optimize_structure
from .cost import mac_of_pipeline
from .graph import GraphError, load, save
from .inference import classic_infer, fast_infer
from .sparsity import RegionGrid
from .tensor import ParameterError
from .train import TrainConfig, TrainingDiverged, gradcheck, train, write_history


class ConfigError(ValueError):
    pass


class MissingFile(OSError):
    pass


EXIT_CODES = {"config": 2, "missing-file": 3, "dimension": 4, "graph": 5, "diverged": 6,
              "format": 7, "io": 8}


def _ints(text):
    return tuple(int(v) for v in str(text).replace("x", ",").split(",") if v.strip())


@dataclass
class RunConfig:
    fusion: str = "isctf"
    decoder: str = "sharpmask"
    plan_full: tuple = (1, 1, 2, 0)
    plan_half: tuple = (1, 2, 4, 1)
    optimized: bool = False
    classes: int = 8
    region_px: int = 16
    dims: tuple = (64, 128)
    p: float = 0.25
    k: int | None = None
    lam: float = 1.0
    alpha: float = 0.9
    lr: float = 0.05
    momentum: float = 0.9
    iterations: int = 500
    batch: int = 2
    aux_weight: float = 0.4
    bootstrap_fraction: float = 1.0
    seed: int = 0
    n_train: int = 200
    n_eval: int = 50
    split: str = "val"
    trials: int = 10
    mode: str = "classic"
    model: str | None = None
    image: str | None = None
    out: str = "."

    def validate(self):
        if self.mode not in ("classic", "fast"):
            raise ConfigError(f"mode must be classic or fast, not {self.mode!r}")
        if self.split not in ("train", "val"):
            raise ConfigError(f"split must be train or val, not {self.split!r}")
        if len(self.dims) != 2:
            raise ConfigError("dims must be HxW")
        if len(self.plan_full) != 4 or len(self.plan_half) != 4:
            raise ConfigError("stage plans need four unit counts")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("p must lie in [0, 1]")
        for key in ("n_train", "n_eval", "trials", "iterations", "batch", "classes", "region_px"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        return self


_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def _convert(name, raw):
    f = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    default = f.default
    try:
        if name in ("plan_full", "plan_half", "dims"):
            return _ints(raw)
        if name in ("model", "image") or isinstance(default, str):
            return str(raw)
        if isinstance(default, bool):
            if str(raw).lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[str(raw).lower()]
        if name == "k":
            return None if str(raw).lower() in ("", "none") else int(raw)
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None


def read_config(path) -> dict:
    if not os.path.exists(path):
        raise MissingFile(f"config file {path} not found")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _convert(key, raw)
    return values


def make_config(args) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    for key in ("model", "image", "mode", "p", "k", "seed", "out"):
        val = getattr(args, key)
        if val is not None:
            values[key] = val
    return RunConfig(**values).validate()


# -- helpers --------------------------------------------------------------------------

def _region(cfg):
    return RegionGrid(cfg.region_px) if cfg.fusion in ("sctf", "isctf") else None


def _build(cfg):
    g = build_two_column(cfg.decoder, cfg.fusion, _region(cfg), classes=cfg.classes,
                         plan_full=cfg.plan_full, plan_half=cfg.plan_half, p=cfg.p,
                         seed=cfg.seed)
    return optimize_structure(g) if cfg.optimized else g


def _model(cfg, required=True):
    if cfg.model is None:
        if required:
            raise ConfigError("this command needs --model")
        return _build(cfg)
    if not os.path.exists(cfg.model):
        raise MissingFile(f"model file {cfg.model} not found")
    return load(cfg.model)


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(lr=cfg.lr, momentum=cfg.momentum, iterations=cfg.iterations,
                       batch=cfg.batch, p=cfg.p, lam=cfg.lam, alpha=cfg.alpha,
                       aux_weight=cfg.aux_weight, bootstrap_fraction=cfg.bootstrap_fraction,
                       seed=cfg.seed)


def _scene_seeds(split, count):
    seeds = data.TRAIN_SEEDS if split == "train" else data.VAL_SEEDS
    return seeds[:count]


def _emit(**kv):
    for key, val in kv.items():
        if isinstance(val, float):
            val = repr(val)
        elif isinstance(val, bool):
            val = str(val).lower()
        print(f"{key}={val}")


def _infer(graph, image, cfg):
    k = cfg.k
    if cfg.mode == "fast":
        return fast_infer(graph, image, cfg.p, k)
    if graph.is_sparse:
        return classic_infer(graph, image, cfg.p, k)
    return classic_infer(graph, image)


# -- commands --------------------------------------------------------------------------

def cmd_train(cfg):
    graph = _build(cfg)
    dataset = data.make_dataset(_scene_seeds("train", cfg.n_train), cfg.dims, cfg.classes,
                                cfg.region_px)
    trained, history = train(graph, _train_config(cfg), dataset, log_every=0)
    os.makedirs(cfg.out, exist_ok=True)
    model = os.path.join(cfg.out, "model.sgraph")
    hist = os.path.join(cfg.out, "history.csv")
    save(trained, model)
    write_history(hist, history)
    _emit(model=model, history=hist, final_loss=history[-1]["loss"], final_q=history[-1]["q"])


def cmd_infer(cfg):
    graph = _model(cfg)
    if cfg.image is None:
        raise ConfigError("infer needs --image")
    if not os.path.exists(cfg.image):
        raise MissingFile(f"image file {cfg.image} not found")
    image = data.read_image(cfg.image)
    res = _infer(graph, image, cfg)
    os.makedirs(cfg.out, exist_ok=True)
    labels_path = os.path.join(cfg.out, "labels.pgm")
    overlay_path = os.path.join(cfg.out, "overlay.ppm")
    cost_path = os.path.join(cfg.out, "cost.txt")
    data.write_labels(labels_path, res.labels[0])
    mask = res.mask[0] if res.mask is not None else np.zeros((1, 1), dtype=np.int8)
    data.write_image(overlay_path, data.render_overlay(image, mask))
    with open(cost_path, "w") as fh:
        fh.write(res.cost.to_kv())
    _emit(labels=labels_path, overlay=overlay_path, cost=cost_path, mode=cfg.mode,
          active=len(res.active[0]) if res.mask is not None else 0, macs=res.cost.total)


def cmd_cost(cfg):
    graph = _model(cfg, required=False)
    dims = cfg.dims
    if cfg.mode == "classic" or not graph.is_sparse:
        rep = mac_of_pipeline(graph, dims, "classic")
        sys.stdout.write(rep.to_kv())
        return
    n = mac_of_pipeline(graph, dims, "classic").n_regions
    ks = [cfg.k] if cfg.k is not None else list(range(n + 1))
    print("k,total,half_column,full_column_per_region,fixed_overhead")
    for k in ks:
        rep = mac_of_pipeline(graph, dims, "fast", k)
        b = rep.breakdown
        print(f"{k},{rep.total},{b['half_column']},{b['full_column_per_region']},"
              f"{b['fixed_overhead']}")


def cmd_eval(cfg):
    graph = _model(cfg)
    m = data.ConfusionMatrix(graph.meta.get("classes", cfg.classes))
    for seed in _scene_seeds(cfg.split, cfg.n_eval):
        sample = data.gen_scene(seed, cfg.dims, m.classes, cfg.region_px)
        m.add(_infer(graph, sample.image, cfg).labels, sample.labels[None])
    pixel_acc, mean_acc, miou = data.metrics(m)
    _emit(split=cfg.split, mode=cfg.mode, scenes=cfg.n_eval, pixel_acc=pixel_acc,
          mean_acc=mean_acc, mean_iou=miou)


def cmd_equiv(cfg):
    graph = _model(cfg, required=False)
    if not graph.is_sparse:
        raise GraphError("equivalence check needs an sctf/isctf graph")
    worst, same = 0.0, True
    for seed in _scene_seeds("val", cfg.trials):
        image = data.gen_scene(seed, cfg.dims, graph.meta["classes"], cfg.region_px).image
        a = classic_infer(graph, image, cfg.p, cfg.k)
        b = fast_infer(graph, image, cfg.p, cfg.k)
        worst = max(worst, float(np.abs(a.fused_scores - b.fused_scores).max()))
        same &= bool(np.array_equal(a.labels, b.labels))
    _emit(trials=cfg.trials, p=cfg.p, max_score_diff=worst, labels_identical=same)


def cmd_gradcheck(cfg):
    graph = _model(cfg, required=False)
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.dims
    sample = data.gen_scene(int(rng.integers(len(data.TRAIN_SEEDS))), (h, w), cfg.classes,
                            cfg.region_px)
    images = np.concatenate([sample.image, sample.image[..., ::-1]])
    labels = np.stack([sample.labels, sample.labels[..., ::-1]])
    worst, rows = gradcheck(graph, images, labels, seed=cfg.seed,
                            config=dataclasses.replace(_train_config(cfg), lam=max(cfg.lam, 0.1)))
    _emit(coordinates=len(rows), max_rel_error=worst)


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "cost": cmd_cost, "eval": cmd_eval,
            "equiv": cmd_equiv, "gradcheck": cmd_gradcheck}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparseseg", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="flat key=value configuration file")
    ap.add_argument("--model", help="model file (graph serialization)")
    ap.add_argument("--image", help="input image (binary PPM)")
    ap.add_argument("--mode", choices=("classic", "fast"))
    ap.add_argument("--p", type=float, help="fraction of regions computed at full resolution")
    ap.add_argument("--k", type=int, help="number of regions (overrides --p)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fail(kind, err) -> int:
    print(f"error kind={kind} detail={json.dumps(str(err))}", file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        COMMANDS[args.command](cfg)
    except ConfigError as err:
        return _fail("config", err)
    except (MissingFile, FileNotFoundError) as err:
        return _fail("missing-file", err)
    except data.FormatError as err:
        return _fail("format", err)
    except TrainingDiverged as err:
        return _fail("diverged", err)
    except GraphError as err:
        return _fail("graph", err)
    except ParameterError as err:
        return _fail("dimension", err)
    except OSError as err:
        return _fail("io", err)
    return 0


if __name__ == "__main__":
    sys.exit(main())
