"""Command-line entry point.

    pyformer synth     --out DIR                      synthetic cube
    pyformer split     --cube CUBE --out DIR          PCA + patches + disjoint split
    pyformer train     --cube CUBE --split SPLIT --out DIR
    pyformer eval      --cube CUBE --split SPLIT --checkpoint CKPT --out DIR
    pyformer map       --cube CUBE --checkpoint CKPT --out DIR
    pyformer ablate    --cube CUBE --axis heads --values 2,4,8 --out DIR
    pyformer gradcheck [--tolerance 1e-3]

Every command writes its resolved configuration to ``run_config.json`` in its
output directory; ``--config`` accepts that file back and flags override it.
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .gradcheck import grad_check
from .model import PyFormerConfig, forward, init_params, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .train import (
    TrainConfig,
    evaluate,
    loss,
    metrics_from_confusion,
    render_map,
    train,
    write_ppm,
)

log = logging.getLogger("pyformer")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
AXES = ("train_ratio", "patch_size", "heads", "layers")
DEFAULT_GRID = {
    "train_ratio": [0.05, 0.10, 0.15, 0.20, 0.25],
    "patch_size": [2, 4, 6, 8, 10],
    "heads": [2, 4, 6, 8, 10],
    "layers": [2, 4, 6, 8, 10],
}


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    out: str = "."
    cube: str | None = None
    split: str | None = None
    checkpoint: str | None = None
    seed: int = 0
    # synthetic scene
    classes: int = 3
    M: int = 27
    N: int = 27
    B: int = 32
    noise: float = 0.0
    # model
    S: int = 8
    B_star: int = 16
    num_levels: int = 2
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    ff_hidden: int | None = None
    conv_filters: int = 32
    lam: float = 0.01
    use_layernorm: bool = False
    # optimisation
    batch_size: int = 128
    learning_rate: float = 1e-4
    decay: float = 1e-6
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # split
    train_ratio: float = 0.05
    val_ratio: float = 0.05
    test_ratio: float = 0.90
    strict_spatial: bool = False
    # ablate
    axis: str | None = None
    values: list = field(default_factory=list)
    # gradcheck
    tolerance: float = 1e-3
    eps: float = 1e-4
    coords_per_tensor: int = 4

    @classmethod
    def resolve(cls, file_values: dict, flag_values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ValidationError(f"unknown keys in config file: {unknown}")
        return cls(**{**file_values, **flag_values})

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "run_config.json"
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    def model_config(self, num_classes: int) -> PyFormerConfig:
        return PyFormerConfig(
            num_classes=num_classes,
            S=self.S,
            B_star=self.B_star,
            num_levels=self.num_levels,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            d_model=self.d_model,
            ff_hidden=self.ff_hidden,
            conv_filters=self.conv_filters,
            lam=self.lam,
            use_layernorm=self.use_layernorm,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            decay=self.decay,
            epochs=self.epochs,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            seed=self.seed,
        )


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _need(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) in (None, "")]
    if missing:
        raise ValidationError(f"{cfg.command} needs --{', --'.join(missing)}")


def _load_patches(cube: D.HsiCube, S: int, B_star: int):
    if B_star > cube.B:
        raise ValidationError(f"B_star={B_star} exceeds the cube's {cube.B} bands")
    pca = D.fit_pca(cube, B_star)
    return pca, D.extract_patches(cube, pca, S)


def _read_split(path) -> tuple[D.SplitAssignment, dict]:
    doc = json.loads(Path(path).read_text())
    return D.SplitAssignment.from_json(doc), doc


# --- commands ------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.classes < 2:
        raise ValidationError(f"--classes must be at least 2, got {cfg.classes}")
    out = Path(cfg.out)
    cube = D.generate_synthetic(K=cfg.classes, M=cfg.M, N=cfg.N, B=cfg.B, noise=cfg.noise, seed=cfg.seed)
    try:
        D.save_cube(cube, out / "cube.json")
    except OSError as e:
        raise ValidationError(f"cannot write to {out}: {e}") from e
    cfg.write(out)
    print(f"cube {cube.M} x {cube.N} x {cube.B}, {cube.K} classes -> {out / 'cube.json'}")
    for name, n in cube.class_counts().items():
        print(f"  {name}: {n}")
    return EXIT_OK


def run_split(cfg: RunConfig, out: Path) -> Path:
    _need(cfg, "cube")
    cube = D.load_cube(cfg.cube)
    _, patches = _load_patches(cube, cfg.S, cfg.B_star)
    if not len(patches):
        raise ValidationError("no labeled valid patch centers in the cube")
    split = D.disjoint_split(patches, cfg.ratios, seed=cfg.seed, strict_spatial=cfg.strict_spatial)
    path = out / "split.json"
    _write_json(path, split.to_json(S=cfg.S, B_star=cfg.B_star))
    cfg.write(out)
    log.info("split train %d val %d test %d discarded %d", len(split.train), len(split.val), len(split.test), split.discarded)
    return path


def cmd_split(cfg: RunConfig) -> int:
    path = run_split(cfg, Path(cfg.out))
    split, _ = _read_split(path)
    print(f"train {len(split.train)}  val {len(split.val)}  test {len(split.test)}  discarded {split.discarded} -> {path}")
    return EXIT_OK


def _geometry_from_split(cfg: RunConfig, doc: dict) -> RunConfig:
    S, B_star = doc.get("S", cfg.S), doc.get("B_star", cfg.B_star)
    if (S, B_star) != (cfg.S, cfg.B_star):
        raise ValidationError(
            f"split was made with S={S}, B_star={B_star} but the run asks for S={cfg.S}, B_star={cfg.B_star}"
        )
    return cfg


def run_train(cfg: RunConfig, out: Path) -> Path:
    _need(cfg, "cube", "split")
    cube = D.load_cube(cfg.cube)
    split, doc = _read_split(cfg.split)
    _geometry_from_split(cfg, doc)
    _, patches = _load_patches(cube, cfg.S, cfg.B_star)
    model_cfg = cfg.model_config(cube.K)
    params, history = train(init_params(model_cfg, cfg.seed), model_cfg, cfg.train_config(), patches, split)
    path = save_checkpoint(params, out / "checkpoint", extra={"train": cfg.train_config().to_dict()})
    _write_json(out / "history.json", history.to_json())
    cfg.write(out)
    return path


def cmd_train(cfg: RunConfig) -> int:
    path = run_train(cfg, Path(cfg.out))
    hist = json.loads((Path(cfg.out) / "history.json").read_text())
    print(f"final loss {hist['loss'][-1]:.5f}  train OA {hist['train_oa'][-1]:.4f} -> {path}")
    return EXIT_OK


def run_eval(cfg: RunConfig, out: Path) -> dict:
    _need(cfg, "cube", "split", "checkpoint")
    cube = D.load_cube(cfg.cube)
    split, doc = _read_split(cfg.split)
    params = load_checkpoint(cfg.checkpoint)
    model_cfg = params.config
    split_geom = (doc.get("S", model_cfg.S), doc.get("B_star", model_cfg.B_star))
    if split_geom != (model_cfg.S, model_cfg.B_star):
        raise ValidationError(
            f"checkpoint expects S={model_cfg.S}, B_star={model_cfg.B_star}; "
            f"data split has S={split_geom[0]}, B_star={split_geom[1]}"
        )
    if model_cfg.num_classes != cube.K:
        raise ValidationError(f"checkpoint has {model_cfg.num_classes} classes, cube has {cube.K}")
    _, patches = _load_patches(cube, model_cfg.S, model_cfg.B_star)
    doc = {}
    for name in ("test", "val", "train"):
        centers = getattr(split, name)
        if centers:
            doc[name] = metrics_from_confusion(evaluate(params, model_cfg, patches, centers)).to_json(cube.class_names)
    if "test" not in doc:
        raise ValidationError("split has no test centers")
    metrics = {**doc["test"], "evaluated_on": "test", "val": doc.get("val"), "train": doc.get("train")}
    _write_json(out / "metrics.json", metrics)
    cfg.write(out)
    return metrics


def cmd_eval(cfg: RunConfig) -> int:
    m = run_eval(cfg, Path(cfg.out))
    p = m["percent"]
    print(f"test  OA {p['oa']}  AA {p['aa']}  kappa {p['kappa']}  F1 {p['f1_macro']}")
    if m.get("val"):
        v = m["val"]["percent"]
        print(f"val   OA {v['oa']}  AA {v['aa']}  kappa {v['kappa']}  F1 {v['f1_macro']}")
    return EXIT_OK


def cmd_map(cfg: RunConfig) -> int:
    _need(cfg, "cube", "checkpoint")
    cube = D.load_cube(cfg.cube)
    params = load_checkpoint(cfg.checkpoint)
    if params.config.num_classes != cube.K:
        raise ValidationError(f"checkpoint has {params.config.num_classes} classes, cube has {cube.K}")
    pca = D.fit_pca(cube, params.config.B_star)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(render_map(params, params.config, cube, pca), out / "map.ppm")
    cfg.write(out)
    print(f"map {cube.N} x {cube.M} -> {out / 'map.ppm'}")
    return EXIT_OK


# --- ablation ------------------------------------------------------------


def _ablation_variant(base: RunConfig, axis: str, value, cube: D.HsiCube) -> RunConfig:
    """Config for one grid value; raises ValidationError when it cannot run."""
    if axis == "train_ratio":
        value = float(value)
        test = 1.0 - value - base.val_ratio
        if value <= 0 or test <= 0:
            raise ValidationError(f"train ratio {value} leaves no test share with val ratio {base.val_ratio}")
        cfg = replace(base, train_ratio=value, test_ratio=round(test, 12))
    elif axis == "patch_size":
        value = int(value)
        if value > min(cube.M, cube.N):
            raise ValidationError(f"patch size {value} exceeds the {cube.M} x {cube.N} scene")
        cfg = replace(base, S=value)
    elif axis == "heads":
        cfg = replace(base, num_heads=int(value))
    elif axis == "layers":
        cfg = replace(base, num_layers=int(value))
    else:
        raise ValidationError(f"unknown axis {axis!r}; choose from {AXES}")
    try:
        cfg.model_config(cube.K)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    return cfg


def format_report(report: dict) -> str:
    cols = ("oa", "aa", "kappa", "f1")
    lines = [f"{report['axis']:>12} " + " ".join(f"{c.upper():>8}" for c in cols)]
    for row in report["rows"]:
        if row.get("skipped"):
            lines.append(f"{row['value']!s:>12}  skipped: {row['reason']}")
            continue
        cells = []
        for c in cols:
            mark = "*" if report["best"].get(c) == row["value"] else " "
            cells.append(f"{100 * row[c]:7.2f}{mark}")
        lines.append(f"{row['value']!s:>12} " + " ".join(cells))
    lines.append("* best per column")
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig) -> int:
    _need(cfg, "cube", "axis")
    if cfg.axis not in AXES:
        raise ValidationError(f"unknown axis {cfg.axis!r}; choose from {AXES}")
    values = list(cfg.values) or DEFAULT_GRID[cfg.axis]
    cube = D.load_cube(cfg.cube)
    out = Path(cfg.out)
    cfg = replace(cfg, values=values)
    cfg.write(out)
    rows = []
    for value in values:
        try:
            variant = _ablation_variant(cfg, cfg.axis, value, cube)
        except ValidationError as e:
            warnings.warn(f"skipping {cfg.axis}={value}: {e}")
            rows.append({"value": value, "skipped": True, "reason": str(e)})
            continue
        run_dir = out / "runs" / f"{cfg.axis}={value}"
        variant = replace(variant, command="split", out=str(run_dir))
        split_path = run_split(variant, run_dir)
        variant = replace(variant, command="train", split=str(split_path))
        ckpt = run_train(variant, run_dir)
        variant = replace(variant, command="eval", checkpoint=str(ckpt))
        m = run_eval(variant, run_dir)
        rows.append({"value": value, "oa": m["oa"], "aa": m["aa"], "kappa": m["kappa"], "f1": m["f1_macro"]})
        log.info("%s=%s OA %.4f", cfg.axis, value, m["oa"])
    done = [r for r in rows if not r.get("skipped")]
    if not done:
        raise ValidationError(f"every {cfg.axis} value was invalid")
    best = {c: max(done, key=lambda r: r[c])["value"] for c in ("oa", "aa", "kappa", "f1")}
    report = {"axis": cfg.axis, "values": values, "rows": rows, "best": best}
    _write_json(out / "report.json", report)
    text = format_report(report)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# --- gradient check ------------------------------------------------------

GRADCHECK_MODEL = dict(S=4, B_star=4, d_model=8, num_heads=2, num_layers=1, num_levels=1)


def run_gradcheck(tolerance: float, eps: float = 1e-4, seed: int = 0, coords_per_tensor: int = 4, conv_filters: int = 32):
    """Worst relative error per parameter tensor of a tiny seeded model."""
    cfg = PyFormerConfig(num_classes=3, conv_filters=conv_filters, **GRADCHECK_MODEL)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for name in params:
        if name.endswith(("bias", "bq", "bk", "bv", "bo")):
            params[name] = 0.1 * rng.standard_normal(params[name].shape)
    x = rng.standard_normal((2, cfg.S, cfg.S, cfg.B_star))
    y = np.array([1, 3])
    results = []
    for name, value in params.items():
        fixed = {k: Tensor(v) for k, v in params.items() if k != name}

        def f(w, name=name, fixed=fixed):
            probs, pen = forward({**fixed, name: w}, cfg, x)
            return loss(probs, y, pen)

        coords = rng.choice(value.size, size=min(coords_per_tensor, value.size), replace=False)
        err = grad_check(f, value, eps=eps, coords=coords)
        results.append({"group": name, "max_rel_error": err, "pass": bool(err <= tolerance)})
    return results


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_gradcheck(cfg.tolerance, cfg.eps, cfg.seed, cfg.coords_per_tensor, cfg.conv_filters)
    if cfg.out not in (None, "", "."):
        out = Path(cfg.out)
        _write_json(out / "gradcheck.json", {"tolerance": cfg.tolerance, "results": results})
        cfg.write(out)
    width = max(len(r["group"]) for r in results)
    for r in results:
        print(f"{r['group']:<{width}}  {r['max_rel_error']:.3e}  {'ok' if r['pass'] else 'FAIL'}")
    failed = sorted((r for r in results if not r["pass"]), key=lambda r: -r["max_rel_error"])
    if failed:
        print(f"{len(failed)} of {len(results)} groups exceed tolerance {cfg.tolerance:g}; worst:")
        for r in failed[:5]:
            print(f"  {r['group']}  {r['max_rel_error']:.3e}")
        return EXIT_INVALID
    print(f"all {len(results)} groups within {cfg.tolerance:g}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


# --- argument parsing ----------------------------------------------------


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _values(s: str) -> list:
    out = []
    for tok in s.split(","):
        tok = tok.strip()
        out.append(int(tok) if tok.lstrip("-").isdigit() else float(tok))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyformer", description="Pyramid hierarchical transformer for HSI classification")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", dest="config_file", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--error-json", dest="error_json", action="store_true", help="print failures as JSON on stdout")

    data = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    data.add_argument("--cube")
    data.add_argument("--split")
    data.add_argument("--checkpoint")

    model = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    model.add_argument("--patch-size", "--S", dest="S", type=int)
    model.add_argument("--b-star", dest="B_star", type=int)
    model.add_argument("--levels", dest="num_levels", type=int)
    model.add_argument("--layers", dest="num_layers", type=int)
    model.add_argument("--heads", dest="num_heads", type=int)
    model.add_argument("--d-model", dest="d_model", type=int)
    model.add_argument("--ff-hidden", dest="ff_hidden", type=int)
    model.add_argument("--conv-filters", dest="conv_filters", type=int)
    model.add_argument("--lam", "--lambda", dest="lam", type=float)
    model.add_argument("--layernorm", dest="use_layernorm", type=_bool)
    model.add_argument("--batch-size", dest="batch_size", type=int)
    model.add_argument("--lr", dest="learning_rate", type=float)
    model.add_argument("--decay", type=float)
    model.add_argument("--epochs", type=int)
    model.add_argument("--beta1", type=float)
    model.add_argument("--beta2", type=float)
    model.add_argument("--epsilon", type=float)

    split = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    split.add_argument("--train-ratio", dest="train_ratio", type=float)
    split.add_argument("--val-ratio", dest="val_ratio", type=float)
    split.add_argument("--test-ratio", dest="test_ratio", type=float)
    split.add_argument("--strict-spatial", dest="strict_spatial", type=_bool)

    kw = dict(argument_default=argparse.SUPPRESS)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic cube", **kw)
    p.add_argument("--classes", type=int)
    p.add_argument("--height", dest="M", type=int)
    p.add_argument("--width", dest="N", type=int)
    p.add_argument("--bands", dest="B", type=int)
    p.add_argument("--noise", type=float)
    sub.add_parser("split", parents=[common, data, model, split], help="disjoint train/val/test split", **kw)
    sub.add_parser("train", parents=[common, data, model, split], help="train and write a checkpoint", **kw)
    sub.add_parser("eval", parents=[common, data, model, split], help="metrics JSON for a checkpoint", **kw)
    sub.add_parser("map", parents=[common, data, model], help="classification map (P6 PPM)", **kw)
    p = sub.add_parser("ablate", parents=[common, data, model, split], help="one train+eval per axis value", **kw)
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--values", type=_values, help="comma separated; defaults to the standard grid per axis")
    p = sub.add_parser("gradcheck", parents=[common, model], help="finite-difference check of a tiny model", **kw)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--coords", dest="coords_per_tensor", type=int)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("PYFORMER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    error_json = args.pop("error_json", False)
    config_file = args.pop("config_file", None)
    try:
        file_values = json.loads(Path(config_file).read_text()) if config_file else {}
        cfg = RunConfig.resolve(file_values, {**args, "command": command})
        return COMMANDS[command](cfg)
    except (ValidationError, ValueError, D.CubeFormatError, FileNotFoundError, json.JSONDecodeError, TypeError) as e:
        code = EXIT_INVALID
        err = e
    except Exception as e:  # noqa: BLE001 - surfaced as a runtime failure code
        code = EXIT_RUNTIME
        err = e
    if error_json:
        print(json.dumps({"error": str(err), "type": type(err).__name__, "exit_code": code}))
    else:
        print(f"pyformer {command}: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
