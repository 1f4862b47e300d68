"""Loss, Adam, the training loop, confusion-matrix metrics and map rendering."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import HsiCube, PatchSet, PcaModel, SplitAssignment, extract_patches
from .model import PyFormerConfig, PyFormerParams, forward, predict_proba
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    decay: float = 1e-6
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"batch_size and epochs must be >= 1, got {self.batch_size}, {self.epochs}")
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.decay < 0:
            raise ValueError("learning_rate and epsilon must be positive, decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def loss(probs: Tensor, targets, l2_penalty) -> Tensor:
    """Mean cross-entropy over the batch plus the penalty; targets are 1..K."""
    targets = np.asarray(targets, dtype=np.int64)
    K = probs.shape[-1]
    if targets.size and (targets.min() < 1 or targets.max() > K):
        raise ValueError(f"targets must lie in 1..{K}, got range {targets.min()}..{targets.max()}")
    logp = T.log(T.clip_min(probs, PROB_FLOOR))
    nll = -T.mean(T.pick(logp, targets - 1))
    return nll + l2_penalty


# --- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with lr / (1 + decay * t) step-size decay."""
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise ValueError(f"gradient {k} with shape {np.shape(g)} has no matching parameter")
        if state.m.get(k) is None or state.m[k].shape != g.shape:
            raise ValueError(f"optimizer state for {k} does not match the parameter shape")
    state.t += 1
    t = state.t
    lr_t = cfg.learning_rate / (1.0 + cfg.decay * t)
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for k, g in grads.items():
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        params[k] -= lr_t * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


# --- metrics -------------------------------------------------------------


@dataclass
class Metrics:
    oa: float
    aa: float
    kappa: float
    f1_macro: float
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    confusion: np.ndarray

    def to_json(self, class_names: list[str] | None = None) -> dict:
        K = len(self.per_class_recall)
        names = class_names or [f"class_{k + 1}" for k in range(K)]
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "f1_macro": self.f1_macro,
            "percent": {k: f"{100 * getattr(self, k):.2f}" for k in ("oa", "aa", "kappa", "f1_macro")},
            "f1_aggregation": "macro over classes present in the evaluated set",
            "per_class": [
                {"name": names[k], "recall": float(self.per_class_recall[k]), "f1": float(self.per_class_f1[k])}
                for k in range(K)
            ],
            "confusion": self.confusion.astype(int).tolist(),
        }


def confusion_matrix(true: np.ndarray, pred: np.ndarray, K: int) -> np.ndarray:
    """K x K counts; rows are true class, columns predicted (ids 1..K)."""
    C = np.zeros((K, K), dtype=np.int64)
    np.add.at(C, (np.asarray(true) - 1, np.asarray(pred) - 1), 1)
    return C


def metrics_from_confusion(C) -> Metrics:
    C = np.asarray(C, dtype=np.int64)
    total = C.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(C).astype(np.float64)
    rows = C.sum(axis=1).astype(np.float64)
    cols = C.sum(axis=0).astype(np.float64)
    present = rows > 0
    recall = np.divide(diag, rows, out=np.zeros_like(diag), where=present)
    precision = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
    oa = float(diag.sum() / total)
    pe = float((rows * cols).sum() / float(total) ** 2)
    if pe < 1.0:
        kappa = (oa - pe) / (1.0 - pe)
    else:
        # only one class on both axes: agreement is perfect
        kappa = 1.0 if oa == 1.0 else 0.0
    return Metrics(
        oa=oa,
        aa=float(recall[present].mean()),
        kappa=float(kappa),
        f1_macro=float(f1[present].mean()),
        per_class_recall=recall,
        per_class_f1=f1,
        confusion=C,
    )


# --- training and evaluation ---------------------------------------------


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    train_oa: list[float] = field(default_factory=list)
    val_oa: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        # NaN (no validation set) becomes null so the file stays strict JSON
        val = [None if math.isnan(v) else v for v in self.val_oa]
        return {"loss": self.loss, "train_oa": self.train_oa, "val_oa": val}


def loss_and_grads(params: PyFormerParams, cfg: PyFormerConfig, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    leaves = params.leaves(requires_grad=True)
    with Tape() as tape:
        probs, penalty = forward(leaves, cfg, x)
        value = loss(probs, y, penalty)
    grads = backward(tape, value)
    return value.item(), {k: grads[t] for k, t in leaves.items()}


def predict(params, cfg: PyFormerConfig, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class ids 1..K; ties resolve to the lowest id."""
    return np.argmax(predict_proba(params, cfg, patches, batch_size), axis=1) + 1


def evaluate(params, cfg: PyFormerConfig, patches: PatchSet, centers) -> np.ndarray:
    centers = list(centers)
    if not centers:
        raise ValueError("no centers to evaluate")
    x, y = patches.select(centers)
    return confusion_matrix(y, predict(params, cfg, x), cfg.num_classes)


def train(
    params: PyFormerParams,
    cfg: PyFormerConfig,
    train_cfg: TrainConfig,
    patches: PatchSet,
    split: SplitAssignment,
    state: AdamState | None = None,
) -> tuple[PyFormerParams, TrainHistory]:
    """Seeded mini-batch Adam training; returns new params, input untouched."""
    if not split.train:
        raise ValueError("training set is empty")
    params = params.copy()
    state = state or AdamState.zeros_like(params)
    rng = np.random.default_rng(train_cfg.seed)
    x_all, y_all = patches.select(split.train)
    history = TrainHistory()
    n = len(y_all)
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            value, grads = loss_and_grads(params, cfg, x_all[idx], y_all[idx])
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch + 1}")
            total += value * len(idx)
            adam_step(params, grads, state, train_cfg)
        history.loss.append(total / n)
        history.train_oa.append(metrics_from_confusion(evaluate(params, cfg, patches, split.train)).oa)
        history.val_oa.append(
            metrics_from_confusion(evaluate(params, cfg, patches, split.val)).oa if split.val else float("nan")
        )
        log.info(
            "epoch %d/%d loss %.5f train OA %.4f val OA %.4f",
            epoch + 1, train_cfg.epochs, history.loss[-1], history.train_oa[-1], history.val_oa[-1],
        )
    return params, history


# --- classification maps -------------------------------------------------

PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
        (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
        (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
        (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    ],
    dtype=np.uint8,
)


def palette(K: int) -> np.ndarray:
    if K <= len(PALETTE):
        return PALETTE[:K]
    rng = np.random.default_rng(K)
    extra = rng.integers(32, 256, size=(K - len(PALETTE), 3), dtype=np.uint8)
    return np.concatenate([PALETTE, extra])


def predict_map(params, cfg: PyFormerConfig, cube: HsiCube, pca: PcaModel) -> np.ndarray:
    """M x N predicted class ids; 0 for unlabeled or border pixels."""
    patches = extract_patches(cube, pca, cfg.S)
    out = np.zeros((cube.M, cube.N), dtype=np.int64)
    if len(patches):
        pred = predict(params, cfg, patches.patches)
        rows, cols = np.array(patches.centers).T
        out[rows, cols] = pred
    return out


def render_map(params, cfg: PyFormerConfig, cube: HsiCube, pca: PcaModel) -> np.ndarray:
    """M x N x 3 uint8 image; black where nothing was predicted."""
    pred = predict_map(params, cfg, cube, pca)
    colors = np.concatenate([np.zeros((1, 3), dtype=np.uint8), palette(cfg.num_classes)])
    return colors[pred]


def write_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    """Parse a binary P6 image with maxval 255."""
    raw = open(path, "rb").read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"not a P6 image: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise ValueError(f"pixel data holds {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
