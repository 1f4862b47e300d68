"""Pyramid hierarchical transformer for patch classification.

Per pyramid level: mean-pool the patch by 2**level, collapse the spatial
window with a (1, S, S) convolution so that every reduced band becomes a
token, add a learned positional embedding and run the encoder stack
(H + FF(Attention(H)) per layer). Level outputs are flattened, concatenated
and passed through ReLU, a dense layer and softmax.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = "PYFORMER-CKPT1"


@dataclass(frozen=True)
class PyFormerConfig:
    num_classes: int
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

    def __post_init__(self):
        if self.ff_hidden is None:
            object.__setattr__(self, "ff_hidden", 4 * self.d_model)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        for name in ("S", "B_star", "num_levels", "num_layers", "num_heads", "d_model", "ff_hidden", "conv_filters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        scale = 2 ** (self.num_levels - 1)
        if self.S % scale or self.B_star % scale:
            raise ValueError(
                f"S={self.S} and B_star={self.B_star} must both be divisible by 2**(num_levels-1)={scale}"
            )
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def level_shape(self, level: int) -> tuple[int, int, int]:
        s = 2**level
        return self.S // s, self.S // s, self.B_star // s

    @property
    def feature_dim(self) -> int:
        return sum(self.level_shape(l)[2] for l in range(self.num_levels)) * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PyFormerConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --- parameters ----------------------------------------------------------


def parameter_shapes(cfg: PyFormerConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this order is also the checkpoint order."""
    d, F, C = cfg.d_model, cfg.ff_hidden, cfg.conv_filters
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(cfg.num_levels):
        s, _, b = cfg.level_shape(l)
        p = f"level{l}."
        shapes[p + "conv1.weight"] = (C, 1, 1, s, s)
        shapes[p + "conv1.bias"] = (C,)
        shapes[p + "conv2.weight"] = (d, C, 1, 1, 1)
        shapes[p + "conv2.bias"] = (d,)
        shapes[p + "res.weight"] = (d, C, 1, 1, 1)
        shapes[p + "res.bias"] = (d,)
        shapes[p + "pos"] = (b, d)
        for j in range(cfg.num_layers):
            q = f"{p}layer{j}."
            for proj in ("q", "k", "v", "o"):
                shapes[q + f"w{proj}"] = (d, d)
                shapes[q + f"b{proj}"] = (d,)
            shapes[q + "ff1.weight"] = (d, F)
            shapes[q + "ff1.bias"] = (F,)
            shapes[q + "ff2.weight"] = (F, d)
            shapes[q + "ff2.bias"] = (d,)
            if cfg.use_layernorm:
                for ln in ("ln1", "ln2"):
                    shapes[q + f"{ln}.gain"] = (d,)
                    shapes[q + f"{ln}.shift"] = (d,)
    shapes["head.weight"] = (cfg.feature_dim, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def parameter_count(cfg: PyFormerConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


class PyFormerParams(dict):
    """Ordered mapping of parameter name -> float64 array."""

    def __init__(self, cfg: PyFormerConfig, arrays: dict[str, np.ndarray]):
        shapes = parameter_shapes(cfg)
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            raise ValueError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if tuple(np.shape(arrays[name])) != shape:
                raise ValueError(f"{name}: shape {np.shape(arrays[name])} != expected {shape}")
        super().__init__((k, np.array(v, dtype=np.float64)) for k, v in arrays.items())
        self.config = cfg

    @property
    def count(self) -> int:
        return sum(a.size for a in self.values())

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.items()}

    def copy(self) -> "PyFormerParams":
        return PyFormerParams(self.config, {k: v.copy() for k, v in self.items()})


def init_params(cfg: PyFormerConfig, seed: int = 0) -> PyFormerParams:
    """Seeded init: fan-in uniform (He) for conv/FF weights, variance-1/fan_in
    uniform for attention and head projections, N(0, 0.02) positional
    embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "shift") or leaf in ("bq", "bk", "bv", "bo"):
            arrays[name] = np.zeros(shape)
        elif leaf == "gain":
            arrays[name] = np.ones(shape)
        elif leaf == "pos":
            arrays[name] = 0.02 * rng.standard_normal(shape)
        else:
            fan_in = math.prod(shape[1:]) if len(shape) == 5 else shape[0]
            he = "conv" in name or "res." in name or "ff" in name
            bound = math.sqrt((6.0 if he else 3.0) / fan_in)
            arrays[name] = rng.uniform(-bound, bound, shape)
    return PyFormerParams(cfg, arrays)


# --- building blocks -----------------------------------------------------


def pyramid_level_input(patch: Tensor, level: int) -> Tensor:
    """Down-scale an (S, S, B*) patch (or a batch of them) by 2**level."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    patch = T.as_tensor(patch)
    if level == 0:
        return patch
    return T.avg_pool3d(patch, 2**level)


def conv_block(level_input: Tensor, p: dict[str, Tensor], prefix: str = "") -> Tensor:
    """(n, s, s, b) level input -> (n, b, d_model) tokens.

    conv1 spans the whole s x s window with spectral extent 1, leaving one
    token per band; conv2 and the residual projection are pointwise.
    """
    x = T.as_tensor(level_input)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    n, s, s2, b = x.shape
    w1 = p[prefix + "conv1.weight"]
    if w1.shape[3:] != (s, s2):
        raise ValueError(f"conv1 kernel {w1.shape} does not span level input {x.shape[1:]}")
    vol = T.reshape(T.transpose(x, (0, 3, 1, 2)), (n, 1, b, s, s2))
    a1 = T.relu(T.conv3d(vol, w1, p[prefix + "conv1.bias"]))
    c2 = T.conv3d(a1, p[prefix + "conv2.weight"], p[prefix + "conv2.bias"])
    res = T.conv3d(a1, p[prefix + "res.weight"], p[prefix + "res.bias"])
    h = T.relu(c2 + res)
    d = h.shape[1]
    tokens = T.transpose(T.reshape(h, (n, d, b)), (0, 2, 1))
    return T.reshape(tokens, (b, d)) if single else tokens


def add_positional(tokens: Tensor, pos: Tensor) -> Tensor:
    if tokens.shape[-2:] != pos.shape:
        raise ValueError(f"positional embedding {pos.shape} does not match tokens {tokens.shape}")
    return tokens + pos


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def attention(H: Tensor, p: dict[str, Tensor], num_heads: int, prefix: str = "", return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over the token axis."""
    single = H.ndim == 2
    if single:
        H = T.reshape(H, (1,) + H.shape)
    n, N, d = H.shape
    if d % num_heads:
        raise ValueError(f"d_model={d} is not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t):
        return T.transpose(T.reshape(t, (n, N, num_heads, dh)), (0, 2, 1, 3))

    q = heads(_linear(H, p[prefix + "wq"], p[prefix + "bq"]))
    k = heads(_linear(H, p[prefix + "wk"], p[prefix + "bk"]))
    v = heads(_linear(H, p[prefix + "wv"], p[prefix + "bv"]))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (n, N, d))
    out = _linear(ctx, p[prefix + "wo"], p[prefix + "bo"])
    if single:
        out = T.reshape(out, (N, d))
    return (out, weights) if return_weights else out


def feed_forward(H: Tensor, p: dict[str, Tensor], prefix: str = "") -> Tensor:
    """Pointwise (kernel-1) convolution pair over the token axis with ReLU."""
    hidden = T.relu(_linear(H, p[prefix + "ff1.weight"], p[prefix + "ff1.bias"]))
    return _linear(hidden, p[prefix + "ff2.weight"], p[prefix + "ff2.bias"])


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - T.mean(x, axis=-1, keepdims=True)
    var = T.mean(centered * centered, axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * gain + shift


def encoder_layer(H_prev: Tensor, p: dict[str, Tensor], num_heads: int, prefix: str = "", use_layernorm: bool = False) -> Tensor:
    """H_prev + FF(Attention(H_prev)); optional pre-norm before each sublayer."""
    x = H_prev
    if use_layernorm:
        x = layer_norm(x, p[prefix + "ln1.gain"], p[prefix + "ln1.shift"])
    h_att = attention(x, p, num_heads, prefix)
    if use_layernorm:
        h_att = layer_norm(h_att, p[prefix + "ln2.gain"], p[prefix + "ln2.shift"])
    return H_prev + feed_forward(h_att, p, prefix)


def integrate_levels(sequences: list[Tensor], num_levels: int | None = None) -> Tensor:
    """Row-major flatten of each level's tokens, concatenated level 0 first."""
    if not sequences:
        raise ValueError("no level outputs to integrate")
    if num_levels is not None and len(sequences) != num_levels:
        raise ValueError(f"expected {num_levels} level outputs, got {len(sequences)}")
    single = sequences[0].ndim == 2
    flat = [T.reshape(s, (-1,)) if single else T.flatten(s, 1) for s in sequences]
    return flat[0] if len(flat) == 1 else T.concat(flat, axis=-1)


def classify_head(features: Tensor, weight: Tensor, bias: Tensor, lam: float) -> tuple[Tensor, Tensor]:
    """softmax(relu(features) @ W + b) and the penalty lam * sum(W**2)."""
    if features.shape[-1] != weight.shape[0]:
        raise ValueError(f"feature length {features.shape[-1]} does not match head weights {weight.shape}")
    single = features.ndim == 1
    x = T.relu(features)
    if single:
        x = T.reshape(x, (1, -1))
    probs = T.softmax(T.matmul(x, weight) + bias, axis=-1)
    if single:
        probs = T.reshape(probs, (weight.shape[1],))
    penalty = T.tsum(weight * weight) * lam
    return probs, penalty


def level_tokens(patches: Tensor, p: dict[str, Tensor], cfg: PyFormerConfig, level: int) -> Tensor:
    prefix = f"level{level}."
    H = conv_block(pyramid_level_input(patches, level), p, prefix)
    H = add_positional(H, p[prefix + "pos"])
    for j in range(cfg.num_layers):
        H = encoder_layer(H, p, cfg.num_heads, f"{prefix}layer{j}.", cfg.use_layernorm)
    return H


def forward(params, cfg: PyFormerConfig, patches) -> tuple[Tensor, Tensor]:
    """Batch (n, S, S, B*) -> class probabilities (n, K) and the L2 penalty.

    ``params`` may hold arrays or Tensors (use Tensors to differentiate).
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    x = T.as_tensor(patches)
    if x.ndim != 4 or x.shape[0] == 0 or x.shape[1:] != (cfg.S, cfg.S, cfg.B_star):
        raise ValueError(f"expected a nonempty batch of ({cfg.S}, {cfg.S}, {cfg.B_star}) patches, got {x.shape}")
    seqs = [level_tokens(x, p, cfg, l) for l in range(cfg.num_levels)]
    feats = integrate_levels(seqs, cfg.num_levels)
    return classify_head(feats, p["head.weight"], p["head.bias"], cfg.lam)


def predict_proba(params, cfg: PyFormerConfig, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(params, cfg, patches[i : i + batch_size])[0].data for i in range(0, len(patches), batch_size)]
    return np.concatenate(out, axis=0)


# --- checkpoints ---------------------------------------------------------


def save_checkpoint(params: PyFormerParams, directory, extra: dict | None = None) -> Path:
    """manifest.json (config + tensor index) and params.f64 (little-endian
    float64 blobs concatenated in manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, offset, chunks = [], 0, []
    for name, arr in params.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size * 8
    (directory / "params.f64").write_bytes(b"".join(chunks))
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "config": params.config.to_dict(),
        "blob": "params.f64",
        "params": index,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path) -> PyFormerParams:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint manifest")
    cfg = PyFormerConfig.from_dict(manifest["config"])
    blob = (path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for entry in manifest["params"]:
        start, count = entry["offset"], entry["count"]
        if start + count * 8 > len(blob):
            raise ValueError(f"blob too short for {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return PyFormerParams(cfg, arrays)
