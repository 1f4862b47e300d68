"""Hyperspectral cubes: file I/O, synthetic scenes, PCA band reduction,
patch extraction and disjoint train/val/test splitting."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = "HSICUBE1"


class CubeFormatError(ValueError):
    pass


@dataclass
class HsiCube:
    """M x N x B reflectance raster with an M x N label raster (0 = unlabeled)."""

    reflectance: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.reflectance = np.asarray(self.reflectance, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.reflectance.ndim != 3:
            raise ValueError(f"reflectance must be M x N x B, got {self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise ValueError(f"label raster {self.labels.shape} does not match {self.reflectance.shape[:2]}")
        if self.labels.size and int(self.labels.max()) > len(self.class_names):
            raise ValueError(
                f"label value {int(self.labels.max())} exceeds the {len(self.class_names)} named classes"
            )

    @property
    def M(self) -> int:
        return self.reflectance.shape[0]

    @property
    def N(self) -> int:
        return self.reflectance.shape[1]

    @property
    def B(self) -> int:
        return self.reflectance.shape[2]

    @property
    def K(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels.reshape(-1), minlength=self.K + 1)
        return {name: int(counts[k + 1]) for k, name in enumerate(self.class_names)}


def save_cube(cube: HsiCube, header_path) -> Path:
    """Write the JSON header plus raw f32le (BIP) and u16le label files next to it."""
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    stem = header_path.stem
    data_file, label_file = f"{stem}.f32", f"{stem}.labels.u16"
    (header_path.parent / data_file).write_bytes(cube.reflectance.astype("<f4").tobytes(order="C"))
    (header_path.parent / label_file).write_bytes(cube.labels.astype("<u2").tobytes(order="C"))
    header = {
        "magic": MAGIC,
        "M": cube.M,
        "N": cube.N,
        "B": cube.B,
        "dtype": "f32le",
        "data_file": data_file,
        "label_file": label_file,
        "class_names": list(cube.class_names),
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def _read_raw(path: Path, expected: int, what: str) -> bytes:
    if not path.is_file():
        raise CubeFormatError(f"{what} file not found: {path}")
    raw = path.read_bytes()
    if len(raw) != expected:
        raise CubeFormatError(f"{what} file {path} holds {len(raw)} bytes, expected {expected}")
    return raw


def load_cube(header_path) -> HsiCube:
    header_path = Path(header_path)
    if not header_path.is_file():
        raise CubeFormatError(f"header not found: {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise CubeFormatError(f"header {header_path} is not valid JSON: {e}") from e
    if header.get("magic") != MAGIC:
        raise CubeFormatError(f"bad magic {header.get('magic')!r}, expected {MAGIC!r}")
    if header.get("dtype") != "f32le":
        raise CubeFormatError(f"unsupported dtype {header.get('dtype')!r}")
    M, N, B = (int(header[k]) for k in ("M", "N", "B"))
    if min(M, N, B) < 1:
        raise CubeFormatError(f"extents must be positive, got M={M} N={N} B={B}")
    names = list(header.get("class_names", []))
    base = header_path.parent
    data = _read_raw(base / header["data_file"], M * N * B * 4, "data")
    label_file = header.get("label_file")
    if label_file:
        labels = np.frombuffer(_read_raw(base / label_file, M * N * 2, "label"), dtype="<u2").reshape(M, N)
    else:
        labels = np.zeros((M, N), dtype=np.uint16)
    if labels.size and int(labels.max()) > len(names):
        raise CubeFormatError(f"label value {int(labels.max())} exceeds K={len(names)} class names")
    reflectance = np.frombuffer(data, dtype="<f4").reshape(M, N, B)
    return HsiCube(reflectance.astype(np.float32), labels.astype(np.uint16), names)


# --- synthetic scenes ------------------------------------------------------


def default_signatures(K: int, B: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth positive spectra: a baseline plus a few Gaussian absorption/
    emission bumps per class."""
    bands = np.linspace(0.0, 1.0, B)
    sig = np.empty((K, B))
    for k in range(K):
        s = 0.3 + 0.2 * rng.random() + 0.1 * bands
        for _ in range(3):
            c, w, a = rng.random(), 0.05 + 0.15 * rng.random(), rng.uniform(-0.2, 0.4)
            s = s + a * np.exp(-0.5 * ((bands - c) / w) ** 2)
        sig[k] = s
    return sig


def generate_synthetic(
    K: int = 3,
    M: int = 27,
    N: int = 27,
    B: int = 32,
    noise: float = 0.0,
    seed: int = 0,
    signatures: np.ndarray | None = None,
) -> HsiCube:
    """Scene of K contiguous (Voronoi) class regions.

    Each pixel's spectrum is its class signature plus i.i.d. Gaussian noise of
    standard deviation ``noise``. Every pixel is labeled.
    """
    if K < 2:
        raise ValueError(f"need at least 2 classes, got {K}")
    if min(M, N, B) < 1:
        raise ValueError(f"extents must be positive, got {M}x{N}x{B}")
    rng = np.random.default_rng(seed)
    if signatures is None:
        signatures = default_signatures(K, B, rng)
    signatures = np.asarray(signatures, dtype=np.float32)
    if signatures.shape != (K, B):
        raise ValueError(f"signatures must be {K} x {B}, got {signatures.shape}")
    # one seed point per class guarantees every class owns a region
    seeds = np.stack([rng.uniform(0, M, K), rng.uniform(0, N, K)], axis=1)
    rr, cc = np.meshgrid(np.arange(M) + 0.5, np.arange(N) + 0.5, indexing="ij")
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    labels = (np.argmin(d2, axis=-1) + 1).astype(np.uint16)
    refl = signatures[labels - 1].astype(np.float32)
    if noise > 0:
        refl = (refl + noise * rng.standard_normal(refl.shape)).astype(np.float32)
    return HsiCube(refl, labels, [f"class_{k + 1}" for k in range(K)])


def nearest_signature_predict(cube: HsiCube, signatures: np.ndarray) -> np.ndarray:
    """Label raster predicted by Euclidean distance to class signatures."""
    x = cube.reflectance.astype(np.float64)
    d = ((x[..., None, :] - np.asarray(signatures, dtype=np.float64)) ** 2).sum(-1)
    return (np.argmin(d, axis=-1) + 1).astype(np.uint16)


def class_signatures(cube: HsiCube) -> np.ndarray:
    """Mean spectrum per class (equals the signature on noiseless cubes)."""
    x = cube.reflectance.reshape(-1, cube.B).astype(np.float64)
    y = cube.labels.reshape(-1)
    return np.stack([x[y == k].mean(axis=0) for k in range(1, cube.K + 1)])


# --- PCA -------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # B* x B, rows orthonormal
    explained_fraction: float

    @property
    def B_star(self) -> int:
        return self.components.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Project (..., B) spectra onto the components -> (..., B*)."""
        return self.standardize(x) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        """Back to standardized band space."""
        return np.asarray(z) @ self.components


def fit_pca(cube: HsiCube, B_star: int) -> PcaModel:
    B = cube.B
    if not 1 <= B_star <= B:
        raise ValueError(f"B* must lie in [1, {B}], got {B_star}")
    x = cube.reflectance.reshape(-1, B).astype(np.float64)
    if x.shape[0] < B:
        raise ValueError(f"need at least {B} pixels for a {B}-band PCA, got {x.shape[0]}")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - mean) / scale
    cov = z.T @ z / z.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order[:B_star]].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = evals.sum()
    explained = float(evals[:B_star].sum() / total) if total > 0 else 1.0
    return PcaModel(mean, scale, comps, min(explained, 1.0))


# --- patches ---------------------------------------------------------------


@dataclass
class PatchSet:
    S: int
    B_star: int
    centers: list[tuple[int, int]]
    patches: np.ndarray  # (n, S, S, B*)
    center_labels: np.ndarray  # (n,), values in 1..K
    total_positions: int
    index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.index:
            self.index = {c: i for i, c in enumerate(self.centers)}

    def __len__(self) -> int:
        return len(self.centers)

    def select(self, centers) -> tuple[np.ndarray, np.ndarray]:
        idx = np.array([self.index[tuple(c)] for c in centers], dtype=np.intp)
        return self.patches[idx], self.center_labels[idx]


def window_origin(center: int, S: int) -> int:
    """First row/col of the window centered (at index S // 2) on ``center``."""
    return center - S // 2


def extract_patches(cube: HsiCube, pca: PcaModel, S: int) -> PatchSet:
    """All S x S windows of the band-reduced cube centered on labeled pixels.

    Odd and even S are both accepted; the center sits at index S // 2.
    """
    if S < 1 or S > min(cube.M, cube.N):
        raise ValueError(f"patch side {S} must lie in [1, {min(cube.M, cube.N)}]")
    reduced = pca.transform(cube.reflectance)
    M, N = cube.M, cube.N
    h = S // 2
    rows = range(h, M - S + h + 1)
    cols = range(h, N - S + h + 1)
    total = len(rows) * len(cols)
    centers = [(r, c) for r in rows for c in cols if cube.labels[r, c] != 0]
    patches = np.empty((len(centers), S, S, pca.B_star))
    for i, (r, c) in enumerate(centers):
        r0, c0 = r - h, c - h
        patches[i] = reduced[r0 : r0 + S, c0 : c0 + S]
    labels = np.array([cube.labels[r, c] for r, c in centers], dtype=np.int64)
    return PatchSet(S, pca.B_star, centers, patches, labels, total)


# --- splitting -------------------------------------------------------------


@dataclass
class SplitAssignment:
    train: list[tuple[int, int]]
    val: list[tuple[int, int]]
    test: list[tuple[int, int]]
    ratios: tuple[float, float, float]
    seed: int
    strict_spatial: bool = False
    discarded: int = 0

    def to_json(self, **extra) -> dict:
        doc = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "strict_spatial": self.strict_spatial,
            "train": [list(c) for c in self.train],
            "val": [list(c) for c in self.val],
            "test": [list(c) for c in self.test],
            "discarded": self.discarded,
        }
        doc.update(extra)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SplitAssignment":
        def pts(key):
            return [(int(r), int(c)) for r, c in doc[key]]

        return cls(
            pts("train"),
            pts("val"),
            pts("test"),
            tuple(float(r) for r in doc["ratios"]),
            int(doc["seed"]),
            bool(doc.get("strict_spatial", False)),
            int(doc.get("discarded", 0)),
        )


def windows_intersect(a: tuple[int, int], b: tuple[int, int], S: int) -> bool:
    return abs(a[0] - b[0]) < S and abs(a[1] - b[1]) < S


def _overlaps_train(points: list[tuple[int, int]], train: list[tuple[int, int]], S: int) -> np.ndarray:
    if not points or not train:
        return np.zeros(len(points), dtype=bool)
    p = np.asarray(points)
    t = np.asarray(train)
    close = (np.abs(p[:, None, 0] - t[None, :, 0]) < S) & (np.abs(p[:, None, 1] - t[None, :, 1]) < S)
    return close.any(axis=1)


def apportion(n: int, ratios) -> tuple[int, int, int]:
    """Split ``n`` into three counts, each within one of ``ratio * n``."""
    target = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(target + 1e-9).astype(int)
    # hand leftovers to the largest fractional parts, earlier sets first on ties
    for i in sorted(range(3), key=lambda i: (-(target[i] - counts[i]), i))[: n - counts.sum()]:
        counts[i] += 1
    if counts[0] == 0:
        # take the sample from whichever set overshoots its share the most
        donor = max((1, 2), key=lambda i: (counts[i] - target[i], i))
        counts[donor] -= 1
        counts[0] = 1
    return int(counts[0]), int(counts[1]), int(counts[2])


def disjoint_split(
    patches: PatchSet,
    ratios=(0.05, 0.05, 0.90),
    seed: int = 0,
    strict_spatial: bool = False,
) -> SplitAssignment:
    """Per-class seeded shuffle cut at the ratio boundaries.

    Per-class counts come from largest-remainder apportionment, so every set is
    within one of its requested share; train is bumped to one sample when the
    share would leave a class untrained. With
    ``strict_spatial`` any val/test center whose window touches a training
    window is dropped.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    labels = patches.center_labels
    train, val, test = [], [], []
    for k in np.unique(labels):
        members = [patches.centers[i] for i in np.flatnonzero(labels == k)]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        n = len(members)
        if n < 3:
            warnings.warn(f"class {int(k)} has {n} centers, fewer than 3 split parts; all go to train")
            train += members
            continue
        n_train, n_val, _ = apportion(n, ratios)
        train += members[:n_train]
        val += members[n_train : n_train + n_val]
        test += members[n_train + n_val :]
    discarded = 0
    if strict_spatial:
        keep_val = ~_overlaps_train(val, train, patches.S)
        keep_test = ~_overlaps_train(test, train, patches.S)
        discarded = int((~keep_val).sum() + (~keep_test).sum())
        val = [c for c, k in zip(val, keep_val) if k]
        test = [c for c, k in zip(test, keep_test) if k]
        log.info("strict spatial split discarded %d val/test centers", discarded)
    return SplitAssignment(train, val, test, ratios, seed, strict_spatial, discarded)
