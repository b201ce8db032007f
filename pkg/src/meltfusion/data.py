"""Co-registered X-ray frame / absorptivity datasets.

On-disk layout of a dataset directory::

    frames/0000.pgm      8-bit binary PGM (P5), one per time index
    absorptivity.csv     index,absorptivity
    labels.csv           index,mp_width,mp_depth,kh_width,kh_depth
    dataset.json         manifest (counts, laser on/off, generator config)

Widths and depths are in pixels.  A row whose depths are zero marks a frame
without a melt pool (before the laser turns on); such samples load fine but
are dropped by :func:`usable` before training.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

TARGETS = ("mp_ratio", "kh_ratio")
FRAME_SIZE = 128


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


# ----------------------------------------------------------------- containers

@dataclass(frozen=True)
class MeltPoolFeatures:
    mp_width: float
    mp_depth: float
    kh_width: float
    kh_depth: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise DataError(f"{k} must be a finite length >= 0, got {v}")

    @property
    def mp_ratio(self) -> float:
        return self.mp_width / self.mp_depth if self.mp_depth > 0 else math.nan

    @property
    def kh_ratio(self) -> float:
        return self.kh_width / self.kh_depth if self.kh_depth > 0 else math.nan

    @property
    def has_melt_pool(self) -> bool:
        return self.mp_depth > 0 and self.kh_depth > 0


@dataclass(frozen=True, eq=False)
class Sample:
    """One time index: a 128x128 frame in [0, 1], raw absorptivity, labels."""

    time_index: int
    frame: np.ndarray
    absorptivity: float
    targets: MeltPoolFeatures

    def target(self, name: str) -> float:
        if name not in TARGETS:
            raise DataError(f"unknown target {name!r}; choose from {TARGETS}")
        return getattr(self.targets, name)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.time_index == other.time_index and self.absorptivity == other.absorptivity
                and self.targets == other.targets and np.array_equal(self.frame, other.frame))


def usable(samples: Iterable[Sample]) -> list[Sample]:
    """Samples that carry a melt pool (finite, positive ratios)."""
    return [s for s in samples if s.targets.has_melt_pool]


@dataclass
class LoadedDataset:
    samples: list[Sample]
    skipped: list[int] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def warnings(self) -> int:
        return len(self.skipped)


# -------------------------------------------------------------------- scaling

@dataclass(frozen=True)
class RangeScaler:
    """Affine map of the fit range onto [0, 1]; extrapolates without clipping."""

    min: float
    max: float

    @classmethod
    def fit(cls, values: Sequence[float]) -> "RangeScaler":
        v = np.asarray(values, dtype=np.float64)
        if v.size < 2 or not np.all(np.isfinite(v)):
            raise DataError("scaler needs at least two finite values")
        lo, hi = float(v.min()), float(v.max())
        if not hi > lo:
            raise DataError(f"cannot scale a constant feature (all values {lo})")
        return cls(lo, hi)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse_transform(self, x):
        return np.asarray(x, dtype=np.float64) * (self.max - self.min) + self.min


def fit_scaler(values: Sequence[float]) -> RangeScaler:
    return RangeScaler.fit(values)


def apply_scaler(scaler: RangeScaler, x):
    return scaler.transform(x)


def invert_scaler(scaler: RangeScaler, x):
    return scaler.inverse_transform(x)


# ------------------------------------------------------------------ windowing

@dataclass
class SequenceBatch:
    x: np.ndarray          # [N, T, 1]
    y: np.ndarray          # [N]
    end: np.ndarray        # position of each window's last element

    def __len__(self):
        return len(self.y)


def make_sequences(series: Sequence[float], targets: Sequence[float], seq_len: int) -> SequenceBatch:
    """Stride-1 causal windows; window i spans [i, i+T) and predicts targets[i+T-1]."""
    series = np.asarray(series, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if seq_len < 1:
        raise DataError(f"sequence length must be positive, got {seq_len}")
    if len(series) != len(targets):
        raise DataError(f"series ({len(series)}) and targets ({len(targets)}) differ in length")
    if len(series) < seq_len:
        raise DataError(f"series of length {len(series)} is shorter than sequence length {seq_len}")
    windows = np.lib.stride_tricks.sliding_window_view(series, seq_len).copy()
    end = np.arange(seq_len - 1, len(series))
    return SequenceBatch(windows[:, :, None], targets[end], end)


# ------------------------------------------------------------------ splitting

def split_dataset(samples: Sequence[Sample], fraction: float = 0.8, mode: str = "chronological",
                  seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    if not 0 < fraction < 1:
        raise DataError(f"split fraction must be in (0, 1), got {fraction}")
    if len(samples) < 5:
        raise DataError(f"need at least 5 samples to split, got {len(samples)}")
    n_train = math.ceil(fraction * len(samples))
    if mode == "chronological":
        ordered = sorted(samples, key=lambda s: s.time_index)
        return ordered[:n_train], ordered[n_train:]
    if mode == "random":
        perm = np.random.default_rng(seed).permutation(len(samples))
        train = sorted((samples[i] for i in perm[:n_train]), key=lambda s: s.time_index)
        test = sorted((samples[i] for i in perm[n_train:]), key=lambda s: s.time_index)
        return train, test
    raise DataError(f"unknown split mode {mode!r}")


# -------------------------------------------------------------- preprocessing

def normalize_gray(raw: np.ndarray, maxval: int | None = None) -> np.ndarray:
    arr = np.asarray(raw)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise DataError(f"expected a single-channel grayscale image, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        top = maxval if maxval is not None else np.iinfo(arr.dtype).max
        return arr.astype(np.float64) / top
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def preprocess_frame(raw: np.ndarray, angle_deg: float = 7.0, out: int = FRAME_SIZE,
                     maxval: int | None = None) -> np.ndarray:
    """Normalize, rotate about the center, crop the inscribed square, resize.

    Positive angles rotate counter-clockwise as displayed (row 0 at the top).
    Rotation, crop and resize are folded into one bilinear resampling with
    zero fill; the crop is the largest centered square that stays inside the
    rotated image, so fill never reaches the output.
    """
    img = normalize_gray(raw, maxval)
    H, W = img.shape
    if H < 8 or W < 8:
        raise DataError(f"frame {img.shape} is smaller than 8x8")
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    # measured between pixel centers, the hull where bilinear sampling is defined
    side = (min(H, W) - 1) / (abs(c) + abs(s))
    if angle_deg == 0 and H == W == out:
        return img.astype(np.float32)
    # offsets of output pixel centers from the image center, in source pixels
    t = (np.arange(out) + 0.5) * side / out - side / 2
    yo, xo = np.meshgrid(t, t, indexing="ij")
    xs = xo * c - yo * s
    ys = xo * s + yo * c
    coords = np.stack([ys + (H - 1) / 2, xs + (W - 1) / 2])
    res = ndimage.map_coordinates(img, coords, order=1, mode="constant", cval=0.0)
    return np.clip(res, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------- PGM I/O

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a binary (P5) 8-bit PGM; returns (pixels uint8 [H,W], maxval)."""
    raw = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header {fields[1:]!r}") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise DataError(f"{path}: unsupported PGM geometry {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    body = raw[pos:pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: expected {width * height} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy(), maxval


def write_pgm(path: str | Path, pixels: np.ndarray):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def to_bytes(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)


# ------------------------------------------------------------------- CSV I/O

def _read_csv(path: Path, columns: Sequence[str]) -> dict[int, list[float]]:
    if not path.exists():
        raise DataError(f"missing {path.name} in {path.parent}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(columns):
            raise DataError(f"{path.name}: expected header {','.join(columns)}, got {header}")
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DataError(f"{path.name}:{lineno}: expected {len(columns)} cells, got {len(row)}")
            try:
                idx = int(row[0])
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise DataError(f"{path.name}:{lineno}: non-numeric cell in {row}") from None
            rows[idx] = vals
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def load_dataset(path: str | Path, angle_deg: float | None = None) -> LoadedDataset:
    """Join frames, absorptivity and labels on index.

    Indices missing a frame or a label are skipped and reported in
    ``skipped``.  The rotation comes from ``angle_deg``, else the manifest's
    ``rotation_deg``, else 7 degrees.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    manifest = {}
    if (root / "dataset.json").exists():
        try:
            manifest = json.loads((root / "dataset.json").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"dataset.json: {exc}") from None
    if angle_deg is None:
        angle_deg = float(manifest.get("rotation_deg", 7.0))
    absorb = _read_csv(root / "absorptivity.csv", ["index", "absorptivity"])
    labels = _read_csv(root / "labels.csv", ["index", "mp_width", "mp_depth", "kh_width", "kh_depth"])
    frames = {}
    frame_dir = root / "frames"
    if frame_dir.is_dir():
        for p in frame_dir.glob("*.pgm"):
            if p.stem.isdigit():
                frames[int(p.stem)] = p
    samples, skipped = [], []
    for idx in sorted(absorb):
        if idx not in labels or idx not in frames:
            skipped.append(idx)
            continue
        pixels, maxval = read_pgm(frames[idx])
        frame = preprocess_frame(pixels, angle_deg, maxval=maxval)
        samples.append(Sample(idx, frame, absorb[idx][0], MeltPoolFeatures(*labels[idx])))
    if not samples:
        raise DataError(f"{root}: no index has frame, absorptivity and labels together")
    if skipped:
        log.warning("%s: skipped %d indices lacking a frame or label", root, len(skipped))
    return LoadedDataset(samples, skipped, manifest)


def save_dataset(samples: Sequence[Sample], path: str | Path, manifest: dict | None = None) -> Path:
    """Write ``samples`` in the directory layout read by :func:`load_dataset`.

    Frames are stored as 8-bit PGM, so only frames already quantized to
    multiples of 1/255 round-trip exactly (synthetic frames are).
    """
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(max((s.time_index for s in samples), default=0))))
    with (root / "absorptivity.csv").open("w", newline="", encoding="utf-8") as fa, \
            (root / "labels.csv").open("w", newline="", encoding="utf-8") as fl:
        fa.write("index,absorptivity\n")
        fl.write("index,mp_width,mp_depth,kh_width,kh_depth\n")
        for s in samples:
            fa.write(f"{s.time_index},{_fmt(s.absorptivity)}\n")
            t = s.targets
            fl.write(f"{s.time_index},{_fmt(t.mp_width)},{_fmt(t.mp_depth)},"
                     f"{_fmt(t.kh_width)},{_fmt(t.kh_depth)}\n")
            write_pgm(root / "frames" / f"{s.time_index:0{width}d}.pgm", to_bytes(s.frame))
    info = {"format_version": 1, "n_frames": len(samples),
            "n_with_melt_pool": len(usable(samples)), "rotation_deg": 0.0}
    info.update(manifest or {})
    (root / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def read_absorptivity_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Bare ``index,absorptivity`` file -> (indices, values) in index order."""
    rows = _read_csv(Path(path), ["index", "absorptivity"])
    if not rows:
        raise DataError(f"{path}: no rows")
    idx = np.array(sorted(rows))
    return idx, np.array([rows[i][0] for i in idx])


# ------------------------------------------------------------------ synthetic

@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic spot-laser melt-pool generator.

    Lengths are pixels, times are frames.  The width-to-depth ratio follows a
    damped oscillation after laser-on, wanders slowly in steady state, and
    relaxes toward ``off_ratio`` once the laser is switched off.
    """

    n_frames: int = 200
    seed: int = 0
    laser_on: int = 10
    laser_off: int = 180
    image_size: int = FRAME_SIZE
    interface_row: int = 40
    steady_width: float = 56.0
    width_rise: float = 6.0
    width_off_decay: float = 150.0
    steady_ratio: float = 2.0
    transient_amplitude: float = 0.8
    transient_decay: float = 25.0
    transient_period: float = 30.0
    steady_fluctuation: float = 0.3
    fluctuation_corr: float = 8.0
    off_ratio: float = 1.7
    off_decay: float = 12.0
    keyhole_width_fraction: float = 0.35
    keyhole_depth_fraction: float = 0.6
    keyhole_wobble: float = 0.03
    absorptivity_offset: float = 0.3
    absorptivity_gain: float = 0.2
    absorptivity_noise: float = 0.015
    image_noise: float = 0.03
    supersample: int = 4

    def validate(self):
        if self.n_frames < 1:
            raise DataError("n_frames must be positive")
        if min(self.absorptivity_noise, self.image_noise, self.steady_fluctuation, self.keyhole_wobble) < 0:
            raise DataError("noise levels must be >= 0")
        if not 0 <= self.laser_on <= self.laser_off:
            raise DataError("need 0 <= laser_on <= laser_off")
        if not 0 < self.keyhole_width_fraction < 1 or not 0 < self.keyhole_depth_fraction < 1:
            raise DataError("keyhole fractions must lie in (0, 1)")
        if self.supersample < 1 or self.image_size < 8:
            raise DataError("bad rendering parameters")


SUBSTRATE, MELT, KEYHOLE, ABOVE = 0.25, 0.55, 0.95, 0.8


def _ar1(rng, n, sigma, corr):
    """Stationary AR(1) path with standard deviation ``sigma``."""
    if sigma == 0 or n == 0:
        return np.zeros(n)
    phi = math.exp(-1.0 / corr) if corr > 0 else 0.0
    out = np.empty(n)
    out[0] = rng.normal(0, sigma)
    scale = sigma * math.sqrt(1 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + rng.normal(0, scale)
    return out


def synth_trajectory(cfg: SynthConfig, rng: np.random.Generator) -> list[MeltPoolFeatures]:
    n = cfg.n_frames
    t = np.arange(n, dtype=np.float64)
    s = t - cfg.laser_on
    fluct = _ar1(rng, n, cfg.steady_fluctuation, cfg.fluctuation_corr)
    wobble = _ar1(rng, n, cfg.keyhole_wobble, cfg.fluctuation_corr)
    ratio = (cfg.steady_ratio
             + cfg.transient_amplitude * np.exp(-s / cfg.transient_decay) * np.cos(2 * np.pi * s / cfg.transient_period)
             + fluct)
    width = cfg.steady_width * (1 - 0.6 * np.exp(-s / cfg.width_rise))
    after = np.clip(t - cfg.laser_off, 0, None)
    ratio = cfg.off_ratio + (ratio - cfg.off_ratio) * np.exp(-after / cfg.off_decay)
    width = width * np.exp(-after / cfg.width_off_decay)
    ratio = np.clip(ratio, 0.5, None)
    feats = []
    for i in range(n):
        if s[i] < 0 or width[i] < 2:
            feats.append(MeltPoolFeatures(0.0, 0.0, 0.0, 0.0))
            continue
        w = float(width[i])
        d = min(w / float(ratio[i]), cfg.image_size - cfg.interface_row - 2)
        kw = cfg.keyhole_width_fraction * w
        kd = cfg.keyhole_depth_fraction * d * (1 + float(wobble[i]))
        feats.append(MeltPoolFeatures(w, d, kw, min(kd, d)))
    return feats


def render_frame(feat: MeltPoolFeatures, cfg: SynthConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw substrate, semi-elliptical melt pool and keyhole; quantized to 1/255."""
    n, ss = cfg.image_size, cfg.supersample
    sub = (np.arange(n * ss) + 0.5) / ss
    yy, xx = np.meshgrid(sub, sub, indexing="ij")
    img = np.where(yy < cfg.interface_row, ABOVE, SUBSTRATE)
    cx = n / 2
    below = yy >= cfg.interface_row
    if feat.has_melt_pool:
        pool = below & (((xx - cx) / (feat.mp_width / 2)) ** 2
                        + ((yy - cfg.interface_row) / feat.mp_depth) ** 2 <= 1)
        img = np.where(pool, MELT, img)
        hole = below & (((xx - cx) / (feat.kh_width / 2)) ** 2
                        + ((yy - cfg.interface_row) / feat.kh_depth) ** 2 <= 1)
        img = np.where(hole, KEYHOLE, img)
    img = img.reshape(n, ss, n, ss).mean(axis=(1, 3))
    if rng is not None and cfg.image_noise > 0:
        img = img + rng.normal(0, cfg.image_noise, img.shape)
    return (to_bytes(img) / 255.0).astype(np.float32)


def synth_generate(cfg: SynthConfig = SynthConfig()) -> list[Sample]:
    """Deterministic synthetic dataset, one sample per frame (pre-laser ones included)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    feats = synth_trajectory(cfg, rng)
    samples = []
    for i, f in enumerate(feats):
        frame = render_frame(f, cfg, rng)
        if f.has_melt_pool:
            a = cfg.absorptivity_offset + cfg.absorptivity_gain * f.kh_depth / f.kh_width
        else:
            a = 0.0
        a += rng.normal(0, cfg.absorptivity_noise) if cfg.absorptivity_noise > 0 else 0.0
        samples.append(Sample(i, frame, float(max(a, 0.0)), f))
    return samples


def synth_manifest(cfg: SynthConfig) -> dict:
    return {"synthetic": True, "generator": asdict(cfg), "seed": cfg.seed,
            "laser_on": cfg.laser_on, "laser_off": cfg.laser_off, "rotation_deg": 0.0}


# ------------------------------------------------------------ model inputs

@dataclass
class ArrayDataset:
    """Model-ready arrays: ``inputs`` per port, targets ``y`` [N,1], sample ``index``."""

    inputs: dict[str, np.ndarray]
    y: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, sel) -> "ArrayDataset":
        return ArrayDataset({k: v[sel] for k, v in self.inputs.items()}, self.y[sel], self.index[sel])

    def with_targets(self, y) -> "ArrayDataset":
        return replace(self, y=np.asarray(y, dtype=np.float32).reshape(-1, 1))


MODEL_PORTS = {
    "cnn": ("image",),
    "rnn": ("absorptivity",),
    "fused": ("image", "absorptivity"),
    "student": ("absorptivity",),
}


def model_arrays(kind: str, samples: Sequence[Sample], scaler: RangeScaler, target: str,
                 seq_len: int = 1, targets: Sequence[float] | None = None) -> ArrayDataset:
    """Arrays for one model kind over time-ordered ``samples``.

    Sequence models get causal windows; their first ``seq_len - 1`` samples
    only serve as history.  ``targets`` overrides the labels (distillation).
    """
    y = np.array([s.target(target) for s in samples] if targets is None else targets, dtype=np.float32)
    idx = np.array([s.time_index for s in samples])
    scaled = scaler.transform([s.absorptivity for s in samples]).astype(np.float32)
    if kind in ("rnn", "student"):
        seq = make_sequences(scaled, y, seq_len)
        return ArrayDataset({"absorptivity": seq.x}, seq.y.reshape(-1, 1), idx[seq.end])
    inputs = {}
    if "image" in MODEL_PORTS.get(kind, ()):
        inputs["image"] = np.stack([s.frame for s in samples])[..., None].astype(np.float32)
    if kind == "fused":
        inputs["absorptivity"] = scaled.reshape(-1, 1)
    if kind not in MODEL_PORTS:
        raise DataError(f"unknown model kind {kind!r}")
    return ArrayDataset(inputs, y.reshape(-1, 1), idx)


@dataclass
class PreparedData:
    """A chronological (or random) split with a scaler fit on train only."""

    samples: list[Sample]
    train: list[Sample]
    test: list[Sample]
    scaler: RangeScaler
    target: str

    def arrays(self, kind: str, part: str = "train", seq_len: int = 1, targets=None) -> ArrayDataset:
        """Windows are cut from the full ordered series, then assigned to a
        partition by the sample they predict (history may cross the split)."""
        full = model_arrays(kind, self.samples, self.scaler, self.target, seq_len, targets)
        if part == "all":
            return full
        members = {s.time_index for s in (self.train if part == "train" else self.test)}
        sel = np.array([i in members for i in full.index], dtype=bool)
        return full.subset(sel)


def prepare(samples: Sequence[Sample], target: str = "mp_ratio", fraction: float = 0.8,
            mode: str = "chronological", seed: int = 0, scaler: RangeScaler | None = None) -> PreparedData:
    if target not in TARGETS:
        raise DataError(f"unknown target {target!r}; choose from {TARGETS}")
    good = sorted(usable(samples), key=lambda s: s.time_index)
    train, test = split_dataset(good, fraction, mode, seed)
    if scaler is None:
        scaler = fit_scaler([s.absorptivity for s in train])
    return PreparedData(good, train, test, scaler, target)
