"""Synthetic micro/macro expression-video benchmark.

Each sample is an identity-specific smooth background plus a class-specific
oriented pattern modulated by a temporal rise/fall envelope.  Micro samples
peak at a low amplitude with a narrow apex; macro samples of the same
(class, identity, seed) share the exact pattern location but peak higher
and wider.  Episode sampling, the corruption operators, and the on-disk
pool format all live here.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, PoolError

MICRO = "micro"
MACRO = "macro"
KINDS = (MICRO, MACRO)

CORRUPTION_OPERATORS = ("mask", "region_noise", "grayscale")
CORRUPTION_PROPORTIONS = (0.1, 0.3, 0.5)

# seed-derivation tags, so independent streams never collide
_TAG_PATTERN = 11
_TAG_BACKGROUND = 13
_TAG_TEMPORAL = 17
_TAG_EPISODE = 19
_TAG_CORRUPT = 23


@dataclass(frozen=True)
class SyntheticGenConfig:
    num_classes: int = 10
    identities_per_class: int = 20
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    micro_amplitude: float = 0.15
    macro_amplitude: float = 0.6
    micro_apex: int = 3
    macro_apex: int = 4
    micro_apex_width: float = 1.0
    macro_apex_width: float = 3.0
    background_cells: int = 4
    background_amplitude: float = 0.02
    noise_floor: float = 0.005

    def validate(self) -> None:
        if not (0.0 < self.micro_amplitude < self.macro_amplitude <= 1.0):
            raise ConfigError(
                f"amplitudes must satisfy 0 < micro_amplitude < macro_amplitude <= 1, "
                f"got micro_amplitude={self.micro_amplitude}, macro_amplitude={self.macro_amplitude}")
        for name, apex in (("micro_apex", self.micro_apex), ("macro_apex", self.macro_apex)):
            if not (1 <= apex <= self.frames - 1):
                raise ConfigError(f"{name}={apex} must lie in [1, {self.frames - 1}]")
        if self.frames < 2 or self.height < 8 or self.width < 8:
            raise ConfigError(f"frames/height/width too small: {self.frames}, {self.height}, {self.width}")
        if self.num_classes < 1 or self.identities_per_class < 1 or self.channels < 1:
            raise ConfigError("num_classes, identities_per_class, channels must be positive")
        if self.noise_floor < 0 or self.background_cells < 2:
            raise ConfigError("noise_floor must be >= 0 and background_cells >= 2")
        if not (0.0 <= self.background_amplitude <= 0.2):
            raise ConfigError(f"background_amplitude must lie in [0, 0.2], "
                              f"got {self.background_amplitude}")
        if min(self.micro_apex_width, self.macro_apex_width) <= 0:
            raise ConfigError("apex widths must be positive")


@dataclass
class VideoSample:
    frames: np.ndarray  # (M, C, H, W), values in [0, 1]
    label: int
    kind: str
    identity: int
    seed: int = 0
    sample_id: str = ""


@dataclass
class EpisodeTask:
    support: list[tuple[VideoSample, int]]
    query: list[tuple[VideoSample, int]]
    aux: list[VideoSample]
    way: int
    shots: int
    queries: int
    task_id: int = 0


@dataclass(frozen=True)
class CorruptionSpec:
    operator: str
    proportion: float
    mask_fraction: float = 0.25
    noise_std: float = 0.3
    region: tuple[int, int, int, int] | None = None  # (y0, x0, h, w); None = centered quarter

    def validate(self) -> None:
        if self.operator not in CORRUPTION_OPERATORS:
            raise ConfigError(f"operator must be one of {CORRUPTION_OPERATORS}, got {self.operator!r}")
        if self.proportion not in CORRUPTION_PROPORTIONS:
            raise ConfigError(f"proportion must be one of {CORRUPTION_PROPORTIONS}, got {self.proportion}")
        if not (0.0 < self.mask_fraction <= 1.0):
            raise ConfigError(f"mask_fraction must lie in (0, 1], got {self.mask_fraction}")
        if not self.noise_std > 0:
            raise ConfigError(f"noise_std must be positive, got {self.noise_std}")


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(tuple(int(k) for k in keys)))


def _bilinear_upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    gy, gx = coarse.shape
    ys = np.linspace(0, gy - 1, h)
    xs = np.linspace(0, gx - 1, w)
    y0 = np.clip(ys.astype(int), 0, gy - 2)
    x0 = np.clip(xs.astype(int), 0, gx - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
            + c10 * fy * (1 - fx) + c11 * fy * fx)


def _class_center(cfg: SyntheticGenConfig, class_idx: int) -> tuple[int, int]:
    cols = int(np.ceil(np.sqrt(cfg.num_classes)))
    rows = int(np.ceil(cfg.num_classes / cols))
    margin_y = max(4, cfg.height // 5)
    margin_x = max(4, cfg.width // 5)
    ys = np.rint(np.linspace(margin_y, cfg.height - 1 - margin_y, rows)).astype(int)
    xs = np.rint(np.linspace(margin_x, cfg.width - 1 - margin_x, cols)).astype(int)
    return int(ys[class_idx // cols]), int(xs[class_idx % cols])


def _class_pattern(cfg: SyntheticGenConfig, class_idx: int, identity: int, seed: int) -> np.ndarray:
    """Oriented ridge plus a sharp spike at an integer-pixel center.

    The class determines orientation, elongation, and grid location; the
    identity shifts the center by a couple of pixels.  The center pixel
    value is exactly 1, so the apex amplitude is directly measurable and
    micro/macro of one (class, identity, seed) peak at the same pixel.
    """
    rng = _rng(seed, class_idx, identity, _TAG_PATTERN)
    cy, cx = _class_center(cfg, class_idx)
    cy = int(np.clip(cy + rng.integers(-2, 3), 3, cfg.height - 4))
    cx = int(np.clip(cx + rng.integers(-2, 3), 3, cfg.width - 4))

    theta = np.pi * class_idx / max(cfg.num_classes, 1)
    s_long = 2.2 + 0.4 * (class_idx % 3)
    s_short = 1.1
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    ridge = np.exp(-(u * u / (2.0 * s_long ** 2) + v * v / (2.0 * s_short ** 2)))
    spike = np.exp(-(dx * dx + dy * dy) / (2.0 * 0.8 ** 2))
    return 0.75 * ridge + 0.25 * spike


def _envelope(cfg: SyntheticGenConfig, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == MICRO:
        apex, width, amp = cfg.micro_apex, cfg.micro_apex_width, cfg.micro_amplitude
    else:
        apex, width, amp = cfg.macro_apex, cfg.macro_apex_width, cfg.macro_amplitude
    apex = int(np.clip(apex + rng.integers(-1, 2), 1, cfg.frames - 2)) if cfg.frames > 3 else apex
    t = np.arange(cfg.frames, dtype=np.float64)
    env = amp * np.maximum(0.0, 1.0 - np.abs(t - apex) / width)
    env[0] = 0.0  # the first frame is the onset reference
    return env


def gen_sample(cfg: SyntheticGenConfig, class_idx: int, identity: int, kind: str,
               seed: int) -> VideoSample:
    """Deterministically synthesize one expression video."""
    cfg.validate()
    if not (0 <= class_idx < cfg.num_classes):
        raise ConfigError(f"class {class_idx} out of range [0, {cfg.num_classes})")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")

    bg_rng = _rng(seed, class_idx, identity, _TAG_BACKGROUND)
    coarse = bg_rng.uniform(-1.0, 1.0, (cfg.background_cells, cfg.background_cells))
    bg = 0.225 + cfg.background_amplitude * _bilinear_upsample(coarse, cfg.height, cfg.width)

    pattern = _class_pattern(cfg, class_idx, identity, seed)

    kind_rng = _rng(seed, class_idx, identity, KINDS.index(kind), _TAG_TEMPORAL)
    env = _envelope(cfg, kind, kind_rng)

    frames = np.empty((cfg.frames, cfg.channels, cfg.height, cfg.width))
    for ch in range(cfg.channels):
        tint = 1.0 - 0.08 * ch / max(cfg.channels - 1, 1) if cfg.channels > 1 else 1.0
        frames[:, ch] = tint * bg[None] + env[:, None, None] * pattern[None]
    if cfg.noise_floor > 0:
        frames += kind_rng.uniform(-cfg.noise_floor, cfg.noise_floor, frames.shape)
    np.clip(frames, 0.0, 1.0, out=frames)

    return VideoSample(frames=frames, label=class_idx, kind=kind, identity=identity,
                       seed=int(seed), sample_id=f"c{class_idx:02d}_i{identity:03d}_{kind}")


class Pool:
    """An immutable collection of samples with (kind, class) indexing."""

    def __init__(self, config: SyntheticGenConfig, samples: list[VideoSample]):
        self.config = config
        self.samples = list(samples)
        self.by_id = {s.sample_id: s for s in self.samples}
        if len(self.by_id) != len(self.samples):
            raise PoolError("duplicate sample ids in pool")
        self._index: dict[tuple[str, int], list[VideoSample]] = {}
        for s in self.samples:
            self._index.setdefault((s.kind, s.label), []).append(s)

    def __len__(self) -> int:
        return len(self.samples)

    def classes(self) -> list[int]:
        return sorted({s.label for s in self.samples})

    def of(self, kind: str, label: int) -> list[VideoSample]:
        return self._index.get((kind, label), [])


def generate_pool(cfg: SyntheticGenConfig, seed: int) -> Pool:
    """One sample per (class, identity, kind); micro and macro of the same
    (class, identity) share pattern location by sharing the sample seed."""
    cfg.validate()
    samples = []
    for c in range(cfg.num_classes):
        for ident in range(cfg.identities_per_class):
            for kind in KINDS:
                samples.append(gen_sample(cfg, c, ident, kind, seed))
    return Pool(cfg, samples)


def sample_episode(pool: Pool, way: int, shots: int, queries: int, aux_per_class: int,
                   seed: int) -> EpisodeTask:
    """Draw an N-way K-shot task: disjoint micro support/query sets plus a
    macro auxiliary set from the same classes, labels remapped to 0..N-1."""
    need_micro = shots + queries
    eligible = [c for c in pool.classes()
                if len(pool.of(MICRO, c)) >= need_micro and len(pool.of(MACRO, c)) >= aux_per_class]
    if len(eligible) < way:
        raise PoolError(f"pool supports only {len(eligible)} classes with >= {need_micro} micro "
                        f"and >= {aux_per_class} macro samples; need {way}")

    rng = _rng(seed, _TAG_EPISODE)
    chosen = rng.choice(np.asarray(eligible), size=way, replace=False)

    support, query, aux = [], [], []
    for ep_label, c in enumerate(int(c) for c in chosen):
        micro = pool.of(MICRO, c)
        idx = rng.choice(len(micro), size=need_micro, replace=False)
        for j in idx[:shots]:
            support.append((micro[j], ep_label))
        for j in idx[shots:]:
            query.append((micro[j], ep_label))
        macro = pool.of(MACRO, c)
        for j in rng.choice(len(macro), size=aux_per_class, replace=False):
            aux.append(macro[j])
    return EpisodeTask(support=support, query=query, aux=aux,
                       way=way, shots=shots, queries=queries, task_id=int(seed))


def episode_arrays(task: EpisodeTask) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack an episode into (support_x, support_y, query_x, query_y, aux_x)."""
    sx = np.stack([s.frames for s, _ in task.support])
    sy = np.array([lbl for _, lbl in task.support], dtype=np.int64)
    qx = np.stack([s.frames for s, _ in task.query])
    qy = np.array([lbl for _, lbl in task.query], dtype=np.int64)
    ax = np.stack([s.frames for s in task.aux])
    return sx, sy, qx, qy, ax


def _default_region(h: int, w: int) -> tuple[int, int, int, int]:
    return h // 4, w // 4, h // 2, w // 2


def corrupt(sample: VideoSample, spec: CorruptionSpec, seed: int) -> VideoSample:
    """Apply one corruption operator; label/kind/identity are unchanged."""
    spec.validate()
    m, c, h, w = sample.frames.shape
    rng = _rng(seed, _TAG_CORRUPT, CORRUPTION_OPERATORS.index(spec.operator))
    frames = sample.frames.copy()

    if spec.operator == "mask":
        n_mask = int(spec.mask_fraction * h * w)
        flat = rng.choice(h * w, size=n_mask, replace=False)
        ys, xs = np.unravel_index(flat, (h, w))
        frames[:, :, ys, xs] = 0.0
    elif spec.operator == "region_noise":
        y0, x0, rh, rw = spec.region if spec.region is not None else _default_region(h, w)
        if y0 < 0 or x0 < 0 or y0 + rh > h or x0 + rw > w:
            raise ConfigError(f"region {(y0, x0, rh, rw)} outside {h}x{w} frame")
        noise = rng.normal(0.0, spec.noise_std, (m, c, rh, rw))
        frames[:, :, y0:y0 + rh, x0:x0 + rw] += noise
        np.clip(frames, 0.0, 1.0, out=frames)
    else:  # grayscale
        frames[:] = frames.mean(axis=1, keepdims=True)

    return VideoSample(frames=frames, label=sample.label, kind=sample.kind,
                       identity=sample.identity, seed=sample.seed, sample_id=sample.sample_id)


def build_corruption_group(pool: Pool, proportion: float, seed: int,
                           mask_fraction: float = 0.25, noise_std: float = 0.3,
                           region: tuple[int, int, int, int] | None = None) -> dict[str, Pool]:
    """Three derived pools, one per operator, with the *same* randomly chosen
    fraction of samples corrupted in each (isolates the operator effect)."""
    if proportion not in CORRUPTION_PROPORTIONS:
        raise ConfigError(f"proportion must be one of {CORRUPTION_PROPORTIONS}, got {proportion}")
    n = len(pool)
    n_corrupt = int(round(proportion * n))
    rng = _rng(seed, _TAG_CORRUPT, 999)
    chosen = set(int(i) for i in rng.choice(n, size=n_corrupt, replace=False))

    group: dict[str, Pool] = {}
    for op in CORRUPTION_OPERATORS:
        spec = CorruptionSpec(operator=op, proportion=proportion,
                              mask_fraction=mask_fraction, noise_std=noise_std, region=region)
        samples = [corrupt(s, spec, seed=seed + 1000003 * i) if i in chosen else s
                   for i, s in enumerate(pool.samples)]
        group[op] = Pool(pool.config, samples)
    return group


# ---------------------------------------------------------------------------
# on-disk format: JSON manifest + one raw little-endian float64 file per sample

def save_pool(pool: Pool, directory: str | Path, seed: int) -> None:
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "metaux-pool-v1",
        "seed": int(seed),
        "config": asdict(pool.config),
        "samples": [
            {"id": s.sample_id, "class": s.label, "identity": s.identity,
             "kind": s.kind, "seed": s.seed}
            for s in pool.samples
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    for s in pool.samples:
        (root / "samples" / f"{s.sample_id}.f64").write_bytes(s.frames.astype("<f8").tobytes())


def load_manifest(directory: str | Path) -> dict:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise PoolError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != "metaux-pool-v1":
        raise PoolError(f"unsupported pool format {manifest.get('format')!r}")
    return manifest


def load_pool(directory: str | Path) -> Pool:
    root = Path(directory)
    manifest = load_manifest(root)
    cfg = SyntheticGenConfig(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in manifest["config"].items()})
    cfg.validate()
    shape = (cfg.frames, cfg.channels, cfg.height, cfg.width)
    samples = []
    for entry in manifest["samples"]:
        blob = (root / "samples" / f"{entry['id']}.f64").read_bytes()
        frames = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
        samples.append(VideoSample(frames=frames, label=entry["class"], kind=entry["kind"],
                                   identity=entry["identity"], seed=entry["seed"],
                                   sample_id=entry["id"]))
    return Pool(cfg, samples)


def regenerate_pool(manifest: dict) -> Pool:
    """Rebuild every sample from manifest fields alone (bit-identical)."""
    cfg = SyntheticGenConfig(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in manifest["config"].items()})
    samples = [gen_sample(cfg, e["class"], e["identity"], e["kind"], e["seed"])
               for e in manifest["samples"]]
    return Pool(cfg, samples)
