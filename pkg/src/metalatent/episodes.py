"""Datasets, class-disjoint meta-splits, and K-way N-shot episode sampling.

A Dataset stores per-class image stacks plus global example ids so tests can
prove that meta-test episodes never touch meta-train examples. Synthetic
generators (gaussian blobs, rings) provide desk-scale stand-ins for the image
benchmarks, with a difficulty knob trading class separability for noise.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "EpisodeSpec",
    "Episode",
    "seed_stream",
    "make_splits",
    "sample_episode",
    "synth_generate",
    "load_image_dir",
    "export_image_dir",
    "channel_stats",
    "apply_normalization",
    "normalize_by_train",
    "parse_split_manifest",
    "write_split_manifest",
]


def seed_stream(master_seed, tag, index=0):
    """Deterministic, independent RNG stream keyed by (master seed, tag, index)."""
    key = zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=(key, index)))


@dataclass
class Dataset:
    """Per-class image stacks [n, C, H, W] with globally unique example ids."""

    class_ids: tuple
    images: dict
    example_ids: dict
    name: str = ""

    def n_classes(self):
        return len(self.class_ids)

    def image_shape(self):
        first = self.images[self.class_ids[0]]
        return first.shape[1:]

    def min_examples_per_class(self):
        return min(self.images[c].shape[0] for c in self.class_ids)

    def validate_for(self, spec):
        need = spec.shots + spec.queries
        short = [c for c in self.class_ids if self.images[c].shape[0] < need]
        if short:
            raise ValueError(
                f"classes {short!r} have fewer than {need} examples (need shots+queries)"
            )
        if self.n_classes() < spec.way:
            raise ValueError(f"{self.n_classes()} classes available, {spec.way}-way requested")


@dataclass
class EpisodeSpec:
    way: int
    shots: int
    queries: int

    def __post_init__(self):
        if self.way < 2:
            raise ValueError(f"way must be >= 2, got {self.way}")
        if self.shots < 1 or self.queries < 1:
            raise ValueError(f"shots and queries must be >= 1, got {self.shots}, {self.queries}")


@dataclass
class Episode:
    """One few-shot task: disjoint support and query sets over the same classes."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_relabeling: dict
    support_ids: np.ndarray = field(default=None)
    query_ids: np.ndarray = field(default=None)


def make_splits(dataset, train_classes, val_classes, test_classes):
    """Partition by class id into three class-disjoint datasets (val may be empty)."""
    groups = [list(train_classes), list(val_classes), list(test_classes)]
    seen = set()
    for g in groups:
        for c in g:
            if c in seen:
                raise ValueError(f"class {c!r} appears in more than one split")
            if c not in dataset.images:
                raise ValueError(f"class {c!r} not present in dataset")
            seen.add(c)
    out = []
    for tag, g in zip(("train", "val", "test"), groups):
        out.append(
            Dataset(
                class_ids=tuple(g),
                images={c: dataset.images[c] for c in g},
                example_ids={c: dataset.example_ids[c] for c in g},
                name=f"{dataset.name}/{tag}" if dataset.name else tag,
            )
        )
    return tuple(out)


def sample_episode(split, spec, rng):
    """Uniform K classes without replacement, then N+Q examples without replacement."""
    split.validate_for(spec)
    chosen = rng.choice(split.n_classes(), size=spec.way, replace=False)
    support_x, support_y, query_x, query_y = [], [], [], []
    support_ids, query_ids = [], []
    relabel = {}
    for new_label, ci in enumerate(chosen):
        cid = split.class_ids[int(ci)]
        relabel[cid] = new_label
        stack = split.images[cid]
        ids = split.example_ids[cid]
        take = rng.choice(stack.shape[0], size=spec.shots + spec.queries, replace=False)
        s_idx, q_idx = take[: spec.shots], take[spec.shots :]
        support_x.append(stack[s_idx])
        query_x.append(stack[q_idx])
        support_y.extend([new_label] * spec.shots)
        query_y.extend([new_label] * spec.queries)
        support_ids.append(ids[s_idx])
        query_ids.append(ids[q_idx])
    return Episode(
        support_x=np.concatenate(support_x, axis=0),
        support_y=np.asarray(support_y, dtype=np.int64),
        query_x=np.concatenate(query_x, axis=0),
        query_y=np.asarray(query_y, dtype=np.int64),
        class_relabeling=relabel,
        support_ids=np.concatenate(support_ids),
        query_ids=np.concatenate(query_ids),
    )


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------


def _spread_centers(rng, n, side, min_frac=0.20):
    """Sample n blob centers with a minimum pairwise separation.

    Rejection sampling with a slowly relaxing radius, so dense class counts
    still terminate; draws stay deterministic for a given generator state.
    """
    centers = []
    min_dist = min_frac * side
    while len(centers) < n:
        for _ in range(200):
            cand = rng.uniform(0.22 * side, 0.78 * side, size=2)
            if all((cand[0] - c[0]) ** 2 + (cand[1] - c[1]) ** 2 >= min_dist**2 for c in centers):
                centers.append(cand)
                break
        else:
            min_dist *= 0.95
    return centers


def synth_generate(kind, n_classes, per_class, image_side, seed, difficulty=0.5, channels=1):
    """Synthetic few-shot dataset; same seed always yields identical bytes.

    gaussian_blobs: one isotropic bump per class at a class-specific, well
    separated location/width. ring_shapes: one ring per class with
    class-specific radius/thickness. `difficulty` in [0, 1] scales the
    per-example nuisance: center/size jitter, amplitude variation, a global
    background offset, and pixel noise. At 0, every example of a class is its
    exact prototype. The background offset is what separates trainable
    features from raw pixels: it dominates image statistics until a model
    learns to cancel it.
    """
    if kind not in ("gaussian_blobs", "ring_shapes"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if min(n_classes, per_class, image_side) <= 0 or channels not in (1, 3):
        raise ValueError("n_classes, per_class, image_side must be positive; channels 1 or 3")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must be in [0, 1], got {difficulty}")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    side = image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    centers = _spread_centers(rng, n_classes, side) if kind == "gaussian_blobs" else None

    images = {}
    example_ids = {}
    next_id = 0
    for c in range(n_classes):
        if kind == "gaussian_blobs":
            cx, cy = centers[c]
            width = rng.uniform(0.10 * side, 0.16 * side)
        else:
            cx, cy = side / 2.0, side / 2.0
            radius = rng.uniform(0.16 * side, 0.40 * side)
            thickness = rng.uniform(0.035 * side, 0.09 * side)
        color = rng.uniform(0.4, 1.0, size=channels)
        stack = np.empty((per_class, channels, side, side), dtype=np.float32)
        for e in range(per_class):
            jx, jy = rng.normal(0.0, difficulty * 0.05 * side, size=2)
            amp = 1.0 + 0.4 * difficulty * rng.uniform(-1.0, 1.0)
            background = difficulty * rng.uniform(-1.5, 1.5)
            if kind == "gaussian_blobs":
                w_e = width * (1.0 + 0.3 * difficulty * rng.uniform(-1.0, 1.0))
                r2 = (xx - cx - jx) ** 2 + (yy - cy - jy) ** 2
                base = amp * np.exp(-r2 / (2.0 * w_e**2)) + background
            else:
                r_e = radius * (1.0 + 0.15 * difficulty * rng.uniform(-1.0, 1.0))
                dist = np.sqrt((xx - cx - jx) ** 2 + (yy - cy - jy) ** 2)
                base = amp * np.exp(-((dist - r_e) ** 2) / (2.0 * thickness**2)) + background
            noise = rng.normal(0.0, 0.25 * difficulty, size=(channels, side, side))
            stack[e] = (color[:, None, None] * base[None] + noise).astype(np.float32)
        images[c] = stack
        example_ids[c] = np.arange(next_id, next_id + per_class, dtype=np.int64)
        next_id += per_class
    return Dataset(
        class_ids=tuple(range(n_classes)),
        images=images,
        example_ids=example_ids,
        name=f"{kind}(seed={seed},difficulty={difficulty})",
    )


# ---------------------------------------------------------------------------
# image-folder interchange
# ---------------------------------------------------------------------------


def load_image_dir(root_path):
    """Load `root/<class_name>/<image files>` into a Dataset of [0,1] floats.

    All images must decode to the same size and channel count; an empty class
    directory or unreadable file is an error naming the offender.
    """
    from PIL import Image

    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    images = {}
    example_ids = {}
    next_id = 0
    shape = None
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"class directory {cdir} is empty")
        stack = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("L") if im.mode in ("L", "1", "I;16") else im.convert("RGB")
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as err:
                raise ValueError(f"unreadable image file {f}") from err
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValueError(f"image {f} has shape {arr.shape}, expected {shape}")
            stack.append(arr)
        images[cdir.name] = np.stack(stack)
        example_ids[cdir.name] = np.arange(next_id, next_id + len(stack), dtype=np.int64)
        next_id += len(stack)
    return Dataset(
        class_ids=tuple(d.name for d in class_dirs),
        images=images,
        example_ids=example_ids,
        name=str(root),
    )


def export_image_dir(dataset, root_path):
    """Write a dataset to the image-folder layout as 8-bit PNGs.

    Pixel values are clipped to [0, 1] before quantization, so exports of
    noisy synthetic data are lossy by design.
    """
    from PIL import Image

    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for cid in dataset.class_ids:
        name = cid if isinstance(cid, str) else f"class_{cid:04d}"
        cdir = root / name
        cdir.mkdir(exist_ok=True)
        for i, img in enumerate(dataset.images[cid]):
            arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
            if arr.shape[0] == 1:
                im = Image.fromarray(arr[0], mode="L")
            else:
                im = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
            im.save(cdir / f"{i:05d}.png")
    return root


def channel_stats(dataset):
    """Per-channel mean and std over every example in the dataset."""
    stacked = np.concatenate([dataset.images[c] for c in dataset.class_ids], axis=0)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def apply_normalization(dataset, mean, std):
    m = mean[None, :, None, None].astype(np.float32)
    s = std[None, :, None, None].astype(np.float32)
    return Dataset(
        class_ids=dataset.class_ids,
        images={c: (dataset.images[c] - m) / s for c in dataset.class_ids},
        example_ids=dataset.example_ids,
        name=dataset.name,
    )


def normalize_by_train(train, *others):
    """Normalize every split with channel statistics from the training split only."""
    mean, std = channel_stats(train)
    normed = [apply_normalization(train, mean, std)]
    normed.extend(apply_normalization(d, mean, std) for d in others)
    return tuple(normed), (mean, std)


# ---------------------------------------------------------------------------
# split manifests
# ---------------------------------------------------------------------------


def parse_split_manifest(path):
    """Text manifest: `[train]` / `[val]` / `[test]` sections, one class per line."""
    sections = {"train": [], "val": [], "test": []}
    current = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in sections:
                raise ValueError(f"unknown split section {name!r} in {path}")
            current = name
            continue
        if current is None:
            raise ValueError(f"class name {line!r} before any section header in {path}")
        sections[current].append(line)
    return sections


def write_split_manifest(path, train, val, test):
    lines = ["[train]", *map(str, train), "[val]", *map(str, val), "[test]", *map(str, test)]
    Path(path).write_text("\n".join(lines) + "\n")
