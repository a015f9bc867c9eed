"""Synthetic glyph datasets, an IDX reader/writer and contrastive augmentation."""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import IdxFormatError, ValidationError
from .rng import stream

GENERATORS = ("shapes-A", "shapes-B", "pretext-pool")
SPLITS = ("train", "val", "test")
BACKGROUND_LEVELS = (0.0, 0.25)
GLYPH_LEVELS = (0.5, 0.75, 1.0)
# Labeled glyphs sit within this many pixels of the centre so that classes stay
# linearly separable on raw pixels; pool glyphs roam the whole canvas.
CLASS_JITTER = 2
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


# Each glyph maps (dy, dx, r) offset grids to a boolean mask.
def _disc(dy, dx, r):
    return dy * dy + dx * dx <= r * r


def _ring(dy, dx, r):
    d2 = dy * dy + dx * dx
    return (d2 <= r * r + 0.5) & (d2 > (r - 1.5) ** 2)


def _plus(dy, dx, r):
    return ((dx == 0) & (abs(dy) <= r)) | ((dy == 0) & (abs(dx) <= r))


def _hbar(dy, dx, r):
    return (abs(dy) <= 1) & (abs(dx) <= r)


def _xcross(dy, dx, r):
    return (abs(dy) == abs(dx)) & (abs(dx) <= r)


def _dots(dy, dx, r):
    return (dy * dy + (dx - r) ** 2 <= 1) | (dy * dy + (dx + r) ** 2 <= 1)


def _box(dy, dx, r):
    return np.maximum(abs(dy), abs(dx)) == r


def _triangle(dy, dx, r):
    return (abs(dy) <= r) & (2 * abs(dx) <= dy + r)


def _vbar(dy, dx, r):
    return (abs(dx) <= 1) & (abs(dy) <= r)


def _block(dy, dx, r):
    return np.maximum(abs(dy), abs(dx)) <= r - 1


def _ell(dy, dx, r):
    inside = (abs(dy) <= r) & (abs(dx) <= r)
    return inside & ((dx <= -r + 1) | (dy >= r - 1))


def _tee(dy, dx, r):
    inside = (abs(dy) <= r) & (abs(dx) <= r)
    return inside & ((dy <= -r + 1) | (abs(dx) <= 0))


GLYPHS = {
    "shapes-A": (_disc, _plus, _hbar, _ring, _xcross, _dots),
    "shapes-B": (_box, _triangle, _vbar, _block, _ell, _tee),
}
GLYPHS["pretext-pool"] = GLYPHS["shapes-A"] + GLYPHS["shapes-B"]
# Pool images always carry one glyph without rotational symmetry so that the
# rotation pretext is learnable.
ORIENTED_GLYPHS = (_triangle, _ell, _tee)


@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "shapes-A"
    class_count: int = 4
    n: int = 2048
    image_shape: tuple[int, int, int] = (1, 16, 16)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.generator not in GENERATORS:
            raise ValidationError(f"unknown generator {self.generator!r}")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        c, h, w = self.image_shape
        if min(self.image_shape) < 1 or h < 12 or w < 12:
            raise ValidationError(f"image_shape must be (C, H>=12, W>=12), got {self.image_shape}")
        if self.generator != "pretext-pool":
            if not 2 <= self.class_count <= len(GLYPHS[self.generator]):
                raise ValidationError(
                    f"{self.generator} supports 2..{len(GLYPHS[self.generator])} classes, got {self.class_count}")
            if self.n < 10 * self.class_count:
                raise ValidationError(f"n={self.n} is below 10 * K = {10 * self.class_count}")
        elif self.n < 10:
            raise ValidationError(f"n={self.n} is below 10")

    @property
    def dataset_id(self) -> str:
        return self.generator

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


@dataclass
class Dataset:
    id: str
    images: np.ndarray
    labels: np.ndarray | None
    class_count: int
    split: str = "all"
    split_indices: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be N x C x H x W, got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            if self.labels.shape != (len(self.images),):
                raise ValidationError("labels must have one entry per image")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise ValidationError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def subset(self, name: str) -> "Dataset":
        if name not in self.split_indices:
            raise ValidationError(f"dataset {self.id!r} has no split {name!r}")
        idx = self.split_indices[name]
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.id, self.images[idx], labels, self.class_count, split=name, manifest=self.manifest)

    @property
    def train(self) -> "Dataset":
        return self.subset("train")

    @property
    def val(self) -> "Dataset":
        return self.subset("val")

    @property
    def test(self) -> "Dataset":
        return self.subset("test")


def split_indices(n: int, seed: int) -> dict[str, np.ndarray]:
    """Seeded 80/10/10 partition of ``range(n)``."""
    perm = stream(seed, "split").permutation(n)
    n_train, n_val = int(0.8 * n), int(0.1 * n)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def _render(glyph, h: int, w: int, rng: np.random.Generator, jitter: int | None = None) -> np.ndarray:
    r = int(rng.integers(3, 6))
    if jitter is None:
        margin = r + 1
        cy = int(rng.integers(margin, h - margin))
        cx = int(rng.integers(margin, w - margin))
    else:
        cy = int(rng.integers(h // 2 - jitter, h // 2 + jitter + 1))
        cx = int(rng.integers(w // 2 - jitter, w // 2 + jitter + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    return glyph(yy - cy, xx - cx, r)


def generate(spec: SyntheticSpec) -> Dataset:
    """Render a reproducible glyph dataset (labels are ``None`` for the pretext pool)."""
    c, h, w = spec.image_shape
    rng = stream(spec.seed, f"generate:{spec.generator}")
    glyphs = GLYPHS[spec.generator]
    pool = spec.generator == "pretext-pool"
    labels = None if pool else rng.permutation(np.arange(spec.n) % spec.class_count)

    images = np.empty((spec.n, c, h, w))
    for i in range(spec.n):
        canvas = np.full((h, w), BACKGROUND_LEVELS[rng.integers(len(BACKGROUND_LEVELS))])
        if pool:
            chosen = [glyphs[rng.integers(len(glyphs))], ORIENTED_GLYPHS[rng.integers(len(ORIENTED_GLYPHS))]]
        else:
            chosen = [glyphs[labels[i]]]
        for glyph in chosen:
            level = GLYPH_LEVELS[rng.integers(len(GLYPH_LEVELS))]
            canvas[_render(glyph, h, w, rng, None if pool else CLASS_JITTER)] = level
        images[i] = canvas
    if spec.noise_std > 0:
        images = np.clip(images + rng.normal(0.0, spec.noise_std, images.shape), 0.0, 1.0)

    return Dataset(
        id=spec.dataset_id,
        images=images,
        labels=labels,
        class_count=0 if pool else spec.class_count,
        split_indices=split_indices(spec.n, spec.seed),
        manifest={"id": spec.dataset_id, "spec": spec.to_dict(), "seed": spec.seed},
    )


def augment(images: np.ndarray, seed: int) -> np.ndarray:
    """Random horizontal flip, shift of up to 2 pixels (zero fill), N(0, 0.05) noise, clip."""
    images = np.asarray(images, dtype=np.float64)
    n, _, h, w = images.shape
    rng = stream(seed, "augment")
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-2, 3, size=(n, 2))
    noise = rng.normal(0.0, 0.05, images.shape)

    out = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (2, 2), (2, 2)))
    shifted = np.empty_like(out)
    for i, (dy, dx) in enumerate(shifts):
        shifted[i] = padded[i, :, 2 - dy:2 - dy + h, 2 - dx:2 - dx + w]
    return np.clip(shifted + noise, 0.0, 1.0)


# ---------------------------------------------------------------------- IDX


def _read(path) -> bytes:
    with open(os.fspath(path), "rb") as fh:
        return fh.read()


def _header(buf: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    if len(buf) < 4:
        raise IdxFormatError(f"{what} file is truncated before the magic number", len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise IdxFormatError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IdxFormatError(f"{what} file is truncated inside the dimension header", len(buf))
    return struct.unpack_from(f">{ndim}I", buf, 4)


def load_idx(images_path, labels_path, dataset_id: str | None = None, split_seed: int = 0) -> Dataset:
    """Read an IDX image/label pair (unsigned bytes) into a :class:`Dataset`."""
    ibuf, lbuf = _read(images_path), _read(labels_path)
    n, rows, cols = _header(ibuf, IDX_IMAGE_MAGIC, 3, "image")
    (n_labels,) = _header(lbuf, IDX_LABEL_MAGIC, 1, "label")
    if n != n_labels:
        raise IdxFormatError(f"count mismatch: {n} images but {n_labels} labels", 4)
    ipix = 16 + n * rows * cols
    if len(ibuf) < ipix:
        raise IdxFormatError(f"image data truncated: expected {ipix} bytes, got {len(ibuf)}", len(ibuf))
    if len(lbuf) < 8 + n:
        raise IdxFormatError(f"label data truncated: expected {8 + n} bytes, got {len(lbuf)}", len(lbuf))
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=16)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    k = max(2, int(labels.max()) + 1) if n else 2
    ds_id = dataset_id or os.path.splitext(os.path.basename(os.fspath(images_path)))[0]
    return Dataset(ds_id, images, labels, k, split_indices=split_indices(n, split_seed),
                   manifest={"id": ds_id, "source": "idx", "seed": split_seed})


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Quantize single-channel images in [0, 1] to bytes and write an IDX pair."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ValidationError("IDX export supports single-channel images only")
        images = images[:, 0]
    n, rows, cols = images.shape
    data = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(os.fspath(images_path), "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(data.tobytes())
    with open(os.fspath(labels_path), "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABEL_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ------------------------------------------------------------------ archives


def save_dataset(dataset: Dataset, path) -> None:
    """Store a dataset, its split indices and manifest in one ``.npz`` archive."""
    import io as _io
    import json

    from .io import atomic_write_bytes

    arrays = {"images": dataset.images, "class_count": np.array(dataset.class_count)}
    if dataset.labels is not None:
        arrays["labels"] = dataset.labels
    for name, idx in dataset.split_indices.items():
        arrays[f"split_{name}"] = idx
    arrays["manifest"] = np.array(json.dumps({"id": dataset.id, **dataset.manifest}, sort_keys=True))
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_dataset(path) -> Dataset:
    import json

    try:
        archive = np.load(os.fspath(path), allow_pickle=False)
    except FileNotFoundError:
        raise ValidationError(f"dataset file not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise ValidationError(f"{path}: not a dataset archive ({exc})") from exc
    with archive:
        if "images" not in archive or "manifest" not in archive:
            raise ValidationError(f"{path}: dataset archive lacks 'images' or 'manifest'")
        manifest = json.loads(str(archive["manifest"]))
        splits = {k[len("split_"):]: archive[k] for k in archive.files if k.startswith("split_")}
        labels = archive["labels"] if "labels" in archive else None
        return Dataset(manifest.pop("id"), archive["images"], labels, int(archive["class_count"]),
                       split_indices=splits, manifest=manifest)
