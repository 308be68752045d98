"""Dataset ingestion and synthesis.

Images are grayscale portable graymaps (PGM, type P5) holding intensities
normalized to [0, 1]; a dataset is a directory of PGMs plus a line-oriented
manifest (see docs/formats.md for both byte layouts).  The synthetic generator
produces aligned multimodal slice sets: one shared anatomical structure per
record (smooth blobs, filled ellipses, thin curvilinear vessels) rendered
through per-modality monotone intensity curves plus modality-specific texture,
so modalities are spatially aligned but radiometrically distinct.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .resize import bicubic_resize

__all__ = [
    "DataError",
    "write_pgm",
    "read_pgm",
    "ManifestRecord",
    "DatasetManifest",
    "save_manifest",
    "load_manifest",
    "make_lr",
    "synth_dataset",
]

SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Raised for malformed manifests, image files, or dataset contracts."""


# ---------------------------------------------------------------------------
# Portable graymap IO
# ---------------------------------------------------------------------------


def write_pgm(path, img: np.ndarray, bit_depth: int = 16) -> None:
    """Write a [0, 1] float image as a binary PGM (P5).

    16-bit payloads are big-endian per the netpbm convention.
    """
    if bit_depth not in (8, 16):
        raise DataError(f"bit depth must be 8 or 16, got {bit_depth}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"pgm images are 2-d, got shape {arr.shape}")
    maxval = (1 << bit_depth) - 1
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    payload = q.astype(">u2" if bit_depth == 16 else np.uint8).tobytes()
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM into a [0, 1] float image; returns (image, bit_depth)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (missing P5 magic)")
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval == 255:
        bit_depth, dtype = 8, np.dtype(np.uint8)
    elif maxval == 65535:
        bit_depth, dtype = 16, np.dtype(">u2")
    else:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    expected = width * height * dtype.itemsize
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DataError(f"{path}: truncated PGM payload")
    img = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval, bit_depth


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    record_id: str
    split: str
    paths: dict[str, str]  # modality name -> path relative to the manifest


@dataclass
class DatasetManifest:
    """Aligned multimodal slice sets with a designated target modality."""

    root: Path
    modalities: list[str]
    target: str
    hr_size: int
    bit_depth: int
    records: list[ManifestRecord] = field(default_factory=list)

    @property
    def target_index(self) -> int:
        return self.modalities.index(self.target)

    def split_records(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def load_record(self, rec: ManifestRecord) -> dict[str, np.ndarray]:
        """Load all modality images of one record, validating equal sizes."""
        images = {}
        shape = None
        for mod in self.modalities:
            img, _ = read_pgm(self.root / rec.paths[mod])
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise DataError(
                    f"record {rec.record_id}: modality {mod} has shape {img.shape}, expected {shape}"
                )
            images[mod] = img
        return images


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [
        "# mmsr dataset manifest",
        f"modalities: {' '.join(manifest.modalities)}",
        f"target: {manifest.target}",
        f"hr_size: {manifest.hr_size}",
        f"bit_depth: {manifest.bit_depth}",
    ]
    for rec in manifest.records:
        parts = [f"id={rec.record_id}", f"split={rec.split}"]
        parts += [f"{mod}={rec.paths[mod]}" for mod in manifest.modalities]
        lines.append("record: " + " ".join(parts))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; every record must name every modality
    and point at an existing file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    records: list[ManifestRecord] = []
    for ln, line in enumerate(path.read_text(encoding="ascii").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(":")
        key, rest = key.strip(), rest.strip()
        if key == "record":
            fields = dict(item.split("=", 1) for item in rest.split() if "=" in item)
            if "id" not in fields or "split" not in fields:
                raise DataError(f"{path}:{ln}: record needs id= and split=")
            if fields["split"] not in SPLITS:
                raise DataError(f"{path}:{ln}: unknown split {fields['split']!r}")
            records.append(
                ManifestRecord(
                    record_id=fields.pop("id"), split=fields.pop("split"), paths=fields
                )
            )
        elif key in ("modalities", "target", "hr_size", "bit_depth"):
            header[key] = rest
        else:
            raise DataError(f"{path}:{ln}: unknown manifest key {key!r}")
    for required in ("modalities", "target", "hr_size", "bit_depth"):
        if required not in header:
            raise DataError(f"{path}: missing header line {required!r}")
    modalities = header["modalities"].split()
    target = header["target"]
    if target not in modalities:
        raise DataError(f"{path}: target {target!r} not among modalities {modalities}")
    manifest = DatasetManifest(
        root=path.parent,
        modalities=modalities,
        target=target,
        hr_size=int(header["hr_size"]),
        bit_depth=int(header["bit_depth"]),
        records=records,
    )
    for rec in records:
        for mod in modalities:
            if mod not in rec.paths:
                raise DataError(f"{path}: record {rec.record_id} missing modality {mod!r}")
            if not (manifest.root / rec.paths[mod]).exists():
                raise DataError(
                    f"{path}: record {rec.record_id}: file not found {rec.paths[mod]}"
                )
    return manifest


# ---------------------------------------------------------------------------
# Low-resolution synthesis
# ---------------------------------------------------------------------------


def make_lr(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic downscale of the trailing two axes by an integer factor."""
    h, w = np.asarray(hr).shape[-2:]
    if h % scale or w % scale:
        raise DataError(f"HR dims {h}x{w} not divisible by scale {scale}")
    return bicubic_resize(hr, h // scale, w // scale)


# ---------------------------------------------------------------------------
# Synthetic multimodal generator
# ---------------------------------------------------------------------------


def _smooth_field(rng, size: int, coarse: int, amplitude: float) -> np.ndarray:
    """Band-limited noise: coarse white noise bicubically upsampled."""
    base = rng.normal(0.0, 1.0, size=(coarse, coarse))
    return amplitude * bicubic_resize(base, size, size)


def _feather(img: np.ndarray) -> np.ndarray:
    """One [1, 2, 1]/4 separable pass; keeps edges sharp but sub-pixel consistent."""
    out = img.copy()
    out[1:-1] = 0.25 * img[:-2] + 0.5 * img[1:-1] + 0.25 * img[2:]
    out2 = out.copy()
    out2[:, 1:-1] = 0.25 * out[:, :-2] + 0.5 * out[:, 1:-1] + 0.25 * out[:, 2:]
    return out2


def _base_structure(rng, size: int):
    """Shared anatomy for one record: blobs, ellipse edges, thin vessels.

    Returns (base in roughly [0.15, 0.75], vessel stencil in [0, 1]).
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))

    for _ in range(rng.integers(3, 6)):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        sig = rng.uniform(size / 8, size / 3)
        amp = rng.uniform(-0.5, 0.7)
        img += amp * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig)))

    for _ in range(rng.integers(6, 11)):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        a = rng.uniform(size / 24, size / 5)
        b = rng.uniform(size / 24, size / 5)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        img[mask] += rng.uniform(0.2, 0.5) * rng.choice([-1.0, 1.0])

    # curvilinear vessels: quadratic Bezier polylines stamped ~2 px wide
    vessels = np.zeros_like(img)
    for _ in range(rng.integers(5, 9)):
        p0, p1, p2 = (rng.uniform(0.05, 0.95, size=2) * size for _ in range(3))
        t = np.linspace(0.0, 1.0, 4 * size)
        py = (1 - t) ** 2 * p0[0] + 2 * (1 - t) * t * p1[0] + t**2 * p2[0]
        px = (1 - t) ** 2 * p0[1] + 2 * (1 - t) * t * p1[1] + t**2 * p2[1]
        iy = np.clip(np.rint(py).astype(int), 0, size - 1)
        ix = np.clip(np.rint(px).astype(int), 0, size - 1)
        vessels[iy, ix] = 1.0
        vessels[np.clip(iy + 1, 0, size - 1), ix] = np.maximum(
            vessels[np.clip(iy + 1, 0, size - 1), ix], 0.7
        )
        vessels[iy, np.clip(ix + 1, 0, size - 1)] = np.maximum(
            vessels[iy, np.clip(ix + 1, 0, size - 1)], 0.7
        )

    lo, hi = img.min(), img.max()
    img = 0.15 + 0.6 * (img - lo) / max(hi - lo, 1e-9)
    return _feather(img), _feather(vessels)


# Per-modality monotone intensity curves and feature salience.  The target
# modality (index 0) is the noisy, low-contrast acquisition: its vessels are
# faint and its texture field strong, so its own LR view pins down the shared
# structure poorly.  Companion modalities render the same structure cleanly
# and strongly, which makes multimodal input genuinely informative.
_MODALITY_GAMMA = (1.0, 0.55, 1.8)
_MODALITY_VESSEL_GAIN = (0.08, 0.45, 0.35)
_MODALITY_TEXTURE_AMP = (0.05, 0.012, 0.015)
_MODALITY_TEXTURE_COARSE_DIV = (3, 10, 8)


def _render_modality(base: np.ndarray, vessels: np.ndarray, m: int, rng, size: int) -> np.ndarray:
    n = len(_MODALITY_GAMMA)
    gamma = _MODALITY_GAMMA[m % n]
    vgain = _MODALITY_VESSEL_GAIN[m % n]
    tamp = _MODALITY_TEXTURE_AMP[m % n]
    coarse = max(4, size // _MODALITY_TEXTURE_COARSE_DIV[m % n])
    img = np.clip(base, 0.0, 1.0) ** gamma
    img = img + vgain * vessels
    img = img + _smooth_field(rng, size, coarse, tamp)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(
    seed: int,
    count: int,
    hr_size: int,
    n_modalities: int,
    out_dir,
    split_counts: tuple[int, int, int] | None = None,
    bit_depth: int = 16,
) -> DatasetManifest:
    """Generate a deterministic multimodal dataset under ``out_dir``.

    ``split_counts`` fixes (train, val, test) sizes explicitly; by default
    roughly a tenth of ``count`` goes to each of val and test.  Writes one PGM
    per record and modality plus ``manifest.txt`` and returns the loaded view.
    """
    if hr_size < 32:
        raise DataError(f"hr_size must be >= 32, got {hr_size}")
    if n_modalities < 1:
        raise DataError(f"n_modalities must be >= 1, got {n_modalities}")
    if split_counts is None:
        n_val = max(1, count // 10)
        n_test = max(1, count // 10)
        split_counts = (count - n_val - n_test, n_val, n_test)
    if sum(split_counts) != count:
        raise DataError(f"split counts {split_counts} do not sum to count {count}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    modalities = [f"m{i}" for i in range(n_modalities)]
    rng = np.random.default_rng(seed)
    splits = [s for s, n in zip(SPLITS, split_counts) for _ in range(n)]

    records = []
    for idx in range(count):
        base, vessels = _base_structure(rng, hr_size)
        rec_id = f"r{idx:04d}"
        paths = {}
        for m, mod in enumerate(modalities):
            img = _render_modality(base, vessels, m, rng, hr_size)
            rel = f"images/{rec_id}_{mod}.pgm"
            write_pgm(out_dir / rel, img, bit_depth=bit_depth)
            paths[mod] = rel
        records.append(ManifestRecord(record_id=rec_id, split=splits[idx], paths=paths))

    manifest = DatasetManifest(
        root=out_dir,
        modalities=modalities,
        target=modalities[0],
        hr_size=hr_size,
        bit_depth=bit_depth,
        records=records,
    )
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest
