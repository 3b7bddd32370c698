"""Image files, normalization, cropping, pair manifests, montage export.

Images travel as 2-D float32 arrays. Two on-disk formats:

  raw  -- magic "LDRW", height and width as little-endian u16, then
          height*width float32 little-endian values. Bit-exact round trip.
  png  -- 16-bit grayscale; values are rounded to the 0..65535 grid on save.

The pair manifest is a JSON document (version, pairs, normalization). Image
paths inside it are stored relative to the manifest's directory so a dataset
directory can be moved wholesale.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ContractViolation,
    ImageDimensionError,
    ManifestError,
    TruncatedImageError,
    UnknownImageFormatError,
)

RAW_MAGIC = b"LDRW"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# image files


def save_image(img: np.ndarray, path) -> None:
    """Write a 2-D grayscale image; format chosen by extension (.png or raw)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractViolation(f"image must be 2-D, got shape {img.shape}")
    path = Path(path)
    if path.suffix.lower() == ".png":
        _save_png16(img, path)
    else:
        _save_raw(img, path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _load_png16(path)
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic != RAW_MAGIC:
        raise UnknownImageFormatError(f"unknown magic {magic!r} in {path}")
    return _load_raw(path)


def _save_raw(img: np.ndarray, path: Path) -> None:
    h, w = img.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ImageDimensionError(f"dimensions {h}x{w} overflow the u16 header")
    payload = np.ascontiguousarray(img, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<HH", h, w))
        f.write(payload)


def _load_raw(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise UnknownImageFormatError(f"unknown magic {blob[:4]!r} in {path}")
    if len(blob) < 8:
        raise TruncatedImageError(f"truncated header in {path}")
    h, w = struct.unpack("<HH", blob[4:8])
    expected = 8 + 4 * h * w
    if len(blob) < expected:
        raise TruncatedImageError(
            f"truncated payload in {path}: {len(blob)} bytes, need {expected}")
    return np.frombuffer(blob[8:expected], dtype="<f4").reshape(h, w).astype(np.float32)


def _save_png16(img: np.ndarray, path: Path) -> None:
    grid = np.clip(np.rint(img), 0, 0xFFFF).astype(np.uint16)
    Image.fromarray(grid).save(path, format="PNG")  # uint16 maps to I;16


def _load_png16(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except Exception as exc:
        raise UnknownImageFormatError(f"unreadable PNG {path}: {exc}") from exc
    if arr.ndim != 2:
        raise UnknownImageFormatError(f"PNG {path} is not single-channel grayscale")
    return arr.astype(np.float32)


def png_bytes_from_unit(img01: np.ndarray) -> bytes:
    """Encode a [0,1] image as an in-memory 16-bit grayscale PNG."""
    grid = np.clip(np.rint(np.asarray(img01) * 0xFFFF), 0, 0xFFFF).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(grid).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# cropping and normalization


def center_crop(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Crop equally from both sides; odd remainders keep the extra row/column
    at the top/left."""
    h, w = img.shape
    if target_h > h or target_w > w:
        raise ContractViolation(
            f"crop target {target_h}x{target_w} exceeds source {h}x{w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    return img[top:top + target_h, left:left + target_w]


@dataclass(frozen=True)
class Normalization:
    lo: float
    hi: float
    mode: str = "minmax"

    def validate(self) -> None:
        if not self.lo < self.hi:
            raise ContractViolation(f"normalization needs lo < hi, got [{self.lo}, {self.hi}]")


def normalize(img: np.ndarray, norm: Normalization) -> np.ndarray:
    """Linear map of [lo, hi] onto [0, 1], clamped."""
    norm.validate()
    t = (np.asarray(img, dtype=np.float32) - norm.lo) / (norm.hi - norm.lo)
    return np.clip(t, 0.0, 1.0)


def denormalize(t: np.ndarray, norm: Normalization) -> np.ndarray:
    """Inverse of normalize, clamped to [lo, hi]."""
    norm.validate()
    v = norm.lo + np.asarray(t, dtype=np.float32) * (norm.hi - norm.lo)
    return np.clip(v, norm.lo, norm.hi)


# ---------------------------------------------------------------------------
# pair manifest


@dataclass
class PairEntry:
    id: str
    full_path: str
    quarter_path: str
    truth_path: str | None = None
    split: str | None = None  # "train" | "val" | None


@dataclass
class PairManifest:
    pairs: list[PairEntry]
    normalization: Normalization | None = None
    version: int = MANIFEST_VERSION
    base_dir: Path | None = field(default=None, compare=False)

    def entry(self, pair_id: str) -> PairEntry:
        for e in self.pairs:
            if e.id == pair_id:
                return e
        raise ManifestError(f"unknown pair id {pair_id!r}")

    def resolve(self, rel_path: str) -> Path:
        base = self.base_dir if self.base_dir is not None else Path(".")
        return base / rel_path

    def split_ids(self, tag: str) -> list[str]:
        return [e.id for e in self.pairs if e.split == tag]


def save_manifest(manifest: PairManifest, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    doc = {
        "version": manifest.version,
        "normalization": None if manifest.normalization is None else {
            "mode": manifest.normalization.mode,
            "lo": manifest.normalization.lo,
            "hi": manifest.normalization.hi,
        },
        "pairs": [
            {
                "id": e.id,
                "full_path": e.full_path,
                "quarter_path": e.quarter_path,
                "truth_path": e.truth_path,
                "split": e.split,
            }
            for e in manifest.pairs
        ],
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_manifest(path, check_files: bool = True) -> PairManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestError(f"unreadable manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
    norm = None
    if doc.get("normalization") is not None:
        n = doc["normalization"]
        norm = Normalization(lo=float(n["lo"]), hi=float(n["hi"]), mode=n.get("mode", "minmax"))
        norm.validate()
    pairs = [
        PairEntry(
            id=p["id"],
            full_path=p["full_path"],
            quarter_path=p["quarter_path"],
            truth_path=p.get("truth_path"),
            split=p.get("split"),
        )
        for p in doc.get("pairs", [])
    ]
    ids = [e.id for e in pairs]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate pair ids in manifest")
    manifest = PairManifest(pairs=pairs, normalization=norm, version=doc["version"],
                            base_dir=path.parent)
    if check_files:
        for e in pairs:
            for p in (e.full_path, e.quarter_path, e.truth_path):
                if p is not None and not manifest.resolve(p).exists():
                    raise ManifestError(f"pair {e.id!r}: missing file {p}")
    return manifest


def rebase_manifest(manifest: PairManifest, new_dir) -> PairManifest:
    """Copy of the manifest with image paths rewritten relative to new_dir,
    so it can be saved into a different directory and still resolve."""
    new_dir = Path(new_dir)
    pairs = []
    for e in manifest.pairs:
        def rel(p):
            return None if p is None else os.path.relpath(manifest.resolve(p), new_dir)
        pairs.append(PairEntry(id=e.id, full_path=rel(e.full_path),
                               quarter_path=rel(e.quarter_path),
                               truth_path=rel(e.truth_path), split=e.split))
    return PairManifest(pairs=pairs, normalization=manifest.normalization,
                        version=manifest.version, base_dir=new_dir)


def compute_normalization(manifest: PairManifest) -> Normalization:
    """Min-max over the full and quarter images of the train-tagged pairs only."""
    train = [e for e in manifest.pairs if e.split == "train"]
    if not train:
        raise ManifestError("no train-tagged pairs to compute normalization from")
    lo, hi = np.inf, -np.inf
    for e in train:
        for p in (e.full_path, e.quarter_path):
            img = load_image(manifest.resolve(p))
            lo = min(lo, float(img.min()))
            hi = max(hi, float(img.max()))
    if not lo < hi:
        raise ManifestError(f"degenerate training images: min {lo} >= max {hi}")
    return Normalization(lo=lo, hi=hi)


def load_pair_unit(manifest: PairManifest, entry: PairEntry):
    """Load one pair as normalized [0,1] float32 images (quarter, full)."""
    if manifest.normalization is None:
        raise ManifestError("manifest has no normalization record")
    q = normalize(load_image(manifest.resolve(entry.quarter_path)), manifest.normalization)
    f = normalize(load_image(manifest.resolve(entry.full_path)), manifest.normalization)
    if q.shape != f.shape:
        raise ManifestError(
            f"pair {entry.id!r}: quarter {q.shape} and full {f.shape} shapes differ")
    return q, f


# ---------------------------------------------------------------------------
# montage


def montage(full: np.ndarray, quarter: np.ndarray, enhanced: np.ndarray,
            zoom_box: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Three [0,1] panels side by side with 2-px white separators.

    zoom_box = (row, col, height, width): outlines the box on each panel and
    appends a strip of magnified (nearest-neighbor) crops beneath.
    """
    panels = [np.asarray(p, dtype=np.float32) for p in (full, quarter, enhanced)]
    if not (panels[0].shape == panels[1].shape == panels[2].shape):
        raise ContractViolation(
            f"montage panels disagree: {[p.shape for p in panels]}")
    h, w = panels[0].shape
    sep = np.ones((h, 2), dtype=np.float32)

    crops = None
    if zoom_box is not None:
        r, c, bh, bw = zoom_box
        if r < 0 or c < 0 or bh < 1 or bw < 1 or r + bh > h or c + bw > w:
            raise ContractViolation(f"zoom box {zoom_box} outside {h}x{w} image")
        z = max(1, w // bw)
        crops = []
        outlined = []
        for p in panels:
            boxed = p.copy()
            boxed[r, c:c + bw] = 1.0
            boxed[r + bh - 1, c:c + bw] = 1.0
            boxed[r:r + bh, c] = 1.0
            boxed[r:r + bh, c + bw - 1] = 1.0
            outlined.append(boxed)
            crop = p[r:r + bh, c:c + bw]
            crops.append(np.repeat(np.repeat(crop, z, axis=0), z, axis=1))
        panels = outlined

    top = np.concatenate([panels[0], sep, panels[1], sep, panels[2]], axis=1)
    if crops is None:
        return top
    zh, zw = crops[0].shape
    strip = np.zeros((zh, top.shape[1]), dtype=np.float32)
    for i, crop in enumerate(crops):
        left = i * (w + 2)
        strip[:, left:left + min(zw, w)] = crop[:, :min(zw, w)]
    bar = np.ones((2, top.shape[1]), dtype=np.float32)
    return np.concatenate([top, bar, strip], axis=0)
