"""Dataset I/O, slice preprocessing, augmentation and a synthetic cardiac phantom.

On-disk layout (all paths relative to the manifest):

    manifest.json
    case{NNN}_{ED|ES}_slice{KK}.img.png   16-bit grayscale, intensity = pixel * scale
    case{NNN}_{ED|ES}_slice{KK}.lbl.png   8-bit palette, 0 bg / 1 RV / 2 myo / 3 LV

The per-slice ``scale`` lives in the manifest, so a written image reloads to
exactly the float values it was written from whenever those were already
on the 16-bit grid (phantoms are generated on it).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

MANIFEST_FORMAT = "condenseunet-manifest"
MANIFEST_VERSION = 1
NUM_CLASSES = 4
PHASES = ("ED", "ES")
DEFAULT_SCALE = 1e-4
# RV red, myocardium blue, LV cyan
PALETTE = [0, 0, 0, 255, 0, 0, 0, 0, 255, 0, 255, 255]


class DatasetError(ValueError):
    """A dataset file or manifest entry is missing or malformed."""


@dataclass
class SegmentationSample:
    image: np.ndarray  # (H, W) float
    labels: np.ndarray  # (H, W) uint8 in {0, 1, 2, 3}
    spacing: tuple = (1.0, 1.0)  # mm per pixel (row, col)
    thickness: float = 1.0  # mm
    case_id: str = ""
    phase: str = "ED"
    slice_index: int = 0

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise DatasetError(f"{self.case_id}: image {self.image.shape} and labels {self.labels.shape} differ")


def slice_stem(case_id: str, phase: str, slice_index: int) -> str:
    return f"{case_id}_{phase}_slice{slice_index:02d}"


# -- folds ---------------------------------------------------------------------------
def split_sizes(n_cases: int, fractions=(0.70, 0.15, 0.15)) -> tuple:
    n_test = int(round(n_cases * fractions[2]))
    n_val = int(round(n_cases * fractions[1]))
    return n_cases - n_val - n_test, n_val, n_test


def assign_folds(case_ids: Sequence[str], seed: int, n_folds: int = 5,
                 fractions=(0.70, 0.15, 0.15)) -> list:
    """Case-level train/val/test splits; fold f's test block is the f-th slice
    of a seeded permutation, so test sets of different folds do not overlap
    while the cases allow it."""
    ids = list(case_ids)
    n = len(ids)
    n_train, n_val, n_test = split_sizes(n, fractions)
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise DatasetError(f"{n} cases cannot form a train/val/test split")
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    folds = []
    for f in range(n_folds):
        rolled = perm[f * n_test % n:] + perm[:f * n_test % n]
        folds.append({
            "test": sorted(rolled[:n_test]),
            "val": sorted(rolled[n_test:n_test + n_val]),
            "train": sorted(rolled[n_test + n_val:]),
        })
    return folds


# -- file I/O --------------------------------------------------------------------------
def write_image(path: Path, image: np.ndarray, scale: Optional[float] = None) -> float:
    """Write a non-negative intensity image as 16-bit PNG; returns the scale used."""
    if image.min() < 0:
        raise DatasetError(f"{path}: intensities must be non-negative to store as 16-bit")
    if scale is None:
        peak = float(image.max())
        scale = DEFAULT_SCALE if peak <= 65535 * DEFAULT_SCALE else peak / 65535
    q = np.rint(image / scale)
    if q.max() > 65535:
        raise DatasetError(f"{path}: scale {scale} overflows 16 bits")
    Image.fromarray(q.astype(np.uint16)).save(path)
    return float(scale)


def read_image(path: Path, scale: float) -> np.ndarray:
    if not Path(path).exists():
        raise DatasetError(f"missing image file {path}")
    raw = np.array(Image.open(path))
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise DatasetError(f"{path}: expected a 16-bit single-channel image, got {raw.dtype} {raw.shape}")
    return raw.astype(np.float64) * scale


def write_labels(path: Path, labels: np.ndarray) -> None:
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(PALETTE + [0] * (768 - len(PALETTE)))  # full palette so Pillow never remaps indices
    im.save(path, optimize=False)


def read_labels(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise DatasetError(f"missing label file {path}")
    im = Image.open(path)
    if im.mode not in ("P", "L"):
        raise DatasetError(f"{path}: expected an 8-bit indexed label image, got mode {im.mode}")
    labels = np.array(im)
    bad = labels[labels >= NUM_CLASSES]
    if bad.size:
        raise DatasetError(f"{path}: invalid label value {int(bad[0])} (allowed 0..{NUM_CLASSES - 1})")
    return labels.astype(np.uint8)


def quantize(image: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Snap intensities onto the 16-bit storage grid so writes round-trip exactly."""
    return np.clip(np.rint(image / scale), 0, 65535) * scale


@dataclass
class Dataset:
    """A loaded manifest: samples grouped by case plus the fold table."""

    root: Path
    manifest: dict
    samples: list = field(default_factory=list)

    @property
    def case_ids(self) -> list:
        return [c["case_id"] for c in self.manifest["cases"]]

    def split(self, name: str, fold: int = 0) -> list:
        folds = self.manifest.get("folds") or []
        if not 0 <= fold < len(folds):
            raise DatasetError(f"fold {fold} not in manifest ({len(folds)} folds)")
        if name not in folds[fold]:
            raise DatasetError(f"unknown split {name!r}; expected train/val/test")
        wanted = set(folds[fold][name])
        return [s for s in self.samples if s.case_id in wanted]


def write_dataset(samples: Sequence[SegmentationSample], out_dir, folds: Optional[list] = None,
                  extra: Optional[dict] = None, fold_seed: int = 0) -> Path:
    """Write samples plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases: dict = {}
    for s in samples:
        entry = cases.setdefault(s.case_id, {
            "case_id": s.case_id,
            "spacing": [float(s.spacing[0]), float(s.spacing[1])],
            "thickness": float(s.thickness),
            "slices": [],
        })
        stem = slice_stem(s.case_id, s.phase, s.slice_index)
        scale = write_image(out / f"{stem}.img.png", s.image)
        write_labels(out / f"{stem}.lbl.png", s.labels)
        entry["slices"].append({
            "phase": s.phase, "slice": int(s.slice_index),
            "image": f"{stem}.img.png", "label": f"{stem}.lbl.png", "scale": scale,
        })
    case_list = [cases[k] for k in sorted(cases)]
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "cases": case_list,
        "folds": folds if folds is not None else assign_folds(sorted(cases), fold_seed),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def validate_manifest(manifest: dict, source: str = "manifest") -> None:
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{source}: not a {MANIFEST_FORMAT} file")
    seen = set()
    for case in manifest.get("cases", []):
        for key in ("case_id", "spacing", "thickness", "slices"):
            if key not in case:
                raise DatasetError(f"{source}: case entry missing {key!r}")
        if len(case["spacing"]) != 2 or min(case["spacing"]) <= 0 or case["thickness"] <= 0:
            raise DatasetError(f"{source}: {case['case_id']} has non-positive voxel geometry")
        if case["case_id"] in seen:
            raise DatasetError(f"{source}: duplicate case {case['case_id']}")
        seen.add(case["case_id"])
        for sl in case["slices"]:
            if sl.get("phase") not in PHASES:
                raise DatasetError(f"{source}: {case['case_id']} slice has phase {sl.get('phase')!r}")
    for i, fold in enumerate(manifest.get("folds", [])):
        parts = [set(fold.get(k, [])) for k in ("train", "val", "test")]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise DatasetError(f"{source}: fold {i} splits overlap")
        unknown = set().union(*parts) - seen
        if unknown:
            raise DatasetError(f"{source}: fold {i} references unknown cases {sorted(unknown)[:3]}")


def load_dataset(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if not path.exists():
        raise DatasetError(f"manifest {path} not found")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    validate_manifest(manifest, str(path))
    root = path.parent
    samples = []
    for case in manifest["cases"]:
        for sl in case["slices"]:
            img_path, lbl_path = root / sl["image"], root / sl["label"]
            image = read_image(img_path, sl["scale"])
            labels = read_labels(lbl_path)
            if image.shape != labels.shape:
                raise DatasetError(f"{lbl_path}: shape {labels.shape} does not match image {image.shape}")
            samples.append(SegmentationSample(
                image=image, labels=labels, spacing=tuple(case["spacing"]),
                thickness=case["thickness"], case_id=case["case_id"], phase=sl["phase"],
                slice_index=sl["slice"]))
    return Dataset(root=root, manifest=manifest, samples=samples)


# -- preprocessing -------------------------------------------------------------------
def normalize_slice(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant slices become all zeros."""
    image = np.asarray(image, dtype=np.float64)
    centred = image - image.mean()
    std = centred.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(image)
    return centred / std


def lv_center(labels: np.ndarray, lv_label: int = 3) -> tuple:
    """Centre of mass of the LV label, rounded to a pixel; image centre if absent."""
    rows, cols = np.nonzero(labels == lv_label)
    if rows.size == 0:
        return labels.shape[0] // 2, labels.shape[1] // 2
    return int(round(rows.mean())), int(round(cols.mean()))


def _crop(arr: np.ndarray, center: tuple, size: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=arr.dtype)
    r0, c0 = center[0] - size // 2, center[1] - size // 2
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + size, arr.shape[0]), min(c0 + size, arr.shape[1])
    if re > rs and ce > cs:
        out[rs - r0:re - r0, cs - c0:ce - c0] = arr[rs:re, cs:ce]
    return out


def extract_patch(sample: SegmentationSample, center: Optional[tuple] = None, size: int = 128) -> SegmentationSample:
    """``size`` x ``size`` crop whose pixel (size//2, size//2) sits at ``center``;
    outside the slice the image is zero and the labels are background."""
    if center is None:
        center = (sample.image.shape[0] // 2, sample.image.shape[1] // 2)
    return replace(sample, image=_crop(sample.image, center, size), labels=_crop(sample.labels, center, size))


# -- augmentation --------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentParams:
    zoom_range: tuple = (0.8, 1.2)
    shift_mm: float = 5.0
    rotation_deg: float = 15.0
    noise_sigma: float = 0.05


def draw_transform(rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> dict:
    return {
        "zoom": float(rng.uniform(*params.zoom_range)),
        "shift_mm": (float(rng.uniform(-params.shift_mm, params.shift_mm)),
                     float(rng.uniform(-params.shift_mm, params.shift_mm))),
        "rotation_deg": float(rng.uniform(-params.rotation_deg, params.rotation_deg)),
        "noise_sigma": params.noise_sigma,
    }


def apply_transform(sample: SegmentationSample, zoom: float, shift_mm: tuple, rotation_deg: float,
                    noise_sigma: float = 0.0, rng: Optional[np.random.Generator] = None) -> SegmentationSample:
    """Zoom about the centre by ``zoom`` (areas scale by zoom**2), rotate, shift,
    then add Gaussian noise to the image.  Bilinear for the image, nearest
    neighbour for the labels; uncovered pixels become 0 / background."""
    image, labels = sample.image, sample.labels
    shift_px = (shift_mm[0] / sample.spacing[0], shift_mm[1] / sample.spacing[1])
    if zoom != 1.0 or rotation_deg != 0.0 or shift_px != (0.0, 0.0):
        t = math.radians(rotation_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        # output -> input: x_in = R^T (x_out - c - shift) / zoom + c
        matrix = rot.T / zoom
        c = (np.array(image.shape, dtype=np.float64) - 1) / 2.0
        offset = c - matrix @ (c + np.asarray(shift_px))
        image = ndimage.affine_transform(image, matrix, offset, order=1, mode="constant", cval=0.0)
        labels = ndimage.affine_transform(labels, matrix, offset, order=0, mode="constant", cval=0)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise needs a random generator")
        image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    return replace(sample, image=image, labels=labels.astype(np.uint8))


def augment(sample: SegmentationSample, rng: np.random.Generator,
            params: AugmentParams = AugmentParams()) -> SegmentationSample:
    return apply_transform(sample, rng=rng, **draw_transform(rng, params))


# -- batching --------------------------------------------------------------------------
def prepare(sample: SegmentationSample, patch_size: int, center_mode: str) -> SegmentationSample:
    """Normalize the whole slice, then crop around the LV centroid ("lv") or the image centre."""
    if center_mode not in ("lv", "image"):
        raise ValueError(f"center_mode must be 'lv' or 'image', got {center_mode!r}")
    norm = replace(sample, image=normalize_slice(sample.image))
    center = lv_center(sample.labels) if center_mode == "lv" else None
    return extract_patch(norm, center, patch_size)


def batch_iterator(samples: Sequence[SegmentationSample], batch_size: int, seed: int, epoch: int = 0,
                   shuffle: bool = True, augment_params: Optional[AugmentParams] = None,
                   patch_size: int = 128, center_mode: str = "lv", dtype=np.float32) -> Iterator[tuple]:
    """Yield ``(images (N,1,P,P), labels (N,P,P), samples)``.

    Order and augmentation are functions of (seed, epoch, sample position)
    only: each sample draws from its own counter-derived generator.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(samples)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        prepared = []
        for i in idx:
            s = prepare(samples[i], patch_size, center_mode)
            if augment_params is not None:
                s = augment(s, np.random.default_rng([seed, epoch, int(i), 1]), augment_params)
            prepared.append(s)
        images = np.stack([p.image for p in prepared])[:, None].astype(dtype)
        labels = np.stack([p.labels for p in prepared]).astype(np.int64)
        yield images, labels, prepared


# -- phantom generator ------------------------------------------------------------------
def _ellipse(rr, cc, center, a, b, theta):
    """Inside-test for an ellipse with semi-axes a (along theta) and b."""
    dr, dc = rr - center[0], cc - center[1]
    u = dr * math.cos(theta) + dc * math.sin(theta)
    v = -dr * math.sin(theta) + dc * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _phantom_case(rng: np.random.Generator, image_size: int, n_slices: int) -> dict:
    """Draw the geometry of one synthetic heart (pixel units)."""
    return {
        "center": (image_size / 2 + rng.uniform(-3, 3), image_size / 2 + rng.uniform(-3, 3)),
        "lv_radius": rng.uniform(9.0, 12.0),
        "lv_aspect": rng.uniform(0.85, 1.0),
        "theta": rng.uniform(0, math.pi),
        "myo_thickness": rng.uniform(5.0, 7.0),
        "rv_angle": math.pi / 2 + rng.uniform(-0.5, 0.5),
        "rv_width": rng.uniform(5.0, 8.0),
        "es_lv": rng.uniform(0.6, 0.8),
        "es_rv": rng.uniform(0.5, 0.8),
        "spacing": float(np.round(rng.uniform(1.3, 1.7), 4)),
        "thickness": float(np.round(rng.uniform(8.0, 10.0), 3)),
        "gain": rng.uniform(0.8, 1.2),
        "blood": rng.uniform(0.85, 0.95),
        "myo": rng.uniform(0.15, 0.25),
        "tissue": rng.uniform(0.45, 0.55),
        "noise": rng.uniform(0.02, 0.04),
        "slice_scales": np.linspace(0.8, 1.0, n_slices) if n_slices > 1 else np.ones(1),
    }


def render_phantom(geom: dict, phase: str, slice_index: int, image_size: int,
                   rng: np.random.Generator) -> tuple:
    """Rasterize one slice: LV disc in a myocardial annulus with an RV crescent
    on one side, inside a body ellipse.  Returns (image, labels)."""
    s = geom["slice_scales"][slice_index]
    rr, cc = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    c = geom["center"]
    r_lv = geom["lv_radius"] * s
    r_out = r_lv + geom["myo_thickness"] * s
    rv_w = geom["rv_width"] * s
    if phase == "ES":
        wall_area = r_out ** 2 - r_lv ** 2
        r_lv *= geom["es_lv"]
        r_out = math.sqrt(r_lv ** 2 + wall_area)  # myocardial volume is preserved
        rv_w *= geom["es_rv"]
    asp, th = geom["lv_aspect"], geom["theta"]
    lv = _ellipse(rr, cc, c, r_lv, r_lv * asp, th)
    outer = _ellipse(rr, cc, c, r_out, r_out * asp, th)
    d = (math.sin(geom["rv_angle"]), math.cos(geom["rv_angle"]))
    c_rv = (c[0] + d[0] * 0.6 * r_out, c[1] + d[1] * 0.6 * r_out)
    rv = _ellipse(rr, cc, c_rv, 0.6 * r_out + rv_w, 1.25 * r_out, geom["rv_angle"]) & ~outer

    labels = np.zeros((image_size, image_size), dtype=np.uint8)
    labels[rv] = 1
    labels[outer & ~lv] = 2
    labels[lv] = 3

    body = _ellipse(rr, cc, (image_size / 2, image_size / 2), 0.47 * image_size, 0.42 * image_size, 0.0)
    image = np.where(body, geom["tissue"], 0.05)
    # low-frequency shading of the surrounding tissue
    for _ in range(3):
        cr, cc0 = rng.uniform(0, image_size, 2)
        amp, width = rng.uniform(-0.08, 0.08), rng.uniform(10, 30)
        image = image + body * amp * np.exp(-((rr - cr) ** 2 + (cc - cc0) ** 2) / (2 * width ** 2))
    image = np.where(labels == 2, geom["myo"], image)
    image = np.where((labels == 1) | (labels == 3), geom["blood"], image)
    image = image * geom["gain"] + rng.normal(0.0, geom["noise"], image.shape)
    return quantize(np.clip(image, 0.0, None)), labels


def generate_phantoms(n_cases: int, seed: int, image_size: int = 128, n_slices: int = 3) -> list:
    """Synthetic short-axis slices for ``n_cases`` cases, both phases.  Case
    ``i`` depends only on ``(seed, i)``."""
    if n_cases < 5:
        raise DatasetError(f"need at least 5 cases to form folds, got {n_cases}")
    samples = []
    for i in range(n_cases):
        rng = np.random.default_rng([seed, i])
        geom = _phantom_case(rng, image_size, n_slices)
        case_id = f"case{i + 1:03d}"
        for phase in PHASES:
            for k in range(n_slices):
                image, labels = render_phantom(geom, phase, k, image_size, rng)
                samples.append(SegmentationSample(
                    image=image, labels=labels, spacing=(geom["spacing"], geom["spacing"]),
                    thickness=geom["thickness"], case_id=case_id, phase=phase, slice_index=k))
    return samples


def generate_phantom_dataset(n_cases: int, seed: int, out_dir, image_size: int = 128,
                             n_slices: int = 3) -> Path:
    """Generate phantoms and write them with a manifest; returns the manifest path."""
    samples = generate_phantoms(n_cases, seed, image_size, n_slices)
    extra = {"generator": {"kind": "phantom", "seed": seed, "n_cases": n_cases,
                           "image_size": image_size, "n_slices": n_slices}}
    return write_dataset(samples, out_dir, extra=extra, fold_seed=seed)


def case_volumes(samples: Sequence[SegmentationSample]) -> dict:
    """Group slices into per-(case, phase) label stacks: {(case, phase): (labels, spacing, thickness)}."""
    grouped: dict = {}
    for s in sorted(samples, key=lambda s: (s.case_id, s.phase, s.slice_index)):
        grouped.setdefault((s.case_id, s.phase), []).append(s)
    return {k: (np.stack([s.labels for s in v]), v[0].spacing, v[0].thickness) for k, v in grouped.items()}


def iter_files(root) -> list:
    """Sorted relative paths of every file under ``root`` (for reproducibility checks)."""
    root = Path(root)
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def tree_digest(root) -> str:
    h = hashlib.sha256()
    for rel in iter_files(root):
        h.update(rel.encode())
        h.update(hashlib.sha256((Path(root) / rel).read_bytes()).digest())
    return h.hexdigest()
