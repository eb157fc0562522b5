"""Standardized mask/image pairing protocol.

Masks are bucketed by hole-to-image ratio; a manifest pairs every test
image with one mask of a bucket through a seeded shuffle and round-robin
assignment, is stored as CSV, and drives evaluation.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from vlinknet import metrics as M
from vlinknet.imagecore import apply_mask, compose, hole_ratio, load_image, load_mask

log = logging.getLogger(__name__)

BUCKETS: dict[str, tuple[float, float]] = {
    "MaskDataset1": (0.01, 0.6),
    "MaskDataset2": (0.01, 0.1),
    "MaskDataset3": (0.1, 0.3),
    "MaskDataset4": (0.3, 0.4),
    "MaskDataset5": (0.5, 0.6),
    "MaskDataset6": (0.1, 0.4),
}
UNBUCKETED = "unbucketed"
HEADER = ("image_id", "mask_id", "bucket", "hole_ratio")
RATIO_TOLERANCE = 1e-9
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class ManifestError(ValueError):
    pass


class ManifestParseError(ManifestError):
    pass


class ManifestValidationError(ManifestError):
    pass


class EmptyBucketError(ManifestError):
    pass


class EvaluationError(RuntimeError):
    pass


def in_bucket(ratio: float, bucket: str, buckets=BUCKETS) -> bool:
    """Half-open ``low <= r < high``; buckets reaching the top bound are closed."""
    low, high = buckets[bucket]
    top = max(h for _, h in buckets.values())
    return low <= ratio <= high if high == top else low <= ratio < high


def bucket_of(mask_or_ratio, buckets=BUCKETS) -> list[str]:
    ratio = mask_or_ratio if isinstance(mask_or_ratio, (int, float)) else hole_ratio(mask_or_ratio)
    names = [name for name in buckets if in_bucket(ratio, name, buckets)]
    return names or [UNBUCKETED]


@dataclass(frozen=True)
class ManifestRow:
    image_id: str
    mask_id: str
    bucket: str
    hole_ratio: float


@dataclass
class Manifest:
    seed: int
    rows: list[ManifestRow] = field(default_factory=list)

    def validate(self, buckets=BUCKETS) -> None:
        seen = set()
        for i, row in enumerate(self.rows):
            if row.image_id in seen:
                raise ManifestValidationError(f"row {i + 1}: image {row.image_id} appears twice")
            seen.add(row.image_id)
            if row.bucket not in buckets:
                raise ManifestValidationError(f"row {i + 1}: unknown bucket {row.bucket}")
            if not in_bucket(row.hole_ratio, row.bucket, buckets):
                raise ManifestValidationError(
                    f"row {i + 1}: hole_ratio {row.hole_ratio} outside {row.bucket} "
                    f"range {list(buckets[row.bucket])}"
                )

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# seed={self.seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADER)
        for r in self.rows:
            writer.writerow([r.image_id, r.mask_id, r.bucket, repr(r.hole_ratio)])
        return buf.getvalue()


def build_manifest(image_ids, mask_inventory: dict[str, float], bucket: str, seed: int,
                   buckets=BUCKETS) -> Manifest:
    """Pair sorted images round-robin with a seeded shuffle of the bucket's masks.

    Masks repeat when images outnumber them.  The result depends only on the
    sorted ids, the bucket and the seed.
    """
    if bucket not in buckets:
        raise ManifestError(f"unknown bucket {bucket!r}; known: {sorted(buckets)}")
    images = sorted(set(image_ids))
    if not images:
        raise ManifestError("no images to pair")
    eligible = sorted(m for m, r in mask_inventory.items() if in_bucket(r, bucket, buckets))
    if not eligible:
        raise EmptyBucketError(f"bucket {bucket} {list(buckets[bucket])} has no masks")
    order = np.random.default_rng(seed).permutation(len(eligible))
    shuffled = [eligible[i] for i in order]
    rows = [
        ManifestRow(img, shuffled[k % len(shuffled)], bucket, float(mask_inventory[shuffled[k % len(shuffled)]]))
        for k, img in enumerate(images)
    ]
    return Manifest(seed=seed, rows=rows)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(manifest.to_csv())


def load_manifest(path, buckets=BUCKETS) -> Manifest:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# seed="):
        raise ManifestParseError(f"{path}:1: expected '# seed=<n>' line")
    try:
        seed = int(lines[0][len("# seed="):])
    except ValueError:
        raise ManifestParseError(f"{path}:1: bad seed {lines[0]!r}") from None
    if len(lines) < 2 or tuple(next(csv.reader([lines[1]]))) != HEADER:
        raise ManifestParseError(f"{path}:2: expected header {','.join(HEADER)}")
    rows = []
    for lineno, fields in enumerate(csv.reader(lines[2:]), start=3):
        if len(fields) != len(HEADER):
            raise ManifestParseError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(fields)}")
        try:
            ratio = float(fields[3])
        except ValueError:
            raise ManifestParseError(f"{path}:{lineno}: bad hole_ratio {fields[3]!r}") from None
        rows.append(ManifestRow(fields[0], fields[1], fields[2], ratio))
    manifest = Manifest(seed, rows)
    manifest.validate(buckets)
    return manifest


def resolve_path(directory, ident: str) -> str:
    """File for an extension-less id, trying the known image extensions."""
    for ext in IMAGE_EXTS:
        p = os.path.join(directory, ident + ext)
        if os.path.exists(p):
            return p
    return os.path.join(directory, ident + ".png")


def list_ids(directory) -> list[str]:
    """Extension-less relative paths of the image files below ``directory``, sorted."""
    ids = []
    for root, _, files in os.walk(directory):
        for f in files:
            stem, ext = os.path.splitext(f)
            if ext.lower() in IMAGE_EXTS:
                ids.append(os.path.relpath(os.path.join(root, stem), directory).replace(os.sep, "/"))
    return sorted(ids)


def scan_masks(mask_dir, white_is_hole: bool = True) -> dict[str, float]:
    """Hole ratio of every mask file under ``mask_dir`` at its native resolution."""
    return {m: hole_ratio(load_mask(resolve_path(mask_dir, m), white_is_hole=white_is_hole))
            for m in list_ids(mask_dir)}


# evaluation ------------------------------------------------------------------------

Model = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class EvalOptions:
    images_dir: str
    masks_dir: str
    resolution: int = 64
    mask_white_is_hole: bool = True
    strict: bool = False
    region: str = "full"  # "full" or "hole" for MAE / PSNR
    reveal_holes: bool = False
    workers: int = 1


@dataclass
class RowResult:
    row: ManifestRow
    mae: float
    psnr: float
    ssim: float
    real_feat: np.ndarray
    fake_feat: np.ndarray


def _evaluate_row(row: ManifestRow, model: Model, extractor, opts: EvalOptions) -> RowResult:
    gt = load_image(resolve_path(opts.images_dir, row.image_id), opts.resolution)
    mask_path = resolve_path(opts.masks_dir, row.mask_id)
    native = load_mask(mask_path, white_is_hole=opts.mask_white_is_hole)
    ratio = hole_ratio(native)
    if abs(ratio - row.hole_ratio) > RATIO_TOLERANCE:
        raise ManifestValidationError(
            f"mask {row.mask_id}: hole ratio {ratio!r} differs from manifest {row.hole_ratio!r}"
        )
    mask = load_mask(mask_path, opts.resolution, opts.mask_white_is_hole)
    inputs = gt if opts.reveal_holes else apply_mask(gt, mask)
    with torch.no_grad():
        pred = model(inputs[None], mask[None])[0]
        composed = compose(gt, pred, mask)
        feats = extractor.pooled(torch.stack([gt, composed])).numpy().astype(np.float64)
    region = mask if opts.region == "hole" else None
    return RowResult(row, M.mae(gt, composed, region), M.psnr(gt, composed, region),
                     M.ssim(gt, composed), feats[0], feats[1])


def _aggregate(results: list[RowResult], extractor_id: str) -> M.MetricReport:
    n = len(results)
    if n == 0:
        return M.MetricReport(math.nan, math.nan, math.nan, math.nan, 0, extractor=extractor_id)
    mean = lambda key: math.fsum(getattr(r, key) for r in results) / n  # noqa: E731
    fid = math.nan
    if n >= 2:
        fid = M.fid(np.stack([r.real_feat for r in results]), np.stack([r.fake_feat for r in results]))
    return M.MetricReport(mean("mae"), fid, mean("psnr"), mean("ssim"), n, extractor=extractor_id)


@dataclass
class EvaluationResult:
    report: M.MetricReport
    rows: list[RowResult]
    errors: list[str]


def evaluate_manifest(manifest: Manifest, model: Model, extractor, opts: EvalOptions) -> EvaluationResult:
    """Run ``model`` over every manifest row and aggregate metrics per bucket.

    ``model(inputs, mask)`` receives ``(1, 3, H, W)`` inputs, masked unless
    ``opts.reveal_holes`` is set, and returns the raw prediction; the hole
    region is composed into the ground truth before scoring.  Row failures
    are collected and skipped unless ``opts.strict``.
    """
    def run(row):
        try:
            return _evaluate_row(row, model, extractor, opts), None
        except (OSError, ManifestError) as exc:
            if opts.strict:
                raise EvaluationError(f"{row.image_id}/{row.mask_id}: {exc}") from exc
            return None, f"{row.image_id}/{row.mask_id}: {exc}"

    if opts.workers > 1:
        with ThreadPoolExecutor(opts.workers) as pool:
            outcomes = list(pool.map(run, manifest.rows))
    else:
        outcomes = [run(row) for row in manifest.rows]
    results = [r for r, _ in outcomes if r is not None]
    errors = [e for _, e in outcomes if e is not None]
    for e in errors:
        log.warning("skipped %s", e)
    ident = extractor.identity_hash()
    report = _aggregate(results, ident)
    for name in dict.fromkeys(r.row.bucket for r in results):
        report.buckets[name] = _aggregate([r for r in results if r.row.bucket == name], ident)
    return EvaluationResult(report, results, errors)
