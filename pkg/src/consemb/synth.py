"""Synthetic paired text + volume corpus.

Volumes contain two symmetric ellipsoidal "breast" blobs and two superior
"nodal" blobs, so the image alone never tells which side is the target; only
the text does.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .grammar import (DOSE_CATALOG, CaseFields, Laterality, Nodal, Surgery, TemplateGrammar, recommend_dose,
                      render_plan, render_summary)

HU_MIN, HU_MAX = -1000.0, 1000.0
DEFAULT_SPACING = (1.0, 1.0, 3.0)
RAW_DIMS = (32, 32, 16)
RAW_SPACING = (1.25, 1.25, 3.0)
DEFAULT_PATCH = (32, 32, 16)
# normalized intensity of -500 HU
BODY_THRESHOLD = 0.25


@dataclass
class RawHUVolume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float]


@dataclass
class VolumeTensor:
    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        _check_spacing(self.spacing_mm)


@dataclass
class MaskTensor:
    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        _check_spacing(self.spacing_mm)


@dataclass
class SyntheticCase:
    id: str
    report: str
    summary: str
    plan: str
    fields: CaseFields
    volume: VolumeTensor
    mask: MaskTensor
    meta: dict = field(default_factory=dict)


def _check_spacing(spacing):
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise InvalidInputError(f"spacing must be three positive values, got {spacing}")


# -- geometry ---------------------------------------------------------------

def _ellipsoid(shape, spacing, center, radii):
    """Normalized ellipsoid radius field r; r<1 is inside. Units are mm."""
    grids = np.meshgrid(*[(np.arange(n) + 0.5) * s for n, s in zip(shape, spacing)],
                        indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return np.sqrt(r2)


def _anatomy(rng, shape=RAW_DIMS, spacing=RAW_SPACING):
    """Blob parameters for both sides, jittered independently of the case fields."""
    ext = np.array(shape) * np.array(spacing)
    blobs = {}
    for side, xc in (("left", 0.27), ("right", 0.73)):
        j = rng.uniform(-1.0, 1.0, size=6)
        breast = dict(center=(ext[0] * xc + 1.2 * j[0], ext[1] * 0.5 + 1.2 * j[1], ext[2] * 0.4 + 2 * j[2]),
                      radii=(ext[0] * 0.17 + 0.8 * j[3], ext[1] * 0.25 + 0.8 * j[4], ext[2] * 0.25 + 1.5 * j[5]))
        k = rng.uniform(-1.0, 1.0, size=3)
        node = dict(center=(ext[0] * (xc + (0.08 if side == "right" else -0.08)) + k[0],
                            ext[1] * 0.35 + k[1], ext[2] * 0.82 + k[2]),
                    radii=(ext[0] * 0.07, ext[1] * 0.08, ext[2] * 0.12))
        blobs[side] = (breast, node)
    return blobs


def synthesize_raw(fields: CaseFields, rng: np.random.Generator, shape=RAW_DIMS,
                   spacing=RAW_SPACING) -> tuple[RawHUVolume, np.ndarray]:
    """Raw HU volume and target mask on the raw grid."""
    blobs = _anatomy(rng, shape, spacing)
    ext = np.array(shape) * np.array(spacing)
    body = _ellipsoid(shape, spacing, ext / 2, (ext[0] * 0.48, ext[1] * 0.45, ext[2] * 0.7))
    hu = np.where(body < 1.0, -80.0, -1000.0)
    mask = np.zeros(shape, dtype=np.uint8)
    for side, (breast, node) in blobs.items():
        rb = _ellipsoid(shape, spacing, **breast)
        rn = _ellipsoid(shape, spacing, **node)
        # soft edges
        hu = hu + 140.0 / (1.0 + np.exp((rb - 1.0) * 12.0))
        hu = hu + 120.0 / (1.0 + np.exp((rn - 1.0) * 12.0))
        if side in fields.sides:
            mask |= (rb < 1.0)
            if fields.nodal_involvement is not Nodal.NONE:
                mask |= (rn < 1.0)
    hu = hu + rng.normal(0.0, 25.0, size=shape)
    # everything outside the volume's half for each side is guaranteed empty
    half = shape[0] // 2
    if "left" not in fields.sides:
        mask[:half] = 0
    if "right" not in fields.sides:
        mask[half:] = 0
    return RawHUVolume(hu.astype(np.float32), tuple(spacing)), mask


# -- preprocessing ----------------------------------------------------------

def normalize_hu(hu):
    hu = np.clip(np.asarray(hu, dtype=np.float64), HU_MIN, HU_MAX)
    return (hu - HU_MIN) / (HU_MAX - HU_MIN)


def _resample(data, spacing, target_spacing, order):
    if tuple(float(s) for s in spacing) == tuple(float(s) for s in target_spacing):
        return data
    new_shape = [max(1, int(round(n * s / t))) for n, s, t in zip(data.shape, spacing, target_spacing)]
    zoom = [n / o for n, o in zip(new_shape, data.shape)]
    out = ndimage.zoom(data, zoom, order=order, mode="nearest", grid_mode=True)
    return out


def preprocess_volume(raw, target_spacing=DEFAULT_SPACING) -> VolumeTensor:
    """Clip HU to [-1000, 1000], map linearly to [0, 1] and resample trilinearly.

    A :class:`VolumeTensor` is already normalized, so only the resampling step
    applies to it; this makes the operation idempotent.
    """
    _check_spacing(raw.spacing_mm)
    _check_spacing(target_spacing)
    if isinstance(raw, VolumeTensor):
        data = raw.data
    else:
        data = normalize_hu(raw.data)
    data = _resample(data, raw.spacing_mm, target_spacing, order=1)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return VolumeTensor(data, tuple(float(s) for s in target_spacing))


def preprocess_mask(mask: np.ndarray, spacing, target_spacing=DEFAULT_SPACING) -> MaskTensor:
    _check_spacing(spacing)
    data = _resample(np.asarray(mask, dtype=np.uint8), spacing, target_spacing, order=0)
    return MaskTensor((data > 0).astype(np.uint8), tuple(float(s) for s in target_spacing))


def crop_offsets(data: np.ndarray, patch_dims, seed: int) -> list[int]:
    """Random crop offsets that keep the body bounding box inside the patch if possible."""
    patch_dims = tuple(int(p) for p in patch_dims)
    if any(p > n for p, n in zip(patch_dims, data.shape)):
        raise InvalidInputError(f"patch {patch_dims} larger than volume {data.shape}")
    rng = np.random.default_rng(seed)
    nz = np.argwhere(data > BODY_THRESHOLD)
    offsets = []
    for d, (p, n) in enumerate(zip(patch_dims, data.shape)):
        lo, hi = 0, n - p
        if len(nz):
            fg_lo, fg_hi = int(nz[:, d].min()), int(nz[:, d].max())
            if fg_hi - fg_lo + 1 <= p:
                lo, hi = max(lo, fg_hi - p + 1), min(hi, fg_lo)
            else:
                lo, hi = max(lo, fg_lo - p + 1), min(hi, fg_hi)
        offsets.append(int(rng.integers(lo, hi + 1)))
    return offsets


def crop_patch(vol: VolumeTensor, mask: MaskTensor, patch_dims, seed: int):
    """Paired random crop at identical offsets.

    No padding is applied, so every patch dim must fit inside the volume. Offsets
    are drawn so the crop contains the body bounding box (voxels above the air
    threshold) whenever it fits, otherwise so that it overlaps it. The mask is
    not consulted: offsets must not leak which side is the target.
    """
    patch_dims = tuple(int(p) for p in patch_dims)
    if vol.data.shape != mask.data.shape:
        raise InvalidInputError(f"volume {vol.data.shape} and mask {mask.data.shape} differ")
    if any(p <= 0 for p in patch_dims):
        raise InvalidInputError(f"patch dims must be positive: {patch_dims}")
    vdata, mdata = vol.data, mask.data
    offsets = crop_offsets(vdata, patch_dims, seed)
    sl = tuple(slice(o, o + p) for o, p in zip(offsets, patch_dims))
    return (VolumeTensor(vdata[sl].copy(), vol.spacing_mm),
            MaskTensor(mdata[sl].copy(), mask.spacing_mm))


# -- corpus -----------------------------------------------------------------

def sample_fields(rng: np.random.Generator, include_bilateral=False) -> CaseFields:
    lats = [Laterality.LEFT, Laterality.RIGHT] + ([Laterality.BILATERAL] if include_bilateral else [])
    lat = lats[int(rng.integers(len(lats)))]
    surgery = Surgery.BREAST_CONSERVING if rng.random() < 0.6 else Surgery.TOTAL_MASTECTOMY
    stage_t = int(rng.choice(5, p=[0.08, 0.37, 0.35, 0.12, 0.08]))
    stage_n = int(rng.choice(4, p=[0.45, 0.3, 0.15, 0.1]))
    if stage_n == 0:
        nodal = Nodal.NONE
    else:
        nodal = [Nodal.AXILLARY, Nodal.SUPRACLAVICULAR, Nodal.INTERNAL_MAMMARY][
            int(rng.choice(3, p=[0.6, 0.25, 0.15]))]
    partial = CaseFields(lat, surgery, nodal, stage_t, stage_n, DOSE_CATALOG[0])
    return CaseFields(lat, surgery, nodal, stage_t, stage_n, recommend_dose(partial))


def make_case(seed: int, index: int, grammar: TemplateGrammar | None = None,
              include_bilateral=False, target_spacing=DEFAULT_SPACING) -> SyntheticCase:
    """One case; content depends only on (seed, index)."""
    grammar = grammar or TemplateGrammar()
    rng = np.random.default_rng([seed, index])
    fields = sample_fields(rng, include_bilateral)
    report = grammar.render_report(fields, rng)
    raw, raw_mask = synthesize_raw(fields, rng)
    vol = preprocess_volume(raw, target_spacing)
    mask = preprocess_mask(raw_mask, raw.spacing_mm, target_spacing)
    return SyntheticCase(id=f"case-{seed}-{index:05d}", report=report,
                         summary=render_summary(fields), plan=render_plan(fields),
                         fields=fields, volume=vol, mask=mask)


def generate_corpus(n_cases: int, seed: int, grammar: TemplateGrammar | None = None,
                    include_bilateral=False) -> list[SyntheticCase]:
    if n_cases < 1:
        raise InvalidInputError(f"n_cases must be >= 1, got {n_cases}")
    grammar = grammar or TemplateGrammar()
    lats = tuple(Laterality) if include_bilateral else (Laterality.LEFT, Laterality.RIGHT)
    grammar.check_coverage(lats)
    return [make_case(seed, i, grammar, include_bilateral) for i in range(n_cases)]


def body_bbox(vol: VolumeTensor):
    nz = np.argwhere(vol.data > BODY_THRESHOLD)
    return nz.min(axis=0), nz.max(axis=0)


def laterality_from_mask(mask: MaskTensor) -> Laterality | None:
    half = mask.data.shape[0] // 2
    left, right = mask.data[:half].any(), mask.data[half:].any()
    if left and right:
        return Laterality.BILATERAL
    if left:
        return Laterality.LEFT
    if right:
        return Laterality.RIGHT
    return None


def coordinate_channels(shape, ref_shape=None) -> np.ndarray:
    """Voxel-centre coordinates, shape (3, *shape).

    Coordinates span [-1, 1] over ``ref_shape`` (default ``shape``); voxels past
    the reference extent, such as padding, fall outside that range.
    """
    ref_shape = ref_shape or shape
    axes = [(np.arange(n) + 0.5) / r * 2.0 - 1.0 for n, r in zip(shape, ref_shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij")).astype(np.float32)
