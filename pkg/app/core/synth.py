"""
Synthetic canopy scenes with exact ground truth.

A scene is a noisy sky-like background crossed by branch and wire strokes,
with calyx disks painted on top in the reference segmenter's key colours.
Some calyces are partly over-painted by occluders; a calyx counts as occluded
when at least half of its disk is covered. Overexposure and glare are then
added as smooth light fields so that the lighting classifier sees the
requested condition.

All randomness comes from numpy's PCG64 generator seeded with the scene seed,
so a seed always reproduces the same image and truth bit for bit.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.ndimage import gaussian_filter

from app.core.errors import InvalidParamError, InvalidSpecError, UnreachableError
from app.core.image import RgbImage, save_image
from app.core.lighting import classify_lighting, saturation_stats
from app.core.segmentation import BRANCH_KEY, CALYX_KEY, WIRE_KEY
from app.core.types import DatasetManifest, GroundTruthBox, LightingClass, ManifestEntry, OccluderKind
from app.db.annotations import save_annotations, save_manifest

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000
# Calyx centres sit at least r1 + r2 + CALYX_GAP apart so disks never touch
CALYX_GAP = 3
OCCLUDED_COVERAGE = 0.5
COVERAGE_RANGE = (0.60, 0.85)
OCCLUDER_MARGIN = 2
RADIUS_LIMITS = (8, 60)

BACKGROUND_RANGES = ((50, 70), (240, 250), (220, 235))

OCCLUDER_COLOURS: Dict[OccluderKind, Tuple[int, int, int]] = {
    OccluderKind.LEAF: (20, 245, 230),
    OccluderKind.BRANCH: BRANCH_KEY,
    OccluderKind.WIRE: WIRE_KEY,
    OccluderKind.FRUIT: (140, 245, 230),
    OccluderKind.POST: (200, 245, 230),
    OccluderKind.BEAM: (230, 245, 230),
}

DEFAULT_OCCLUDER_MIX = {
    OccluderKind.LEAF: 0.45,
    OccluderKind.BRANCH: 0.20,
    OccluderKind.WIRE: 0.15,
    OccluderKind.FRUIT: 0.10,
    OccluderKind.POST: 0.05,
    OccluderKind.BEAM: 0.05,
}

OVEREXPOSED_TARGET = 0.30
GLARE_TARGET = 0.60

SMOOTH_SCALE = 128
BISECT_STEPS = 18

GLARE_CORE = 0.35
GLARE_RED_GAIN = 300.0
GLARE_BLUE_GAIN = 400.0
GLARE_GREEN_GAIN = 15.0
OVEREXPOSED_RAMP = 0.30


class SceneSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    width: int = Field(default=1936, ge=16)
    height: int = Field(default=1216, ge=16)
    n_calyces: int = Field(default=60, ge=0)
    radius_range: Tuple[int, int] = (10, 16)
    occluded_fraction: float = Field(default=0.22, ge=0.0, le=1.0)
    occluder_mix: Dict[OccluderKind, float] = Field(default_factory=lambda: dict(DEFAULT_OCCLUDER_MIX))
    lighting: LightingClass = LightingClass.TYPICAL
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    n_branches: int = Field(default=4, ge=0)
    n_wires: int = Field(default=3, ge=0)

    @field_validator("radius_range")
    @classmethod
    def _check_radius(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        lo, hi = value
        if not RADIUS_LIMITS[0] <= lo <= hi <= RADIUS_LIMITS[1]:
            raise ValueError(f"radius_range must lie within {RADIUS_LIMITS} with lo <= hi")
        return value

    @field_validator("occluder_mix")
    @classmethod
    def _check_mix(cls, value: Dict[OccluderKind, float]) -> Dict[OccluderKind, float]:
        if OccluderKind.NONE in value:
            raise ValueError("occluder_mix cannot weight 'none'")
        if any(w < 0 for w in value.values()):
            raise ValueError("occluder weights must be non-negative")
        return value

    @model_validator(mode="after")
    def _check_occluders_available(self):
        if self.occluded_count > 0 and sum(self.occluder_mix.values()) <= 0:
            raise ValueError("occluded calyces requested but every occluder weight is zero")
        return self

    @property
    def occluded_count(self) -> int:
        return int(math.floor(self.occluded_fraction * self.n_calyces + 0.5))


@dataclass(frozen=True)
class SynthOutput:
    """
    A generated scene.

    calyx_index holds, per pixel, the index of the calyx disk painted there
    (-1 elsewhere) before occluders went on; occluder_mask marks every pixel an
    occluder painted. Together they allow recounting occlusion coverage.
    """

    image: RgbImage
    truth: List[GroundTruthBox]
    lighting_label: LightingClass
    calyx_index: np.ndarray
    occluder_mask: np.ndarray


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def smooth_field(width: int, height: int, rng: np.random.Generator, scale: int = SMOOTH_SCALE) -> np.ndarray:
    """A smooth random surface: blurred coarse noise, upsampled to the image size."""
    grid_h = max(2, math.ceil(height / scale) + 1)
    grid_w = max(2, math.ceil(width / scale) + 1)
    coarse = gaussian_filter(rng.standard_normal((grid_h, grid_w)), sigma=1.0, mode="nearest")
    return cv2.resize(coarse, (width, height), interpolation=cv2.INTER_LINEAR)


def _percentile_ranks(field: np.ndarray) -> np.ndarray:
    order = np.argsort(field, axis=None, kind="stable")
    ranks = np.empty(field.size, dtype=np.float64)
    ranks[order] = np.arange(field.size, dtype=np.float64) / field.size
    return ranks.reshape(field.shape)


def _light_field(ranks: np.ndarray, core: float, ramp: float) -> np.ndarray:
    """1 on the brightest `core` share of pixels, falling linearly to 0 over the next `ramp` share."""
    top = 1.0 - core
    if ramp <= 0.0:
        return (ranks >= top).astype(np.float64)
    f = np.clip((ranks - (top - ramp)) / ramp, 0.0, 1.0)
    f[ranks >= top] = 1.0
    return f


def apply_overexposure(img: RgbImage, target_tri_sat_frac: float = OVEREXPOSED_TARGET, seed: int = 0) -> RgbImage:
    """
    Wash out part of an image under an uneven light.

    Pixels are blended toward white by a smooth light field. Only the fully lit
    core reaches 255 in every channel, so the tri-saturated share equals the
    core share, and blue saturation stays with it below the glare bound.

    Args:
        img: Scene to degrade
        target_tri_sat_frac: Required share of pixels saturated in R, G and B
        seed: Seed of the light field

    Raises:
        InvalidParamError: The target is outside [0.25, 0.9]
        UnreachableError: The target cannot be met while keeping blue saturation under half the image
    """
    if not 0.25 <= target_tri_sat_frac <= 0.9:
        raise InvalidParamError(f"target_tri_sat_frac must be in [0.25, 0.9], got {target_tri_sat_frac}")

    ranks = _percentile_ranks(smooth_field(img.width, img.height, _rng(seed)))
    core = min(1.0, target_tri_sat_frac + 1.0 / img.size)
    f = _light_field(ranks, core, min(OVEREXPOSED_RAMP, 1.0 - core))

    px = img.pixels.astype(np.float64)
    out = px + np.floor((255.0 - px) * f[..., None])
    result = RgbImage(np.clip(out, 0, 255).astype(np.uint8))

    ratios = saturation_stats(result).ratios()
    if ratios["tri"] < target_tri_sat_frac or ratios["blue"] >= 0.5:
        raise UnreachableError(
            f"overexposure target {target_tri_sat_frac} gives tri={ratios['tri']:.4f} "
            f"blue={ratios['blue']:.4f}; blue must stay below 0.5"
        )
    return result


def _glare_cast(px: np.ndarray, f: np.ndarray) -> np.ndarray:
    out = px.copy()
    out[..., 0] += GLARE_RED_GAIN * f
    out[..., 1] += GLARE_GREEN_GAIN * np.clip((f - 0.5) / 0.5, 0.0, 1.0)
    out[..., 2] += GLARE_BLUE_GAIN * f
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def apply_glare(img: RgbImage, target_blue_sat_frac: float = GLARE_TARGET, seed: int = 0) -> RgbImage:
    """
    Cast a purple glare over an image.

    Red and blue are boosted by a smooth light field whose fully lit core covers
    about a third of the frame; green rises only slightly in the core, so the
    scene stays legible in green. The width of the falloff around the core is
    bisected until the blue-saturated share reaches the target. The core is
    widened when the falloff alone cannot get there.

    Args:
        img: Scene to degrade
        target_blue_sat_frac: Required share of pixels with a saturated blue channel
        seed: Seed of the light field

    Raises:
        InvalidParamError: The target is outside [0.5, 0.95]
    """
    if not 0.5 <= target_blue_sat_frac <= 0.95:
        raise InvalidParamError(f"target_blue_sat_frac must be in [0.5, 0.95], got {target_blue_sat_frac}")

    ranks = _percentile_ranks(smooth_field(img.width, img.height, _rng(seed)))
    px = img.pixels.astype(np.float64)
    blue = px[..., 2]

    def blue_share(core: float, ramp: float) -> float:
        f = _light_field(ranks, core, ramp)
        return float(np.count_nonzero(blue + GLARE_BLUE_GAIN * f >= 254.5)) / img.size

    core = GLARE_CORE
    if blue_share(core, 1.0 - core) >= target_blue_sat_frac:
        lo, hi = 0.0, 1.0 - core
        for _ in range(BISECT_STEPS):
            mid = (lo + hi) / 2.0
            if blue_share(core, mid) >= target_blue_sat_frac:
                hi = mid
            else:
                lo = mid
        ramp = hi
    else:
        lo, hi = core, 1.0
        for _ in range(BISECT_STEPS):
            mid = (lo + hi) / 2.0
            if blue_share(mid, 1.0 - mid) >= target_blue_sat_frac:
                hi = mid
            else:
                lo = mid
        core, ramp = hi, 1.0 - hi

    result = RgbImage(_glare_cast(px, _light_field(ranks, core, ramp)))
    stats = saturation_stats(result)
    if classify_lighting(stats) != LightingClass.GLARE:
        raise UnreachableError(f"glare cast did not classify as glare: {stats.ratios()}")
    logger.debug("Glare core=%.3f ramp=%.3f ratios=%s", core, ramp, stats.ratios())
    return result


def _place_calyces(rng: np.random.Generator, spec: SceneSpec) -> List[Tuple[int, int, int]]:
    lo, hi = spec.radius_range
    placed: List[Tuple[int, int, int]] = []
    for n in range(spec.n_calyces):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            r = int(rng.integers(lo, hi + 1))
            if 2 * r + 1 > spec.width or 2 * r + 1 > spec.height:
                continue
            cx = int(rng.integers(r, spec.width - r))
            cy = int(rng.integers(r, spec.height - r))
            if all((cx - x) ** 2 + (cy - y) ** 2 >= (r + pr + CALYX_GAP) ** 2 for x, y, pr in placed):
                placed.append((cx, cy, r))
                break
        else:
            raise InvalidSpecError(
                f"could not place calyx {n + 1} of {spec.n_calyces} in a "
                f"{spec.width}x{spec.height} scene after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
    return placed


def _draw_strokes(canvas: np.ndarray, rng: np.random.Generator, spec: SceneSpec) -> None:
    h, w = canvas.shape[:2]
    for _ in range(spec.n_branches):
        p1 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
        p2 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
        cv2.line(canvas, p1, p2, BRANCH_KEY, int(rng.integers(5, 10)), lineType=cv2.LINE_8)
    for _ in range(spec.n_wires):
        y_left = int(rng.integers(0, h))
        y_right = int(np.clip(y_left + rng.integers(-(h // 10), h // 10 + 1), 0, h - 1))
        cv2.line(canvas, (0, y_left), (w - 1, y_right), WIRE_KEY, 2, lineType=cv2.LINE_8)


def _disk_window(cx: int, cy: int, radius: int, width: int, height: int):
    x0, x1 = max(0, cx - radius), min(width, cx + radius + 1)
    y0, y1 = max(0, cy - radius), min(height, cy + radius + 1)
    dy, dx = np.mgrid[y0 - cy:y1 - cy, x0 - cx:x1 - cx]
    return (slice(y0, y1), slice(x0, x1)), dx, dy


def _occluder_region(cx: int, cy: int, r: int, coverage: float, theta: float, width: int, height: int):
    """
    Cut the calyx with a straight edge so the covered side holds `coverage` of the disk.

    The occluder extends OCCLUDER_MARGIN past the rim so no calyx fringe survives
    on the covered side.
    """
    outer = r + OCCLUDER_MARGIN
    window, dx, dy = _disk_window(cx, cy, outer, width, height)
    proj = dx * math.cos(theta) + dy * math.sin(theta)
    disk = dx ** 2 + dy ** 2 <= r ** 2
    ordered = np.sort(proj[disk])[::-1]
    k = max(1, math.ceil(coverage * ordered.size))
    region = (dx ** 2 + dy ** 2 <= outer ** 2) & (proj >= ordered[k - 1])
    return window, region


def _render_scene(spec: SceneSpec, rng: np.random.Generator):
    h, w = spec.height, spec.width
    canvas = np.empty((h, w, 3), dtype=np.uint8)
    for c, (lo, hi) in enumerate(BACKGROUND_RANGES):
        canvas[..., c] = rng.integers(lo, hi + 1, size=(h, w), dtype=np.uint8)
    _draw_strokes(canvas, rng, spec)

    calyces = _place_calyces(rng, spec)
    calyx_index = np.full((h, w), -1, dtype=np.int32)
    for i, (cx, cy, r) in enumerate(calyces):
        window, dx, dy = _disk_window(cx, cy, r, w, h)
        disk = dx ** 2 + dy ** 2 <= r ** 2
        calyx_index[window][disk] = i
        canvas[window][disk] = CALYX_KEY

    kinds = [k for k, weight in spec.occluder_mix.items() if weight > 0]
    occluded_ids = sorted(int(i) for i in rng.choice(len(calyces), size=spec.occluded_count, replace=False)) \
        if spec.occluded_count else []
    occluder_mask = np.zeros((h, w), dtype=bool)
    occluder_of: Dict[int, OccluderKind] = {}
    if occluded_ids:
        weights = np.asarray([spec.occluder_mix[k] for k in kinds], dtype=np.float64)
        weights /= weights.sum()
        for i in occluded_ids:
            cx, cy, r = calyces[i]
            kind = kinds[int(rng.choice(len(kinds), p=weights))]
            coverage = float(rng.uniform(*COVERAGE_RANGE))
            theta = float(rng.uniform(0.0, 2.0 * math.pi))
            window, region = _occluder_region(cx, cy, r, coverage, theta, w, h)
            canvas[window][region] = OCCLUDER_COLOURS[kind]
            occluder_mask[window] |= region
            occluder_of[i] = kind

    truth = []
    for i, (cx, cy, r) in enumerate(calyces):
        window, _, _ = _disk_window(cx, cy, r, w, h)
        disk = calyx_index[window] == i
        covered = float(occluder_mask[window][disk].mean())
        occluded = covered >= OCCLUDED_COVERAGE
        truth.append(GroundTruthBox(
            x_min=float(cx - r),
            y_min=float(cy - r),
            x_max=float(cx + r),
            y_max=float(cy + r),
            occluded=occluded,
            occluder=occluder_of[i] if occluded else OccluderKind.NONE,
        ))

    calyx_index.setflags(write=False)
    occluder_mask.setflags(write=False)
    return RgbImage(canvas), truth, calyx_index, occluder_mask


def generate_scene(spec: SceneSpec) -> SynthOutput:
    """
    Render one scene for a spec.

    Raises:
        InvalidSpecError: The calyces do not fit in the frame without touching
        UnreachableError: The degraded image does not classify as the requested lighting
    """
    rng = _rng(spec.seed)
    image, truth, calyx_index, occluder_mask = _render_scene(spec, rng)

    light_seed = int(rng.integers(0, 2 ** 63))
    if spec.lighting == LightingClass.OVEREXPOSED:
        image = apply_overexposure(image, OVEREXPOSED_TARGET, light_seed)
    elif spec.lighting == LightingClass.GLARE:
        image = apply_glare(image, GLARE_TARGET, light_seed)

    label = classify_lighting(saturation_stats(image))
    if label != spec.lighting:
        raise UnreachableError(f"scene classified as {label.value}, wanted {spec.lighting.value}")

    logger.debug(
        "Scene seed=%d: %d calyces, %d occluded, %s",
        spec.seed, len(truth), sum(1 for t in truth if t.occluded), label.value,
    )
    return SynthOutput(
        image=image,
        truth=truth,
        lighting_label=label,
        calyx_index=calyx_index,
        occluder_mask=occluder_mask,
    )


LIGHTING_CYCLE = (LightingClass.TYPICAL, LightingClass.OVEREXPOSED, LightingClass.GLARE)


def write_dataset(
    out_dir: str,
    count: int,
    lighting: Union[LightingClass, str] = LightingClass.TYPICAL,
    density: float = 60,
    occluded_frac: float = 0.22,
    seed: int = 0,
    width: int = 1936,
    height: int = 1216,
    name: Optional[str] = None,
    workers: int = 1,
) -> str:
    """
    Generate `count` scenes with annotations and a manifest.

    Scene i uses seed + i. With lighting "mixed" the scenes cycle through
    typical, overexposed and glare.

    Returns:
        Path of the written manifest.json
    """
    if count < 1:
        raise InvalidParamError(f"count must be at least 1, got {count}")
    mixed = lighting == "mixed"
    n_calyces = int(math.floor(density + 0.5))

    def build(i: int) -> ManifestEntry:
        cls = LIGHTING_CYCLE[i % len(LIGHTING_CYCLE)] if mixed else LightingClass(lighting)
        try:
            spec = SceneSpec(
                width=width,
                height=height,
                n_calyces=n_calyces,
                occluded_fraction=occluded_frac,
                lighting=cls,
                seed=seed + i,
            )
        except ValidationError as e:
            raise InvalidSpecError(f"Invalid scene settings: {e}") from e
        out = generate_scene(spec)
        stem = f"scene_{i:04d}"
        save_image(out.image, os.path.join(out_dir, f"{stem}.png"))
        save_annotations(out.truth, os.path.join(out_dir, f"{stem}.json"))
        return ManifestEntry(image_path=f"{stem}.png", annotation_path=f"{stem}.json", lighting_label=out.lighting_label)

    os.makedirs(out_dir, exist_ok=True)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, range(count)))
    else:
        entries = [build(i) for i in range(count)]

    manifest = DatasetManifest(name=name or os.path.basename(os.path.abspath(out_dir)), entries=entries)
    path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest, path)
    logger.info("Wrote %d scenes to %s", count, out_dir)
    return path
