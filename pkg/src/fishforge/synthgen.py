"""Config-driven synthesis of labeled single-cell FISH patches.

A patch is built in three steps: a procedural nucleus is painted into the
blue channel, target (green) and reference (red) probe signals are placed
inside the nucleus and rendered as 2D Gaussians, and each signal channel is
elastically warped to vary signal appearance. Every patch is a pure function
of (class config, sub-seed), so datasets regenerate bit-identically.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CLASS_NAMES = ("normal", "gain", "amplified")
CHANNEL_RED = 0
CHANNEL_GREEN = 1
CHANNEL_BLUE = 2

MIN_PATCH_SIZE = 32
PLACEMENT_RETRIES = 10
GAUSSIAN_TRUNC_SIGMAS = 4.0


class ConfigurationError(ValueError):
    """Invalid generation configuration."""


class GenerationError(RuntimeError):
    """Signal placement failed for the current nucleus; retry with a new one."""


@dataclass
class NucleusTemplate:
    """Binary nucleus mask plus the blue-channel intensity texture."""

    mask: np.ndarray  # bool, H x W
    intensity: np.ndarray  # float in [0,1], zero outside mask
    source: str = "procedural"


@dataclass(frozen=True)
class SignalSpec:
    """A concrete group of signals to place: kind, count, size, brightness."""

    kind: str  # "discrete" | "cluster"
    count: int
    sigma_px: float
    cluster_spread_px: float = 0.0
    amplitude_range: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.kind not in ("discrete", "cluster"):
            raise ConfigurationError(f"unknown signal kind {self.kind!r}")
        if self.count < 1:
            raise ConfigurationError(f"signal count must be positive, got {self.count}")
        if self.sigma_px <= 0:
            raise ConfigurationError(f"sigma_px must be positive, got {self.sigma_px}")
        if self.cluster_spread_px < 0:
            raise ConfigurationError("cluster_spread_px must be nonnegative")
        lo, hi = self.amplitude_range
        if not (0 < lo <= hi <= 1):
            raise ConfigurationError(f"bad amplitude range {self.amplitude_range}")
        if self.kind == "cluster" and self.count < 2:
            raise ConfigurationError("cluster needs at least 2 signals")


@dataclass(frozen=True)
class SignalRange:
    """A signal group whose per-patch count (and size) is drawn from a range."""

    kind: str
    count_min: int
    count_max: int
    sigma_range: tuple[float, float] = (1.0, 1.8)
    cluster_spread_px: float = 0.0
    amplitude_range: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.count_min < 0 or self.count_max < self.count_min:
            raise ConfigurationError(
                f"bad count range [{self.count_min}, {self.count_max}]"
            )
        lo, hi = self.sigma_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"bad sigma range {self.sigma_range}")

    def draw(self, rng: np.random.Generator) -> SignalSpec | None:
        """Sample a concrete SignalSpec; None when a zero count is drawn."""
        count = int(rng.integers(self.count_min, self.count_max + 1))
        if count == 0:
            return None
        sigma = float(rng.uniform(*self.sigma_range))
        return SignalSpec(
            kind=self.kind,
            count=count,
            sigma_px=sigma,
            cluster_spread_px=self.cluster_spread_px,
            amplitude_range=self.amplitude_range,
        )


@dataclass(frozen=True)
class ClassConfig:
    """Signal configuration for one diagnostic class."""

    class_id: str
    green_specs: tuple[SignalRange, ...]
    red_spec: SignalRange
    variant: str | None = None  # "signals" | "cluster" for amplified

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise ConfigurationError(f"unknown class {self.class_id!r}")
        if not self.green_specs:
            raise ConfigurationError("at least one green signal group required")
        if self.red_spec.count_min < 1:
            raise ConfigurationError("reference (red) signal count must be >= 1")


@dataclass
class PatchLabel:
    """Ground truth for one patch: class, exact counts, pre-warp centers."""

    class_id: str
    n_green: int
    n_red: int
    centers: list[tuple[float, float, int]]  # (x, y, channel index)
    seed: int


@dataclass(frozen=True)
class GenerationSpec:
    """Full dataset recipe: class configs, patch geometry, counts, master seed."""

    class_configs: tuple[ClassConfig, ...]
    counts: dict  # class name -> number of patches
    patch_size: int = 64
    master_seed: int = 0
    warp_max_disp_px: float = 1.5
    warp_grid_step_px: int = 32

    def __post_init__(self):
        if self.patch_size < MIN_PATCH_SIZE:
            raise ConfigurationError(
                f"patch size must be at least {MIN_PATCH_SIZE}, got {self.patch_size}"
            )
        for name, n in self.counts.items():
            if name not in CLASS_NAMES:
                raise ConfigurationError(f"unknown class {name!r} in counts")
            if n < 1:
                raise ConfigurationError(f"count for {name} must be >= 1, got {n}")
        for name in self.counts:
            if not any(c.class_id == name for c in self.class_configs):
                raise ConfigurationError(f"no ClassConfig for class {name!r}")

    def configs_for(self, class_name: str) -> list[ClassConfig]:
        return [c for c in self.class_configs if c.class_id == class_name]


def class_for_green_count(n_green: int) -> str:
    """Diagnostic class implied by the green (target) signal count."""
    if n_green == 2:
        return "normal"
    if 3 <= n_green <= 7:
        return "gain"
    if n_green >= 8:
        return "amplified"
    raise ConfigurationError(f"no class defined for n_green={n_green}")


# ---------------------------------------------------------------------------
# nucleus synthesis


def make_nucleus(rng: np.random.Generator, size: int) -> NucleusTemplate:
    """Procedural nucleus: perturbed ellipse mask with a soft, textured interior.

    The boundary is an ellipse whose radius is modulated by a few low-frequency
    harmonics, keeping the region star-shaped (hence connected). Semi-axes are
    drawn so the mask covers roughly 25-55% of the patch.
    """
    if size < MIN_PATCH_SIZE:
        raise ConfigurationError(f"patch size must be at least {MIN_PATCH_SIZE}")

    a = rng.uniform(0.28, 0.42) * size
    b = rng.uniform(0.28, 0.42) * size
    theta0 = rng.uniform(0, 2 * math.pi)
    # low-frequency radial perturbation; small enough to stay within area bounds
    harmonics = [(k, rng.uniform(0, 0.04), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4)]

    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx - c
    dy = yy - c
    # rotate into ellipse frame
    ct, st = math.cos(theta0), math.sin(theta0)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    r = np.hypot(u, v)
    ang = np.arctan2(v, u)
    boundary = np.ones_like(r)
    for k, amp, phase in harmonics:
        boundary += amp * np.cos(k * ang + phase)
    mask = r <= boundary

    texture = ndimage.gaussian_filter(rng.random((size, size)), sigma=3.0)
    tmin, tmax = texture.min(), texture.max()
    texture = 0.35 + 0.4 * (texture - tmin) / (tmax - tmin)
    edge = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.5)
    intensity = np.clip(texture * edge, 0.0, 1.0)
    intensity[~mask] = 0.0
    return NucleusTemplate(mask=mask, intensity=intensity, source="procedural")


def load_nucleus_library(directory) -> list[np.ndarray]:
    """Read user-supplied binary nucleus masks (any nonzero pixel = inside)."""
    masks = []
    for p in sorted(Path(directory).glob("*.png")):
        arr = np.asarray(Image.open(p).convert("L"))
        masks.append(arr > 0)
    if not masks:
        raise ConfigurationError(f"no PNG masks found in {directory}")
    return masks


def nucleus_from_mask(mask: np.ndarray, rng: np.random.Generator) -> NucleusTemplate:
    """Texture a user-provided mask the same way procedural nuclei are textured."""
    size = mask.shape[0]
    texture = ndimage.gaussian_filter(rng.random(mask.shape), sigma=3.0)
    tmin, tmax = texture.min(), texture.max()
    texture = 0.35 + 0.4 * (texture - tmin) / (tmax - tmin)
    edge = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.5)
    intensity = np.clip(texture * edge, 0.0, 1.0)
    intensity[~mask] = 0.0
    return NucleusTemplate(mask=mask.astype(bool), intensity=intensity, source="file")


# ---------------------------------------------------------------------------
# signal placement and rendering


def place_signals(
    template: NucleusTemplate, spec: SignalSpec, rng: np.random.Generator
) -> list[tuple[float, float]]:
    """Sample signal centers inside the nucleus.

    Discrete signals land uniformly on the mask interior (mask eroded by
    ceil(2 * sigma) so the rendered Gaussian stays visually inside). Cluster
    signals scatter around a single uniformly placed cluster center with
    isotropic Gaussian offsets, rejection-resampled until inside the mask.
    Returns exactly ``spec.count`` (x, y) centers.
    """
    mask = template.mask
    if not mask.any():
        raise GenerationError("empty nucleus mask")
    margin = math.ceil(2 * spec.sigma_px)
    eroded = ndimage.binary_erosion(mask, iterations=margin) if margin else mask
    ys, xs = np.nonzero(eroded)
    if len(ys) == 0:
        raise GenerationError(
            f"nucleus interior vanished after eroding by {margin}px; "
            "retry with a new nucleus or a smaller sigma"
        )

    def uniform_interior(n):
        idx = rng.integers(0, len(ys), size=n)
        jitter = rng.uniform(-0.5, 0.5, size=(n, 2))
        return np.column_stack([xs[idx] + jitter[:, 0], ys[idx] + jitter[:, 1]])

    if spec.kind == "discrete":
        pts = uniform_interior(spec.count)
        return [tuple(p) for p in pts]

    # cluster: members scatter around one interior point, clipped to the mask
    center = uniform_interior(1)[0]
    h, w = mask.shape
    centers = []
    for _ in range(spec.count):
        for _attempt in range(1000):
            off = rng.normal(0.0, spec.cluster_spread_px, size=2)
            x, y = center[0] + off[0], center[1] + off[1]
            xi, yi = int(round(x)), int(round(y))
            if 0 <= xi < w and 0 <= yi < h and mask[yi, xi]:
                centers.append((float(x), float(y)))
                break
        else:
            raise GenerationError("cluster member placement failed repeatedly")
    return centers


def render_gaussians(
    centers,
    spec: SignalSpec,
    canvas: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Additively render isotropic Gaussians onto a copy of ``canvas``.

    Per-signal amplitude is drawn uniformly from the spec's amplitude range.
    Each Gaussian is truncated at 4 sigma so channels stay exactly zero far
    from any signal. The result is clamped to [0,1].
    """
    out = np.array(canvas, dtype=np.float64, copy=True)
    h, w = out.shape
    sig = spec.sigma_px
    radius = int(math.ceil(GAUSSIAN_TRUNC_SIGMAS * sig))
    lo, hi = spec.amplitude_range
    for cx, cy in centers:
        amp = rng.uniform(lo, hi)
        x0, x1 = max(0, int(math.floor(cx)) - radius), min(w, int(math.ceil(cx)) + radius + 1)
        y0, y1 = max(0, int(math.floor(cy)) - radius), min(h, int(math.ceil(cy)) + radius + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        g = amp * np.exp(-d2 / (2 * sig * sig))
        g[d2 > (GAUSSIAN_TRUNC_SIGMAS * sig) ** 2] = 0.0
        out[y0:y1, x0:x1] += g
    return np.clip(out, 0.0, 1.0)


def warp_signals(
    channel: np.ndarray,
    rng: np.random.Generator,
    max_disp_px: float,
    grid_step_px: int = 32,
) -> np.ndarray:
    """Elastic (non-affine) warp of one channel.

    A coarse displacement field with entries uniform in [-max_disp, +max_disp]
    is sampled on a grid of step ``grid_step_px``, smoothly upsampled to full
    resolution, and applied by inverse mapping with bilinear sampling.
    max_disp 0 is the exact identity.
    """
    if max_disp_px < 0:
        raise ConfigurationError("max_disp_px must be nonnegative")
    if max_disp_px == 0:
        return channel.copy()
    h, w = channel.shape
    gh = h // grid_step_px + 2
    gw = w // grid_step_px + 2
    coarse = rng.uniform(-max_disp_px, max_disp_px, size=(2, gh, gw))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = yy / grid_step_px
    cx = xx / grid_step_px
    # bilinear field upsampling: no overshoot, so the local Jacobian (and
    # hence per-blob mass change) stays bounded by the node differences
    dy = ndimage.map_coordinates(coarse[0], [cy, cx], order=1, mode="nearest")
    dx = ndimage.map_coordinates(coarse[1], [cy, cx], order=1, mode="nearest")
    return ndimage.map_coordinates(
        channel, [yy + dy, xx + dx], order=1, mode="constant", cval=0.0
    )


# ---------------------------------------------------------------------------
# patch and dataset generation


def generate_patch(
    config: ClassConfig,
    rng: np.random.Generator,
    patch_size: int = 64,
    warp_max_disp_px: float = 1.5,
    warp_grid_step_px: int = 32,
    template_source=None,
    seed: int = 0,
) -> tuple[np.ndarray, PatchLabel]:
    """Synthesize one labeled patch for the given class configuration.

    Signal centers are recorded pre-warp. Placement failures on a too-small
    nucleus are retried with a fresh nucleus up to a bounded number of times.
    """
    make = template_source or (lambda r: make_nucleus(r, patch_size))
    last_err = None
    for _attempt in range(PLACEMENT_RETRIES):
        template = make(rng)
        try:
            green_groups = []
            n_green = 0
            for srange in config.green_specs:
                spec = srange.draw(rng)
                if spec is None:
                    continue
                centers = place_signals(template, spec, rng)
                green_groups.append((spec, centers))
                n_green += len(centers)
            red_spec = config.red_spec.draw(rng)
            red_centers = place_signals(template, red_spec, rng)
        except GenerationError as err:
            last_err = err
            continue
        break
    else:
        raise GenerationError(
            f"placement failed after {PLACEMENT_RETRIES} retries: {last_err}"
        )

    expected = class_for_green_count(n_green)
    if expected != config.class_id:
        raise ConfigurationError(
            f"config for {config.class_id!r} produced n_green={n_green}, "
            f"which belongs to class {expected!r}"
        )

    zeros = np.zeros((patch_size, patch_size), dtype=np.float64)
    green = zeros
    for spec, centers in green_groups:
        green = render_gaussians(centers, spec, green, rng)
    red = render_gaussians(red_centers, red_spec, zeros, rng)
    green = warp_signals(green, rng, warp_max_disp_px, warp_grid_step_px)
    red = warp_signals(red, rng, warp_max_disp_px, warp_grid_step_px)

    pixels = np.zeros((patch_size, patch_size, 3), dtype=np.float64)
    pixels[:, :, CHANNEL_RED] = red
    pixels[:, :, CHANNEL_GREEN] = green
    pixels[:, :, CHANNEL_BLUE] = template.intensity

    centers = [
        (x, y, CHANNEL_GREEN) for _, cs in green_groups for (x, y) in cs
    ] + [(x, y, CHANNEL_RED) for (x, y) in red_centers]
    label = PatchLabel(
        class_id=config.class_id,
        n_green=n_green,
        n_red=len(red_centers),
        centers=centers,
        seed=seed,
    )
    return pixels, label


def patch_subseed(master_seed: int, patch_index: int) -> int:
    """Stable 64-bit sub-seed so any patch regenerates independently."""
    ss = np.random.SeedSequence([int(master_seed), int(patch_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0,1] float to 8-bit with round-half-up-compatible banker-free rounding."""
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


def _generate_entry(args):
    spec, class_name, class_index, patch_index = args
    configs = spec.configs_for(class_name)
    config = configs[class_index % len(configs)]
    sub_seed = patch_subseed(spec.master_seed, patch_index)
    rng = np.random.default_rng(sub_seed)
    pixels, label = generate_patch(
        config,
        rng,
        patch_size=spec.patch_size,
        warp_max_disp_px=spec.warp_max_disp_px,
        warp_grid_step_px=spec.warp_grid_step_px,
        seed=sub_seed,
    )
    return class_name, class_index, pixels, label


def dataset_entries(spec: GenerationSpec):
    """Yield (class_name, class_index, pixels, label) for every patch in spec.

    Honors FISHFORGE_THREADS for process parallelism; output order is always
    by (class, index) regardless of worker count.
    """
    work = []
    patch_index = 0
    for class_name in CLASS_NAMES:
        for class_index in range(spec.counts.get(class_name, 0)):
            work.append((spec, class_name, class_index, patch_index))
            patch_index += 1

    workers = int(os.environ.get("FISHFORGE_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(_generate_entry, work, chunksize=64)
    else:
        for item in work:
            yield _generate_entry(item)


def manifest_line(entry_id: str, filename: str, label: PatchLabel) -> str:
    """One manifest JSON-Lines record. Field order is part of the contract."""
    obj = {
        "id": entry_id,
        "file": filename,
        "class_id": label.class_id,
        "n_green": label.n_green,
        "n_red": label.n_red,
        "centers": [[round(x, 4), round(y, 4), ch] for x, y, ch in label.centers],
        "seed": label.seed,
    }
    return json.dumps(obj, separators=(",", ":"))


def generate_dataset(spec: GenerationSpec, out_dir, force: bool = False) -> Path:
    """Write PNG patches plus a JSON-Lines manifest; returns the manifest path."""
    out = Path(out_dir)
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists() and not force:
        raise FileExistsError(
            f"{manifest_path} already exists; pass force=True to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)

    with open(manifest_path, "w", encoding="utf-8") as mf:
        for class_name, class_index, pixels, label in dataset_entries(spec):
            entry_id = f"{class_name}_{class_index:06d}"
            filename = f"{entry_id}.png"
            img = Image.fromarray(quantize(pixels), mode="RGB")
            img.save(out / filename, format="PNG")
            mf.write(manifest_line(entry_id, filename, label) + "\n")
    return manifest_path


def read_manifest(manifest_path) -> list[dict]:
    with open(manifest_path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# spec (de)serialization and defaults


def default_class_configs() -> tuple[ClassConfig, ...]:
    """Built-in signal configurations for the three diagnostic classes."""
    red = SignalRange(kind="discrete", count_min=2, count_max=2)
    return (
        ClassConfig(
            class_id="normal",
            green_specs=(SignalRange(kind="discrete", count_min=2, count_max=2),),
            red_spec=red,
        ),
        ClassConfig(
            class_id="gain",
            green_specs=(SignalRange(kind="discrete", count_min=3, count_max=7),),
            red_spec=red,
        ),
        ClassConfig(
            class_id="amplified",
            green_specs=(SignalRange(kind="discrete", count_min=8, count_max=20),),
            red_spec=red,
            variant="signals",
        ),
        ClassConfig(
            class_id="amplified",
            green_specs=(
                SignalRange(
                    kind="cluster", count_min=8, count_max=30, cluster_spread_px=2.5
                ),
                SignalRange(kind="discrete", count_min=0, count_max=2),
            ),
            red_spec=red,
            variant="cluster",
        ),
    )


def _signal_range_from_json(obj: dict) -> SignalRange:
    return SignalRange(
        kind=obj["kind"],
        count_min=int(obj["count_min"]),
        count_max=int(obj["count_max"]),
        sigma_range=tuple(obj.get("sigma_range", (1.0, 1.8))),
        cluster_spread_px=float(obj.get("cluster_spread_px", 0.0)),
        amplitude_range=tuple(obj.get("amplitude_range", (0.6, 1.0))),
    )


def _signal_range_to_json(sr: SignalRange) -> dict:
    return {
        "kind": sr.kind,
        "count_min": sr.count_min,
        "count_max": sr.count_max,
        "sigma_range": list(sr.sigma_range),
        "cluster_spread_px": sr.cluster_spread_px,
        "amplitude_range": list(sr.amplitude_range),
    }


def spec_from_json(doc: dict) -> GenerationSpec:
    """Build a GenerationSpec from its JSON document form."""
    if "classes" in doc:
        configs = []
        for c in doc["classes"]:
            configs.append(
                ClassConfig(
                    class_id=c["class_id"],
                    green_specs=tuple(_signal_range_from_json(g) for g in c["green"]),
                    red_spec=_signal_range_from_json(c["red"]),
                    variant=c.get("variant"),
                )
            )
        configs = tuple(configs)
    else:
        configs = default_class_configs()
    return GenerationSpec(
        class_configs=configs,
        counts={k: int(v) for k, v in doc["counts"].items()},
        patch_size=int(doc.get("patch_size", 64)),
        master_seed=int(doc.get("seed", 0)),
        warp_max_disp_px=float(doc.get("warp_max_disp_px", 1.5)),
        warp_grid_step_px=int(doc.get("warp_grid_step_px", 32)),
    )


def spec_to_json(spec: GenerationSpec) -> dict:
    return {
        "classes": [
            {
                "class_id": c.class_id,
                "variant": c.variant,
                "green": [_signal_range_to_json(g) for g in c.green_specs],
                "red": _signal_range_to_json(c.red_spec),
            }
            for c in spec.class_configs
        ],
        "counts": dict(spec.counts),
        "patch_size": spec.patch_size,
        "seed": spec.master_seed,
        "warp_max_disp_px": spec.warp_max_disp_px,
        "warp_grid_step_px": spec.warp_grid_step_px,
    }
