"""Paired infrared/visible synthetic sequences with exact flow and occlusion.

Objects translate rigidly by integer velocities over static backgrounds.
Later objects in ``SceneConfig.objects`` are drawn in front of earlier ones.
The visible stream gets a per-frame global gain (flicker); the infrared
stream gets i.i.d. sensor noise.  All intensities are in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .io import FormatError, load_tensor, read_frame, read_manifest, save_tensor, write_manifest, write_pgm, write_ppm
from .numerics import Rng

MIN_SIZE = 16


@dataclass
class ObjectSpec:
    kind: str = "square"  # "square" | "disk"
    size: int = 8
    position: tuple[int, int] = (8, 8)  # (row, col) of the top-left corner at frame 0
    velocity: tuple[int, int] = (0, 0)  # (dx, dy) pixels per frame
    ir_intensity: float = 0.9
    texture_id: int = 0

    def __post_init__(self):
        if self.kind not in ("square", "disk"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("object size must be positive")
        if any(float(v) != int(v) for v in self.velocity):
            raise ValueError("velocities must be integral so ground-truth flow is exact")
        self.velocity = (int(self.velocity[0]), int(self.velocity[1]))
        self.position = (int(self.position[0]), int(self.position[1]))


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 32
    length: int = 16
    objects: list[ObjectSpec] = field(default_factory=list)
    background_seed: int = 0
    flicker: float = 0.0
    ir_noise: float = 0.0

    def __post_init__(self):
        if self.height < MIN_SIZE or self.width < MIN_SIZE:
            raise ValueError(f"frames must be at least {MIN_SIZE}x{MIN_SIZE}")
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")
        if not 0.0 <= self.flicker <= 0.5:
            raise ValueError("flicker amplitude must lie in [0, 0.5]")
        if self.ir_noise < 0:
            raise ValueError("ir_noise must be >= 0")


@dataclass
class GroundTruthBundle:
    ir: torch.Tensor  # [T, H, W] observed (noisy) infrared
    vi: torch.Tensor  # [T, H, W] observed (flickered) visible
    ir_clean: torch.Tensor
    vi_clean: torch.Tensor
    flows: torch.Tensor  # [T-1, 2, H, W]; flows[t-1] = w_{t-1 -> t} on frame t's grid, (dx, dy)
    flows_bwd: torch.Tensor  # [T-1, 2, H, W]; backward flow on frame t-1's grid
    masks: torch.Tensor  # [T-1, H, W]; 1 where the pixel of frame t has a source in frame t-1
    surfaces: torch.Tensor  # [T, H, W] int; 0 background, j+1 object j
    gains: torch.Tensor  # [T] visible flicker offsets a_t

    @property
    def length(self) -> int:
        return self.ir.shape[0]

    @property
    def object_masks(self) -> torch.Tensor:
        return self.surfaces > 0

    def composite(self) -> torch.Tensor:
        """Per-pixel max-intensity fusion target from the clean streams."""
        return torch.maximum(self.ir_clean, self.vi_clean)


def _smooth_texture(rng: Rng, h: int, w: int, sigma: float, low: float, high: float) -> np.ndarray:
    tex = gaussian_filter(rng.normal((h, w)), sigma, mode="wrap")
    tex = (tex - tex.min()) / (np.ptp(tex) + 1e-12)
    return low + (high - low) * tex


def _object_sprites(obj: ObjectSpec, rng: Rng):
    s = obj.size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    if obj.kind == "square":
        shape = np.ones((s, s), dtype=bool)
    else:
        r = s / 2.0
        shape = (yy - r) ** 2 + (xx - r) ** 2 <= r**2
    tex_rng = rng.child(1000 + obj.texture_id)
    vi = _smooth_texture(tex_rng, s, s, 1.0, 0.1, 0.95)
    rr = ((yy - s / 2) ** 2 + (xx - s / 2) ** 2) / (s / 2) ** 2
    ir = obj.ir_intensity * (1.0 - 0.25 * np.clip(rr, 0, 1))
    return shape, vi, ir


def _render(config: SceneConfig, rng: Rng):
    h, w, n = config.height, config.width, config.length
    bg_rng = Rng(config.background_seed, (7,))
    vi_bg = _smooth_texture(bg_rng.child(0), h, w, 1.5, 0.2, 0.7)
    ir_bg = _smooth_texture(bg_rng.child(1), h, w, 3.0, 0.08, 0.22)
    sprites = [_object_sprites(o, bg_rng) for o in config.objects]

    ir = np.empty((n, h, w))
    vi = np.empty((n, h, w))
    surf = np.zeros((n, h, w), dtype=np.int64)
    for t in range(n):
        ir[t], vi[t] = ir_bg, vi_bg
        for j, (obj, (shape, vi_s, ir_s)) in enumerate(zip(config.objects, sprites)):
            top = obj.position[0] + t * obj.velocity[1]
            left = obj.position[1] + t * obj.velocity[0]
            r0, r1 = max(top, 0), min(top + obj.size, h)
            c0, c1 = max(left, 0), min(left + obj.size, w)
            if r0 >= r1 or c0 >= c1:
                continue
            sub = (slice(r0 - top, r1 - top), slice(c0 - left, c1 - left))
            m = shape[sub]
            ir[t, r0:r1, c0:c1][m] = ir_s[sub][m]
            vi[t, r0:r1, c0:c1][m] = vi_s[sub][m]
            surf[t, r0:r1, c0:c1][m] = j + 1
    return ir, vi, surf


def _velocity_table(config: SceneConfig) -> np.ndarray:
    return np.array([(0, 0)] + [o.velocity for o in config.objects], dtype=np.float64)


def _flows_and_masks(config: SceneConfig, surf: np.ndarray):
    n, h, w = surf.shape
    vel = _velocity_table(config)
    rows, cols = np.mgrid[0:h, 0:w]
    fwd = np.zeros((max(n - 1, 0), 2, h, w))
    bwd = np.zeros_like(fwd)
    masks = np.zeros((max(n - 1, 0), h, w))
    for t in range(1, n):
        v = vel[surf[t]]  # [H, W, 2] (dx, dy)
        fwd[t - 1, 0], fwd[t - 1, 1] = v[..., 0], v[..., 1]
        vb = vel[surf[t - 1]]
        bwd[t - 1, 0], bwd[t - 1, 1] = -vb[..., 0], -vb[..., 1]
        src_r = rows - v[..., 1].astype(np.int64)
        src_c = cols - v[..., 0].astype(np.int64)
        inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
        same = np.zeros_like(inside)
        same[inside] = surf[t - 1][src_r[inside], src_c[inside]] == surf[t][inside]
        masks[t - 1] = same.astype(np.float64)
    return fwd, bwd, masks


def add_flicker(frames: torch.Tensor, amplitude: float, rng: Rng, return_gains: bool = False):
    """Scale frame t by ``1 + a_t`` with ``a_t ~ U[-amplitude, amplitude]``, clamped to [0, 1]."""
    if not 0.0 <= amplitude <= 0.5:
        raise ValueError("flicker amplitude must lie in [0, 0.5]")
    n = frames.shape[0]
    gains = torch.from_numpy(rng.uniform(-amplitude, amplitude, n)) if amplitude > 0 else torch.zeros(n, dtype=torch.float64)
    gains = gains.to(frames.dtype)
    out = frames if amplitude == 0 else (frames * (1.0 + gains.view(-1, *([1] * (frames.dim() - 1))))).clamp(0.0, 1.0)
    return (out, gains) if return_gains else out


def generate_sequence(config: SceneConfig, rng: Rng) -> GroundTruthBundle:
    ir_c, vi_c, surf = _render(config, rng)
    fwd, bwd, masks = _flows_and_masks(config, surf)
    ir_clean = torch.from_numpy(ir_c)
    vi_clean = torch.from_numpy(vi_c)
    vi, gains = add_flicker(vi_clean, config.flicker, rng.child(1), return_gains=True)
    if config.ir_noise > 0:
        noise = torch.from_numpy(rng.child(2).normal(ir_c.shape)) * config.ir_noise
        ir = (ir_clean + noise).clamp(0.0, 1.0)
    else:
        ir = ir_clean.clone()
    return GroundTruthBundle(
        ir=ir,
        vi=vi,
        ir_clean=ir_clean,
        vi_clean=vi_clean,
        flows=torch.from_numpy(fwd),
        flows_bwd=torch.from_numpy(bwd),
        masks=torch.from_numpy(masks),
        surfaces=torch.from_numpy(surf),
        gains=gains,
    )


def random_scene_config(
    rng: Rng,
    height: int = 32,
    width: int = 32,
    length: int = 12,
    max_objects: int = 2,
    max_speed: int = 1,
    flicker: tuple[float, float] = (0.0, 0.2),
    ir_noise: float = 0.01,
) -> SceneConfig:
    """Draw a random scene: 1..max_objects objects with random kinds, sizes and speeds."""
    n_obj = int(rng.integers(1, max_objects + 1))
    objects = []
    for _ in range(n_obj):
        size = int(rng.integers(6, max(7, min(height, width) // 2)))
        vel = tuple(int(v) for v in rng.integers(-max_speed, max_speed + 1, 2))
        pos = (int(rng.integers(-size // 2, height - size // 2)), int(rng.integers(-size // 2, width - size // 2)))
        objects.append(
            ObjectSpec(
                kind="square" if rng.uniform(0, 1) < 0.5 else "disk",
                size=size,
                position=pos,
                velocity=vel,
                ir_intensity=float(rng.uniform(0.65, 1.0)),
                texture_id=int(rng.integers(0, 1000)),
            )
        )
    return SceneConfig(
        height=height,
        width=width,
        length=length,
        objects=objects,
        background_seed=int(rng.integers(0, 2**31)),
        flicker=float(rng.uniform(*flicker)),
        ir_noise=ir_noise,
    )


def static_scene_config(seed: int = 0, size: int = 32, length: int = 64, flicker: float = 0.2, ir_noise: float = 0.01) -> SceneConfig:
    """One warm object at rest over a textured background; only flicker and sensor noise change."""
    obj = ObjectSpec("disk", size // 3, (size // 3, size // 3), (0, 0), 0.9, 1)
    return SceneConfig(size, size, length, [obj], background_seed=seed, flicker=flicker, ir_noise=ir_noise)


def crossing_scene_config(seed: int = 0, size: int = 32, length: int = 16, flicker: float = 0.0, ir_noise: float = 0.0) -> SceneConfig:
    """Two objects moving towards each other on the same rows, so one occludes the other."""
    s = size // 4
    back = ObjectSpec("square", s, (size // 2 - s // 2, 0), (1, 0), 0.7, 2)
    front = ObjectSpec("square", s, (size // 2 - s // 2, size - s), (-1, 0), 0.95, 3)
    return SceneConfig(size, size, length, [back, front], background_seed=seed, flicker=flicker, ir_noise=ir_noise)


def export_bundle(bundle: GroundTruthBundle, out_dir, meta: dict[str, str] | None = None) -> Path:
    """Write IR frames as PGM, VI frames as PPM, flows/masks as DRFT, plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: dict[str, list[str]] = {"ir": [], "vi": [], "flow": [], "flow_bwd": [], "mask": [], "surface": [], "target": [], "ir_clean": [], "vi_clean": [], "gains": ["gains.drft"]}
    target = bundle.composite()
    for t in range(bundle.length):
        write_pgm(out / f"ir_{t:04d}.pgm", bundle.ir[t])
        write_ppm(out / f"vi_{t:04d}.ppm", bundle.vi[t])
        save_tensor(out / f"surface_{t:04d}.drft", bundle.surfaces[t].to(torch.float32))
        save_tensor(out / f"target_{t:04d}.drft", target[t])
        entries["ir"].append(f"ir_{t:04d}.pgm")
        entries["vi"].append(f"vi_{t:04d}.ppm")
        entries["surface"].append(f"surface_{t:04d}.drft")
        entries["target"].append(f"target_{t:04d}.drft")
        for kind, src in (("ir_clean", bundle.ir_clean), ("vi_clean", bundle.vi_clean)):
            save_tensor(out / f"{kind}_{t:04d}.drft", src[t])
            entries[kind].append(f"{kind}_{t:04d}.drft")
    save_tensor(out / "gains.drft", bundle.gains.to(torch.float64))
    for t in range(bundle.length - 1):
        save_tensor(out / f"flow_{t + 1:04d}.drft", bundle.flows[t])
        save_tensor(out / f"flowb_{t + 1:04d}.drft", bundle.flows_bwd[t])
        save_tensor(out / f"mask_{t + 1:04d}.drft", bundle.masks[t])
        entries["flow"].append(f"flow_{t + 1:04d}.drft")
        entries["flow_bwd"].append(f"flowb_{t + 1:04d}.drft")
        entries["mask"].append(f"mask_{t + 1:04d}.drft")
    meta = dict(meta or {})
    meta.setdefault("frames", str(bundle.length))
    meta.setdefault("height", str(bundle.ir.shape[1]))
    meta.setdefault("width", str(bundle.ir.shape[2]))
    write_manifest(out / "manifest.txt", entries, meta)
    return out / "manifest.txt"


def load_bundle(manifest) -> GroundTruthBundle:
    """Read back a sequence written by :func:`export_bundle` (frames as 8-bit quantized)."""
    manifest = Path(manifest)
    root = manifest.parent
    entries, _ = read_manifest(manifest)
    for kind in ("ir", "vi"):
        if not entries.get(kind):
            raise FormatError(f"{manifest}: no {kind} frames listed")

    def stack(kind, reader):
        return torch.stack([torch.as_tensor(reader(root / p)).double() for p in entries.get(kind, [])])

    ir = stack("ir", read_frame)
    vi = stack("vi", read_frame)
    n, h, w = ir.shape
    if vi.shape != ir.shape:
        raise FormatError(f"{manifest}: IR and VI sequences differ in shape")

    def optional(kind, default):
        return stack(kind, load_tensor) if entries.get(kind) else default

    empty_flow = torch.zeros(max(n - 1, 0), 2, h, w, dtype=torch.float64)
    return GroundTruthBundle(
        ir=ir,
        vi=vi,
        ir_clean=optional("ir_clean", ir),
        vi_clean=optional("vi_clean", vi),
        flows=optional("flow", empty_flow),
        flows_bwd=optional("flow_bwd", empty_flow),
        masks=optional("mask", torch.ones(max(n - 1, 0), h, w, dtype=torch.float64)),
        surfaces=optional("surface", torch.zeros(n, h, w)).long(),
        gains=load_tensor(root / entries["gains"][0]).double() if entries.get("gains") else torch.zeros(n, dtype=torch.float64),
    )
