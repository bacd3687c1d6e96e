"""Mask tubes: synthetic video episodes and first-frame prompt propagation.

A tube is T frames with aligned binary masks. Synthetic tubes warp the base
frame (the episode's query) by a per-frame recorded transform; the walk is
smooth (translation steps of at most 2 px per frame, scale moving along a
fixed grid, flip fixed per tube) and frame 0 is always the identity.

Warp semantics (nearest neighbor, background fill 0): a destination pixel
pulls from ``inv(p) = unscale(unflip(p - translation))`` where scaling is
about the canvas center and flipping is horizontal. Masks warp with the
same map, so they stay binary.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import StubEncoder
from .episodes import Episode
from . import dcst
from .errors import FrameCountMismatch, IoError, ShapeMismatch
from .pipeline import ModelParams, PipelineConfig, downsample_mask, generate_prompts, upsample_map
from .decoder import decode
from .seeding import rng_for, tag
from .tensor import Tensor, binarize
from .util import atomic_write_text

IDENTITY_SCALE = 1.0
MAX_TRANSLATION_STEP = 2
DEFAULT_SCALE_GRID = (0.9, 1.0, 1.1)


@dataclass(frozen=True)
class TransformSpec:
    dx: int
    dy: int
    flip: bool
    scale: float

    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and not self.flip and self.scale == IDENTITY_SCALE


@dataclass(frozen=True)
class MaskTube:
    """Aligned frames, masks, and the per-frame transforms of the frames.

    For synthetic tubes every mask is exactly the base mask warped by its
    frame's transform (``validate(strict_warp=True)``). Predicted tubes keep
    the source frames and transforms but carry model masks, so they satisfy
    only the schema level.
    """

    frames: tuple[Tensor, ...]
    masks: tuple[Tensor, ...]
    transforms: tuple[TransformSpec, ...]
    class_id: int
    seed: int

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self, strict_warp: bool = False) -> None:
        if not (len(self.frames) == len(self.masks) == len(self.transforms)):
            raise FrameCountMismatch(
                f"{len(self.frames)} frames, {len(self.masks)} masks, "
                f"{len(self.transforms)} transforms")
        if len(self.frames) < 1:
            raise FrameCountMismatch("a tube needs at least one frame")
        shape = self.frames[0].shape
        for fr, mk in zip(self.frames, self.masks):
            if fr.shape != shape or mk.shape != shape:
                raise ShapeMismatch("tube frames and masks must share one shape")
            if not np.isin(mk.data, (0.0, 1.0)).all():
                raise ValueError("tube masks must be binary")
        if not self.transforms[0].is_identity():
            raise ValueError("frame 0 must carry the identity transform")
        if strict_warp:
            base = self.masks[0].data
            for t, spec in enumerate(self.transforms):
                expect = warp(base, spec)
                if not np.array_equal(expect, self.masks[t].data):
                    raise ValueError(f"mask {t} is not the base mask warped by its transform")


def warp(array: np.ndarray, spec: TransformSpec, fill: float = 0.0) -> np.ndarray:
    """Nearest-neighbor warp of a 2-D array by (scale, flip, translate)."""
    h, w = array.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    v = rr - spec.dy
    u = cc - spec.dx
    if spec.flip:
        u = (w - 1) - u
    src_r = np.floor((v - cy) / spec.scale + cy + 0.5).astype(np.int64)
    src_c = np.floor((u - cx) / spec.scale + cx + 0.5).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.full((h, w), fill, dtype=np.float64)
    out[inside] = array[src_r[inside], src_c[inside]]
    return out


def make_tube(ep: Episode, t_frames: int, seed: int, *,
              max_step: int = MAX_TRANSLATION_STEP,
              scale_grid: Sequence[float] = DEFAULT_SCALE_GRID,
              allow_flip: bool = True) -> MaskTube:
    """Smooth random-walk tube over the episode's query frame.

    Frame 0 is the query unchanged. Translation drifts by at most
    ``max_step`` px per frame and per axis; scale walks at most one grid
    index per frame; a flip, when drawn, applies from frame 1 on.
    """
    if t_frames < 1:
        raise FrameCountMismatch(f"t_frames must be >= 1, got {t_frames}")
    scale_grid = tuple(float(s) for s in scale_grid)
    if IDENTITY_SCALE not in scale_grid:
        raise ValueError(f"scale grid {scale_grid} must contain 1.0 (frame 0 is unwarped)")
    rng = rng_for(seed, tag("tube"), ep.class_id)
    flip = bool(rng.integers(0, 2)) if allow_flip else False
    base_img = ep.query_img.data
    base_mask = ep.query_mask.data
    frames = [ep.query_img]
    masks = [ep.query_mask]
    transforms = [TransformSpec(dx=0, dy=0, flip=False, scale=IDENTITY_SCALE)]
    dx = dy = 0
    scale_idx = scale_grid.index(IDENTITY_SCALE)
    for _ in range(1, t_frames):
        dx += int(rng.integers(-max_step, max_step + 1))
        dy += int(rng.integers(-max_step, max_step + 1))
        if len(scale_grid) > 1:
            scale_idx = int(np.clip(scale_idx + rng.integers(-1, 2), 0, len(scale_grid) - 1))
        spec = TransformSpec(dx=dx, dy=dy, flip=flip, scale=scale_grid[scale_idx])
        frames.append(Tensor(warp(base_img, spec)))
        masks.append(Tensor(warp(base_mask, spec)))
        transforms.append(spec)
    tube = MaskTube(frames=tuple(frames), masks=tuple(masks), transforms=tuple(transforms),
                    class_id=ep.class_id, seed=int(seed))
    tube.validate(strict_warp=True)
    return tube


def propagate_first_frame(tube: MaskTube, support_img: Tensor, support_mask: Tensor,
                          params: ModelParams, cfg: PipelineConfig,
                          encoder: StubEncoder) -> MaskTube:
    """Freeze the labeled prompts on frame 0, then decode every frame with them.

    A single-frame tube reduces exactly to image inference. Returns a tube
    with the source frames and transforms but predicted masks.
    """
    tube.validate()
    enc_s = encoder.encode(support_img)
    enc_first = encoder.encode(tube.frames[0])
    mask_feat = downsample_mask(support_mask, encoder.stride)
    prompts, _ = generate_prompts(enc_s, enc_first, mask_feat, params, cfg)
    dec_cfg = cfg.decoder_config()
    predicted = []
    for frame in tube.frames:
        enc_t = encoder.encode(frame)
        probs = decode(prompts.pos_labeled, prompts.neg_labeled, enc_t.sam, dec_cfg)
        predicted.append(binarize(upsample_map(probs, encoder.stride)))
    return MaskTube(frames=tube.frames, masks=tuple(predicted), transforms=tube.transforms,
                    class_id=tube.class_id, seed=tube.seed)


# On-disk tube layout: frames/frame_%04d.dcst, masks/mask_%04d.dcst, meta.txt.

_META_INT = re.compile(r"^(\w+)\s*=\s*(-?\d+)$")
_META_TRANSFORM = re.compile(
    r"^(\d+)\s+(-?\d+)\s+(-?\d+)\s+([01])\s+(-?\d+(?:\.\d+)?)$")


def save_tube(directory: str | Path, tube: MaskTube) -> None:
    tube.validate()
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for t, (frame, mask) in enumerate(zip(tube.frames, tube.masks)):
        dcst.write_tensor(directory / "frames" / f"frame_{t:04d}.dcst", frame)
        dcst.write_tensor(directory / "masks" / f"mask_{t:04d}.dcst", mask)
    lines = [f"class_id = {tube.class_id}", f"seed = {tube.seed}", f"frames = {len(tube)}"]
    for t, spec in enumerate(tube.transforms):
        lines.append(f"{t} {spec.dx} {spec.dy} {int(spec.flip)} {spec.scale!r}")
    atomic_write_text(directory / "meta.txt", "\n".join(lines) + "\n")


def load_tube(directory: str | Path) -> MaskTube:
    directory = Path(directory)
    meta_path = directory / "meta.txt"
    try:
        lines = [ln.strip() for ln in meta_path.read_text().splitlines() if ln.strip()]
    except OSError as err:
        raise IoError(f"cannot read {meta_path}: {err}") from err
    fields: dict[str, int] = {}
    transforms: dict[int, TransformSpec] = {}
    for line in lines:
        m = _META_INT.match(line)
        if m:
            fields[m.group(1)] = int(m.group(2))
            continue
        m = _META_TRANSFORM.match(line)
        if m:
            transforms[int(m.group(1))] = TransformSpec(
                dx=int(m.group(2)), dy=int(m.group(3)),
                flip=bool(int(m.group(4))), scale=float(m.group(5)))
            continue
        raise IoError(f"{meta_path}: malformed line {line!r}")
    for key in ("class_id", "seed", "frames"):
        if key not in fields:
            raise IoError(f"{meta_path}: missing key {key!r}")
    count = fields["frames"]
    if sorted(transforms) != list(range(count)):
        raise IoError(f"{meta_path}: transform log does not cover frames 0..{count - 1}")
    frames, masks = [], []
    for t in range(count):
        frames.append(dcst.read_tensor(directory / "frames" / f"frame_{t:04d}.dcst"))
        masks.append(dcst.read_tensor(directory / "masks" / f"mask_{t:04d}.dcst"))
    tube = MaskTube(frames=tuple(frames), masks=tuple(masks),
                    transforms=tuple(transforms[t] for t in range(count)),
                    class_id=fields["class_id"], seed=fields["seed"])
    tube.validate()
    return tube
