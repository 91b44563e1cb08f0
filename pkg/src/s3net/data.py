"""Scene indexing, any-to-any pair sampling and 8-channel input assembly.

Canonical dataset layout (flat or nested under ``root``)::

    Image{scene:03d}_{azimuth}_{temperature}.png   RGB rendering, azimuth 0-7
    Depth{scene:03d}.png                          8- or 16-bit grayscale depth

A scene's target for a guide is that same scene rendered under the guide's
(azimuth, temperature).
"""
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import IngestionError, SamplingError, ShapeError

AZIMUTHS = tuple(range(8))
TEMPERATURES = (2500, 3500, 4500, 5500, 6500)
ALL_SETTINGS = tuple((a, t) for t in TEMPERATURES for a in AZIMUTHS)

_IMAGE_RE = re.compile(r"^Image(\d+)_(\d+)_(\d+)\.png$")
_DEPTH_RE = re.compile(r"^Depth(\d+)\.png$")


class ImageReadError(IngestionError, OSError):
    pass


def parse_canonical(name):
    """Return ("image", scene, (azimuth, temp)), ("depth", scene, None) or None."""
    m = _IMAGE_RE.match(name)
    if m:
        scene, az, temp = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if az not in AZIMUTHS or temp not in TEMPERATURES:
            return None
        return "image", scene, (az, temp)
    m = _DEPTH_RE.match(name)
    if m:
        return "depth", int(m.group(1)), None
    return None


def image_name(scene, setting):
    return f"Image{scene:03d}_{setting[0]}_{setting[1]}.png"


def depth_name(scene):
    return f"Depth{scene:03d}.png"


@dataclass
class SceneIndex:
    scenes: dict = field(default_factory=dict)  # scene -> {(azimuth, temp): Path}
    depths: dict = field(default_factory=dict)  # scene -> Path
    missing: list = field(default_factory=list)  # [(scene, setting)] holes vs the union of settings
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return sum(len(s) for s in self.scenes.values())

    @property
    def scene_ids(self):
        return sorted(self.scenes)

    def settings(self, scene):
        return sorted(self.scenes[scene])

    def image_path(self, scene, setting):
        return self.scenes[scene][setting]

    def load(self, path, depth=False):
        key = (str(path), depth)
        if key not in self._cache:
            self._cache[key] = load_depth(path) if depth else load_image(path)
        return self._cache[key]

    def subset(self, scene_ids):
        scene_ids = set(scene_ids)
        return SceneIndex(
            scenes={s: dict(v) for s, v in self.scenes.items() if s in scene_ids},
            depths={s: p for s, p in self.depths.items() if s in scene_ids},
            missing=[m for m in self.missing if m[0] in scene_ids],
            _cache=self._cache,
        )


def scan_dataset(root, parser=parse_canonical):
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    index = SceneIndex()
    for path in sorted(root.rglob("*.png")):
        parsed = parser(path.name)
        if parsed is None:
            raise IngestionError(f"cannot parse dataset filename {path}")
        kind, scene, setting = parsed
        if kind == "depth":
            if scene in index.depths:
                raise IngestionError(f"duplicate depth map for scene {scene}: {path}")
            index.depths[scene] = path
        else:
            index.scenes.setdefault(scene, {})[setting] = path
    for scene in index.scenes:
        if scene not in index.depths:
            raise IngestionError(f"scene {scene} has no depth map ({depth_name(scene)})")
    expected = set().union(*index.scenes.values()) if index.scenes else set()
    index.missing = [
        (scene, setting)
        for scene in index.scene_ids
        for setting in sorted(expected - set(index.scenes[scene]))
    ]
    return index


@dataclass
class RelightSample:
    src_img: torch.Tensor
    src_depth: torch.Tensor
    guide_img: torch.Tensor
    guide_depth: torch.Tensor
    target_img: torch.Tensor
    src_scene: int = -1
    src_setting: tuple = ()
    guide_scene: int = -1
    guide_setting: tuple = ()
    target_path: Path = None


def make_sample(index, src_scene, src_setting, guide_scene, guide_setting):
    try:
        target_path = index.scenes[src_scene][guide_setting]
    except KeyError:
        raise SamplingError(
            f"scene {src_scene} has no rendering under guide setting {guide_setting}"
        ) from None
    return RelightSample(
        src_img=index.load(index.scenes[src_scene][src_setting]),
        src_depth=index.load(index.depths[src_scene], depth=True),
        guide_img=index.load(index.scenes[guide_scene][guide_setting]),
        guide_depth=index.load(index.depths[guide_scene], depth=True),
        target_img=index.load(target_path),
        src_scene=src_scene,
        src_setting=src_setting,
        guide_scene=guide_scene,
        guide_setting=guide_setting,
        target_path=target_path,
    )


def draw_pair(index, rng):
    """Draw (src_scene, src_setting, guide_scene, guide_setting) uniformly and independently."""
    if not index.scenes:
        raise SamplingError("cannot sample from an empty index")
    ids = index.scene_ids
    src = ids[rng.integers(len(ids))]
    src_settings = index.settings(src)
    src_setting = src_settings[rng.integers(len(src_settings))]
    guide = ids[rng.integers(len(ids))]
    guide_settings = index.settings(guide)
    guide_setting = guide_settings[rng.integers(len(guide_settings))]
    return src, src_setting, guide, guide_setting


def sample_pair(index, rng):
    return make_sample(index, *draw_pair(index, rng))


def assemble_input(s):
    """Stack to 8 channels: [src RGB, src depth, guide RGB, guide depth]."""
    parts = [s.src_img, s.src_depth, s.guide_img, s.guide_depth]
    expected = (3, 1, 3, 1)
    for t, c in zip(parts, expected):
        if t.dim() != 3 or t.shape[0] != c:
            raise ShapeError(f"expected a {c}xHxW tensor, got {tuple(t.shape)}")
    sizes = {tuple(t.shape[-2:]) for t in parts + [s.target_img]}
    if len(sizes) != 1:
        raise ShapeError(f"sample tensors disagree on spatial size: {sorted(sizes)}")
    return torch.cat(parts, dim=0)


def disassemble_input(x):
    """Inverse of assemble_input: (src_img, src_depth, guide_img, guide_depth)."""
    if x.shape[-3] != 8:
        raise ShapeError(f"expected 8 channels, got {x.shape[-3]}")
    return x[..., 0:3, :, :], x[..., 3:4, :, :], x[..., 4:7, :, :], x[..., 7:8, :, :]


def collate(samples):
    inputs = torch.stack([assemble_input(s) for s in samples])
    targets = torch.stack([s.target_img for s in samples])
    return inputs, targets


def _open(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from e
    return img


def load_image(path, dtype=torch.float32):
    img = _open(path)
    if img.mode != "RGB":
        raise ImageReadError(f"{path}: expected an RGB image, found mode {img.mode}")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).to(dtype).contiguous()


def load_depth(path):
    img = _open(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float32) / 255.0
    elif img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img).astype(np.float32) / 65535.0
    else:
        raise ImageReadError(f"{path}: expected single-channel depth, found mode {img.mode}")
    return torch.from_numpy(np.clip(arr, 0.0, 1.0))[None].contiguous()


def to_uint8(t):
    arr = t.detach().cpu().clamp(0, 1).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(t, path):
    """Write a 3xHxW (or 1xHxW) [0,1] tensor as an 8-bit PNG."""
    arr = to_uint8(t)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path)


def save_depth(t, path):
    arr = np.round(t.detach().cpu().clamp(0, 1).numpy()[0] * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)
