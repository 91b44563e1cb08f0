"""Tiny synthetic scene trees in the canonical dataset layout.

Each scene is a tilted background plane with a gradient albedo and one sphere.
Renderings use Lambertian shading under a light whose azimuth follows the
setting's azimuth label, a crude cast shadow, and a colour tint that cools
(blue/red ratio rises) with the temperature label.
"""
import math
from pathlib import Path

import numpy as np
import torch

from .data import AZIMUTHS, TEMPERATURES, depth_name, image_name, save_depth, save_image

ELEVATION = math.radians(35.0)


def fixture_settings(n):
    """First n settings; k -> (k mod 8, k mod 5) visits all 40 without repeats."""
    if not 1 <= n <= len(AZIMUTHS) * len(TEMPERATURES):
        raise ValueError(f"settings must be in 1..40, got {n}")
    return [(k % len(AZIMUTHS), TEMPERATURES[k % len(TEMPERATURES)]) for k in range(n)]


def tint(temperature):
    t = (temperature - TEMPERATURES[0]) / (TEMPERATURES[-1] - TEMPERATURES[0])
    return np.array([1.0 - 0.2 * t, 0.8 + 0.15 * t, 0.55 + 0.45 * t])


def light_direction(azimuth):
    theta = azimuth * math.pi / 4
    c = math.cos(ELEVATION)
    return np.array([c * math.cos(theta), c * math.sin(theta), math.sin(ELEVATION)])


class SceneGeometry:
    def __init__(self, scene, size, seed=0):
        rng = np.random.default_rng([seed, scene])
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
        self.size = size

        tilt = rng.uniform(0.2, 0.5)
        plane = 0.55 + tilt * (0.5 - ys) * 0.5
        self.cx, self.cy = rng.uniform(0.3, 0.7, size=2)
        self.r = rng.uniform(0.15, 0.28)
        d2 = (xs - self.cx) ** 2 + (ys - self.cy) ** 2
        self.inside = d2 < self.r ** 2
        z = np.sqrt(np.clip(self.r ** 2 - d2, 0.0, None))
        self.depth = np.clip(plane - 0.6 * z, 0.0, 1.0)

        n_plane = np.array([0.0, -tilt * 0.5, 1.0])
        n_plane /= np.linalg.norm(n_plane)
        normals = np.broadcast_to(n_plane, (size, size, 3)).copy()
        sphere_n = np.stack([(xs - self.cx), (ys - self.cy), z], axis=-1) / self.r
        normals[self.inside] = sphere_n[self.inside]
        self.normals = normals
        self.xs, self.ys = xs, ys

        c0, c1 = rng.uniform(0.35, 0.9, size=(2, 3))
        albedo = c0[None, None] * (1 - xs[..., None]) + c1[None, None] * xs[..., None]
        albedo[self.inside] = rng.uniform(0.4, 0.95, size=3)
        self.albedo = albedo

    def render(self, setting):
        azimuth, temperature = setting
        light = light_direction(azimuth)
        lambert = np.clip(self.normals @ light, 0.0, None)
        # sphere shadow projected onto the plane along the light direction
        shift = self.r * light[:2] / light[2]
        sd2 = (self.xs - (self.cx - shift[0])) ** 2 + (self.ys - (self.cy - shift[1])) ** 2
        shadow = (sd2 < self.r ** 2) & ~self.inside
        shading = 0.2 + 0.8 * lambert * np.where(shadow, 0.35, 1.0)
        rgb = self.albedo * shading[..., None] * tint(temperature)[None, None]
        return np.clip(rgb, 0.0, 1.0)


def make_fixtures(out_dir, scenes=2, settings=4, size=64, seed=0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for scene in range(scenes):
        geo = SceneGeometry(scene, size, seed)
        p = out / depth_name(scene)
        save_depth(torch.from_numpy(geo.depth[None]), p)
        written.append(p)
        for setting in fixture_settings(settings):
            p = out / image_name(scene, setting)
            rgb = torch.from_numpy(geo.render(setting).transpose(2, 0, 1).copy())
            save_image(rgb, p)
            written.append(p)
    return written
