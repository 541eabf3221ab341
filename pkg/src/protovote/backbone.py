"""Point feature extraction: farthest point sampling, radius grouping,
stacked set-abstraction layers and feature-propagation upsampling.

Grouped neighbor coordinates are expressed relative to their center before
the shared per-point transform, which makes seed features exactly
translation invariant. All tie rules (FPS maximin, neighbor truncation)
are deterministic so permutation invariants hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import MLP
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def fps(points: np.ndarray, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy maximin subsampling: each new index maximizes its distance to
    the already-selected set, ties broken by lowest index."""
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"fps: m={m} outside [1, {n}]")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = start_index
    min_d2 = np.sum((points - points[start_index]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # first occurrence on ties
        chosen[i] = nxt
        d2 = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def radius_group(centers: np.ndarray, points: np.ndarray, radius: float,
                 cap: int) -> list[np.ndarray]:
    """Per-center neighbor indices within ``radius``, truncated to ``cap``
    by ascending distance then ascending index. Empty lists are allowed."""
    if radius <= 0 or cap < 1:
        raise ValueError(f"radius_group: radius={radius}, cap={cap}")
    d2 = np.sum((centers[:, None, :] - points[None, :, :]) ** 2, axis=2)
    r2 = radius * radius
    out = []
    for row in d2:
        idx = np.nonzero(row <= r2 + 1e-12)[0]
        order = np.lexsort((idx, row[idx]))  # distance, then index
        out.append(idx[order][:cap].astype(np.intp))
    return out


@dataclass
class SALayerConfig:
    sample_count: int
    radius: float
    neighbor_cap: int
    widths: list[int]  # shared-transform channel widths (output last)


@dataclass
class BackboneConfig:
    sa_layers: list[SALayerConfig] = field(default_factory=lambda: [
        SALayerConfig(1024, 0.2, 32, [32, 32]),
        SALayerConfig(512, 0.4, 32, [32, 64]),
        SALayerConfig(256, 0.8, 16, [64, 64]),
        SALayerConfig(128, 1.2, 16, [64, 128]),
    ])
    fp_targets: list[int] = field(default_factory=lambda: [256])
    fp_widths: list[int] = field(default_factory=lambda: [64])
    randomized_fps_start: bool = False

    @property
    def feature_dim(self) -> int:
        return self.fp_widths[-1]

    def validate(self):
        counts = [sa.sample_count for sa in self.sa_layers]
        radii = [sa.radius for sa in self.sa_layers]
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"sample counts must strictly decrease: {counts}")
        if any(a >= b for a, b in zip(radii, radii[1:])):
            raise ConfigError(f"radii must strictly increase: {radii}")
        if len(self.fp_targets) != len(self.fp_widths):
            raise ConfigError("fp_targets and fp_widths lengths differ")
        for t in self.fp_targets:
            if t not in counts:
                raise ConfigError(f"fp target {t} is not an abstraction level {counts}")


def tiny_backbone_config(n_points: int = 64) -> BackboneConfig:
    """A backbone small enough for finite-difference checks on toy scenes."""
    return BackboneConfig(
        sa_layers=[SALayerConfig(max(8, n_points // 4), 1.0, 8, [8, 8]),
                   SALayerConfig(max(4, n_points // 8), 2.0, 8, [8, 16])],
        fp_targets=[max(8, n_points // 4)],
        fp_widths=[16],
    )


@dataclass
class SeedSet:
    positions: np.ndarray    # (M, 3)
    features: Tensor         # (M, d)
    origin_indices: np.ndarray  # (M,) indices into the backbone input


class Backbone:
    """h1: point cloud -> seed positions and features."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.sa_mlps = []
        in_ch = 3  # relative coordinates only; geometry-only inputs
        for i, sa in enumerate(config.sa_layers):
            self.sa_mlps.append(MLP([in_ch] + sa.widths, rng, name=f"sa{i}"))
            in_ch = sa.widths[-1] + 3
        self.fp_mlps = []
        counts = [sa.sample_count for sa in config.sa_layers]
        chans = {c: sa.widths[-1] for c, sa in zip(counts, config.sa_layers)}
        src_ch = config.sa_layers[-1].widths[-1]
        for i, (tgt, width) in enumerate(zip(config.fp_targets, config.fp_widths)):
            skip_ch = chans[tgt]
            self.fp_mlps.append(MLP([src_ch + skip_ch, width], rng, name=f"fp{i}"))
            src_ch = width

    def params(self) -> list[Tensor]:
        return [p for m in self.sa_mlps + self.fp_mlps for p in m.params()]

    def extract(self, points: np.ndarray, fps_start: int = 0) -> SeedSet:
        """Run all abstraction and propagation layers on an (N, 3) scene."""
        cfg = self.config
        n = len(points)
        deepest = cfg.sa_layers[-1].sample_count
        if n < cfg.sa_layers[0].sample_count or n < deepest:
            raise ConfigError(f"scene has {n} points, backbone needs "
                              f">= {cfg.sa_layers[0].sample_count}")

        # canonicalize point order so the result is exactly permutation
        # invariant; origin indices map back to the caller's ordering
        canon = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
        # center on the lexicographically smallest point so distance
        # computations (and hence FPS/grouping selections) are stable
        # under scene translation
        ref = points[canon[0]].copy()
        pos = points[canon] - ref
        origin = canon.astype(np.intp)
        feats: Tensor | None = None
        levels = []  # (positions, features, origin) per SA layer
        for sa, mlp in zip(cfg.sa_layers, self.sa_mlps):
            sel = fps(pos, sa.sample_count, start_index=fps_start % len(pos))
            centers = pos[sel]
            groups = radius_group(centers, pos, sa.radius, sa.neighbor_cap)
            m = len(centers)
            cap = max(1, max(len(g) for g in groups))
            idx = np.zeros((m, cap), dtype=np.intp)
            mask = np.zeros((m, cap), dtype=bool)
            for gi, (g, ci) in enumerate(zip(groups, sel)):
                if len(g) == 0:
                    g = np.array([ci], dtype=np.intp)  # center always in range
                idx[gi, :len(g)] = g
                mask[gi, :len(g)] = True
            rel = pos[idx] - centers[:, None, :]          # (m, cap, 3)
            rel_t = Tensor(rel.reshape(m * cap, 3))
            if feats is None:
                grouped = rel_t
            else:
                neigh = T.gather_rows(feats, idx.reshape(-1))  # (m*cap, c)
                grouped = T.concat([rel_t, neigh], axis=1)
            h = T.relu(mlp(grouped))
            h3 = T.reshape(h, (m, cap, h.shape[1]))
            pooled = T.masked_max(h3, mask)              # (m, c_out)
            pos, feats, origin = centers, pooled, origin[sel]
            levels.append((pos, feats, origin))

        counts = [sa.sample_count for sa in cfg.sa_layers]
        for tgt, mlp in zip(cfg.fp_targets, self.fp_mlps):
            li = counts.index(tgt)
            tgt_pos, tgt_feats, tgt_origin = levels[li]
            interp = self._interpolate(pos, feats, tgt_pos)
            merged = T.concat([interp, tgt_feats], axis=1)
            feats = T.relu(mlp(merged))
            pos, origin = tgt_pos, tgt_origin
        return SeedSet(pos + ref, feats, origin)

    @staticmethod
    def _interpolate(src_pos: np.ndarray, src_feats: Tensor,
                     tgt_pos: np.ndarray) -> Tensor:
        """Inverse-distance-weighted 3-NN interpolation (weights sum to 1)."""
        k = min(3, len(src_pos))
        d2 = np.sum((tgt_pos[:, None, :] - src_pos[None, :, :]) ** 2, axis=2)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        nd2 = np.take_along_axis(d2, nn, axis=1)
        w = 1.0 / (nd2 + 1e-8)
        w /= w.sum(axis=1, keepdims=True)
        gathered = T.gather_rows(src_feats, nn)          # (t, k, c)
        return T.sum_(T.mul(gathered, Tensor(w[:, :, None])), axis=1)
