"""Saliency-guided multiple-instance image classifier.

A small convolutional backbone maps the full image to per-window saliency
maps.  The classifier head pools the top fraction of each map; a retrieval
step picks the most salient image windows, a second tiny network embeds the
cropped patches, and a gated-attention layer aggregates them.  A fusion head
combines the global descriptor with the attention vector.

The same network with a 9-channel head (8 grid intervals plus a beyond-grid
channel) serves as the deterioration-risk-curve model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from . import imaging


@dataclass(frozen=True)
class GmicConfig:
    input_side: int = 64
    saliency_side: int = 8
    num_windows: int = 4
    stage_channels: tuple = (8, 16, 32, 64)
    crop_side: int = 16
    patch_side: int = 14
    num_patches: int = 6
    pool_fraction: float = 0.5
    sparsity_weight: float = 1e-4
    local_stage_channels: tuple = (8, 16, 32)
    local_pool_stages: int = 1
    attention_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        h, s = self.input_side, self.saliency_side
        if h < s or h % s:
            raise ValueError(f"input side {h} must be a multiple of saliency side {s}")
        ratio = h // s
        if ratio & (ratio - 1):
            raise ValueError(f"input/saliency ratio {ratio} must be a power of two")
        if self.pool_stage_count > len(self.stage_channels):
            raise ValueError(f"need {self.pool_stage_count} pooled stages, have {len(self.stage_channels)}")
        if self.crop_side > h:
            raise ValueError(f"crop side {self.crop_side} exceeds image side {h}")
        if (self.crop_side * s) % h:
            raise ValueError(f"crop side {self.crop_side} is not a whole number of saliency cells")
        if self.window_cells < 1:
            raise ValueError(f"crop side {self.crop_side} spans no saliency cell")
        # Greedy retrieval at arbitrary positions can fragment the grid; each
        # pick invalidates at most (2*wc - 1)^2 positions, so this many picks
        # always succeed regardless of the saliency landscape.
        npos = s - self.window_cells + 1
        capacity = math.ceil(npos * npos / (2 * self.window_cells - 1) ** 2)
        if self.num_patches < 1 or self.num_patches > capacity:
            raise ValueError(f"num_patches {self.num_patches} outside 1..{capacity} guaranteed windows")
        if not 0.0 < self.pool_fraction <= 1.0:
            raise ValueError(f"pool_fraction {self.pool_fraction} outside (0, 1]")
        if self.sparsity_weight < 0.0:
            raise ValueError("sparsity_weight must be >= 0")
        if self.num_windows < 1:
            raise ValueError("num_windows must be >= 1")
        if self.local_pool_stages > len(self.local_stage_channels):
            raise ValueError("more local pool stages than local stages")
        if self.patch_side % (1 << self.local_pool_stages):
            raise ValueError(f"patch side {self.patch_side} not divisible by local pooling factor")

    @property
    def pool_stage_count(self):
        return int(math.log2(self.input_side // self.saliency_side))

    @property
    def window_cells(self):
        return self.crop_side * self.saliency_side // self.input_side

    @property
    def feature_channels(self):
        return self.stage_channels[-1]

    @property
    def local_feature_dim(self):
        return self.local_stage_channels[-1]

    @property
    def top_k(self):
        return math.ceil(self.pool_fraction * self.saliency_side * self.saliency_side)


@dataclass
class RoiSet:
    """Retrieved windows: image-space top-left corners, resized patches, and
    (once attention has run) the attention weights."""

    positions: np.ndarray  # (K, 2) int, (row, col)
    patches: np.ndarray    # (K, patch_side, patch_side)
    alphas: np.ndarray | None = None


@dataclass
class GmicOutputs:
    y_global: ad.Tensor     # (N, T) probabilities
    y_local: ad.Tensor      # (N, T)
    y_fusion: ad.Tensor     # (N, T)
    saliency: ad.Tensor     # (N, T, h, w) in [0, 1]
    rois: list              # N RoiSets
    attention: ad.Tensor    # (N, K)


def aggregate_topr(saliency_map, pool_fraction):
    """Mean of the ceil(r * h * w) largest saliency entries."""
    a = np.asarray(saliency_map, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"aggregate_topr: expected a 2-d map, got shape {a.shape}")
    if not 0.0 < pool_fraction <= 1.0:
        raise ValueError(f"aggregate_topr: pool fraction {pool_fraction} outside (0, 1]")
    k = math.ceil(pool_fraction * a.size)
    flat = a.reshape(-1)
    # mean over the k largest in descending order: summation order is then
    # canonical, so any independent sort-based recomputation agrees exactly
    top = np.sort(np.partition(flat, a.size - k)[a.size - k:])[::-1]
    return float(top.mean())


def _normalize_map(a):
    lo, hi = a.min(), a.max()
    if hi > lo:
        return (a - lo) / (hi - lo)
    return np.zeros_like(a)


def retrieve_rois(saliency, image, cfg):
    """Greedy retrieval of the most salient windows.

    Each per-window map is min-max normalized and summed into one criterion
    map.  K times: among window positions whose cells are all unclaimed,
    take the one with the largest cell sum (ties: smallest (row, col)),
    claim its cells.  Claimed footprints are pairwise disjoint by
    construction.  Patches are cropped from the image at crop_side and
    bilinearly resized to patch_side.
    """
    sal = np.asarray(saliency, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    s = cfg.saliency_side
    if sal.ndim != 3 or sal.shape[1:] != (s, s):
        raise ValueError(f"retrieve_rois: saliency shape {sal.shape}, expected (T, {s}, {s})")
    if img.shape != (cfg.input_side, cfg.input_side):
        raise ValueError(f"retrieve_rois: image shape {img.shape}, expected {(cfg.input_side,) * 2}")
    criterion = np.zeros((s, s))
    for t in range(sal.shape[0]):
        criterion += _normalize_map(sal[t])
    wc = cfg.window_cells
    scale = cfg.input_side // s
    claimed = np.zeros((s, s), dtype=bool)
    npos = s - wc + 1
    window_sums = sliding_window_view(criterion, (wc, wc)).sum(axis=(2, 3))
    positions = []
    patches = []
    for _ in range(cfg.num_patches):
        free = ~sliding_window_view(claimed, (wc, wc)).any(axis=(2, 3))
        if not free.any():
            raise RuntimeError(f"retrieve_rois: no disjoint window left after {len(positions)} picks")
        masked = np.where(free, window_sums, -np.inf)
        i, j = divmod(int(masked.argmax()), npos)  # first max = smallest (row, col)
        claimed[i:i + wc, j:j + wc] = True
        r, c = i * scale, j * scale
        positions.append((r, c))
        crop = img[r:r + cfg.crop_side, c:c + cfg.crop_side]
        patches.append(imaging.bilinear_resize(crop, cfg.patch_side, cfg.patch_side))
    return RoiSet(positions=np.array(positions, dtype=int), patches=np.stack(patches))


def _init_conv(rng, out_ch, in_ch, k=3):
    fan_in = in_ch * k * k
    return (ad.Tensor(ad.uniform_init(rng, (out_ch, in_ch, k, k), fan_in), requires_grad=True),
            ad.Tensor(ad.uniform_init(rng, (out_ch,), fan_in), requires_grad=True))


def _init_affine(rng, out_dim, in_dim, bias=True):
    w = ad.Tensor(ad.uniform_init(rng, (out_dim, in_dim), in_dim), requires_grad=True)
    if not bias:
        return w
    return w, ad.Tensor(ad.uniform_init(rng, (out_dim,), in_dim), requires_grad=True)


class GmicModel:
    """Parameter container plus the forward pass.

    `num_windows` in the config decides the flavor: 4 for the horizon
    classifier, 9 for the risk-curve head.
    """

    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(cfg)

    @staticmethod
    def _init_params(cfg):
        rng = np.random.default_rng((cfg.seed, 0xD1))
        params = {}
        in_ch = 1
        for i, out_ch in enumerate(cfg.stage_channels):
            w, b = _init_conv(rng, out_ch, in_ch)
            params[f"global.stage{i}.w"] = w
            params[f"global.stage{i}.b"] = b
            in_ch = out_ch
        n = cfg.feature_channels
        w, b = _init_conv(rng, cfg.num_windows, n, k=1)
        params["saliency.w"], params["saliency.b"] = w, b
        in_ch = 1
        for i, out_ch in enumerate(cfg.local_stage_channels):
            w, b = _init_conv(rng, out_ch, in_ch)
            params[f"local.stage{i}.w"] = w
            params[f"local.stage{i}.b"] = b
            in_ch = out_ch
        d, a = cfg.local_feature_dim, cfg.attention_dim
        params["attention.pre"] = _init_affine(rng, a, d, bias=False)
        params["attention.gate"] = _init_affine(rng, a, d, bias=False)
        params["attention.score"] = _init_affine(rng, 1, a, bias=False)
        w, b = _init_affine(rng, cfg.num_windows, d)
        params["local_head.w"], params["local_head.b"] = w, b
        w, b = _init_affine(rng, cfg.num_windows, n + d)
        params["fusion.w"], params["fusion.b"] = w, b
        return params

    # ---- forward pieces ------------------------------------------------

    def global_forward(self, images):
        """Backbone + saliency maps + top-fraction pooled probabilities."""
        x = self._as_batch(images)
        h = ad.Tensor(x)
        for i in range(len(self.cfg.stage_channels)):
            h = ad.relu(ad.conv2d(h, self.params[f"global.stage{i}.w"],
                                  self.params[f"global.stage{i}.b"], padding=1))
            if i < self.cfg.pool_stage_count:
                h = ad.max_pool2(h)
        saliency = ad.sigmoid(ad.conv2d(h, self.params["saliency.w"], self.params["saliency.b"]))
        y_global = ad.topk_mean(saliency, self.cfg.top_k)
        return h, saliency, y_global

    def local_attention(self, patches):
        """Patch embeddings -> gated attention -> (z, alpha).

        patches: (N, K, p, p) array.  alpha rows sum to 1.
        """
        n, k, p, _ = patches.shape
        h = ad.Tensor(patches.reshape(n * k, 1, p, p))
        for i in range(len(self.cfg.local_stage_channels)):
            h = ad.relu(ad.conv2d(h, self.params[f"local.stage{i}.w"],
                                  self.params[f"local.stage{i}.b"], padding=1))
            if i < self.cfg.local_pool_stages:
                h = ad.max_pool2(h)
        hvec = ad.global_max_pool(h)  # (N*K, d)
        pre = ad.tanh(ad.affine(hvec, self.params["attention.pre"]))
        gate = ad.sigmoid(ad.affine(hvec, self.params["attention.gate"]))
        scores = ad.affine(ad.mul(pre, gate), self.params["attention.score"])  # (N*K, 1)
        alpha = ad.softmax(ad.reshape(scores, (n, k)), axis=1)
        d = self.cfg.local_feature_dim
        weighted = ad.mul(ad.reshape(alpha, (n, k, 1)), ad.reshape(hvec, (n, k, d)))
        z = ad.sum_(weighted, axis=1)  # (N, d)
        return z, alpha

    def fusion_forward(self, h_global, z):
        g = ad.global_max_pool(h_global)  # (N, n)
        return ad.sigmoid(ad.affine(ad.concat([g, z], axis=1), self.params["fusion.w"], self.params["fusion.b"]))

    def forward(self, images):
        x = self._as_batch(images)
        h, saliency, y_global = self.global_forward(x)
        rois = [retrieve_rois(saliency.data[i], x[i, 0], self.cfg) for i in range(x.shape[0])]
        patches = np.stack([r.patches for r in rois])
        z, alpha = self.local_attention(patches)
        y_local = ad.sigmoid(ad.affine(z, self.params["local_head.w"], self.params["local_head.b"]))
        y_fusion = self.fusion_forward(h, z)
        for i, r in enumerate(rois):
            r.alphas = alpha.data[i].copy()
        return GmicOutputs(y_global=y_global, y_local=y_local, y_fusion=y_fusion,
                           saliency=saliency, rois=rois, attention=alpha)

    def predict(self, images):
        """Fusion-head probabilities as plain arrays, (N, T)."""
        return self.forward(images).y_fusion.data.copy()

    def _as_batch(self, images):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        side = self.cfg.input_side
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != side or x.shape[3] != side:
            raise ValueError(f"forward: expected (N, {side}, {side}) images, got {np.asarray(images).shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("forward: non-finite image input")
        return x

    # ---- persistence ---------------------------------------------------

    def save(self, path):
        ad.save_checkpoint(path, self.params)
        cfg = asdict(self.cfg)
        cfg["stage_channels"] = list(cfg["stage_channels"])
        cfg["local_stage_channels"] = list(cfg["local_stage_channels"])
        with open(str(path) + ".json", "w") as fh:
            json.dump(cfg, fh, indent=0, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(str(path) + ".json") as fh:
            raw = json.load(fh)
        raw["stage_channels"] = tuple(raw["stage_channels"])
        raw["local_stage_channels"] = tuple(raw["local_stage_channels"])
        cfg = GmicConfig(**raw)
        arrays = ad.load_checkpoint(path)
        params = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, params)


def gmic_loss(labels, outputs, sparsity_weight):
    """Mean over windows (and the batch) of the three head BCE terms plus
    the weighted saliency L1 norm."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.shape != outputs.y_global.data.shape:
        raise ValueError(f"gmic_loss: labels {y.shape} vs predictions {outputs.y_global.data.shape}")
    bces = ad.add(ad.add(ad.binary_cross_entropy(outputs.y_global, y),
                         ad.binary_cross_entropy(outputs.y_local, y)),
                  ad.binary_cross_entropy(outputs.y_fusion, y))
    n, t, hh, ww = outputs.saliency.data.shape
    sal_l1 = ad.sum_(ad.reshape(outputs.saliency, (n, t, hh * ww)), axis=2)
    return ad.mean(ad.add(bces, ad.mul(sal_l1, sparsity_weight)))


def drc_loss(labels, outputs, sparsity_weight):
    """Survival analogue: the three heads' negative log-likelihoods plus the
    weighted L1 of all saliency channels (beyond-grid channel included)."""
    from . import survival as sv

    terms = ad.add(ad.add(sv.nll_tensor(labels, outputs.y_global),
                          sv.nll_tensor(labels, outputs.y_local)),
                   sv.nll_tensor(labels, outputs.y_fusion))
    n, t, hh, ww = outputs.saliency.data.shape
    sal_l1 = ad.sum_(ad.reshape(outputs.saliency, (n, t * hh * ww)), axis=1)
    return ad.mean(ad.add(terms, ad.mul(sal_l1, sparsity_weight)))


def drc_config(**overrides):
    """Risk-curve flavor: 9 output channels and one extra (unpooled) conv
    stage over the classifier default."""
    from . import survival as sv

    base = dict(num_windows=sv.NUM_CHANNELS, stage_channels=(8, 16, 32, 64, 64))
    base.update(overrides)
    return GmicConfig(**base)


def export_saliency(out_dir, saliency, roi_set, window_labels):
    """One PGM per window (values scaled to [0, 65535]) plus roi.csv rows
    (window, rank, row, col, alpha).  ROI geometry is shared across windows
    because retrieval works on the combined map."""
    import os

    sal = np.asarray(saliency, dtype=np.float64)
    if sal.shape[0] != len(window_labels):
        raise ValueError(f"export_saliency: {sal.shape[0]} maps vs {len(window_labels)} labels")
    for t, label in enumerate(window_labels):
        scaled = np.rint(np.clip(sal[t], 0.0, 1.0) * imaging.PGM_MAXVAL).astype(np.uint16)
        imaging.write_pgm(os.path.join(out_dir, f"saliency_{label}.pgm"), scaled)
    alphas = roi_set.alphas if roi_set.alphas is not None else np.full(len(roi_set.positions), np.nan)
    with open(os.path.join(out_dir, "roi.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "rank", "row", "col", "alpha"])
        for label in window_labels:
            for rank, ((r, c), a) in enumerate(zip(roi_set.positions, alphas), start=1):
                w.writerow([label, rank, int(r), int(c), repr(float(a))])
