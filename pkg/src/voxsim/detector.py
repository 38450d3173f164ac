"""Object detection and instance masks on scene grids.

A strided 3-d conv trunk reduces the 32-cube scene grid to a 16-cube
anchor map (one anchor per 2x2x2 voxel block).  Per-anchor linear heads
predict objectness, a sub-anchor centroid offset, and the object size
scalar.  Detections above the objectness threshold are decoded to world
coordinates and pruned by centroid non-max suppression.

Instance shape comes from a separate mask head run on a 16-cube crop of
the scene grid centered on each detected centroid.  Crops sit on
half-integer offsets from the centroid so the object center falls
between the middle cells, symmetric by construction.

Ground truth for training is analytic: body centroids, sizes, and
voxel masks rasterized from the true shapes.
"""

from __future__ import annotations

import numpy as np

from voxsim import tensor as T
from voxsim.errors import ConfigError, ShapeError
from voxsim.lift import GRID_CHANNELS
from voxsim.sim.bodies import contains_points

OBJECTNESS_THRESHOLD = 0.9
NMS_RADIUS = 0.12
CROP_SIZE = 16
ANCHOR_STRIDE = 2
SIZE_CLIP = (0.02, 0.20)
IGNORE_RADIUS_ANCHORS = 1.5  # anchors this close to a centroid are not negatives


def anchor_centers(spec):
    """World centers of the anchor grid, [A, A, A, 3] with A = dims/2.

    Anchor (i,j,k) covers the 2-cube of voxels starting at 2i; its
    center sits between them, at voxel coordinate 2i + 0.5.
    """
    dims = np.asarray(spec.dims)
    if np.any(dims % ANCHOR_STRIDE):
        raise ConfigError("grid dims must be divisible by the anchor stride")
    a = dims // ANCHOR_STRIDE
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in a], indexing="ij"), axis=-1)
    return spec.voxel_to_world(idx * ANCHOR_STRIDE + 0.5)


def anchor_size(spec):
    return ANCHOR_STRIDE * spec.voxel


class Detector:
    """Trunk + heads for detection, and the crop mask head."""

    TRUNK_WIDTH = 16
    MASK_WIDTHS = (GRID_CHANNELS, 8, 8, 1)

    def __init__(self, params, prefix="det", rng=None):
        self.prefix = prefix
        self.params = params
        shapes = {
            "trunk0.k": (self.TRUNK_WIDTH, GRID_CHANNELS, 3, 3, 3),
            "trunk1.k": (self.TRUNK_WIDTH, self.TRUNK_WIDTH, 3, 3, 3),
            "obj.k": (1, self.TRUNK_WIDTH, 1, 1, 1),
            "off.k": (3, self.TRUNK_WIDTH, 1, 1, 1),
            "size.k": (1, self.TRUNK_WIDTH, 1, 1, 1),
            "mask0.k": (self.MASK_WIDTHS[1], self.MASK_WIDTHS[0], 3, 3, 3),
            "mask1.k": (self.MASK_WIDTHS[2], self.MASK_WIDTHS[1], 3, 3, 3),
            "mask2.k": (self.MASK_WIDTHS[3], self.MASK_WIDTHS[2], 3, 3, 3),
        }
        for short, shape in shapes.items():
            name = f"{prefix}.{short}"
            if name not in params:
                if rng is None:
                    raise ConfigError(f"missing parameter {name} and no rng to init")
                params.xavier(name, shape, rng)
            # biases let logits move where the input grid is all zero
            bias = f"{prefix}.{short[:-2]}.b"
            if bias not in params:
                params.zeros(bias, (shape[0],))

    def param_names(self):
        return [n for n in self.params.names() if n.startswith(self.prefix + ".")]

    def _p(self, short):
        return self.params[f"{self.prefix}.{short}"]

    def _conv(self, x, name, stride, padding):
        out = T.conv3d(x, self._p(name + ".k"), stride, padding)
        b = self._p(name + ".b")
        return T.add(out, T.reshape(b, (b.shape[0], 1, 1, 1)))

    def trunk(self, grid):
        """Scene grid [8,32,...] or batched -> anchor features."""
        x = grid if isinstance(grid, T.Tensor) else T.Tensor(grid)
        x = T.leaky_relu(self._conv(x, "trunk0", 2, 1))
        return T.leaky_relu(self._conv(x, "trunk1", 1, 1))

    def heads(self, feats):
        """Anchor features -> (objectness logits, offsets, sizes)."""
        return (self._conv(feats, "obj", 1, 0),
                self._conv(feats, "off", 1, 0),
                self._conv(feats, "size", 1, 0))

    def forward(self, grid):
        return self.heads(self.trunk(grid))

    def mask_logits(self, crop):
        """Scene-grid crop [8,16,16,16] (or batched) -> mask logits."""
        x = crop if isinstance(crop, T.Tensor) else T.Tensor(crop)
        x = T.leaky_relu(self._conv(x, "mask0", 1, 1))
        x = T.leaky_relu(self._conv(x, "mask1", 1, 1))
        return self._conv(x, "mask2", 1, 1)

    def detect(self, grid, spec, threshold=OBJECTNESS_THRESHOLD,
               nms_radius=NMS_RADIUS):
        """Decode one scene grid -> dict of detection arrays.

        Returns {"centroids": [K,3], "sizes": [K], "scores": [K]} sorted
        by descending score after non-max suppression.
        """
        obj, off, size = self.forward(grid)
        scores = _sigmoid_np(obj.data[0])
        centers = anchor_centers(spec)
        cell = anchor_size(spec)
        keep = scores >= threshold
        if not np.any(keep):
            return {"centroids": np.zeros((0, 3)), "sizes": np.zeros(0),
                    "scores": np.zeros(0)}
        cands = centers[keep] + off.data[:, keep].T * cell
        csize = np.clip(size.data[0][keep], *SIZE_CLIP)
        cscore = scores[keep]
        order = np.argsort(-cscore, kind="stable")
        picked = []
        for i in order:
            if all(np.linalg.norm(cands[i] - cands[j]) >= nms_radius for j in picked):
                picked.append(i)
        picked = np.array(picked, dtype=int)
        return {"centroids": cands[picked], "sizes": csize[picked],
                "scores": cscore[picked]}


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gt_detections(bodies):
    """Analytic detection ground truth: centroids [N,3] and sizes [N]."""
    if len(bodies) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    return (np.stack([b.pos for b in bodies]),
            np.array([b.size for b in bodies]))


def detection_targets(bodies, spec):
    """Training targets on the anchor grid.

    Returns (obj_target [A,A,A], weights [A,A,A], offset_target
    [3,A,A,A], size_target [A,A,A], positive_mask [A,A,A]).  The anchor
    nearest each body centroid is the one positive for it; anchors
    within the ignore band of a centroid get zero loss weight; the
    positive class is upweighted to balance the overwhelming negatives.
    """
    centers = anchor_centers(spec)
    a = centers.shape[0]
    cell = anchor_size(spec)
    obj = np.zeros((a, a, a), dtype=np.float64)
    weights = np.ones((a, a, a), dtype=np.float64)
    offsets = np.zeros((3, a, a, a), dtype=np.float64)
    sizes = np.zeros((a, a, a), dtype=np.float64)
    pos = np.zeros((a, a, a), dtype=bool)
    centroids, body_sizes = gt_detections(bodies)
    for c, s in zip(centroids, body_sizes):
        dist = np.linalg.norm(centers - c, axis=-1)
        near = np.unravel_index(np.argmin(dist), dist.shape)
        obj[near] = 1.0
        pos[near] = True
        offsets[:, near[0], near[1], near[2]] = (c - centers[near]) / cell
        sizes[near] = s
        weights[dist <= IGNORE_RADIUS_ANCHORS * cell] = 0.0
    n_pos = int(pos.sum())
    if n_pos:
        n_neg = int(((weights > 0) & ~pos).sum())
        weights[pos] = max(n_neg / n_pos, 1.0)
    return obj, weights, offsets, sizes, pos


def crop_coords(centroid_world, spec, size=CROP_SIZE):
    """Voxel coords [size^3, 3] of a crop centered on a world point.

    Cells sit at half-integer offsets (i - size/2 + 0.5) from the
    centroid's continuous voxel position, so the centroid lies exactly
    between the two middle cells on each axis.
    """
    cv = spec.world_to_voxel(np.asarray(centroid_world, dtype=np.float64))
    line = np.arange(size) - (size - 1) / 2.0
    ii, jj, kk = np.meshgrid(line, line, line, indexing="ij")
    pts = np.stack([ii, jj, kk], axis=-1) + cv
    return pts.reshape(-1, 3)


def crop_object(grid, centroid_world, spec, size=CROP_SIZE):
    """Trilinear crop of the scene grid around a centroid.

    Differentiable in the grid; the crop location is a constant.
    Returns [C, size, size, size].
    """
    coords = crop_coords(centroid_world, spec, size)
    samples = T.grid_sample3d(grid, coords)
    c = samples.shape[1]
    cube = T.reshape(samples, (size, size, size, c))
    return T.transpose(cube, (3, 0, 1, 2))


def crop_world_centers(centroid_world, spec, size=CROP_SIZE):
    """World positions of the crop cells, [size, size, size, 3]."""
    coords = crop_coords(centroid_world, spec, size)
    return spec.voxel_to_world(coords).reshape(size, size, size, 3)


def rasterize_mask(body, centroid_world, spec, size=CROP_SIZE):
    """Analytic occupancy of a body over a crop's cells, float 0/1."""
    centers = crop_world_centers(centroid_world, spec, size)
    return contains_points(body, centers).astype(np.float64)


def detection_loss(det, grid, bodies, spec):
    """Full detection loss for one scene.

    Weighted BCE on objectness over all anchors, MSE on centroid
    offsets and sizes at positive anchors only, and BCE on the crop
    mask for every body against its rasterized shape.
    """
    obj, off, size = det.forward(grid)
    obj_t, w, off_t, size_t, pos = detection_targets(bodies, spec)
    loss = T.bce_with_logits(T.reshape(obj, obj_t.shape), obj_t, weights=w)
    if np.any(pos):
        pw = pos.astype(np.float64)
        scale = 1.0 / pw.sum()
        off_err = T.sub(off, off_t)
        loss = T.add(loss, T.mul(T.sum_(T.mul(T.mul(off_err, off_err), pw * scale)), 1.0 / 3.0))
        size_err = T.sub(T.reshape(size, size_t.shape), size_t)
        loss = T.add(loss, T.sum_(T.mul(T.mul(size_err, size_err), pw * scale)))
    for body in bodies:
        crop = crop_object(grid, body.pos, spec)
        target = rasterize_mask(body, body.pos, spec)
        logits = T.reshape(det.mask_logits(crop), target.shape)
        loss = T.add(loss, T.bce_with_logits(logits, target))
    return loss


def predict_mask(det, grid, centroid_world, spec, threshold=0.5):
    """Binary crop mask [size^3 cube] for a detection, no gradients."""
    crop = crop_object(grid, centroid_world, spec)
    logits = det.mask_logits(crop)
    return _sigmoid_np(logits.data[0]) >= threshold


def mask_volume(mask, spec):
    """Volume in cubic meters of a binary crop mask."""
    return float(np.sum(mask)) * spec.voxel ** 3


def match_detections(pred_centroids, gt_centroids, tol=0.03):
    """Greedy nearest matching -> (pairs, unmatched_pred, unmatched_gt).

    pairs is a list of (pred_index, gt_index, distance).
    """
    pred = np.asarray(pred_centroids, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_centroids, dtype=np.float64).reshape(-1, 3)
    free_p = set(range(len(pred)))
    free_g = set(range(len(gt)))
    pairs = []
    if len(pred) and len(gt):
        d = np.linalg.norm(pred[:, None] - gt[None, :], axis=-1)
        order = np.dstack(np.unravel_index(np.argsort(d, axis=None), d.shape))[0]
        for pi, gi in order:
            if pi in free_p and gi in free_g and d[pi, gi] <= tol:
                pairs.append((int(pi), int(gi), float(d[pi, gi])))
                free_p.discard(int(pi))
                free_g.discard(int(gi))
    return pairs, sorted(free_p), sorted(free_g)
