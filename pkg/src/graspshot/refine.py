"""Per-detection feature refinement via guided backpropagation.

For one detection, a gradient of 1.0 is seeded on that anchor's
pre-softmax grasp logit and propagated back through the backbone with
the guided ReLU rule. The surviving gradient R at a conv layer marks
the activation cells that carried positive evidence for the detection.
Two artifacts come out of this:

* Relevance maps F = f * R (``guided_maps``): the forward activation f
  weighted by R. Their mass concentrates on the detected object, which
  is what the localization diagnostics measure.

* Classification features (``refine`` / ``extract_all``): f gated by
  the support of R (f where R > 0, zero elsewhere), cropped to a
  window centered on the detected object and flattened. Gating keeps
  the magnitudes of f, which carry the object's appearance; R's own
  magnitudes grade cells by how much they drove this one grasp score,
  which varies with pose and grip and would swamp the appearance
  signal. The window makes features of the same object comparable
  regardless of where in the scene it sat.

Detections mark a grasp point, which for asymmetric objects sits well
off the silhouette centroid, so the window is centered on the centroid
of the bright connected component nearest the detection
(``blob_centroid``) rather than on the detection itself.

Raw whole-scene activations (``raw_features``) stay available as the
no-refinement baseline the ablation compares against.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn
from .container import read_container, write_container
from .detector import Detection, DetectorNetwork, detect, iou_matrix
from .errors import ConfigurationError
from .scenes import grasp_aabb

# half-width, in image pixels, of the detection-centered feature window
WINDOW_HALF_PX = 16


@dataclass
class RefinedFeatureSet:
    detection: Detection
    per_layer: dict          # layer_id -> flat float64 vector, network order
    source_scene_id: int
    true_shape: str | None   # None when no label matched the detection


def guided_features(backbone: nn.LayerStack, trace, output_gradient):
    """Guided backward from ``output_gradient`` (shaped like the backbone
    output); returns {conv layer_id: flattened F} in network order."""
    refined, _ = backbone.guided_backward(trace, output_gradient)
    acts = trace.activations()
    out = {}
    for lid in backbone.conv_ids:
        post = acts[lid][1]
        out[lid] = (post * refined[lid]).ravel().copy()
    return out


def blob_centroid(image, cx, cy, threshold: float = 0.25, seek: int = 10):
    """Centroid of the bright connected component nearest (cx, cy).

    Seeds at the brightest-area pixel above ``threshold`` closest to the
    given point (searched within ``seek`` pixels), flood-fills the
    8-connected component, and returns its centroid as (cx, cy) floats.
    Falls back to the input point when nothing bright is nearby.
    """
    img = image[0] if image.ndim == 3 else image
    h, w = img.shape
    iy, ix = int(round(cy)), int(round(cx))
    y0, y1 = max(0, iy - seek), min(h, iy + seek + 1)
    x0, x1 = max(0, ix - seek), min(w, ix + seek + 1)
    ys, xs = np.nonzero(img[y0:y1, x0:x1] > threshold)
    if len(ys) == 0:
        return float(cx), float(cy)
    j = int(((ys + y0 - cy) ** 2 + (xs + x0 - cx) ** 2).argmin())
    sy, sx = int(ys[j] + y0), int(xs[j] + x0)
    mask = img > threshold
    seen = np.zeros_like(mask)
    seen[sy, sx] = True
    queue = deque([(sy, sx)])
    acc_y = acc_x = count = 0
    while queue:
        py, px = queue.popleft()
        acc_y += py
        acc_x += px
        count += 1
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = py + dy, px + dx
                if (0 <= ny < h and 0 <= nx < w and mask[ny, nx]
                        and not seen[ny, nx]):
                    seen[ny, nx] = True
                    queue.append((ny, nx))
    return acc_x / count, acc_y / count


def detection_window(feature_map, stride: int, center, half_px: int = WINDOW_HALF_PX):
    """Crop of a (C, H, W) map around ``center`` (image-pixel coords).

    The half-width is ``half_px`` image pixels converted to this map's
    resolution, at least one cell and at most half the map (small maps
    are returned whole, shifted so the center cell is centered).
    Out-of-map regions are zero-filled so the result is always
    (C, 2*half, 2*half).
    """
    c, h, w = feature_map.shape
    half = max(1, min(half_px // stride, h // 2))
    cx, cy = center
    gy, gx = int(round(cy / stride)), int(round(cx / stride))
    out = np.zeros((c, 2 * half, 2 * half), dtype=feature_map.dtype)
    y0, x0 = gy - half, gx - half
    sy0, sx0 = max(0, y0), max(0, x0)
    sy1, sx1 = min(h, gy + half), min(w, gx + half)
    if sy1 > sy0 and sx1 > sx0:
        out[:, sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = \
            feature_map[:, sy0:sy1, sx0:sx1]
    return out


def _head_seed(network: DetectorNetwork, anchor_index: int):
    """One-hot gradient on the grasp-class logit of the given anchor,
    shaped like the class-head output map."""
    cfg = network.config
    a = cfg.anchors_per_cell
    g = cfg.grid
    if not 0 <= anchor_index < g * g * a:
        raise ConfigurationError(
            f"anchor index {anchor_index} outside [0, {g * g * a})")
    cell, slot = divmod(anchor_index, a)
    gy, gx = divmod(cell, g)
    seed = np.zeros((a * 2, g, g), dtype=np.float64)
    seed[slot * 2 + 1, gy, gx] = 1.0
    return seed


def guided_maps(network: DetectorNetwork, trace, detection: Detection):
    """Full spatial relevance maps F = f * R of one detection.

    Returns {conv layer_id: (C, H, W) array}. These are the
    localization artifact: their mass sits on the detected object, so
    in-region mass fractions quantify how well the guided gradient
    isolates it.
    """
    seed = _head_seed(network, detection.anchor_index)
    grad_feat, _, _ = nn.conv2d_backward(
        trace.output, network.heads["cls_w"], 1, 0, seed,
        need_param_grads=False)
    refined, _ = network.backbone.guided_backward(trace, grad_feat)
    acts = trace.activations()
    return {lid: acts[lid][1] * refined[lid]
            for lid in network.backbone.conv_ids}


def refine(network: DetectorNetwork, trace, detection: Detection,
           center=None, window_half_px: int = WINDOW_HALF_PX):
    """Classification features of one detection from a forward trace.

    Per conv layer: the forward activation gated by the guided
    gradient's support, cropped to a window centered on ``center``
    (defaults to the detection point) and flattened row-major.
    """
    seed = _head_seed(network, detection.anchor_index)
    grad_feat, _, _ = nn.conv2d_backward(
        trace.output, network.heads["cls_w"], 1, 0, seed,
        need_param_grads=False)
    refined, _ = network.backbone.guided_backward(trace, grad_feat)
    acts = trace.activations()
    if center is None:
        center = (detection.cx, detection.cy)
    image_size = network.config.image_size
    per_layer = {}
    for lid in network.backbone.conv_ids:
        post = acts[lid][1]
        gated = post * (refined[lid] > 0)
        stride = image_size // post.shape[-1]
        win = detection_window(gated, stride, center, window_half_px)
        per_layer[lid] = win.ravel()
    return RefinedFeatureSet(detection=detection, per_layer=per_layer,
                             source_scene_id=-1, true_shape=None)


def raw_features(network: DetectorNetwork, trace):
    """Whole-scene activations f, flattened per layer: the no-refinement
    baseline the ablation compares against."""
    acts = trace.activations()
    return {lid: acts[lid][1].ravel().copy()
            for lid in network.backbone.conv_ids}


def associate_shape(detection: Detection, labels, min_iou: float = 0.3):
    """Shape of the best-IoU grasp label (first label wins ties), or None
    below the threshold."""
    if not labels:
        return None
    ious = iou_matrix(np.array([detection.aabb()]),
                      np.array([grasp_aabb(g) for g in labels]))[0]
    best = int(ious.argmax())
    return labels[best].shape if ious[best] >= min_iou else None


def extract_all(network: DetectorNetwork, dataset, association_iou=0.3,
                unrefined: bool = False, score_threshold=None, nms_iou=None):
    """Detect on every scene and refine per detection.

    Each refined feature is windowed on the bright blob nearest its
    detection. With ``unrefined=True`` each detection instead carries
    the raw whole-scene activations (identical for all detections of a
    scene), everything else unchanged.
    """
    out = []
    for scene in dataset:
        dets, trace = detect(network, scene.image, score_threshold, nms_iou)
        shared = raw_features(network, trace) if unrefined and dets else None
        for d in dets:
            if unrefined:
                fs = RefinedFeatureSet(detection=d,
                                       per_layer={k: v.copy() for k, v
                                                  in shared.items()},
                                       source_scene_id=scene.scene_id,
                                       true_shape=None)
            else:
                center = blob_centroid(scene.image, d.cx, d.cy)
                fs = refine(network, trace, d, center=center)
                fs.source_scene_id = scene.scene_id
            fs.true_shape = associate_shape(d, scene.grasps, association_iou)
            out.append(fs)
    return out


# ---------------------------------------------------------------------------
# on-disk cache
# ---------------------------------------------------------------------------

def save_cache(features, path):
    if not features:
        raise ConfigurationError("refusing to write an empty feature cache")
    layer_ids = list(features[0].per_layer.keys())
    records = []
    for fs in features:
        if list(fs.per_layer.keys()) != layer_ids:
            raise ConfigurationError("inconsistent layer ids across features")
        d = fs.detection
        records.append({
            "scene_id": fs.source_scene_id,
            "true_shape": fs.true_shape,
            "detection": [d.cx, d.cy, d.h, d.w, d.theta, d.score,
                          d.anchor_index],
        })
    meta = {"count": len(features), "layer_ids": layer_ids,
            "lengths": {lid: int(features[0].per_layer[lid].size)
                        for lid in layer_ids},
            "records": records}
    arrays = {f"layer.{lid}": np.stack([fs.per_layer[lid] for fs in features])
              for lid in layer_ids}
    write_container(path, "feature-cache", meta, arrays)


def load_cache(path):
    meta, arrays = read_container(path, expect_kind="feature-cache")
    out = []
    for i, rec in enumerate(meta["records"]):
        cx, cy, h, w, theta, score, anchor_index = rec["detection"]
        det = Detection(cx, cy, h, w, theta, score, int(anchor_index))
        per_layer = {lid: arrays[f"layer.{lid}"][i]
                     for lid in meta["layer_ids"]}
        out.append(RefinedFeatureSet(detection=det, per_layer=per_layer,
                                     source_scene_id=int(rec["scene_id"]),
                                     true_shape=rec["true_shape"]))
    return out
