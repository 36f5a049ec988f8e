"""Anchor-based grasp detector over the silhouette scenes.

A small conv backbone (three blocks of two 3x3 conv+ReLU layers, each
block followed by a 2x2 max-pool) feeds two 1x1 heads on the final 8x8
map: a 2-class head (background / grasp) and a 6-number regression head
per anchor. Grasp angle is regressed as (sin 2theta, cos 2theta), which
is continuous under the theta ~ theta+pi gripper symmetry.

Anchors are axis-aligned priors; matching and NMS both use plain
axis-aligned IoU, with oriented grasp rectangles reduced to their
bounding boxes. Anchor ordering is row-major over cells, then scales,
then aspects, and the head channel layout matches it exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .container import read_container, write_container
from .errors import ConfigurationError, DivergenceError
from .scenes import GraspLabel, grasp_aabb, wrap_half_pi

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    block_channels: tuple = ((8, 8), (16, 16), (32, 32))
    anchor_scales: tuple = (6.0, 10.0, 16.0, 26.0)
    anchor_aspects: tuple = (0.4, 1.0, 2.5)
    iou_pos: float = 0.5
    iou_neg: float = 0.4
    neg_ratio: int = 3
    min_negatives: int = 8     # mined when a scene has zero positives
    reg_weight: float = 1.0
    score_threshold: float = 0.5
    nms_iou: float = 0.3

    @property
    def grid(self) -> int:
        return self.image_size // (2 ** len(self.block_channels))

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_aspects)


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    h: float
    w: float
    theta: float
    score: float
    anchor_index: int

    def aabb(self):
        return grasp_aabb(GraspLabel(self.cx, self.cy, self.h, self.w,
                                     self.theta, -1, ""))


# ---------------------------------------------------------------------------
# anchors and IoU
# ---------------------------------------------------------------------------

def build_anchors(image_size: int, grid: int, scales, aspects) -> np.ndarray:
    """(K, 4) array of (cx, cy, h, w); aspect a gives h = s*sqrt(a),
    w = s/sqrt(a), so a is the height/width ratio at constant area."""
    if not scales or not aspects:
        raise ConfigurationError("anchor scales and aspects must be non-empty")
    if image_size % grid != 0:
        raise ConfigurationError(f"grid {grid} must divide image {image_size}")
    cell = image_size / grid
    anchors = []
    for gy in range(grid):
        for gx in range(grid):
            cx = (gx + 0.5) * cell
            cy = (gy + 0.5) * cell
            for s in scales:
                for a in aspects:
                    root = np.sqrt(a)
                    anchors.append((cx, cy, s * root, s / root))
    return np.asarray(anchors, dtype=np.float64)


def anchor_aabbs(anchors):
    cx, cy, h, w = anchors.T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU of (x0, y0, x1, y1) boxes: (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def match_anchors(anchors, labels, iou_pos: float, iou_neg: float):
    """Per-anchor assignment: label index, NEGATIVE, or IGNORE.

    An anchor is positive for its best-IoU label at IoU >= iou_pos,
    negative below iou_neg, ignored between. Each label's single
    best-IoU anchor is then forced positive (later labels win a shared
    best anchor), so no label goes unowned.
    """
    if not 0 <= iou_neg <= iou_pos <= 1:
        raise ConfigurationError(
            f"need 0 <= iou_neg <= iou_pos <= 1, got {iou_neg}, {iou_pos}")
    k = len(anchors)
    if not labels:
        return np.full(k, NEGATIVE, dtype=np.int64)
    ious = iou_matrix(anchor_aabbs(anchors),
                      np.array([grasp_aabb(g) for g in labels]))
    best_label = ious.argmax(axis=1)
    best_iou = ious[np.arange(k), best_label]
    assignment = np.full(k, IGNORE, dtype=np.int64)
    assignment[best_iou >= iou_pos] = best_label[best_iou >= iou_pos]
    assignment[best_iou < iou_neg] = NEGATIVE
    for li in range(len(labels)):
        assignment[ious[:, li].argmax()] = li
    return assignment


# ---------------------------------------------------------------------------
# target encoding
# ---------------------------------------------------------------------------

def encode_targets(anchors, labels, assignment):
    """(K, 6) regression targets; rows for non-positive anchors are zero."""
    targets = np.zeros((len(anchors), 6), dtype=np.float64)
    for k in np.nonzero(assignment >= 0)[0]:
        g = labels[assignment[k]]
        a_cx, a_cy, a_h, a_w = anchors[k]
        targets[k] = (
            (g.cx - a_cx) / a_w,
            (g.cy - a_cy) / a_h,
            np.log(g.h / a_h),
            np.log(g.w / a_w),
            np.sin(2 * g.theta),
            np.cos(2 * g.theta),
        )
    return targets


def decode_box(anchor, reg):
    dx, dy, dh, dw, s2, c2 = reg
    a_cx, a_cy, a_h, a_w = anchor
    theta = wrap_half_pi(0.5 * np.arctan2(s2, c2))
    return (float(dx * a_w + a_cx), float(dy * a_h + a_cy),
            float(a_h * np.exp(dh)), float(a_w * np.exp(dw)), float(theta))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _softmax2(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def detection_loss(logits, regression, assignment, targets, config):
    """Scalar loss plus gradients w.r.t. the raw head outputs.

    Classification: softmax cross-entropy averaged over positives plus
    the hard-mined negatives (3:1 to positives; a fixed floor when the
    scene has no positive anchor). Regression: smooth-L1 summed over the
    6 components of positive anchors, divided by max(1, n_pos). Total is
    class + reg_weight * regression.
    """
    k = len(assignment)
    if logits.shape != (k, 2) or regression.shape != (k, 6):
        raise ConfigurationError(
            f"head shapes {logits.shape}/{regression.shape} do not match "
            f"{k} anchors")
    probs = _softmax2(logits)
    pos = np.nonzero(assignment >= 0)[0]
    neg = np.nonzero(assignment == NEGATIVE)[0]
    n_pos = len(pos)

    with np.errstate(divide="ignore"):
        neg_losses = -np.log(probs[neg, 0])
    n_mine = config.neg_ratio * n_pos if n_pos else config.min_negatives
    n_mine = min(n_mine, len(neg))
    mined = neg[np.argsort(-neg_losses, kind="stable")[:n_mine]]

    contrib = np.concatenate([pos, mined])
    n_contrib = max(1, len(contrib))
    target_class = (assignment[contrib] >= 0).astype(np.int64)
    with np.errstate(divide="ignore"):
        class_loss = float(
            -np.log(probs[contrib, target_class]).sum() / n_contrib)

    grad_logits = np.zeros_like(logits)
    onehot = np.zeros((len(contrib), 2))
    onehot[np.arange(len(contrib)), target_class] = 1.0
    grad_logits[contrib] = (probs[contrib] - onehot) / n_contrib

    grad_reg = np.zeros_like(regression)
    reg_loss = 0.0
    if n_pos:
        diff = regression[pos] - targets[pos]
        absd = np.abs(diff)
        reg_loss = float(np.where(absd < 1, 0.5 * diff * diff,
                                  absd - 0.5).sum() / n_pos)
        grad_reg[pos] = np.clip(diff, -1, 1) / n_pos

    total = class_loss + config.reg_weight * reg_loss
    grad_reg *= config.reg_weight
    return total, grad_logits, grad_reg, {"class": class_loss, "reg": reg_loss}


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

def backbone_specs(config: DetectorConfig):
    specs = []
    c_in = 1
    for bi, block in enumerate(config.block_channels, start=1):
        for ci, c_out in enumerate(block, start=1):
            lid = f"{bi}-{ci}"
            specs.append(nn.LayerSpec("conv", lid, in_channels=c_in,
                                      out_channels=c_out, kernel_size=3,
                                      padding=1))
            specs.append(nn.LayerSpec("relu", f"{lid}.relu"))
            c_in = c_out
        specs.append(nn.LayerSpec("maxpool", f"pool{bi}", window=2, stride=2))
    return specs


class DetectorNetwork:
    """Backbone stack plus the two 1x1 detection heads."""

    def __init__(self, config: DetectorConfig, backbone: nn.LayerStack,
                 head_params: dict):
        self.config = config
        self.backbone = backbone
        self.heads = head_params
        self.anchors = build_anchors(config.image_size, config.grid,
                                     config.anchor_scales,
                                     config.anchor_aspects)

    @classmethod
    def build(cls, config: DetectorConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        backbone = nn.LayerStack.build(backbone_specs(config), rng)
        c_last = config.block_channels[-1][-1]
        a = config.anchors_per_cell
        cls_w, cls_b = nn.he_conv_init(rng, a * 2, c_last, 1)
        reg_w, reg_b = nn.he_conv_init(rng, a * 6, c_last, 1)
        heads = {"cls_w": cls_w, "cls_b": cls_b,
                 "reg_w": reg_w, "reg_b": reg_b}
        return cls(config, backbone, heads)

    @property
    def version(self):
        return self.backbone.version

    def bump_version(self):
        self.backbone.bump_version()

    @property
    def backbone_layer_ids(self):
        return self.backbone.conv_ids

    def num_params(self):
        return self.backbone.num_params() + sum(
            v.size for v in self.heads.values())

    def _per_anchor(self, head_map, per: int):
        """(A*per, g, g) head map -> (g*g*A, per) in anchor order."""
        a = self.config.anchors_per_cell
        g = self.config.grid
        return head_map.reshape(a, per, g, g).transpose(2, 3, 0, 1).reshape(-1, per)

    def _per_anchor_inverse(self, rows, per: int):
        a = self.config.anchors_per_cell
        g = self.config.grid
        return rows.reshape(g, g, a, per).transpose(2, 3, 0, 1).reshape(
            a * per, g, g)

    def forward(self, image, keep_cols: bool = False):
        """Single image (1, S, S) -> (logits (K,2), regression (K,6), trace).

        The trace covers the backbone only; head outputs are recomputed
        from its final map whenever gradients are needed.
        """
        trace = self.backbone.forward_trace(image, keep_cols=keep_cols)
        feat = trace.output
        cls_map = nn.conv2d_forward(feat, self.heads["cls_w"], self.heads["cls_b"])
        reg_map = nn.conv2d_forward(feat, self.heads["reg_w"], self.heads["reg_b"])
        return self._per_anchor(cls_map, 2), self._per_anchor(reg_map, 6), trace

    def forward_batch(self, images, keep_cols: bool = False):
        trace = self.backbone.forward_trace(images, keep_cols=keep_cols)
        feat = trace.output
        cls_map = nn.conv2d_forward(feat, self.heads["cls_w"], self.heads["cls_b"])
        reg_map = nn.conv2d_forward(feat, self.heads["reg_w"], self.heads["reg_b"])
        logits = np.stack([self._per_anchor(m, 2) for m in cls_map])
        regs = np.stack([self._per_anchor(m, 6) for m in reg_map])
        return logits, regs, trace


def decode_detections(logits, regression, anchors, score_threshold: float,
                      nms_iou: float):
    """Thresholded softmax scores, box decode, then greedy NMS by
    descending score (ties keep the lower anchor index)."""
    if not (0 < score_threshold < 1 and 0 < nms_iou < 1):
        raise ConfigurationError("thresholds must lie strictly in (0, 1)")
    scores = _softmax2(logits)[:, 1]
    keep = np.nonzero(scores > score_threshold)[0]
    if len(keep) == 0:
        return []
    cands = []
    for k in keep:
        cx, cy, h, w, theta = decode_box(anchors[k], regression[k])
        cands.append(Detection(cx, cy, h, w, theta, float(scores[k]), int(k)))
    order = np.argsort(-scores[keep], kind="stable")
    cands = [cands[i] for i in order]
    boxes = np.array([d.aabb() for d in cands])
    kept = []
    alive = np.ones(len(cands), dtype=bool)
    for i in range(len(cands)):
        if not alive[i]:
            continue
        kept.append(cands[i])
        if i + 1 < len(cands):
            rest = np.nonzero(alive[i + 1:])[0] + i + 1
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            alive[rest[ious >= nms_iou]] = False
    return kept


def detect(network: DetectorNetwork, image, score_threshold=None,
           nms_iou=None):
    cfg = network.config
    logits, regression, trace = network.forward(image)
    dets = decode_detections(
        logits, regression, network.anchors,
        cfg.score_threshold if score_threshold is None else score_threshold,
        cfg.nms_iou if nms_iou is None else nms_iou)
    return dets, trace


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    # the box-regression head converges slowly; at 1e-3 the class scores
    # plateau before any anchor crosses the detection threshold
    epochs: int = 100
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0


def _strip_shapes(labels):
    # the loss must never see shape identity; drop it before training
    return [replace(g, shape="") for g in labels]


def train_detector(dataset, config: DetectorConfig, train: TrainConfig,
                   log_path=None):
    """Adam-train a fresh detector; returns (network, per-epoch log)."""
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    net = DetectorNetwork.build(config, seed=train.seed)
    images = np.stack([s.image for s in dataset])
    per_scene = []
    for scene in dataset:
        labels = _strip_shapes(scene.grasps)
        assignment = match_anchors(net.anchors, labels,
                                   config.iou_pos, config.iou_neg)
        per_scene.append((assignment,
                          encode_targets(net.anchors, labels, assignment)))

    states = {}
    for lid, p in net.backbone.params.items():
        states[f"{lid}.w"] = nn.AdamState.for_param(p["w"], lr=train.lr)
        states[f"{lid}.b"] = nn.AdamState.for_param(p["b"], lr=train.lr)
    for key, p in net.heads.items():
        states[key] = nn.AdamState.for_param(p, lr=train.lr)

    rng = np.random.default_rng(train.seed)
    log = []
    for epoch in range(train.epochs):
        order = rng.permutation(len(dataset))
        sums = {"class": 0.0, "reg": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, len(order), train.batch_size):
            batch = order[start:start + train.batch_size]
            stats = _train_step(net, images[batch],
                                [per_scene[i] for i in batch], states, config)
            if not np.isfinite(stats["total"]):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {steps}")
            for key in sums:
                sums[key] += stats[key]
            steps += 1
        entry = {"epoch": epoch,
                 "class_loss": sums["class"] / steps,
                 "reg_loss": sums["reg"] / steps,
                 "total_loss": sums["total"] / steps}
        log.append(entry)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return net, log


def scene_loss_and_grads(net: DetectorNetwork, image, assignment, targets):
    """Loss of one scene plus analytic gradients for every parameter,
    keyed like the checkpoint arrays; no state is modified."""
    trace = net.backbone.forward_trace(image, keep_cols=True)
    feat = trace.output
    cls_map = nn.conv2d_forward(feat, net.heads["cls_w"], net.heads["cls_b"])
    reg_map = nn.conv2d_forward(feat, net.heads["reg_w"], net.heads["reg_b"])
    logits = net._per_anchor(cls_map, 2)
    regression = net._per_anchor(reg_map, 6)
    total, g_log, g_reg, _ = detection_loss(logits, regression, assignment,
                                            targets, net.config)
    g_feat_cls, g_cls_w, g_cls_b = nn.conv2d_backward(
        feat, net.heads["cls_w"], 1, 0, net._per_anchor_inverse(g_log, 2))
    g_feat_reg, g_reg_w, g_reg_b = nn.conv2d_backward(
        feat, net.heads["reg_w"], 1, 0, net._per_anchor_inverse(g_reg, 6))
    param_grads, _ = net.backbone.standard_backward(trace,
                                                    g_feat_cls + g_feat_reg)
    grads = {}
    for lid, g in param_grads.items():
        grads[f"backbone.{lid}.w"] = g["w"]
        grads[f"backbone.{lid}.b"] = g["b"]
    grads["head.cls_w"] = g_cls_w
    grads["head.cls_b"] = g_cls_b
    grads["head.reg_w"] = g_reg_w
    grads["head.reg_b"] = g_reg_b
    return total, grads


def _param_slot(net, key):
    """Mutable parameter array for a checkpoint-style key."""
    part, rest = key.split(".", 1)
    if part == "backbone":
        lid, wb = rest.rsplit(".", 1)
        return net.backbone.params[lid], wb
    return net.heads, rest


def scene_loss(net: DetectorNetwork, image, assignment, targets):
    trace = net.backbone.forward_trace(image)
    feat = trace.output
    cls_map = nn.conv2d_forward(feat, net.heads["cls_w"], net.heads["cls_b"])
    reg_map = nn.conv2d_forward(feat, net.heads["reg_w"], net.heads["reg_b"])
    total, *_ = detection_loss(net._per_anchor(cls_map, 2),
                               net._per_anchor(reg_map, 6),
                               assignment, targets, net.config)
    return total


def _train_step(net, images, batch_targets, states, config):
    n = len(images)
    trace = net.backbone.forward_trace(images, keep_cols=True)
    feat = trace.output
    cls_map = nn.conv2d_forward(feat, net.heads["cls_w"], net.heads["cls_b"])
    reg_map = nn.conv2d_forward(feat, net.heads["reg_w"], net.heads["reg_b"])

    grad_cls_map = np.zeros_like(cls_map)
    grad_reg_map = np.zeros_like(reg_map)
    sums = {"class": 0.0, "reg": 0.0, "total": 0.0}
    for i, (assignment, targets) in enumerate(batch_targets):
        logits = net._per_anchor(cls_map[i], 2)
        regression = net._per_anchor(reg_map[i], 6)
        total, g_log, g_reg, parts = detection_loss(
            logits, regression, assignment, targets, config)
        grad_cls_map[i] = net._per_anchor_inverse(g_log / n, 2)
        grad_reg_map[i] = net._per_anchor_inverse(g_reg / n, 6)
        sums["class"] += parts["class"] / n
        sums["reg"] += parts["reg"] / n
        sums["total"] += total / n

    g_feat_cls, g_cls_w, g_cls_b = nn.conv2d_backward(
        feat, net.heads["cls_w"], 1, 0, grad_cls_map)
    g_feat_reg, g_reg_w, g_reg_b = nn.conv2d_backward(
        feat, net.heads["reg_w"], 1, 0, grad_reg_map)
    param_grads, _ = net.backbone.standard_backward(trace,
                                                    g_feat_cls + g_feat_reg)

    for lid, grads in param_grads.items():
        p = net.backbone.params[lid]
        nn.adam_step(p["w"], grads["w"], states[f"{lid}.w"], name=f"{lid}.w")
        nn.adam_step(p["b"], grads["b"], states[f"{lid}.b"], name=f"{lid}.b")
    for key, grad in (("cls_w", g_cls_w), ("cls_b", g_cls_b),
                      ("reg_w", g_reg_w), ("reg_b", g_reg_b)):
        nn.adam_step(net.heads[key], grad, states[key], name=key)
    net.bump_version()
    return sums


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(network: DetectorNetwork, path):
    cfg = network.config
    meta = {
        "config": {
            "image_size": cfg.image_size,
            "block_channels": [list(b) for b in cfg.block_channels],
            "anchor_scales": list(cfg.anchor_scales),
            "anchor_aspects": list(cfg.anchor_aspects),
            "iou_pos": cfg.iou_pos, "iou_neg": cfg.iou_neg,
            "neg_ratio": cfg.neg_ratio, "min_negatives": cfg.min_negatives,
            "reg_weight": cfg.reg_weight,
            "score_threshold": cfg.score_threshold, "nms_iou": cfg.nms_iou,
        },
    }
    arrays = {}
    for lid, p in network.backbone.params.items():
        arrays[f"backbone.{lid}.w"] = p["w"]
        arrays[f"backbone.{lid}.b"] = p["b"]
    for key, p in network.heads.items():
        arrays[f"head.{key}"] = p
    write_container(path, "detector-checkpoint", meta, arrays)


def load_checkpoint(path) -> DetectorNetwork:
    meta, arrays = read_container(path, expect_kind="detector-checkpoint")
    raw = meta["config"]
    config = DetectorConfig(
        image_size=raw["image_size"],
        block_channels=tuple(tuple(b) for b in raw["block_channels"]),
        anchor_scales=tuple(raw["anchor_scales"]),
        anchor_aspects=tuple(raw["anchor_aspects"]),
        iou_pos=raw["iou_pos"], iou_neg=raw["iou_neg"],
        neg_ratio=raw["neg_ratio"], min_negatives=raw["min_negatives"],
        reg_weight=raw["reg_weight"],
        score_threshold=raw["score_threshold"], nms_iou=raw["nms_iou"])
    backbone = nn.LayerStack(backbone_specs(config), {})
    params = {}
    for lid in backbone.conv_ids:
        params[lid] = {"w": arrays[f"backbone.{lid}.w"],
                       "b": arrays[f"backbone.{lid}.b"]}
    backbone.params = params
    heads = {key: arrays[f"head.{key}"]
             for key in ("cls_w", "cls_b", "reg_w", "reg_b")}
    return DetectorNetwork(config, backbone, heads)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def label_recall(network: DetectorNetwork, dataset, iou: float = 0.5):
    """Fraction of grasp labels matched by some detection at AABB IoU."""
    matched = 0
    total = 0
    for scene in dataset:
        dets, _ = detect(network, scene.image)
        total += len(scene.grasps)
        if not dets:
            continue
        det_boxes = np.array([d.aabb() for d in dets])
        label_boxes = np.array([grasp_aabb(g) for g in scene.grasps])
        ious = iou_matrix(label_boxes, det_boxes)
        matched += int((ious.max(axis=1) >= iou).sum())
    return matched / total if total else 0.0
