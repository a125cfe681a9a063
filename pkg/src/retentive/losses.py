"""Stage losses and their closed-form gradients.

Only linear layers train, so reverse-mode differentiation is written out by
hand: sigmoid-BCE for objectness, softmax cross-entropy for classification
(through the cosine normalization when that head is cosine), smooth-L1 for
box deltas, and the renormalized base-marginal consistency term. A central
finite-difference sweep doubles as the correctness oracle.

A minibatch carries every frozen-path activation as a constant, which makes
each stage loss a pure function of the trainable arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .detector import Model
from .errors import NumericError, ParameterError, StateError
from .tensorops import EPS_COSINE, sigmoid, smooth_l1, smooth_l1_grad, softmax

CONSISTENCY_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# minibatch contract
# ---------------------------------------------------------------------------

@dataclass
class Minibatch:
    """Materialized training targets; frozen activations are baked in.

    anchor_cells rows are mixed-feature vectors at each sampled anchor's cell;
    roi_feats rows are pooled/projected/rectified ROI features. roi_label is
    a slot index in the active head's logit ordering (background last).
    """

    anchor_cells: np.ndarray           # (Na, C)
    anchor_scale: np.ndarray           # (Na,) int
    anchor_label: np.ndarray           # (Na,) float 0/1
    anchor_delta_t: np.ndarray         # (Na, 4)
    roi_feats: np.ndarray              # (Nr, D)
    roi_label: np.ndarray              # (Nr,) int
    roi_pos: np.ndarray                # (Nr,) bool
    roi_delta_t: np.ndarray            # (Nr, 4)
    roi_base_probs: np.ndarray | None = None  # (Nr, C_all+1), finetune only

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_label)

    @property
    def num_rois(self) -> int:
        return len(self.roi_label)


@dataclass
class LossBreakdown:
    l_obj: float
    l_cls: float
    l_box: float
    l_con: float = 0.0
    l_box_rpn: float = 0.0
    lam: float = 0.0
    empty: tuple[str, ...] = ()

    @property
    def total(self) -> float:
        return self.l_obj + self.l_cls + self.l_box + self.l_box_rpn + self.lam * self.l_con

    def to_dict(self) -> dict:
        return {
            "l_obj": self.l_obj,
            "l_cls": self.l_cls,
            "l_box": self.l_box,
            "l_con": self.l_con,
            "l_box_rpn": self.l_box_rpn,
            "lambda": self.lam,
            "total": self.total,
            "empty": list(self.empty),
        }


def total_finetune_loss(l_obj: float, l_cls: float, l_box: float, l_con: float,
                        lam: float) -> LossBreakdown:
    """Assemble the finetune objective: supervision plus weighted consistency."""
    if lam < 0:
        raise ParameterError(f"consistency coefficient must be >= 0, got {lam}")
    return LossBreakdown(l_obj=l_obj, l_cls=l_cls, l_box=l_box, l_con=l_con, lam=lam)


# ---------------------------------------------------------------------------
# consistency term
# ---------------------------------------------------------------------------

def _base_marginals(p: np.ndarray, base_slots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows restricted to base slots, renormalized; returns (marginals, mass)."""
    sub = p[:, base_slots]
    mass = sub.sum(axis=1)
    if not np.all(np.isfinite(mass)) or np.any(mass <= 0.0):
        raise NumericError("a probability row has no base-class mass")
    tilde = sub / mass[:, None]
    tilde = np.maximum(tilde, CONSISTENCY_FLOOR)
    tilde = tilde / tilde.sum(axis=1, keepdims=True)
    return tilde, mass


def consistency_loss(p_n: np.ndarray, p_b: np.ndarray, base_slots,
                     variant: str) -> float:
    """Divergence between renormalized base-class marginals, averaged over rows.

    Background and novel entries never enter the marginal; any change of
    probability mass that preserves base-class ratios leaves the value
    untouched.
    """
    p_n = np.asarray(p_n, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    base_slots = np.asarray(base_slots, dtype=np.int64)
    if p_n.shape != p_b.shape:
        raise ParameterError(f"probability shapes differ: {p_n.shape} vs {p_b.shape}")
    if p_n.shape[0] == 0:
        return 0.0
    pt, _ = _base_marginals(p_n, base_slots)
    qt, _ = _base_marginals(p_b, base_slots)
    if variant == "kldiv":
        per_row = np.sum(pt * (np.log(pt) - np.log(qt)), axis=1)
    elif variant == "l1":
        per_row = np.sum(np.abs(pt - qt), axis=1)
    elif variant == "cos":
        num = np.sum(pt * qt, axis=1)
        den = np.sqrt(np.sum(pt * pt, axis=1)) * np.sqrt(np.sum(qt * qt, axis=1))
        per_row = 1.0 - num / den
    else:
        raise ParameterError(f"unknown consistency variant {variant!r}")
    return float(per_row.mean())


def _consistency_grad_wrt_probs(p_n: np.ndarray, p_b: np.ndarray, base_slots: np.ndarray,
                                variant: str) -> tuple[float, np.ndarray]:
    """(value, dL/dp_n) for the mean-over-rows consistency term."""
    n = p_n.shape[0]
    pt, mass = _base_marginals(p_n, base_slots)
    qt, _ = _base_marginals(p_b, base_slots)
    if variant == "kldiv":
        logdiff = np.log(pt) - np.log(qt)
        per_row = np.sum(pt * logdiff, axis=1)
        gprime = logdiff + 1.0
    elif variant == "l1":
        per_row = np.sum(np.abs(pt - qt), axis=1)
        gprime = np.sign(pt - qt)
    elif variant == "cos":
        dot = np.sum(pt * qt, axis=1)
        np_n = np.sqrt(np.sum(pt * pt, axis=1))
        nq = np.sqrt(np.sum(qt * qt, axis=1))
        per_row = 1.0 - dot / (np_n * nq)
        gprime = -(qt / (np_n * nq)[:, None] - (dot / (np_n ** 3 * nq))[:, None] * pt)
    else:
        raise ParameterError(f"unknown consistency variant {variant!r}")
    # renormalization projects out the direction that rescales all base slots
    inner = np.sum(gprime * pt, axis=1, keepdims=True)
    grad = np.zeros_like(p_n)
    grad[:, base_slots] = (gprime - inner) / mass[:, None]
    return float(per_row.mean()), grad / n


# ---------------------------------------------------------------------------
# supervised pieces
# ---------------------------------------------------------------------------

def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """(mean loss, dL/dz); stable for large |z|."""
    n = len(z)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - y) / n


def _softmax_ce(z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """(mean loss, dL/dz) for integer labels over rows of logits."""
    n = len(labels)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = lse - z[np.arange(n), labels]
    p = softmax(z)
    p[np.arange(n), labels] -= 1.0
    return float(loss.mean()), p / n


def _smooth_l1_loss(pred: np.ndarray, target: np.ndarray, rows: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over 4 coordinates, mean over selected rows; dL/dpred everywhere."""
    grad = np.zeros_like(pred)
    if rows.size == 0:
        return 0.0, grad
    diff = pred[rows] - target[rows]
    loss = smooth_l1(diff).sum(axis=1).mean()
    grad[rows] = smooth_l1_grad(diff) / len(rows)
    return float(loss), grad


def supervised_detection_losses(obj_logits: np.ndarray, anchor_labels: np.ndarray,
                                cls_logits: np.ndarray, roi_labels: np.ndarray,
                                box_pred: np.ndarray, box_target: np.ndarray,
                                pos_rows: np.ndarray,
                                rpn_box_pred: np.ndarray | None = None,
                                rpn_box_target: np.ndarray | None = None,
                                rpn_pos_rows: np.ndarray | None = None) -> dict:
    """Loss values only, for callers that do not need gradients."""
    out = {"l_obj": 0.0, "l_cls": 0.0, "l_box": 0.0, "l_box_rpn": 0.0, "empty": []}
    if len(obj_logits):
        out["l_obj"], _ = _bce_with_logits(obj_logits, anchor_labels)
    else:
        out["empty"].append("obj")
    if len(cls_logits):
        out["l_cls"], _ = _softmax_ce(cls_logits, roi_labels)
    else:
        out["empty"].append("cls")
    if pos_rows.size:
        out["l_box"], _ = _smooth_l1_loss(box_pred, box_target, pos_rows)
    else:
        out["empty"].append("box")
    if rpn_box_pred is not None:
        if rpn_pos_rows is not None and rpn_pos_rows.size:
            out["l_box_rpn"], _ = _smooth_l1_loss(rpn_box_pred, rpn_box_target, rpn_pos_rows)
        else:
            out["empty"].append("box_rpn")
    out["empty"] = tuple(out["empty"])
    return out


# ---------------------------------------------------------------------------
# stage loss with gradients
# ---------------------------------------------------------------------------

def _cosine_forward(f: np.ndarray, w: np.ndarray, scale: float):
    fn = f / np.sqrt((f * f).sum(axis=1, keepdims=True) + EPS_COSINE ** 2)
    s = np.sqrt((w * w).sum(axis=1) + EPS_COSINE ** 2)
    z = scale * (fn @ (w / s[:, None]).T)
    return z, fn, s


def _cosine_backward(dz: np.ndarray, z: np.ndarray, fn: np.ndarray, w: np.ndarray,
                     s: np.ndarray, scale: float) -> np.ndarray:
    """dL/dW given dL/dz for z = scale * fn @ (w/s).T with s = sqrt(|w|^2+eps^2)."""
    dw = (scale / s)[:, None] * (dz.T @ fn)
    dw -= ((dz * z).sum(axis=0) / (s * s))[:, None] * w
    return dw


def _stage_forward(model: Model, mb: Minibatch, stage: str, tcfg: TrainConfig,
                   want_grads: bool):
    a = model.params.arrays
    if stage == "pretrain":
        if model.stage == "retentive":
            raise StateError("pretrain gradients requested on a finetuned model")
        obj_layer, cls_layer, reg_layer = "rpn_obj_b", "cls_b", "reg_b"
    elif stage == "finetune":
        if "cls_n/W" not in a:
            raise StateError("finetune gradients require the finetune layers")
        obj_layer, cls_layer, reg_layer = "rpn_obj_n", "cls_n", "reg_n"
    else:
        raise ParameterError(f"unknown stage {stage!r}")

    grads: dict[str, np.ndarray] = {}
    empty: list[str] = []
    na = mb.num_anchors
    nr = mb.num_rois
    n_scales = a["rpn_obj_b/W"].shape[0]

    # objectness: per-anchor logit from the scale-specific row
    if na:
        z_all = mb.anchor_cells @ a[f"{obj_layer}/W"].T + a[f"{obj_layer}/b"]
        z_obj = z_all[np.arange(na), mb.anchor_scale]
        l_obj, dz_obj = _bce_with_logits(z_obj, mb.anchor_label)
    else:
        l_obj, dz_obj = 0.0, None
        empty.append("obj")
    if want_grads:
        dw = np.zeros_like(a[f"{obj_layer}/W"])
        db = np.zeros_like(a[f"{obj_layer}/b"])
        if na:
            for s_idx in range(n_scales):
                rows = mb.anchor_scale == s_idx
                if rows.any():
                    dw[s_idx] = dz_obj[rows] @ mb.anchor_cells[rows]
                    db[s_idx] = dz_obj[rows].sum()
        grads[f"{obj_layer}/W"] = dw
        grads[f"{obj_layer}/b"] = db

    # rpn box regression trains during pretraining only
    l_box_rpn = 0.0
    if stage == "pretrain":
        pos_anchor = np.flatnonzero(mb.anchor_label > 0.5)
        if na and pos_anchor.size:
            d_all = (mb.anchor_cells @ a["rpn_box/W"].T + a["rpn_box/b"]).reshape(na, n_scales, 4)
            d = d_all[np.arange(na), mb.anchor_scale]
            l_box_rpn, dd = _smooth_l1_loss(d, mb.anchor_delta_t, pos_anchor)
        else:
            dd = None
            empty.append("box_rpn")
        if want_grads:
            dw = np.zeros_like(a["rpn_box/W"])
            db = np.zeros_like(a["rpn_box/b"])
            if dd is not None:
                for s_idx in range(n_scales):
                    rows = mb.anchor_scale == s_idx
                    if rows.any():
                        block = slice(4 * s_idx, 4 * s_idx + 4)
                        dw[block] = dd[rows].T @ mb.anchor_cells[rows]
                        db[block] = dd[rows].sum(axis=0)
            grads["rpn_box/W"] = dw
            grads["rpn_box/b"] = db

    # classification over sampled ROIs
    use_cosine = stage == "finetune" and model.classifier == "cos"
    if nr:
        if use_cosine:
            z_cls, fn, s_norm = _cosine_forward(mb.roi_feats, a["cls_n/W"], model.mcfg.cosine_scale)
        else:
            z_cls = mb.roi_feats @ a[f"{cls_layer}/W"].T + a[f"{cls_layer}/b"]
        l_cls, dz_cls = _softmax_ce(z_cls, mb.roi_label)
    else:
        z_cls, dz_cls = None, None
        l_cls = 0.0
        empty.append("cls")

    # consistency between the two heads' base marginals
    l_con = 0.0
    dz_con = None
    if stage == "finetune" and tcfg.consistency != "off":
        if model.head_domain == "novel-only":
            raise StateError("consistency needs base-class logits, which a novel-only head lacks")
        if mb.roi_base_probs is None:
            raise StateError("consistency requested but the minibatch has no base-head probabilities")
        if nr:
            base_slots = np.arange(model.num_base)
            p_n = softmax(z_cls)
            l_con, dp = _consistency_grad_wrt_probs(p_n, mb.roi_base_probs, base_slots,
                                                    tcfg.consistency)
            # softmax backward: dz = p * (dp - <dp, p>)
            inner = np.sum(dp * p_n, axis=1, keepdims=True)
            dz_con = p_n * (dp - inner)
        else:
            empty.append("con")

    if want_grads and (dz_cls is not None or dz_con is not None):
        dz = np.zeros_like(z_cls)
        if dz_cls is not None:
            dz = dz + dz_cls
        if dz_con is not None:
            dz = dz + tcfg.lam * dz_con
        if use_cosine:
            grads["cls_n/W"] = _cosine_backward(dz, z_cls, fn, a["cls_n/W"], s_norm,
                                                model.mcfg.cosine_scale)
        else:
            grads[f"{cls_layer}/W"] = dz.T @ mb.roi_feats
            grads[f"{cls_layer}/b"] = dz.sum(axis=0)
    elif want_grads:
        grads[f"{cls_layer}/W"] = np.zeros_like(a[f"{cls_layer}/W"])
        if not use_cosine:
            grads[f"{cls_layer}/b"] = np.zeros_like(a[f"{cls_layer}/b"])

    # box regression over positive ROIs
    pos_rows = np.flatnonzero(mb.roi_pos)
    if nr and pos_rows.size:
        d_roi = mb.roi_feats @ a[f"{reg_layer}/W"].T + a[f"{reg_layer}/b"]
        l_box, dd_roi = _smooth_l1_loss(d_roi, mb.roi_delta_t, pos_rows)
    else:
        dd_roi = None
        l_box = 0.0
        empty.append("box")
    if want_grads:
        if dd_roi is not None:
            grads[f"{reg_layer}/W"] = dd_roi.T @ mb.roi_feats
            grads[f"{reg_layer}/b"] = dd_roi.sum(axis=0)
        else:
            grads[f"{reg_layer}/W"] = np.zeros_like(a[f"{reg_layer}/W"])
            grads[f"{reg_layer}/b"] = np.zeros_like(a[f"{reg_layer}/b"])

    lam = tcfg.lam if stage == "finetune" else 0.0
    breakdown = LossBreakdown(l_obj=l_obj, l_cls=l_cls, l_box=l_box, l_con=l_con,
                              l_box_rpn=l_box_rpn, lam=lam, empty=tuple(empty))
    return breakdown, grads if want_grads else None


def compute_loss(model: Model, mb: Minibatch, stage: str, tcfg: TrainConfig) -> LossBreakdown:
    breakdown, _ = _stage_forward(model, mb, stage, tcfg, want_grads=False)
    return breakdown


def compute_gradients(model: Model, mb: Minibatch, stage: str,
                      tcfg: TrainConfig) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Exact gradients of the stage loss for every trainable array."""
    breakdown, grads = _stage_forward(model, mb, stage, tcfg, want_grads=True)
    for key in grads:
        if key.split("/")[0] not in model.params.trainable:
            raise StateError(f"gradient computed for frozen layer {key}")
    return breakdown, grads


def finite_difference_check(model: Model, mb: Minibatch, stage: str, tcfg: TrainConfig,
                            eps: float = 1e-6, max_coords: int = 200,
                            seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses max(1, |analytic|, |numeric|) as the denominator. A
    seeded subset of coordinates is swept when the trainable set is large.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ParameterError(f"eps must lie in [1e-8, 1e-4], got {eps}")
    _, grads = compute_gradients(model, mb, stage, tcfg)
    coords = []
    for key in sorted(grads):
        for flat in range(grads[key].size):
            coords.append((key, flat))
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in sorted(picked)]
    worst = 0.0
    for key, flat in coords:
        arr = model.params.arrays[key]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + eps
        plus = compute_loss(model, mb, stage, tcfg).total
        arr.flat[flat] = orig - eps
        minus = compute_loss(model, mb, stage, tcfg).total
        arr.flat[flat] = orig
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grads[key].flat[flat]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst
