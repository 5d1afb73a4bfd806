"""Training objective: scribble, deformation-consistency and active-contour terms.

All losses are differentiable compositions of numerics primitives, so a
single backward pass through the shared Tape yields gradients for every
term at once. Components:

* partial cross-entropy over annotated scribble pixels only;
* a boundary-length term summing sqrt((dx u)^2 + (dy u)^2 + eps) over all
  pixels, with eps inside the radicand so the root never sees zero;
* an image-coherence term penalizing within-region variance, using the
  soft mask u and its complement as region weights (at binary u this
  coincides with the hard two-region form);
* a deformation-consistency term comparing warp(predict(I)) against
  predict(warp(I)) under one shared fitted deformation, averaged over
  pixels valid in both paths;
* a pseudo-label cross-entropy (stage two), normalized by labeled count.
"""

from dataclasses import dataclass

import numpy as np

from . import deform as df
from . import model as md
from . import numerics as nm

TARGET = 1
BACKGROUND = 0
UNKNOWN = -1  # also used as IGNORE in pseudo-label maps

MEAN_EPS = 1e-8  # guards the soft region means against empty regions


class ScribbleMap:
    """Tri-valued per-pixel annotation: target / background / unknown."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValueError(f"scribble labels must be H x W, got shape {labels.shape}")
        bad = ~np.isin(labels, (TARGET, BACKGROUND, UNKNOWN))
        if bad.any():
            raise ValueError(f"scribble contains {int(bad.sum())} pixels outside {{-1, 0, 1}}")
        self.labels = labels.astype(np.int8)

    @property
    def shape(self):
        return self.labels.shape

    def target_mask(self):
        return self.labels == TARGET

    def background_mask(self):
        return self.labels == BACKGROUND

    def annotated_mask(self):
        return self.labels != UNKNOWN

    def counts(self):
        return int(self.target_mask().sum()), int(self.background_mask().sum())

    def validate_trainable(self, name="sample"):
        """Training samples need at least one pixel of each class."""
        n_t, n_b = self.counts()
        if n_t == 0 or n_b == 0:
            raise ValueError(
                f"{name}: scribble must annotate both classes, found {n_t} target and {n_b} background pixels"
            )

    def crop(self, top, left, size):
        return ScribbleMap(self.labels[top : top + size, left : left + size])


@dataclass
class LossConfig:
    lambda_ic: float = 1.0  # weight between boundary length and image coherence
    epsilon: float = 1e-8  # radicand guard of the length term
    pseudo_weight: float = 0.5
    weight_dc: float = 1.0
    weight_ac: float = 1.0
    enable_pc: bool = True
    enable_dc: bool = True
    enable_ac: bool = True
    enable_pseudo: bool = False

    def __post_init__(self):
        for name in ("lambda_ic", "pseudo_weight", "weight_dc", "weight_ac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class LossReport:
    """Per-component scalar values for one sample or batch."""

    l_pc: float = 0.0
    l_dc: float = 0.0
    length: float = 0.0
    l_ic: float = 0.0
    l_ac: float = 0.0
    l_pseudo: float = 0.0
    l_total: float = 0.0
    valid_pixel_count: int = 0

    FIELDS = ("l_pc", "l_dc", "length", "l_ic", "l_ac", "l_pseudo", "l_total")

    def as_row(self):
        return [getattr(self, name) for name in self.FIELDS]


def partial_cross_entropy(pred_target, scribble):
    """Cross-entropy summed over annotated pixels only (unknown pixels free).

    ``pred_target`` is the (H, W) target-probability Grid; log arguments
    are clamped at 1e-12 so saturated predictions stay finite.
    """
    if pred_target.shape != scribble.shape:
        raise ValueError(f"prediction {pred_target.shape} vs scribble {scribble.shape} shape mismatch")
    if not scribble.annotated_mask().any():
        raise ValueError("scribble annotates no pixels; partial cross-entropy is undefined")
    t_mask = nm.constant(scribble.target_mask().astype(pred_target.data.dtype))
    b_mask = nm.constant(scribble.background_mask().astype(pred_target.data.dtype))
    pos = nm.total(nm.mul(t_mask, nm.log(pred_target)))
    neg = nm.total(nm.mul(b_mask, nm.log(nm.sub(1.0, pred_target))))
    return nm.neg(nm.add(pos, neg))


def length_term(u, epsilon=1e-8):
    """Total-variation style boundary length: sum of sqrt(gx^2 + gy^2 + eps)."""
    gx = nm.gradx(u)
    gy = nm.grady(u)
    mag = nm.add(nm.add(nm.mul(gx, gx), nm.mul(gy, gy)), epsilon)
    return nm.total(nm.sqrt(mag))


def _region_coherence(weight, channel):
    """sum(weight * (p - mean_w(p))^2) with a soft weighted mean."""
    mass = nm.add(nm.total(weight), MEAN_EPS)
    mean_val = nm.div(nm.total(nm.mul(weight, channel)), mass)
    diff = nm.sub(channel, mean_val)
    return nm.total(nm.mul(weight, nm.mul(diff, diff)))


def coherence_term(u, image):
    """Within-region dispersion of the image under the soft mask u.

    Region means use u and (1 - u) as weights; multi-channel images
    average the per-channel energies so the weighting between length and
    coherence does not depend on channel count.
    """
    if image.ndim != 3:
        raise ValueError(f"coherence_term expects a (C, H, W) image, got {image.shape}")
    if u.shape != image.shape[1:]:
        raise ValueError(f"mask {u.shape} does not match image {image.shape}")
    complement = nm.sub(1.0, u)
    terms = []
    for c in range(image.shape[0]):
        channel = nm.constant(image.data[c]) if image.const else nm.take_channel(image, c)
        terms.append(nm.add(_region_coherence(u, channel), _region_coherence(complement, channel)))
    acc = terms[0]
    for t in terms[1:]:
        acc = nm.add(acc, t)
    return nm.div(acc, float(image.shape[0]))


def active_contour(u, image, config):
    """Boundary length plus lambda-weighted image coherence.

    Returns (l_ac, length, l_ic) as Grids.
    """
    length = length_term(u, config.epsilon)
    l_ic = coherence_term(u, image)
    l_ac = nm.add(length, nm.mul(l_ic, config.lambda_ic))
    return l_ac, length, l_ic


def deformation_consistency(params, image, spec, prediction=None):
    """Mean absolute gap between warp(predict(I)) and predict(warp(I)).

    One ControlGrid is drawn from ``spec`` and the identical fitted map
    warps both the prediction and the image, so the two paths share every
    deformation parameter. Only pixels valid in both warps count; their
    number is returned alongside the loss. Gradients flow through both
    paths. Pass ``prediction`` to reuse an existing forward pass of
    ``image``.
    """
    control = df.make_cp_grid(spec.alpha)
    control = df.sample_variation(control, spec.beta, spec.seed.clone())
    tmap = df.fit_warp_map(control, spec.regularization)

    if prediction is None:
        prediction = md.forward(params, image)
    pred_target = nm.take_channel(prediction, 0)
    h, w = pred_target.shape
    warped_pred, valid_pred = df.warp(tmap, nm.reshape(pred_target, (1, h, w)))

    warped_image, valid_image = df.warp(tmap, image)
    pred_of_warped = md.forward(params, warped_image)
    warped_target = nm.take_channel(pred_of_warped, 0)

    both = valid_pred.data[0] * valid_image.data[0]
    count = int(both.sum())
    if count == 0:
        raise ValueError("deformation left no valid pixels; alpha/beta produce a degenerate warp")
    mask = nm.constant(both)
    gap = nm.absolute(nm.sub(nm.reshape(warped_pred, (h, w)), warped_target))
    loss = nm.div(nm.total(nm.mul(gap, mask)), float(count))
    return loss, count


def pseudo_label_loss(pred_target, pseudo):
    """Cross-entropy over non-ignored pseudo-label pixels, mean-normalized.

    ``pseudo`` is an (H, W) int array with values in {1, 0, -1}; -1 means
    ignore. An all-ignore map contributes zero.
    """
    pseudo = np.asarray(pseudo)
    if pseudo.shape != pred_target.shape:
        raise ValueError(f"pseudo {pseudo.shape} vs prediction {pred_target.shape} shape mismatch")
    labeled = pseudo != UNKNOWN
    count = int(labeled.sum())
    if count == 0:
        return nm.constant(0.0)
    dtype = pred_target.data.dtype
    t_mask = nm.constant((pseudo == TARGET).astype(dtype))
    b_mask = nm.constant((pseudo == BACKGROUND).astype(dtype))
    pos = nm.total(nm.mul(t_mask, nm.log(pred_target)))
    neg = nm.total(nm.mul(b_mask, nm.log(nm.sub(1.0, pred_target))))
    return nm.div(nm.neg(nm.add(pos, neg)), float(count))


def total_loss(params, image, scribble, config, spec=None, pseudo=None):
    """Weighted sum of the enabled components for one sample.

    Returns (total Grid, LossReport). The prediction is computed once and
    shared between the scribble, active-contour and consistency terms.
    """
    prediction = md.forward(params, image)
    pred_target = nm.take_channel(prediction, 0)
    report = LossReport()
    parts = []

    if config.enable_pc:
        l_pc = partial_cross_entropy(pred_target, scribble)
        report.l_pc = l_pc.item()
        parts.append(l_pc)
    if config.enable_ac:
        l_ac, length, l_ic = active_contour(pred_target, image, config)
        report.l_ac = l_ac.item()
        report.length = length.item()
        report.l_ic = l_ic.item()
        if config.weight_ac != 1.0:
            l_ac = nm.mul(l_ac, config.weight_ac)
        parts.append(l_ac)
    if config.enable_dc:
        if spec is None:
            raise ValueError("deformation-consistency is enabled but no DeformationSpec was given")
        l_dc, count = deformation_consistency(params, image, spec, prediction=prediction)
        report.l_dc = l_dc.item()
        report.valid_pixel_count = count
        if config.weight_dc != 1.0:
            l_dc = nm.mul(l_dc, config.weight_dc)
        parts.append(l_dc)
    if config.enable_pseudo and pseudo is not None:
        l_pseudo = pseudo_label_loss(pred_target, pseudo)
        report.l_pseudo = l_pseudo.item()
        parts.append(nm.mul(l_pseudo, config.pseudo_weight))

    if not parts:
        raise ValueError("no loss component is enabled")
    total = parts[0]
    for p in parts[1:]:
        total = nm.add(total, p)
    report.l_total = total.item()
    return total, report
