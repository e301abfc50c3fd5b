"""Adversarial attacks against forgery detectors.

The headline attack maximizes the distance between the clean image's
class-activation features and the adversarial iterate's, by iterated sign
steps projected into an L-infinity band, and finally restricts the
accumulated noise to a semantic facial-region mask. Classical baselines
(FGSM, BIM, PGD, Carlini-Wagner L2, DeepFool) share the same conventions:
every attack output stays inside the epsilon band around the original and
inside the valid pixel range, and a fixed seed reproduces the result
bit-exactly.

Attacks follow the sklearn transformer idiom: construct with the detector
and hyperparameters, ``fit`` validates, ``transform`` maps a batch of clean
images to adversarial images, and ``run`` exposes the full per-image
result. ``get_params`` works on every attack.
"""

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .cam import compute_cam
from .detector import (
    ClassActivationFeatures,
    CrossEntropyObjective,
    FeatureDistanceObjective,
    LogitMarginObjective,
)
from .errors import ConfigurationError, DimensionError
from .imaging import blend_masked
from .regions import (
    DEFAULT_ATTACK_REGIONS,
    SelectionPolicy,
    build_mask,
    score_regions,
    select_regions,
)
from .validation import check_image, check_image_batch, check_label_map


@dataclass(frozen=True)
class PerturbationBudget:
    """L-infinity attack budget: radius, per-step size, iteration count."""

    epsilon: float
    step_alpha: float
    iterations: int

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.step_alpha <= 0.0:
            raise ConfigurationError(f"step_alpha must be > 0, got {self.step_alpha}")
        if self.step_alpha > self.epsilon:
            raise ConfigurationError(
                f"step_alpha {self.step_alpha} exceeds epsilon {self.epsilon}"
            )
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")


@dataclass(frozen=True)
class AttackResult:
    """Everything one attack run produced.

    ``adversarial`` equals the original bit-exactly outside ``mask``;
    ``global_noise`` is the unmasked accumulated perturbation;
    ``feature_distance_trace`` is populated by feature-distance attacks
    (empty for loss-based baselines); ``flipped`` is true when the final
    image is misclassified against the reference label.
    """

    adversarial: np.ndarray
    global_noise: np.ndarray
    mask: np.ndarray
    iterations_run: int
    feature_distance_trace: tuple
    flipped: bool


def feature_distance(a, b, kind="l2"):
    """Scalar dissimilarity between two class-activation feature blocks.

    l2 is the squared Euclidean distance (the default), l1 the absolute
    difference sum, cosine one minus the cosine similarity. l2 and l1 are
    symmetric and zero iff the blocks are equal.
    """
    fa = a.features if isinstance(a, ClassActivationFeatures) else np.asarray(a)
    fb = b.features if isinstance(b, ClassActivationFeatures) else np.asarray(b)
    if fa.shape != fb.shape:
        raise DimensionError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    if (
        isinstance(a, ClassActivationFeatures)
        and isinstance(b, ClassActivationFeatures)
        and a.class_index != b.class_index
    ):
        raise ValueError("feature blocks anchor different classes")
    fa = fa.astype(np.float64).ravel()
    fb = fb.astype(np.float64).ravel()
    if kind == "l2":
        return float(((fa - fb) ** 2).sum())
    if kind == "l1":
        return float(np.abs(fa - fb).sum())
    if kind == "cosine":
        den = max(np.linalg.norm(fa) * np.linalg.norm(fb), 1e-12)
        return float(1.0 - float(fa @ fb) / den)
    raise ValueError(f"unknown feature distance kind {kind!r}")


def _sign(g):
    return np.sign(g).astype(np.float32)


def _project(adv, original, epsilon):
    """Clip into the epsilon band around the original, then into [0, 1]."""
    eps = np.float32(epsilon)
    adv = np.clip(adv, original - eps, original + eps)
    return np.clip(adv, np.float32(0.0), np.float32(1.0))


def _full_mask(image):
    return np.ones(image.shape[:2], dtype=np.uint8)


class BaseAttack(BaseEstimator):
    """Common attack machinery; subclasses implement :meth:`run`."""

    def fit(self, X=None, y=None):
        """Validate configuration; attacks learn nothing from data."""
        self._validate()
        return self

    def _validate(self):
        if self.detector is None:
            raise ConfigurationError("attack requires a detector")

    def _check_image(self, image):
        image = check_image(image)
        size = getattr(self.detector, "input_size", None)
        if size is not None and image.shape[:2] != (size, size):
            raise DimensionError(
                f"image is {image.shape[0]}x{image.shape[1]}, detector expects "
                f"{size}x{size}"
            )
        return image

    def _reference_label(self, image, y):
        if y is not None:
            return int(y)
        return int(np.argmax(self.detector.predict_one(image)))

    def _finish(self, original, perturbed, mask, trace, iterations, ref_label):
        adversarial = blend_masked(original, perturbed, mask)
        flipped = (
            int(np.argmax(self.detector.predict_one(adversarial))) != ref_label
        )
        return AttackResult(
            adversarial=adversarial,
            global_noise=perturbed - original,
            mask=mask,
            iterations_run=iterations,
            feature_distance_trace=tuple(trace),
            flipped=flipped,
        )

    def run(self, image, y=None, label_map=None):
        raise NotImplementedError

    def transform(self, X, y=None, label_maps=None):
        """Attack a batch; returns the adversarial images (N, H, W, 3)."""
        X = check_image_batch(X)
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            yi = None if y is None else y[i]
            lm = None if label_maps is None else label_maps[i]
            out[i] = self.run(X[i], y=yi, label_map=lm).adversarial
        return out


class _SignAscentMixin:
    """Iterated sign steps on the cross-entropy loss (FGSM/BIM/PGD core)."""

    def _ascend_loss(self, image, label, budget, start_offset=None):
        original = image
        adv = image.copy()
        if start_offset is not None:
            adv = _project(adv + start_offset, original, budget.epsilon)
        alpha = np.float32(budget.step_alpha)
        objective = CrossEntropyObjective(label=label)
        for _ in range(budget.iterations):
            grad = self.detector.input_gradient(adv, objective)
            adv = _project(adv + alpha * _sign(grad), original, budget.epsilon)
        return adv


class FastGradientSignAttack(_SignAscentMixin, BaseAttack):
    """Single epsilon-sized sign step on the cross-entropy loss."""

    name = "fgsm"

    def __init__(self, detector=None, epsilon=0.15, seed=0):
        self.detector = detector
        self.epsilon = epsilon
        self.seed = seed

    def run(self, image, y=None, label_map=None):
        image = self._check_image(image)
        self._validate()
        label = self._reference_label(image, y)
        budget = PerturbationBudget(self.epsilon, self.epsilon, 1)
        adv = self._ascend_loss(image, label, budget)
        return self._finish(image, adv, _full_mask(image), (), 1, label)


class BasicIterativeAttack(_SignAscentMixin, BaseAttack):
    """Iterated sign steps on the cross-entropy loss, band-projected."""

    name = "bim"

    def __init__(self, detector=None, epsilon=0.15, alpha=0.015, iters=20, seed=0):
        self.detector = detector
        self.epsilon = epsilon
        self.alpha = alpha
        self.iters = iters
        self.seed = seed

    def _start_offset(self, image):
        return None

    def run(self, image, y=None, label_map=None):
        image = self._check_image(image)
        self._validate()
        label = self._reference_label(image, y)
        if self.iters == 0:
            return self._finish(image, image.copy(), _full_mask(image), (), 0, label)
        budget = PerturbationBudget(self.epsilon, self.alpha, self.iters)
        adv = self._ascend_loss(image, label, budget, self._start_offset(image))
        return self._finish(image, adv, _full_mask(image), (), self.iters, label)


class ProjectedGradientDescentAttack(BasicIterativeAttack):
    """BIM with a seeded uniform random start inside the epsilon band.

    ``random_start`` is the start magnitude; None means epsilon, 0 makes
    the attack coincide with BIM bit-exactly.
    """

    name = "pgd"

    def __init__(self, detector=None, epsilon=0.15, alpha=0.015, iters=20,
                 random_start=None, seed=0):
        super().__init__(detector=detector, epsilon=epsilon, alpha=alpha,
                         iters=iters, seed=seed)
        self.random_start = random_start

    def _start_offset(self, image):
        magnitude = self.epsilon if self.random_start is None else self.random_start
        if magnitude < 0 or magnitude > self.epsilon:
            raise ConfigurationError(
                f"random_start must lie in [0, epsilon], got {magnitude}"
            )
        if magnitude == 0:
            return None
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-magnitude, magnitude, size=image.shape).astype(np.float32)


class SemanticMaskAttack(BaseAttack):
    """Feature-distance sign attack restricted to semantic facial regions.

    The loop maximizes the distance between the clean image's
    class-activation features and the iterate's via sign steps, projecting
    each iterate into the epsilon band and the valid pixel range. After the
    loop the accumulated noise is restricted to the mask built from the
    selected facial regions; region selection may be a fixed set, the top-k
    regions ranked by the clean image's activation map, a score threshold,
    or "none" for the unmasked ablation.

    The first gradient is exactly zero (the iterate starts at the clean
    image), so with ``jitter`` > 0 the step-0 gradient is re-evaluated at a
    seeded probe point inside the band; jitter 0 leaves the cold start
    degenerate (sign(0) = 0).
    """

    name = "semantic"

    def __init__(self, detector=None, epsilon=0.15, alpha=0.015, iters=20,
                 distance="l2", mask_policy="fixed",
                 regions=tuple(sorted(DEFAULT_ATTACK_REGIONS)), k=5, tau=0.5,
                 dilation=0, targeted_class=None, jitter=1e-3, seed=0):
        self.detector = detector
        self.epsilon = epsilon
        self.alpha = alpha
        self.iters = iters
        self.distance = distance
        self.mask_policy = mask_policy
        self.regions = regions
        self.k = k
        self.tau = tau
        self.dilation = dilation
        self.targeted_class = targeted_class
        self.jitter = jitter
        self.seed = seed

    def _validate(self):
        super()._validate()
        if self.mask_policy not in ("fixed", "top_k", "threshold", "none"):
            raise ConfigurationError(f"unknown mask policy {self.mask_policy!r}")
        if self.distance not in ("l2", "l1", "cosine"):
            raise ConfigurationError(f"unknown feature distance {self.distance!r}")

    def _policy(self):
        if self.mask_policy == "fixed":
            return SelectionPolicy(kind="fixed", regions=frozenset(self.regions))
        if self.mask_policy == "top_k":
            return SelectionPolicy(kind="top_k", k=self.k)
        return SelectionPolicy(kind="threshold", tau=self.tau)

    def _build_mask(self, image, label_map, class_index):
        if self.mask_policy == "none":
            return _full_mask(image)
        if label_map is None:
            raise ConfigurationError(
                f"mask policy {self.mask_policy!r} requires a label map"
            )
        label_map = check_label_map(label_map, spatial_shape=image.shape[:2])
        policy = self._policy()
        if policy.kind == "fixed":
            selected = select_regions([], policy)
        else:
            # Adaptive selection reads the clean image's activation map, so
            # the mask is independent of the attack trajectory.
            cam = compute_cam(self.detector, image, class_index)
            selected = select_regions(score_regions(cam, label_map), policy)
        return build_mask(label_map, selected, dilation_px=self.dilation)

    def _ascend_features(self, image, class_index, rng):
        """Run the unmasked feature-distance ascent; returns (iterate, trace)."""
        original = image
        adv = image.copy()
        reference = self.detector.class_activation_features(image, class_index)
        objective = FeatureDistanceObjective(reference=reference, kind=self.distance)
        alpha = np.float32(self.alpha)
        trace = []
        for t in range(self.iters):
            value, grad = self.detector.objective_value_and_gradient(adv, objective)
            trace.append(value)
            if t == 0 and self.jitter > 0 and not grad.any():
                # Degenerate cold start: probe the gradient just off the
                # clean image, inside the band, without moving the iterate.
                offset = rng.uniform(-self.jitter, self.jitter, size=adv.shape)
                probe = _project(adv + offset.astype(np.float32), original,
                                 self.epsilon)
                _, grad = self.detector.objective_value_and_gradient(probe, objective)
            adv = _project(adv + alpha * _sign(grad), original, self.epsilon)
        return adv, trace

    def run(self, image, y=None, label_map=None):
        """Attack one image; needs a label map unless mask_policy is "none"."""
        image = self._check_image(image)
        self._validate()
        label = self._reference_label(image, y)
        class_index = (
            int(self.targeted_class)
            if self.targeted_class is not None
            else int(np.argmax(self.detector.predict_one(image)))
        )
        if self.iters == 0:
            mask = self._build_mask(image, label_map, class_index)
            return self._finish(image, image.copy(), mask, (), 0, label)
        PerturbationBudget(self.epsilon, self.alpha, self.iters)
        rng = np.random.default_rng(self.seed)
        perturbed, trace = self._ascend_features(image, class_index, rng)
        mask = self._build_mask(image, label_map, class_index)
        return self._finish(image, perturbed, mask, trace, self.iters, label)


class GlobalFeatureAttack(SemanticMaskAttack):
    """The unmasked ablation: the same feature-distance ascent with the
    final iterate returned directly (no semantic restriction)."""

    name = "semantic_nomask"

    def __init__(self, detector=None, epsilon=0.15, alpha=0.015, iters=20,
                 distance="l2", targeted_class=None, jitter=1e-3, seed=0):
        super().__init__(detector=detector, epsilon=epsilon, alpha=alpha,
                         iters=iters, distance=distance, mask_policy="none",
                         targeted_class=targeted_class, jitter=jitter, seed=seed)


class CarliniWagnerAttack(BaseAttack):
    """Carlini-Wagner L2 attack in tanh space with binary search over the
    objective weight c (9 steps, margin kappa = 0, 100 inner Adam steps).

    The result is finally projected into the shared epsilon band so every
    attack in a comparison obeys the same budget.
    """

    name = "cw"

    def __init__(self, detector=None, epsilon=0.15, c_init=1e-3, search_steps=9,
                 inner_iters=100, kappa=0.0, lr=0.01, seed=0):
        self.detector = detector
        self.epsilon = epsilon
        self.c_init = c_init
        self.search_steps = search_steps
        self.inner_iters = inner_iters
        self.kappa = kappa
        self.lr = lr
        self.seed = seed

    def run(self, image, y=None, label_map=None):
        image = self._check_image(image)
        self._validate()
        label = self._reference_label(image, y)
        other = 1 - label

        # delta = 0 is already adversarial: accept it immediately.
        if int(np.argmax(self.detector.predict_one(image))) != label:
            return self._finish(image, image.copy(), _full_mask(image), (), 0, label)

        net = self.detector._net()
        x_t = self.detector._to_tensor(image)
        # Pull pixels off the box corners so atanh stays finite.
        x_safe = x_t.clamp(1e-6, 1.0 - 1e-6)
        w_init = torch.atanh(2.0 * x_safe - 1.0)

        best_adv, best_l2 = None, np.inf
        last_adv = None
        lower, upper = 0.0, np.inf
        c = self.c_init
        for _ in range(self.search_steps):
            w = w_init.clone().requires_grad_(True)
            opt = torch.optim.Adam([w], lr=self.lr)
            success_at_c = False
            for _ in range(self.inner_iters):
                adv_t = (torch.tanh(w) + 1.0) / 2.0
                logits = net(adv_t)
                l2 = ((adv_t - x_t) ** 2).sum()
                margin = logits[0, label] - logits[0, other]
                objective = l2 + c * torch.clamp(margin + self.kappa, min=0.0)
                opt.zero_grad()
                objective.backward()
                opt.step()
                with torch.no_grad():
                    if bool(logits.argmax(dim=1).item() != label):
                        success_at_c = True
                        l2_val = float(l2)
                        if l2_val < best_l2:
                            best_l2 = l2_val
                            best_adv = adv_t.detach().clone()
            with torch.no_grad():
                last_adv = ((torch.tanh(w) + 1.0) / 2.0).detach()
            if success_at_c:
                upper = c
                c = (lower + upper) / 2.0
            else:
                lower = c
                c = c * 10.0 if np.isinf(upper) else (lower + upper) / 2.0

        chosen = best_adv if best_adv is not None else last_adv
        perturbed = chosen[0].numpy().transpose(1, 2, 0)
        perturbed = _project(perturbed, image, self.epsilon)
        return self._finish(image, perturbed, _full_mask(image), (),
                            self.search_steps * self.inner_iters, label)


class DeepFoolAttack(BaseAttack):
    """Minimal-perturbation boundary projection for the binary detector.

    Iterates linearized steps toward the real/fake decision boundary with a
    1.02 overshoot until the prediction flips or ``max_iters`` is reached.
    Inputs the detector already misclassifies are returned unchanged. The
    output is projected into the shared epsilon band.
    """

    name = "deepfool"

    def __init__(self, detector=None, epsilon=0.15, overshoot=1.02,
                 max_iters=50, seed=0):
        self.detector = detector
        self.epsilon = epsilon
        self.overshoot = overshoot
        self.max_iters = max_iters
        self.seed = seed

    def run(self, image, y=None, label_map=None):
        image = self._check_image(image)
        self._validate()
        pred0 = int(np.argmax(self.detector.predict_one(image)))
        label = pred0 if y is None else int(y)
        if pred0 != label:
            return self._finish(image, image.copy(), _full_mask(image), (), 0, label)

        other = 1 - pred0
        objective = LogitMarginObjective(positive=other, negative=pred0)
        r_total = np.zeros_like(image, dtype=np.float64)
        iterations = 0
        current = image
        for _ in range(self.max_iters):
            if int(np.argmax(self.detector.predict_one(current))) != pred0:
                break
            margin, grad = self.detector.objective_value_and_gradient(
                current, objective
            )
            grad = grad.astype(np.float64)
            norm_sq = float((grad ** 2).sum())
            if norm_sq == 0.0:
                break
            r_total += (abs(margin) / norm_sq) * grad
            iterations += 1
            current = np.clip(
                image + np.float32(self.overshoot) * r_total.astype(np.float32),
                np.float32(0.0), np.float32(1.0),
            )

        perturbed = _project(current, image, self.epsilon)
        return self._finish(image, perturbed, _full_mask(image), (),
                            iterations, label)


ATTACKS = {
    cls.name: cls
    for cls in (
        FastGradientSignAttack,
        BasicIterativeAttack,
        ProjectedGradientDescentAttack,
        CarliniWagnerAttack,
        DeepFoolAttack,
        SemanticMaskAttack,
        GlobalFeatureAttack,
    )
}


def make_attack(name, detector, **params):
    """Instantiate an attack by registry name with keyword overrides."""
    if name not in ATTACKS:
        raise ConfigurationError(
            f"unknown attack {name!r}; choose from {sorted(ATTACKS)}"
        )
    return ATTACKS[name](detector=detector, **params)
