"""Face-forgery detectors behind a uniform prediction/gradient interface.

The reference detector is a small convnet (four conv stages, smooth GELU
activations, average-pool downsampling) ending in global average pooling and
a linear head, so classifier-weight class activation maps are well defined.
Everything the attack engine needs from a detector flows through this
module: probabilities, input gradients of declared scalar objectives, and
class-weighted activation features.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    TrainingError,
    UnsupportedObjectiveError,
)
from .validation import check_image, check_image_batch

N_CLASSES = 2

_MAGIC = b"SEMADVW1"


@dataclass(frozen=True)
class ClassActivationFeatures:
    """Last-conv-stage activations, each channel scaled by one class's
    classifier weight. Layout (h, w, C)."""

    features: np.ndarray
    class_index: int


# ---------------------------------------------------------------------------
# Objective specs for input gradients.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossEntropyObjective:
    """Cross-entropy of the logits against a fixed label."""

    label: int


@dataclass(frozen=True)
class FeatureDistanceObjective:
    """Distance between the image's class-activation features and a fixed
    reference, in the given metric (l2 = squared Euclidean, l1, cosine)."""

    reference: ClassActivationFeatures
    kind: str = "l2"


@dataclass(frozen=True)
class LogitObjective:
    """Raw pre-softmax score of one class."""

    class_index: int


@dataclass(frozen=True)
class LogitMarginObjective:
    """logit[positive] - logit[negative]; the DeepFool boundary functional."""

    positive: int
    negative: int


@dataclass(frozen=True)
class PixelSumObjective:
    """Sum of all input pixels; bypasses the network (identity layer)."""


@dataclass(frozen=True)
class ConstantObjective:
    """A constant; its input gradient is identically zero."""

    value: float = 0.0


def _distance_t(a, b, kind):
    if kind == "l2":
        return ((a - b) ** 2).sum()
    if kind == "l1":
        return (a - b).abs().sum()
    if kind == "cosine":
        num = (a * b).sum()
        den = a.norm() * b.norm()
        return 1.0 - num / den.clamp_min(1e-12)
    raise ValueError(f"unknown feature distance kind {kind!r}")


class _TinyConvNet(nn.Module):
    """Four conv stages with a global-average-pool classification head.

    Group normalization after each conv suppresses per-image brightness and
    color nuisance (it is deterministic and batch-independent); activations
    are GELU and downsampling is average pooling, keeping the network smooth
    so finite-difference gradient checks are stable.
    """

    def __init__(self, width=16, num_classes=N_CLASSES):
        super().__init__()
        w = width

        def stage(cin, cout, pool):
            layers = [
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.GroupNorm(4, cout),
                nn.GELU(),
            ]
            if pool:
                layers.append(nn.AvgPool2d(2))
            return layers

        self.features = nn.Sequential(
            *stage(3, w, pool=True),
            *stage(w, 2 * w, pool=True),
            *stage(2 * w, 4 * w, pool=True),
            *stage(4 * w, 4 * w, pool=False),
        )
        self.head = nn.Linear(4 * w, num_classes)
        # He init keeps activation scale roughly constant through the
        # stages; torch's default shrinks it enough to stall training.
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward_with_features(self, x):
        feats = self.features(x)
        logits = self.head(feats.mean(dim=(2, 3)))
        return logits, feats

    def forward(self, x):
        return self.forward_with_features(x)[0]


class ForgeryDetector(BaseEstimator, ClassifierMixin):
    """Binary real(0)/fake(1) classifier with gradient and activation access.

    Follows the sklearn estimator protocol (fit/predict/predict_proba,
    get_params) on image batches shaped (N, H, W, 3) in [0, 1]. Training is
    deterministic under a fixed seed. The instance is immutable after fit;
    concurrent read-only use is safe.
    """

    def __init__(self, input_size=64, width=16, epochs=30, batch_size=32,
                 lr=0.001, beta1=0.9, beta2=0.999, seed=0, identifier=None):
        self.input_size = input_size
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.seed = seed
        self.identifier = identifier

    # -- identity ----------------------------------------------------------

    @property
    def model_id(self):
        return self.identifier or f"tinycnn-w{self.width}-s{self.seed}"

    @property
    def n_classes(self):
        return N_CLASSES

    @property
    def feature_layer(self):
        """Name of the stage whose activations feed CAM and features."""
        return "features"

    # -- tensor plumbing ----------------------------------------------------

    def _net(self):
        net = getattr(self, "net_", None)
        if net is None:
            raise NotFittedError("detector is not fitted; call fit() or load()")
        return net

    def _check_input(self, img):
        img = check_image(img)
        h, w = img.shape[:2]
        if h != self.input_size or w != self.input_size:
            raise DimensionError(
                f"image is {h}x{w}, detector expects "
                f"{self.input_size}x{self.input_size}"
            )
        return img

    @staticmethod
    def _to_tensor(img):
        chw = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)
        return torch.from_numpy(chw).unsqueeze(0)

    # -- sklearn surface ----------------------------------------------------

    def fit(self, X, y):
        """Train the reference convnet; raises TrainingError on a
        single-class dataset. epochs=0 keeps the seeded initialization."""
        X = check_image_batch(X)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] != y.shape[0]:
            raise DimensionError("X and y have different lengths")
        if X.shape[1] != self.input_size or X.shape[2] != self.input_size:
            raise DimensionError(
                f"training images are {X.shape[1]}x{X.shape[2]}, expected "
                f"{self.input_size}x{self.input_size}"
            )
        present = set(np.unique(y).tolist())
        if not present <= {0, 1}:
            raise TrainingError(f"labels must be 0 (real) or 1 (fake), got {present}")
        if self.epochs > 0 and present != {0, 1}:
            raise TrainingError("training requires both classes in the dataset")

        torch.manual_seed(self.seed)
        net = _TinyConvNet(width=self.width)
        data = torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))
        targets = torch.from_numpy(y)

        final_acc = float("nan")
        if self.epochs > 0:
            net.train()
            opt = torch.optim.Adam(
                net.parameters(), lr=self.lr, betas=(self.beta1, self.beta2)
            )
            # Step decay over the last third settles the post-takeoff wobble.
            milestones = [max(1, int(self.epochs * 0.7)),
                          max(2, int(self.epochs * 0.85))]
            scheduler = torch.optim.lr_scheduler.MultiStepLR(
                opt, milestones=milestones, gamma=0.3
            )
            n = data.shape[0]
            for _ in range(self.epochs):
                order = torch.randperm(n)
                correct = 0
                for start in range(0, n, self.batch_size):
                    idx = order[start:start + self.batch_size]
                    xb, yb = data[idx], targets[idx]
                    opt.zero_grad()
                    logits = net(xb)
                    loss = F.cross_entropy(logits, yb)
                    loss.backward()
                    opt.step()
                    correct += int((logits.argmax(dim=1) == yb).sum())
                scheduler.step()
                final_acc = correct / n

        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net_ = net
        self.classes_ = np.array([0, 1])
        self.history_ = {"epochs": int(self.epochs), "final_train_accuracy": final_acc}
        return self

    def predict_proba(self, X):
        """Class probabilities (N, 2); rows sum to 1."""
        net = self._net()
        X = check_image_batch(X)
        out = np.empty((X.shape[0], N_CLASSES), dtype=np.float32)
        with torch.no_grad():
            for start in range(0, X.shape[0], 64):
                chunk = X[start:start + 64]
                t = torch.from_numpy(np.ascontiguousarray(chunk.transpose(0, 3, 1, 2)))
                out[start:start + 64] = F.softmax(net(t), dim=1).numpy()
        return out

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    # -- single-image domain surface ----------------------------------------

    def predict_one(self, img):
        """Probability vector (2,) for one image."""
        img = self._check_input(img)
        net = self._net()
        with torch.no_grad():
            logits = net(self._to_tensor(img))
        return F.softmax(logits, dim=1)[0].numpy()

    def logits_one(self, img):
        """Raw pre-softmax scores (2,) for one image."""
        img = self._check_input(img)
        with torch.no_grad():
            logits = self._net()(self._to_tensor(img))
        return logits[0].numpy()

    def _weighted_features_t(self, x_t, class_index):
        net = self._net()
        _, feats = net.forward_with_features(x_t)
        w = net.head.weight[class_index]
        return feats[0] * w[:, None, None]

    def _objective_scalar(self, objective, x_t):
        net = self._net()
        if isinstance(objective, CrossEntropyObjective):
            logits = net(x_t)
            return F.cross_entropy(logits, torch.tensor([objective.label]))
        if isinstance(objective, FeatureDistanceObjective):
            ref = objective.reference
            phi = self._weighted_features_t(x_t, ref.class_index)
            ref_t = torch.from_numpy(
                np.ascontiguousarray(ref.features.transpose(2, 0, 1), dtype=np.float32)
            )
            if ref_t.shape != phi.shape:
                raise DimensionError(
                    f"reference features {tuple(ref_t.shape)} do not match "
                    f"model features {tuple(phi.shape)}"
                )
            return _distance_t(phi, ref_t, objective.kind)
        if isinstance(objective, LogitObjective):
            return net(x_t)[0, objective.class_index]
        if isinstance(objective, LogitMarginObjective):
            logits = net(x_t)
            return logits[0, objective.positive] - logits[0, objective.negative]
        if isinstance(objective, PixelSumObjective):
            return x_t.sum()
        raise UnsupportedObjectiveError(
            f"objective {type(objective).__name__} is not a supported "
            "differentiable scalar"
        )

    def objective_value_and_gradient(self, img, objective):
        """Evaluate a scalar objective and its exact input gradient.

        Returns (value, gradient) with the gradient shaped like the image.
        """
        img = self._check_input(img)
        if isinstance(objective, ConstantObjective):
            return float(objective.value), np.zeros_like(img)
        x_t = self._to_tensor(img).requires_grad_(True)
        scalar = self._objective_scalar(objective, x_t)
        (grad,) = torch.autograd.grad(scalar, x_t)
        return float(scalar.detach()), grad[0].numpy().transpose(1, 2, 0)

    def input_gradient(self, img, objective):
        """Exact gradient of the objective with respect to every pixel."""
        return self.objective_value_and_gradient(img, objective)[1]

    def class_activation_features(self, img, class_index):
        """Feature-layer activations scaled per-channel by the class's
        classifier weight; layout (h, w, C)."""
        if not 0 <= class_index < N_CLASSES:
            raise ValueError(f"class_index {class_index} out of range")
        img = self._check_input(img)
        with torch.no_grad():
            phi = self._weighted_features_t(self._to_tensor(img), class_index)
        return ClassActivationFeatures(
            features=phi.numpy().transpose(1, 2, 0).copy(),
            class_index=int(class_index),
        )

    def feature_maps(self, img):
        """Raw feature-layer activations (h, w, C)."""
        img = self._check_input(img)
        net = self._net()
        with torch.no_grad():
            _, feats = net.forward_with_features(self._to_tensor(img))
        return feats[0].numpy().transpose(1, 2, 0).copy()

    def feature_gradients(self, img, class_index):
        """Gradient of logit[class_index] w.r.t. the feature maps (h, w, C)."""
        if not 0 <= class_index < N_CLASSES:
            raise ValueError(f"class_index {class_index} out of range")
        img = self._check_input(img)
        net = self._net()
        feats = net.features(self._to_tensor(img)).detach().requires_grad_(True)
        logits = net.head(feats.mean(dim=(2, 3)))
        (grad,) = torch.autograd.grad(logits[0, class_index], feats)
        return grad[0].numpy().transpose(1, 2, 0).copy()

    @property
    def class_weights(self):
        """Classifier weights (n_classes, feature_channels); the CAM basis."""
        net = self._net()
        return net.head.weight.detach().numpy().copy()

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        """Persist weights in a self-describing binary container.

        Layout: 8-byte magic, little-endian uint32 header length, JSON
        header (params, history, tensor directory), raw float32 buffers.
        """
        net = self._net()
        state = net.state_dict()
        directory, blobs, offset = [], [], 0
        for name, tensor in state.items():
            raw = tensor.numpy().astype("<f4").tobytes()
            directory.append(
                {"name": name, "shape": list(tensor.shape),
                 "dtype": "float32", "offset": offset, "nbytes": len(raw)}
            )
            blobs.append(raw)
            offset += len(raw)
        header = {
            "arch": "tiny_convnet",
            "params": self.get_params(),
            "history": getattr(self, "history_", {}),
            "tensors": directory,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path):
        """Reload a detector saved by :meth:`save`; predictions are
        bit-identical to the saved instance's."""
        with open(path, "rb") as fh:
            magic = fh.read(len(_MAGIC))
            if magic != _MAGIC:
                raise FormatError(f"{path}: not a detector weight container")
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            payload = fh.read()
        if header.get("arch") != "tiny_convnet":
            raise ConfigurationError(f"{path}: unknown architecture {header.get('arch')}")
        det = cls(**header["params"])
        net = _TinyConvNet(width=det.width)
        state = {}
        for entry in header["tensors"]:
            start, nbytes = entry["offset"], entry["nbytes"]
            flat = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
            state[entry["name"]] = torch.from_numpy(
                flat.reshape(entry["shape"]).copy()
            )
        net.load_state_dict(state)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        det.net_ = net
        det.classes_ = np.array([0, 1])
        det.history_ = header.get("history", {})
        return det


def train_reference_detector(dataset, epochs=30, seed=0, val_dataset=None, **params):
    """Train the reference detector on synthetic samples.

    Args:
        dataset: list of SyntheticSample (both classes required when
            epochs > 0).
        epochs, seed: training schedule and determinism seed.
        val_dataset: optional held-out samples; accuracy recorded in
            ``history_["val_accuracy"]``.
        **params: forwarded to :class:`ForgeryDetector`.

    Returns:
        A fitted ForgeryDetector.
    """
    from .synthetic import samples_to_arrays

    X, y = samples_to_arrays(dataset)
    size = X.shape[1]
    det = ForgeryDetector(input_size=size, epochs=epochs, seed=seed, **params)
    det.fit(X, y)
    if val_dataset is not None:
        Xv, yv = samples_to_arrays(val_dataset)
        det.history_["val_accuracy"] = float((det.predict(Xv) == yv).mean())
    return det
