"""Estimator-style front end so the inpainter composes with the usual
fit/transform ecosystem.

``fit`` trains the generator adversarially on complete images (random
hole masks are drawn internally).  ``transform``/``predict`` complete
images whose missing pixels are marked with NaN, the same convention the
standard imputers use; ``inpaint`` is the explicit image+mask entry
point.  Estimator parameters follow the usual contract: set verbatim in
``__init__``, validated and consumed in ``fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import validation
from .generator import GeneratorWeights, inpaint_pipeline, load_weights, save_weights
from .masks import MaskSpec
from .resample import MethodPair, resize_to
from .training import TrainingConfig, train


class CRAInpainter(BaseEstimator, TransformerMixin):
    """Image inpainter with a low-resolution generator and attention-driven
    high-frequency residual transfer.

    Parameters
    ----------
    width_mult : channel-width multiplier for the generator/critic.
    image_size : working resolution of the networks; inputs to transform
        may be any size (padded to multiples of this when ``pad=True``).
    gates_coarse, gates_refine : gate kind per stage
        ('gc', 'lwgc_ds', 'lwgc_pw', 'lwgc_sc').
    down, up : image down/up-sampling methods used around the network.
    steps : generator updates performed by fit.
    batch_size, lr, d_steps_per_g : optimisation settings.
    max_hole_fraction : area cap for the random training masks.
    seed : seed for weight init, masks and batch sampling.
    pad : reflect-pad transform inputs to the required multiple.
    """

    def __init__(
        self,
        width_mult: float = 1.0,
        image_size: int = 512,
        gates_coarse: str = "lwgc_sc",
        gates_refine: str = "lwgc_pw",
        down: str = "averaging",
        up: str = "bilinear",
        steps: int = 200,
        batch_size: int = 8,
        lr: float = 1e-4,
        d_steps_per_g: int = 5,
        max_hole_fraction: float = 0.25,
        seed: int = 0,
        pad: bool = True,
    ):
        self.width_mult = width_mult
        self.image_size = image_size
        self.gates_coarse = gates_coarse
        self.gates_refine = gates_refine
        self.down = down
        self.up = up
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.d_steps_per_g = d_steps_per_g
        self.max_hole_fraction = max_hole_fraction
        self.seed = seed
        self.pad = pad

    # -- training ------------------------------------------------------

    def fit(self, X, y=None):
        """Train the generator on complete images.

        X is an (n, h, w, 3) array (uint8 or float in [-1, 1]) or a list
        of such images; they are resized to the working resolution.
        """
        imgs = validation.as_image_batch(X)
        s = self.image_size
        if imgs.shape[2:] != (s, s):
            imgs = np.stack([resize_to(im, s, s) for im in imgs]).astype(np.float32)
            imgs = np.clip(imgs, -1.0, 1.0)
        cfg = TrainingConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            d_steps_per_g=self.d_steps_per_g,
            seed=self.seed,
            image_size=s,
            width_mult=self.width_mult,
            gates_coarse=self.gates_coarse,
            gates_refine=self.gates_refine,
            checkpoint_every=0,
            mask=MaskSpec(max_area_fraction=self.max_hole_fraction),
        )
        result = train(cfg, imgs)
        self.weights_ = result.weights
        self.history_ = result.history
        self.n_params_ = result.weights.n_params
        return self

    # -- inference -----------------------------------------------------

    def _require_fitted(self) -> GeneratorWeights:
        if not hasattr(self, "weights_"):
            raise NotFittedError(
                "this CRAInpainter is not fitted; call fit or load weights"
            )
        return self.weights_

    def inpaint(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Complete one (h, w, 3) image under a binary (h, w) hole mask."""
        weights = self._require_fitted()
        chw = validation.as_chw_float(np.asarray(image))
        mask = np.asarray(mask).astype(np.float32)
        base = weights.base_size
        h, w = chw.shape[1:]
        if self.pad and (h % base or w % base or h < base or w < base):
            chw, (h0, w0) = validation.reflect_pad_to_multiple(chw, base)
            mask = validation.zero_pad_to_multiple(mask, base)
        else:
            h0, w0 = h, w
        pair = MethodPair(down=self.down, up=self.up)
        result = inpaint_pipeline(chw, mask, weights, pair)
        out = result.image[:, :h0, :w0]
        return out.transpose(1, 2, 0)

    def transform(self, X) -> np.ndarray:
        """Complete NaN-marked holes in (n, h, w, 3) float images."""
        self._require_fitted()
        arr = np.asarray(X, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        out = np.empty_like(arr)
        for i, im in enumerate(arr):
            clean, mask = validation.split_nan_holes(im)
            out[i] = self.inpaint(clean, mask)
        return out

    def predict(self, X) -> np.ndarray:
        return self.transform(X)

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        save_weights(self._require_fitted(), path)

    @classmethod
    def load(cls, path, **params) -> "CRAInpainter":
        weights = load_weights(path)
        est = cls(
            width_mult=weights.width_mult,
            image_size=weights.base_size,
            gates_coarse=weights.gates_coarse,
            gates_refine=weights.gates_refine,
            **params,
        )
        est.weights_ = weights
        est.n_params_ = weights.n_params
        est.history_ = []
        return est
