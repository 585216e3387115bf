"""scikit-learn style wrapper around model construction, training and inference."""

from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import CurriculumSchedule, ImageSet
from .metrics import border_for, psnr
from .model import LiwtModel, ModelConfig
from .training import TrainConfig, fit
from .validation import check_image, check_images, check_scale


class LiwtSuperResolver(RegressorMixin, BaseEstimator):
    """Arbitrary-scale super-resolver.

    ``fit`` takes HR training images (``H x W x 3`` arrays in ``[0, 1]``) and
    synthesizes LR/HR pairs on the fly; ``predict`` upsamples LR images by
    ``scale``; ``score`` is the mean PSNR against HR references.

    Examples
    --------
    >>> est = LiwtSuperResolver(width=16, epochs=2, patch=8, batch=1)   # doctest: +SKIP
    >>> est.fit([hr_image]).predict([lr_image], scale=2.5)            # doctest: +SKIP
    """

    def __init__(
        self,
        width=32,
        encoder_blocks=4,
        werb_blocks=4,
        heads=8,
        pe_depth=10,
        decoder_hidden=256,
        epochs=10,
        batch=4,
        patch=24,
        lr=1e-4,
        lr_step=200,
        scale_boundaries=(0.25, 0.5),
        scale_ranges=((1.0, 4.0), (1.0, 6.0), (1.0, 8.0)),
        scale=2.0,
        random_state=0,
        run_dir=None,
    ):
        self.width = width
        self.encoder_blocks = encoder_blocks
        self.werb_blocks = werb_blocks
        self.heads = heads
        self.pe_depth = pe_depth
        self.decoder_hidden = decoder_hidden
        self.epochs = epochs
        self.batch = batch
        self.patch = patch
        self.lr = lr
        self.lr_step = lr_step
        self.scale_boundaries = scale_boundaries
        self.scale_ranges = scale_ranges
        self.scale = scale
        self.random_state = random_state
        self.run_dir = run_dir

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            width=self.width, encoder_blocks=self.encoder_blocks, werb_blocks=self.werb_blocks,
            heads=self.heads, pe_depth=self.pe_depth, decoder_hidden=self.decoder_hidden,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        sched = CurriculumSchedule(tuple(self.scale_boundaries), tuple(tuple(r) for r in self.scale_ranges))
        need = int(np.floor(self.patch * sched.max_scale))
        small = [i for i, im in enumerate(images) if min(im.shape[:2]) < need]
        if small:
            raise ValueError(f"X[{small[0]}] is smaller than the {need}px crop the largest scale needs")
        cfg = TrainConfig(epochs=self.epochs, batch=self.batch, patch=self.patch, lr=self.lr,
                          lr_step=self.lr_step, checkpoint_every=max(1, self.epochs), seed=self.random_state)
        self.model_ = LiwtModel(self._model_config(), seed=self.random_state)
        image_set = ImageSet(images, [f"X[{i}]" for i in range(len(images))])
        if self.run_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                manifest = fit(self.model_, image_set, sched, cfg, tmp)
        else:
            manifest = fit(self.model_, image_set, sched, cfg, self.run_dir)
        self.loss_history_ = manifest.losses
        self.n_features_in_ = 3
        return self

    def predict(self, X, scale=None):
        """Super-resolve each LR image; returns a list of clamped ``[0, 1]`` arrays."""
        check_is_fitted(self, "model_")
        s_h, s_w = check_scale(self.scale if scale is None else scale)
        out = []
        for i, img in enumerate(check_images(X)):
            if img.shape[0] % 2 or img.shape[1] % 2:
                raise ValueError(f"X[{i}]: LR extents must be even, got {img.shape[:2]}")
            out.append(np.clip(self.model_.super_resolve(img, s_h, s_w), 0.0, 1.0))
        return out

    def score(self, X, y, sample_weight=None):
        """Mean PSNR (dB) of ``predict(X)`` against HR references ``y``."""
        preds = self.predict(X)
        refs = [check_image(r, "y") for r in y]
        crop = border_for(max(check_scale(self.scale)))
        vals = [psnr(p, r, crop) for p, r in zip(preds, refs)]
        return float(np.average(vals, weights=sample_weight))
