"""scikit-learn style wrapper around the adaptation engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .engine import TrainConfig, fit_models, make_subject, mean_dice, predict_volume
from .validation import check_label_list, check_volume_list


class C2DASegmenter(BaseEstimator):
    """Tissue segmenter trained on labelled source volumes and unlabelled target volumes.

    ``fit(X, y, X_target=...)`` takes lists of :class:`~c2da.volume.Volume`
    (source), matching :class:`~c2da.volume.LabelMap` and target volumes.
    ``predict`` returns one ``LabelMap`` per input volume and ``score`` the
    mean tissue Dice against reference labels.
    """

    def __init__(self, variant="Full", alpha=0.05, epochs=40, batch_size=8, working_size=(128, 192),
                 base_width=32, generator_width=32, steps_per_epoch=None, beta=3.0, gamma=0.1,
                 backward_cycle_weight=0.0, adv_form="nonsaturating", lr_main=1e-4, lr_disc=1e-5, seed=0):
        self.variant = variant
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.working_size = working_size
        self.base_width = base_width
        self.generator_width = generator_width
        self.steps_per_epoch = steps_per_epoch
        self.beta = beta
        self.gamma = gamma
        self.backward_cycle_weight = backward_cycle_weight
        self.adv_form = adv_form
        self.lr_main = lr_main
        self.lr_disc = lr_disc
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X, y, X_target=None, y_target=None, gw=None, gw_target=None):
        cfg = self._config()
        X = check_volume_list(X, "X")
        y = check_label_list(y, X, "y")
        X_target = check_volume_list(X_target or [], "X_target", allow_empty=True)
        if cfg.reads_target_labels:
            y_target = check_label_list(y_target, X_target, "y_target")
        elif y_target is not None:
            raise ValueError(f"variant {cfg.variant} is unsupervised on the target; y_target must be None")
        gw = gw if gw is not None else [0] * len(X)
        gw_target = gw_target if gw_target is not None else [0] * len(X_target)
        src = [make_subject(f"source_{i}", g, v, lab) for i, (v, lab, g) in enumerate(zip(X, y, gw))]
        tgt = [make_subject(f"target_{i}", g, v, y_target[i] if y_target else None)
               for i, (v, g) in enumerate(zip(X_target, gw_target))]
        self.models_, self.history_ = fit_models(cfg, src, tgt)
        self.config_ = cfg
        return self

    def predict(self, X):
        check_is_fitted(self, "models_")
        return [predict_volume(self.models_.segmentor, v, self.config_) for v in check_volume_list(X, "X")]

    def score(self, X, y):
        preds = self.predict(X)
        y = check_label_list(y, X, "y")
        return float(np.mean([mean_dice(p, g) for p, g in zip(preds, y)]))
