"""scikit-learn style wrappers around the functional core.

The estimators only translate between sklearn conventions (arbitrary class
labels, ``random_state``, ``get_params``) and the dataclass configs; every
numerical step lives in the underlying modules.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import dividemix, gmm, nn, noise, training
from .datasets import Dataset


def _encode(y):
    classes, encoded = np.unique(y, return_inverse=True)
    return classes, encoded.astype(np.int64)


class MlpClassifier(ClassifierMixin, BaseEstimator):
    """Rectifier MLP trained with (optionally entropy-penalised) cross-entropy."""

    def __init__(self, hidden=(64, 64), epochs=40, learning_rate=0.02, momentum=0.9,
                 weight_decay=5e-4, batch_size=64, schedule=((20, 0.1), (30, 0.1)),
                 cp_weight=0.0, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.schedule = schedule
        self.cp_weight = cp_weight
        self.random_state = random_state

    def _config(self) -> training.StandardConfig:
        sgd = nn.SgdConfig(self.learning_rate, self.momentum, self.weight_decay,
                           tuple(self.schedule), self.batch_size)
        return training.StandardConfig(tuple(self.hidden), self.epochs, self.cp_weight, sgd,
                                       int(self.random_state))

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, enc = _encode(y)
        test = None
        if eval_set is not None:
            Xt, yt = eval_set
            test = (check_array(Xt, dtype=np.float64), np.searchsorted(self.classes_, yt))
        self.model_, self.metrics_ = training.train_standard(
            X, enc, self._config(), test=test, n_classes=len(self.classes_))
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return nn.predict_proba(self.model_, check_array(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class RobustDivideMixClassifier(ClassifierMixin, BaseEstimator):
    """Network pair trained with perturbation-guided division and MixMatch.

    ``fit`` expects the noisy training labels. Passing ``clean_labels`` (an
    audit-only ground truth) fills labeled-set precision/recall in ``metrics_``.
    """

    def __init__(self, hidden=(64, 64), warmup_epochs=None, cp_weight=None, perturb_step=None,
                 tau_p=None, tau_c=None, epochs=None, use_bayes_gmm=True, use_perturbation=True,
                 use_filtering=True, learning_rate=None, batch_size=None, vb_tol=0.01,
                 vb_max_iter=20, n_jobs=None, random_state=0):
        self.hidden = hidden
        self.warmup_epochs = warmup_epochs
        self.cp_weight = cp_weight
        self.perturb_step = perturb_step
        self.tau_p = tau_p
        self.tau_c = tau_c
        self.epochs = epochs
        self.use_bayes_gmm = use_bayes_gmm
        self.use_perturbation = use_perturbation
        self.use_filtering = use_filtering
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.vb_tol = vb_tol
        self.vb_max_iter = vb_max_iter
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _config(self) -> dividemix.DivideConfig:
        defaults = dividemix.DivideConfig()
        sgd = defaults.sgd
        if self.learning_rate is not None or self.batch_size is not None:
            sgd = nn.SgdConfig(
                self.learning_rate if self.learning_rate is not None else sgd.learning_rate,
                sgd.momentum, sgd.weight_decay, sgd.schedule,
                self.batch_size if self.batch_size is not None else sgd.batch_size,
            )

        def pick(value, default):
            return default if value is None else value

        return dividemix.DivideConfig(
            hidden=tuple(self.hidden),
            warmup_epochs=pick(self.warmup_epochs, defaults.warmup_epochs),
            cp_weight=pick(self.cp_weight, defaults.cp_weight),
            perturb_step=pick(self.perturb_step, defaults.perturb_step),
            tau_p=pick(self.tau_p, defaults.tau_p), tau_c=pick(self.tau_c, defaults.tau_c),
            epochs=pick(self.epochs, defaults.epochs),
            vb=gmm.VbConfig(tol=self.vb_tol, max_iter=self.vb_max_iter, seed=int(self.random_state)),
            sgd=sgd, seed=int(self.random_state),
            use_bayes_gmm=self.use_bayes_gmm,
            use_perturbation=self.use_perturbation,
            use_filtering=self.use_filtering,
        )

    def fit(self, X, y, eval_set=None, clean_labels=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, enc = _encode(y)
        test = None
        if eval_set is not None:
            Xt, yt = eval_set
            test = (check_array(Xt, dtype=np.float64), np.searchsorted(self.classes_, yt))
        clean_mask = None
        if clean_labels is not None:
            clean_mask = np.asarray(clean_labels) == np.asarray(y)
        self.pair_, self.metrics_ = dividemix.run(
            X, enc, self._config(), test=test, clean_mask=clean_mask, n_classes=len(self.classes_),
            n_jobs=self.n_jobs or 1)
        self.stage1_ = self.pair_.stage1
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "pair_")
        return dividemix.joint_predict_proba(self.pair_, check_array(X, dtype=np.float64)) / 2.0

    def predict(self, X):
        check_is_fitted(self, "pair_")
        return self.classes_[dividemix.joint_predict(self.pair_, check_array(X, dtype=np.float64))]


class LossMixture(BaseEstimator):
    """Two-component 1-D mixture over loss values; ``predict_proba[:, 0]`` is the low-mean posterior."""

    def __init__(self, bayes=True, tol=0.01, max_iter=20, weight_concentration=1.0,
                 mean_precision=1.0, precision_shape=1.0, var_floor=1e-6, random_state=0):
        self.bayes = bayes
        self.tol = tol
        self.max_iter = max_iter
        self.weight_concentration = weight_concentration
        self.mean_precision = mean_precision
        self.precision_shape = precision_shape
        self.var_floor = var_floor
        self.random_state = random_state

    def fit(self, losses, y=None):
        cfg = gmm.VbConfig(self.tol, self.max_iter, self.weight_concentration, self.mean_precision,
                           self.precision_shape, self.var_floor, int(self.random_state))
        self.fit_ = gmm.fit_mixture(np.ravel(losses), cfg, bayes=self.bayes)
        self.converged_ = self.fit_.converged
        self.n_iter_ = self.fit_.iterations_used
        return self

    def predict_proba(self, losses):
        check_is_fitted(self, "fit_")
        w = gmm.posterior_low_mean(self.fit_, np.ravel(losses))
        return np.column_stack([w, 1.0 - w])

    def predict(self, losses, threshold=0.5):
        """1 for values judged clean (low-mean posterior >= ``threshold``)."""
        return (self.predict_proba(losses)[:, 0] >= threshold).astype(np.int64)


class LabelNoiseInjector(BaseEstimator):
    """Corrupts labels with one of the four noise generators via ``fit_resample``."""

    def __init__(self, kind="badlabel", ratio=0.4, badlabel_epochs=30, badlabel_alpha=0.1,
                 random_state=0):
        self.kind = kind
        self.ratio = ratio
        self.badlabel_epochs = badlabel_epochs
        self.badlabel_alpha = badlabel_alpha
        self.random_state = random_state

    def fit_resample(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, enc = _encode(y)
        D = Dataset(X, enc, len(self.classes_))
        seed = int(self.random_state)
        self.flag_ = None
        if self.kind == "badlabel":
            cfg = noise.BadLabelConfig(epochs=self.badlabel_epochs, alpha=self.badlabel_alpha, seed=seed)
            self.noisy_labels_, self.flag_ = noise.craft_badlabel(D, self.ratio, cfg)
        else:
            self.noisy_labels_ = noise.make_noise(self.kind, D, self.ratio, seed)
        return X, self.classes_[self.noisy_labels_.noisy]
