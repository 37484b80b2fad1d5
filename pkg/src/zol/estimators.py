"""scikit-learn style wrappers around FB pretraining and ZOL adaptation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adapt import ZolParams, infer_task_latent, run_adaptation
from .envs import OfflineDataset
from .fbmodel import FBModel, FBTrainConfig, reconstruct_reward, train_fb


class FBRepresentation(BaseEstimator, TransformerMixin):
    """Pretrains forward-backward embeddings on an :class:`OfflineDataset`.

    ``transform`` maps states to their backward embeddings ``B(s)``.
    """

    def __init__(self, d=32, gamma=0.98, train_steps=3000, lr=1e-3, batch_size=256,
                 polyak_tau=0.01, ortho_coef=1.0, latent_mix=0.5, f_hidden=(128, 128),
                 b_hidden=(128,), hidden_activation="relu", b_output="identity", seed=0):
        self.d = d
        self.gamma = gamma
        self.train_steps = train_steps
        self.lr = lr
        self.batch_size = batch_size
        self.polyak_tau = polyak_tau
        self.ortho_coef = ortho_coef
        self.latent_mix = latent_mix
        self.f_hidden = f_hidden
        self.b_hidden = b_hidden
        self.hidden_activation = hidden_activation
        self.b_output = b_output
        self.seed = seed

    def _config(self) -> FBTrainConfig:
        return FBTrainConfig(
            batch_size=self.batch_size, train_steps=self.train_steps, lr=self.lr,
            polyak_tau=self.polyak_tau, ortho_coef=self.ortho_coef, latent_mix=self.latent_mix,
            seed=self.seed, d=self.d, gamma=self.gamma, f_hidden=tuple(self.f_hidden),
            b_hidden=tuple(self.b_hidden), hidden_activation=self.hidden_activation,
            b_output=self.b_output)

    def fit(self, X, y=None):
        if not isinstance(X, OfflineDataset):
            raise TypeError("FBRepresentation.fit expects an OfflineDataset")
        self.model_, self.loss_curve_ = train_fb(X, self._config())
        self.n_features_in_ = X.state_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.backward_embed(X)


class ZOLAdapter(BaseEstimator, RegressorMixin):
    """Infers a task latent from reward-labeled states and refines it with ZOL.

    ``representation`` is a fitted :class:`FBRepresentation` or an
    :class:`FBModel`. ``fit(X, y)`` takes states and their rewards and draws
    adaptation batches from them; start states for the forward expectation
    come from ``reset_states`` or, when absent, from ``X``. ``predict``
    returns the reconstructed reward ``B(s)^T z``.
    """

    def __init__(self, representation=None, lr=5e-4, steps=200, lambda_chi=0.001,
                 lambda_trust=0.02, weight_clip=100.0, reset_samples=256, batch_size=1024,
                 norm_eps=1e-6, grad_clip=10.0, center="batch", reset_states=None, seed=0):
        self.representation = representation
        self.lr = lr
        self.steps = steps
        self.lambda_chi = lambda_chi
        self.lambda_trust = lambda_trust
        self.weight_clip = weight_clip
        self.reset_samples = reset_samples
        self.batch_size = batch_size
        self.norm_eps = norm_eps
        self.grad_clip = grad_clip
        self.center = center
        self.reset_states = reset_states
        self.seed = seed

    def _model(self) -> FBModel:
        rep = self.representation
        if isinstance(rep, FBModel):
            return rep
        if isinstance(rep, FBRepresentation):
            check_is_fitted(rep, "model_")
            return rep.model_
        raise TypeError("representation must be a fitted FBRepresentation or an FBModel")

    def params(self) -> ZolParams:
        return ZolParams(lr=self.lr, steps=self.steps, lambda_chi=self.lambda_chi,
                         lambda_trust=self.lambda_trust, weight_clip=self.weight_clip,
                         reset_samples=self.reset_samples, batch_size=self.batch_size,
                         norm_eps=self.norm_eps, grad_clip=self.grad_clip, seed=self.seed,
                         center=self.center)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        model = self._model()
        params = self.params()
        rng = np.random.default_rng(self.seed)
        task = infer_task_latent(model, X, y, seed=self.seed)
        if self.reset_states is not None:
            reset = check_array(self.reset_states, dtype=np.float64)
        else:
            reset = X[rng.choice(len(X), size=min(params.reset_samples, len(X)), replace=False)]

        def draw_batch(r):
            idx = r.integers(0, len(X), size=params.batch_size)
            return X[idx], y[idx]

        r_center = float(y.mean()) if params.center == "global" else None
        result = run_adaptation(model, task.z, draw_batch, reset, params, rng, r_center,
                                task.fallback)
        self.z_init_ = result.z_init
        self.z_ = result.z_final
        self.trace_ = result.trace
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "z_")
        X = check_array(X, dtype=np.float64)
        return reconstruct_reward(self._model(), X, self.z_)
