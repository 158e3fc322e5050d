"""scikit-learn style wrappers around the encrypted pipeline.

Nothing here is trained: ``fit`` lowers the model and binds weights (given or
seeded random), after which ``predict`` runs every sample through the
simulated ciphertext program.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import matvec
from .modelspec import ModelSpec, check_weights, load_model, random_weights, read_weights
from .netcompile import execute, lower
from .slotvec import MeterContext, OpTally, ShapeError, encrypt

KERNELS = ("hs", "lola-dense", "lola-stacked")


class EncryptedCNNClassifier(ClassifierMixin, BaseEstimator):
    """Classify images with a packed-ciphertext CNN.

    Parameters
    ----------
    model : str or ModelSpec
        Built-in name, model file path, or a ``ModelSpec``.
    weights : dict, str or None
        ``{label: (W, b)}``, a float32 weights file, or None for seeded random.
    n_slots, policy, fuse
        Passed to :func:`hecnn.netcompile.lower`.
    random_state : int or None
        Seed for random weights.

    Attributes
    ----------
    program_ : LoweredProgram
    weights_ : dict
    classes_ : ndarray of class indices
    report_ : OpReport of the most recent sample
    tally_ : OpTally accumulated over every sample seen by ``decision_function``
    """

    def __init__(self, model="me", weights=None, n_slots=None, policy=None, fuse=True, random_state=None):
        self.model = model
        self.weights = weights
        self.n_slots = n_slots
        self.policy = policy
        self.fuse = fuse
        self.random_state = random_state

    def _model_spec(self) -> ModelSpec:
        spec = self.model if isinstance(self.model, ModelSpec) else load_model(self.model)
        return spec.with_slots(self.n_slots) if self.n_slots is not None else spec

    def fit(self, X=None, y=None):
        spec = self._model_spec()
        self.program_ = lower(spec, policy=self.policy, fuse=self.fuse)
        if self.weights is None:
            weights = random_weights(spec, self.random_state)
        elif isinstance(self.weights, dict):
            weights = self.weights
        else:
            weights = read_weights(self.weights, spec)
        check_weights(spec, weights)
        self.weights_ = weights
        self.model_spec_ = spec
        self.n_features_in_ = spec.input_size
        self.classes_ = np.arange(spec.output_size)
        if X is not None:
            self._images(X)
        return self

    def _images(self, X) -> np.ndarray:
        spec = self.model_spec_
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1 + len(spec.input_shape):
            X = X.reshape(len(X), -1)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != spec.input_size:
            raise ShapeError(f"X has {X.shape[1]} features, model {spec.name} expects {spec.input_size}")
        return X.reshape((len(X),) + spec.input_shape)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "program_")
        images = self._images(X)
        tally = OpTally()
        scores = []
        for image in images:
            logits, report = execute(self.program_, self.weights_, image)
            scores.append(logits)
            tally = tally + report.total()
            self.report_ = report
        self.tally_ = tally
        return np.vstack(scores)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "program_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class PackedMatvec(TransformerMixin, BaseEstimator):
    """``X -> X @ matrix.T`` computed row by row with an encrypted kernel.

    ``n_slots=None`` picks the smallest power of two holding ``m + n - 1``
    slots.  ``tally_`` accumulates the metered operations of ``transform``.
    """

    def __init__(self, matrix=None, kernel="hs", n_slots=None):
        self.matrix = matrix
        self.kernel = kernel
        self.n_slots = n_slots

    def fit(self, X=None, y=None):
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        A = check_array(self.matrix, dtype=np.float64)
        m, n = A.shape
        self.matrix_ = A
        self.n_slots_ = self.n_slots or matvec.next_pow2(m + n - 1)
        self.n_features_in_ = n
        if X is not None:
            check_array(X, dtype=np.float64)
        self.tally_ = OpTally()
        return self

    def _one(self, x, ctx) -> np.ndarray:
        v = encrypt(x, self.n_slots_)
        A = self.matrix_
        if self.kernel == "hs":
            return matvec.hs_matvec(A, v, ctx).slots[:A.shape[0]]
        if self.kernel == "lola-dense":
            return np.array([ct.slots[0] for ct in matvec.lola_dense_matvec(A, v, ctx)])
        ct, perm = matvec.lola_stacked_matvec(A, v, ctx)
        return ct.slots[perm]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "matrix_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, matrix expects {self.n_features_in_}")
        ctx = MeterContext()
        out = np.vstack([self._one(x, ctx) for x in X])
        self.tally_ = self.tally_ + ctx.tally
        return out

    def predicted_cost(self) -> matvec.MatvecCost:
        check_is_fitted(self, "matrix_")
        m, n = self.matrix_.shape
        if self.kernel == "hs":
            return matvec.predict_hs(m, n, self.n_slots_)
        if self.kernel == "lola-dense":
            return matvec.predict_lola_dense(m, n)
        return matvec.predict_lola_stacked(m, n, self.n_slots_)
