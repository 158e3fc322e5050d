import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from hecnn.estimator import EncryptedCNNClassifier, PackedMatvec
from hecnn.modelspec import load_model, random_input, random_weights
from hecnn.refmodel import ref_forward
from hecnn.slotvec import ShapeError


@pytest.fixture(scope="module")
def me_images():
    model = load_model("me")
    return model, np.stack([random_input(model, i) for i in range(3)])


def test_classifier_matches_reference(me_images):
    model, X = me_images
    clf = EncryptedCNNClassifier("me", random_state=4).fit()
    scores = clf.decision_function(X)
    weights = random_weights(model, 4)
    ref = np.stack([ref_forward(model, weights, x) for x in X])
    assert np.allclose(scores, ref, atol=1e-7)
    assert np.array_equal(clf.predict(X), ref.argmax(axis=1))
    assert clf.report_.total().as_tuple()[3] == 87
    assert clf.tally_.mul_cc == 2 * len(X)


def test_classifier_accepts_flat_rows(me_images):
    _, X = me_images
    clf = EncryptedCNNClassifier("me", random_state=0).fit(X)
    assert np.array_equal(clf.decision_function(X.reshape(len(X), -1)), clf.decision_function(X))


def test_classifier_params_and_clone():
    clf = EncryptedCNNClassifier("cryptonets-hs", policy="lola-dense", random_state=1)
    params = clf.get_params()
    assert params["policy"] == "lola-dense" and params["model"] == "cryptonets-hs"
    assert clone(clf).get_params() == params


def test_classifier_not_fitted(me_images):
    with pytest.raises(NotFittedError):
        EncryptedCNNClassifier().predict(me_images[1])


def test_classifier_rejects_wrong_width():
    clf = EncryptedCNNClassifier("me", random_state=0).fit()
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((2, 100)))


def test_classifier_with_explicit_weights(me_images):
    model, X = me_images
    weights = random_weights(model, 9)
    a = EncryptedCNNClassifier("me", weights=weights).fit().decision_function(X)
    b = EncryptedCNNClassifier("me", random_state=9).fit().decision_function(X)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kernel", ["hs", "lola-dense", "lola-stacked"])
def test_packed_matvec(kernel):
    rng = np.random.default_rng(0)
    A, X = rng.normal(size=(6, 10)), rng.normal(size=(5, 10))
    t = PackedMatvec(A, kernel=kernel)
    out = t.fit_transform(X)
    assert np.allclose(out, X @ A.T)
    cost = t.predicted_cost()
    assert t.tally_.rot == 5 * cost.rotations
    assert t.tally_.mul_pc == 5 * cost.total_multiplications


def test_packed_matvec_in_pipeline():
    rng = np.random.default_rng(1)
    A, X = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    pipe = make_pipeline(PackedMatvec(A), FunctionTransformer(np.square))
    assert np.allclose(pipe.fit_transform(X), (X @ A.T) ** 2)


def test_packed_matvec_validation():
    with pytest.raises(ValueError):
        PackedMatvec(np.eye(2), kernel="magic").fit()
    t = PackedMatvec(np.eye(2)).fit()
    with pytest.raises(ShapeError):
        t.transform(np.ones((1, 3)))
