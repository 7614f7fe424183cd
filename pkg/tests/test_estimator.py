import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from boussinesq_stab import FeedbackStabilizer, estimate_decay
from conftest import FIXTURE_UNSTABLE


@pytest.fixture(scope="module")
def fitted():
    return FeedbackStabilizer().fit()


def test_fit_attributes(fitted):
    assert fitted.n_unstable_ == 2
    assert np.allclose(fitted.decomposition_.unstable.real, FIXTURE_UNSTABLE, rtol=1e-8)
    assert fitted.rank_report_.passed
    assert fitted.law_.K == 1


def test_transform_matches_law(fitted, rng):
    X = rng.standard_normal((3, fitted.n_features_in_))
    out = fitted.transform(X)
    assert out.shape == (3, 2)
    nu, mu = fitted.law_.coefficients(X[1])
    assert np.allclose(out[1], [nu[0], mu[0]])
    with pytest.raises(ValueError):
        fitted.transform(X[:, :5])


def test_not_fitted():
    with pytest.raises(NotFittedError):
        FeedbackStabilizer().transform(np.zeros((1, 3)))


def test_params_round_trip():
    est = FeedbackStabilizer(mode="reduced_d2", gamma1=4.0)
    assert est.get_params()["mode"] == "reduced_d2"
    assert est.set_params(gamma1=3.0).gamma1 == 3.0


def test_stable_model_has_no_feedback():
    est = FeedbackStabilizer(amplitude=64.0).fit()
    assert est.n_unstable_ == 0 and est.law_ is None
    assert est.transform(np.zeros((2, est.n_features_in_))).shape == (2, 0)


def test_simulate_closed_loop(fitted):
    R, _, _ = fitted.decomposition_.real_form
    w0 = R[:, 0] / fitted.generator_.layout.norm(R[:, 0])
    tr = fitted.simulate(w0, 3.0, 0.01)
    assert estimate_decay(tr).gamma_fit >= 0.9 * 2.0
