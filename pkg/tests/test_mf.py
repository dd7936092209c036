import numpy as np
import pytest
from scipy import sparse

from mrCore.mf import MFError, als_factorize, mf_complete


def _low_rank(n_users=30, n_items=20, rank=2, observed=0.7, seed=0):
    rng = np.random.default_rng(seed)
    full = rng.normal(size=(n_users, rank)) @ rng.normal(size=(n_items, rank)).T
    mask = rng.random(full.shape) < observed
    rows, cols = np.nonzero(mask)
    observed_matrix = sparse.coo_matrix((full[rows, cols], (rows, cols)), shape=full.shape)
    return full, mask, observed_matrix


def test_als_recovers_low_rank_matrix():
    full, mask, observed = _low_rank()
    pred = mf_complete(observed, rank=2, epochs=100, reg=1e-4)
    rmse = np.sqrt(np.mean((pred[~mask] - full[~mask]) ** 2))
    assert rmse < 0.1 * full.std()


def test_sgd_fits_observations():
    full, mask, observed = _low_rank(seed=1)
    pred = mf_complete(observed, rank=2, epochs=100, reg=1e-3, lr=0.02, method="sgd")
    rmse = np.sqrt(np.mean((pred[mask] - full[mask]) ** 2))
    assert rmse < 0.5 * full[mask].std()


def test_unobserved_rows_and_columns_predict_mean():
    rows = np.array([0, 0, 1])
    cols = np.array([0, 1, 1])
    vals = np.array([1.0, 2.0, 3.0])
    observed = sparse.coo_matrix((vals, (rows, cols)), shape=(3, 3))
    pred = mf_complete(observed, rank=1, epochs=5)
    np.testing.assert_allclose(pred[2], 2.0)
    np.testing.assert_allclose(pred[:, 2], 2.0)


def test_no_observations_predict_zero():
    pred = mf_complete(sparse.coo_matrix((4, 3)), rank=2)
    assert pred.shape == (4, 3)
    assert not pred.any()


def test_als_shapes():
    _, _, observed = _low_rank(n_users=7, n_items=5)
    U, V = als_factorize(observed, rank=3, epochs=2)
    assert U.shape == (7, 3) and V.shape == (5, 3)


def test_bad_arguments():
    _, _, observed = _low_rank(n_users=4, n_items=4)
    with pytest.raises(MFError):
        mf_complete(observed, rank=0)
    with pytest.raises(MFError, match="unknown factorization method"):
        mf_complete(observed, rank=1, method="svd")
