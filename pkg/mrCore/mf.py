############################################################
# misret: offline return-conditioned recommendation        #
# Matrix-factorization completion of sparse interactions.  #
############################################################

import logging

import numpy as np
from scipy import sparse

from .utils import setup_log

log = setup_log("mrCore.mf")


class MFError(Exception):
    pass


def _observations(interactions):
    coo = sparse.coo_matrix(interactions)
    return coo.shape, coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data.astype(np.float64)


def _ridge_rows(fixed, rows, cols, vals, n_rows, rank, reg):
    """
    Solves every row of the free factor against the fixed factor.
    Rows with no observations stay at zero.
    """
    out = np.zeros((n_rows, rank))
    order = np.argsort(rows, kind='stable')
    rows, cols, vals = rows[order], cols[order], vals[order]
    bounds = np.searchsorted(rows, np.arange(n_rows + 1))
    eye = reg * np.eye(rank)
    for i in range(n_rows):
        lo, hi = bounds[i], bounds[i + 1]
        if lo == hi:
            continue
        Q = fixed[cols[lo:hi]]
        out[i] = np.linalg.solve(Q.T @ Q + eye, Q.T @ vals[lo:hi])
    return out


def als_factorize(interactions, rank, epochs=20, seed=0, reg=0.1):
    """
    Alternating least squares on the observed entries only.

    :param interactions: Sparse users x items matrix. Stored entries are observations.
    :param rank: Number of latent dimensions.
    :param epochs: Number of (users, items) sweeps.
    :param seed: Seed of the initial item factors.
    :param reg: L2 regularization of each ridge solve.
    :return: (user_factors, item_factors)
    :rtype: tuple
    """
    if rank <= 0:
        raise MFError("rank must be positive, got %d" % rank)
    (n_users, n_items), rows, cols, vals = _observations(interactions)
    rng = np.random.default_rng(seed)
    U = np.zeros((n_users, rank))
    V = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(n_items, rank))
    if vals.size == 0:
        return U, np.zeros((n_items, rank))

    for epoch in range(epochs):
        U = _ridge_rows(V, rows, cols, vals, n_users, rank, reg)
        V = _ridge_rows(U, cols, rows, vals, n_items, rank, reg)
        if log.isEnabledFor(logging.DEBUG):
            resid = np.einsum('ij,ij->i', U[rows], V[cols]) - vals
            log.debug("ALS epoch %d: train RMSE %.5f" % (epoch, np.sqrt(np.mean(resid ** 2))))
    return U, V


def sgd_factorize(interactions, rank, epochs=20, seed=0, reg=0.1, lr=0.05):
    """
    Stochastic gradient descent on the observed entries, one shuffled pass per epoch.
    """
    if rank <= 0:
        raise MFError("rank must be positive, got %d" % rank)
    (n_users, n_items), rows, cols, vals = _observations(interactions)
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 0.1, size=(n_users, rank))
    V = rng.normal(0.0, 0.1, size=(n_items, rank))
    for _ in range(epochs):
        for n in rng.permutation(vals.size):
            i, j = rows[n], cols[n]
            err = vals[n] - U[i] @ V[j]
            u_old = U[i].copy()
            U[i] += lr * (err * V[j] - reg * U[i])
            V[j] += lr * (err * u_old - reg * V[j])
    return U, V


def mf_complete(interactions, rank, epochs=20, seed=0, reg=0.1, lr=0.05, method="als"):
    """
    Predicts every user x item entry from the observed ones.

    Rows or columns without observations predict the global mean of the
    observations. With no observations at all every prediction is 0.

    :return: Dense predicted matrix.
    :rtype: numpy.ndarray
    """
    if rank <= 0:
        raise MFError("rank must be positive, got %d" % rank)
    (n_users, n_items), rows, cols, vals = _observations(interactions)
    if vals.size == 0:
        log.warning("mf_complete: no observed interactions, predicting 0 everywhere")
        return np.zeros((n_users, n_items))

    if method == "als":
        U, V = als_factorize(interactions, rank, epochs=epochs, seed=seed, reg=reg)
    elif method == "sgd":
        U, V = sgd_factorize(interactions, rank, epochs=epochs, seed=seed, reg=reg, lr=lr)
    else:
        raise MFError("unknown factorization method '%s'" % method)

    pred = U @ V.T
    mean = float(vals.mean())
    pred[np.bincount(rows, minlength=n_users) == 0, :] = mean
    pred[:, np.bincount(cols, minlength=n_items) == 0] = mean
    return pred
