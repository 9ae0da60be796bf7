"""Clinical-only baseline: L2-penalized logistic regression fitted by Newton's method."""

import logging
import warnings

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import check_binary_labels

log = logging.getLogger(__name__)


class ClinicalLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary logistic regression on an encoded clinical matrix.

    Minimizes the mean negative log-likelihood plus ``l2 / (2 n) * ||w||^2``;
    the intercept is not penalized. Iteration stops once the gradient norm
    drops below ``tol`` or after ``max_iter`` Newton steps.

    Parameters
    ----------
    l2 : float
        Ridge strength (lambda). Keeps the fit bounded under perfect separation.
    tol : float
    max_iter : int
    """

    def __init__(self, l2=1.0, tol=1e-6, max_iter=1000):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter

    def _objective_parts(self, theta, X1, y):
        n = X1.shape[0]
        p = expit(X1 @ theta)
        penalty = np.r_[0.0, np.full(X1.shape[1] - 1, self.l2)]
        eps = 1e-15
        loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        loss += 0.5 * np.sum(penalty * theta**2) / n
        grad = X1.T @ (p - y) / n + penalty * theta / n
        hess = (X1.T * (p * (1 - p))) @ X1 / n + np.diag(penalty) / n
        return loss, grad, hess

    def loss(self, theta, X, y):
        X1 = np.column_stack([np.ones(len(X)), np.asarray(X, dtype=float).reshape(len(X), -1)])
        return self._objective_parts(np.asarray(theta, dtype=float), X1, np.asarray(y, float))[0]

    def fit(self, X, y):
        y = check_binary_labels(y, "y").astype(float)
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        X1 = np.column_stack([np.ones(len(y)), X])
        self.classes_ = np.array([0, 1])
        theta = np.zeros(X1.shape[1])
        prior = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        theta[0] = np.log(prior / (1 - prior))
        converged = False
        for it in range(self.max_iter):
            loss, grad, hess = self._objective_parts(theta, X1, y)
            if np.linalg.norm(grad) < self.tol:
                converged = True
                break
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            # backtracking keeps Newton monotone when far from the optimum
            t = 1.0
            while t > 1e-8:
                cand = theta - t * step
                if self._objective_parts(cand, X1, y)[0] <= loss:
                    break
                t *= 0.5
            theta = cand
        self.n_iter_ = it
        self.converged_ = converged
        self.intercept_ = float(theta[0])
        self.coef_ = theta[1:].copy()
        self.grad_norm_ = float(np.linalg.norm(self._objective_parts(theta, X1, y)[1]))
        if _separable(X, y):
            warnings.warn("perfect separation detected; relying on the L2 penalty")
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        return self.intercept_ + X @ self.coef_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


def _separable(X, y):
    """Cheap check: some single column splits the classes perfectly."""
    if X.shape[1] == 0:
        return False
    pos, neg = X[y == 1], X[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        return False
    return bool(np.any((pos.min(0) > neg.max(0)) | (pos.max(0) < neg.min(0))))


def fit_logistic(clinical_matrix, labels, l2=1.0):
    return ClinicalLogisticRegression(l2=l2).fit(clinical_matrix, labels)
