"""Input validation helpers for the estimator API."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .errors import ConfigError
from .headmodel import HeadModel
from .trainloop import PoseDataset, PoseRecord


def as_pose_dataset(X, model: HeadModel) -> PoseDataset:
    """Coerce estimator input into a pose dataset.

    Accepts None (canonical pose only), a numeric array of shape
    [n_samples, n_expression + 3 * n_joints] (expression coefficients
    followed by flattened per-joint axis-angles), or an iterable of
    {"psi": [...], "phi": [...]} mappings.
    """
    if X is None:
        return PoseDataset.canonical_only(model)
    n_psi = model.n_expression
    n_phi = 3 * model.n_joints
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], dict):
        records = []
        for i, obj in enumerate(X):
            try:
                psi = np.asarray(obj["psi"], np.float32).reshape(n_psi)
                phi = np.asarray(obj["phi"], np.float32).reshape(model.n_joints, 3)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"pose record {i}: {exc}") from exc
            records.append(PoseRecord(psi, phi))
        return PoseDataset(records, source="estimator")
    arr = check_array(X, dtype=np.float32, ensure_2d=True)
    if arr.shape[1] != n_psi + n_phi:
        raise ConfigError(
            f"pose matrix has {arr.shape[1]} columns, expected "
            f"{n_psi + n_phi} (= {n_psi} expression + {n_phi} joint values)")
    records = [PoseRecord(row[:n_psi].copy(), row[n_psi:].reshape(model.n_joints, 3).copy())
               for row in arr]
    return PoseDataset(records, source="estimator")
