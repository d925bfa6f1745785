"""Shared helpers for comparing fits with the reported simulation tables."""

import numpy as np

from proctopic.fit import align_labels
from proctopic.model import ModelParams
from proctopic.simulate import study1_spec


def study1_expected(K):
    ex = study1_spec()["expected"][str(K)]
    return np.array(ex["B"]), np.array(ex["norm_R"])


def study1_errors(params: ModelParams):
    """(max |B - table|, max |norm(R) - table|) after aligning labels to the table."""
    B, nR = study1_expected(params.K)
    K = params.K
    ref = ModelParams(B=B / B.sum(1, keepdims=True), G=np.zeros((K, K)), p0=np.full(K, 1 / K), R=nR + 1e-3,
                      a=1.0, d=1.0)
    q = params.permute(align_labels(params, ref))
    return float(np.abs(q.B - B).max()), float(np.abs(q.norm_R() - nR).max())
