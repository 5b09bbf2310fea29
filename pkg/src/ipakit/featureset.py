from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .matcore import as_matrix

CAPTURE_POINT = "input-to-target-linear"


@dataclass(frozen=True)
class FeatureSet:
    """Hidden states captured at the input of one target linear map.

    ``data`` holds one row per token (example order, then token order).
    ``model_hash`` binds the rows to the frozen host that produced them.
    """

    data: np.ndarray
    weight_name: str = ""
    layer_id: int = -1
    model_hash: str = ""
    capture_point: str = CAPTURE_POINT

    def __post_init__(self):
        data = as_matrix(self.data, "features")
        data = np.array(data, dtype=np.float64, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def d_in(self):
        return self.data.shape[1]


def feature_matrix(features):
    """Accept a FeatureSet or a bare 2-D array and return the data matrix."""
    if isinstance(features, FeatureSet):
        return features.data
    m = as_matrix(features, "features")
    if m.shape[0] < 1:
        raise ShapeError("feature set is empty")
    return m
