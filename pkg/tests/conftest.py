import json

import numpy as np
import pytest

from tabsecmi.dataset import CATEGORICAL, NUMERICAL, Column, TableSchema


@pytest.fixture
def small_schema():
    return TableSchema((Column("age", NUMERICAL), Column("job", CATEGORICAL, ("a", "b"))))


@pytest.fixture
def write_csv(tmp_path):
    def _write(text, name="data.csv"):
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        return p
    return _write


@pytest.fixture
def schema_file(tmp_path, small_schema):
    p = tmp_path / "schema.json"
    p.write_text(json.dumps(small_schema.to_dict()), encoding="utf-8")
    return p


class ConstantPredictor:
    """Noise predictor that ignores its input."""

    def __init__(self, value, d):
        self.value = np.broadcast_to(np.asarray(value, dtype=np.float64), (d,)).copy()
        self.d = d

    def __call__(self, x, t):
        return np.broadcast_to(self.value, np.shape(x)).copy()


class LinearPredictor:
    def __init__(self, scale, d=1):
        self.scale = scale
        self.d = d

    def __call__(self, x, t):
        return self.scale * np.asarray(x, dtype=np.float64)
