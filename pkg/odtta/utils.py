import json
import os

import numpy as np
import pandas as pd

__all__ = ('save_result', 'read_json', 'write_json', 'save_trace', 'load_trace')


def save_result(path: str, result: dict):
    """ Append one row to a CSV file, writing the header on creation. """
    file_mode = 'a' if os.path.exists(path) else 'w'
    with open(path, file_mode) as file:
        pd.DataFrame([result]).to_csv(file, index=False, header=(file_mode == 'w'))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def read_json(path: str):
    with open(path, 'r') as f:
        return json.load(f)


def write_json(path: str, document):
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w') as f:
        json.dump(_plain(document), f, indent=2)


def save_trace(path: str, trace: pd.DataFrame):
    if os.path.dirname(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
    trace.to_csv(path, index=False)


def load_trace(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')
