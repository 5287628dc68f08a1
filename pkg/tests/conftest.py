import sys
import textwrap

import numpy as np
import pytest

from himerge import Checkpoint, TensorRecord
from himerge.checkpoint import encode_from_f32


def record_from_array(name, arr, dtype="f32"):
    arr = np.asarray(arr, dtype=np.float32)
    return TensorRecord(name, dtype, arr.shape, encode_from_f32(dtype, arr))


def checkpoint_from_arrays(arrays, dtype="f32", metadata=None):
    """Checkpoint from {name: arraylike}, all tensors in one dtype."""
    records = [record_from_array(name, arr, dtype) for name, arr in arrays.items()]
    return Checkpoint(records, metadata)


def dyadic_random(rng, shape, scale=1024, span=4096):
    """Random floats on a dyadic grid (multiples of 1/scale), exact in f32.

    Sums and differences of grid values stay on the grid and well inside
    f32's 24-bit significand, so delta round trips are bit-exact.
    """
    ints = rng.integers(-span, span + 1, size=shape)
    return (ints / scale).astype(np.float32)


def random_checkpoint(rng, n_tensors=4, max_elems=32, dtype="f32", dyadic=True):
    arrays = {}
    for i in range(n_tensors):
        rank = int(rng.integers(0, 3))
        shape = tuple(int(rng.integers(1, max(2, int(max_elems ** (1 / max(rank, 1)))))) for _ in range(rank))
        if dyadic:
            arr = dyadic_random(rng, shape)
        else:
            arr = rng.standard_normal(shape).astype(np.float32)
        arrays[f"model.layers.{i}.w{i}"] = arr
    return checkpoint_from_arrays(arrays, dtype=dtype)


@pytest.fixture
def script_evaluator(tmp_path):
    """Factory for external evaluator scripts run via the current python."""

    def make(body, name="eval.py"):
        path = tmp_path / name
        path.write_text(textwrap.dedent(body))
        return f"{sys.executable} {path} {{checkpoint}}"

    return make
