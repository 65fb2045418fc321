import numpy as np

from moerpl.errors import ContractViolation


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-14

"""Dense matrix helpers and seeded randomness.

A Matrix is a 2-D numpy array; single precision is used for experiments and double
precision for gradient checks. Randomness comes from numpy's counter-based Philox
generator keyed through a SeedSequence, so a (seed, stream) pair gives the same draws
on every platform."""

PRECISIONS = {
    'single': np.float32,
    'double': np.float64,
}

# Seed streams. Each consumer of randomness draws from its own stream.
STREAM_INIT = 1
STREAM_TRAIN = 2
STREAM_EVAL = 3
STREAM_TASK = 4
STREAM_ADAPTER = 5
STREAM_GRADCHECK = 6


def dtype_for(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractViolation(f"Unknown precision '{precision}'", allowed=sorted(PRECISIONS))


# Build a generator for (seed, stream...).
def make_rng(seed, *stream):
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def check_finite(m, what='matrix'):
    if not np.all(np.isfinite(m)):
        raise ContractViolation(f"Non-finite entries in {what}")
    return m


def as_matrix(values, dtype=np.float64):
    m = np.array(values, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ContractViolation(f"Expected a non-empty 2-D matrix, got shape {m.shape}")
    return check_finite(m)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"Cannot multiply {a.shape} by {b.shape}",
                                left=list(a.shape), right=list(b.shape))
    return a @ b


# Row-wise softmax, each row shifted by its max before exponentiation.
def softmax_rows(m):
    if m.ndim != 2 or m.shape[1] < 1:
        raise ContractViolation(f"softmax_rows needs at least one column, got shape {m.shape}")
    if np.isnan(m).any():
        raise ContractViolation("softmax_rows received NaN input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# Top-k indices per row by descending value; ties go to the lower column index.
def topk_indices(m, k):
    order = np.argsort(-m, axis=1, kind='stable')
    return order[:, :k]


def gaussian(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)
