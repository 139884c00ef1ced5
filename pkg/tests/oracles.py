"""Shared independent oracles for the test suite: central finite differences
and brute-force enumerations."""

import torch


def finite_difference(fn, tensor, h=1e-5):
    """Central-difference gradient of scalar fn() w.r.t. every coordinate of
    ``tensor`` (mutated in place between evaluations; slices of larger
    parameters work too)."""
    import itertools

    grad = torch.zeros(tensor.shape, dtype=tensor.dtype)
    for idx in itertools.product(*[range(s) for s in tensor.shape]):
        orig = float(tensor[idx])
        with torch.no_grad():
            tensor[idx] = orig + h
            hi = float(fn())
            tensor[idx] = orig - h
            lo = float(fn())
            tensor[idx] = orig
        grad[idx] = (hi - lo) / (2 * h)
    return grad


def assert_close_rel(analytic, numeric, rel=1e-4, floor=1e-7):
    """Relative comparison with an absolute floor for near-zero entries."""
    analytic = analytic.reshape(-1)
    numeric = numeric.reshape(-1)
    scale = torch.maximum(analytic.abs(), numeric.abs())
    bad = (analytic - numeric).abs() > rel * scale + floor
    assert not bool(bad.any()), (
        f"gradient mismatch at {int(bad.nonzero()[0])}: "
        f"analytic {float(analytic[bad][0])} vs numeric {float(numeric[bad][0])}")
