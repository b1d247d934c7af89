"""Central finite-difference gradient checking.

The numeric side only ever calls the forward function; the scalar objective
is a fixed random projection of the output reduced in float64, so the check
is independent of every backward rule it verifies.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, grad, mul, tensor_sum


@dataclass
class GradCheckResult:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool
    coords: int


def _objective(out, proj):
    return float(np.dot(out.data.astype(np.float64).ravel(), proj.ravel()))


def gradcheck(fn, inputs, *, coords=10, h=1e-3, atol=1e-3, rtol=1e-3, rng=None, names=None):
    """Compare analytic and finite-difference gradients of ``fn(*inputs)``.

    A coordinate passes when ``|analytic - numeric| <= max(atol, rtol * |numeric|)``.
    Returns one :class:`GradCheckResult` per input.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) / np.sqrt(out.size)
    loss = tensor_sum(mul(out, Tensor(proj)))
    analytic = grad(loss, inputs)

    results = []
    for k, (x, ga) in enumerate(zip(inputs, analytic)):
        flat = x.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        worst_abs = worst_rel = 0.0
        ok = True
        ftype = flat.dtype.type
        for idx in picks:
            orig = flat[idx]
            hi, lo = ftype(orig + ftype(h)), ftype(orig - ftype(h))
            flat[idx] = hi
            up = _objective(fn(*inputs), proj)
            flat[idx] = lo
            down = _objective(fn(*inputs), proj)
            flat[idx] = orig
            # the representable step may differ slightly from 2h
            step = float(hi) - float(lo)
            numeric = (up - down) / step
            a = float(ga.reshape(-1)[idx])
            err = abs(a - numeric)
            rel = err / max(abs(numeric), 1e-12)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, min(rel, err / max(abs(a), 1e-12)))
            if err > max(atol, rtol * abs(numeric)):
                ok = False
        name = names[k] if names else (x.name or f"input{k}")
        results.append(GradCheckResult(name, worst_abs, worst_rel, ok, len(picks)))
    return results


def model_gradcheck(model, image, *, coords=20, h=1e-7, atol=1e-3, rtol=1e-3, rng=None,
                    dtype=np.float64):
    """Finite-difference check of every parameter tensor of ``model``.

    Both heads feed the objective. The model runs in eval mode and, by
    default, in float64 so that the step can be taken small enough to stay
    clear of activation kinks; parameters are restored afterwards.
    """
    from .tensor import concat_channels, precision

    params = model.parameters()
    saved = [p.data for p in params]
    try:
        with precision(dtype):
            for p in params:
                p.data = p.data.astype(dtype)
            x = Tensor(image)

            def fn(*_):
                height, logits, _ = model.forward(x, "eval")
                return concat_channels(height, logits)

            return gradcheck(fn, params, coords=coords, h=h, atol=atol, rtol=rtol, rng=rng,
                             names=[n for n, _ in model.named_parameters()])
    finally:
        for p, d in zip(params, saved):
            p.data = d
