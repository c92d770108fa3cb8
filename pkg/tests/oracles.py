"""Independent reference implementations used as test oracles.

Nothing here calls into the code paths it is used to check, except for the
forward function whose derivative is being differenced.
"""

import itertools

import numpy as np

FD_STEP = 1e-3
FD_TOL = 1e-3


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Six nested loops in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[oi])
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[ni, ci, i * stride + p, j * stride + q] * w[oi, ci, p, q]
                    out[ni, oi, i, j] = acc
    return out


def rel_error(analytic, numeric) -> float:
    """Largest absolute deviation relative to the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def finite_difference(fn, x, cotangent, h=FD_STEP, signature=None):
    """Central differences of ``sum(fn(x) * cotangent)`` w.r.t. every entry of ``x``.

    ``x`` stays float32; the step actually taken in float32 is used as the
    denominator. When ``signature`` is given, entries whose +h and -h evaluations
    produce different signatures (a ReLU or pooling switch was crossed) are
    flagged invalid. Returns ``(gradient, valid_mask)``.
    """
    x = np.array(x, dtype=np.float32)
    cot = np.asarray(cotangent, dtype=np.float64)
    grad = np.zeros(x.shape, dtype=np.float64)
    valid = np.ones(x.shape, dtype=bool)
    step = np.float32(h)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        fp, fm = fn(xp), fn(xm)
        grad[idx] = ((np.asarray(fp, np.float64) * cot).sum() - (np.asarray(fm, np.float64) * cot).sum()) \
            / (float(xp[idx]) - float(xm[idx]))
        if signature is not None:
            sp, sm = signature(xp), signature(xm)
            valid[idx] = all(np.array_equal(a, b) for a, b in zip(sp, sm))
    return grad, valid


def model_signature(store, forward):
    """Function mapping an input to every ReLU mask and pooling argmax of the model."""
    def sig(x):
        trace = forward(store, x)
        parts = []
        for spec, cache in zip(store.config.layers, trace.caches):
            if spec.kind == "relu":
                parts.append(cache > 0)
            elif spec.kind == "maxpool":
                parts.append(cache[0])
            elif spec.kind == "residual-block":
                _, z1, _, s = cache
                parts += [z1 > 0, s > 0]
        return parts
    return sig


def brute_force_map(cube_values, predicted, kind):
    """Explicit loops over channels and classes; float64 comparisons on float32 data."""
    g = np.asarray(cube_values)
    n_cls, n_ch, h, w = g.shape
    out = np.zeros((h, w), dtype=np.float32)
    for i, j in itertools.product(range(h), range(w)):
        best = None
        for k in range(n_ch):
            gp = g[predicted, k, i, j]
            if kind == "original":
                v = abs(gp)
            elif kind == "positive":
                v = gp if gp > 0 else 0.0
            elif kind == "negative":
                v = -gp if gp < 0 else 0.0
            else:
                others = [g[c, k, i, j] for c in range(n_cls)]
                attained = all(gp >= o for o in others) if kind == "active" else all(gp <= o for o in others)
                v = gp if attained else 0.0
            best = v if best is None or v > best else best
        out[i, j] = best
    return out
