"""Shared test helpers: shrunken net, reference forward, gradient checks."""

import numpy as np

from ladder_rtb import encoder, qnet

# Same layer types as the canonical net on a 60-character input.
SHRUNK = qnet.NetSpec(
    seq_len=60, alphabet=71, kernels=(5, 3, 3, 3), filters=(4, 5, 6, 7), pools=(2, 2, 2, 2),
    hidden=9, n_actions=5,
)


def random_codes(rng, n, seq_len=encoder.MAX_LEN, max_len=None):
    """Batch of code arrays with random text lengths."""
    max_len = seq_len if max_len is None else max_len
    out = np.full((n, seq_len), encoder.NULL, dtype=np.int16)
    for i in range(n):
        k = int(rng.integers(0, max_len + 1))
        out[i, :k] = rng.integers(0, encoder.ALPHABET_SIZE, size=k)
        # sprinkle out-of-alphabet holes
        holes = rng.random(k) < 0.05
        out[i, :k][holes] = encoder.NULL
    return out


def dense_of(codes, alphabet=71):
    codes = np.atleast_2d(codes)
    b, n = codes.shape
    x = np.zeros((b, n, alphabet))
    for i in range(b):
        for t in range(n):
            if codes[i, t] < alphabet:
                x[i, t, codes[i, t]] = 1.0
    return x


def naive_forward(params, x):
    """Direct loop convolution -> rectifier -> max pool, written independently."""
    spec = params.spec
    a = np.asarray(x, dtype=np.float64)
    for i, (k, s) in enumerate(zip(spec.kernels, spec.pools), start=1):
        w, b = params[f"conv{i}.w"], params[f"conv{i}.b"]
        n = a.shape[0] - k + 1
        z = np.empty((n, w.shape[2]))
        for t in range(n):
            acc = b.copy()
            for j in range(k):
                acc = acc + a[t + j] @ w[j]
            z[t] = acc
        r = np.maximum(z, 0.0)
        m = n // s
        a = np.array([r[p * s : (p + 1) * s].max(axis=0) for p in range(m)])
    flat = a.reshape(-1)
    h = np.maximum(flat @ params["hidden.w"] + params["hidden.b"], 0.0)
    return h @ params["output.w"] + params["output.b"]


def perturbed(params, rng, scale=0.1):
    """Nonzero biases so every code path carries signal."""
    for name, a in params.arrays.items():
        a += rng.normal(0.0, scale, size=a.shape)
    return params


def _loss_probe(params, codes, weights):
    q, _ = qnet.forward_codes(params, codes)
    return float(np.sum(q * weights))


def _pattern(params, codes):
    """Every rectifier gate and pooling choice of a forward pass."""
    _, tr = qnet.forward_codes(params, codes)
    parts = []
    for lt in tr.layers:
        parts.append(lt.pre_activation() > 0)
        parts.append(lt.argmax_full())
    parts.append(tr.hidden_pre > 0)
    return parts


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(params, codes, rng, n_coords=200, h=1e-3):
    """Central differences against backward on ``n_coords`` random coordinates.

    The network is piecewise linear, so a coordinate whose +-h perturbation
    flips a gate or a pooling choice straddles a kink and has no usable
    difference quotient; such coordinates are redrawn.  Returns
    (worst relative error, coordinates checked, coordinates redrawn).
    """
    weights = rng.normal(size=(codes.shape[0], params.spec.n_actions))
    _, tr = qnet.forward_codes(params, codes)
    grads = qnet.backward(params, tr, weights)
    base = _pattern(params, codes)
    names = list(params.arrays)
    sizes = np.array([params.arrays[n].size for n in names], dtype=float)
    worst, checked, skipped = 0.0, 0, 0
    while checked < n_coords:
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        arr = params.arrays[name]
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up, pat_up = _loss_probe(params, codes, weights), _pattern(params, codes)
        arr[idx] = old - h
        down, pat_down = _loss_probe(params, codes, weights), _pattern(params, codes)
        arr[idx] = old
        if not (_same(base, pat_up) and _same(base, pat_down)):
            skipped += 1
            continue
        num = (up - down) / (2 * h)
        ana = grads[name][idx]
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return worst, checked, skipped


def shrunk_codes(rng):
    """Three texts: partial, short and full length, for the shrunken net."""
    codes = np.full((3, SHRUNK.seq_len), encoder.NULL, dtype=np.int16)
    for i, n in enumerate((20, 7, SHRUNK.seq_len)):
        codes[i, :n] = rng.integers(0, encoder.ALPHABET_SIZE, size=n)
    return codes


ACCEPTANCE_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    """One pass/fail line per acceptance criterion, echoed again in the run summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
