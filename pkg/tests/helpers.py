"""Independent oracles shared by the test modules."""

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def triple_loop_matmul(A, B):
    n, k = A.shape
    k2, m = B.shape
    assert k == k2
    C = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            C[i, j] = s
    return C


def mlp_forward_reference(params, x):
    """Straight-line re-evaluation of the dual-head MLP with plain numpy."""
    act = np.tanh if params.activation == "tanh" else (lambda z: np.maximum(z, 0.0))
    h = np.atleast_2d(x)
    for W, b in params.trunk:
        h = act(h.dot(W) + b)
    logits = h.dot(params.class_head[0]) + params.class_head[1]
    ood_logit = h.dot(params.ood_head[0]) + params.ood_head[1]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    score = 1.0 / (1.0 + np.exp(-ood_logit[:, 0]))
    return logits, probs, score


def otsu_exhaustive(scores, num_bins=256):
    """Try every interior bin edge and keep the largest w0 w1 (mu0 - mu1)^2.

    Uses exact rationals on bin-centre values, independent of the integer
    shortcut in the library.  Returns ``(threshold, variance)``; ties keep
    the first (smallest) edge.
    """
    from fractions import Fraction

    s = np.asarray(scores, dtype=np.float64)
    idx = np.clip(np.floor(s * num_bins).astype(int), 0, num_bins - 1)
    counts = [0] * num_bins
    for i in idx:
        counts[i] += 1
    centres = [Fraction(2 * b + 1, 2 * num_bins) for b in range(num_bins)]
    N = len(s)
    total = sum(c * x for c, x in zip(counts, centres))
    best, best_k = None, None
    n0, m0 = 0, Fraction(0)
    for k in range(1, num_bins):
        n0 += counts[k - 1]
        m0 += counts[k - 1] * centres[k - 1]
        n1 = N - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0, mu1 = m0 / n0, (total - m0) / n1
        var = Fraction(n0, N) * Fraction(n1, N) * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_k = var, k
    return (None, None) if best_k is None else (best_k / num_bins, best)


def auroc_pairs(scores, labels):
    """Brute-force pair counting: OOD above ID scores 1, a tie scores 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (pos.size * neg.size)


def bce_per_sample(target, pred):
    """Binary cross-entropy of one prediction against one soft target."""
    return -(target * np.log(pred) + (1 - target) * np.log(1 - pred))


def score_vector(kind, rng, n=None):
    """Random score vectors in [0, 1] of a few shapes used by the Otsu checks."""
    n = n or int(rng.integers(20, 400))
    if kind == "bimodal":
        k = int(rng.integers(1, n))
        a = rng.normal(rng.uniform(0.05, 0.4), rng.uniform(0.01, 0.1), size=k)
        b = rng.normal(rng.uniform(0.6, 0.95), rng.uniform(0.01, 0.1), size=n - k)
        v = np.concatenate([a, b])
    elif kind == "unimodal":
        v = rng.normal(rng.uniform(0.3, 0.7), rng.uniform(0.15, 0.4), size=n)
    elif kind == "skewed":
        v = rng.beta(rng.uniform(0.3, 1.0), rng.uniform(2.0, 8.0), size=n)
    else:
        raise ValueError(kind)
    return np.clip(v, 0.0, 1.0)


def _random_model(rng, activation=None):
    from mtcl.model import init_model

    d = int(rng.integers(2, 5))
    K = int(rng.integers(2, 5))
    widths = [int(w) for w in rng.integers(3, 7, size=int(rng.integers(1, 3)))]
    act = activation or ("tanh", "relu")[int(rng.integers(0, 2))]
    params = init_model(d, widths, K, seed=int(rng.integers(0, 2**31)), activation=act)
    for _, b in params.trunk:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    return params


def grad_check_ood(seed):
    """Max relative error between autodiff and central differences for ood_loss."""
    from mtcl import diffcore as dc
    from mtcl.losses import ood_loss
    from mtcl.model import collect_grads, forward, leaves_for

    rng = np.random.default_rng([seed, 101])
    params = _random_model(rng)
    n_l, n_u = int(rng.integers(1, 6)), int(rng.integers(1, 8))
    x = rng.normal(size=(n_l + n_u, params.input_dim))
    t_l = np.zeros(n_l)
    t_u = rng.uniform(0, 1, size=n_u)

    def loss(leaves=None):
        s = forward(params, x, leaves).ood_score
        return ood_loss(dc.rows(s, 0, n_l), t_l, dc.rows(s, n_l, n_l + n_u), t_u)

    leaves = leaves_for(params)
    loss(leaves).backward()
    numeric = central_diff(lambda: float(loss().data), params.arrays())
    return max_rel_error(collect_grads(params, leaves), numeric)


def grad_check_ssl(seed):
    """Same check for ssl_loss with the augmentations, mixup draw and guesses held fixed."""
    from mtcl.losses import SslConfig, ssl_loss
    from mtcl.model import collect_grads, leaves_for

    rng = np.random.default_rng([seed, 202])
    params = _random_model(rng)
    K = params.num_classes
    n_l, n_u = int(rng.integers(1, 5)), int(rng.integers(0, 5))
    x_l = rng.normal(size=(n_l, params.input_dim))
    y_l = rng.integers(0, K, size=n_l)
    x_u = rng.normal(size=(n_u, params.input_dim))
    cfg = SslConfig(num_guess_augmentations=int(rng.integers(1, 3)),
                    unlabeled_weight_rampup_epochs=4)
    epoch = int(rng.integers(1, 8))
    lam = float(rng.uniform(0, 1))
    guess = rng.dirichlet(np.ones(K), size=n_u)
    stream = int(rng.integers(0, 2**31))

    def loss(leaves=None):
        return ssl_loss(params, (x_l, y_l), x_u, cfg, epoch, np.random.default_rng(stream),
                        leaves, lam=lam, guess=guess)

    leaves = leaves_for(params)
    loss(leaves).backward()
    numeric = central_diff(lambda: float(loss().data), params.arrays())
    return max_rel_error(collect_grads(params, leaves), numeric)
