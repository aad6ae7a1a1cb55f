"""Shared test helpers: finite-difference oracles and brute-force references."""

import numpy as np
import pytest

FD_EPS = 1e-4
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def fd_gradient(loss_fn, param, index, eps=FD_EPS):
    """Central finite difference of a scalar loss wrt one parameter scalar."""
    flat = param.data.reshape(-1)
    old = flat[index]
    flat[index] = old + eps
    lp = float(loss_fn().data)
    flat[index] = old - eps
    lm = float(loss_fn().data)
    flat[index] = old
    return (lp - lm) / (2.0 * eps)


def check_gradients(loss_fn, params, sample_per_param=None, seed=123,
                    rtol=FD_RTOL, atol=FD_ATOL):
    """Compare every (or a sampled subset of) parameter gradient to central
    finite differences. Returns the number of scalars checked."""
    loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    r = rng(seed)
    checked = 0
    for p in params:
        n = p.data.size
        if sample_per_param is None or sample_per_param >= n:
            idxs = range(n)
        else:
            idxs = r.choice(n, size=sample_per_param, replace=False)
        grad = np.zeros(n) if p.grad is None else p.grad.reshape(-1)
        for i in idxs:
            fd = fd_gradient(loss_fn, p, int(i))
            an = float(grad[int(i)])
            err = abs(fd - an)
            assert err <= rtol * max(abs(fd), abs(an)) + atol, (
                f"{getattr(p, 'name', '?')}[{i}]: analytic {an:.8g} vs fd {fd:.8g}"
            )
            checked += 1
    return checked


# ---------------------------------------------------------------------------
# brute-force reference implementations (independent of the library paths)

def conv1d_oracle(x, w, b, stride, padding):
    B, C, L = x.shape
    O, _, K = w.shape
    Lo = (L + 2 * padding - K) // stride + 1
    xp = np.zeros((B, C, L + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + L] = x
    y = np.zeros((B, O, Lo), dtype=x.dtype)
    for bi in range(B):
        for o in range(O):
            for pos in range(Lo):
                acc = 0.0
                for c in range(C):
                    for k in range(K):
                        acc += xp[bi, c, pos * stride + k] * w[o, c, k]
                y[bi, o, pos] = acc + (b[o] if b is not None else 0.0)
    return y


def conv_transpose1d_oracle(x, w, b, stride):
    B, C, L = x.shape
    _, O, K = w.shape
    Lo = (L - 1) * stride + K
    y = np.zeros((B, O, Lo), dtype=x.dtype)
    for bi in range(B):
        for c in range(C):
            for pos in range(L):
                for o in range(O):
                    for k in range(K):
                        y[bi, o, pos * stride + k] += x[bi, c, pos] * w[c, o, k]
    if b is not None:
        y += b[None, :, None]
    return y


def auc_pairwise_oracle(scores, labels):
    """AUC by enumerating every positive-negative pair (0.5 credit for ties)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def max_matching_oracle(preds, truth, tol):
    """Maximum one-to-one matching size by exhaustive recursion."""
    preds = list(preds)
    truth = list(truth)

    def best(i, used):
        if i == len(preds):
            return 0
        score = best(i + 1, used)  # leave preds[i] unmatched
        for j, t in enumerate(truth):
            if j not in used and abs(preds[i] - t) <= tol:
                score = max(score, 1 + best(i + 1, used | {j}))
        return score

    tp = best(0, frozenset())
    return tp, len(preds) - tp, len(truth) - tp


def relative_close(a, b, tol=1e-6):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom <= tol


@pytest.fixture
def rng0():
    return rng(0)
