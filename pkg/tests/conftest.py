import numpy as np
import pytest

from corrmeta.tensor import Tensor, no_grad


def conv_loop(x, w, b=None, stride=1, dilation=1, padding=0, groups=1):
    """Direct-summation cross-correlation on [C,H,W]; independent of im2col."""
    C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((Co, Ho, Wo))
    og = Co // groups
    for o in range(Co):
        g = o // og
        for y in range(Ho):
            for xx in range(Wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(Cg):
                    for i in range(kh):
                        for j in range(kw):
                            acc += w[o, c, i, j] * xp[g * Cg + c, y * stride + i * dilation, xx * stride + j * dilation]
                out[o, y, xx] = acc
    return out


def correlation_loop(Fi, Fj):
    """Quadruple loop over (a, b, u, v)."""
    C, h, w = Fi.shape
    out = np.zeros((C, C))
    for a in range(C):
        for b in range(C):
            s = 0.0
            for u in range(h):
                for v in range(w):
                    s += Fi[a, u, v] * Fj[b, u, v]
            out[a, b] = s / (h * w)
    return out


def central_difference(f, arrays, h=1e-4):
    """d f / d arrays[i] elementwise by central differences; ``f`` reads the arrays in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check_op_gradient(op, *shapes, seed=0, rtol=1e-3, h=1e-4, positive=False, **kwargs):
    """Compare d sum(op(inputs)) against central differences in float64."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.2, 1.5, s) if positive else rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    op(*tensors, **kwargs).sum().backward()

    def f():
        with no_grad():
            return float(op(*[Tensor(a) for a in arrays], **kwargs).data.sum())

    numeric = central_difference(f, arrays, h)
    for t, n in zip(tensors, numeric):
        assert_grad_close(t.grad, n, rtol)


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-10):
    """Elementwise relative error, falling back to an absolute floor for ~zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    ok = (err <= rtol * scale) | (err <= atol)
    if not ok.all():
        idx = np.argwhere(~ok)[:5]
        detail = [(tuple(i), analytic[tuple(i)], numeric[tuple(i)]) for i in idx]
        raise AssertionError(f"{(~ok).sum()} gradient entries off: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def attention_loop(F, w1, w2):
    """Channel gate by explicit sums: sigmoid(w2 . relu(w1 . GAP(F)))."""
    C, h, w = F.shape
    g = [sum(F[c, u, v] for u in range(h) for v in range(w)) / (h * w) for c in range(C)]
    hid = [max(0.0, sum(w1[r, c] * g[c] for c in range(C))) for r in range(w1.shape[0])]
    return np.array([1.0 / (1.0 + np.exp(-sum(w2[c, r] * hid[r] for r in range(len(hid))))) for c in range(C)])


def adaptive_correlation_loop(Fi, Fj, Wij, attn_i=None, attn_j=None):
    """W_ij o corr(A_i*F_i, A_j*F_j) with every product written out."""
    C, h, w = Fi.shape
    ai = np.ones(C) if attn_i is None else attn_i
    aj = np.ones(C) if attn_j is None else attn_j
    out = np.zeros((C, C))
    for a in range(C):
        for b in range(C):
            s = 0.0
            for u in range(h):
                for v in range(w):
                    s += (ai[a] * Fi[a, u, v]) * (aj[b] * Fj[b, u, v])
            out[a, b] = Wij[a, b] * s / (h * w)
    return out


def adaptive_pool_loop(F, th, tw):
    C, H, W = F.shape
    out = np.zeros((C, th, tw))
    for i in range(th):
        y0, y1 = (i * H) // th, ((i + 1) * H) // th
        for j in range(tw):
            x0, x1 = (j * W) // tw, ((j + 1) * W) // tw
            for c in range(C):
                out[c, i, j] = F[c, y0:y1, x0:x1].mean()
    return out


def correlation_case(rng):
    """One random case for the correlation oracles, with C'<=8 and spatial extent <=4x4."""
    C = int(rng.integers(1, 9))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    hid = int(rng.integers(1, 4))
    return dict(
        Fi=rng.normal(size=(C, h, w)),
        Fj=rng.normal(size=(C, h, w)),
        W=rng.normal(size=(C, C)),
        w1i=rng.normal(size=(hid, C)), w2i=rng.normal(size=(C, hid)),
        w1j=rng.normal(size=(hid, C)), w2j=rng.normal(size=(C, hid)),
    )


def correlation_case_errors(case):
    """Max abs error of plain, weighted and attended-weighted correlation vs the loop oracles."""
    from corrmeta.accm import adaptive_correlation, apply_attention, channel_attention, channel_correlation

    Fi, Fj, W = case["Fi"], case["Fj"], case["W"]
    with no_grad():
        plain = channel_correlation(Tensor(Fi), Tensor(Fj)).data
        weighted = adaptive_correlation(Tensor(Fi), Tensor(Fj), Tensor(W)).data
        Ai = channel_attention(Tensor(Fi), Tensor(case["w1i"]), Tensor(case["w2i"]))
        Aj = channel_attention(Tensor(Fj), Tensor(case["w1j"]), Tensor(case["w2j"]))
        full = adaptive_correlation(apply_attention(Tensor(Fi), Ai), apply_attention(Tensor(Fj), Aj), Tensor(W)).data
    ai = attention_loop(Fi, case["w1i"], case["w2i"])
    aj = attention_loop(Fj, case["w1j"], case["w2j"])
    return (
        np.abs(plain - correlation_loop(Fi, Fj)).max(),
        np.abs(weighted - adaptive_correlation_loop(Fi, Fj, W)).max(),
        np.abs(full - adaptive_correlation_loop(Fi, Fj, W, ai, aj)).max(),
    )
