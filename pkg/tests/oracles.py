"""Independent reference implementations used as test oracles.

Nothing here imports the code under test; each function is written the
slow, obvious way.
"""

import math
from fractions import Fraction

import numpy as np

# ---------------------------------------------------------------------------
# numeric


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for r in range(k):
                acc += a[i][r] * b[r][j]
            out[i][j] = acc
    return np.array(out)


def naive_conv1d(x, kernel, padding):
    t, d_in = x.shape
    k, _, d_out = kernel.shape
    left = (k - 1) // 2 if padding == "symmetric" else k - 1
    out = np.zeros((t, d_out))
    for pos in range(t):
        for tap in range(k):
            src = pos - left + tap
            if 0 <= src < t:
                for c in range(d_in):
                    for o in range(d_out):
                        out[pos, o] += x[src, c] * kernel[tap, c, o]
    return out


def precise_softmax(row):
    """Softmax evaluated with 50-digit decimals."""
    from decimal import Decimal, getcontext

    getcontext().prec = 50
    exps = [Decimal(float(v)).exp() for v in row]
    total = sum(exps)
    return np.array([float(e / total) for e in exps])


def naive_attention(xq, xkv, Q, K, V, O, n_heads, bias=None, causal=False):
    tq, d = xq.shape
    tk = xkv.shape[0]
    dh = d // n_heads
    q, k, v = xq @ Q, xkv @ K, xkv @ V
    heads = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        out = np.zeros((tq, dh))
        for i in range(tq):
            logits = []
            for j in range(tk):
                a = float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh)
                if bias is not None:
                    b = bias[h] if np.ndim(bias) == 3 else bias
                    a += b[i][j]
                if causal and j > i:
                    a = -math.inf
                logits.append(a)
            mx = max(logits)
            ws = [math.exp(a - mx) for a in logits]
            z = sum(ws)
            for j in range(tk):
                out[i] += ws[j] / z * v[j, sl]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ O


def naive_glu(x):
    n = x.shape[-1] // 2
    return 1.0 / (1.0 + np.exp(-x[..., :n])) * x[..., n:]


def central_difference(f, x, eps=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def scalar_adam_trace(x0, grad_fn, steps, lr=5e-4, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        trace.append(x)
    return trace


def textbook_sem(values):
    n = len(values)
    mean = Fraction(sum(Fraction(v) for v in values), n)
    var = sum((Fraction(v) - mean) ** 2 for v in values) / (n - 1)
    return float(mean), math.sqrt(var / n)


# ---------------------------------------------------------------------------
# SCAN

GRAMMAR = {
    "C": [["S", "and", "S"], ["S", "after", "S"], ["S"]],
    "S": [["V", "twice"], ["V", "thrice"], ["V"]],
    "V": [["W", "opposite", "Dir"], ["W", "around", "Dir"], ["D"], ["U"]],
    "D": [["U", "left"], ["U", "right"], ["turn", "left"], ["turn", "right"]],
    "W": [["U"], ["turn"]],
    "U": [["walk"], ["look"], ["run"], ["jump"]],
    "Dir": [["left"], ["right"]],
}


def expand(symbol):
    """All token tuples derivable from ``symbol`` by exhaustive recursion."""
    if symbol not in GRAMMAR:
        return [(symbol,)]
    out = []
    for rhs in GRAMMAR[symbol]:
        partials = [()]
        for sym in rhs:
            partials = [p + e for p in partials for e in expand(sym)]
        out.extend(partials)
    return out


def brute_force_commands():
    return set(" ".join(c) for c in expand("C"))


_PRIM = {"walk": ["WALK"], "look": ["LOOK"], "run": ["RUN"], "jump": ["JUMP"], "turn": []}
_DIR = {"left": "LTURN", "right": "RTURN"}


def oracle_interpret(command):
    """Recursive-descent denotation following the grammar's semantic rules."""
    words = command.split() if isinstance(command, str) else list(command)
    if "and" in words:
        i = words.index("and")
        return oracle_interpret(words[:i]) + oracle_interpret(words[i + 1 :])
    if "after" in words:
        i = words.index("after")
        return oracle_interpret(words[i + 1 :]) + oracle_interpret(words[:i])
    if words[-1] == "twice":
        return oracle_interpret(words[:-1]) * 2
    if words[-1] == "thrice":
        return oracle_interpret(words[:-1]) * 3
    if len(words) == 3 and words[1] == "around":
        return ([_DIR[words[2]]] + _PRIM[words[0]]) * 4
    if len(words) == 3 and words[1] == "opposite":
        return [_DIR[words[2]]] * 2 + _PRIM[words[0]]
    if len(words) == 2:
        return [_DIR[words[1]]] + _PRIM[words[0]]
    if len(words) == 1 and words[0] != "turn":
        return list(_PRIM[words[0]])
    raise ValueError(f"ungrammatical: {words}")
