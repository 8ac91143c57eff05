"""Independent reference implementations used as oracles by the test suite.

Everything here is written as plain scalar loops (math.exp and friends) or
textbook recursions, deliberately avoiding the package's engine and, where
possible, even numpy vectorization, so that agreement with the library is
evidence of correctness rather than shared code paths.
"""

import math

import numpy as np


# === scalar gate helpers ===

def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def softmax_vec(zs):
    m = max(zs)
    es = [math.exp(z - m) for z in zs]
    s = sum(es)
    return [e / s for e in es]


def l1_normalize_vec(xs):
    s = sum(xs)
    if s == 0.0:
        return [1.0 / len(xs)] * len(xs)
    return [x / s for x in xs]


def _c_norm(c_prev):
    s = sum(c_prev)
    if s == 0.0:
        return [1.0 / len(c_prev)] * len(c_prev)
    return [c / s for c in c_prev]


def _gate_logits(w, u, b, a, c_norm, K, cols):
    """w: (K*cols, L), u: (K*cols, K), b: (K, cols) -> list of K lists."""
    z = [[0.0] * cols for _ in range(K)]
    for k in range(K):
        for m in range(cols):
            row = k * cols + m
            acc = b[k][m]
            for j, aj in enumerate(a):
                acc += w[row][j] * aj
            for j, cj in enumerate(c_norm):
                acc += u[row][j] * cj
            z[k][m] = acc
    return z


def mclstm_step(arrays, c_prev, x, a, time_dependent=False):
    """One conserving-cell step with scalar loops; returns (h, c, i, o, r).

    arrays: dict of plain nested lists/arrays matching CellParams layout.
    c_prev: K floats, x: M floats, a: L floats.
    """
    K = len(c_prev)
    M = len(x)
    cn = _c_norm(c_prev)

    bi = np.asarray(arrays["bi"], dtype=float).reshape(K, M).tolist()
    zi = _gate_logits(arrays["wi"], arrays["ui"], bi, a, cn, K, M)
    gate_i = [[0.0] * M for _ in range(K)]
    for m in range(M):
        col = softmax_vec([zi[k][m] for k in range(K)])
        for k in range(K):
            gate_i[k][m] = col[k]

    bo = list(np.asarray(arrays["bo"], dtype=float))
    zo = [bo[k] for k in range(K)]
    for k in range(K):
        for j, aj in enumerate(a):
            zo[k] += arrays["wo"][k][j] * aj
        for j, cj in enumerate(cn):
            zo[k] += arrays["uo"][k][j] * cj
    gate_o = [sigmoid(z) for z in zo]

    br = np.asarray(arrays["br"], dtype=float)
    if time_dependent:
        logits = [[br[k][j] for j in range(K)] for k in range(K)]
        wr = np.asarray(arrays["wr"], dtype=float)
        ur = np.asarray(arrays["ur"], dtype=float)
        for k in range(K):
            for j in range(K):
                row = k * K + j
                for li, al in enumerate(a):
                    logits[k][j] += wr[row][li] * al
                for li, cl in enumerate(cn):
                    logits[k][j] += ur[row][li] * cl
    else:
        logits = [[br[k][j] for j in range(K)] for k in range(K)]
    r = [[0.0] * K for _ in range(K)]
    for j in range(K):
        col = softmax_vec([logits[k][j] for k in range(K)])
        for k in range(K):
            r[k][j] = col[k]

    m_tot = [0.0] * K
    for k in range(K):
        for j in range(K):
            m_tot[k] += r[k][j] * c_prev[j]
        for m in range(M):
            m_tot[k] += gate_i[k][m] * x[m]
    h = [gate_o[k] * m_tot[k] for k in range(K)]
    c = [m_tot[k] - h[k] for k in range(K)]
    return h, c, gate_i, gate_o, r


def lstm_step(arrays, h_prev, c_prev, v):
    """Standard LSTM step (gate order i, f, g, o) with scalar loops."""
    K = len(c_prev)
    w = np.asarray(arrays["w"], dtype=float)
    u = np.asarray(arrays["u"], dtype=float)
    b = np.asarray(arrays["b"], dtype=float)
    z = [0.0] * (4 * K)
    for row in range(4 * K):
        acc = b[row]
        for j, vj in enumerate(v):
            acc += w[row][j] * vj
        for j, hj in enumerate(h_prev):
            acc += u[row][j] * hj
        z[row] = acc
    c = [0.0] * K
    h = [0.0] * K
    for k in range(K):
        gi = sigmoid(z[k])
        gf = sigmoid(z[K + k])
        gg = math.tanh(z[2 * K + k])
        go = sigmoid(z[3 * K + k])
        c[k] = gf * c_prev[k] + gi * gg
        h[k] = go * math.tanh(c[k])
    return h, c


def mcfc_forward(arrays, x):
    """Static conserving unit: y = sigmoid(bo) * (colsoftmax(bI) @ x)."""
    bi = np.asarray(arrays["bI"], dtype=float)
    bo = np.asarray(arrays["bo"], dtype=float)
    K, M = bi.shape
    gate = [[0.0] * M for _ in range(K)]
    for m in range(M):
        col = softmax_vec([bi[k][m] for k in range(K)])
        for k in range(K):
            gate[k][m] = col[k]
    y = [0.0] * K
    for k in range(K):
        acc = 0.0
        for m in range(M):
            acc += gate[k][m] * x[m]
        y[k] = sigmoid(bo[k]) * acc
    return y


# === pendulum ODE oracle ===

def rk4_damped_oscillator(theta0, omega_sq, gamma, dt, n_steps, substeps=100):
    """Integrate theta'' + gamma*theta' + omega_sq*theta = 0 from rest.

    Classic RK4 on the first-order system; returns (theta, theta_dot) arrays
    of length n_steps sampled at t = 0, dt, 2*dt, ...
    """
    def deriv(th, w):
        return w, -omega_sq * th - gamma * w

    thetas = np.zeros(n_steps)
    omegas = np.zeros(n_steps)
    th, w = theta0, 0.0
    hh = dt / substeps
    for i in range(n_steps):
        thetas[i] = th
        omegas[i] = w
        for _ in range(substeps):
            k1t, k1w = deriv(th, w)
            k2t, k2w = deriv(th + 0.5 * hh * k1t, w + 0.5 * hh * k1w)
            k3t, k3w = deriv(th + 0.5 * hh * k2t, w + 0.5 * hh * k2w)
            k4t, k4w = deriv(th + hh * k3t, w + hh * k3w)
            th += hh * (k1t + 2 * k2t + 2 * k3t + k4t) / 6.0
            w += hh * (k1w + 2 * k2w + 2 * k3w + k4w) / 6.0
    return thetas, omegas


def pendulum_energies(theta, theta_dot, mass, gravity, length):
    e_pot = 0.5 * mass * gravity * length * theta ** 2
    e_kin = 0.5 * mass * length ** 2 * theta_dot ** 2
    return e_pot, e_kin


# === statistics and optimizer recursions ===

def pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b)) / n
    va = sum((x - ma) ** 2 for x in a) / n
    vb = sum((y - mb) ** 2 for y in b) / n
    return cov / math.sqrt(va * vb)


def mse(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def adam_scalar(w0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam recursion on one scalar, epsilon-hat form (bias correction folded
    into the step size, eps added to the raw root second moment); returns the
    weight after each step."""
    w, m, v = w0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * math.sqrt(1 - beta2 ** t) / (1 - beta1 ** t)
        w -= step * m / (math.sqrt(v) + eps)
        out.append(w)
    return out
