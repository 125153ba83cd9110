"""Compiled per-sample training loop.

One routine covers every streaming learner in the package: plain online
logistic regression, gated learners with drift statistics and periodic mask
updates, single-sample IRM, and replay-buffer variants. The numpy reference
operations in ``online_sgd``/``weight_stats``/``irm`` define the maths; tests
check this loop against them step for step.
"""
import numpy as np
from numba import njit

# option codes
GATE_SIGMOID, GATE_LINEAR = 0, 1
OPT_ADAM, OPT_SGD = 0, 1
MASK_NONE, MASK_NORMALIZED, MASK_SCALED = 0, 1, 2

# indices into the float ``params`` vector
P_LR, P_L1, P_L2, P_B1, P_B2, P_EPS = 0, 1, 2, 3, 4, 5
P_ALPHA, P_BETA, P_MASK_LR, P_IRM, P_LOSS_DECAY = 6, 7, 8, 9, 10
N_PARAMS = 11

# indices into the int ``flags`` vector
F_GATE, F_OPT, F_L1_DECOUPLED, F_TRAIN_W, F_TRAIN_G = 0, 1, 2, 3, 4
F_MASK_RULE, F_MASK_WARMUP, F_MASK_EVERY, F_IRM_WARMUP, F_TRACK_STATS = 5, 6, 7, 8, 9
N_FLAGS = 10

# indices into the int ``counters`` vector
C_T, C_BUF_CURSOR, C_BUF_SIZE, C_STATUS = 0, 1, 2, 3

PROB_CLAMP = 1e-7


@njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _gates(g, kind, out):
    for i in range(g.shape[0]):
        out[i] = _sigmoid(g[i]) if kind == GATE_SIGMOID else g[i]


@njit(cache=True)
def _optimizer_step(theta, grad, m, v, t, lr, b1, b2, eps, opt):
    if opt == OPT_SGD:
        for i in range(theta.shape[0]):
            theta[i] -= lr * grad[i]
        return
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i in range(theta.shape[0]):
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i]
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i]
        theta[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def _add_regularizers(theta, grad, l1, l2, decoupled):
    for i in range(theta.shape[0]):
        grad[i] += l2 * theta[i]
        if not decoupled:
            if theta[i] > 0:
                grad[i] += l1
            elif theta[i] < 0:
                grad[i] -= l1


@njit(cache=True)
def _decoupled_l1(theta, lr, l1):
    for i in range(theta.shape[0]):
        if theta[i] > 0:
            theta[i] = max(theta[i] - lr * l1, 0.0)
        elif theta[i] < 0:
            theta[i] = min(theta[i] + lr * l1, 0.0)


@njit(cache=True)
def train_stream(X, y, w, g, wm, wv, gm, gv, u, var, loss_acc, counters,
                 params, flags, buf_X, buf_y, draws):
    """Run one update per row of ``X``.

    ``draws`` holds one uniform number per row when a replay buffer is in
    use (``buf_X`` non-empty): the current sample is pushed and the trained
    sample is drawn uniformly from the buffer.  Sets ``counters[C_STATUS]``
    to 1 and stops at the first non-finite value.
    """
    T = X.shape[0]
    n = X.shape[1]
    lr = params[P_LR]
    l1 = params[P_L1]
    l2 = params[P_L2]
    b1 = params[P_B1]
    b2 = params[P_B2]
    eps = params[P_EPS]
    alpha = params[P_ALPHA]
    beta = params[P_BETA]
    mask_lr = params[P_MASK_LR]
    irm_w = params[P_IRM]
    decay = params[P_LOSS_DECAY]
    gate_kind = flags[F_GATE]
    opt = flags[F_OPT]
    l1_dec = flags[F_L1_DECOUPLED]
    train_w = flags[F_TRAIN_W]
    train_g = flags[F_TRAIN_G]
    mask_rule = flags[F_MASK_RULE]
    warm = flags[F_MASK_WARMUP]
    every = flags[F_MASK_EVERY]
    irm_warm = flags[F_IRM_WARMUP]
    track = flags[F_TRACK_STATS]
    capacity = buf_X.shape[0]

    gate = np.empty(n)
    dgate = np.empty(n)
    grad_w = np.empty(n)
    grad_g = np.empty(n)
    x = np.empty(n)
    _gates(g, gate_kind, gate)

    for s in range(T):
        counters[C_T] += 1
        t = counters[C_T]
        if capacity > 0:
            cur = counters[C_BUF_CURSOR]
            for i in range(n):
                buf_X[cur, i] = X[s, i]
            buf_y[cur] = y[s]
            counters[C_BUF_CURSOR] = (cur + 1) % capacity
            if counters[C_BUF_SIZE] < capacity:
                counters[C_BUF_SIZE] += 1
            j = int(draws[s] * counters[C_BUF_SIZE])
            if j >= counters[C_BUF_SIZE]:
                j = counters[C_BUF_SIZE] - 1
            for i in range(n):
                x[i] = buf_X[j, i]
            target = float(buf_y[j])
        else:
            for i in range(n):
                x[i] = X[s, i]
            target = float(y[s])

        z = 0.0
        for i in range(n):
            if x[i] != 0.0:
                z += w[i] * gate[i] * x[i]
        p = _sigmoid(z)
        pc = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
        loss = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))
        loss_acc[0] = decay * loss_acc[0] + (1.0 - decay) * loss

        # d(loss)/dz, plus the single-sample IRM term when active
        dz = p - target
        if irm_w > 0.0 and t > irm_warm:
            D = (p - target) * z
            dz += irm_w * 2.0 * D * (p * (1.0 - p) * z + (p - target))
        if not np.isfinite(dz) or not np.isfinite(z):
            counters[C_STATUS] = 1
            return

        # both gradients use the parameters from before this step
        if train_g:
            for i in range(n):
                if gate_kind == GATE_SIGMOID:
                    dgate[i] = gate[i] * (1.0 - gate[i])
                else:
                    dgate[i] = 1.0
                grad_g[i] = dz * w[i] * dgate[i] * x[i]
        if train_w:
            for i in range(n):
                grad_w[i] = dz * gate[i] * x[i]
            _add_regularizers(w, grad_w, l1, l2, l1_dec)
            _optimizer_step(w, grad_w, wm, wv, t, lr, b1, b2, eps, opt)
            if l1_dec:
                _decoupled_l1(w, lr, l1)
        if train_g:
            _add_regularizers(g, grad_g, l1, l2, l1_dec)
            _optimizer_step(g, grad_g, gm, gv, t, lr, b1, b2, eps, opt)
            if l1_dec:
                _decoupled_l1(g, lr, l1)
            _gates(g, gate_kind, gate)

        if track:
            for i in range(n):
                if x[i] != 0.0:
                    u_old = u[i]
                    u[i] = alpha * u[i] + (1.0 - alpha) * w[i]
                    var[i] = beta * var[i] + (1.0 - beta) * (w[i] - u[i]) * (w[i] - u_old)

        if mask_rule != MASK_NONE and t > warm:
            changed = False
            if mask_rule == MASK_NORMALIZED:
                if (t - warm) % every == 0:
                    sq = 0.0
                    mean = 0.0
                    for i in range(n):
                        sq += var[i] * var[i]
                        mean += var[i]
                    mean /= n
                    if sq > 0.0:
                        for i in range(n):
                            g[i] -= (var[i] - mean) / sq
                        changed = True
            else:
                for i in range(n):
                    g[i] -= mask_lr * var[i]
                changed = True
            if changed:
                _gates(g, gate_kind, gate)

        for i in range(n):
            if not np.isfinite(w[i]) or not np.isfinite(g[i]):
                counters[C_STATUS] = 1
                return
