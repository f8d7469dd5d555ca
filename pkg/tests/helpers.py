"""Independent oracles and utilities shared across the test suite.

Everything here is deliberately written as simple scalar/loop code so it
cannot share bugs with the vectorized package implementations it checks.
"""

import math

import numpy as np

from deformsplat.scene import Camera, GaussianSet


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_gradients(fn, arrays: dict, h: float = 1e-4) -> dict:
    """Central finite differences of a scalar function of named arrays.

    fn() is re-evaluated after perturbing the arrays in place.
    """
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn()
            flat[i] = orig - h
            f_minus = fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# quaternions (scalar reference)
# ---------------------------------------------------------------------------

def quat_from_axis_angle(axis, degrees):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = math.radians(degrees) / 2.0
    return np.array([math.cos(half), *(math.sin(half) * axis)])


def quat_mul_scalar(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_angle_deg(q):
    w = min(1.0, abs(q[0] / np.linalg.norm(q)))
    return math.degrees(2.0 * math.acos(w))


def rotmat_from_axis_angle(axis, degrees):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    theta = math.radians(degrees)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


# ---------------------------------------------------------------------------
# scalar basis-deformation reference (one value at a time)
# ---------------------------------------------------------------------------

def scalar_offset(t, weights, centers, widths):
    """sum_j w_j exp(-(t - c_j)^2 / (2 s_j^2)) summed with plain loops."""
    total = 0.0
    for w, c, s in zip(weights, centers, widths):
        total += w * math.exp(-((t - c) ** 2) / (2.0 * s * s))
    return total


# ---------------------------------------------------------------------------
# scalar SSIM reference
# ---------------------------------------------------------------------------

def scalar_ssim(a, b, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Mean SSIM over the valid interior via explicit per-pixel loops."""
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, ch = a.shape
    half = window // 2
    ax = np.arange(window) - half
    k1 = np.exp(-(ax**2) / (2 * sigma**2))
    k1 /= k1.sum()
    kern = np.outer(k1, k1)
    vals = []
    for c in range(ch):
        for i in range(half, h - half):
            for j in range(half, w - half):
                pa = a[i - half:i + half + 1, j - half:j + half + 1, c]
                pb = b[i - half:i + half + 1, j - half:j + half + 1, c]
                mu_a = float((kern * pa).sum())
                mu_b = float((kern * pb).sum())
                var_a = float((kern * pa * pa).sum()) - mu_a**2
                var_b = float((kern * pb * pb).sum()) - mu_b**2
                cov = float((kern * pa * pb).sum()) - mu_a * mu_b
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
                vals.append(num / den)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# scalar Adam reference
# ---------------------------------------------------------------------------

def scalar_adam(x0, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
    return x


# ---------------------------------------------------------------------------
# brute-force kNN
# ---------------------------------------------------------------------------

def brute_force_knn(points, k):
    n = len(points)
    idx = np.zeros((n, k), dtype=int)
    for i in range(n):
        dists = []
        for j in range(n):
            if j == i:
                continue
            dists.append((float(np.sum((points[i] - points[j]) ** 2)), j))
        dists.sort()
        idx[i] = [j for _, j in dists[:k]]
    return idx


# ---------------------------------------------------------------------------
# randomized safe scenes for gradient checks
# ---------------------------------------------------------------------------

def gradcheck_camera(size=16, fx=24.0):
    return Camera(fx=fx, fy=fx, cx=(size - 1) / 2, cy=(size - 1) / 2,
                  width=size, height=size, rotation=np.eye(3),
                  translation=np.zeros(3))


def gradcheck_scene(rng, n=5, sh_coeffs=1):
    """A scene whose alphas stay clear of the compositing cutoffs so that
    finite differences remain valid."""
    positions = np.stack([
        rng.uniform(-0.6, 0.6, n),
        rng.uniform(-0.6, 0.6, n),
        rng.uniform(2.5, 4.0, n),
    ], axis=1)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.25, 0.6, (n, 3)))
    logits = np.log(np.array([o / (1 - o) for o in rng.uniform(0.3, 0.75, n)]))
    colors = np.zeros((n, 3, sh_coeffs))
    colors[:, :, 0] = (rng.uniform(0.25, 0.75, (n, 3)) - 0.5) / 0.28209479177387814
    if sh_coeffs > 1:
        colors[:, :, 1:] = rng.uniform(-0.05, 0.05, (n, 3, sh_coeffs - 1))
    return GaussianSet(
        positions=positions,
        rot_params=quats * rng.uniform(0.8, 1.6, (n, 1)),
        log_scales=log_scales,
        opacity_logits=logits,
        colors=colors,
    )
