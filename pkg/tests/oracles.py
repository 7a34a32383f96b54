"""Independent reference computations used to freeze expected values.

Nothing here imports from ``dpcompress``; each oracle recomputes its quantity
by a different route than the library (quadrature, finite differences,
brute force) so agreement is meaningful.
"""

import math

import mpmath
import numpy as np


def rdp_quadrature(q, sigma, alpha, dps=40):
    """RDP of one Poisson-subsampled Gaussian step at order ``alpha``.

    Integrates E_{z~N(0, s^2)}[((1 - q) + q * exp((2z - 1) / (2 s^2)))^alpha]
    numerically and returns log(.) / (alpha - 1).
    """
    with mpmath.workdps(dps):
        q = mpmath.mpf(q)
        s = mpmath.mpf(sigma)
        a = mpmath.mpf(alpha)

        def log_integrand(z):
            ratio = (1 - q) + q * mpmath.exp((2 * z - 1) / (2 * s * s))
            return -z * z / (2 * s * s) - mpmath.log(s * mpmath.sqrt(2 * mpmath.pi)) + a * mpmath.log(ratio)

        # locate the integrand's mode so the quadrature nodes cover the mass
        zs = np.linspace(-20 * sigma, 20 * sigma + alpha, 4001)
        peak = float(zs[int(np.argmax([float(log_integrand(z)) for z in zs]))])
        shift = log_integrand(peak)
        width = 12 * sigma
        pts = [-mpmath.inf, peak - width, peak - 2 * sigma, peak, peak + 2 * sigma, peak + width, mpmath.inf]
        val = mpmath.quad(lambda z: mpmath.exp(log_integrand(z) - shift), pts)
        return float((mpmath.log(val) + shift) / (a - 1))


def gaussian_epsilon_over_grid(sigma, steps, delta, orders):
    """Closed-form Gaussian RDP (alpha * steps / (2 sigma^2)) converted to epsilon.

    Uses the conversion eps = rdp + log((a-1)/a) - (log delta + log a)/(a-1),
    minimised over the supplied grid.
    """
    best = math.inf
    for a in orders:
        rdp = a * steps / (2.0 * sigma * sigma)
        eps = rdp + math.log((a - 1) / a) - (math.log(delta) + math.log(a)) / (a - 1)
        best = min(best, max(eps, 0.0))
    return best


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-12):
    """max_i |a_i - n_i| / max(|a|_inf, |n|_inf): error relative to the gradient's scale.

    Elementwise ratios blow up on entries that are ~0 where central
    differences only resolve ~1e-11 absolute; scaling by the tensor's largest
    entry keeps the measure meaningful.
    """
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def kd_loss_scalar(student, teacher, labels, lam, temperature):
    """Plain-Python evaluation of CE(y, softmax(s)) + lam * H(softmax(t/T), softmax(s/T)), batch-averaged."""
    total = 0.0
    for s_row, t_row, y in zip(student, teacher, labels):
        s_row = [float(v) for v in s_row]
        t_row = [float(v) for v in t_row]
        lse = math.log(sum(math.exp(v) for v in s_row))
        hard = -(s_row[int(y)] - lse)
        st = [v / temperature for v in s_row]
        tt = [v / temperature for v in t_row]
        lse_s = math.log(sum(math.exp(v) for v in st))
        zt = sum(math.exp(v) for v in tt)
        pt = [math.exp(v) / zt for v in tt]
        soft = -sum(p * (v - lse_s) for p, v in zip(pt, st))
        total += hard + lam * soft
    return total / len(labels)


def bottom_k_by_magnitude(values, k):
    """Indices of the k smallest |values|, ties broken by position (brute force)."""
    order = sorted(range(len(values)), key=lambda i: (abs(values[i]), i))
    return set(order[:k])
