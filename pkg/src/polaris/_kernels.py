"""Compiled inner loops for shading (numba)."""

import math

from numba import njit


@njit(cache=True)
def specular_sums(weight, cos_d, rad, rad_c2, rad_s2, n_re, n_im, out):
    """Per-pixel specular Stokes for one channel, Fresnel fused in.

    ``weight`` is the microfacet factor per sample; ``rad*`` are the incident
    radiance and its products with cos/sin of twice the frame rotation.
    Writes ``out[p] = (sum w R+ L, sum w R- L c2, -sum w R- L s2)``.

    Fresnel is evaluated in real arithmetic: with ``n^2 = A + iB`` and
    ``w = a + ib = sqrt(n^2 - sin^2)`` (principal root),
    ``R_s = (c^2 + |w|^2 - 2ac) / (c^2 + |w|^2 + 2ac)`` and
    ``R_p = (|n^2|^2 c^2 + |w|^2 - 2c(Aa + Bb)) / (... + ...)``.
    """
    A = n_re * n_re - n_im * n_im
    B = 2.0 * n_re * n_im
    N2 = A * A + B * B
    for p in range(weight.shape[0]):
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for j in range(weight.shape[1]):
            c = cos_d[p, j]
            cc = c * c
            u = cc + (A - 1.0)
            r = math.sqrt(u * u + B * B)
            if u >= 0.0:
                a = math.sqrt(0.5 * (r + u))
                b = B / (2.0 * a) if a > 0.0 else 0.0
            else:
                bb = math.sqrt(0.5 * (r - u))
                b = math.copysign(bb, B)
                a = abs(B) / (2.0 * bb)
            base = cc + r
            t = 2.0 * a * c
            r_s = (base - t) / (base + t) if base + t > 0.0 else 1.0
            base = N2 * cc + r
            t = 2.0 * c * (A * a + B * b)
            r_p = (base - t) / (base + t) if base + t > 0.0 else 1.0
            wt = weight[p, j]
            s0 += wt * (0.5 * (r_s + r_p)) * rad[p, j]
            m = wt * (0.5 * (r_s - r_p))
            s1 += m * rad_c2[p, j]
            s2 -= m * rad_s2[p, j]
        out[p, 0] = s0
        out[p, 1] = s1
        out[p, 2] = s2
    return out
