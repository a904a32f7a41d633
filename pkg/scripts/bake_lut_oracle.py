#!/usr/bin/env python3
"""Deterministic quadrature oracle for BRDF-table probe cells.

Integrates the two split-sum table entries directly over incident spherical
coordinates with Gauss-Legendre x uniform-phi tensor quadrature:

    F1 = int D(h) G (1 - Fc) / (4 <n,v>) dw_i
    F2 = int D(h) G Fc       / (4 <n,v>) dw_i,   Fc = (1 - <v,h>)^5

over the upper hemisphere, h = normalize(v + w_i). This is written from the
integral definition on purpose -- it shares no code with the table baker's
half-vector importance sampler, so agreement validates the estimator, its
sample transform, and its pdf bookkeeping at once.

Run: python3 scripts/bake_lut_oracle.py [--res 64] [--theta 768] [--phi 1536]
Prints frozen (cos_v, rho) -> (F1, F2) rows for the probe cells used in tests.
"""

import argparse

import numpy as np

PROBE_CELLS = [12, 31, 57]  # probe indices along each table axis


def ggx_d(cos_h, rho):
    a2 = rho * rho
    denom = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


def smith_lambda(mu, rho):
    mu = np.clip(mu, 1e-12, 1.0)
    a2 = rho * rho
    return 0.5 * (-1.0 + np.sqrt(1.0 + a2 * (1.0 - mu * mu) / (mu * mu)))


def oracle_cell(cos_v, rho, n_theta=768, n_phi=1536):
    # n = +z, v in the x-z plane
    sin_v = np.sqrt(1.0 - cos_v * cos_v)
    v = np.array([sin_v, 0.0, cos_v])

    nodes, wts = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.25 * np.pi * (nodes + 1.0)          # [0, pi/2]
    th_w = 0.25 * np.pi * wts
    phi = (np.arange(n_phi) + 0.5) * (2.0 * np.pi / n_phi)
    ph_w = 2.0 * np.pi / n_phi

    st, ct = np.sin(theta), np.cos(theta)
    wi = np.stack(
        [
            np.outer(st, np.cos(phi)),
            np.outer(st, np.sin(phi)),
            np.broadcast_to(ct[:, None], (n_theta, n_phi)).copy(),
        ],
        axis=-1,
    )
    h = v[None, None, :] + wi
    h /= np.linalg.norm(h, axis=-1, keepdims=True)
    cos_h = np.clip(h[..., 2], 0.0, 1.0)
    vh = np.clip(h @ v, 0.0, 1.0)
    nl = ct[:, None]

    g = 1.0 / (1.0 + smith_lambda(cos_v, rho) + smith_lambda(nl, rho))
    base = ggx_d(cos_h, rho) * g / (4.0 * cos_v)
    fc = (1.0 - vh) ** 5
    measure = st[:, None] * th_w[:, None] * ph_w
    f1 = float((base * (1.0 - fc) * measure).sum())
    f2 = float((base * fc * measure).sum())
    return f1, f2


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--theta", type=int, default=768)
    ap.add_argument("--phi", type=int, default=1536)
    args = ap.parse_args()

    print("# (cos_v, rho): (F1, F2)  -- cell centers (i+0.5)/res, res=%d" % args.res)
    for i in PROBE_CELLS:
        for j in PROBE_CELLS:
            cos_v = (i + 0.5) / args.res
            rho = (j + 0.5) / args.res
            f1, f2 = oracle_cell(cos_v, rho, args.theta, args.phi)
            print(f"({i:2d}, {j:2d}): ({f1:.8f}, {f2:.8f}),")


if __name__ == "__main__":
    main()
