"""Shared oracles for the test suite."""

import numpy as np


def mc_kl(mu_q, var_q, mu_p, var_p, n_samples, seed, antithetic=True):
    """Monte-Carlo KL(N(mu_q, diag(var_q)) || N(mu_p, var_p I)).

    Samples w ~ Q and averages log q(w) - log p(w), chunked to bound memory.
    Antithetic pairing (z, -z) cancels the odd part of the integrand, which
    tightens the estimate without biasing it.
    """
    mu_q = np.asarray(mu_q, dtype=np.float64)
    var_q = np.asarray(var_q, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    sd_q = np.sqrt(var_q)
    rng = np.random.default_rng(seed)

    def log_ratio(w):
        logq = -0.5 * np.sum(np.log(2 * np.pi * var_q)) \
            - np.sum((w - mu_q) ** 2 / (2 * var_q), axis=1)
        logp = -0.5 * w.shape[1] * np.log(2 * np.pi * var_p) \
            - np.sum((w - mu_p) ** 2, axis=1) / (2 * var_p)
        return logq - logp

    total, count = 0.0, 0
    chunk = max(1, 2_000_000 // mu_q.size)
    remaining = n_samples // 2 if antithetic else n_samples
    while remaining > 0:
        take = min(chunk, remaining)
        z = rng.standard_normal((take, mu_q.size))
        total += np.sum(log_ratio(mu_q + sd_q * z))
        count += take
        if antithetic:
            total += np.sum(log_ratio(mu_q - sd_q * z))
            count += take
        remaining -= take
    return total / count
