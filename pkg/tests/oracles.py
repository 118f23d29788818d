"""Independent reference implementations used only by the tests.

Everything here is written with explicit loops in extended precision so it
shares no code path with the vectorised package implementation.
"""

import math

import numpy as np

LD = np.longdouble


def encode_loop(tokens, embedding, projection, bias, normalize):
    h = embedding.shape[1]
    mean = [LD(0)] * h
    for t in tokens:
        for k in range(h):
            mean[k] += LD(embedding[t, k]) / LD(len(tokens))
    out = []
    for r in range(h):
        z = LD(bias[r])
        for k in range(h):
            z += LD(projection[r, k]) * mean[k]
        out.append(np.tanh(z))
    if normalize:
        norm = np.sqrt(sum(v * v for v in out))
        out = [v / norm for v in out]
    return out


def loss_loop(batch, arrays, teacher_log_probs, flags, temperature, similarity, reverse_kl=False):
    """Mean corrected loss of a LossBatch, recomputed from raw parameter arrays."""
    q_tower = (arrays["embedding"], arrays["projection"], arrays["bias"])
    if "doc.embedding" in arrays:
        d_tower = (arrays["doc.embedding"], arrays["doc.projection"], arrays["doc.bias"])
    else:
        d_tower = q_tower
    normalize = similarity == "cosine"
    qs = [encode_loop(t, *q_tower, normalize) for t in batch.query_tokens]
    ds = [encode_loop(t, *d_tower, normalize) for t in batch.doc_tokens]
    total = LD(0)
    for i, q in enumerate(qs):
        logits = [LD(temperature) * sum(a * b for a, b in zip(q, d)) for d in ds]
        top = max(logits)
        lse = top + np.log(sum(np.exp(s - top) for s in logits))
        log_p = [s - lse for s in logits]
        term = -LD(flags[i]) * log_p[batch.positive_index[i]]
        if teacher_log_probs is not None:
            log_t = [LD(v) for v in teacher_log_probs[i]]
            if reverse_kl:
                term += sum(np.exp(lt) * (lt - lp) for lt, lp in zip(log_t, log_p))
            else:
                term += sum(np.exp(lp) * (lp - lt) for lp, lt in zip(log_p, log_t))
        total += term
    return total / LD(len(qs))


def central_difference(fn, arrays, step=1e-5):
    """d fn / d arrays by central differences; ``fn`` reads ``arrays`` in place."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = fn()
            arr[idx] = old - step
            down = fn()
            arr[idx] = old
            g[idx] = float((up - down) / LD(2 * step))
        grads[name] = g
    return grads


def em_reference(x, mu, var, w, iters=500, tol=1e-12):
    """Textbook two-component EM with plain densities."""
    x = list(x)
    mu, var, w = list(mu), list(var), list(w)
    prev = -math.inf
    for _ in range(iters):
        resp = []
        ll = 0.0
        for xi in x:
            dens = [w[k] / math.sqrt(2 * math.pi * var[k]) * math.exp(-((xi - mu[k]) ** 2) / (2 * var[k])) for k in range(2)]
            s = sum(dens)
            ll += math.log(s)
            resp.append([d / s for d in dens])
        ll /= len(x)
        for k in range(2):
            nk = sum(r[k] for r in resp)
            w[k] = nk / len(x)
            mu[k] = sum(r[k] * xi for r, xi in zip(resp, x)) / nk
            var[k] = max(sum(r[k] * (xi - mu[k]) ** 2 for r, xi in zip(resp, x)) / nk, 1e-6)
        if ll - prev < tol:
            break
        prev = ll
    return mu, var, w


def gaussian_pdf(x, mu, var):
    return math.exp(-((x - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
