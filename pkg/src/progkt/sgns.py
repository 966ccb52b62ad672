"""Skip-gram with negative sampling over integer token sequences.

Shared by the code-token pre-training and the random-walk graph embedding.
Plain numpy SGD with hand-written gradients; nothing here goes on a tape.
"""
import numpy as np


def context_pairs(sequences, window):
    centers, contexts = [], []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        n = len(seq)
        for off in range(1, window + 1):
            if off >= n:
                break
            centers += [seq[:-off], seq[off:]]
            contexts += [seq[off:], seq[:-off]]
    if not centers:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _log_sigmoid_grad(x):
    # d/dx log(sigmoid(x)) = 1 - sigmoid(x)
    return 1.0 / (1.0 + np.exp(np.clip(x, -30, 30)))


def _scatter_mean(table, rows, grads, alpha):
    # frequent ids occur many times per batch; summing their updates diverges
    uniq, inv, counts = np.unique(rows, return_inverse=True, return_counts=True)
    acc = np.zeros((len(uniq), table.shape[1]))
    np.add.at(acc, inv, grads)
    table[uniq] += alpha * acc / counts[:, None]


def train_sgns(sequences, vocab_size, dim=100, window=5, negatives=5, epochs=5,
               lr=1.0, batch_size=1024, seed=0, ignore=(), max_pairs=None):
    """Return ``(input_vectors, output_vectors)``; rows for never-seen ids keep
    their random initialisation. ``ignore`` lists ids dropped from the pairs
    (padding and the like); ``max_pairs`` subsamples the (center, context)
    pairs once, up front."""
    if window < 1 or negatives < 1:
        raise ValueError("window and negatives must be >= 1")
    rng = np.random.default_rng(seed)
    centers, contexts = context_pairs(sequences, window)
    if ignore:
        keep = ~(np.isin(centers, ignore) | np.isin(contexts, ignore))
        centers, contexts = centers[keep], contexts[keep]
    if len(centers) == 0:
        raise ValueError("corpus yields no skip-gram pairs")
    if max_pairs is not None and len(centers) > max_pairs:
        keep = np.sort(rng.choice(len(centers), size=max_pairs, replace=False))
        centers, contexts = centers[keep], contexts[keep]

    counts = np.bincount(np.concatenate([np.asarray(s, np.int64) for s in sequences]),
                         minlength=vocab_size).astype(float)
    if ignore:
        counts[list(ignore)] = 0.0
    noise = counts ** 0.75
    noise /= noise.sum()

    w_in = (rng.random((vocab_size, dim)) - 0.5) / dim
    w_out = np.zeros((vocab_size, dim))
    n = len(centers)
    total_steps = epochs * int(np.ceil(n / batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            c, o = centers[idx], contexts[idx]
            neg = rng.choice(vocab_size, size=(len(idx), negatives), p=noise)
            alpha = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1

            vc = w_in[c]
            vo = w_out[o]
            vn = w_out[neg]
            g_pos = _log_sigmoid_grad(np.sum(vc * vo, axis=1))
            g_neg = -_log_sigmoid_grad(-np.einsum("bd,bkd->bk", vc, vn))
            grad_c = g_pos[:, None] * vo + np.einsum("bk,bkd->bd", g_neg, vn)
            grad_o = g_pos[:, None] * vc
            grad_n = g_neg[:, :, None] * vc[:, None, :]
            _scatter_mean(w_in, c, grad_c, alpha)
            _scatter_mean(w_out, np.concatenate([o, neg.reshape(-1)]),
                          np.concatenate([grad_o, grad_n.reshape(-1, dim)]), alpha)
    return w_in, w_out


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
