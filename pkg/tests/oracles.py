"""Independent reference computations used as test oracles."""
import numpy as np


def listing_postprocess(p_mask, q_scores):
    """Straight-line reference version of the greedy claim loop, kept deliberately literal."""
    p_mask_c = p_mask.copy()
    f_mask = np.zeros_like(p_mask)
    q_sorted = np.argsort(q_scores)

    for q_ind in q_sorted[::-1]:
        f_mask[q_ind] = p_mask_c[q_ind]
        non_zero_els = np.argwhere(f_mask[q_ind] != 0)
        p_mask_c[:, non_zero_els] = 0
        p_mask_c[non_zero_els, :] = 0

    return f_mask


def random_relation(rng, n, density=None):
    """Random symmetric reflexive 0/1 matrix."""
    density = rng.uniform(0.05, 0.9) if density is None else density
    upper = np.triu((rng.random((n, n)) < density).astype(np.int8), k=1)
    mask = upper + upper.T
    np.fill_diagonal(mask, 1)
    return mask


def mann_whitney_auc(scores, is_match):
    """Probability that a random match outscores a random non-match (ties count half)."""
    scores = np.asarray(scores)
    is_match = np.asarray(is_match, dtype=bool)
    pos, neg = scores[is_match], scores[~is_match]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def central_difference(f, arr, h=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-5):
    """Largest entrywise |a - n| / max(|a|, |n|, floor); the floor keeps exact zeros well defined."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def reference_multi_head(fp, block, mask=None):
    """Concatenate per-head outputs of the plain 2-D attention head, then apply W_o."""
    from trackpool.encoder import attention_head

    heads = [attention_head(fp, block["wq"][i], block["wk"][i], block["wv"][i], mask) for i in range(block["wq"].shape[0])]
    return np.concatenate(heads, axis=1) @ block["wo"]


def reference_encode(f, cfg, blocks):
    """Row-by-row post-norm encoder built from the plain linalg primitives (no autograd)."""
    from trackpool.encoder import positional_encoding
    from trackpool.linalg import layer_norm

    x = np.asarray(f, dtype=np.float64) * cfg.input_scale
    if cfg.use_positional_encoding:
        x = x + positional_encoding(x.shape[0], x.shape[1])
    for b in blocks:
        y = x + reference_multi_head(x, b)
        x = np.array([layer_norm(row, b["ln1_gain"], b["ln1_bias"]) for row in y])
        hidden = np.maximum(x @ b["ffn_w1"] + b["ffn_b1"], 0.0)
        y = x + hidden @ b["ffn_w2"] + b["ffn_b2"]
        x = np.array([layer_norm(row, b["ln2_gain"], b["ln2_bias"]) for row in y])
    return x
