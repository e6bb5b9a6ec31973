"""Straight-line numpy re-evaluation of the model, one step at a time.

Works from a plain ``{name: ndarray}`` parameter map and uses explicit loops
(per head, per query row, per history slot) rather than masks and batching,
so it shares no code path with the torch implementation.
"""
import math

import numpy as np

EPS = 1e-5


def params_of(model):
    return {k: v.detach().double().numpy().copy() for k, v in model.state_dict().items()}


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def attention(q, k, v, scale):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        w = softmax([scale * float(q[i] @ k[j]) for j in range(k.shape[0])])
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


def multi_head(p, prefix, q, k, v, heads):
    dim = q.shape[1]
    width = dim // heads
    outs = []
    for i in range(heads):
        cols = slice(i * width, (i + 1) * width)
        outs.append(attention(q @ p[prefix + "w_q"][:, cols], k @ p[prefix + "w_k"][:, cols],
                              v @ p[prefix + "w_v"][:, cols], 1.0 / math.sqrt(dim)))
    return np.concatenate(outs, axis=1) @ p[prefix + "w_o"]


def layer_norm(x, scale, shift):
    out = np.zeros_like(x)
    for i, row in enumerate(x):
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = (row - mu) / math.sqrt(var + EPS) * scale + shift
    return out


def ffn(p, prefix, h):
    return np.maximum(h @ p[prefix + "w1"] + p[prefix + "b1"], 0.0) @ p[prefix + "w2"] + p[prefix + "b2"]


def encoder(p, prefix, x, heads):
    b = prefix + "blocks.0."
    h = layer_norm(x + multi_head(p, b + "attn.", x, x, x, heads), p[b + "norm1.scale"], p[b + "norm1.shift"])
    return layer_norm(h + ffn(p, b + "ffn.", h), p[b + "norm2.scale"], p[b + "norm2.shift"])


def gated(p, prefix, x):
    logits = [float(np.tanh(row @ p[prefix + "w1"] + p[prefix + "b1"]) @ p[prefix + "w2"][:, 0] + p[prefix + "b2"])
              for row in x]
    w = softmax(logits)
    return sum(w[i] * x[i] for i in range(len(x)))


def gcn(x, adj):
    a_hat = adj + np.eye(adj.shape[0])
    deg = a_hat.sum(axis=1)
    norm = np.diag(deg ** -0.5) @ a_hat @ np.diag(deg ** -0.5)
    return norm @ x


def graph_embedding(p, n_med):
    emb = p["emb_med"][:n_med]
    g_e = gcn(np.maximum(gcn(emb, p["graph.ehr_adj"]), 0) @ p["graph.w_ehr"], p["graph.ehr_adj"])
    g_d = gcn(np.maximum(gcn(emb, p["graph.ddi_adj"]), 0) @ p["graph.w_ddi"], p["graph.ddi_adj"])
    e_g = g_e - float(p["graph.lam"]) * g_d
    return np.vstack([e_g, np.zeros((2, emb.shape[1]))])


def encode_visit(p, visit, n_proc, heads):
    procs = list(visit.procedures) or [n_proc]
    d = encoder(p, "enc_diag.", p["emb_diag"][list(visit.diagnoses)], heads)
    pr = encoder(p, "enc_proc.", p["emb_proc"][procs], heads)
    return d, pr


def decode_step(p, visits, t, prefix, heads, vocab_sizes, use_copy=True, use_visit_scores=True, use_graph=True):
    """Pr over clinical medications + END for visit ``t`` after ``prefix``.

    Returns a dict with ``pr``, ``pr_g``, ``pr_c``, ``w_g``, ``c`` and the last hidden row ``h``.
    """
    n_diag, n_proc, n_med = vocab_sizes
    end_id, start_id = n_med, n_med + 1
    dim = p["emb_med"].shape[1]

    d_cur, p_cur = encode_visit(p, visits[t], n_proc, heads)

    tokens = [start_id] + list(prefix)
    m_hat = p["emb_med"][tokens]
    if use_graph:
        m_hat = m_hat + graph_embedding(p, n_med)[tokens]
    rows = []
    for i in range(len(tokens)):  # causal: row i sees tokens 0..i
        rows.append(multi_head(p, "dec_self_attn.", m_hat[i:i + 1], m_hat[: i + 1], m_hat[: i + 1], heads)[0])
    m1 = layer_norm(m_hat + np.array(rows), p["dec_norm1.scale"], p["dec_norm1.shift"])
    cross = multi_head(p, "dec_cross_diag.", m1, d_cur, d_cur, heads) + \
        multi_head(p, "dec_cross_proc.", m1, p_cur, p_cur, heads)
    m2 = layer_norm(m1 + cross, p["dec_norm2.scale"], p["dec_norm2.shift"])
    h = m2[-1]

    pr_g = softmax(h @ p["w_gen"] + p["b_gen"])
    out = {"pr_g": pr_g, "pr_c": np.zeros(n_med + 1), "w_g": 1.0, "c": np.zeros(0), "h": h}
    if t > 0 and use_copy:
        vd_t, vp_t = gated(p, "gate_diag.", d_cur), gated(p, "gate_proc.", p_cur)
        sims = []
        for j in range(t):
            d_j, p_j = encode_visit(p, visits[j], n_proc, heads)
            sims.append((gated(p, "gate_diag.", d_j) @ vd_t + gated(p, "gate_proc.", p_j) @ vp_t) / math.sqrt(dim))
        c = softmax(sims)
        query = h @ p["w_copy"]
        slots = []
        for j in range(t):
            enc = encoder(p, "enc_med.", p["emb_med"][list(visits[j].medications)], heads)
            for k, med in enumerate(visits[j].medications):
                slots.append((j, med, float(query @ enc[k]) / math.sqrt(dim)))
        q = softmax([s[2] for s in slots])
        raw = np.zeros(n_med + 1)
        for (j, med, _), q_jk in zip(slots, q):
            raw[med] += q_jk * (c[j] if use_visit_scores else 1.0)
        pr_c = raw / raw.sum()
        w_g = 1.0 / (1.0 + math.exp(-(float(h @ p["w_gate"][:, 0]) + float(p["b_gate"]))))
        pr = w_g * pr_g + (1 - w_g) * pr_c
        out.update(pr_c=pr_c, w_g=w_g, c=c)
    else:
        pr = pr_g.copy()
    for m in prefix:
        if m < n_med:
            pr[m] = 0.0
    out["pr"] = pr / pr.sum()
    return out
