"""Slow scalar reference implementations shared by several test files."""
import math

import numpy as np


def embedding_oracle(q, r, E):
    """Scalar re-derivation of the embedding, one component at a time."""
    qcx, qcy, qw, qh = q.geometry
    rcx, rcy, rw, rh = r.geometry
    comps = [math.log(abs(rcx - qcx) / qw + 1e-3) - math.log(1e-3),
             math.log(abs(rcy - qcy) / qh + 1e-3) - math.log(1e-3),
             math.log(rw / qw), math.log(rh / qh), float(r.frame_index - q.frame_index)]
    n = max(1, round(E / 10))
    lams = [1000.0 ** (i / (n - 1)) if n > 1 else 1.0 for i in range(n)]
    out = []
    for c in comps:
        out += [math.sin(c / lam) for lam in lams]
        out += [math.cos(c / lam) for lam in lams]
    out = out[:E] + [0.0] * max(0, E - len(out))
    return np.array(out)


def module_oracle(queries, refs, p, mode):
    """Explicit-loop relation module: per head, per query, per reference."""
    d, M = p.dim, p.num_heads
    dk = d // M
    WQ, WK, WV, WG = p.w_query.data, p.w_key.data, p.w_value.data, p.w_geo.data
    out = []
    for qb in queries:
        rel = np.zeros(d)
        for m in range(M):
            rows = slice(m * dk, (m + 1) * dk)
            logits, gates = [], []
            for rb in refs:
                a = 0.0
                qv, kv = WQ[rows] @ qb.semantic, WK[rows] @ rb.semantic
                for i in range(dk):
                    a += qv[i] * kv[i]
                logits.append(a / math.sqrt(dk))
                if mode == "location_based":
                    emb = embedding_oracle(qb, rb, p.embed_dim)
                    gates.append(max(0.0, float(sum(WG[m, e] * emb[e] for e in range(len(emb))))))
                else:
                    gates.append(1.0)
            top = max(logits)
            if sum(gates) == 0.0:
                gates = [1.0] * len(refs)
            num = [g * math.exp(a - top) for g, a in zip(gates, logits)]
            z = sum(num)
            for w, rb in zip(num, refs):
                rel[rows] += (w / z) * (WV[rows] @ rb.semantic)
        pre = p.w_out.data @ (qb.semantic + rel) + p.b_out.data
        out.append(np.maximum(pre, 0.0))
    return np.array(out)
