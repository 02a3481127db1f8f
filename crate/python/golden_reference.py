#!/usr/bin/env python3
"""Independent NumPy reference for the encoder forward pass and the
two-step intent wiring. Weights are filled from a closed-form integer
formula (exactly representable dyadic rationals), so the Rust side can
construct identical tensors without sharing any serialization with this
script. Output is frozen at crates/intentive/tests/fixtures/encoder_golden.json.

Regenerate with: python3 python/golden_reference.py
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / \
    "crates/intentive/tests/fixtures/encoder_golden.json"

L, D, H, F = 2, 8, 2, 16
VOCAB, MAXLEN = 12, 6
EPS = 1e-5
GELU_C = 0.7978845608028654


def fnv1a(s: str) -> int:
    h = 0x811C9DC5
    for b in s.encode():
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def formula_tensor(name: str, rows: int, cols: int) -> np.ndarray:
    h = fnv1a(name)
    p = 3 + h % 17
    q = 5 + (h >> 8) % 19
    r = (h >> 16) % 23
    return np.array(
        [[((i * p + j * q + r) % 29 - 14) / 64.0 for j in range(cols)]
         for i in range(rows)],
        dtype=np.float64,
    )


LAYER_FIELDS = [
    ("wq", D, D), ("bq", 1, D), ("wk", D, D), ("bk", 1, D),
    ("wv", D, D), ("bv", 1, D), ("wo", D, D), ("bo", 1, D),
    ("ln1_gain", 1, D), ("ln1_bias", 1, D),
    ("w1", D, F), ("b1", 1, F), ("w2", F, D), ("b2", 1, D),
    ("ln2_gain", 1, D), ("ln2_bias", 1, D),
]


def layer_weights(prefix: str) -> dict:
    return {f: formula_tensor(f"{prefix}.{f}", r, c) for f, r, c in LAYER_FIELDS}


def layer_norm(x, gain, bias):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + EPS) * gain + bias


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def layer_forward(h, w):
    dh = D // H
    q = h @ w["wq"] + w["bq"]
    k = h @ w["wk"] + w["bk"]
    v = h @ w["wv"] + w["bv"]
    heads = []
    for g in range(H):
        sl = slice(g * dh, (g + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) / np.sqrt(dh)
        heads.append(softmax_rows(scores) @ v[:, sl])
    attn = np.concatenate(heads, axis=1) @ w["wo"] + w["bo"]
    h = layer_norm(h + attn, w["ln1_gain"], w["ln1_bias"])
    ff = gelu(h @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
    return layer_norm(h + ff, w["ln2_gain"], w["ln2_bias"])


def embed(prefix: str, ids):
    tok = formula_tensor(f"{prefix}.token_emb", VOCAB, D)
    pos = formula_tensor(f"{prefix}.pos_emb", MAXLEN, D)
    return np.array([tok[t] + pos[i] for i, t in enumerate(ids)])


def forward(prefix: str, ids):
    layers = [layer_weights(f"{prefix}.layer.{i}") for i in range(L)]
    states = [embed(prefix, ids)]
    for w in layers:
        states.append(layer_forward(states[-1], w))
    return states


def main():
    q_ids = [0, 3, 4, 5]
    d_ids = [0, 6, 7]

    q_states = forward("q", q_ids)
    d_states = forward("d", d_ids)
    q_cls = q_states[-1][0]
    d_cls = d_states[-1][0]

    # Intent path: tap after base layer 1, two introspector layers at
    # the same width, inject at l_late = 2 (the top), CLS pooling.
    zp1_w = formula_tensor("zp1.weight", D, D)
    zp1_b = formula_tensor("zp1.bias", 1, D)
    zp2_w = formula_tensor("zp2.weight", D, D)
    zp2_b = formula_tensor("zp2.bias", 1, D)
    c = formula_tensor("c", 1, D)

    h_early = q_states[1]
    intro_in = h_early + (c @ zp1_w + zp1_b)
    k = intro_in
    for i in range(2):
        k = layer_forward(k, layer_weights(f"intro.{i}"))
    h_late = layer_forward(h_early, layer_weights("q.layer.1"))
    fused = h_late + (k @ zp2_w + zp2_b)
    intent_cls = fused[0]

    fixture = {
        "config": {
            "num_layers": L, "hidden_dim": D, "num_heads": H,
            "intermediate_dim": F, "vocab_size": VOCAB, "max_len": MAXLEN,
        },
        "query_ids": q_ids,
        "doc_ids": d_ids,
        "query_states": [s.tolist() for s in q_states],
        "doc_cls": d_cls.tolist(),
        "dot": float(q_cls @ d_cls),
        "intent": {
            "l_early": 1,
            "l_late": 2,
            "c": c[0].tolist(),
            "embedding": intent_cls.tolist(),
        },
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(fixture, indent=1) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
