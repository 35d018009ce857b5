"""Entity representations over the heterogeneous graph and the attentive
user-preference encoder.

The relational graph encoder follows the basis-decomposition formulation:
per layer, node n receives mean-normalized messages per relation plus a
self-connection,

    h'_n = act( sum_r sum_{m in N_r(n)} (1/c_{n,r}) W_r h_m + W_self h_n ),

with W_r = sum_b a_{r,b} V_b. Nodes with no neighbors under a relation simply
skip that relation's term. User preference is the attention-weighted
combination of the user's interacted-entity embeddings,

    alpha = softmax(b^T tanh(W_a E_u^T)),   e_u = E_u^T alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class EmptyEntitySet(ValueError):
    pass


@dataclass
class UserPreference:
    e_u: ad.Tensor        # (d_e,) via reshape of (1, d_e)
    alpha: ad.Tensor      # (n,)
    entity_matrix: ad.Tensor  # (n, d_e) view the attention ran over


def init_rgcn_params(store, hkg, d_e, num_layers=1, num_bases=8,
                     rng=None, prefix="rgcn", dtype=None):
    """Register the node table and per-layer relational weights."""
    rng = rng or np.random.default_rng(0)
    num_rel = len(hkg.rgcn_relations())
    if num_bases > num_rel:
        raise ValueError(f"num_bases {num_bases} exceeds relation count {num_rel}")
    store.add(f"{prefix}.node_emb",
              ad.xavier_uniform((hkg.num_nodes, d_e), rng), dtype=dtype)
    for layer in range(num_layers):
        store.add(f"{prefix}.l{layer}.bases",
                  ad.xavier_uniform((num_bases, d_e, d_e), rng), dtype=dtype)
        store.add(f"{prefix}.l{layer}.coeffs",
                  ad.xavier_uniform((num_rel, num_bases), rng), dtype=dtype)
        store.add(f"{prefix}.l{layer}.w_self",
                  ad.xavier_uniform((d_e, d_e), rng), dtype=dtype)
    return store


def _relation_edges(hkg):
    edges = []
    for name, src, dst in hkg.rgcn_relations():
        if len(src) == 0:
            edges.append((name, src, dst, None))
            continue
        counts = np.bincount(dst, minlength=hkg.num_nodes).astype(np.float64)
        inv = 1.0 / counts[dst]
        edges.append((name, src, dst, inv))
    return edges


def rgcn_forward(hkg, store, num_layers=1, prefix="rgcn", activation="tanh"):
    """Return the (num_nodes, d_e) embedding table after message passing.

    Differentiable w.r.t. the node table and all layer weights in ``store``.
    """
    h = store[f"{prefix}.node_emb"]
    acts = {"tanh": ad.tanh, "relu": ad.relu, "linear": lambda t: t}
    act = acts[activation]
    edges = _relation_edges(hkg)
    n = hkg.num_nodes
    for layer in range(num_layers):
        bases = store[f"{prefix}.l{layer}.bases"]
        coeffs = store[f"{prefix}.l{layer}.coeffs"]
        w_self = store[f"{prefix}.l{layer}.w_self"]
        nb, d_in, d_out = bases.shape
        flat = ad.reshape(bases, (nb, d_in * d_out))
        total = h @ w_self
        for rid, (_, src, dst, inv) in enumerate(edges):
            if inv is None:
                continue
            w_r = ad.reshape(ad.rows(coeffs, [rid]) @ flat, (d_in, d_out))
            msgs = ad.rows(h @ w_r, src)
            total = total + ad.aggregate_rows(msgs, dst, inv, n)
        h = act(total)
    return h


def init_attention_params(store, d_e, rng=None, prefix="attn", dtype=None):
    rng = rng or np.random.default_rng(0)
    store.add(f"{prefix}.w", ad.xavier_uniform((d_e, d_e), rng), dtype=dtype)
    store.add(f"{prefix}.b", ad.xavier_uniform((d_e, 1), rng), dtype=dtype)
    return store


def encode_user(entity_matrix, w_attn, b_attn):
    """Attention-pool a (n, d_e) entity matrix into a preference vector.

    Output depends only on the rows of ``entity_matrix``, never on any user
    identity, so it applies unchanged to unseen users.
    """
    entity_matrix = ad.as_tensor(entity_matrix)
    if entity_matrix.ndim != 2 or entity_matrix.shape[0] < 1:
        raise EmptyEntitySet("need a non-empty (n, d_e) entity matrix")
    scores = ad.tanh(entity_matrix @ ad.transpose(w_attn)) @ b_attn  # (n, 1)
    alpha = ad.softmax(ad.reshape(scores, (-1,)), axis=-1)
    n = entity_matrix.shape[0]
    e_u = ad.reshape(ad.reshape(alpha, (1, n)) @ entity_matrix, (-1,))
    return UserPreference(e_u=e_u, alpha=alpha, entity_matrix=entity_matrix)
