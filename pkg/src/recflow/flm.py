"""Prompt-conditioned flow language model.

Encoder-decoder transformer over entity tokens. The encoder consumes the
user prompt (two projected preference vectors) followed by the schema prompt
(type-token embeddings); the decoder emits the entity sequence
autoregressively. Decoding is hard-masked: position j may only produce
entities of type t_j, and by default only entities within hop_limit of the
previously emitted entity, so generated flows stay on the graph. When a
teacher-forced target falls outside the connectivity set (real corpora are
not always graph-consistent), scoring widens that step to the full type
class; generated tokens never need the widening.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import embeddings as emb
from .kg import sample_path

MASK_NEG = -1e30


class AllSchemasUnreachable(RuntimeError):
    pass


class TypeMismatch(ValueError):
    def __init__(self, position, expected, got):
        super().__init__(f"flow position {position}: expected type "
                         f"{expected!r}, got {got!r}")
        self.position = position


class VocabMiss(KeyError):
    def __init__(self, entity):
        super().__init__(f"entity {entity!r} outside the token table")
        self.entity = entity


class EmptyTypeClass(ValueError):
    def __init__(self, type_name):
        super().__init__(f"no entities of type {type_name!r}")
        self.type_name = type_name


@dataclass
class FlowLMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    d_e: int = 128
    max_len: int = 16
    connectivity_mask: bool = True
    hop_limit: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class PromptBundle:
    e_u: ad.Tensor
    e_v: ad.Tensor
    schema: tuple


@dataclass
class FlowExample:
    entities: list
    schema: tuple
    seeker_entities: list
    recommender_entities: list
    source: str = "real"


class FlowLM:
    """Holds the parameter store and the masking tables for one HKG."""

    def __init__(self, hkg, config=None):
        self.hkg = hkg
        self.cfg = config or FlowLMConfig()
        kg = hkg.base
        self.num_entities = kg.num_entities
        self.bos = self.num_entities
        self.eos = self.num_entities + 1
        self.pad = self.num_entities + 2
        self.vocab_size = self.num_entities + 3
        self.store = ad.ParamStore()
        self._mask_cache = {}
        self._build_params()

    # -- parameters ---------------------------------------------------------
    def _build_params(self):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        s = self.store
        d, ff = cfg.d_model, cfg.ff_mult * cfg.d_model
        n_types = len(self.hkg.base.type_names)
        s.add("flm.tok_emb", ad.xavier_uniform((self.vocab_size, d), rng))
        s.add("flm.type_emb", ad.xavier_uniform((max(n_types, 1), d), rng))
        s.add("flm.pos_enc", ad.xavier_uniform((cfg.max_len + 2, d), rng))
        s.add("flm.pos_dec", ad.xavier_uniform((cfg.max_len + 1, d), rng))
        s.add("flm.prompt_w", ad.xavier_uniform((cfg.d_e, d), rng))
        s.add("flm.prompt_b", np.zeros(d))
        emb.init_attention_params(s, cfg.d_e, rng=rng, prefix="flm.attn")
        for side, blocks in (("enc", 1), ("dec", 2)):
            for layer in range(cfg.n_layers):
                base = f"flm.{side}.l{layer}"
                for blk in range(blocks):
                    tag = "self" if blk == 0 else "cross"
                    for w in ("q", "k", "v", "o"):
                        s.add(f"{base}.{tag}.{w}",
                              ad.xavier_uniform((d, d), rng))
                n_ln = blocks + 1
                for i in range(n_ln):
                    s.add(f"{base}.ln{i}.g", np.ones(d))
                    s.add(f"{base}.ln{i}.b", np.zeros(d))
                s.add(f"{base}.ff1", ad.xavier_uniform((d, ff), rng))
                s.add(f"{base}.ff1_b", np.zeros(ff))
                s.add(f"{base}.ff2", ad.xavier_uniform((ff, d), rng))
                s.add(f"{base}.ff2_b", np.zeros(d))
        s.add("flm.final_ln.g", np.ones(d))
        s.add("flm.final_ln.b", np.zeros(d))
        s.add("flm.head_w", np.zeros((d, self.vocab_size)))
        s.add("flm.head_b", np.zeros(self.vocab_size))

    # -- masking ------------------------------------------------------------
    def _type_entities(self, type_name):
        ids = self.hkg.base.entities_of_type(type_name)
        if not ids:
            raise EmptyTypeClass(type_name)
        return ids

    def allowed_entities(self, type_name, prev_entity=None):
        """Candidate token ids for a step: the type class, optionally
        intersected with the hop neighborhood of the previous entity
        (falling back to the whole class when that intersection is empty)."""
        key = (type_name, prev_entity if self.cfg.connectivity_mask else None)
        cached = self._mask_cache.get(key)
        if cached is not None:
            return cached
        ids = self._type_entities(type_name)
        if self.cfg.connectivity_mask and prev_entity is not None:
            hood = self.hkg.neighborhood(prev_entity, self.cfg.hop_limit)
            near = [e for e in ids if e == prev_entity or e in hood]
            if near:
                ids = near
        result = tuple(ids)
        self._mask_cache[key] = result
        return result

    def step_mask(self, type_name, prev_entity=None, target=None):
        """Additive logit mask for one decoding step. ``target`` (when given)
        is kept in support by widening to the type class if necessary."""
        allowed = self.allowed_entities(type_name, prev_entity)
        if target is not None and target not in allowed:
            allowed = tuple(self._type_entities(type_name))
        mask = np.full(self.vocab_size, MASK_NEG)
        mask[list(allowed)] = 0.0
        return mask

    # -- transformer pieces ---------------------------------------------------
    def _attention(self, x, kv, base, tag, mask=None):
        s, cfg = self.store, self.cfg
        n_heads = cfg.n_heads
        d = cfg.d_model
        dk = d // n_heads
        b, tq = x.shape[0], x.shape[1]
        bk, tk = kv.shape[0], kv.shape[1]

        def split(t, nb, tlen):
            return ad.swapaxes(ad.reshape(t, (nb, tlen, n_heads, dk)), 1, 2)

        q = split(x @ s[f"{base}.{tag}.q"], b, tq)
        k = split(kv @ s[f"{base}.{tag}.k"], bk, tk)
        v = split(kv @ s[f"{base}.{tag}.v"], bk, tk)
        scores = ad.mul(q @ ad.swapaxes(k, -1, -2), 1.0 / np.sqrt(dk))
        if mask is not None:
            scores = scores + ad.Tensor(mask)
        out = ad.softmax(scores, axis=-1) @ v
        out = ad.reshape(ad.swapaxes(out, 1, 2), (b, tq, d))
        return out @ s[f"{base}.{tag}.o"]

    def _ffn(self, x, base):
        s = self.store
        h = ad.tanh(x @ s[f"{base}.ff1"] + s[f"{base}.ff1_b"])
        return h @ s[f"{base}.ff2"] + s[f"{base}.ff2_b"]

    def _ln(self, x, name):
        s = self.store
        return ad.layer_norm(x, s[f"{name}.g"], s[f"{name}.b"])

    def encode(self, prompts_u, prompts_v, type_ids):
        """prompts_*: (B, d_e) Tensors; type_ids: (B, n) int array."""
        s, cfg = self.store, self.cfg
        b, n = type_ids.shape
        proj_u = prompts_u @ s["flm.prompt_w"] + s["flm.prompt_b"]
        proj_v = prompts_v @ s["flm.prompt_w"] + s["flm.prompt_b"]
        types = ad.reshape(ad.rows(s["flm.type_emb"], type_ids.reshape(-1)),
                           (b, n, cfg.d_model))
        x = ad.concat([ad.reshape(proj_u, (b, 1, cfg.d_model)),
                       ad.reshape(proj_v, (b, 1, cfg.d_model)), types], axis=1)
        x = x + ad.rows(s["flm.pos_enc"], np.arange(n + 2))
        for layer in range(cfg.n_layers):
            base = f"flm.enc.l{layer}"
            h = self._ln(x, f"{base}.ln0")
            x = x + self._attention(h, h, base, "self")
            x = x + self._ffn(self._ln(x, f"{base}.ln1"), base)
        return x

    def decode(self, token_ids, enc_out):
        """token_ids: (B, n) decoder input ids; returns (B, n, vocab) logits
        before masking."""
        s, cfg = self.store, self.cfg
        b, n = token_ids.shape
        x = ad.reshape(ad.rows(s["flm.tok_emb"], token_ids.reshape(-1)),
                       (b, n, cfg.d_model))
        x = x + ad.rows(s["flm.pos_dec"], np.arange(n))
        causal = np.triu(np.full((n, n), MASK_NEG), k=1)
        for layer in range(cfg.n_layers):
            base = f"flm.dec.l{layer}"
            h = self._ln(x, f"{base}.ln0")
            x = x + self._attention(h, h, base, "self", mask=causal)
            x = x + self._attention(self._ln(x, f"{base}.ln1"), enc_out,
                                    base, "cross")
            x = x + self._ffn(self._ln(x, f"{base}.ln2"), base)
        x = self._ln(x, "flm.final_ln")
        return x @ s["flm.head_w"] + s["flm.head_b"]

    def check_flow(self, flow, schema):
        if len(flow) != len(schema):
            raise ValueError(f"flow length {len(flow)} != schema length "
                             f"{len(schema)}")
        kg = self.hkg.base
        for j, (eid, tname) in enumerate(zip(flow, schema)):
            if not (0 <= eid < self.num_entities):
                raise VocabMiss(eid)
            if kg.type_name_of(eid) != tname:
                raise TypeMismatch(j, tname, kg.type_name_of(eid))

    def type_ids(self, schema):
        kg = self.hkg.base
        return np.array([kg.type_id(t) for t in schema], dtype=np.intp)


def flow_step_log_probs(flm, prompt, flow):
    """Per-step log-probabilities of ``flow`` under the masked decoder.

    Differentiable w.r.t. the model parameters and the prompt tensors, which
    is the gradient path preference edits rely on.
    """
    flm.check_flow(flow, prompt.schema)
    n = len(flow)
    e_u = ad.reshape(ad.as_tensor(prompt.e_u), (1, -1))
    e_v = ad.reshape(ad.as_tensor(prompt.e_v), (1, -1))
    enc = flm.encode(e_u, e_v, flm.type_ids(prompt.schema)[None, :])
    dec_in = np.array([[flm.bos] + list(flow[:-1])], dtype=np.intp)
    logits = flm.decode(dec_in, enc)
    masks = np.stack([
        flm.step_mask(prompt.schema[j],
                      prev_entity=flow[j - 1] if j else None,
                      target=flow[j])
        for j in range(n)
    ])
    logp = ad.log_softmax(logits + ad.Tensor(masks[None, :, :]), axis=-1)
    return ad.take_pairs(ad.reshape(logp, (n, flm.vocab_size)),
                         np.arange(n), np.asarray(flow, dtype=np.intp))


def flow_log_prob(flm, prompt, flow):
    """Total log-probability: the sum of the per-step values."""
    return ad.tensor_sum(flow_step_log_probs(flm, prompt, flow))


def flow_log_probs_batch(flm, prompt, flows):
    """Log-probabilities of several same-schema flows under one prompt.

    Returns a (len(flows),) tensor sharing the prompt subgraph, so gradients
    w.r.t. the prompt tensors accumulate across the batch.
    """
    n = len(prompt.schema)
    for f in flows:
        flm.check_flow(f, prompt.schema)
    t = len(flows)
    e_u = ad.reshape(ad.as_tensor(prompt.e_u), (1, -1))
    e_v = ad.reshape(ad.as_tensor(prompt.e_v), (1, -1))
    enc = flm.encode(e_u, e_v, flm.type_ids(prompt.schema)[None, :])
    dec_in = np.array([[flm.bos] + list(f[:-1]) for f in flows],
                      dtype=np.intp)
    logits = flm.decode(dec_in, enc)
    masks = np.stack([
        [flm.step_mask(prompt.schema[j],
                       prev_entity=f[j - 1] if j else None,
                       target=f[j]) for j in range(n)]
        for f in flows
    ])
    logp = ad.log_softmax(logits + ad.Tensor(masks), axis=-1)
    flat = ad.reshape(logp, (t * n, flm.vocab_size))
    targets = np.concatenate([list(f) for f in flows]).astype(np.intp)
    picked = ad.take_pairs(flat, np.arange(t * n), targets)
    return ad.tensor_sum(ad.reshape(picked, (t, n)), axis=1)


def generate_flows_batch(flm, e_u, e_v, schema, rng, count,
                         temperature=1.0, greedy=False):
    """Decode ``count`` flows in parallel for one prompt/schema pair.

    Sampling uses the Gumbel-max trick on the masked logits, so each row is
    an exact draw from the masked softmax at the given temperature. Every
    emitted token satisfies the schema type constraint; with connectivity
    masking on, consecutive entities stay within hop_limit of each other
    whenever the graph allows it.
    """
    if not greedy and temperature <= 0:
        raise ValueError("temperature must be positive when sampling")
    for t in schema:
        flm._type_entities(t)  # EmptyTypeClass early
    e_u = np.asarray(e_u.data if isinstance(e_u, ad.Tensor) else e_u)
    e_v = np.asarray(e_v.data if isinstance(e_v, ad.Tensor) else e_v)
    tokens = np.full((count, 1), flm.bos, dtype=np.intp)
    with ad.no_grad():
        enc = flm.encode(ad.Tensor(e_u[None, :]), ad.Tensor(e_v[None, :]),
                         flm.type_ids(schema)[None, :])
        for j, tname in enumerate(schema):
            logits = flm.decode(tokens, enc).data[:, -1, :]
            if j == 0:
                masked = logits + flm.step_mask(tname)[None, :]
            else:
                masks = np.stack([flm.step_mask(tname, prev_entity=int(p))
                                  for p in tokens[:, -1]])
                masked = logits + masks
            if greedy:
                nxt = np.argmax(masked, axis=-1)
            else:
                gumbel = -np.log(-np.log(
                    rng.uniform(size=masked.shape)))
                nxt = np.argmax(masked / temperature + gumbel, axis=-1)
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return [list(map(int, row)) for row in tokens[:, 1:]]


def generate_flow(flm, e_u, e_v, schema, rng, temperature=1.0, greedy=False):
    """Single-flow convenience wrapper around generate_flows_batch."""
    return generate_flows_batch(flm, e_u, e_v, schema, rng, 1,
                                temperature=temperature, greedy=greedy)[0]


def sample_pseudo_flow(hkg, catalog, rng, hop_limit=2, retry_budget=50,
                       max_schema_tries=200):
    """Draw a schema uniformly, sample a graph path for it, and split the
    entities into two preference groups.

    Schemas that cannot produce a path are resampled; after
    ``max_schema_tries`` consecutive failures the catalog is considered
    unreachable as a whole.
    """
    if len(catalog) == 0:
        raise AllSchemasUnreachable("empty schema catalog")
    for _ in range(max_schema_tries):
        schema = catalog.schemas[int(rng.integers(len(catalog)))]
        flow = sample_path(hkg, schema, rng, retry_budget=retry_budget,
                           hop_limit=hop_limit)
        if flow is None:
            continue
        n = len(flow)
        if n == 1:
            # degenerate length: the seeker holds the single entity
            groups = [True]
        else:
            while True:
                groups = rng.integers(0, 2, size=n) == 0
                if groups.any() and not groups.all():
                    break
        seeker, rec = [], []
        for eid, to_seeker in zip(flow, groups):
            bucket = seeker if to_seeker else rec
            if eid not in bucket:
                bucket.append(eid)
        return FlowExample(entities=flow, schema=tuple(schema),
                           seeker_entities=seeker, recommender_entities=rec,
                           source="pseudo")
    raise AllSchemasUnreachable(
        f"no schema produced a path in {max_schema_tries} tries")


def user_prompt(flm, entity_ids, entity_emb):
    """Preference vector for an interaction list under the model's own
    attention parameters; an empty list maps to the zero vector."""
    if len(entity_ids) == 0:
        return ad.Tensor(np.zeros(flm.cfg.d_e))
    mat = entity_emb[np.asarray(entity_ids, dtype=np.intp)]
    pref = emb.encode_user(ad.Tensor(mat), flm.store["flm.attn.w"],
                           flm.store["flm.attn.b"])
    return pref.e_u


def pretrain_flm(flm, examples, entity_emb, epochs=3, batch_size=16,
                 lr=1e-3, weight_decay=0.0, seed=0):
    """Teacher-forced cross-entropy pre-training on a flow collection.

    ``entity_emb`` is the frozen (num_nodes, d_e) table prompts are built
    from. Returns the mean per-flow NLL per epoch; the caller freezes the
    model afterwards.
    """
    rng = np.random.default_rng(seed)
    for ex in examples:
        flm.check_flow(ex.entities, ex.schema)
    buckets = {}
    for ex in examples:
        buckets.setdefault(len(ex.entities), []).append(ex)
    history = []
    for _ in range(epochs):
        batches = []
        for length in sorted(buckets):
            pool = buckets[length][:]
            rng.shuffle(pool)
            for i in range(0, len(pool), batch_size):
                batches.append(pool[i:i + batch_size])
        order = rng.permutation(len(batches))
        total_nll, total_flows = 0.0, 0
        for bi in order:
            batch = batches[bi]
            loss = _batch_nll(flm, batch, entity_emb)
            grads = ad.backward(loss, flm.store)
            ad.optimizer_step(flm.store, grads, lr=lr,
                              weight_decay=weight_decay)
            total_nll += loss.item() * len(batch)
            total_flows += len(batch)
        history.append(total_nll / max(total_flows, 1))
    return history


def _batch_nll(flm, batch, entity_emb):
    """Mean per-flow negative log-likelihood of a same-length batch."""
    b = len(batch)
    n = len(batch[0].entities)
    prompts_u = ad.concat([ad.reshape(user_prompt(flm, ex.seeker_entities,
                                                  entity_emb), (1, -1))
                           for ex in batch], axis=0)
    prompts_v = ad.concat([ad.reshape(user_prompt(flm, ex.recommender_entities,
                                                  entity_emb), (1, -1))
                           for ex in batch], axis=0)
    type_ids = np.stack([flm.type_ids(ex.schema) for ex in batch])
    enc = flm.encode(prompts_u, prompts_v, type_ids)
    dec_in = np.stack([[flm.bos] + list(ex.entities[:-1]) for ex in batch])
    logits = flm.decode(dec_in.astype(np.intp), enc)
    masks = np.stack([
        [flm.step_mask(ex.schema[j],
                       prev_entity=ex.entities[j - 1] if j else None,
                       target=ex.entities[j]) for j in range(n)]
        for ex in batch
    ])
    logp = ad.log_softmax(logits + ad.Tensor(masks), axis=-1)
    flat = ad.reshape(logp, (b * n, flm.vocab_size))
    targets = np.concatenate([ex.entities for ex in batch]).astype(np.intp)
    picked = ad.take_pairs(flat, np.arange(b * n), targets)
    return -ad.mul(ad.tensor_sum(picked), 1.0 / b)
