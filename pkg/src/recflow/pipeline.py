"""Assembly helpers shared by the CLI and the training loops: corpus
artifacts, simulator construction, and sample extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import flm as flmm
from . import realization as rz
from . import schema as sc


class DataError(ValueError):
    pass


@dataclass
class SimulatorConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    max_len: int = 16
    min_support: int = 5
    hop_limit: int = 2
    connectivity_mask: bool = True
    pseudo_ratio: int = 4        # pseudo flows per real flow
    flm_epochs: int = 3
    flm_batch: int = 16
    flm_lr: float = 1e-3
    clf_steps: int = 200
    clf_lr: float = 1e-3
    seed: int = 0


@dataclass
class SimulatorBundle:
    """Everything the frozen dialogue simulator needs at generation time."""

    flm: flmm.FlowLM
    catalog: sc.SchemaCatalog
    clf_store: ad.ParamStore
    bank: rz.TemplateBank
    entity_emb: np.ndarray
    hkg: object
    pretrain_history: list = field(default_factory=list)

    def prompt(self, entity_ids):
        return flmm.user_prompt(self.flm, entity_ids, self.entity_emb)

    def predict_schema(self, e_u, e_v):
        probs, best = sc.predict_schema(e_u, e_v, self.clf_store, self.catalog)
        return self.catalog.schemas[best]

    def simulate(self, e_u, e_v, rng, dialogue_id="sim", temperature=1.0,
                 user_pair=None, schema=None):
        """Predict a schema (unless given), generate a flow, realize it."""
        e_u_val = e_u.data if isinstance(e_u, ad.Tensor) else np.asarray(e_u)
        e_v_val = e_v.data if isinstance(e_v, ad.Tensor) else np.asarray(e_v)
        if schema is None:
            schema = self.predict_schema(e_u_val, e_v_val)
        flow = flmm.generate_flow(self.flm, e_u_val, e_v_val, schema, rng,
                                  temperature=temperature)
        return rz.realize(flow, schema, self.bank, self.hkg.base, rng,
                          dialogue_id=dialogue_id, user_pair=user_pair)


def corpus_flows(dialogues, kg, max_len=None):
    """(FlowExample, dialogue) pairs for every dialogue with mentions; flows
    longer than max_len are truncated with their schemas."""
    out = []
    for d in dialogues:
        flow, schema = cp.extract_flow(d, kg)
        if not len(flow):
            continue
        entities = flow.entities
        speakers = flow.speaker
        if max_len is not None:
            entities = entities[:max_len]
            schema = schema[:max_len]
            speakers = speakers[:max_len]
        seeker, rec = [], []
        for eid, role in zip(entities, speakers):
            bucket = seeker if role == cp.SEEKER else rec
            if eid not in bucket:
                bucket.append(eid)
        out.append((flmm.FlowExample(entities=list(entities),
                                     schema=tuple(schema),
                                     seeker_entities=seeker,
                                     recommender_entities=rec,
                                     source="real"), d))
    return out


def samples_from_dialogues(dialogues, kg, source="real"):
    samples = []
    for d in dialogues:
        samples.extend(rz.to_rec_samples(d, kg, source=source))
    return samples


@dataclass
class UserPair:
    user_u: str
    user_v: str
    u_entities: list
    v_entities: list


def build_user_pairs(dialogues, hkg):
    """One (seeker, recommender) pair per dialogue where both users have
    interaction lists in the graph."""
    pairs = []
    for d in dialogues:
        u, v = d.user_of(cp.SEEKER), d.user_of(cp.RECOMMENDER)
        if u in hkg.interactions and v in hkg.interactions:
            pairs.append(UserPair(user_u=u, user_v=v,
                                  u_entities=list(hkg.interactions[u]),
                                  v_entities=list(hkg.interactions[v])))
    return pairs


def build_simulator(hkg, train_dialogues, entity_emb, cfg=None):
    """Mine schemas, pre-train the flow model on real + pseudo flows, train
    the schema classifier, and collect the template bank.

    ``entity_emb`` is the frozen node table (from the pre-trained
    recommender); the simulator never writes it.
    """
    cfg = cfg or SimulatorConfig()
    kg = hkg.base
    rng = np.random.default_rng(cfg.seed)
    real = corpus_flows(train_dialogues, kg, max_len=cfg.max_len)
    if not real:
        raise DataError("no non-empty conversation flows in the corpus")
    catalog = sc.mine_schemas([ex.schema for ex, _ in real],
                              min_support=cfg.min_support,
                              max_len=cfg.max_len)
    if len(catalog) == 0:
        raise DataError(f"no schema reaches min_support={cfg.min_support}")

    model = flmm.FlowLM(hkg, flmm.FlowLMConfig(
        d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
        ff_mult=cfg.ff_mult, d_e=entity_emb.shape[1], max_len=cfg.max_len,
        connectivity_mask=cfg.connectivity_mask, hop_limit=cfg.hop_limit,
        seed=cfg.seed))

    pseudo = [flmm.sample_pseudo_flow(hkg, catalog, rng,
                                      hop_limit=cfg.hop_limit)
              for _ in range(cfg.pseudo_ratio * len(real))]
    examples = [ex for ex, _ in real] + pseudo
    history = flmm.pretrain_flm(model, examples, entity_emb,
                                epochs=cfg.flm_epochs,
                                batch_size=cfg.flm_batch, lr=cfg.flm_lr,
                                seed=cfg.seed)

    clf_store = ad.ParamStore()
    sc.init_classifier_params(clf_store, d_e=entity_emb.shape[1],
                              num_schemas=len(catalog),
                              rng=np.random.default_rng(cfg.seed))
    pairs = []
    for ex, d in real:
        gold = catalog.index_of(ex.schema)
        if gold is None:
            continue
        e_u = flmm.user_prompt(model, ex.seeker_entities, entity_emb).data
        e_v = flmm.user_prompt(model, ex.recommender_entities,
                               entity_emb).data
        pairs.append((e_u, e_v, gold))
    if pairs:
        sc.train_schema_classifier(pairs, clf_store, catalog,
                                   steps=cfg.clf_steps, lr=cfg.clf_lr,
                                   seed=cfg.seed)

    bank = rz.build_template_bank(train_dialogues, kg)
    return SimulatorBundle(flm=model, catalog=catalog, clf_store=clf_store,
                           bank=bank, entity_emb=np.array(entity_emb),
                           hkg=hkg, pretrain_history=history)
