import numpy as np
import pytest

from recflow import autodiff as ad
from recflow import counterfactual as cf
from recflow import embeddings as emb
from recflow import flm as flmm
from recflow import kg as kgm
from recflow import pipeline as pl
from recflow import realization as rz
from recflow import recommender as rc
from recflow import schema as sc


def test_curriculum_initial_weight():
    sched = cf.CurriculumSchedule(rho=0.25, delta=0.8)
    assert cf.curriculum_lambda(sched, 0) == 0.25


def test_curriculum_closed_form_value():
    sched = cf.CurriculumSchedule(rho=0.1, delta=0.9)
    assert abs(cf.curriculum_lambda(sched, 2) - 0.081) < 1e-15


def test_curriculum_no_anneal_limit():
    sched = cf.CurriculumSchedule(rho=0.05, delta=1.0)
    for k in range(10):
        assert cf.curriculum_lambda(sched, k) == 0.05


def test_curriculum_strictly_decreasing():
    sched = cf.CurriculumSchedule(rho=0.1, delta=0.7)
    values = [cf.curriculum_lambda(sched, k) for k in range(10)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_select_edit_targets_single_entity():
    rng = np.random.default_rng(0)
    for k in (1, 3, 10):
        assert cf.select_edit_targets(1, k, rng) == [0]


def test_select_edit_targets_k_at_least_population():
    rng = np.random.default_rng(0)
    assert cf.select_edit_targets(4, 9, rng) == [0, 1, 2, 3]


def test_select_edit_targets_binomial_rates():
    rng = np.random.default_rng(7)
    n, k, draws = 4, 2, 10_000
    counts = np.zeros(n)
    for _ in range(draws):
        for pos in cf.select_edit_targets(n, k, rng):
            counts[pos] += 1
    p = k / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


def test_apply_edit_zero_delta_is_identity():
    rng = np.random.default_rng(1)
    e = rng.normal(size=(4, 3))
    out = cf.apply_edit(e, [2], ad.Tensor(np.zeros((1, 3))))
    assert np.array_equal(out.data, e)


def test_apply_edit_single_entity_forced_attention():
    rng = np.random.default_rng(2)
    e = rng.normal(size=(1, 3))
    d = rng.normal(size=(1, 3))
    store = ad.ParamStore()
    emb.init_attention_params(store, 3, rng=rng)
    pref = cf.edited_preference(e, [0], ad.Tensor(d), store["attn.w"],
                                store["attn.b"])
    assert np.allclose(pref.alpha.data, [1.0])
    assert np.allclose(pref.e_u.data, (e + d)[0])


def test_apply_edit_matches_independent_reencode():
    rng = np.random.default_rng(3)
    e = rng.normal(size=(3, 4))
    d = rng.normal(size=(1, 4)) * 0.3
    store = ad.ParamStore()
    emb.init_attention_params(store, 4, rng=rng)
    pref = cf.edited_preference(e, [1], ad.Tensor(d), store["attn.w"],
                                store["attn.b"])
    edited = e.copy()
    edited[1] += d[0]
    oracle = emb.encode_user(ad.Tensor(edited), store["attn.w"],
                             store["attn.b"])
    assert np.allclose(pref.e_u.data, oracle.e_u.data, atol=1e-12)
    assert np.allclose(pref.alpha.data, oracle.alpha.data, atol=1e-12)


def test_apply_edit_only_changes_edited_rows():
    rng = np.random.default_rng(4)
    e = rng.normal(size=(5, 3))
    d = rng.normal(size=(2, 3))
    out = cf.apply_edit(e, [0, 3], ad.Tensor(d))
    changed = out.data - e
    assert np.allclose(changed[[1, 2, 4]], 0.0)
    assert np.allclose(changed[0], d[0]) and np.allclose(changed[3], d[1])


def test_apply_edit_position_out_of_range():
    with pytest.raises(cf.PositionOutOfRange):
        cf.apply_edit(np.zeros((2, 3)), [5], ad.Tensor(np.zeros((1, 3))))


# -- tiny enumerable simulator for REINFORCE checks --------------------------

def tiny_sim(seed=0, head_scale=0.6, catalog_schema=("genre", "item")):
    """Complete 2-genre x 3-item world with an enumerable flow space."""
    types = {"g0": "genre", "g1": "genre",
             "m0": "item", "m1": "item", "m2": "item"}
    triples = [(m, "has_genre", g) for m in ("m0", "m1", "m2")
               for g in ("g0", "g1")]
    g = kgm.load_kg([f"{h}\t{r}\t{t}" for h, r, t in triples],
                    [f"{e}\t{t}" for e, t in types.items()])
    hkg = kgm.attach_users(g, {"u": ["g0", "m0"], "v": ["m1", "m2"]})
    model = flmm.FlowLM(hkg, flmm.FlowLMConfig(d_model=8, n_layers=1,
                                               n_heads=2, ff_mult=2, d_e=5,
                                               max_len=4, seed=seed))
    rng = np.random.default_rng(seed + 10)
    model.store["flm.head_w"].data = rng.normal(
        size=model.store["flm.head_w"].shape) * head_scale
    catalog = sc.mine_schemas([catalog_schema], min_support=1)
    clf_store = ad.ParamStore()
    sc.init_classifier_params(clf_store, d_e=5, num_schemas=1,
                              rng=np.random.default_rng(seed))
    bank = rz.TemplateBank([], type_names=g.type_names, add_fallbacks=True)
    entity_emb = np.random.default_rng(seed + 20).normal(
        size=(hkg.num_nodes, 5)) * 0.5
    sim = pl.SimulatorBundle(flm=model, catalog=catalog, clf_store=clf_store,
                             bank=bank, entity_emb=entity_emb, hkg=hkg)
    rec = rc.RecModel(hkg, d_e=6, seed=seed)
    rec.store["rec.item_bias"].data = np.array([6.0, -6.0, 0.0])
    pair = pl.UserPair(user_u="u", user_v="v",
                       u_entities=hkg.interactions["u"],
                       v_entities=hkg.interactions["v"])
    return sim, rec, pair


def enumerate_pair_gradient(state, sim, rec, reward_fn):
    """Exact expectation sum_C Pr(C) L(C) grad log Pr(C) plus per-flow
    tables, via full support enumeration."""
    e_u, e_v = cf.edited_prompts(state, 0, sim)
    schema = sim.predict_schema(e_u.data, e_v.data)
    flows = [[]]
    for j, tname in enumerate(schema):
        flows = [f + [e] for f in flows
                 for e in sim.flm.allowed_entities(tname,
                                                   f[-1] if f else None)]
    probs, rewards, grads = {}, {}, {}
    exact = {n: np.zeros_like(state.store[n].data)
             for n in ("delta_u", "delta_v")}
    for flow in flows:
        key = tuple(flow)
        e_u, e_v = cf.edited_prompts(state, 0, sim)
        logp = flmm.flow_log_prob(sim.flm,
                                  flmm.PromptBundle(e_u, e_v, schema), flow)
        g = ad.backward(logp, state.store)
        probs[key] = float(np.exp(logp.item()))
        realized = rz.realize(flow, schema, sim.bank, sim.hkg.base,
                              np.random.default_rng(0), dialogue_id="enum")
        rewards[key] = reward_fn(realized)
        grads[key] = {n: g.get(n, np.zeros_like(exact[n])).copy()
                      for n in exact}
        for n in exact:
            exact[n] += probs[key] * rewards[key] * grads[key][n]
    return schema, probs, rewards, grads, exact


def test_zero_reward_reduces_to_pure_decay():
    sim, rec, pair = tiny_sim()
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    init = np.random.default_rng(5).normal(size=state.store["delta_u"].shape)
    state.store["delta_u"].data = init.copy()
    state.store["delta_v"].data = 2 * init.copy()
    alpha, lam = 0.05, 0.7
    cf.reinforce_step(state, sim, rec, lam, alpha, rollouts=4,
                      rng=np.random.default_rng(1),
                      reward_fn=lambda realized: 0.0)
    factor = 1.0 - 2.0 * alpha * lam
    assert np.allclose(state.store["delta_u"].data, init * factor,
                       rtol=0, atol=1e-15)
    assert np.allclose(state.store["delta_v"].data, 2 * init * factor,
                       rtol=0, atol=1e-15)


def test_constant_reward_has_zero_expected_update():
    sim, rec, pair = tiny_sim()
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    _, probs, _, grads, _ = enumerate_pair_gradient(
        state, sim, rec, lambda realized: 1.0)
    assert abs(sum(probs.values()) - 1.0) < 1e-9
    for name in ("delta_u", "delta_v"):
        expected = sum(p * grads[f][name]
                       for f, p in probs.items())
        assert np.max(np.abs(expected)) < 1e-10


def test_sampled_update_matches_enumerated_gradient():
    # single-step schema keeps the outcome set small and the reward spread
    # large, so 10k rollouts pin the score-function mean within 5%
    sim, rec, pair = tiny_sim(head_scale=0.8, catalog_schema=("item",))
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    reward_fn = cf.default_reward_fn(rec, sim.hkg.base)
    schema, probs, rewards, grads, exact = enumerate_pair_gradient(
        state, sim, rec, reward_fn)
    assert len(probs) <= 50
    e_u, e_v = cf.edited_prompts(state, 0, sim)
    rng = np.random.default_rng(99)
    n = 10_000
    counts = dict.fromkeys(probs, 0)
    for _ in range(10):
        for flow in flmm.generate_flows_batch(sim.flm, e_u.data, e_v.data,
                                              schema, rng, count=n // 10):
            counts[tuple(flow)] += 1
    for name in ("delta_u", "delta_v"):
        sampled = sum((c / n) * rewards[f] * grads[f][name]
                      for f, c in counts.items())
        rel = np.linalg.norm(sampled - exact[name]) / \
            np.linalg.norm(exact[name])
        assert rel < 0.05, (name, rel)


def test_reinforce_step_applies_ascent_update_formula():
    sim, rec, pair = tiny_sim()
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    init_u = state.store["delta_u"].data.copy()
    alpha, lam = 0.01, 0.3
    stats = cf.reinforce_step(state, sim, rec, lam, alpha, rollouts=6,
                              rng=np.random.default_rng(3))
    g = stats["gradient"]["delta_u"]
    expected = init_u + alpha * (g - 2 * lam * init_u)
    assert np.allclose(state.store["delta_u"].data, expected, atol=1e-15)


def test_reinforce_step_is_bit_reproducible():
    results = []
    for _ in range(2):
        sim, rec, pair = tiny_sim()
        state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
        cf.reinforce_step(state, sim, rec, 0.1, 0.05, rollouts=8,
                          rng=np.random.default_rng(17))
        results.append((state.store["delta_u"].data.copy(),
                        state.store["delta_v"].data.copy()))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


def test_reinforce_step_never_writes_frozen_parameters():
    sim, rec, pair = tiny_sim()
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    rec_sum = rec.store.checksum()
    flm_sum = sim.flm.store.checksum()
    clf_sum = sim.clf_store.checksum()
    cf.reinforce_step(state, sim, rec, 0.1, 0.05, rollouts=4,
                      rng=np.random.default_rng(2))
    assert rec.store.checksum() == rec_sum
    assert sim.flm.store.checksum() == flm_sum
    assert sim.clf_store.checksum() == clf_sum


def test_large_lambda_shrinks_edit_norm_monotonically():
    sim, rec, pair = tiny_sim()
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    rng0 = np.random.default_rng(8)
    state.store["delta_u"].data = rng0.normal(size=(1, 5))
    state.store["delta_v"].data = rng0.normal(size=(1, 5))
    rng = np.random.default_rng(11)
    norms = [state.edit_norm()]
    for _ in range(4):
        cf.reinforce_step(state, sim, rec, lam=200.0, alpha=1e-3, rollouts=4,
                          rng=rng, reward_fn=lambda realized: 1.0)
        norms.append(state.edit_norm())
    assert all(a > b for a, b in zip(norms, norms[1:])), norms


def test_non_finite_update_raises():
    sim, rec, pair = tiny_sim()
    state = cf.make_edit_state(pair, 1, 5, np.random.default_rng(0))
    with pytest.raises(cf.NonFiniteUpdate):
        cf.reinforce_step(state, sim, rec, 0.0, np.inf, rollouts=2,
                          rng=np.random.default_rng(0),
                          reward_fn=lambda realized: 1.0)


# -- EDA ops ------------------------------------------------------------------

def eda_world():
    types = {"g0": "genre", "g1": "genre", "m0": "item", "m1": "item",
             "a0": "actor"}
    triples = [("m0", "has_genre", "g0"), ("m1", "has_genre", "g1"),
               ("a0", "acted_in", "m0")]
    return kgm.load_kg([f"{h}\t{r}\t{t}" for h, r, t in triples],
                       [f"{e}\t{t}" for e, t in types.items()])


def test_eda_delete_length_one_gives_empty():
    kg = eda_world()
    flow, schema = cf.eda_delete([kg.entity_id("m0")], ("item",), 0)
    assert flow == [] and schema == ()


def test_eda_swap_same_position_is_identity():
    kg = eda_world()
    flow = [kg.entity_id("g0"), kg.entity_id("m0")]
    out_flow, out_schema = cf.eda_swap(flow, ("genre", "item"), 1, 1)
    assert out_flow == flow and out_schema == ("genre", "item")


def test_eda_replace_keeps_type():
    kg = eda_world()
    rng = np.random.default_rng(0)
    for _ in range(50):
        flow, schema = cf.eda_replace([kg.entity_id("m0")], ("item",), kg,
                                      rng)
        assert kg.type_name_of(flow[0]) == "item"


def test_eda_ops_keep_flow_schema_aligned():
    kg = eda_world()
    rng = np.random.default_rng(5)
    pools = {t: kg.entities_of_type(t) for t in kg.type_names}
    checked = 0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        schema = tuple(kg.type_names[rng.integers(len(kg.type_names))]
                       for _ in range(n))
        flow = [pools[t][rng.integers(len(pools[t]))] for t in schema]
        out_flow, out_schema = cf.eda_augment(flow, schema, kg, rng)
        assert len(out_flow) == len(out_schema)
        for eid, tname in zip(out_flow, out_schema):
            assert kg.type_name_of(eid) == tname
        checked += 1
    assert checked == 1000


def test_eda_rejects_empty_flow():
    kg = eda_world()
    with pytest.raises(ValueError):
        cf.eda_augment([], (), kg, np.random.default_rng(0))


# -- course loops --------------------------------------------------------------

def test_zero_courses_returns_pretrained_model(mini):
    rec = mini.fresh_rec()
    before = rec.store.checksum()
    cfg = cf.TrainConfig(courses=0, seed=0)
    log, sims = cf.train_augmented(rec, mini.sim, mini.pairs,
                                   mini.train_samples, mini.val_samples, cfg)
    assert log == [] and sims == []
    assert rec.store.checksum() == before


def test_train_augmented_runs_and_logs(mini):
    rec = mini.fresh_rec()
    cfg = cf.TrainConfig(courses=2, rho=0.1, delta=0.9, alpha=1e-3,
                         rollouts=2, edit_steps=1, pairs_per_course=2,
                         sims_per_pair=1, rec_steps=5, rec_batch=16, seed=1)
    log, sims = cf.train_augmented(rec, mini.sim, mini.pairs,
                                   mini.train_samples, mini.val_samples, cfg)
    assert len(log) == 2
    assert log[0]["lambda"] == 0.1
    assert abs(log[1]["lambda"] - 0.09) < 1e-15
    for entry in log:
        assert {"course", "lambda", "mean_reward", "edit_norm",
                "val_recall@10", "val_recall@50"} <= set(entry)
    assert len(sims) == 2 * 2 * 1
    # simulated dialogues are drop-in corpus data
    from recflow import corpus as cp
    import json
    lines = [json.dumps(s.dialogue.to_record()) for s in sims]
    reloaded = cp.load_dialogues(lines)
    assert len(reloaded) == len(sims)


def test_train_augmented_never_touches_simulator(mini):
    rec = mini.fresh_rec()
    flm_sum = mini.sim.flm.store.checksum()
    clf_sum = mini.sim.clf_store.checksum()
    cfg = cf.TrainConfig(courses=1, rollouts=2, edit_steps=1,
                         pairs_per_course=2, sims_per_pair=1, rec_steps=3,
                         seed=2)
    cf.train_augmented(rec, mini.sim, mini.pairs, mini.train_samples,
                       mini.val_samples, cfg)
    assert mini.sim.flm.store.checksum() == flm_sum
    assert mini.sim.clf_store.checksum() == clf_sum


def test_train_augmented_seed_reproducible(mini):
    sums = []
    for _ in range(2):
        rec = mini.fresh_rec()
        cfg = cf.TrainConfig(courses=2, rollouts=2, edit_steps=1,
                             pairs_per_course=2, sims_per_pair=1, rec_steps=5,
                             seed=7)
        log, _ = cf.train_augmented(rec, mini.sim, mini.pairs,
                                    mini.train_samples, mini.val_samples,
                                    cfg)
        sums.append((rec.store.checksum(),
                     tuple(e["mean_reward"] for e in log)))
    assert sums[0] == sums[1]


def test_train_eda_runs(mini):
    rec = mini.fresh_rec()
    flow_pool = [ex for ex, _ in pl.corpus_flows(mini.world.train,
                                                 mini.world.kg)]
    cfg = cf.TrainConfig(courses=2, pairs_per_course=2, sims_per_pair=1,
                         rec_steps=5, seed=3)
    log, sims = cf.train_eda(rec, mini.sim.bank, mini.hkg, flow_pool,
                             mini.train_samples, mini.val_samples, cfg)
    assert len(log) == 2
    assert all(e["n_simulated"] >= 0 for e in log)


def test_train_baseline_runs(mini):
    rec = mini.fresh_rec()
    cfg = cf.TrainConfig(courses=2, rec_steps=5, seed=4)
    log, sims = cf.train_baseline(rec, mini.train_samples, mini.val_samples,
                                  cfg)
    assert len(log) == 2 and sims == []
