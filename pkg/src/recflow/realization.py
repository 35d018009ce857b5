"""Turn generated flows into complete dialogues via template filling, and
dialogues into recommender training samples.

Realization tiles the schema with delexicalized templates (greedy
longest-signature-first), fills the slots with the flow's entity names, and
emits a corpus-format dialogue. Every emitted sentence is a bank template
with entity substitutions only, so fluency and flow faithfulness hold by
construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import corpus as cp

logger = logging.getLogger(__name__)

ITEM_TYPE = "item"


class NoCoveringSegmentation(ValueError):
    def __init__(self, schema, position):
        super().__init__(f"no template tiles schema {schema} at position "
                         f"{position}")
        self.schema = schema
        self.position = position


@dataclass
class RealizedDialogue:
    dialogue: cp.Dialogue
    flow_entities: list
    schema: tuple
    template_ids: list
    user_pair: tuple | None = None


@dataclass
class RecSample:
    context: tuple      # entity ids mentioned before the label, in order
    label: int          # item entity id
    source: str = "real"
    dialogue_id: str = ""


class TemplateBank:
    """Templates indexed by slot signature, with role grouping.

    When ``add_fallbacks`` is set, a single-slot template is synthesized for
    every type in ``type_names`` so that any schema can be tiled; fallback
    use is logged.
    """

    def __init__(self, templates, type_names=(), item_type=ITEM_TYPE,
                 add_fallbacks=True):
        self.item_type = item_type
        self.templates = list(templates)
        self.fallback_ids = set()
        if add_fallbacks:
            for tname in type_names:
                if tname == item_type:
                    text_parts = ("What about ", "?")
                    role = cp.RECOMMENDER
                else:
                    text_parts = ("I am interested in ", ".")
                    role = cp.SEEKER
                self.fallback_ids.add(len(self.templates))
                self.templates.append(cp.Template(
                    speaker=role, segments=text_parts, signature=(tname,),
                    dialogue_id="fallback"))
        self.by_signature = {}
        self.chitchat_ids = []
        for i, tpl in enumerate(self.templates):
            if tpl.signature:
                self.by_signature.setdefault(tpl.signature, []).append(i)
            else:
                self.chitchat_ids.append(i)
        self.max_signature = max((len(s) for s in self.by_signature), default=0)

    def candidates(self, signature):
        return self.by_signature.get(tuple(signature), [])


def build_template_bank(dialogues, kg, add_fallbacks=True,
                        item_type=ITEM_TYPE, keep_chitchat=True):
    templates = []
    for d in dialogues:
        for tpl in cp.extract_templates(d, kg):
            if tpl.signature or keep_chitchat:
                templates.append(tpl)
    return TemplateBank(templates, type_names=kg.type_names,
                        item_type=item_type, add_fallbacks=add_fallbacks)


def realize(flow_entities, schema, bank, kg, rng, dialogue_id="sim",
            user_pair=None, chitchat_prob=0.0):
    """Fill templates with the flow's entities, left to right.

    The tiling picks the longest template signature matching the upcoming
    schema slice; among templates sharing that signature, item-bearing ones
    prefer the recommender role and the rest prefer the seeker role, with a
    uniform choice inside the preferred group. ``chitchat_prob`` optionally
    interleaves mention-free connective turns (off by default).
    """
    if len(flow_entities) != len(schema):
        raise ValueError("flow and schema must have equal length")
    turns = []
    template_ids = []
    pos = 0
    n = len(schema)
    while pos < n:
        if (chitchat_prob > 0.0 and bank.chitchat_ids
                and rng.uniform() < chitchat_prob):
            tpl_id = bank.chitchat_ids[int(rng.integers(
                len(bank.chitchat_ids)))]
            tpl = bank.templates[tpl_id]
            turns.append(cp.Turn(speaker=tpl.speaker, text=tpl.fill([])[0],
                                 mentions=[]))
            template_ids.append(tpl_id)
        chosen = None
        for width in range(min(bank.max_signature, n - pos), 0, -1):
            sig = tuple(schema[pos:pos + width])
            cands = bank.candidates(sig)
            if cands:
                chosen = (sig, cands)
                break
        if chosen is None:
            raise NoCoveringSegmentation(tuple(schema), pos)
        sig, cands = chosen
        preferred = cp.RECOMMENDER if bank.item_type in sig else cp.SEEKER
        by_role = [i for i in cands if bank.templates[i].speaker == preferred]
        pool = by_role or cands
        tpl_id = pool[int(rng.integers(len(pool)))]
        if tpl_id in bank.fallback_ids:
            logger.info("fallback template used for signature %s", sig)
        tpl = bank.templates[tpl_id]
        entity_ids = flow_entities[pos:pos + len(sig)]
        names = [kg.entity_names[e] for e in entity_ids]
        text, spans = tpl.fill(names)
        mentions = [cp.Mention(entity=name, start=s, end=e)
                    for name, (s, e) in zip(names, spans)]
        turns.append(cp.Turn(speaker=tpl.speaker, text=text,
                             mentions=mentions))
        template_ids.append(tpl_id)
        pos += len(sig)
    dialogue = cp.Dialogue(dialogue_id=dialogue_id, turns=turns)
    if user_pair is not None:
        dialogue.seeker_id, dialogue.recommender_id = user_pair
    return RealizedDialogue(dialogue=dialogue,
                            flow_entities=list(flow_entities),
                            schema=tuple(schema), template_ids=template_ids,
                            user_pair=user_pair)


def to_rec_samples(dialogue, kg, source="real", item_type=ITEM_TYPE):
    """One sample per fresh item mention in a recommender turn.

    The context is every mention strictly before the label mention, in flow
    order (same-turn mentions preceding the item included). Items already in
    their own context are re-mentions, not recommendations, and are skipped.
    """
    if isinstance(dialogue, RealizedDialogue):
        dialogue = dialogue.dialogue
    samples = []
    context = []
    for turn in dialogue.turns:
        for m in turn.mentions:
            eid = kg.entity_id(m.entity)
            if (turn.speaker == cp.RECOMMENDER
                    and kg.type_name_of(eid) == item_type
                    and eid not in context):
                samples.append(RecSample(context=tuple(context), label=eid,
                                         source=source,
                                         dialogue_id=dialogue.dialogue_id))
            context.append(eid)
    return samples
