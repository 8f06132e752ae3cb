"""Documents, synthetic corpus generation, DocRED-format ingestion, metrics.

The synthetic world is a three-level containment hierarchy (cities inside
regions inside countries) with a single composition rule:

    located_in(x, y) and country(y, z)  =>  country(x, z)

Each document states its atomic facts in separate sentences, so composed
facts can only be recovered by combining two sentences. Stated facts carry
their stating sentence as evidence; composed facts carry both premise
sentences, which is how downstream analysis separates 2-hop triples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IngestionError


@dataclass(frozen=True)
class Mention:
    name: str
    sent_id: int
    start: int
    end: int  # exclusive token offset within the sentence
    etype: str = ""


@dataclass(frozen=True)
class RelationLabel:
    head: int
    tail: int
    relation: int
    evidence: tuple[int, ...] = ()


@dataclass
class Document:
    title: str
    sents: list[list[str]]
    entities: list[list[Mention]]  # entity -> its mentions
    labels: list[RelationLabel] = field(default_factory=list)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def tokens_flat(self) -> list[str]:
        return [t for sent in self.sents for t in sent]

    def first_appearance_order(self) -> list[int]:
        """Entity indices sorted by earliest mention (sent_id, start)."""
        keys = []
        for i, mentions in enumerate(self.entities):
            if not mentions:
                raise DataError(f"{self.title}: entity {i} has no mentions")
            first = min((m.sent_id, m.start) for m in mentions)
            keys.append((first, i))
        return [i for _, i in sorted(keys)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

REL_LOCATED_IN = "located_in"
REL_COUNTRY = "country"
REL_CONTAINS = "contains"
DEFAULT_RELATIONS = (REL_LOCATED_IN, REL_COUNTRY, REL_CONTAINS)

_REL_SURFACE = {
    REL_LOCATED_IN: "locatedin",
    REL_COUNTRY: "countryis",
    REL_CONTAINS: "contains",
}

_FILLER = [
    "the", "old", "river", "market", "quiet", "hills", "traders", "visit",
    "every", "spring", "roads", "cross", "near", "stone", "bridges",
]

_SYLLABLES = [
    "ba", "ce", "da", "fo", "ga", "hi", "jo", "ka", "lu", "me",
    "na", "po", "qui", "ra", "su", "ta", "ve", "wi", "xa", "zo",
]

_TYPE_SUFFIX = {"CITY": "", "REGION": "mark", "COUNTRY": "ia"}


@dataclass
class SyntheticWorldConfig:
    """Knobs for the containment-world generator.

    ``num_*`` are per-document maximums; each document samples its own
    structure between the ``min_*`` floor and the maximum, which varies the
    entity count across documents (and with it the matrix layout, so models
    must learn the composition rule rather than one fixed pattern).
    """

    num_docs: int = 200
    num_cities: int = 6
    num_regions: int = 3
    num_countries: int = 3
    min_cities: int = 3
    min_regions: int = 2
    min_countries: int = 2
    noise_rate: float = 0.2
    alias_rate: float = 1.0
    name_pool_factor: int = 10
    min_sentences_per_doc: int = 0
    seed: int = 0
    relations: tuple[str, ...] = DEFAULT_RELATIONS
    transitive_closure: bool = True
    include_contains: bool = False
    shuffle_sentences: bool = False


def relation_ids(cfg: SyntheticWorldConfig) -> dict[str, int]:
    return {name: i for i, name in enumerate(cfg.relations)}


def _make_name(rng: np.random.Generator, etype: str, taken: set[str]) -> str:
    while True:
        n = int(rng.integers(2, 4))
        name = "".join(rng.choice(_SYLLABLES) for _ in range(n))
        name = name.capitalize() + _TYPE_SUFFIX[etype]
        if name not in taken:
            taken.add(name)
            return name
        # collision: salvage by suffixing instead of resampling forever
        for k in range(2, 100):
            cand = f"{name}{k}"
            if cand not in taken:
                taken.add(cand)
                return cand


def close_transitively(stated: set[tuple[int, int, str]]) -> set[tuple[int, int, str]]:
    """Saturate (x located_in y) + (y country z) => (x country z)."""
    closed = set(stated)
    changed = True
    while changed:
        changed = False
        located = [(h, t) for h, t, r in closed if r == REL_LOCATED_IN]
        countries = {(h, t) for h, t, r in closed if r == REL_COUNTRY}
        for x, y in located:
            for (h, z) in list(countries):
                if h == y and (x, z, REL_COUNTRY) not in closed:
                    closed.add((x, z, REL_COUNTRY))
                    changed = True
    return closed


def generate_synthetic(cfg: SyntheticWorldConfig) -> list[Document]:
    """Deterministic multi-hop corpus; one doc per call to the per-doc builder.

    Entity names come from corpus-wide pools so the same surface recurs
    across documents (embeddings get trained), while per-document
    assignments stay random (no surface pair is reliably positive).
    """
    if min(cfg.num_docs, cfg.num_cities, cfg.num_regions, cfg.num_countries) < 1:
        raise DataError("synthetic config sizes must all be >= 1")
    rng = np.random.default_rng(cfg.seed)
    factor = max(cfg.name_pool_factor, 2)
    taken: set[str] = set()
    pools = {
        "CITY": [_make_name(rng, "CITY", taken)
                 for _ in range(cfg.num_cities * factor)],
        # regions draw two surfaces each (name + alias)
        "REGION": [_make_name(rng, "REGION", taken)
                   for _ in range(cfg.num_regions * factor * 2)],
        "COUNTRY": [_make_name(rng, "COUNTRY", taken)
                    for _ in range(cfg.num_countries * factor)],
    }
    return [_generate_doc(cfg, rng, i, pools) for i in range(cfg.num_docs)]


def _sample_size(rng: np.random.Generator, lo: int, hi: int) -> int:
    lo = max(1, min(lo, hi))
    return int(rng.integers(lo, hi + 1))


def _generate_doc(cfg: SyntheticWorldConfig, rng: np.random.Generator,
                  index: int, pools: dict[str, list[str]]) -> Document:
    # entity handles are small ints; regions may carry an alias surface used
    # only in their country sentence, so that 2-hop composition cannot be
    # read off surface co-occurrence and needs the entity-level grouping
    n_cities = _sample_size(rng, cfg.min_cities, cfg.num_cities)
    n_regions = _sample_size(rng, cfg.min_regions, cfg.num_regions)
    n_countries = _sample_size(rng, cfg.min_countries, cfg.num_countries)
    cities = list(range(n_cities))
    regions = list(range(n_cities, n_cities + n_regions))
    countries = list(range(n_cities + n_regions,
                           n_cities + n_regions + n_countries))
    city_names = [str(n) for n in rng.choice(pools["CITY"], size=n_cities,
                                             replace=False)]
    region_names = [str(n) for n in rng.choice(pools["REGION"],
                                               size=2 * n_regions,
                                               replace=False)]
    country_names = [str(n) for n in rng.choice(pools["COUNTRY"],
                                                size=n_countries,
                                                replace=False)]
    surface = dict(zip(cities, city_names))
    surface.update(zip(regions, region_names[:n_regions]))
    surface.update(zip(countries, country_names))
    alias = {
        r: (region_names[n_regions + i]
            if rng.random() < cfg.alias_rate else surface[r])
        for i, r in enumerate(regions)
    }
    etype = {e: ("CITY" if e in cities else
                 "REGION" if e in regions else "COUNTRY")
             for e in surface}

    # round-robin assignments keep the hierarchy balanced: no country is
    # guessable from mention counts alone, only from the actual chain
    city_pool = list(cities)
    rng.shuffle(city_pool)
    city_region = {c: regions[i % n_regions]
                   for i, c in enumerate(city_pool)}
    country_pool = list(countries)
    rng.shuffle(country_pool)
    region_country = {r: country_pool[i % n_countries]
                      for i, r in enumerate(regions)}

    # Containment facts come grouped by region; the country facts follow in
    # an independently shuffled block, so sentence adjacency carries no hint
    # of which country a city's region belongs to.
    fact_rows: list[tuple[int, str, int]] = []
    region_order = list(regions)
    rng.shuffle(region_order)
    for region in region_order:
        members = [c for c in cities if city_region[c] == region]
        rng.shuffle(members)
        for c in members:
            fact_rows.append((c, REL_LOCATED_IN, region))
            if cfg.include_contains:
                fact_rows.append((region, REL_CONTAINS, c))
    country_rows = [(r, REL_COUNTRY, region_country[r]) for r in region_order]
    rng.shuffle(country_rows)
    fact_rows.extend(country_rows)

    if cfg.shuffle_sentences:
        rng.shuffle(fact_rows)

    def surface_of(entity: int, rel: str, role: str) -> str:
        # the country sentence is where a region shows its alias
        if entity in alias and rel == REL_COUNTRY and role == "head":
            return alias[entity]
        return surface[entity]

    sents: list[list[str]] = []
    raw_mentions: list[tuple[int, str, int, int]] = []  # entity, name, sent, pos
    fact_sent: dict[tuple[int, str, int], int] = {}
    for head, rel, tail in fact_rows:
        if rng.random() < cfg.noise_rate:
            sents.append(list(rng.choice(_FILLER, size=int(rng.integers(3, 6)))))
        tokens: list[str] = []
        if rng.random() < cfg.noise_rate:
            tokens.append(str(rng.choice(_FILLER)))
        sid = len(sents)
        h_name = surface_of(head, rel, "head")
        t_name = surface_of(tail, rel, "tail")
        raw_mentions.append((head, h_name, sid, len(tokens)))
        tokens.extend([h_name, _REL_SURFACE[rel]])
        raw_mentions.append((tail, t_name, sid, len(tokens)))
        tokens.extend([t_name, "."])
        fact_sent[(head, rel, tail)] = sid
        sents.append(tokens)
    while len(sents) < cfg.min_sentences_per_doc:
        sents.append(list(rng.choice(_FILLER, size=int(rng.integers(3, 6)))))

    order: list[int] = []
    mentions: dict[int, list[Mention]] = {}
    for entity, name, sid, pos in raw_mentions:
        if entity not in mentions:
            mentions[entity] = []
            order.append(entity)
        mentions[entity].append(Mention(name, sid, pos, pos + 1, etype[entity]))
    ent_idx = {e: i for i, e in enumerate(order)}

    stated = {(h, t, r) for (h, r, t) in fact_rows}
    gold = close_transitively(stated) if cfg.transitive_closure else set(stated)

    rel_to_id = relation_ids(cfg)
    labels = []
    for h, t, r in sorted(gold, key=lambda x: (ent_idx[x[0]], ent_idx[x[1]], x[2])):
        if (h, r, t) in fact_sent:
            evidence: tuple[int, ...] = (fact_sent[(h, r, t)],)
        else:
            # composed fact: evidence is both premise sentences
            y = city_region[h]
            evidence = tuple(sorted({
                fact_sent[(h, REL_LOCATED_IN, y)],
                fact_sent[(y, REL_COUNTRY, t)],
            }))
        labels.append(RelationLabel(ent_idx[h], ent_idx[t], rel_to_id[r], evidence))

    return Document(
        title=f"synthetic-{cfg.seed}-{index}",
        sents=sents,
        entities=[mentions[e] for e in order],
        labels=labels,
    )


def is_composed(label: RelationLabel) -> bool:
    return len(label.evidence) >= 2


# ---------------------------------------------------------------------------
# DocRED-format serialization
# ---------------------------------------------------------------------------


def to_docred_records(docs: list[Document], id_to_rel: dict[int, str]) -> list[dict]:
    records = []
    for doc in docs:
        records.append({
            "title": doc.title,
            "sents": [list(s) for s in doc.sents],
            "vertexSet": [
                [
                    {"name": m.name, "sent_id": m.sent_id,
                     "pos": [m.start, m.end], "type": m.etype}
                    for m in entity
                ]
                for entity in doc.entities
            ],
            "labels": [
                {"h": lab.head, "t": lab.tail, "r": id_to_rel[lab.relation],
                 "evidence": list(lab.evidence)}
                for lab in doc.labels
            ],
        })
    return records


def write_docred(docs: list[Document], path, id_to_rel: dict[int, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_docred_records(docs, id_to_rel), fh, indent=1)


def load_relation_map(path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise IngestionError(f"{path}: relation map must be a JSON object")
    return {str(k): int(v) for k, v in raw.items()}


def load_docred(path, rel_map: dict[str, int]) -> list[Document]:
    """Read a DocRED-format JSON array into Documents.

    vertexSet order is preserved; downstream code derives first-appearance
    ordering itself. ``labels`` may be absent (blind test splits).
    """
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise IngestionError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, list):
        raise IngestionError(f"{path}: expected a JSON array of documents")
    return [_parse_record(rec, i, rel_map) for i, rec in enumerate(raw)]


def _parse_record(rec, index: int, rel_map: dict[str, int]) -> Document:
    for key in ("title", "sents", "vertexSet"):
        if key not in rec:
            raise IngestionError(f"record {index}: missing required field {key!r}")
    sents = [[str(t) for t in sent] for sent in rec["sents"]]
    entities: list[list[Mention]] = []
    for ei, vertex in enumerate(rec["vertexSet"]):
        mentions = []
        for m in vertex:
            for key in ("name", "sent_id", "pos"):
                if key not in m:
                    raise IngestionError(
                        f"record {index}: entity {ei} mention missing {key!r}"
                    )
            sid = int(m["sent_id"])
            start, end = (int(x) for x in m["pos"])
            if sid < 0 or sid >= len(sents) or not (0 <= start < end <= len(sents[sid])):
                raise IngestionError(
                    f"record {index}: entity {ei} mention span "
                    f"[{start},{end}) out of bounds for sentence {sid}"
                )
            mentions.append(Mention(str(m["name"]), sid, start, end,
                                    str(m.get("type", ""))))
        if not mentions:
            raise IngestionError(f"record {index}: entity {ei} has no mentions")
        entities.append(mentions)
    labels = []
    for li, lab in enumerate(rec.get("labels", [])):
        for key in ("h", "t", "r"):
            if key not in lab:
                raise IngestionError(
                    f"record {index}: label {li} missing required field {key!r}"
                )
        h, t = int(lab["h"]), int(lab["t"])
        if not (0 <= h < len(entities) and 0 <= t < len(entities)):
            raise IngestionError(
                f"record {index}: label {li} endpoints ({h},{t}) out of range"
            )
        rname = str(lab["r"])
        if rname not in rel_map:
            raise IngestionError(
                f"record {index}: unknown relation string {rname!r}"
            )
        labels.append(RelationLabel(h, t, rel_map[rname],
                                    tuple(int(e) for e in lab.get("evidence", []))))
    return Document(title=str(rec["title"]), sents=sents,
                    entities=entities, labels=labels)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    ign_f1: float
    bucket_f1: dict[str, float]
    bucket_support: dict[str, int] = field(default_factory=dict)

    def row(self) -> str:
        return (f"P={self.precision:.4f} R={self.recall:.4f} "
                f"F1={self.f1:.4f} IgnF1={self.ign_f1:.4f}")


def _prf(correct: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = correct / n_pred if n_pred else 0.0
    r = correct / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if (p + r) else 0.0
    return p, r, f1


def train_fact_set(docs: list[Document]) -> set[tuple[str, str, int]]:
    """All (head surface, tail surface, relation) combinations in a train split."""
    facts = set()
    for doc in docs:
        for lab in doc.labels:
            for hm in doc.entities[lab.head]:
                for tm in doc.entities[lab.tail]:
                    facts.add((hm.name, tm.name, lab.relation))
    return facts


def _bucket_label(count: int, edges: tuple[int, ...]) -> str:
    for lo, hi in zip(edges, edges[1:]):
        if lo <= count < hi:
            return f"{lo}-{hi - 1}"
    return f"{edges[-1]}+"


DEFAULT_BUCKET_EDGES = (1, 4, 7, 10, 13)


def evaluate(predictions, docs: list[Document],
             train_facts: set[tuple[str, str, int]] | None = None,
             bucket_edges: tuple[int, ...] = DEFAULT_BUCKET_EDGES) -> EvalReport:
    """Score (title, head, tail, relation) predictions against gold labels.

    Ign F1 drops every prediction whose surface triple occurs in
    ``train_facts`` (any head/tail mention-name combination), then rescoring
    proceeds as for F1; with an empty fact set the two metrics are equal.
    """
    by_title = {doc.title: doc for doc in docs}
    gold: set[tuple[str, int, int, int]] = set()
    for doc in docs:
        for lab in doc.labels:
            gold.add((doc.title, lab.head, lab.tail, lab.relation))

    preds = []
    seen = set()
    for title, h, t, r in predictions:
        key = (title, int(h), int(t), int(r))
        if key in seen or title not in by_title:
            continue
        seen.add(key)
        preds.append(key)

    correct = sum(1 for p in preds if p in gold)
    precision, recall, f1 = _prf(correct, len(preds), len(gold))

    if train_facts:
        kept = [p for p in preds if not _in_train(p, by_title[p[0]], train_facts)]
        ign_correct = sum(1 for p in kept if p in gold)
        _, _, ign_f1 = _prf(ign_correct, len(kept), len(gold))
    else:
        ign_f1 = f1

    bucket_f1 = {}
    bucket_support = {}
    labels = [_bucket_label(c, bucket_edges)
              for c in sorted({d.num_entities for d in docs})]
    for label in dict.fromkeys(labels):
        titles = {d.title for d in docs
                  if _bucket_label(d.num_entities, bucket_edges) == label}
        bp = [p for p in preds if p[0] in titles]
        bg = {g for g in gold if g[0] in titles}
        bc = sum(1 for p in bp if p in bg)
        _, _, bf1 = _prf(bc, len(bp), len(bg))
        bucket_f1[label] = bf1
        bucket_support[label] = len(titles)

    return EvalReport(precision, recall, f1, ign_f1, bucket_f1, bucket_support)


def _in_train(pred, doc: Document, facts: set[tuple[str, str, int]]) -> bool:
    _, h, t, r = pred
    for hm in doc.entities[h]:
        for tm in doc.entities[t]:
            if (hm.name, tm.name, r) in facts:
                return True
    return False


def composed_recall(predictions, docs: list[Document]) -> float:
    """Recall restricted to gold triples that need 2-hop composition."""
    pred_set = {(title, int(h), int(t), int(r)) for title, h, t, r in predictions}
    composed = [
        (doc.title, lab.head, lab.tail, lab.relation)
        for doc in docs for lab in doc.labels if is_composed(lab)
    ]
    if not composed:
        return 0.0
    hit = sum(1 for g in composed if g in pred_set)
    return hit / len(composed)
