"""Dialog data model and corpus tooling.

Covers the canonical JSON corpus format, belief-span (de)serialization,
delexicalization, database search with the one-hot match vector, synthetic
multi-domain corpus generation, splits, and vocabulary construction.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

PAD, GO, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<go>", "<eos>", "<unk>"]
SEP_TOKEN = "<sep>"
NONE_SLOT = "none"

# db match count buckets: 0, 1, 2, 3, >=4
MATCH_BUCKETS = 5


class CorpusError(ValueError):
    pass


@dataclass
class DomainSchema:
    name: str
    informable: dict[str, list[str]]
    requestable: list[str]
    db: list[dict[str, str]]
    default_entity: bool = False

    @property
    def marker(self) -> str:
        return f"[{self.name}]"

    def placeholders(self) -> list[str]:
        slots = ["name"] + list(self.informable) + list(self.requestable)
        return [f"[value_{s}]" for s in slots]


@dataclass
class BeliefState:
    domain: str
    constraints: dict[str, str] = field(default_factory=dict)
    malformed: list[str] = field(default_factory=list)

    def triples(self) -> set[tuple[str, str, str]]:
        return {(self.domain, s, v) for s, v in self.constraints.items()}


@dataclass
class DialogAct:
    triples: list[tuple[str, str, str]] = field(default_factory=list)


@dataclass
class Turn:
    user: list[str]
    belief: BeliefState
    act: DialogAct
    response_delex: list[str]
    requested: list[str] = field(default_factory=list)


@dataclass
class Dialog:
    domain: str
    turns: list[Turn]
    entity: dict[str, str] | None = None


@dataclass
class Corpus:
    schemas: dict[str, DomainSchema]
    dialogs: list[Dialog]

    def domain_dialog_ids(self, domain: str) -> list[int]:
        return [i for i, d in enumerate(self.dialogs) if d.domain == domain]

    @property
    def domains(self) -> list[str]:
        return list(self.schemas)


# -------------------------------------------------------------- belief span


def serialize_belief_span(b: BeliefState, schema: DomainSchema) -> list[str]:
    tokens = [schema.marker]
    known = list(schema.informable) + list(schema.requestable) + ["name"]
    for slot in known:
        if slot in b.constraints:
            tokens.append(slot)
            tokens.extend(b.constraints[slot].split())
    unknown = set(b.constraints) - set(known)
    if unknown:
        raise CorpusError(f"unknown slots for domain {schema.name}: {sorted(unknown)}")
    return tokens


def parse_belief_span(tokens: list[str], schema: DomainSchema) -> BeliefState:
    if not tokens or tokens[0] != schema.marker:
        raise CorpusError(f"belief span must start with domain marker {schema.marker}, got {tokens[:1]}")
    known = set(schema.informable) | set(schema.requestable) | {"name"}
    b = BeliefState(domain=schema.name)
    i = 1
    while i < len(tokens):
        tok = tokens[i]
        if tok in known:
            vals = []
            i += 1
            while i < len(tokens) and tokens[i] not in known:
                vals.append(tokens[i])
                i += 1
            if vals:
                b.constraints[tok] = " ".join(vals)
            else:
                b.malformed.append(tok)  # dangling slot with no value
        else:
            b.malformed.append(tok)  # slot token not in schema: Slot F1 false positive
            i += 1
    return b


# --------------------------------------------------------- delexicalization


def _entity_value_map(schema: DomainSchema, entity: dict[str, str]) -> list[tuple[list[str], str]]:
    pairs = []
    for slot, value in entity.items():
        placeholder = "[value_name]" if slot == "name" else f"[value_{slot}]"
        pairs.append((value.split(), placeholder))
    # longest surface form first so multi-token values win over fragments
    pairs.sort(key=lambda p: -len(p[0]))
    return pairs


def delexicalize(tokens: list[str], schema: DomainSchema, entity: dict[str, str]) -> list[str]:
    pairs = _entity_value_map(schema, entity)
    out: list[str] = []
    i = 0
    while i < len(tokens):
        for value_toks, placeholder in pairs:
            if tokens[i : i + len(value_toks)] == value_toks:
                out.append(placeholder)
                i += len(value_toks)
                break
        else:
            out.append(tokens[i])
            i += 1
    return out


def lexicalize(tokens: list[str], entity: dict[str, str]) -> list[str]:
    out: list[str] = []
    for tok in tokens:
        if tok.startswith("[value_") and tok.endswith("]"):
            slot = tok[len("[value_") : -1]
            if slot in entity:
                out.extend(entity[slot].split())
                continue
        out.append(tok)
    return out


# ------------------------------------------------------------------ db query


def db_query(b: BeliefState, schema: DomainSchema) -> tuple[list[dict[str, str]], np.ndarray]:
    informable = set(schema.informable)
    matches = []
    for ent in schema.db:
        ok = True
        for slot, value in b.constraints.items():
            if slot in informable and ent.get(slot) != value:
                ok = False
                break
        if ok:
            matches.append(ent)
    vec = np.zeros(MATCH_BUCKETS)
    vec[min(len(matches), MATCH_BUCKETS - 1)] = 1.0
    return matches, vec


# -------------------------------------------------------------- synthesis

FUNCTION_WORDS = [
    "i", "am", "looking", "for", "a", "the", "with", "what", "do", "you",
    "want", "is", "and", "please", "thank", "bye", "welcome", "nice",
    "choice", "there", "options", "how", "about", "need", "that",
]
DOMAIN_NAMES = ["restaurant", "hotel", "attraction", "clinic", "salon", "garage", "museum", "gym", "studio", "bakery"]
SHARED_SLOTS = ["area", "price", "day", "time", "type", "rating"]
SHARED_REQUESTABLES = ["phone", "address"]


def synth_corpus(seed: int, num_domains: int, dialogs_per_domain: int, overlap: float = 0.5) -> Corpus:
    """Template-generated multi-domain corpus, deterministic per seed.

    Domains share function words; slot/value tokens are shared across
    domains in proportion to `overlap` (0 = fully disjoint schemas).
    """
    if num_domains < 2:
        raise CorpusError("need >=2 domains")
    rng = np.random.default_rng(seed)
    names = [DOMAIN_NAMES[k] if k < len(DOMAIN_NAMES) else f"domain{k}" for k in range(num_domains)]
    schemas = {}
    for k, name in enumerate(names):
        n_inform = 3
        n_shared = int(round(overlap * n_inform))
        slots = SHARED_SLOTS[:n_shared] + [f"{name}slot{j}" for j in range(n_inform - n_shared)]
        informable = {s: [f"{name[:4]}{s[:4]}{i}" for i in range(4)] for s in slots}
        n_shared_req = int(round(overlap * 2))
        requestable = SHARED_REQUESTABLES[:n_shared_req] + [f"{name}req{j}" for j in range(2 - n_shared_req)]
        db = []
        for j in range(6):
            ent = {"name": f"{name}ent{j}"}
            for s, vals in informable.items():
                ent[s] = vals[int(rng.integers(len(vals)))]
            for r in requestable:
                ent[r] = f"{name[:4]}{r[:4]}val{j}"
            db.append(ent)
        schemas[name] = DomainSchema(name=name, informable=informable, requestable=requestable, db=db)

    dialogs = []
    for name in names:
        schema = schemas[name]
        for _ in range(dialogs_per_domain):
            dialogs.append(_synth_dialog(rng, schema))
    return Corpus(schemas=schemas, dialogs=dialogs)


def _synth_dialog(rng: np.random.Generator, schema: DomainSchema) -> Dialog:
    entity = schema.db[int(rng.integers(len(schema.db)))]
    slots = list(schema.informable)
    rng.shuffle(slots)
    s1, s2 = slots[0], slots[1]
    v1, v2 = entity[s1], entity[s2]
    n_req = 1 + int(rng.integers(2))
    reqs = list(schema.requestable)
    rng.shuffle(reqs)
    reqs = reqs[:n_req]
    d = schema.name
    turns = []

    open_tpl = int(rng.integers(2))
    if open_tpl == 0:
        user1 = f"i am looking for a {d} with {s1} {v1}".split()
    else:
        user1 = f"i need a {d} and the {s1} is {v1}".split()
    b1 = BeliefState(domain=d, constraints={s1: v1})
    turns.append(
        Turn(
            user=user1,
            belief=b1,
            act=DialogAct([(d, "request", s2)]),
            response_delex=f"what {s2} do you want".split(),
            requested=[],
        )
    )

    b2 = BeliefState(domain=d, constraints={s1: v1, s2: v2})
    matches, _ = db_query(b2, schema)
    if len(matches) > 1 and rng.integers(2):
        resp2 = "there are options [value_name] is a nice choice".split()
    else:
        resp2 = "[value_name] is a nice choice".split()
    turns.append(
        Turn(
            user=f"{s2} {v2} please".split(),
            belief=b2,
            act=DialogAct([(d, "inform", "name")]),
            response_delex=resp2,
            requested=[],
        )
    )

    req_user = "what is the " + " and the ".join(reqs)
    resp3_parts = [f"the {r} is [value_{r}]" for r in reqs]
    turns.append(
        Turn(
            user=req_user.split(),
            belief=b2,
            act=DialogAct([(d, "inform", r) for r in reqs]),
            response_delex=" and ".join(resp3_parts).split(),
            requested=list(reqs),
        )
    )

    turns.append(
        Turn(
            user="thank you bye".split(),
            belief=b2,
            act=DialogAct([(d, "bye", NONE_SLOT)]),
            response_delex="you are welcome bye".split(),
            requested=[],
        )
    )
    return Dialog(domain=d, turns=turns, entity=dict(entity))


# ----------------------------------------------------------------- JSON I/O


def _require(obj, key, pointer, expected=None):
    if not isinstance(obj, dict) or key not in obj:
        raise CorpusError(f"missing field at {pointer}/{key}")
    val = obj[key]
    if expected is not None and not isinstance(val, expected):
        raise CorpusError(f"wrong type at {pointer}/{key}")
    return val


def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "domains": [
            {
                "name": s.name,
                "informable": s.informable,
                "requestable": s.requestable,
                "db": s.db,
                "default_entity": s.default_entity,
            }
            for s in corpus.schemas.values()
        ],
        "dialogs": [
            {
                "domain": dlg.domain,
                "turns": [
                    {
                        "user": t.user,
                        "belief": t.belief.constraints,
                        "act": [list(tr) for tr in t.act.triples],
                        "response_delex": t.response_delex,
                        "requested": t.requested,
                    }
                    for t in dlg.turns
                ],
                **({"entity": dlg.entity} if dlg.entity else {}),
            }
            for dlg in corpus.dialogs
        ],
    }


KNOWN_DOMAIN_FIELDS = {"name", "informable", "requestable", "db", "default_entity"}
KNOWN_DIALOG_FIELDS = {"domain", "turns", "entity"}
KNOWN_TURN_FIELDS = {"user", "belief", "act", "response_delex", "requested"}


def corpus_from_dict(doc: dict) -> Corpus:
    schemas = {}
    for i, dom in enumerate(_require(doc, "domains", "", list)):
        ptr = f"/domains/{i}"
        extra = set(dom) - KNOWN_DOMAIN_FIELDS
        if extra:
            warnings.warn(f"ignoring unknown fields {sorted(extra)} at {ptr}")
        schema = DomainSchema(
            name=_require(dom, "name", ptr, str),
            informable=_require(dom, "informable", ptr, dict),
            requestable=_require(dom, "requestable", ptr, list),
            db=_require(dom, "db", ptr, list),
            default_entity=bool(dom.get("default_entity", False)),
        )
        schemas[schema.name] = schema
    dialogs = []
    for i, dlg in enumerate(_require(doc, "dialogs", "", list)):
        ptr = f"/dialogs/{i}"
        extra = set(dlg) - KNOWN_DIALOG_FIELDS
        if extra:
            warnings.warn(f"ignoring unknown fields {sorted(extra)} at {ptr}")
        domain = _require(dlg, "domain", ptr, str)
        if domain not in schemas:
            raise CorpusError(f"unknown domain at {ptr}/domain")
        turns = []
        for j, t in enumerate(_require(dlg, "turns", ptr, list)):
            tptr = f"{ptr}/turns/{j}"
            extra = set(t) - KNOWN_TURN_FIELDS
            if extra:
                warnings.warn(f"ignoring unknown fields {sorted(extra)} at {tptr}")
            turns.append(
                Turn(
                    user=list(_require(t, "user", tptr, list)),
                    belief=BeliefState(domain=domain, constraints=dict(_require(t, "belief", tptr, dict))),
                    act=DialogAct([tuple(tr) for tr in _require(t, "act", tptr, list)]),
                    response_delex=list(_require(t, "response_delex", tptr, list)),
                    requested=list(t.get("requested", [])),
                )
            )
        dialogs.append(Dialog(domain=domain, turns=turns, entity=dlg.get("entity")))
    return Corpus(schemas=schemas, dialogs=dialogs)


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(corpus_to_dict(corpus), f, indent=1, sort_keys=True)


def load_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusError(f"invalid corpus JSON: {e}") from e
    return corpus_from_dict(doc)


# ------------------------------------------------------------------- splits


def split_corpus(ids: list[int], spec: dict[str, int | float | None], seed: int) -> dict[str, list[int]]:
    """Deterministically partition dialog ids into labeled splits.

    `spec` maps label -> count (int), ratio (float < 1), or None for the
    remainder. Counts are drawn in declaration order without replacement.
    """
    rng = np.random.default_rng(seed)
    order = list(ids)
    rng.shuffle(order)
    out: dict[str, list[int]] = {}
    rest_label = None
    pos = 0
    for label, want in spec.items():
        if want is None:
            rest_label = label
            continue
        n = int(round(want * len(ids))) if isinstance(want, float) and want < 1 else int(want)
        if pos + n > len(order):
            raise CorpusError(f"split '{label}' wants {n} dialogs but only {len(order) - pos} remain")
        out[label] = sorted(order[pos : pos + n])
        pos += n
    if rest_label is not None:
        out[rest_label] = sorted(order[pos:])
    return out


# ----------------------------------------------------------- MultiWOZ adapt


def multiwoz_adapt(raw: list[dict], schemas: dict[str, DomainSchema]) -> tuple[Corpus, int]:
    """Convert a single-domain raw export into the canonical corpus.

    Raw layout: list of dialogs, each {"domains": [..], "turns": [{"user":
    str, "belief": {slot: value}, "act": [[d, a, s]], "response_delex":
    str, "requested": [..]}]}. Dialogs spanning multiple domains are
    skipped; the skip count is returned.
    """
    dialogs = []
    skipped = 0
    for dlg in raw:
        domains = dlg.get("domains", [])
        if len(domains) != 1:
            skipped += 1
            continue
        domain = domains[0]
        if domain not in schemas:
            raise CorpusError(f"raw dialog references unknown domain '{domain}'")
        turns = []
        for t in dlg.get("turns", []):
            turns.append(
                Turn(
                    user=str(t["user"]).lower().split(),
                    belief=BeliefState(domain=domain, constraints=dict(t.get("belief", {}))),
                    act=DialogAct([tuple(tr) for tr in t.get("act", [])]),
                    response_delex=str(t["response_delex"]).lower().split(),
                    requested=list(t.get("requested", [])),
                )
            )
        dialogs.append(Dialog(domain=domain, turns=turns))
    return Corpus(schemas=schemas, dialogs=dialogs), skipped


# -------------------------------------------------------------------- vocab


class Vocab:
    """Token <-> id bijection with fixed reserved ids 0-3."""

    def __init__(self, tokens: list[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocab")

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)


def act_tokens(act: DialogAct) -> list[str]:
    """Flatten act triples to tokens, eliding repeated domain/act-type."""
    out: list[str] = []
    prev_d = prev_a = None
    for d, a, s in act.triples:
        if d != prev_d:
            out.append(f"[{d}]")
            prev_d, prev_a = d, None
        if a != prev_a:
            out.append(a)
            prev_a = a
        out.append(s)
    return out


def parse_act_tokens(tokens: list[str], domains: list[str]) -> DialogAct:
    markers = {f"[{d}]": d for d in domains}
    triples = []
    cur_d = cur_a = None
    for tok in tokens:
        if tok in markers:
            cur_d, cur_a = markers[tok], None
        elif cur_a is None:
            cur_a = tok
        else:
            if cur_d is not None:
                triples.append((cur_d, cur_a, tok))
    return DialogAct(triples)


def build_vocab(corpus: Corpus, min_count: int = 1) -> Vocab:
    counts: dict[str, int] = {}

    def bump(tokens):
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1

    always = [SEP_TOKEN]
    for schema in corpus.schemas.values():
        always.append(schema.marker)
        always.extend(schema.placeholders())
        always.extend(schema.informable)
        always.extend(schema.requestable)
        always.append("name")
    for dlg in corpus.dialogs:
        for t in dlg.turns:
            bump(t.user)
            bump(t.response_delex)
            bump(serialize_belief_span(t.belief, corpus.schemas[dlg.domain]))
            bump(act_tokens(t.act))
    kept = sorted({t for t, c in counts.items() if c >= min_count} | set(always))
    return Vocab(kept)
