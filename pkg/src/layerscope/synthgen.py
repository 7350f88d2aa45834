"""bAbI task-15 style Basic Deduction generator.

Each sample is a short story of membership facts ("emily is a wolf .") and
fear facts ("wolves are afraid of cats .") plus the question
"what is emily afraid of ?". Answering needs two hops: name -> kind via the
membership fact, then kind -> feared kind via the fear fact of that kind.
Everything is lowercased and whitespace-tokenized over a closed lexicon.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoder import EncodedInput, LengthError
from .tensor import make_rng

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
SPECIALS = (PAD, CLS, SEP)

# (singular, plural)
KINDS = (
    ("wolf", "wolves"), ("cat", "cats"), ("sheep", "sheep"), ("mouse", "mice"),
    ("dog", "dogs"), ("lion", "lions"), ("fox", "foxes"), ("bear", "bears"),
    ("owl", "owls"), ("snake", "snakes"), ("frog", "frogs"), ("rabbit", "rabbits"),
)

NAMES = tuple("""
emily gertrude jessica winona bill fred julie mary john sandra daniel jeff
alice bob carol dave erin frank grace heidi ivan judy karl laura mallory nina
oscar peggy quinn rupert sybil trent ursula victor wendy xavier yvonne zach
adam bella chris diana edgar fiona george hannah isaac jasmine kevin lily
martin nora oliver paula quentin rosa samuel tina umar vera walter xena
yusuf zoe aaron beth caleb daisy ethan freya gavin hazel ian joy kyle luna
mason nadia owen piper ryan stella tyler una vince willa yara zane abel
bianca cyrus delia elias flora gideon helga igor june kurt leah milo noel
opal percy ruth silas thea uri vivian wade xander yolanda zelda amos
blair cora dexter elsa felix greta hugo iris jonah kira leon maeve nico
orla pablo rhea soren tessa ulric vada wren yael zora anton brook clive
dora emil faye glen hope ingo jade knox lena moss nell otto pia reid
sage tova viggo wynn
""".split())

# function words of the story and question templates
FUNCTION_WORDS = (
    "is", "a", "are", "afraid", "of", "what", "who", "where", "why", "how",
    "many", "there", "does", "the", "abbreviation", "for", "mean", "word",
    ".", "?",
)

QUESTION_TYPES = ("abbreviation", "entity", "description", "human", "location", "numeric")

# template id -> (question type, template); {name}, {kind}, {kinds} are slots
QUESTION_TEMPLATES = (
    ("entity", "what is {name} afraid of ?"),
    ("human", "who is afraid of {kinds} ?"),
    ("human", "who is a {kind} ?"),
    ("location", "where is {name} ?"),
    ("numeric", "how many {kinds} are there ?"),
    ("description", "why is {name} afraid of {kinds} ?"),
    ("description", "what does the word {kind} mean ?"),
    ("abbreviation", "what is the abbreviation for {kind} ?"),
)


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_names: int = len(NAMES)
    n_kinds: int = 8
    n_distractor_sentences: int = 6
    seed: int = 0
    train_ratio: float = 0.8
    dev_ratio: float = 0.1
    test_ratio: float = 0.1

    def __post_init__(self):
        if abs(self.train_ratio + self.dev_ratio + self.test_ratio - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.n_names > len(NAMES) or self.n_kinds > len(KINDS):
            raise GenerationError(
                f"lexicon has {len(NAMES)} names and {len(KINDS)} kinds; "
                f"asked for {self.n_names} and {self.n_kinds}")


class Lexicon:
    """Closed vocabulary: specials, function words, kinds, names."""

    def __init__(self, n_names: int = len(NAMES), n_kinds: int = 8):
        self.kinds = KINDS[:n_kinds]
        self.names = NAMES[:n_names]
        words = list(SPECIALS) + list(FUNCTION_WORDS)
        for sg, pl in self.kinds:
            words += [sg, pl]
        words += list(self.names)
        self.itos: list[str] = []
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.plurals = tuple(pl for _, pl in self.kinds)
        self.singulars = tuple(sg for sg, _ in self.kinds)

    @classmethod
    def from_config(cls, cfg: GeneratorConfig) -> "Lexicon":
        return cls(cfg.n_names, cfg.n_kinds)

    def __len__(self) -> int:
        return len(self.itos)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for t in tokens:
            if t not in self.stoi:
                raise GenerationError(f"token {t!r} not in lexicon")
            out.append(self.stoi[t])
        return out

    def name_ids(self) -> list[int]:
        return [self.stoi[n] for n in self.names]

    def kind_index(self, plural: str) -> int:
        return self.plurals.index(plural)

    def category(self, token: str) -> str:
        if token in self.names:
            return "person"
        if token in self.plurals or token in self.singulars:
            return "animal-kind"
        return "none"


@dataclass
class DeductionSample:
    context_sentences: list[list[str]]
    question: list[str]
    answer: str
    supporting_fact_indices: list[int]
    # per source token (question tokens then context tokens): person|animal-kind|none
    entity_categories: list[str] = field(default_factory=list)
    # ((start, end), (start, end), same_entity) over source-token positions, half-open
    coref_pairs: list[tuple] = field(default_factory=list)
    # ((start, end), (start, end), relation)
    relations: list[tuple] = field(default_factory=list)
    question_type: str = "entity"

    @property
    def source_tokens(self) -> list[str]:
        return list(self.question) + [t for s in self.context_sentences for t in s]

    def sentence_ranges(self) -> list[tuple[int, int]]:
        """Half-open source-token range of every context sentence."""
        out, pos = [], len(self.question)
        for s in self.context_sentences:
            out.append((pos, pos + len(s)))
            pos += len(s)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coref_pairs"] = [[list(a), list(b), f] for a, b, f in self.coref_pairs]
        d["relations"] = [[list(a), list(b), r] for a, b, r in self.relations]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeductionSample":
        d = dict(d)
        d["coref_pairs"] = [(tuple(a), tuple(b), bool(f)) for a, b, f in d.get("coref_pairs", [])]
        d["relations"] = [(tuple(a), tuple(b), r) for a, b, r in d.get("relations", [])]
        return cls(**d)


# -- facts ------------------------------------------------------------------

def membership(name: str, kind_sg: str) -> list[str]:
    return [name, "is", "a", kind_sg, "."]


def fear(subject_pl: str, object_pl: str) -> list[str]:
    return [subject_pl, "are", "afraid", "of", object_pl, "."]


def solve(sample: DeductionSample, lexicon: Lexicon) -> str | None:
    """Symbolic two-hop solver: follow is-a, then afraid-of."""
    name = sample.question[2]
    to_plural = dict(lexicon.kinds)
    kind = None
    for s in sample.context_sentences:
        if len(s) == 5 and s[0] == name and s[1] == "is":
            kind = to_plural[s[3]]
    if kind is None:
        return None
    for s in sample.context_sentences:
        if len(s) == 6 and s[0] == kind and s[2] == "afraid":
            return s[4]
    return None


def supporting_facts(sample: DeductionSample, lexicon: Lexicon) -> list[int]:
    name = sample.question[2]
    to_plural = dict(lexicon.kinds)
    out, kind = [], None
    for i, s in enumerate(sample.context_sentences):
        if len(s) == 5 and s[0] == name:
            out.append(i)
            kind = to_plural[s[3]]
    for i, s in enumerate(sample.context_sentences):
        if len(s) == 6 and s[0] == kind:
            out.append(i)
    return sorted(out)


def annotate(sample: DeductionSample, lexicon: Lexicon) -> DeductionSample:
    """Fill entity categories, coreference pairs and relations from the story."""
    toks = sample.source_tokens
    sample.entity_categories = [lexicon.category(t) for t in toks]
    to_plural = dict(lexicon.kinds)

    mentions: list[tuple[tuple[int, int], str]] = []  # (span, entity id)
    for i, t in enumerate(toks):
        cat = sample.entity_categories[i]
        if cat == "person":
            mentions.append(((i, i + 1), "p:" + t))
        elif cat == "animal-kind":
            mentions.append(((i, i + 1), "k:" + to_plural.get(t, t)))
    pairs = []
    for a in range(len(mentions)):
        for b in range(a + 1, len(mentions)):
            (sa, ea), (sb, eb) = mentions[a], mentions[b]
            if ea[0] == eb[0]:  # only same-type pairs are interesting candidates
                pairs.append((sa, sb, ea == eb))
    sample.coref_pairs = pairs

    rels = []
    ranges = sample.sentence_ranges()
    for (lo, hi), s in zip(ranges, sample.context_sentences):
        if len(s) == 5:
            rels.append(((lo, lo + 1), (lo + 3, lo + 4), "is-a"))
        else:
            rels.append(((lo, lo + 1), (lo + 4, lo + 5), "afraid-of"))
    # unrelated pairs: a name and a kind mention from different sentences whose
    # entities are not linked by any fact
    linked = set()
    for (lo, hi), s in zip(ranges, sample.context_sentences):
        if len(s) == 5:
            linked.add((s[0], to_plural[s[3]]))
        else:
            linked.add((s[0], s[4]))
    for i, (lo_a, _) in enumerate(ranges):
        sa = sample.context_sentences[i]
        for j, (lo_b, _) in enumerate(ranges):
            if i == j:
                continue
            sb = sample.context_sentences[j]
            head = sa[0]
            tail_pos = lo_b + (3 if len(sb) == 5 else 4)
            tail = to_plural.get(toks[tail_pos], toks[tail_pos])
            if (head, tail) not in linked and head != tail:
                rels.append(((lo_a, lo_a + 1), (tail_pos, tail_pos + 1), "none"))
    sample.relations = rels
    return sample


def sample_from_facts(facts: Sequence[str], question_name: str, lexicon: Lexicon) -> DeductionSample:
    """Build a sample from explicit fact strings such as "Emily is a wolf."."""
    sents = []
    for f in facts:
        s = f.lower().replace(".", " .").split()
        sents.append(s)
    sample = DeductionSample(sents, ["what", "is", question_name.lower(), "afraid", "of", "?"], "", [])
    answer = solve(sample, lexicon)
    if answer is None:
        raise GenerationError("facts do not determine an answer")
    sample.answer = answer
    sample.supporting_fact_indices = supporting_facts(sample, lexicon)
    return annotate(sample, lexicon)


# -- generation -------------------------------------------------------------

def name_pools(cfg: GeneratorConfig) -> dict[str, tuple[str, ...]]:
    """Disjoint name sets per split (fixed order, independent of seed)."""
    names = NAMES[:cfg.n_names]
    n_train = int(round(cfg.train_ratio * len(names)))
    n_dev = int(round(cfg.dev_ratio * len(names)))
    return {
        "train": names[:n_train],
        "dev": names[n_train:n_train + n_dev],
        "test": names[n_train + n_dev:],
    }


def _one(rng: np.random.Generator, names: Sequence[str], lexicon: Lexicon, n_distract: int) -> DeductionSample:
    kinds = lexicon.kinds
    n_k = len(kinds)
    name_idx = rng.permutation(len(names))
    k_a, k_b = rng.choice(n_k, size=2, replace=False)
    query = names[name_idx[0]]
    sf = [membership(query, kinds[k_a][0]), fear(kinds[k_a][1], kinds[k_b][1])]

    max_fear = n_k - 1  # each kind is subject of at most one fear fact
    max_member = len(names) - 1
    n_fear = int(rng.integers(0, n_distract + 1)) if n_distract else 0
    n_fear = min(n_fear, max_fear)
    n_member = n_distract - n_fear
    if n_member > max_member:
        n_fear = min(max_fear, n_distract - max_member)
        n_member = n_distract - n_fear
    if n_fear + n_member < n_distract:
        raise GenerationError("lexicon too small for the requested distractor count")

    distract = []
    subjects = [k for k in rng.permutation(n_k) if k != k_a][:n_fear]
    for k in subjects:
        obj = rng.choice([j for j in range(n_k) if j != k])
        distract.append(fear(kinds[k][1], kinds[obj][1]))
    for i in range(n_member):
        distract.append(membership(names[name_idx[1 + i]], kinds[int(rng.integers(n_k))][0]))

    sents = sf + distract
    order = rng.permutation(len(sents))
    sents = [sents[i] for i in order]
    sample = DeductionSample(sents, ["what", "is", query, "afraid", "of", "?"], kinds[k_b][1], [])
    sample.supporting_fact_indices = supporting_facts(sample, lexicon)
    if solve(sample, lexicon) != sample.answer or len(sample.supporting_fact_indices) != 2:
        raise GenerationError("generated story does not have a unique derivation")
    return annotate(sample, lexicon)


def generate(cfg: GeneratorConfig, n_samples: int, split: str = "train",
             seed: int | None = None) -> list[DeductionSample]:
    if cfg.n_names < 2 or cfg.n_kinds < 3:
        raise GenerationError("need at least 2 names and 3 kinds")
    lexicon = Lexicon.from_config(cfg)
    names = name_pools(cfg)[split]
    if len(names) < 1:
        raise GenerationError(f"split {split!r} has no names")
    split_no = ("train", "dev", "test").index(split)
    rng = make_rng((cfg.seed if seed is None else seed) * 7919 + split_no)
    return [_one(rng, names, lexicon, cfg.n_distractor_sentences) for _ in range(n_samples)]


def generate_splits(cfg: GeneratorConfig, n_samples: int) -> dict[str, list[DeductionSample]]:
    n_train = int(round(cfg.train_ratio * n_samples))
    n_dev = int(round(cfg.dev_ratio * n_samples))
    n_test = n_samples - n_train - n_dev
    return {"train": generate(cfg, n_train, "train"),
            "dev": generate(cfg, n_dev, "dev"),
            "test": generate(cfg, n_test, "test")}


# -- encoding ---------------------------------------------------------------

def _layout(sample: DeductionSample, lexicon: Lexicon, with_candidates: bool):
    tokens = [CLS] + list(sample.question) + [SEP]
    roles = ["special"] + ["question"] * len(sample.question) + ["special"]
    segs = [0] * len(tokens)
    sent = [-1] * len(tokens)
    sf = set(sample.supporting_fact_indices)
    for i, s in enumerate(sample.context_sentences):
        tokens += s
        roles += ["supporting-fact" if i in sf else "context"] * len(s)
        segs += [1] * len(s)
        sent += [i] * len(s)
        if i in sf:
            for j, t in enumerate(s):
                if t == sample.answer and j == len(s) - 2 and s[2] == "afraid":
                    roles[len(roles) - len(s) + j] = "answer"
    tokens.append(SEP)
    roles.append("special")
    segs.append(1)
    sent.append(-1)
    gold = None
    if with_candidates:
        for pl in lexicon.plurals:
            if pl == sample.answer:
                gold = len(tokens)
            tokens.append(pl)
            roles.append("answer" if pl == sample.answer else "context")
            segs.append(1)
            sent.append(-1)
        tokens.append(SEP)
        roles.append("special")
        segs.append(1)
        sent.append(-1)
    return tokens, roles, segs, sent, gold


def source_offset(sample: DeductionSample, i: int) -> int:
    """Encoded position of source token ``i`` (question tokens then context)."""
    return i + 1 if i < len(sample.question) else i + 2


def _encode(sample, lexicon, with_candidates, max_len):
    tokens, roles, segs, sent, gold = _layout(sample, lexicon, with_candidates)
    if max_len is not None and len(tokens) > max_len:
        raise LengthError(f"encoded length {len(tokens)} exceeds max_len {max_len}")
    inp = EncodedInput(lexicon.ids(tokens), segs, [1] * len(tokens), roles, tokens, sent)
    return inp, gold


def encode_for_span(sample: DeductionSample, lexicon: Lexicon, max_len: int | None = 128):
    """[CLS] question [SEP] context [SEP] candidates [SEP]; returns (input, (s, e))."""
    inp, gold = _encode(sample, lexicon, True, max_len)
    return inp, (gold, gold)


def encode_for_classification(sample: DeductionSample, lexicon: Lexicon, max_len: int | None = 128):
    """[CLS] question [SEP] context [SEP]; label = answer's index in the kind inventory."""
    inp, _ = _encode(sample, lexicon, False, max_len)
    return inp, lexicon.kind_index(sample.answer)


def encode(sample: DeductionSample, lexicon: Lexicon, head: str, max_len: int | None = 128):
    if head == "span":
        return encode_for_span(sample, lexicon, max_len)
    return encode_for_classification(sample, lexicon, max_len)


def encode_question(question: Sequence[str], lexicon: Lexicon) -> EncodedInput:
    tokens = [CLS] + list(question) + [SEP]
    n = len(tokens)
    roles = ["special"] + ["question"] * len(question) + ["special"]
    return EncodedInput(lexicon.ids(tokens), [0] * n, [1] * n, roles, tokens, [-1] * n)


CANONICAL_FACTS = (
    "Wolves are afraid of cats.", "Sheep are afraid of wolves.", "Mice are afraid of sheep.",
    "Gertrude is a mouse.", "Jessica is a mouse.", "Emily is a wolf.",
    "Cats are afraid of sheep.", "Winona is a wolf.",
)


def canonical_sample(lexicon: Lexicon | None = None) -> DeductionSample:
    return sample_from_facts(CANONICAL_FACTS, "Emily", lexicon or Lexicon(n_kinds=4))
