"""Synthetic task-oriented dialogues and style corpora.

Dialogues are generated from a :class:`DomainSpec` and serialised into the
input/output pairs of four settings:

* ``INTENT``  history -> intent name
* ``DST``     history -> ``intent(slot=value, ...)``
* ``NLG``     system act ``act(slot=value, ...)`` -> system response
* ``E2E``     history -> API call (``E2E-api``) and history + API return ->
  response (``E2E-response``)

API calls come either in the call syntax above or as ``SELECT * FROM
<domain> WHERE slot=value ...`` / ``BOOK FROM <domain> WHERE ...`` queries.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .vocab import API, OUT, SPECIAL_TOKENS, SYSTEM, USER, tokenize

SETTINGS = ("INTENT", "DST", "NLG", "E2E")
SAMPLE_TAGS = ("INTENT", "DST", "NLG", "E2E-api", "E2E-response")
DOMAIN_NAMES = ("hotel", "train", "taxi", "restaurant", "attraction",
                "flight", "music", "movie", "bank", "weather")
SKILL_LABELS = ("SQL", "BOOK") + DOMAIN_NAMES + ("chitchat",)
# shared by every domain: call/query punctuation and keywords, act names
GRAMMAR_TOKENS = frozenset({"(", ")", "=", ",", "SELECT", "*", "FROM", "WHERE", "BOOK",
                            "inform", "request", "name", "?"})


# ---------------------------------------------------------------------------
# API grammar
# ---------------------------------------------------------------------------
_NAME = r"[^\s(),=]+"
_API_RE = re.compile(rf"^({_NAME})\((.*)\)$")
_PAIR_RE = re.compile(rf"^({_NAME})=({_NAME})$")
_QUERY_RE = re.compile(rf"^(SELECT \* FROM|BOOK FROM) ({_NAME}) WHERE((?: {_NAME}={_NAME})*)$")


def render_api(intent: str, slots: Iterable[tuple[str, str]]) -> str:
    return f"{intent}(" + ", ".join(f"{s}={v}" for s, v in slots) + ")"


def parse_api(text: str) -> tuple[str, tuple[tuple[str, str], ...]]:
    """Inverse of :func:`render_api`; raises ValueError on malformed input."""
    m = _API_RE.match(text.strip())
    if not m:
        raise ValueError(f"not an API call: {text!r}")
    body = m.group(2).strip()
    pairs = []
    if body:
        for part in body.split(","):
            pm = _PAIR_RE.match(part.strip())
            if not pm:
                raise ValueError(f"bad slot-value pair {part!r} in {text!r}")
            pairs.append((pm.group(1), pm.group(2)))
    return m.group(1), tuple(pairs)


def render_query(kind: str, domain: str, slots: Iterable[tuple[str, str]]) -> str:
    head = {"SELECT": "SELECT * FROM", "BOOK": "BOOK FROM"}[kind]
    return f"{head} {domain} WHERE" + "".join(f" {s}={v}" for s, v in slots)


def parse_query(text: str) -> tuple[str, str, tuple[tuple[str, str], ...]]:
    m = _QUERY_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a query: {text!r}")
    kind = "SELECT" if m.group(1).startswith("SELECT") else "BOOK"
    pairs = tuple(tuple(p.split("=")) for p in m.group(3).split())
    return kind, m.group(2), pairs


# ---------------------------------------------------------------------------
# domains and dialogues
# ---------------------------------------------------------------------------
@dataclass
class DomainSpec:
    name: str
    intents: list[str]
    slots: dict[str, list[str]]
    words: list[str]
    intent_words: dict[str, str] = field(default_factory=dict)
    disjoint: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.intents:
            raise ConfigError(f"domain {self.name}: no intents")
        for slot, pool in self.slots.items():
            if not pool:
                raise ConfigError(f"domain {self.name}: empty value pool for slot {slot!r}")
        if not self.words:
            raise ConfigError(f"domain {self.name}: empty word pool")
        if not self.intent_words:
            self.intent_words = {i: f"{i}_please" for i in self.intents}

    def vocabulary(self) -> set[str]:
        toks = set(self.words) | set(self.intents) | set(self.intent_words.values()) | set(self.slots)
        for pool in self.slots.values():
            toks |= set(pool)
        toks |= {self.entity(i) for i in range(3)}
        return toks

    def entity(self, k: int) -> str:
        return f"{self.name}_place{k}"


def make_domain_spec(name: str, n_intents: int = 3, n_slots: int = 2, n_values: int = 3,
                     n_words: int = 8, seed: int = 0) -> DomainSpec:
    """Domain whose every token carries the domain name, hence disjoint from other domains."""
    verbs = ("find", "book", "ask", "cancel", "change")
    if n_intents > len(verbs):
        raise ConfigError(f"at most {len(verbs)} intents per domain")
    intents = [f"{name}_{v}" for v in verbs[:n_intents]]
    slots = {f"{name}_s{j}": [f"{name}_v{j}{k}" for k in range(n_values)] for j in range(n_slots)}
    words = [f"{name}_w{k}" for k in range(n_words)]
    return DomainSpec(name, intents, slots, words, seed=seed)


@dataclass
class Turn:
    user: str
    system: str
    intent: str | None
    state: dict | None
    act: str | None
    api: str | None = None
    query: str | None = None
    out: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Dialogue:
    domain: str
    turns: list[Turn]


def _phrase(rng: np.random.Generator, words: Sequence[str], n: int) -> list[str]:
    return [words[i] for i in rng.integers(0, len(words), n)]


def gen_dialogue(spec: DomainSpec, rng: np.random.Generator, max_turns: int = 2) -> Dialogue:
    """One dialogue; the API rule is: emit a call when the system informs or
    recommends, the state changed this turn, and the same call was not issued before."""
    turns: list[Turn] = []
    state: dict[str, str] = {}
    issued: set[str] = set()
    intent = spec.intents[int(rng.integers(len(spec.intents)))]
    slot_names = list(spec.slots)
    for t in range(int(rng.integers(1, max_turns + 1))):
        if t and rng.random() < 0.3:
            intent = spec.intents[int(rng.integers(len(spec.intents)))]
        n_inform = int(rng.integers(1, len(slot_names) + 1))
        informed = sorted(rng.choice(len(slot_names), n_inform, replace=False))
        before = dict(state)
        for j in informed:
            pool = spec.slots[slot_names[j]]
            state[slot_names[j]] = pool[int(rng.integers(len(pool)))]
        user = _phrase(rng, spec.words, 2) + [spec.intent_words[intent]]
        for j in informed:
            user += [slot_names[j], state[slot_names[j]]]
        user += _phrase(rng, spec.words, 1)
        changed = state != before
        speech_act = "inform" if rng.random() < 0.85 else "request"
        slots = tuple(sorted(state.items()))
        api = query = None
        out = ""
        entity = spec.entity(int(rng.integers(3)))
        if speech_act in ("inform", "recommend") and changed:
            call = render_api(intent, slots)
            if call not in issued:
                issued.add(call)
                api = call
                kind = "BOOK" if intent.endswith("_book") else "SELECT"
                query = render_query(kind, spec.name, slots)
                out = render_api(f"{spec.name}_result", (("name", entity),))
        if speech_act == "inform":
            act = render_api("inform", slots + (("name", entity),))
            system = _phrase(rng, spec.words, 1) + [entity] + [v for _, v in slots] + _phrase(rng, spec.words, 1)
        else:
            missing = [s for s in slot_names if s not in state] or slot_names
            act = render_api("request", tuple((s, "?") for s in missing))
            system = _phrase(rng, spec.words, 2) + missing
        turns.append(Turn(" ".join(user), " ".join(system), intent, dict(state), act, api, query, out))
    return Dialogue(spec.name, turns)


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------
@dataclass
class Sample:
    input: str
    output: str
    setting: str
    task_id: str
    skills: list | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        obj = dict(self.extra)
        obj.update({"input": self.input, "output": self.output, "setting": self.setting, "task_id": self.task_id})
        if self.skills is not None:
            obj["skills"] = list(self.skills)
        return obj


def skill_vector(*labels: str) -> list[int]:
    return [int(s in labels) for s in SKILL_LABELS]


def _require(value, what: str, index: int):
    if value is None:
        raise DataError(f"turn {index}: missing {what} annotation")
    return value


def format_samples(dialogue: Dialogue, setting: str, api_style: str = "call", task_id: str | None = None) -> list[Sample]:
    """Serialise every turn of ``dialogue`` into the pairs of ``setting``."""
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if api_style not in ("call", "sql"):
        raise ConfigError("api_style must be 'call' or 'sql'")
    task_id = task_id or dialogue.domain
    history: list[str] = []
    out: list[Sample] = []
    for i, turn in enumerate(dialogue.turns):
        if not turn.user:
            raise DataError(f"turn {i}: empty user utterance")
        history.append(f"{USER} {turn.user}")
        u = " ".join(history)
        if setting == "INTENT":
            out.append(Sample(f"{u} {API}", _require(turn.intent, "intent", i), "INTENT", task_id))
        elif setting == "DST":
            state = _require(turn.state, "state", i)
            intent = _require(turn.intent, "intent", i)
            out.append(Sample(f"{u} {API}", render_api(intent, sorted(state.items())), "DST", task_id))
        elif setting == "NLG":
            act = _require(turn.act, "speech-act", i)
            out.append(Sample(f"{OUT} {act}", _require(turn.system, "system", i), "NLG", task_id))
        else:
            call = turn.query if api_style == "sql" else turn.api
            if call is not None:
                kind = "BOOK" if call.startswith("BOOK") or (turn.intent or "").endswith("_book") else "SQL"
                out.append(Sample(f"{u} {API}", call, "E2E-api", task_id, skill_vector(kind, dialogue.domain)))
            ctx = f"{u} {OUT} {turn.out}" if turn.out else u
            out.append(Sample(ctx, _require(turn.system, "system", i), "E2E-response", task_id,
                              skill_vector(dialogue.domain)))
        history.append(f"{SYSTEM} {turn.system}")
    return out


@dataclass
class TaskDataset:
    name: str
    train: list[Sample]
    valid: list[Sample]
    test: list[Sample]
    dialogues: dict = field(default_factory=dict)

    def splits(self) -> dict[str, list[Sample]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = (8 * n) // 10
    n_valid = (n - n_train) // 2
    return n_train, n_valid, n - n_train - n_valid


def gen_domain(spec: DomainSpec, n_dialogues: int, seed: int | None = None, setting: str = "E2E",
               api_style: str = "call", max_turns: int = 2) -> TaskDataset:
    """Deterministic dialogues split 80/10/10 by dialogue, formatted for ``setting``."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    dialogues = [gen_dialogue(spec, rng, max_turns) for _ in range(n_dialogues)]
    n_train, n_valid, _ = split_counts(n_dialogues)
    parts = {"train": dialogues[:n_train], "valid": dialogues[n_train:n_train + n_valid],
             "test": dialogues[n_train + n_valid:]}
    fmt = {k: [s for d in v for s in format_samples(d, setting, api_style, spec.name)] for k, v in parts.items()}
    return TaskDataset(spec.name, fmt["train"], fmt["valid"], fmt["test"], parts)


def check_disjoint(specs: Sequence[DomainSpec]) -> None:
    """Raise ConfigError if two domains flagged ``disjoint`` share a token."""
    flagged = [s for s in specs if s.disjoint]
    for i, a in enumerate(flagged):
        for b in flagged[i + 1:]:
            shared = a.vocabulary() & b.vocabulary()
            if shared:
                raise ConfigError(f"domains {a.name} and {b.name} are flagged disjoint "
                                  f"but share {sorted(shared)[:5]}")


def gen_curriculum_domains(n_domains: int, n_dialogues: int, seed: int = 0, setting: str = "INTENT",
                           **spec_kwargs) -> list[TaskDataset]:
    if n_domains > len(DOMAIN_NAMES):
        raise ConfigError(f"at most {len(DOMAIN_NAMES)} synthetic domains")
    specs = [make_domain_spec(name, seed=seed + i, **spec_kwargs) for i, name in enumerate(DOMAIN_NAMES[:n_domains])]
    check_disjoint(specs)
    return [gen_domain(spec, n_dialogues, seed + 1000 * (i + 1), setting) for i, spec in enumerate(specs)]


def dataset_vocabulary(samples: Iterable[Sample]) -> set[str]:
    toks: set[str] = set()
    for s in samples:
        toks.update(tokenize(s.input))
        toks.update(tokenize(s.output))
    return toks - set(SPECIAL_TOKENS)


# ---------------------------------------------------------------------------
# style corpora
# ---------------------------------------------------------------------------
@dataclass
class StyleSpec:
    styles: list[str]
    n_markers: int = 6
    n_neutral: int = 20
    prompt_len: int = 3
    response_len: int = 6
    marker_rate: float = 0.5
    separation: float = 1.0

    def __post_init__(self):
        if len(self.styles) < 2:
            raise ConfigError("a style corpus needs at least two styles")
        if not 0.0 <= self.separation <= 1.0:
            raise ConfigError("separation must lie in [0, 1]")

    def markers(self, style: str) -> list[str]:
        return [f"{style}_m{k}" for k in range(self.n_markers)]

    def neutral(self) -> list[str]:
        return [f"word{k}" for k in range(self.n_neutral)]

    def vocabulary(self) -> list[str]:
        toks = self.neutral()
        for s in self.styles:
            toks += self.markers(s)
        return toks


@dataclass
class StyledText:
    prefix: str
    response: str
    label: int


def gen_attribute_corpus(spec: StyleSpec, n: int, seed: int = 0) -> list[StyledText]:
    """Prompt/response pairs whose responses carry style markers.

    Each response token is a marker with probability ``marker_rate``.  A
    marker comes from the response's own style with probability
    ``1/k + separation * (1 - 1/k)`` and from another style otherwise, so
    ``separation=1`` gives disjoint marker sets and ``0`` indistinguishable
    styles.
    """
    rng = np.random.default_rng(seed)
    neutral = spec.neutral()
    k = len(spec.styles)
    out = []
    for _ in range(n):
        label = int(rng.integers(k))
        prompt = [USER] + _phrase(rng, neutral, spec.prompt_len)
        resp = []
        for _ in range(spec.response_len):
            if rng.random() < spec.marker_rate:
                own = rng.random() < 1.0 / k + spec.separation * (1.0 - 1.0 / k)
                style = label if own else int((label + rng.integers(1, k)) % k)
                resp.append(spec.markers(spec.styles[style])[int(rng.integers(spec.n_markers))])
            else:
                resp.append(neutral[int(rng.integers(len(neutral)))])
        out.append(StyledText(" ".join(prompt), " ".join(resp), label))
    return out


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------
_SAMPLE_FIELDS = ("input", "output", "setting", "task_id")


def write_jsonl(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            missing = [f for f in _SAMPLE_FIELDS if f not in obj]
            if missing:
                raise DataError(f"{path}: line {lineno}: missing fields {missing}")
            extra = {k: v for k, v in obj.items() if k not in _SAMPLE_FIELDS + ("skills",)}
            out.append(Sample(obj["input"], obj["output"], obj["setting"], str(obj["task_id"]),
                              obj.get("skills"), extra))
    return out


def samples_to_pairs(samples: Sequence[Sample], vocab) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(s.input, bos=True), vocab.encode(s.output, eos=True)) for s in samples]


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
