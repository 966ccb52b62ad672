"""OJ data schema, line-delimited JSON I/O, sequence construction and a seeded
synthetic-student simulator.

File formats (one JSON object per line):

* ``concepts.jsonl``  ``{"id": 0, "name": "loops"}``
* ``problems.jsonl``  ``{"id": 0, "text": "...", "difficulty": 3, "concept_ids": [0, 4]}``
* ``events.jsonl``    ``{"submission_id": 17, "user_id": "u3", "timestamp": 1600000000,
  "problem_id": 0, "verdict": "WrongAnswer", "r": 0, "code": "int main() {...}"}``
* ``roles.jsonl``     ``{"user_id": "u3", "role": "student"}``
* ``behaviors.jsonl`` ``{"user_id": "u3", "timestamp": 1600000000, "kind": "ViewProblem"}``

JSON string escaping keeps multi-line code on a single line.
"""
from __future__ import annotations

import enum
import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

MIN_SUBMISSIONS = 20


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class FormatError(DataError):
    """Artifact written by a different format version (or not an artifact at all)."""


class ConfigError(ValueError):
    pass


class Verdict(enum.IntEnum):
    Correct = 0
    CompileError = 1
    WrongAnswer = 2
    TimeLimitExceeded = 3
    MemoryLimitExceeded = 4
    RuntimeError = 5
    PresentationError = 6
    OutputLimitExceeded = 7
    SystemError = 8


ERROR_VERDICTS = tuple(v for v in Verdict if v is not Verdict.Correct)


def correctness(verdict) -> int:
    """Binary label used by the 2-class mode and by r: Correct -> 1, anything else -> 0."""
    return int(Verdict(verdict) is Verdict.Correct)


class BehaviorKind(enum.Enum):
    ViewProblem = "ViewProblem"
    ViewConcept = "ViewConcept"
    ViewSubmission = "ViewSubmission"
    ViewRanking = "ViewRanking"
    SubmitCode = "SubmitCode"


@dataclass(frozen=True)
class Concept:
    id: int
    name: str


@dataclass(frozen=True)
class Problem:
    id: int
    text: str
    difficulty: int
    concept_ids: tuple

    def __post_init__(self):
        if not self.concept_ids:
            raise IntegrityError(f"problem {self.id} has no concepts")


@dataclass(frozen=True)
class SubmissionEvent:
    submission_id: int
    user_id: str
    timestamp: int
    problem_id: int
    code: str
    verdict: Verdict
    r: int

    def __post_init__(self):
        if self.r != correctness(self.verdict):
            raise IntegrityError(
                f"submission {self.submission_id}: r={self.r} inconsistent with {self.verdict.name}")

    def to_record(self):
        return {"submission_id": self.submission_id, "user_id": self.user_id,
                "timestamp": self.timestamp, "problem_id": self.problem_id,
                "verdict": self.verdict.name, "r": self.r, "code": self.code}


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: str
    timestamp: int
    kind: BehaviorKind


@dataclass
class StudentSequence:
    user_id: str
    events: list

    def __len__(self):
        return len(self.events)

    @property
    def problem_ids(self):
        return np.array([e.problem_id for e in self.events], dtype=np.int64)

    @property
    def responses(self):
        return np.array([e.r for e in self.events], dtype=np.int64)

    @property
    def submission_ids(self):
        return np.array([e.submission_id for e in self.events], dtype=np.int64)


@dataclass
class KnowledgeBase:
    problems: list
    concepts: list

    @property
    def n_problems(self):
        return len(self.problems)

    @property
    def n_concepts(self):
        return len(self.concepts)


# ---------------------------------------------------------------- line-delimited I/O

def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from None


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def _field(rec, key, path, lineno):
    try:
        return rec[key]
    except (KeyError, TypeError):
        raise ParseError(f"{path}:{lineno}: missing field {key!r}") from None


def load_knowledge_base(problems_path, concepts_path, max_difficulty=5) -> KnowledgeBase:
    concepts = []
    for lineno, rec in _read_jsonl(concepts_path):
        concepts.append(Concept(int(_field(rec, "id", concepts_path, lineno)),
                                str(_field(rec, "name", concepts_path, lineno))))
    concepts.sort(key=lambda c: c.id)
    if [c.id for c in concepts] != list(range(len(concepts))):
        raise IntegrityError("concept ids must be unique and contiguous from 0")

    problems = []
    for lineno, rec in _read_jsonl(problems_path):
        pid = int(_field(rec, "id", problems_path, lineno))
        difficulty = int(_field(rec, "difficulty", problems_path, lineno))
        cids = tuple(sorted(set(int(c) for c in _field(rec, "concept_ids", problems_path, lineno))))
        if not cids:
            raise IntegrityError(f"{problems_path}:{lineno}: problem {pid} has no concepts")
        if not 1 <= difficulty <= max_difficulty:
            raise IntegrityError(f"{problems_path}:{lineno}: difficulty {difficulty} out of 1..{max_difficulty}")
        for c in cids:
            if not 0 <= c < len(concepts):
                raise IntegrityError(f"{problems_path}:{lineno}: problem {pid} references unknown concept {c}")
        problems.append(Problem(pid, str(rec.get("text", "")), difficulty, cids))
    problems.sort(key=lambda p: p.id)
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        dup = next(i for i, n in itertools.groupby(ids) if len(list(n)) > 1)
        raise IntegrityError(f"duplicate problem id {dup}")
    if ids != list(range(len(ids))):
        raise IntegrityError("problem ids must be contiguous from 0")
    return KnowledgeBase(problems, concepts)


def save_knowledge_base(kb: KnowledgeBase, problems_path, concepts_path):
    _write_jsonl(concepts_path, [{"id": c.id, "name": c.name} for c in kb.concepts])
    _write_jsonl(problems_path, [{"id": p.id, "text": p.text, "difficulty": p.difficulty,
                                  "concept_ids": list(p.concept_ids)} for p in kb.problems])


def load_events(path, n_problems=None):
    events = []
    for lineno, rec in _read_jsonl(path):
        try:
            verdict = Verdict[_field(rec, "verdict", path, lineno)]
        except KeyError:
            raise ParseError(f"{path}:{lineno}: unknown verdict {rec['verdict']!r}") from None
        pid = int(_field(rec, "problem_id", path, lineno))
        if n_problems is not None and not 0 <= pid < n_problems:
            raise IntegrityError(f"{path}:{lineno}: unknown problem {pid}")
        try:
            events.append(SubmissionEvent(
                submission_id=int(_field(rec, "submission_id", path, lineno)),
                user_id=str(_field(rec, "user_id", path, lineno)),
                timestamp=int(_field(rec, "timestamp", path, lineno)),
                problem_id=pid,
                code=str(_field(rec, "code", path, lineno)),
                verdict=verdict,
                r=int(_field(rec, "r", path, lineno))))
        except IntegrityError as exc:
            raise IntegrityError(f"{path}:{lineno}: {exc}") from None
    return events


def save_events(events, path):
    _write_jsonl(path, [e.to_record() for e in events])


def load_roles(path):
    roles = {}
    for lineno, rec in _read_jsonl(path):
        role = _field(rec, "role", path, lineno)
        if role not in ("student", "staff"):
            raise ParseError(f"{path}:{lineno}: role must be 'student' or 'staff', got {role!r}")
        roles[str(_field(rec, "user_id", path, lineno))] = role
    return roles


def save_roles(roles, path):
    _write_jsonl(path, [{"user_id": u, "role": r} for u, r in roles.items()])


def load_behaviors(path):
    out = []
    for lineno, rec in _read_jsonl(path):
        try:
            kind = BehaviorKind(_field(rec, "kind", path, lineno))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: unknown behaviour kind {rec['kind']!r}") from None
        out.append(BehaviorEvent(str(rec["user_id"]), int(rec["timestamp"]), kind))
    return out


def save_behaviors(behaviors, path):
    _write_jsonl(path, [{"user_id": b.user_id, "timestamp": b.timestamp, "kind": b.kind.value}
                        for b in behaviors])


# ---------------------------------------------------------------- sequences

def build_sequences(events, roles, min_len=MIN_SUBMISSIONS):
    """Group submissions per student, drop staff and short histories.

    Users missing from ``roles`` are treated as non-students. Ties on
    timestamp are broken by submission id.
    """
    per_user = {}
    for e in events:
        per_user.setdefault(e.user_id, []).append(e)
    seqs = []
    dropped_role = dropped_short = 0
    for user in sorted(per_user):
        evs = per_user[user]
        if roles.get(user) != "student":
            dropped_role += 1
            continue
        if len(evs) < min_len:
            dropped_short += 1
            continue
        evs = sorted(evs, key=lambda e: (e.timestamp, e.submission_id))
        seqs.append(StudentSequence(user, evs))
    log.info("build_sequences: kept %d students, dropped %d non-students and %d short",
             len(seqs), dropped_role, dropped_short)
    return seqs


@dataclass
class Windows:
    """Fixed-length windows, right-padded. ``mask`` marks real events;
    ``target_mask`` additionally drops the first step of every window."""
    user_ids: list
    problem: np.ndarray
    response: np.ndarray
    submission: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.user_ids)

    @property
    def length(self):
        return self.problem.shape[1]

    @property
    def target_mask(self):
        tm = self.mask.copy()
        tm[:, 0] = False
        return tm

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Windows([self.user_ids[i] for i in idx], self.problem[idx], self.response[idx],
                       self.submission[idx], self.mask[idx])


def window_sequences(seqs, length=200) -> Windows:
    if length < 2:
        raise ConfigError("window length must be at least 2")
    users, probs, resps, subs, masks = [], [], [], [], []
    for seq in seqs:
        p, r, s = seq.problem_ids, seq.responses, seq.submission_ids
        for start in range(0, len(seq), length):
            n = min(length, len(seq) - start)
            pp = np.zeros(length, np.int64)
            rr = np.zeros(length, np.int64)
            ss = np.full(length, -1, np.int64)
            mm = np.zeros(length, bool)
            pp[:n] = p[start:start + n]
            rr[:n] = r[start:start + n]
            ss[:n] = s[start:start + n]
            mm[:n] = True
            users.append(seq.user_id)
            probs.append(pp)
            resps.append(rr)
            subs.append(ss)
            masks.append(mm)
    if not users:
        return Windows([], np.zeros((0, length), np.int64), np.zeros((0, length), np.int64),
                       np.zeros((0, length), np.int64), np.zeros((0, length), bool))
    return Windows(users, np.stack(probs), np.stack(resps), np.stack(subs), np.stack(masks))


# ---------------------------------------------------------------- simulator

# Error labels ordered from near-miss to hopeless; the failure margin picks among them.
_SEVERITY = {
    Verdict.PresentationError: 0.0,
    Verdict.WrongAnswer: -0.6,
    Verdict.OutputLimitExceeded: -1.2,
    Verdict.TimeLimitExceeded: -1.8,
    Verdict.MemoryLimitExceeded: -2.4,
    Verdict.RuntimeError: -3.0,
    Verdict.CompileError: -4.0,
}
_SIGNATURE_TOKENS = ("sa", "sb", "sc")


def verdict_signatures():
    """Ordered 4-token marker per verdict. Every signature is a permutation of the
    same multiset, so only token order (never token counts) identifies the verdict."""
    a, b, c = _SIGNATURE_TOKENS
    perms = sorted(set(itertools.permutations((a, a, b, c))))
    return {v: perms[i] for i, v in enumerate(Verdict)}, perms


@dataclass
class SynthConfig:
    n_students: int = 200
    n_problems: int = 60
    n_concepts: int = 12
    n_staff: int = 2
    min_len: int = 40
    max_len: int = 160
    short_fraction: float = 0.05
    max_concepts_per_problem: int = 3
    max_difficulty: int = 5
    discrimination: float = 1.7
    skill_sd: float = 1.0
    skill_drift: float = 0.15
    near_miss_bonus: float = 3.0
    mastery_weight: float = 1.0
    learn_rate: float = 0.12
    forget_rate: float = 0.06
    difficulty_step: float = 0.45
    base_offset: float = 0.3
    retry_prob: float = 0.5
    related_prob: float = 0.5
    verdict_sharpness: float = 1.5
    noise_vocab: int = 120
    noise_statements: tuple = (3, 9)
    label_noise: float = 0.0
    behaviors_per_submission: float = 1.0

    def validate(self):
        if self.n_students < 1 or self.n_problems < 1 or self.n_concepts < 1:
            raise ConfigError("need at least one student, problem and concept")
        if self.n_staff < 0:
            raise ConfigError("n_staff must be >= 0")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.max_concepts_per_problem < 1 or self.max_difficulty < 1:
            raise ConfigError("max_concepts_per_problem and max_difficulty must be >= 1")
        if self.skill_drift < 0 or self.near_miss_bonus < 0:
            raise ConfigError("skill_drift and near_miss_bonus must be >= 0")
        for name in ("short_fraction", "retry_prob", "related_prob", "label_noise", "forget_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.noise_vocab < 1 or self.noise_statements[0] < 0 or \
                self.noise_statements[0] > self.noise_statements[1]:
            raise ConfigError("bad code-noise settings")


def success_probability(mastery_avg, skill, difficulty, cfg: SynthConfig):
    return float(expit(_logit(mastery_avg, skill, difficulty, cfg)))


def _logit(mastery_avg, skill, difficulty, cfg):
    return cfg.discrimination * (cfg.mastery_weight * mastery_avg + skill + cfg.base_offset
                                 - cfg.difficulty_step * (difficulty - (cfg.max_difficulty + 1) / 2))


def _error_distribution(z, difficulty, cfg):
    labels = list(_SEVERITY)
    centers = np.array([_SEVERITY[v] for v in labels])
    scores = -cfg.verdict_sharpness * (z - centers) ** 2
    hard = difficulty - (cfg.max_difficulty + 1) / 2
    for i, v in enumerate(labels):
        if v in (Verdict.TimeLimitExceeded, Verdict.MemoryLimitExceeded):
            scores[i] += 0.4 * hard
    labels.append(Verdict.SystemError)
    scores = np.append(scores, -4.0)
    p = np.exp(scores - scores.max())
    return labels, p / p.sum()


def _render_code(rng, verdict, pool, cfg, signatures, all_sigs):
    sig = signatures[verdict]
    if cfg.label_noise and rng.random() < cfg.label_noise:
        sig = all_sigs[rng.integers(len(all_sigs))]
    lo, hi = cfg.noise_statements
    n_stmt = int(rng.integers(lo, hi + 1))
    sig_at = int(rng.integers(0, n_stmt + 1))
    lines = ["#include <stdio.h>", "int main() {"]
    for i in range(n_stmt + 1):
        if i == sig_at:
            lines.append("    " + " ".join(sig) + ";")
        if i == n_stmt:
            break
        a, b, c = (pool[j] for j in rng.integers(len(pool), size=3))
        kind = rng.integers(4)
        if kind == 0:
            lines.append(f"    int {a} = {b} + {int(rng.integers(100))};")
        elif kind == 1:
            lines.append(f"    if ({a} > {b}) {c}++;")
        elif kind == 2:
            lines.append(f'    printf("%d\\n", {a});')
        else:
            lines.append(f"    for (int {a} = 0; {a} < {b}; {a}++) {c} += {a};")
    lines += ["    return 0;", "}"]
    return "\n".join(lines)


def synth_generate(cfg: SynthConfig, seed: int):
    """Simulate an OJ corpus. Returns ``(kb, events, roles, behaviors)``; a pure
    function of ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    concepts = [Concept(i, f"concept_{i}") for i in range(cfg.n_concepts)]
    problems = []
    for pid in range(cfg.n_problems):
        k = int(rng.integers(1, min(cfg.max_concepts_per_problem, cfg.n_concepts) + 1))
        cids = tuple(sorted(rng.choice(cfg.n_concepts, size=k, replace=False).tolist()))
        diff = int(rng.integers(1, cfg.max_difficulty + 1))
        text = f"problem {pid} on " + ", ".join(concepts[c].name for c in cids)
        problems.append(Problem(pid, text, diff, cids))
    kb = KnowledgeBase(problems, concepts)

    by_concept = [[p.id for p in problems if c in p.concept_ids] for c in range(cfg.n_concepts)]
    noise_names = [f"v{i}" for i in range(cfg.noise_vocab)]
    pools = [rng.choice(noise_names, size=min(8, cfg.noise_vocab), replace=False).tolist()
             for _ in problems]
    signatures, all_sigs = verdict_signatures()

    events, roles, behaviors = [], {}, []
    sub_id = itertools.count()

    def emit(user, t, pid, verdict):
        code = _render_code(rng, verdict, pools[pid], cfg, signatures, all_sigs)
        events.append(SubmissionEvent(next(sub_id), user, t, pid, code, verdict, correctness(verdict)))
        n_b = rng.poisson(cfg.behaviors_per_submission)
        kinds = list(BehaviorKind)
        for _ in range(n_b):
            behaviors.append(BehaviorEvent(user, t - int(rng.integers(1, 60)),
                                           kinds[rng.integers(len(kinds) - 1)]))
        behaviors.append(BehaviorEvent(user, t, BehaviorKind.SubmitCode))

    for s in range(cfg.n_students):
        user = f"s{s}"
        roles[user] = "student"
        if rng.random() < cfg.short_fraction:
            n = int(rng.integers(max(1, MIN_SUBMISSIONS // 4), MIN_SUBMISSIONS))
        else:
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        skill = rng.normal(0.0, cfg.skill_sd)
        mastery = rng.normal(0.0, 0.1, size=cfg.n_concepts)
        t = 1_600_000_000 + int(rng.integers(0, 86_400 * 30))
        pid = int(rng.integers(cfg.n_problems))
        last_ok = True
        carry = 0.0   # logit shift on the next attempt, set by how the last one failed
        for _ in range(n):
            if not last_ok and rng.random() < cfg.retry_prob:
                pass
            elif rng.random() < cfg.related_prob:
                c = problems[pid].concept_ids[rng.integers(len(problems[pid].concept_ids))]
                pid = int(by_concept[c][rng.integers(len(by_concept[c]))])
            else:
                pid = int(rng.integers(cfg.n_problems))
            prob = problems[pid]
            cids = list(prob.concept_ids)
            z = _logit(mastery[cids].mean(), skill, prob.difficulty, cfg) + carry
            ok = rng.random() < expit(z)
            if ok:
                verdict = Verdict.Correct
                carry = 0.0
            else:
                labels, p = _error_distribution(z, prob.difficulty, cfg)
                verdict = labels[rng.choice(len(labels), p=p)]
                closeness = 1.0 + _SEVERITY.get(verdict, -4.0) / 2.0   # +1 near miss .. -1 compile error
                carry = cfg.near_miss_bonus * closeness
            idle = np.ones(cfg.n_concepts, bool)
            idle[cids] = False
            mastery[idle] *= 1.0 - cfg.forget_rate
            mastery[cids] += cfg.learn_rate * (1.5 if ok else 1.0)
            skill += cfg.skill_drift * rng.normal()
            t += 1 + int(rng.exponential(600))
            emit(user, t, pid, verdict)
            last_ok = ok

    for s in range(cfg.n_staff):
        user = f"staff{s}"
        roles[user] = "staff"
        t = 1_600_000_000
        for pid in range(min(cfg.n_problems, 3 * MIN_SUBMISSIONS)):
            t += 30
            emit(user, t, pid, Verdict.Correct)
    return kb, events, roles, behaviors


def marker_lookup(code: str):
    """Oracle classifier: read the verdict straight off the signature tokens."""
    from .codeembed import tokenize

    signatures, _ = verdict_signatures()
    inverse = {sig: v for v, sig in signatures.items()}
    toks = tokenize(code)
    for i in range(len(toks) - 3):
        hit = inverse.get(tuple(toks[i:i + 4]))
        if hit is not None:
            return hit
    return None


DATA_FILES = {
    "problems": "problems.jsonl",
    "concepts": "concepts.jsonl",
    "events": "events.jsonl",
    "roles": "roles.jsonl",
    "behaviors": "behaviors.jsonl",
}


def write_corpus(out_dir, kb, events, roles, behaviors=()):
    os.makedirs(out_dir, exist_ok=True)
    save_knowledge_base(kb, os.path.join(out_dir, DATA_FILES["problems"]),
                        os.path.join(out_dir, DATA_FILES["concepts"]))
    save_events(events, os.path.join(out_dir, DATA_FILES["events"]))
    save_roles(roles, os.path.join(out_dir, DATA_FILES["roles"]))
    save_behaviors(behaviors, os.path.join(out_dir, DATA_FILES["behaviors"]))


def read_corpus(data_dir):
    """Load the four required files (behaviours are optional)."""
    path = {k: os.path.join(data_dir, v) for k, v in DATA_FILES.items()}
    for key in ("problems", "concepts", "events", "roles"):
        if not os.path.exists(path[key]):
            raise FileNotFoundError(f"missing data file {path[key]}")
    kb = load_knowledge_base(path["problems"], path["concepts"])
    events = load_events(path["events"], n_problems=kb.n_problems)
    roles = load_roles(path["roles"])
    behaviors = load_behaviors(path["behaviors"]) if os.path.exists(path["behaviors"]) else []
    return kb, events, roles, behaviors


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
