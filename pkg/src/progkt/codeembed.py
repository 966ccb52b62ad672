"""Code embeddings from a supervised verdict classifier.

Pipeline: lex raw submissions, pre-train token vectors with skip-gram, train a
TextCNN (or mean-pool) classifier on judge verdicts, then read the tanh
projection that feeds the class layer as the per-submission embedding.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import numkernel as nk
from .datamodel import ConfigError, DataError, FormatError, Verdict, correctness
from .sgns import train_sgns

PAD, UNK = 0, 1
FORMAT_VERSION = 1

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*|/\*(?:.|\n)*?(?:\*/|\Z))
  | (?P<str>"(?:\\.|[^"\\\n])*(?:"|$))
  | (?P<chr>'(?:\\.|[^'\\\n])*(?:'|$))
  | (?P<num>\.?\d(?:[eEpP][+-]|[\w.])*)
  | (?P<ident>[A-Za-z_]\w*)
  | (?P<op>>>=|<<=|->\*?|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||[-+*/%&|^]=|::|\#\#|\.\.\.)
  | (?P<other>.)
""", re.VERBOSE | re.MULTILINE | re.DOTALL)

_SENTINEL = {"str": "<STR>", "chr": "<CHR>", "num": "<NUM>"}


def tokenize(code) -> list:
    """Split C/C++-like source into tokens. Never raises: unterminated literals
    and stray bytes still produce tokens."""
    if isinstance(code, bytes):
        code = code.decode("utf-8", errors="replace")
    out = []
    for m in _TOKEN_RE.finditer(code):
        kind = m.lastgroup
        if kind in ("ws", "comment"):
            continue
        out.append(_SENTINEL.get(kind, m.group()))
    return out


class TokenVocab:
    def __init__(self, tokens, min_freq=1):
        self.min_freq = min_freq
        self.itos = ["<PAD>", "<UNK>"] + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, token_lists, min_freq=1):
        counts = Counter(t for toks in token_lists for t in toks)
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept, min_freq)

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens, max_len=None):
        ids = [self.stoi.get(t, UNK) for t in tokens]
        if max_len is None:
            return ids
        ids = ids[:max_len]
        return ids + [PAD] * (max_len - len(ids))

    def encode_batch(self, token_lists, max_len):
        return np.array([self.encode(t, max_len) for t in token_lists], dtype=np.int64)


@dataclass
class CodeConfig:
    token_dim: int = 100
    code_dim: int = 128
    encoder: str = "cnn"
    widths: tuple = (3, 4, 5)
    n_filters: int = 32
    max_len: int = 256
    min_freq: int = 1
    n_classes: int = 9
    batch_size: int = 512
    lr: float = 5e-4
    epochs: int = 10
    holdout: float = 0.2
    sg_window: int = 5
    sg_negatives: int = 5
    sg_epochs: int = 3
    sg_lr: float = 1.0
    sg_max_pairs: int = 400_000

    def validate(self):
        if self.n_classes not in (2, 9):
            raise ConfigError("n_classes must be 2 or 9")
        if self.encoder not in ("cnn", "mean"):
            raise ConfigError("encoder must be 'cnn' or 'mean'")
        if self.code_dim <= 0 or self.token_dim <= 0:
            raise ConfigError("embedding sizes must be positive")
        if self.encoder == "cnn" and max(self.widths) > self.max_len:
            raise ConfigError("conv width exceeds max code length")


def labels_for(verdicts, n_classes):
    """Class index per verdict; 2-class mode collapses all errors to 0."""
    if n_classes == 9:
        return np.array([int(Verdict(v)) for v in verdicts], dtype=np.int64)
    return np.array([correctness(v) for v in verdicts], dtype=np.int64)


def pretrain_token_embeddings(corpus, vocab_size, dim=100, window=5, negatives=5,
                              epochs=3, lr=1.0, seed=0, max_pairs=None):
    """Skip-gram vectors for every vocabulary id. ``corpus`` is a list of id
    sequences (padding is ignored)."""
    seqs = [[i for i in seq if i != PAD] for seq in corpus]
    seqs = [s for s in seqs if len(s) > 1]
    if not seqs:
        raise DataError("empty corpus: no sequence with at least two tokens")
    w_in, _ = train_sgns(seqs, vocab_size, dim=dim, window=window, negatives=negatives,
                         epochs=epochs, lr=lr, seed=seed, ignore=(PAD,), max_pairs=max_pairs)
    w_in[PAD] = 0.0
    return w_in


# ---------------------------------------------------------------- classifier

def init_classifier(cfg: CodeConfig, vocab_size, rng, token_vectors=None):
    p = {}
    if token_vectors is None:
        emb = rng.normal(0.0, 0.1, size=(vocab_size, cfg.token_dim))
    else:
        # keep the skip-gram geometry but match the random-init scale, otherwise
        # Adam steps are tiny relative to the vectors and the filters barely move
        emb = np.array(token_vectors, dtype=float)
        rms = np.sqrt(np.mean(emb[1:] ** 2)) if len(emb) > 1 else 0.0
        if rms > 0:
            emb *= 0.1 / rms
    emb[PAD] = 0.0
    p["emb"] = nk.Tensor(emb, requires_grad=True, name="emb")
    if cfg.encoder == "cnn":
        for w in cfg.widths:
            fan = w * cfg.token_dim
            p[f"conv{w}_W"] = nk.uniform_init(rng, (fan, cfg.n_filters), fan)
            p[f"conv{w}_b"] = nk.uniform_init(rng, (cfg.n_filters,), fan)
        feat = cfg.n_filters * len(cfg.widths)
    else:
        feat = cfg.token_dim
    p["proj_W"] = nk.uniform_init(rng, (cfg.code_dim, feat), feat)
    p["proj_b"] = nk.uniform_init(rng, (cfg.code_dim,), feat)
    p["out_W"] = nk.uniform_init(rng, (cfg.n_classes, cfg.code_dim), cfg.code_dim)
    p["out_b"] = nk.uniform_init(rng, (cfg.n_classes,), cfg.code_dim)
    for k, t in p.items():
        t.name = k
    return p


def encode(params, ids, cfg: CodeConfig):
    """Code embeddings (n, code_dim) for padded token ids (n, T), on the tape."""
    ids = np.asarray(ids, dtype=np.int64)
    lengths = (ids != PAD).sum(axis=1)
    # trailing all-pad columns are masked out below anyway; drop them for speed
    keep = max(int(lengths.max(initial=0)), max(cfg.widths) if cfg.encoder == "cnn" else 1)
    ids = ids[:, :keep]
    x = nk.gather_rows(params["emb"], ids)
    # padding rows contribute nothing, whatever the table holds
    x = x * (ids != PAD)[..., None].astype(float)
    if cfg.encoder == "cnn":
        pooled = []
        for w in cfg.widths:
            act = nk.leaky_relu(nk.conv1d(x, params[f"conv{w}_W"], params[f"conv{w}_b"], w), 0.0)
            n_valid = np.maximum(lengths - w + 1, 1)
            valid = np.arange(act.shape[1])[None, :] < n_valid[:, None]
            act = act + np.where(valid, 0.0, -1e9)[..., None]
            pooled.append(nk.max_(act, axis=1))
        feat = nk.concat(pooled, axis=-1)
    else:
        feat = x.sum(axis=1) * (1.0 / np.maximum(lengths, 1))[:, None]
    return nk.tanh(feat @ params["proj_W"].T + params["proj_b"])


def logits(params, ids, cfg):
    return encode(params, ids, cfg) @ params["out_W"].T + params["out_b"]


def stratified_split(labels, holdout, rng):
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(np.floor(len(idx) * holdout))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


@dataclass
class ClassifierReport:
    n_classes: int
    accuracy: float
    majority_baseline: float
    n_train: int
    n_test: int
    losses: list


def train_classifier(ids, verdicts, cfg: CodeConfig, seed=0, token_vectors=None,
                     vocab_size=None):
    """Fit the verdict classifier. Returns ``(params, ClassifierReport)``."""
    cfg.validate()
    ids = np.asarray(ids, dtype=np.int64)
    y = labels_for(verdicts, cfg.n_classes)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = stratified_split(y, cfg.holdout, rng)
    missing = set(y[test_idx]) - set(y[train_idx])
    if missing:
        raise DataError(f"classes {sorted(missing)} absent from the training split")
    vocab_size = vocab_size or int(ids.max()) + 1
    params = init_classifier(cfg, vocab_size, rng, token_vectors)
    opt = nk.Adam(params.values(), lr=cfg.lr)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            opt.zero_grad()
            with nk.Tape() as tape:
                loss = nk.cross_entropy(logits(params, ids[b], cfg), y[b])
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(b)
        losses.append(total / max(len(train_idx), 1))
    report = evaluate_classifier(params, ids, y, train_idx, test_idx, cfg, losses)
    return params, report


def predict_classes(params, ids, cfg, chunk=1024):
    out = []
    for start in range(0, len(ids), chunk):
        out.append(np.argmax(logits(params, ids[start:start + chunk], cfg).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate_classifier(params, ids, y, train_idx, test_idx, cfg, losses=()):
    eval_idx = test_idx if len(test_idx) else train_idx
    pred = predict_classes(params, ids[eval_idx], cfg)
    acc = float(np.mean(pred == y[eval_idx]))
    majority = np.bincount(y[train_idx], minlength=cfg.n_classes).argmax()
    baseline = float(np.mean(y[eval_idx] == majority))
    return ClassifierReport(cfg.n_classes, acc, baseline, len(train_idx), len(test_idx), list(losses))


# ---------------------------------------------------------------- embedding tables

@dataclass
class CodeEmbeddingTable:
    """Vectors keyed by submission id (``ids`` sorted ascending)."""
    ids: np.ndarray
    vectors: np.ndarray

    @property
    def dim(self):
        return self.vectors.shape[1]

    def lookup(self, submission_ids):
        """Rows for ``submission_ids``; ids < 0 (padding) map to zero vectors."""
        sub = np.asarray(submission_ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, sub)
        pos = np.clip(pos, 0, len(self.ids) - 1)
        found = self.ids[pos] == sub
        if np.any(~found & (sub >= 0)):
            raise KeyError(f"unknown submission id {sub[~found & (sub >= 0)][0]}")
        out = self.vectors[pos]
        out[sub < 0] = 0.0
        return out

    def save(self, path):
        np.savez(path, version=FORMAT_VERSION, kind="code_embeddings", ids=self.ids,
                 vectors=self.vectors)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            _check_header(z, "code_embeddings", path)
            return cls(z["ids"].copy(), z["vectors"].copy())


def embed_codes(params, ids, cfg, submission_ids=None, chunk=512):
    """Projection activations for every submission, as a table keyed by id."""
    ids = np.asarray(ids, dtype=np.int64)
    vecs = [encode(params, ids[s:s + chunk], cfg).data for s in range(0, len(ids), chunk)]
    vecs = np.concatenate(vecs) if vecs else np.zeros((0, cfg.code_dim))
    sub = np.arange(len(ids)) if submission_ids is None else np.asarray(submission_ids, np.int64)
    order = np.argsort(sub, kind="stable")
    return CodeEmbeddingTable(sub[order], vecs[order])


def mean_pooled_vectors(token_vectors, ids, submission_ids=None):
    """Unsupervised baseline: average of skip-gram vectors over non-pad tokens."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = (ids != PAD)[..., None]
    vecs = (token_vectors[ids] * mask).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)
    sub = np.arange(len(ids)) if submission_ids is None else np.asarray(submission_ids, np.int64)
    order = np.argsort(sub, kind="stable")
    return CodeEmbeddingTable(sub[order], vecs[order])


# ---------------------------------------------------------------- serialisation

def _check_header(z, kind, path):
    if "version" not in z or int(z["version"]) != FORMAT_VERSION or str(z["kind"]) != kind:
        raise FormatError(f"{path}: expected {kind} format version {FORMAT_VERSION}")


def save_classifier(path, params, cfg: CodeConfig, vocab: TokenVocab):
    meta = {"config": asdict(cfg), "vocab": vocab.itos[2:], "min_freq": vocab.min_freq}
    arrays = {f"param__{k}": v.data for k, v in params.items()}
    np.savez(path, version=FORMAT_VERSION, kind="code_classifier", meta=json.dumps(meta), **arrays)


def load_classifier(path):
    with np.load(path) as z:
        _check_header(z, "code_classifier", path)
        meta = json.loads(str(z["meta"]))
        params = {k[len("param__"):]: nk.Tensor(z[k].copy(), requires_grad=True, name=k[len("param__"):])
                  for k in z.files if k.startswith("param__")}
    c = meta["config"]
    c["widths"] = tuple(c["widths"])
    cfg = CodeConfig(**c)
    vocab = TokenVocab(meta["vocab"], meta["min_freq"])
    return params, cfg, vocab
