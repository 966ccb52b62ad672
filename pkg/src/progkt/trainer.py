"""Data preparation, training, AUC evaluation, ablations and the decay sweep."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.stats import rankdata

from . import codeembed as ce
from . import dsm
from . import graphembed as ge
from . import numkernel as nk
from .datamodel import ConfigError, DataError, FormatError, build_sequences, window_sequences

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


def auc(predictions, labels):
    """ROC AUC via the rank-sum statistic with average ranks for ties."""
    s = np.asarray(predictions, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_bruteforce(predictions, labels):
    s = np.asarray(predictions, dtype=float)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both positive and negative labels")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


ABLATIONS = ("no_code", "no_problem", "no_classification", "node2vec",
             "literal_recurrence", "no_past_response")


@dataclass
class TrainConfig:
    # data
    window: int = 200
    test_fraction: float = 0.2
    split_seed: int = 0
    min_submissions: int = 20
    # double-sequence model
    hidden_dim: int = 128
    fusion_dim: int = 0
    decay: float = 0.6
    attention: bool = True
    decay_form: str = "shift"
    query_activation: str = "tanh"
    # problem embedding
    problem_dim: int = 256
    gat_in_dim: int = 64
    gat_hidden_dim: int = 64
    gat_layers: int = 2
    node_features: str = "free"
    freeze_problem: bool = False
    walks_per_node: int = 10
    walk_length: int = 20
    walk_window: int = 5
    walk_p: float = 1.0
    walk_q: float = 1.0
    # code embedding
    code_dim: int = 128
    token_dim: int = 100
    code_encoder: str = "cnn"
    code_filters: int = 32
    code_max_len: int = 256
    code_classes: int = 9
    code_epochs: int = 10
    code_lr: float = 5e-4
    code_batch_size: int = 512
    sg_epochs: int = 3
    sg_max_pairs: int = 400_000
    finetune_code: bool = False
    pretrain_seed: int = 0
    # optimisation
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 10
    eval_batch_size: int = 64
    seeds: tuple = (0, 1, 2, 3, 4)
    # ablation flags
    no_code: bool = False
    no_problem: bool = False
    no_classification: bool = False
    node2vec: bool = False
    literal_recurrence: bool = False
    no_past_response: bool = False

    def as_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**d)

    def dsm_config(self, code_dim=None):
        return dsm.DsmConfig(
            problem_dim=self.problem_dim, code_dim=code_dim or self.code_dim,
            hidden_dim=self.hidden_dim, fusion_dim=self.fusion_dim, decay=self.decay,
            attention=self.attention, decay_form=self.decay_form,
            past_response=not self.no_past_response, literal_recurrence=self.literal_recurrence,
            use_problem=not self.no_problem, use_code=not self.no_code,
            query_activation=self.query_activation)

    def graph_config(self):
        return ge.GraphConfig(in_dim=self.gat_in_dim, hidden_dim=self.gat_hidden_dim,
                              out_dim=self.problem_dim, n_layers=self.gat_layers,
                              features=self.node_features, freeze=self.freeze_problem)

    def walk_config(self):
        return ge.WalkConfig(walks_per_node=self.walks_per_node, walk_length=self.walk_length,
                             window=self.walk_window, p=self.walk_p, q=self.walk_q,
                             dim=self.problem_dim)

    def code_config(self):
        return ce.CodeConfig(token_dim=self.token_dim, code_dim=self.code_dim,
                             encoder=self.code_encoder, n_filters=self.code_filters,
                             max_len=self.code_max_len, n_classes=self.code_classes,
                             batch_size=self.code_batch_size, lr=self.code_lr,
                             epochs=self.code_epochs, sg_epochs=self.sg_epochs,
                             sg_max_pairs=self.sg_max_pairs)

    def variant(self, name):
        """Copy of this config with one ablation flag switched on ("full" = none)."""
        if name == "full":
            return replace(self)
        if name not in ABLATIONS:
            raise ConfigError(f"unknown variant {name!r}")
        return replace(self, **{name: True})


def split_students(user_ids, test_fraction, seed):
    users = sorted(set(user_ids))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(users))
    n_test = int(round(len(users) * test_fraction))
    test = {users[i] for i in order[:n_test]}
    return [u for u in users if u not in test], sorted(test)


class Prepared:
    """Everything that does not depend on the model seed: filtered sequences,
    student split, windows, graph, and (lazily) code and node2vec tables."""

    def __init__(self, kb, events, roles, cfg: TrainConfig):
        self.kb = kb
        self.graph = ge.build_graph(kb.problems, kb.concepts)
        self.sequences = build_sequences(events, roles, min_len=cfg.min_submissions)
        if not self.sequences:
            raise DataError("no student sequence survives filtering")
        self.train_users, self.test_users = split_students(
            [s.user_id for s in self.sequences], cfg.test_fraction, cfg.split_seed)
        train_set = set(self.train_users)
        self.train = window_sequences([s for s in self.sequences if s.user_id in train_set], cfg.window)
        self.test = window_sequences([s for s in self.sequences if s.user_id not in train_set], cfg.window)
        kept = [e for s in self.sequences for e in s.events]
        self.submission_ids = np.array([e.submission_id for e in kept], dtype=np.int64)
        self.verdicts = [e.verdict for e in kept]
        self.is_train_sub = np.array([e.user_id in train_set for e in kept])
        self._tokens = [ce.tokenize(e.code) for e in kept]
        self._cache = {}
        self.pretrain_seed = cfg.pretrain_seed

    # code side -------------------------------------------------------------
    def _code_key(self, cfg):
        c = cfg.code_config()
        return (c.token_dim, c.code_dim, c.encoder, c.n_filters, c.max_len, c.n_classes,
                c.batch_size, c.lr, c.epochs, c.sg_epochs, c.sg_max_pairs, cfg.pretrain_seed)

    def code_assets(self, cfg: TrainConfig):
        """Vocabulary, token ids, skip-gram vectors, classifier and both code tables."""
        key = ("code",) + self._code_key(cfg)
        if key in self._cache:
            return self._cache[key]
        ccfg = cfg.code_config()
        train_tokens = [t for t, keep in zip(self._tokens, self.is_train_sub) if keep]
        vocab = ce.TokenVocab.build(train_tokens, ccfg.min_freq)
        ids = vocab.encode_batch(self._tokens, ccfg.max_len)
        train_ids = ids[self.is_train_sub]
        vectors = ce.pretrain_token_embeddings(
            train_ids, len(vocab), dim=ccfg.token_dim, window=ccfg.sg_window,
            negatives=ccfg.sg_negatives, epochs=ccfg.sg_epochs, lr=ccfg.sg_lr,
            seed=cfg.pretrain_seed, max_pairs=ccfg.sg_max_pairs)
        train_verdicts = [v for v, keep in zip(self.verdicts, self.is_train_sub) if keep]
        params, report = ce.train_classifier(train_ids, train_verdicts, ccfg, seed=cfg.pretrain_seed,
                                             token_vectors=vectors, vocab_size=len(vocab))
        log.info("code classifier: %d-class held-out accuracy %.4f (majority %.4f)",
                 report.n_classes, report.accuracy, report.majority_baseline)
        assets = {
            "vocab": vocab, "ids": ids, "token_vectors": vectors, "classifier": params,
            "code_config": ccfg, "report": report,
            "supervised": ce.embed_codes(params, ids, ccfg, self.submission_ids),
            "unsupervised": ce.mean_pooled_vectors(vectors, ids, self.submission_ids),
        }
        self._cache[key] = assets
        return assets

    def code_table(self, cfg: TrainConfig):
        assets = self.code_assets(cfg)
        return assets["unsupervised" if cfg.no_classification else "supervised"]

    def set_code_assets(self, cfg, assets):
        self._cache[("code",) + self._code_key(cfg)] = assets

    def node2vec_table(self, cfg: TrainConfig):
        wcfg = cfg.walk_config()
        key = ("n2v", wcfg.walks_per_node, wcfg.walk_length, wcfg.window, wcfg.p, wcfg.q,
               wcfg.dim, cfg.pretrain_seed)
        if key not in self._cache:
            self._cache[key] = ge.node2vec_embed(self.graph, wcfg, seed=cfg.pretrain_seed)
        return self._cache[key]


@dataclass
class Model:
    cfg: TrainConfig
    dsm_cfg: dsm.DsmConfig
    dsm_params: dict
    gat_params: dict = field(default_factory=dict)
    problem_table: np.ndarray = None      # frozen node2vec vectors, if used

    def trainable(self):
        ps = list(self.dsm_params.values()) + list(self.gat_params.values())
        return [p for p in ps if p.requires_grad]


def init_model(cfg: TrainConfig, prepared: Prepared, seed):
    rng = np.random.default_rng(seed)
    code_dim = cfg.token_dim if cfg.no_classification else cfg.code_dim
    dcfg = cfg.dsm_config(code_dim=code_dim)
    gat_params, table = {}, None
    if not cfg.no_problem:
        if cfg.node2vec:
            table = prepared.node2vec_table(cfg)
        else:
            texts = [p.text for p in prepared.kb.problems] + [c.name for c in prepared.kb.concepts]
            gat_params = ge.init_gat(prepared.graph, cfg.graph_config(), rng, texts)
    return Model(cfg, dcfg, dsm.init_params(dcfg, rng), gat_params, table)


def _problem_vectors(model: Model, prepared: Prepared, problem_ids, mask):
    if model.cfg.no_problem:
        return None
    if model.problem_table is not None:
        table = nk.Tensor(model.problem_table)
    else:
        table = ge.gat_forward(prepared.graph, model.gat_params, model.cfg.graph_config(), mask)
    return nk.gather_rows(table, problem_ids)


def _code_vectors(model: Model, prepared: Prepared, submission_ids):
    if model.cfg.no_code:
        return None
    cfg = model.cfg
    if cfg.finetune_code and not cfg.no_classification:
        assets = prepared.code_assets(cfg)
        pos = np.searchsorted(prepared.submission_ids_sorted, np.maximum(submission_ids, 0))
        rows = prepared.submission_order[pos]
        flat = assets["ids"][rows.reshape(-1)]
        enc = ce.encode(assets["classifier"], flat, assets["code_config"])
        enc = enc * (submission_ids.reshape(-1) >= 0)[:, None].astype(float)
        return enc.reshape(submission_ids.shape + (enc.shape[-1],))
    return nk.Tensor(prepared.code_table(cfg).lookup(submission_ids))


def forward_windows(model: Model, prepared: Prepared, windows, graph_mask=None):
    n_valid = int(windows.mask.sum(axis=1).max())
    length = max(n_valid, 2)
    sl = slice(0, length)
    problems = _problem_vectors(model, prepared, windows.problem[:, sl], graph_mask)
    codes = _code_vectors(model, prepared, windows.submission[:, sl])
    return dsm.forward_sequence(model.dsm_params, problems, windows.response[:, sl], codes,
                                windows.mask[:, sl], model.dsm_cfg)


def predict_windows(model, prepared, windows, batch_size=64):
    """Predicted probabilities and labels at every target position, in window order."""
    graph_mask = prepared.graph.attention_mask()
    preds, labels = [], []
    for start in range(0, len(windows), batch_size):
        w = windows.subset(np.arange(start, min(start + batch_size, len(windows))))
        if not w.target_mask.any():
            continue
        pred, _ = forward_windows(model, prepared, w, graph_mask)
        tm = w.target_mask[:, : pred.shape[1]]
        preds.append(pred.data[tm])
        labels.append(w.response[:, : pred.shape[1]][tm])
    return np.concatenate(preds), np.concatenate(labels)


def evaluate(model, prepared, windows=None, batch_size=64):
    preds, labels = predict_windows(model, prepared, prepared.test if windows is None else windows,
                                    batch_size)
    return auc(preds, labels)


@dataclass
class SeedResult:
    seed: int
    auc: float
    best_auc: float
    best_epoch: int
    losses: list
    aucs: list


def train_seed(cfg: TrainConfig, prepared: Prepared, seed):
    """Train one model. Returns ``(Model, SeedResult)``; per-epoch test AUC is logged."""
    if cfg.finetune_code and not hasattr(prepared, "submission_order"):
        prepared.submission_order = np.argsort(prepared.submission_ids, kind="stable")
        prepared.submission_ids_sorted = prepared.submission_ids[prepared.submission_order]
    model = init_model(cfg, prepared, seed)
    params = model.trainable()
    if cfg.finetune_code and not (cfg.no_code or cfg.no_classification):
        params += list(prepared.code_assets(cfg)["classifier"].values())
    opt = nk.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(seed + 7919)
    graph_mask = prepared.graph.attention_mask()
    train = prepared.train
    losses, aucs = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = train.subset(order[start:start + cfg.batch_size])
            if not batch.target_mask.any():
                continue
            opt.zero_grad()
            with nk.Tape() as tape:
                _, loss = forward_windows(model, prepared, batch, graph_mask)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}, seed {seed}")
            tape.backward(loss)
            opt.step()
            total += loss.item()
            count += int(batch.target_mask.sum())
        losses.append(total / max(count, 1))
        aucs.append(evaluate(model, prepared, batch_size=cfg.eval_batch_size))
        log.info("seed %d epoch %d: loss %.4f test AUC %.4f", seed, epoch, losses[-1], aucs[-1])
    best = int(np.argmax(aucs))
    return model, SeedResult(seed, aucs[-1], aucs[best], best, losses, aucs)


@dataclass
class EvalReport:
    variant: str
    config: dict
    seeds: list
    per_seed_auc: list
    mean_auc: float
    per_seed_best_auc: list
    counts: dict
    loss_curves: list
    auc_curves: list

    def to_dict(self):
        return asdict(self)


def train(cfg: TrainConfig, prepared: Prepared, variant="custom"):
    """Train once per seed in ``cfg.seeds``. Returns ``(models, EvalReport)``."""
    models, results = [], []
    for seed in cfg.seeds:
        model, res = train_seed(cfg, prepared, seed)
        models.append(model)
        results.append(res)
    per_seed = [r.auc for r in results]
    counts = {"students": len(prepared.sequences), "train_students": len(prepared.train_users),
              "test_students": len(prepared.test_users), "train_windows": len(prepared.train),
              "test_windows": len(prepared.test),
              "test_targets": int(prepared.test.target_mask.sum())}
    report = EvalReport(variant, cfg.as_dict(), list(cfg.seeds), per_seed, float(np.mean(per_seed)),
                        [r.best_auc for r in results], counts,
                        [r.losses for r in results], [r.aucs for r in results])
    return models, report


def run_ablations(cfg: TrainConfig, prepared: Prepared, variants=("full",) + ABLATIONS):
    """Train every variant with the same seeds; returns ``{variant: EvalReport}``."""
    out = {}
    for name in variants:
        log.info("ablation variant %s", name)
        _, out[name] = train(cfg.variant(name), prepared, variant=name)
    return out


def sweep_lambda(cfg: TrainConfig, prepared: Prepared, grid=(0.0, 0.3, 0.6, 1.0, 2.0, 30.0),
                 modes=(True, False)):
    """Rows ``{"lambda", "mode", "seed", "auc"}`` for every (decay, attention mode, seed)."""
    rows = []
    for lam in grid:
        for attention in modes:
            run_cfg = replace(cfg, decay=float(lam), attention=attention)
            _, report = train(run_cfg, prepared, variant=f"lambda={lam}")
            for seed, a in zip(report.seeds, report.per_seed_auc):
                rows.append({"lambda": float(lam), "mode": "attention" if attention else "decay_only",
                             "seed": seed, "auc": a})
    return rows


def summarize_sweep(rows):
    """Mean AUC per (lambda, mode)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["lambda"], r["mode"]), []).append(r["auc"])
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


# ---------------------------------------------------------------- persistence

MODEL_VERSION = 1


def save_model(path, model: Model, seed, result: SeedResult = None):
    """One ``.npz`` holding DSM weights, graph weights (or the frozen problem
    table) and the training config."""
    meta = {"train_config": model.cfg.as_dict(), "dsm_config": asdict(model.dsm_cfg), "seed": int(seed),
            "result": asdict(result) if result is not None else None}
    arrays = {f"dsm__{k}": v.data for k, v in model.dsm_params.items()}
    arrays.update({f"gat__{k}": v.data for k, v in model.gat_params.items()})
    if model.problem_table is not None:
        arrays["problem_table"] = model.problem_table
    np.savez(path, version=MODEL_VERSION, kind="pkt_model", meta=json.dumps(meta, sort_keys=True), **arrays)


def load_model(path):
    """Returns ``(Model, meta)``."""
    with np.load(path) as z:
        if "version" not in z or int(z["version"]) != MODEL_VERSION or str(z["kind"]) != "pkt_model":
            raise FormatError(f"{path}: not a version-{MODEL_VERSION} model file")
        meta = json.loads(str(z["meta"]))
        cfg = TrainConfig.from_dict(meta["train_config"])
        dsm_params = {k[5:]: nk.Tensor(z[k].copy(), requires_grad=True, name=k[5:])
                      for k in z.files if k.startswith("dsm__")}
        gat_params = {k[5:]: nk.Tensor(z[k].copy(), requires_grad=True, name=k[5:])
                      for k in z.files if k.startswith("gat__")}
        table = z["problem_table"].copy() if "problem_table" in z.files else None
    if cfg.node_features == "text" and "X" in gat_params:
        gat_params["X"].requires_grad = False
    if cfg.freeze_problem:
        for t in gat_params.values():
            t.requires_grad = False
    return Model(cfg, dsm.DsmConfig(**meta["dsm_config"]), dsm_params, gat_params, table), meta


def save_code_assets(directory, prepared: Prepared, cfg: TrainConfig):
    """Classifier, token vectors and both code tables under ``directory``."""
    a = prepared.code_assets(cfg)
    ce.save_classifier(os.path.join(directory, CODE_FILES["classifier"]), a["classifier"],
                       a["code_config"], a["vocab"])
    np.savez(os.path.join(directory, CODE_FILES["token_vectors"]), version=ce.FORMAT_VERSION,
             kind="token_vectors", vectors=a["token_vectors"])
    a["supervised"].save(os.path.join(directory, CODE_FILES["supervised"]))
    a["unsupervised"].save(os.path.join(directory, CODE_FILES["unsupervised"]))
    return a


def load_code_assets(directory, prepared: Prepared, cfg: TrainConfig):
    path = {k: os.path.join(directory, v) for k, v in CODE_FILES.items()}
    params, ccfg, vocab = ce.load_classifier(path["classifier"])
    with np.load(path["token_vectors"]) as z:
        ce._check_header(z, "token_vectors", path["token_vectors"])
        vectors = z["vectors"].copy()
    assets = {"vocab": vocab, "ids": vocab.encode_batch(prepared._tokens, ccfg.max_len),
              "token_vectors": vectors, "classifier": params, "code_config": ccfg, "report": None,
              "supervised": ce.CodeEmbeddingTable.load(path["supervised"]),
              "unsupervised": ce.CodeEmbeddingTable.load(path["unsupervised"])}
    prepared.set_code_assets(cfg, assets)
    return assets


CODE_FILES = {"classifier": "code_classifier.npz", "token_vectors": "token_vectors.npz",
              "supervised": "code_table.npz", "unsupervised": "code_table_unsup.npz"}
