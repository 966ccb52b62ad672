"""Problem embeddings from the problem-concept bipartite graph.

Node layout: problems occupy indices ``0..P-1``, concept ``c`` sits at ``P + c``.
Two back-ends: a trainable graph-attention stack (on the tape, trained with
the downstream loss) and frozen node2vec vectors.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .datamodel import ConfigError, IntegrityError
from .sgns import train_sgns


@dataclass
class BipartiteGraph:
    n_problems: int
    n_concepts: int
    edges: list          # (problem_id, concept_id) pairs
    adjacency: list      # node index -> sorted neighbour node indices (no self-loops)

    @property
    def n_nodes(self):
        return self.n_problems + self.n_concepts

    def concept_node(self, c):
        return self.n_problems + c

    def attention_mask(self):
        """Dense N x N boolean neighbourhood with self-loops."""
        m = np.eye(self.n_nodes, dtype=bool)
        for i, nbrs in enumerate(self.adjacency):
            m[i, nbrs] = True
        return m


def build_graph(problems, concepts) -> BipartiteGraph:
    n_p, n_c = len(problems), len(concepts)
    adjacency = [set() for _ in range(n_p + n_c)]
    edges = []
    for prob in problems:
        if not prob.concept_ids:
            raise IntegrityError(f"problem {prob.id} has no concepts")
        for c in sorted(set(prob.concept_ids)):
            u, v = prob.id, n_p + c
            # bipartite by construction: one endpoint in each block
            assert u < n_p <= v < n_p + n_c
            edges.append((prob.id, c))
            adjacency[u].add(v)
            adjacency[v].add(u)
    return BipartiteGraph(n_p, n_c, edges, [sorted(a) for a in adjacency])


def graph_distance(graph, src, dst):
    """Unweighted shortest-path length between two node indices (None if disconnected)."""
    seen = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in graph.adjacency[u]:
                if v not in seen:
                    seen[v] = seen[u] + 1
                    nxt.append(v)
        frontier = nxt
    return seen.get(dst)


# ---------------------------------------------------------------- graph attention

@dataclass
class GraphConfig:
    in_dim: int = 64
    hidden_dim: int = 64
    out_dim: int = 256
    n_layers: int = 2
    slope: float = 0.2
    features: str = "free"      # "free" (learned) or "text" (hashed bag of words, fixed)
    freeze: bool = False

    def dims(self):
        return [self.in_dim] + [self.hidden_dim] * (self.n_layers - 1) + [self.out_dim]


def hashed_text_features(texts, dim):
    """Signed feature hashing of lower-cased word tokens, L2-normalised per row."""
    out = np.zeros((len(texts), dim))
    for i, text in enumerate(texts):
        for word in re.findall(r"\w+", text.lower()):
            h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little")
            out[i, h % dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(out[i])
        if norm > 0:
            out[i] /= norm
    return out


def init_gat(graph, cfg: GraphConfig, rng, texts=None):
    if cfg.n_layers < 1:
        raise ConfigError("need at least one attention layer")
    p = {}
    if cfg.features == "text":
        if texts is None or len(texts) != graph.n_nodes:
            raise ConfigError("text features need one text per node")
        p["X"] = nk.Tensor(hashed_text_features(texts, cfg.in_dim), requires_grad=False, name="X")
    elif cfg.features == "free":
        p["X"] = nk.Tensor(rng.normal(0.0, 1.0, size=(graph.n_nodes, cfg.in_dim)),
                           requires_grad=True, name="X")
    else:
        raise ConfigError(f"unknown node features {cfg.features!r}")
    dims = cfg.dims()
    for layer in range(cfg.n_layers):
        d_in, d_out = dims[layer], dims[layer + 1]
        p[f"W{layer}"] = nk.uniform_init(rng, (d_in, d_out), d_in)
        p[f"a_dst{layer}"] = nk.uniform_init(rng, (d_out, 1), 2 * d_out)
        p[f"a_src{layer}"] = nk.uniform_init(rng, (d_out, 1), 2 * d_out)
    for k, t in p.items():
        t.name = k
        if cfg.freeze:
            t.requires_grad = False
    return p


def gat_nodes(graph, params, cfg: GraphConfig, mask=None, return_attention=False):
    """Output features for every node, shape (N, out_dim).

    Per layer: e_ij = LeakyReLU(a_dst . W x_i + a_src . W x_j) over j in N(i) + {i},
    alpha = softmax_j(e_ij), x_i' = act(sum_j alpha_ij W x_j); act is tanh on
    hidden layers and identity on the last one.
    """
    if mask is None:
        mask = graph.attention_mask()
    x = params["X"]
    attn = []
    for layer in range(cfg.n_layers):
        h = x @ params[f"W{layer}"]
        dst = h @ params[f"a_dst{layer}"]           # (N, 1)
        src = (h @ params[f"a_src{layer}"]).T       # (1, N)
        e = nk.leaky_relu(dst + src, cfg.slope)
        alpha = nk.softmax(e, axis=1, mask=mask)
        x = alpha @ h
        if layer < cfg.n_layers - 1:
            x = nk.tanh(x)
        attn.append(alpha.data)
    return (x, attn) if return_attention else x


def gat_forward(graph, params, cfg: GraphConfig, mask=None):
    """Problem embedding table (P, out_dim), differentiable."""
    return gat_nodes(graph, params, cfg, mask)[: graph.n_problems]


def pretrain_edges(graph, params, cfg: GraphConfig, epochs=50, lr=1e-2, seed=0):
    """Optional warm-up: score problem-concept pairs with sigmoid(z_p . z_c),
    pushing observed edges up and an equal number of sampled non-edges down."""
    rng = np.random.default_rng(seed)
    trainable = [t for t in params.values() if t.requires_grad]
    opt = nk.Adam(trainable, lr=lr)
    mask = graph.attention_mask()
    pos = np.array([(p, graph.concept_node(c)) for p, c in graph.edges])
    linked = set(map(tuple, pos.tolist()))
    losses = []
    for _ in range(epochs):
        neg = []
        while len(neg) < len(pos):
            p = int(rng.integers(graph.n_problems))
            c = graph.concept_node(int(rng.integers(graph.n_concepts)))
            if (p, c) not in linked:
                neg.append((p, c))
            if len(linked) >= graph.n_problems * graph.n_concepts:
                break
        pairs = np.concatenate([pos, np.array(neg, dtype=np.int64).reshape(-1, 2)])
        target = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        opt.zero_grad()
        with nk.Tape() as tape:
            z = gat_nodes(graph, params, cfg, mask)
            score = (nk.gather_rows(z, pairs[:, 0]) * nk.gather_rows(z, pairs[:, 1])).sum(axis=1)
            loss = nk.bce_loss(nk.sigmoid(score), target) * (1.0 / len(target))
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


# ---------------------------------------------------------------- node2vec

@dataclass
class WalkConfig:
    walks_per_node: int = 10
    walk_length: int = 20
    window: int = 5
    negatives: int = 5
    p: float = 1.0
    q: float = 1.0
    dim: int = 256
    epochs: int = 5
    lr: float = 1.0

    def validate(self):
        if self.p <= 0 or self.q <= 0:
            raise ConfigError("node2vec p and q must be positive")
        if self.walks_per_node < 1 or self.walk_length < 2 or self.window < 1:
            raise ConfigError("need walks_per_node >= 1, walk_length >= 2, window >= 1")


def random_walks(graph, cfg: WalkConfig, seed):
    """Second-order biased walks: from v having arrived from t, step to x with
    weight 1/p if x == t, 1 if x neighbours t, else 1/q."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    adj = graph.adjacency
    adj_sets = [set(a) for a in adj]
    walks = []
    for _ in range(cfg.walks_per_node):
        for start in rng.permutation(graph.n_nodes):
            start = int(start)
            if not adj[start]:
                continue
            walk = [start, int(adj[start][rng.integers(len(adj[start]))])]
            while len(walk) < cfg.walk_length:
                prev, cur = walk[-2], walk[-1]
                nbrs = adj[cur]
                w = np.array([1.0 / cfg.p if x == prev else (1.0 if x in adj_sets[prev] else 1.0 / cfg.q)
                              for x in nbrs])
                walk.append(int(nbrs[rng.choice(len(nbrs), p=w / w.sum())]))
            walks.append(walk)
    return walks


def node2vec_embed(graph, cfg: WalkConfig, seed=0):
    """Frozen (P, dim) problem vectors from skip-gram over biased random walks."""
    walks = random_walks(graph, cfg, seed)
    w_in, _ = train_sgns(walks, graph.n_nodes, dim=cfg.dim, window=cfg.window,
                         negatives=cfg.negatives, epochs=cfg.epochs, lr=cfg.lr, seed=seed)
    return w_in[: graph.n_problems].copy()


# ---------------------------------------------------------------- export

def export_embeddings(table, path):
    with open(path, "w", encoding="utf-8") as fh:
        for pid, vec in enumerate(np.asarray(table)):
            fh.write(str(pid) + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def import_embeddings(path):
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                rows[int(parts[0])] = np.array([float(v) for v in parts[1:]])
    return np.stack([rows[i] for i in range(len(rows))])
