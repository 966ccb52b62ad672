"""Double-sequence model: two tanh RNNs (problem and code histories), decayed
attention keyed on the upcoming problem, and a sigmoid head.

Shapes follow the column-vector convention of the update rules,
``g_k = tanh(b_g + W_g g_{k-1} + U_g x_k)``, so ``U_g`` is
``hidden x input``; batched code multiplies row vectors by the transpose.

Two ways of applying the decay ``exp(-lam * D)`` to the similarity row ``S``:

* ``"shift"`` (default): ``softmax(S - lam * D)``, i.e. every softmax term
  ``exp(S_k)`` is multiplied by ``exp(-lam * D_k)``. Large ``lam`` collapses
  onto the most recent state.
* ``"scale"``: ``softmax(exp(-lam * D) * S)``, the similarity itself is
  multiplied elementwise. Large ``lam`` sends old logits to 0 rather than to
  -inf, so it does not collapse onto the last step.

With attention disabled the similarity is ignored and the weights are
``softmax(-lam * D)`` (shift) or ``softmax(exp(-lam * D))`` (scale).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import numkernel as nk
from .datamodel import ConfigError, DataError, FormatError

FORMAT_VERSION = 1


@dataclass
class DsmConfig:
    problem_dim: int = 256
    code_dim: int = 128
    hidden_dim: int = 128
    fusion_dim: int = 0          # 0 -> same as hidden_dim
    decay: float = 0.6
    attention: bool = True
    decay_form: str = "shift"
    past_response: bool = True
    literal_recurrence: bool = False
    use_problem: bool = True
    use_code: bool = True
    query_activation: str = "tanh"

    def validate(self):
        if self.decay < 0:
            raise ConfigError("decay must be >= 0")
        if self.decay_form not in ("shift", "scale"):
            raise ConfigError("decay_form must be 'shift' or 'scale'")
        if not (self.use_problem or self.use_code):
            raise ConfigError("at least one branch must be enabled")
        if self.literal_recurrence and not (self.use_problem and self.use_code):
            raise ConfigError("literal recurrence couples both branches")
        if self.query_activation not in ("tanh", "linear"):
            raise ConfigError("query_activation must be 'tanh' or 'linear'")

    @property
    def fusion(self):
        return self.fusion_dim or self.hidden_dim

    @property
    def problem_input_dim(self):
        return self.problem_dim + (1 if self.past_response else 0)


def init_params(cfg: DsmConfig, rng):
    cfg.validate()
    hd, f = cfg.hidden_dim, cfg.fusion
    p = {}

    def lin(name, out_dim, in_dim):
        p[name + "_W"] = nk.uniform_init(rng, (out_dim, in_dim), in_dim)
        p[name + "_b"] = nk.uniform_init(rng, (out_dim,), in_dim)

    head_in = 0
    if cfg.use_problem:
        p["W_g"] = nk.uniform_init(rng, (hd, hd), hd)
        p["U_g"] = nk.uniform_init(rng, (hd, cfg.problem_input_dim), cfg.problem_input_dim)
        p["b_g"] = nk.uniform_init(rng, (hd,), cfg.problem_input_dim)
        lin("query_g", hd, cfg.problem_dim)
        lin("fuse_g", f, hd + cfg.problem_dim)
        head_in += f
    if cfg.use_code:
        p["W_h"] = nk.uniform_init(rng, (hd, hd), hd)
        p["U_h"] = nk.uniform_init(rng, (hd, cfg.code_dim), cfg.code_dim)
        p["b_h"] = nk.uniform_init(rng, (hd,), cfg.code_dim)
        if cfg.use_problem:
            lin("query_h", hd, cfg.problem_dim)
            lin("fuse_h", f, hd + cfg.problem_dim)
        else:
            # no problem vector at all: a learned constant query, and the head sees O_h only
            p["query_h_b"] = nk.uniform_init(rng, (hd,), hd)
            lin("fuse_h", f, hd)
        head_in += f
    lin("out", 1, head_in)
    for k, t in p.items():
        t.name = k
    return p


# ---------------------------------------------------------------- single-step operations

def rnn_step(params, branch, prev, x, other_prev=None):
    """One recurrence step for ``branch`` in {"g", "h"}; ``prev`` and ``x`` are 1 x n rows.

    ``other_prev`` (the code state) replaces ``prev`` in the problem update under
    the literal cross-coupled reading.
    """
    w, u, b = params["W_" + branch], params["U_" + branch], params["b_" + branch]
    if x.shape[-1] != u.shape[1] or prev.shape[-1] != w.shape[1]:
        raise nk.DimensionError(f"rnn_step: state {prev.shape}, input {x.shape}, U {u.shape}")
    carried = prev if other_prev is None else other_prev
    return nk.tanh(b + carried @ w.T + x @ u.T)


def query(params, branch, p_t, cfg):
    key = "query_" + branch
    if key + "_W" not in params:
        q = params[key + "_b"]
        q = q.reshape((1,) * (p_t.ndim - 1) + (q.shape[0],)) if p_t is not None else q.reshape(1, -1)
    else:
        q = p_t @ params[key + "_W"].T + params[key + "_b"]
    return nk.tanh(q) if cfg.query_activation == "tanh" else q


def similarity(q, states):
    """Dot products of the projected query (1 x H) with each history row (n x H)."""
    if states.shape[0] < 1:
        raise nk.ContractError("similarity needs at least one history step (t >= 2)")
    return q @ states.T


def step_differences(t):
    """D = [t-2, ..., 1, 0] for 1-based prediction step ``t``."""
    if t < 2:
        raise nk.ContractError("no history before step 1")
    return np.arange(t - 2, -1, -1, dtype=float)


def decay_logits(s, d, lam, attention=True, form="shift"):
    if form == "shift":
        return s - lam * d if attention else nk.Tensor(-lam * d)
    decay = np.exp(-lam * d)
    return s * decay if attention else nk.Tensor(decay)


def decay_attention(s, lam, attention=True, form="shift"):
    """Attention row over history for a 1 x (t-1) similarity row."""
    d = step_differences(s.shape[-1] + 1)
    logits = decay_logits(s, d[None, :], lam, attention, form)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return nk.softmax_row(logits)


def aggregate(a, states):
    """Convex combination sum_k a_k * state_k -> 1 x H."""
    return a @ states


def predict(params, o_g, o_h, p_t, cfg):
    parts = []
    if cfg.use_code:
        x = nk.concat([o_h, p_t], axis=-1) if cfg.use_problem else o_h
        parts.append(nk.tanh(x @ params["fuse_h_W"].T + params["fuse_h_b"]))
    if cfg.use_problem:
        x = nk.concat([o_g, p_t], axis=-1)
        parts.append(nk.tanh(x @ params["fuse_g_W"].T + params["fuse_g_b"]))
    z = nk.concat(parts, axis=-1) @ params["out_W"].T + params["out_b"]
    return nk.sigmoid(z)


def reference_predictions(params, problems, responses, codes, cfg):
    """Step-by-step forward for one sequence, written with the single-step ops.

    ``problems`` (L, d1) Tensor, ``responses`` (L,), ``codes`` (L, d0) Tensor.
    Returns predictions for steps 2..L (0-based positions 1..L-1) as a list of
    1 x 1 tensors. Used as an oracle for the batched forward.
    """
    n = problems.shape[0]
    hd = cfg.hidden_dim
    r = np.asarray(responses, float).reshape(-1, 1)
    g_prev = h_prev = nk.Tensor(np.zeros((1, hd)))
    g_states, h_states = [], []
    out = []
    for k in range(n):
        if k >= 1:
            p_t = problems[k:k + 1]
            o_g = o_h = None
            if cfg.use_problem:
                a_g = decay_attention(similarity(query(params, "g", p_t, cfg), nk.concat(g_states, 0)),
                                      cfg.decay, cfg.attention, cfg.decay_form)
                o_g = aggregate(a_g, nk.concat(g_states, 0))
            if cfg.use_code:
                q_in = p_t if cfg.use_problem else None
                a_h = decay_attention(similarity(query(params, "h", q_in, cfg), nk.concat(h_states, 0)),
                                      cfg.decay, cfg.attention, cfg.decay_form)
                o_h = aggregate(a_h, nk.concat(h_states, 0))
            out.append(predict(params, o_g, o_h, p_t, cfg))
        h_new = None
        if cfg.use_code:
            h_new = rnn_step(params, "h", h_prev, codes[k:k + 1])
        if cfg.use_problem:
            x = problems[k:k + 1]
            if cfg.past_response:
                x = nk.concat([x, nk.Tensor(r[k:k + 1])], axis=-1)
            other = h_prev if cfg.literal_recurrence else None
            g_prev = rnn_step(params, "g", g_prev, x, other_prev=other)
            g_states.append(g_prev)
        if cfg.use_code:
            h_prev = h_new
            h_states.append(h_prev)
    return out


# ---------------------------------------------------------------- batched forward

def causal_structure(length):
    """Mask (t, k) valid iff k < t, and step differences D[t, k] = t - 1 - k (0 elsewhere)."""
    t = np.arange(length)[:, None]
    k = np.arange(length)[None, :]
    causal = k < t
    return causal, np.where(causal, t - 1 - k, 0).astype(float)


def _attend(q, states, causal, dmat, cfg, return_weights=False):
    if cfg.attention:
        s = q @ nk.swapaxes(states, -1, -2)          # (B, L, L)
        logits = decay_logits(s, dmat, cfg.decay, True, cfg.decay_form)
    else:
        logits = decay_logits(None, dmat, cfg.decay, False, cfg.decay_form)
    a = nk.softmax(logits, axis=-1, mask=causal)
    o = a @ states
    return (o, a) if return_weights else o


def forward_sequence(params, problems, responses, codes, mask, cfg: DsmConfig,
                     return_attention=False):
    """Predictions for every position of a batch of windows plus the masked BCE loss.

    problems: (B, L, d1) Tensor; responses: (B, L) 0/1 array; codes: (B, L, d0)
    Tensor; mask: (B, L) valid events. Position t is predicted from positions
    < t and the problem at t only. Returns ``(pred (B, L) Tensor, loss)``;
    position 0 and padded positions are excluded from the loss.
    """
    mask = np.asarray(mask, bool)
    target_mask = mask.copy()
    target_mask[:, 0] = False
    if not target_mask.any():
        raise DataError("batch has no predictable step (all padding or single-step windows)")
    resp = np.asarray(responses, float)
    n, length = resp.shape
    causal, dmat = causal_structure(length)

    o_g = o_h = states_h = None
    weights = {}
    if cfg.use_code:
        pre_h = codes @ params["U_h"].T + params["b_h"]
        states_h = nk.tanh_recurrence(pre_h, params["W_h"])
    if cfg.use_problem:
        x = nk.concat([problems, nk.Tensor(resp[..., None])], axis=-1) if cfg.past_response else problems
        pre_g = x @ params["U_g"].T + params["b_g"]
        if cfg.literal_recurrence:
            shifted = nk.concat([nk.Tensor(np.zeros((n, 1, cfg.hidden_dim))), states_h[:, :-1]], axis=1)
            states_g = nk.tanh(pre_g + shifted @ params["W_g"].T)
        else:
            states_g = nk.tanh_recurrence(pre_g, params["W_g"])
        q_g = query(params, "g", problems, cfg)
        o_g, weights["g"] = _attend(q_g, states_g, causal, dmat, cfg, True)
    if cfg.use_code:
        q_h = query(params, "h", problems if cfg.use_problem else None, cfg)
        if not cfg.use_problem:
            q_h = q_h.reshape(1, 1, -1)
        o_h, weights["h"] = _attend(q_h, states_h, causal, dmat, cfg, True)

    pred = predict(params, o_g, o_h, problems, cfg).reshape(n, length)
    loss = nk.bce_loss(pred, resp, target_mask)
    if return_attention:
        return pred, loss, weights
    return pred, loss


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, cfg: DsmConfig, extra=None):
    meta = {"dsm_config": asdict(cfg), "extra": extra or {}}
    arrays = {f"param__{k}": v.data for k, v in params.items()}
    np.savez(path, version=FORMAT_VERSION, kind="dsm_checkpoint", meta=json.dumps(meta, sort_keys=True),
             **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        if "version" not in z or int(z["version"]) != FORMAT_VERSION or str(z["kind"]) != "dsm_checkpoint":
            raise FormatError(f"{path}: not a version-{FORMAT_VERSION} model checkpoint")
        meta = json.loads(str(z["meta"]))
        arrays = {k[len("param__"):]: z[k].copy() for k in z.files if k.startswith("param__")}
    return arrays, DsmConfig(**meta["dsm_config"]), meta["extra"]
