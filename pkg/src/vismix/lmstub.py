"""Projector and a minimal language-model stand-in.

The projector is a two-layer tanh perceptron applied per token. The LM stub
mean-pools the projected visual tokens, adds a learned task embedding, and
classifies into a shared answer vocabulary, which is enough differentiable
text-side supervision to drive every training stage.
"""

from dataclasses import dataclass

import numpy as np

from .fusion import TokenSequence
from .tensorlab import GradCase, contract, register_op


@dataclass
class ProjectorParams:
    """y = tanh(x @ w1) @ w2, mapping token dim -> hidden -> lm dim."""

    w1: np.ndarray
    w2: np.ndarray

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def lm_dim(self):
        return self.w2.shape[1]


@dataclass
class LMStubParams:
    task_emb: np.ndarray   # (n_tasks, lm_dim)
    head: np.ndarray       # (lm_dim, vocab)

    @property
    def n_tasks(self):
        return self.task_emb.shape[0]

    @property
    def vocab(self):
        return self.head.shape[1]


def init_projector(in_dim, hidden, lm_dim, seed) -> ProjectorParams:
    rng = np.random.default_rng([seed, 0x11])
    s1 = 1.0 / np.sqrt(in_dim)
    s2 = 1.0 / np.sqrt(hidden)
    return ProjectorParams(w1=rng.uniform(-s1, s1, size=(in_dim, hidden)),
                           w2=rng.uniform(-s2, s2, size=(hidden, lm_dim)))


def init_lm(n_tasks, lm_dim, vocab, seed) -> LMStubParams:
    rng = np.random.default_rng([seed, 0x12])
    s = 1.0 / np.sqrt(lm_dim)
    return LMStubParams(task_emb=rng.uniform(-s, s, size=(n_tasks, lm_dim)),
                        head=rng.uniform(-s, s, size=(lm_dim, vocab)))


# ---------------------------------------------------------------------------
# batched forward/backward


def proj_fwd(tokens, w1, w2):
    t = np.tanh(tokens @ w1)
    return t @ w2, (tokens, t, w1, w2)


def proj_bwd(cache, grad):
    tokens, t, w1, w2 = cache
    dw2 = np.einsum("nth,ntd->hd", t, grad) if grad.ndim == 3 else t.T @ grad
    dt = grad @ w2.T
    du = dt * (1.0 - t * t)
    dw1 = (np.einsum("ntd,nth->dh", tokens, du) if grad.ndim == 3
           else tokens.T @ du)
    return du @ w1.T, dw1, dw2


def lm_fwd(visual, task_ids, task_emb, head):
    pooled = visual.mean(axis=1)
    u = pooled + task_emb[task_ids]
    t = np.tanh(u)
    logits = t @ head
    return logits, (visual.shape[1], task_ids, t, head, task_emb.shape[0])


def lm_bwd(cache, grad_logits):
    n_tokens, task_ids, t, head, n_tasks = cache
    dhead = t.T @ grad_logits
    dt = grad_logits @ head.T
    du = dt * (1.0 - t * t)
    dtask = np.zeros((n_tasks, t.shape[1]))
    np.add.at(dtask, task_ids, du)
    dvisual = np.repeat(du[:, None, :] / n_tokens, n_tokens, axis=1)
    return dvisual, dtask, dhead


def ce_fwd(logits, answers):
    """Mean cross-entropy over a batch, stable log-sum-exp."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    nll = -logp[np.arange(n), answers]
    probs = np.exp(logp)
    return float(nll.mean()), (probs, answers)


def ce_bwd(cache):
    probs, answers = cache
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), answers] -= 1.0
    return grad / n


# ---------------------------------------------------------------------------
# public ops


def project(tokens: TokenSequence, p: ProjectorParams) -> TokenSequence:
    """Map a visual stream into the LM embedding space, per token."""
    if tokens.dim != p.in_dim:
        raise ValueError(
            f"projector expects dim {p.in_dim}, got tokens of dim {tokens.dim}")
    out, _ = proj_fwd(tokens.data[None], p.w1, p.w2)
    return TokenSequence(out[0])


def lm_forward(visual: TokenSequence, task: int, p: LMStubParams) -> np.ndarray:
    """Logits over the answer vocabulary for one sample."""
    if not 0 <= task < p.n_tasks:
        raise KeyError(f"task id {task} outside table of {p.n_tasks} tasks")
    logits, _ = lm_fwd(visual.data[None], np.array([task]), p.task_emb, p.head)
    return logits[0]


def loss(logits: np.ndarray, answer: int) -> float:
    """Cross-entropy of one logits vector against the answer class."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= answer < logits.shape[0]:
        raise ValueError(
            f"answer {answer} outside vocabulary of {logits.shape[0]}")
    value, _ = ce_fwd(logits[None], np.array([answer]))
    return value


def loss_grad(logits: np.ndarray, answer: int) -> np.ndarray:
    _, cache = ce_fwd(np.asarray(logits, dtype=np.float64)[None],
                      np.array([answer]))
    return ce_bwd(cache)[0]


# ---------------------------------------------------------------------------
# gradient-check cases


def _project_case(seed):
    rng = np.random.default_rng([seed, 20])
    arrays = {
        "x": rng.normal(size=(1, 5, 4)),
        "w1": rng.normal(size=(4, 6)),
        "w2": rng.normal(size=(6, 3)),
    }
    probe = rng.normal(size=(1, 5, 3))

    def fwd(a):
        return proj_fwd(a["x"], a["w1"], a["w2"])

    def loss_fn(a):
        return contract(fwd(a)[0], probe)

    def analytic(a):
        _, cache = fwd(a)
        dx, dw1, dw2 = proj_bwd(cache, probe)
        return {"x": dx, "w1": dw1, "w2": dw2}

    return GradCase(arrays, loss_fn, analytic)


def _lm_case(seed):
    rng = np.random.default_rng([seed, 21])
    arrays = {
        "visual": rng.normal(size=(2, 4, 5)),
        "task_emb": rng.normal(size=(3, 5)),
        "head": rng.normal(size=(5, 7)),
    }
    tasks = np.array([0, 2])
    probe = rng.normal(size=(2, 7))

    def loss_fn(a):
        logits, _ = lm_fwd(a["visual"], tasks, a["task_emb"], a["head"])
        return contract(logits, probe)

    def analytic(a):
        _, cache = lm_fwd(a["visual"], tasks, a["task_emb"], a["head"])
        dv, dtask, dhead = lm_bwd(cache, probe)
        full_dtask = np.zeros_like(a["task_emb"])
        full_dtask[:dtask.shape[0]] = dtask
        return {"visual": dv, "task_emb": full_dtask, "head": dhead}

    return GradCase(arrays, loss_fn, analytic)


def _loss_case(seed):
    rng = np.random.default_rng([seed, 22])
    arrays = {"logits": rng.normal(size=(3, 6))}
    answers = np.array([1, 5, 0])

    def loss_fn(a):
        return ce_fwd(a["logits"], answers)[0]

    def analytic(a):
        _, cache = ce_fwd(a["logits"], answers)
        return {"logits": ce_bwd(cache)}

    return GradCase(arrays, loss_fn, analytic)


register_op("project", _project_case)
register_op("lm_forward", _lm_case)
register_op("loss", _loss_case)
