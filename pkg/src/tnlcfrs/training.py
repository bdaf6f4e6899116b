"""Maximum-likelihood training with Adam, a length curriculum and early stopping."""
from __future__ import annotations

import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .factored import precompute
from .grammar import NumericError
from .neural import (NeuralParams, build_factors, forward, load_params, on_tape,
                     save_params, xavier_init)
from .rank import rank_pass

# relative errors use max(|a|, |b|, GRAD_FLOOR) as the denominator; central
# differences at eps=1e-5 on a loss near 20 carry ~1e-9 absolute roundoff
GRAD_FLOOR = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    adam_beta1: float = 0.75
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 20
    grad_clip_norm: float = 3.0
    curriculum_start_len: int = 30
    curriculum_step: int = 5
    curriculum_max_len: int = 40
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    precision: str = "f32"
    early_stop: str = "ppl"
    bucket_by_length: bool = True
    # model size
    d: int = 512
    r1: int = 400
    r2: int = 4
    r3: int = 400
    r4: int = 4
    preterminals: int = 45
    nt1: int = 0
    nt2: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def ranks(self):
        return (self.r1, self.r2, self.r3, self.r4)

    def symbol_counts(self):
        """(m1, m2, p); zero nonterminal counts default to ceil(p / 3)."""
        third = math.ceil(self.preterminals / 3)
        return (self.nt1 or third, self.nt2 or third, self.preterminals)

    def validate(self):
        positive = ("learning_rate", "batch_size", "grad_clip_norm", "curriculum_start_len",
                    "curriculum_max_len", "max_epochs", "d", "preterminals")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.curriculum_step < 0 or self.patience < 0:
            raise ConfigError("curriculum_step and patience must be nonnegative")
        if self.patience > self.max_epochs:
            raise ConfigError("patience exceeds max_epochs")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.early_stop not in ("ppl", "f1"):
            raise ConfigError("early_stop must be ppl or f1")
        if min(self.ranks) < 0 or self.r1 == 0:
            raise ConfigError("ranks must be nonnegative with r1 > 0")

    def curriculum_len(self, epoch):
        """Length cap for 1-based ``epoch``."""
        return min(self.curriculum_start_len + self.curriculum_step * (epoch - 1),
                   self.curriculum_max_len)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _coerce(kind, raw):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ConfigError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def parse_overrides(pairs):
    """``{"key": "text"}`` -> typed TrainConfig keyword arguments."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            out[key] = _coerce(types[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return out


def read_config(path):
    """key=value lines; ``#`` starts a comment."""
    pairs = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            if key.strip() in pairs:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key.strip()!r}")
            pairs[key.strip()] = val.strip()
    return parse_overrides(pairs)


def format_config(cfg):
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# ---------------------------------------------------------------------------
# loss and gradients


@dataclass
class LossTape:
    tape: ad.Tape
    leaves: dict
    out: ad.Var

    def gradients(self):
        self.tape.backward(self.out)
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for k, v in self.leaves.items()}


def _by_length(sentences):
    groups = {}
    for idx, s in enumerate(sentences):
        groups.setdefault(len(s), []).append(idx)
    return groups


def sentence_logz(params, sentences, tape=None):
    """log Z per sentence; with ``tape`` also the tape node of their sum."""
    leaves = on_tape(params, tape) if tape is not None else params.arrays
    fg = build_factors(leaves, params.dims, params.ranks)
    ks = precompute(fg)
    logz = np.empty(len(sentences))
    total = None
    for n, idx in sorted(_by_length(sentences).items()):
        if n < 2:
            raise ValueError(f"sentence {idx[0]} has fewer than two words")
        words = np.array([sentences[i] for i in idx], dtype=np.int64)
        if words.min() < 0 or words.max() >= params.dims.v:
            raise ValueError("terminal id outside the vocabulary")
        chart = rank_pass(ks, words, tape=tape)
        logz[idx] = ad.value(chart.logZ)
        part = ad.sum(chart.logZ)
        total = part if total is None else ad.add(total, part)
    bad = np.flatnonzero(~np.isfinite(logz))
    if len(bad):
        raise NumericError(f"log Z is not finite for batch sentence {int(bad[0])}")
    return logz, total, leaves


def loss(params, batch):
    """Mean negative log-likelihood of ``batch`` and the tape that produced it."""
    if not batch:
        raise ValueError("empty batch")
    tape = ad.Tape()
    logz, total, leaves = sentence_logz(params, batch, tape)
    out = ad.mul(total, -1.0 / len(batch))
    return float(ad.value(out)), LossTape(tape, leaves, out)


def loss_and_grad(params, batch):
    value, lt = loss(params, batch)
    return value, lt.gradients()


def nll(params, sentences):
    """Per-sentence negative log-likelihoods without recording a tape."""
    logz, _, _ = sentence_logz(params, sentences)
    return -logz


def _flat_index(params, k):
    sizes = [params.arrays[n].size for n in params.names()]
    cum = np.cumsum(sizes)
    which = int(np.searchsorted(cum, k, side="right"))
    name = params.names()[which]
    local = k - (cum[which - 1] if which else 0)
    return name, np.unravel_index(local, params.arrays[name].shape)


def grad_check(params, sentence, epsilon=1e-5, probes=200, seed=0, details=False):
    """Max relative error of tape gradients against central differences.

    Relative error is ``|a - b| / max(|a|, |b|, GRAD_FLOOR)``.
    """
    if params.dtype != np.float64:
        raise ValueError("gradient checks need 64-bit parameters")
    batch = [list(sentence)] if np.ndim(sentence[0]) == 0 else [list(s) for s in sentence]
    _, grads = loss_and_grad(params, batch)
    rng = np.random.default_rng(seed)
    total = params.size()
    picks = rng.choice(total, size=min(probes, total), replace=False)
    rows = []
    for k in picks:
        name, idx = _flat_index(params, int(k))
        arr = params.arrays[name]
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up = -np.mean(nll(params, batch))
        arr[idx] = orig - epsilon
        down = -np.mean(nll(params, batch))
        arr[idx] = orig
        fd = -(up - down) / (2 * epsilon)
        an = float(grads[name][idx])
        err = abs(an - fd) / max(abs(an), abs(fd), GRAD_FLOOR)
        rows.append((name, tuple(int(i) for i in idx), an, fd, err))
    worst = max((r[4] for r in rows), default=0.0)
    return (worst, rows) if details else worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()}, 0)


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def adam_step(state, params, grads, config):
    """One bias-corrected Adam update after global-norm clipping.

    Returns new (state, params); inputs are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step refused")
    grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
    b1, b2, lr, eps = config.adam_beta1, config.adam_beta2, config.learning_rate, config.adam_eps
    t = state.t + 1
    m, v, new = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads[name].astype(p.dtype, copy=False)
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1 ** t)
        vhat = v[name] / (1 - b2 ** t)
        new[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return AdamState(m, v, t), params.replace(new)


# ---------------------------------------------------------------------------
# evaluation helpers


@dataclass
class Perplexity:
    value: float
    tokens: int
    excluded: int


def perplexity(params, corpus, batch_size=64, details=False):
    """exp(total NLL / total tokens); unparseable sentences are excluded."""
    keep = [list(s) for s in corpus if len(s) >= 2]
    excluded = len(corpus) - len(keep)
    total, tokens = 0.0, 0
    for start in range(0, len(keep), batch_size):
        chunk = keep[start:start + batch_size]
        try:
            vals = nll(params, chunk)
        except NumericError:
            vals = np.array([_single_nll(params, s) for s in chunk])
        ok = np.isfinite(vals)
        excluded += int((~ok).sum())
        total += float(vals[ok].sum())
        tokens += int(sum(len(s) for s, good in zip(chunk, ok) if good))
    value = math.exp(total / tokens) if tokens else math.nan
    res = Perplexity(value, tokens, excluded)
    return res if details else res.value


def _single_nll(params, sentence):
    try:
        return float(nll(params, [sentence])[0])
    except NumericError:
        return math.inf


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    curriculum_len: int
    train_nll: float
    dev_ppl: float
    wall_seconds: float
    dev_f1: float = math.nan

    def tsv(self):
        return (f"{self.epoch}\t{self.curriculum_len}\t{self.train_nll:.6f}\t"
                f"{self.dev_ppl:.6f}\t{self.wall_seconds:.3f}\n")


LOG_HEADER = "epoch\tcurriculum_len\ttrain_nll\tdev_ppl\twall_seconds\n"


@dataclass
class TrainResult:
    history: list
    best_params: NeuralParams
    best_epoch: int
    params: NeuralParams
    stopped_early: bool = False
    dropped: int = 0
    batches: list = field(default_factory=list)


def make_batches(sentences, cap, config, epoch):
    """Index batches for one epoch; deterministic in (seed, epoch)."""
    rng = np.random.default_rng([config.seed, epoch])
    idx = np.array([i for i, s in enumerate(sentences) if 2 <= len(s) <= cap], dtype=np.int64)
    idx = idx[rng.permutation(len(idx))]
    if config.bucket_by_length:
        lengths = np.array([len(sentences[i]) for i in idx])
        idx = idx[np.argsort(lengths, kind="stable")]
    batches = [idx[s:s + config.batch_size] for s in range(0, len(idx), config.batch_size)]
    order = rng.permutation(len(batches))
    return [batches[k] for k in order]


def _dev_score(params, dev, config, dev_gold):
    ppl = perplexity(params, dev) if dev else math.nan
    f1 = math.nan
    if config.early_stop == "f1":
        from .corpus import corpus_f1, spans_from_tree
        from .rank import parse_corpus
        fg = forward(params).astype(np.float64)
        trees = parse_corpus(fg, dev)
        preds, golds = [], []
        for tree, gold in zip(trees, dev_gold):
            if tree:
                preds.append(spans_from_tree(tree))
                golds.append(spans_from_tree(gold))
        f1 = corpus_f1(golds, preds)[0] if golds else math.nan
    return ppl, f1


def _save_state(path, params, state, record, best_score, bad, best_epoch):
    extra = {f"adam.m.{k}": a for k, a in state.m.items()}
    extra.update({f"adam.v.{k}": a for k, a in state.v.items()})
    scalars = np.array([state.t, record.epoch, best_score, bad, best_epoch], dtype="<f8")
    # stored bit-for-bit whatever the container's element type
    extra["state"] = scalars.view(params.dtype.newbyteorder("<"))
    save_params(path, params, extra)


def _load_state(path):
    params, extra = load_params(path)
    m = {k[len("adam.m."):]: v for k, v in extra.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: a for k, a in extra.items() if k.startswith("adam.v.")}
    t, epoch, best_score, bad, best_epoch = extra["state"].view("<f8")
    return params, AdamState(m, v, int(t)), int(epoch), float(best_score), int(bad), int(best_epoch)


def read_log(path):
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()[1:]
    out = []
    for line in lines:
        e, c, t, d, w = line.split("\t")
        out.append(EpochRecord(int(e), int(c), float(t), float(d), float(w)))
    return out


def train(config, corpus_train, corpus_dev, params_init=None, vocab_size=None,
          out_dir=None, resume=False, dev_gold=None, progress=None):
    """Train and return a TrainResult.

    With ``out_dir`` the loop writes ``last.npm`` (parameters plus optimizer
    state), ``best.npm`` and ``train_log.tsv`` after every epoch; ``resume``
    continues from ``last.npm``.
    """
    config.validate()
    if config.early_stop == "f1" and dev_gold is None:
        raise ConfigError("early_stop=f1 needs gold dev trees")
    train_set = [list(s) for s in corpus_train]
    dropped = sum(len(s) < 2 for s in train_set)
    dev = [list(s) for s in corpus_dev if len(s) >= 2]
    if not any(2 <= len(s) <= config.curriculum_len(1) for s in train_set):
        raise ConfigError("no training sentence fits the first curriculum length")

    if params_init is None:
        from .grammar import GrammarDims
        if vocab_size is None:
            vocab_size = 1 + max(max(s) for s in train_set if s)
        m1, m2, p = config.symbol_counts()
        params_init = xavier_init(GrammarDims(m1, m2, p, vocab_size), config.ranks,
                                  config.d, config.seed, dtype=config.dtype)
    params = params_init.astype(config.dtype)
    state = AdamState.zeros(params)
    history, start_epoch = [], 1
    best_score, bad, best_epoch = math.inf, 0, 0
    best_params = params
    log_path = last_path = best_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.tsv")
        last_path = os.path.join(out_dir, "last.npm")
        best_path = os.path.join(out_dir, "best.npm")
        if resume:
            params, state, done, best_score, bad, best_epoch = _load_state(last_path)
            best_params = load_params(best_path)[0] if os.path.exists(best_path) else params
            history = read_log(log_path)[:done]
            start_epoch = done + 1
            if bad >= config.patience and best_epoch < done:
                start_epoch = config.max_epochs + 1
        else:
            with open(log_path, "w", encoding="utf-8") as f:
                f.write(LOG_HEADER)

    stopped = False
    for epoch in range(start_epoch, config.max_epochs + 1):
        t0 = time.perf_counter()
        cap = config.curriculum_len(epoch)
        losses, counts = [], []
        for batch_idx in make_batches(train_set, cap, config, epoch):
            batch = [train_set[i] for i in batch_idx]
            value, grads = loss_and_grad(params, batch)
            state, params = adam_step(state, params, grads, config)
            losses.append(value * len(batch))
            counts.append(len(batch))
        train_nll = float(np.sum(losses) / np.sum(counts))
        ppl, f1 = _dev_score(params, dev, config, dev_gold)
        score = -f1 if config.early_stop == "f1" else ppl
        if not math.isfinite(score):
            score = train_nll
        record = EpochRecord(epoch, cap, train_nll, ppl, time.perf_counter() - t0, f1)
        history.append(record)
        if score < best_score:
            best_score, bad, best_epoch, best_params = score, 0, epoch, params
            if best_path:
                save_params(best_path, params)
        else:
            bad += 1
        if out_dir is not None:
            _save_state(last_path, params, state, record, best_score, bad, best_epoch)
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(record.tsv())
        if progress:
            progress(record)
        if bad and bad >= config.patience:
            stopped = True
            break
    return TrainResult(history=history, best_params=best_params, best_epoch=best_epoch,
                       params=params, stopped_early=stopped, dropped=dropped)
