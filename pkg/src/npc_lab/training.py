"""Warmup, per-epoch detection, corrected training epochs and the full run loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from npc_lab import correction, detection
from npc_lab.data import batches
from npc_lab.encoder import (
    EncoderParams,
    LossBatch,
    Vocabulary,
    atomic_write_text,
    batch_logits,
    encode_texts,
    init_params,
    loss_and_gradients,
    save_checkpoint,
    tokenize,
)
from npc_lab.errors import ConfigurationError, NumericFailure
from npc_lab.evaluation import evaluate_pairs, rank_scores
from npc_lab.numerics import log_softmax_rows

log = logging.getLogger(__name__)

METHODS = ("baseline", "npc")
NEGATIVE_MODES = ("in_batch", "hard")


@dataclass
class TrainConfig:
    method: str = "npc"
    negatives: str = "in_batch"
    similarity: str = "cosine"
    temperature: float = 20.0
    threshold: float = 0.5
    alpha: float = 0.999
    batch_size: int = 64
    detect_batch_size: int | None = None
    warmup_epochs: int = 3
    total_epochs: int = 15
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    hard_negatives_per_query: int = 1
    remine_each_epoch: bool = True
    fixed_flags: bool = False
    ppl_negatives: str = "in_batch"
    reverse_kl: bool = False
    hidden: int = 64
    shared_encoder: bool = True
    eval_depth: int = 100
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        if self.negatives not in NEGATIVE_MODES:
            raise ConfigurationError(f"negatives must be one of {NEGATIVE_MODES}")
        if self.ppl_negatives not in NEGATIVE_MODES:
            raise ConfigurationError(f"ppl_negatives must be one of {NEGATIVE_MODES}")
        if self.similarity not in ("cosine", "inner_product"):
            raise ConfigurationError("similarity must be cosine or inner_product")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.batch_size < 2 or (self.detect_batch_size is not None and self.detect_batch_size < 2):
            raise ConfigurationError("batch sizes must be >= 2")
        if self.warmup_epochs < 0 or self.total_epochs < self.warmup_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs <= total_epochs")
        if self.hard_negatives_per_query < 0:
            raise ConfigurationError("hard_negatives_per_query must be >= 0")
        if self.learning_rate <= 0 or self.hidden < 1:
            raise ConfigurationError("learning_rate and hidden must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class OptimizerState:
    """Adam moments per parameter array."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_for(cls, params):
        arrays = params.arrays()
        return cls({k: np.zeros_like(v) for k, v in arrays.items()}, {k: np.zeros_like(v) for k, v in arrays.items()})


def clip_gradients(grads, max_norm):
    arrays = grads.arrays()
    norm = float(np.sqrt(sum(np.sum(g * g) for g in arrays.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in arrays.values():
            g *= scale
    return norm


def adam_step(params, grads, state, config):
    """In-place Adam update of ``params``."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    g_arrays = grads.arrays()
    for name, p in params.arrays().items():
        g = g_arrays[name]
        m = state.first[name]
        v = state.second[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + config.adam_eps)


# -- hard negatives ----------------------------------------------------------


def mine_hard_negatives(params, vocab, pairs, collection, k, similarity="cosine"):
    """pair_id -> the ``k`` most similar collection documents other than the annotated positive.

    Exhaustive scan; ties broken by ascending doc_id.
    """
    if k == 0:
        return {}
    if len(collection) < k + 1:
        raise ConfigurationError(f"collection of {len(collection)} documents cannot supply {k} hard negatives")
    doc_ids = list(collection.keys())
    position = {d: j for j, d in enumerate(doc_ids)}
    normalize = similarity == "cosine"
    d = encode_texts([collection[i] for i in doc_ids], vocab, params, normalize, side="doc")
    store = {}
    chunk = 512
    for start in range(0, len(pairs), chunk):
        part = pairs[start : start + chunk]
        q = encode_texts([p.query_text for p in part], vocab, params, normalize, side="query")
        scores = q @ d.T
        for row, pair in enumerate(part):
            scores[row, position[pair.doc_id]] = -np.inf
        for pair, order in zip(part, rank_scores(scores, doc_ids, k)):
            store[pair.pair_id] = [doc_ids[j] for j in order]
    return store


def hard_negative_perplexities(
    params, vocab, pairs, collection, batch_size, k, temperature, similarity="cosine", seed=0, epoch=0
):
    """Perplexities under the hard-negative sampling strategy.

    Each pair is scored against the same pool training would use: the other
    in-batch positives plus ``k`` mined hard negatives for every query in
    the batch.  Exists only for the ablation contrasting easy- and
    hard-negative perplexities; regular detection goes through
    ``detection.compute_perplexities``, which has no access to mined
    negatives.
    """
    store = mine_hard_negatives(params, vocab, pairs, collection, k, similarity)
    records = []
    for chunk in batches(pairs, batch_size, seed, epoch, detection.DETECTION_STREAM):
        batch = make_loss_batch(chunk, vocab, collection, store)
        log_p = log_softmax_rows(batch_logits(batch, params, temperature, similarity))
        for i, pair in enumerate(chunk):
            records.append(detection.PerplexityRecord(pair.pair_id, max(float(-log_p[i, i]), 0.0)))
    records.sort(key=lambda r: r.pair_id)
    return records


# -- epochs ------------------------------------------------------------------


def make_loss_batch(chunk, vocab, collection, store):
    """Pool = the batch's positives followed by each pair's hard negatives, in batch order."""
    doc_tokens = [tokenize(p.doc_text, vocab) for p in chunk]
    if store:
        for p in chunk:
            doc_tokens.extend(tokenize(collection[d], vocab) for d in store.get(p.pair_id, ()))
    return LossBatch(
        pair_ids=[p.pair_id for p in chunk],
        query_tokens=[tokenize(p.query_text, vocab) for p in chunk],
        doc_tokens=doc_tokens,
        positive_index=np.arange(len(chunk)),
    )


@dataclass
class EpochStats:
    steps: int = 0
    loss_sum: float = 0.0
    grad_norm_sum: float = 0.0

    def as_dict(self):
        return {
            "steps": self.steps,
            "loss_mean": self.loss_sum / self.steps if self.steps else None,
            "grad_norm_mean": self.grad_norm_sum / self.steps if self.steps else None,
        }


def train_epoch(params, opt_state, teacher, vocab, pairs, flags, store, config, epoch, collection=None):
    """One pass over shuffled batches; returns ``(teacher, EpochStats)``.

    ``params`` and ``opt_state`` are updated in place.  With a teacher,
    each batch also gets the consistency term and one EMA update.
    """
    stats = EpochStats()
    for chunk in batches(pairs, config.batch_size, config.seed, epoch):
        batch = make_loss_batch(chunk, vocab, collection, store)
        teacher_log_probs = None
        if teacher is not None:
            teacher_log_probs = log_softmax_rows(
                batch_logits(batch, teacher.params, config.temperature, config.similarity)
            )
        y = flags.as_array(batch.pair_ids) if flags is not None else np.ones(len(chunk))
        loss, grads = loss_and_gradients(
            batch,
            params,
            teacher_log_probs,
            y,
            temperature=config.temperature,
            similarity=config.similarity,
            reverse_kl=config.reverse_kl,
        )
        stats.grad_norm_sum += clip_gradients(grads, config.grad_clip)
        adam_step(params, grads, opt_state, config)
        if teacher is not None:
            teacher = correction.ema_update(teacher, params)
        stats.steps += 1
        stats.loss_sum += loss
    return teacher, stats


def warmup(params, opt_state, vocab, pairs, config, epochs=None):
    """Plain contrastive epochs with in-batch negatives, all flags 1, no teacher."""
    n = config.warmup_epochs if epochs is None else epochs
    trace = []
    for epoch in range(n):
        _, stats = train_epoch(params, opt_state, None, vocab, pairs, None, None, config, epoch)
        trace.append(stats.as_dict())
    return params, trace


def detect_epoch(params, vocab, pairs, collection, config, epoch):
    """Perplexities, mixture fit and clean flags for one epoch."""
    bs = config.detect_batch_size or config.batch_size
    if config.ppl_negatives == "hard":
        records = hard_negative_perplexities(
            params,
            vocab,
            pairs,
            collection,
            bs,
            max(config.hard_negatives_per_query, 1),
            config.temperature,
            config.similarity,
            config.seed,
            epoch,
        )
    else:
        records = detection.compute_perplexities(
            params, vocab, pairs, bs, config.temperature, config.similarity, config.seed, epoch
        )
    fit, flags = detection.detect(records, config.threshold, epoch)
    return records, fit, flags


# -- full run ----------------------------------------------------------------


@dataclass
class RunResult:
    vocab: Vocabulary
    params: EncoderParams
    teacher: correction.TeacherState | None
    log: list[dict]
    best_epoch: int | None = None
    best_params: EncoderParams | None = None
    flag_history: list = field(default_factory=list)
    last_records: list | None = None

    @property
    def final(self):
        return self.log[-1] if self.log else None


def build_vocab(pairs, collection, dev_pairs=()):
    texts = [p.query_text for p in pairs]
    texts.extend(p.query_text for p in dev_pairs)
    texts.extend(collection.values())
    return Vocabulary.build(texts)


def _fmt(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


def run(config, pairs, collection, dev_pairs=None, out_dir=None, vocab=None):
    """Warmup, then per epoch: detect (npc), re-mine (hard), train; log every epoch.

    Epoch indices count from 0; the first ``warmup_epochs`` are warmup.
    If ``out_dir`` is given, writes ``metrics.jsonl``, ``last.ckpt`` (and
    ``last.teacher.ckpt``) after every epoch, and ``best.ckpt`` by dev
    Recall@5.
    """
    config.validate()
    collection.check_pairs(pairs)
    if dev_pairs:
        collection.check_pairs(dev_pairs)
    vocab = vocab or build_vocab(pairs, collection, dev_pairs or ())
    params = init_params(len(vocab), config.hidden, config.seed, config.shared_encoder)
    opt_state = OptimizerState.zeros_for(params)
    has_truth = all(p.truth_clean is not None for p in pairs)
    cfg_dict = config.to_dict()

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        open(metrics_path, "w").close()

    result = RunResult(vocab, params, None, [])
    best_score = -1.0
    teacher = None
    flags = None
    store = None
    for epoch in range(config.total_epochs):
        record = {"epoch": epoch}
        in_warmup = epoch < config.warmup_epochs
        record["phase"] = "warmup" if in_warmup else "train"
        epoch_store = None
        epoch_flags = None
        if not in_warmup:
            if config.method == "npc":
                if teacher is None:
                    teacher = correction.init_teacher(params, config.alpha)
                if flags is None or not config.fixed_flags:
                    records, fit, flags = detect_epoch(params, vocab, pairs, collection, config, epoch)
                    result.last_records = records
                    record["gmm"] = fit.to_dict() if fit is not None else None
                epoch_flags = flags
                result.flag_history.append(flags)
                record["flags"] = {"clean": flags.num_clean, "noisy": flags.num_noisy, "from_epoch": flags.epoch}
                if has_truth:
                    record["detection"] = detection.detection_report(flags, pairs)
            if config.negatives == "hard" and config.hard_negatives_per_query > 0:
                if store is None or config.remine_each_epoch:
                    store = mine_hard_negatives(
                        params, vocab, pairs, collection, config.hard_negatives_per_query, config.similarity
                    )
                epoch_store = store

        try:
            teacher, stats = train_epoch(
                params, opt_state, teacher, vocab, pairs, epoch_flags, epoch_store, config, epoch, collection
            )
        except NumericFailure as exc:
            raise NumericFailure(f"epoch {epoch}: {exc}") from exc
        record["train"] = stats.as_dict()
        record["optimizer_steps"] = opt_state.step
        record["ema_steps"] = teacher.step if teacher is not None else 0
        if dev_pairs:
            dev = evaluate_pairs(params, vocab, dev_pairs, collection, config.similarity, depth=config.eval_depth)
            record["dev"] = dev
            if dev["recall@5"] > best_score:
                best_score = dev["recall@5"]
                result.best_epoch = epoch
                result.best_params = params.copy()
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"), vocab, params, cfg_dict, {"epoch": epoch})
        record = json.loads(json.dumps(record, default=_fmt))
        result.log.append(record)
        log.info("epoch %d %s loss=%.4f", epoch, record["phase"], record["train"]["loss_mean"] or float("nan"))

        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "last.ckpt"), vocab, params, cfg_dict, {"epoch": epoch})
            if teacher is not None:
                save_checkpoint(
                    os.path.join(out_dir, "last.teacher.ckpt"),
                    vocab,
                    teacher.params,
                    cfg_dict,
                    {"epoch": epoch, "alpha": teacher.alpha, "ema_step": teacher.step},
                )
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    result.params = params
    result.teacher = teacher
    if out_dir is not None and config.total_epochs == 0:
        save_checkpoint(os.path.join(out_dir, "last.ckpt"), vocab, params, cfg_dict, {"epoch": -1})
    return result


def metrics_log_text(result):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.log)


def write_metrics_log(path, result):
    atomic_write_text(path, metrics_log_text(result))
