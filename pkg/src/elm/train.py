"""Training loops for the supernet and for standalone models.

Data flow: a UTF-8 text file becomes a character vocabulary, id chunks
of train.seq_len, and a contiguous 80/10/10 split (pretrain slice,
downstream stand-in slice, validation slice).

Determinism scheme: every stream of randomness is a named substream of
the run seed: batch order is rng_for(seed, "<stage>.e<epoch>.batches"),
path sampling rng_for(seed, "<stage>.e<epoch>.paths"), and batch
corruption is seeded per (stage, epoch, step). Nothing carries mutable
generator state across a stage boundary, so a resumed run replays the
exact remaining stream.

Validation corruption and all probe batches are fixed (seeded once,
independent of epoch), so metric movement across epochs reflects weight
movement, not data movement.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .analysis import PcaScoreTable, pca_score
from .corpus import (Batch, Vocab, batch_slices, build_vocab, chunk_ids,
                     make_clm_batch, make_mlm_batch, three_way_split)
from .distill import (TeacherBundle, layer_map, loss_ad_mse, loss_ad_rel,
                      loss_cd_kl, loss_cd_rel, loss_fd_mse, loss_fd_rel,
                      make_projections, projection_pairs)
from .elastic import GrowthPolicy, select_growth
from .errors import ContractError, DataError, NumericError
from .genome import count_params, max_params_genome, random_genome
from .optim import AdamW, lr_schedule
from .seeding import rng_for, seed_for

PROBE_BATCHES = 8
VAL_FITNESS_BATCHES = 16
VAL_MASK_SEED_LABEL = "val.corruption"


@dataclass
class CorpusBundle:
    vocab: Vocab
    pretrain: np.ndarray     # [rows, seq_len] id chunks
    downstream: np.ndarray
    validation: np.ndarray


def load_corpus(path, seq_len: int, vocab_limit: int) -> CorpusBundle:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}")
    if not text:
        raise DataError(f"corpus {path} is empty")
    vocab = build_vocab(text, limit=vocab_limit)
    chunks = chunk_ids(vocab.encode(text), seq_len)
    pre, down, val = three_way_split(chunks)
    return CorpusBundle(vocab=vocab, pretrain=pre, downstream=down,
                        validation=val)


def probe_inputs(bundle: CorpusBundle, seed: int, batch_size: int,
                 count: int = PROBE_BATCHES):
    """Fixed seeded clean batches from the validation slice, identical
    across epochs; every activation analysis runs on these."""
    rng = rng_for(seed, "probe")
    rows = bundle.validation.shape[0]
    picks = rng.integers(0, rows, size=(count, batch_size))
    return [bundle.validation[p] for p in picks]


def make_batch(chunks: np.ndarray, objective: str, mask_prob: float,
               seed: int, vocab_size: int) -> Batch:
    if objective == "clm":
        return make_clm_batch(chunks)
    return make_mlm_batch(chunks, mask_prob, seed=seed, vocab_size=vocab_size)


def val_batches(bundle: CorpusBundle, objective: str, mask_prob: float,
                seed: int, batch_size: int,
                limit: int = VAL_FITNESS_BATCHES):
    """Fixed corrupted validation batches for fitness and epoch metrics."""
    rng = rng_for(seed, "val.batches")
    slices = batch_slices(bundle.validation.shape[0], batch_size, rng)[:limit]
    return [
        make_batch(bundle.validation[rows], objective, mask_prob,
                   seed_for(seed, f"{VAL_MASK_SEED_LABEL}.{i}"),
                   bundle.vocab.size)
        for i, rows in enumerate(slices)
    ]


# -- losses -----------------------------------------------------------------


def batch_loss(logits, batch: Batch):
    """Mean negative log-likelihood over the batch's scored positions.

    Returns (scalar Tensor, n_scored); n_scored == 0 yields (None, 0)
    and the caller skips the step.
    """
    b, n, v = logits.shape
    idx = np.flatnonzero(batch.loss_mask.reshape(-1))
    if idx.size == 0:
        return None, 0
    rows = ag.take_rows(ag.reshape(logits, (b * n, v)), idx)
    logp = ag.log_softmax_rows(rows)
    picked = ag.gather_last(logp, batch.target_ids.reshape(-1)[idx])
    return ag.scale(ag.tmean(picked), -1.0), int(idx.size)


def batch_accuracy(logits_data: np.ndarray, batch: Batch) -> tuple:
    pred = np.argmax(logits_data, axis=-1)
    mask = batch.loss_mask
    return int((pred[mask] == batch.target_ids[mask]).sum()), int(mask.sum())


def verify_loss_f64(logits_data: np.ndarray, batch: Batch,
                    loss_f32: float, tol: float = 1e-3) -> None:
    """Recompute the scored-position NLL in float64 and compare.

    Guards the reduction arithmetic (softmax, log, mean) against
    numeric drift; a breach is a numeric failure, not a warning.
    """
    idx = np.flatnonzero(batch.loss_mask.reshape(-1))
    if idx.size == 0:
        return
    b, n, v = logits_data.shape
    rows = logits_data.reshape(b * n, v)[idx].astype(np.float64)
    rows = rows - rows.max(axis=-1, keepdims=True)
    logp = rows - np.log(np.exp(rows).sum(axis=-1, keepdims=True))
    ref = -float(np.mean(
        np.take_along_axis(
            logp, batch.target_ids.reshape(-1)[idx][:, None], axis=-1)))
    denom = max(abs(ref), 1e-12)
    if abs(ref - loss_f32) / denom > tol:
        raise NumericError(
            f"float64 loss check failed: f32 {loss_f32!r} vs f64 {ref!r}"
        )


# -- distillation glue --------------------------------------------------------


@dataclass
class KdContext:
    """Everything KD needs at each step: the frozen teacher, trainable
    student-to-teacher feature projections, and the layer alignment."""

    teacher: TeacherBundle
    projections: dict
    lmap: list
    mode: str
    lambda_cd: float
    lambda_ad: float
    lambda_fd: float

    def param_dict(self) -> dict:
        return self.projections


def make_kd_context(teacher_model, student_layers: int, student_hidden: int,
                    mode: str, lambdas, rng) -> KdContext:
    teacher = TeacherBundle(teacher_model)
    t_layers = teacher_model.dims.n_layers
    projections = make_projections(student_hidden, teacher_model.dims.hidden,
                                   student_layers, rng)
    return KdContext(teacher=teacher, projections=projections,
                     lmap=layer_map(t_layers, student_layers), mode=mode,
                     lambda_cd=lambdas[0], lambda_ad=lambdas[1],
                     lambda_fd=lambdas[2])


def _flatten_features(layer_out):
    feats = []
    for t in layer_out:
        b, n, c = t.shape
        feats.append(ag.reshape(t, (b * n, c)))
    return feats


def kd_loss(kd: KdContext, student_logits, student_trace, batch: Batch,
            causal: bool):
    """Weighted sum of the three distillation terms for one batch."""
    t_logits, t_trace = kd.teacher.trace(batch.input_ids, causal=causal)

    idx = np.flatnonzero(batch.loss_mask.reshape(-1))
    if idx.size == 0:
        return None
    b, n, v = student_logits.shape
    ys = ag.softmax_rows(
        ag.take_rows(ag.reshape(student_logits, (b * n, v)), idx))
    tb, tn, tv = t_logits.shape
    if tv != v:
        raise ContractError(
            f"teacher vocab {tv} != student vocab {v}; they must share "
            "one corpus vocabulary"
        )
    yt_rows = t_logits.data.reshape(tb * tn, tv)[idx].astype(np.float64)
    yt_rows = yt_rows - yt_rows.max(axis=-1, keepdims=True)
    yt = np.exp(yt_rows)
    yt /= yt.sum(axis=-1, keepdims=True)

    at = [t_trace.attention[tl] for tl in kd.lmap]
    ft = [t_trace.layer_out[tl] for tl in kd.lmap]
    ft = [x.data.reshape(-1, x.shape[-1]) for x in ft]
    fs = _flatten_features(student_trace.layer_out)
    pairs = projection_pairs(kd.projections, len(fs))

    if kd.mode == "relational":
        cd = loss_cd_rel(yt, ys)
        ad = loss_ad_rel(at, student_trace.attention)
        fd = loss_fd_rel(ft, fs, pairs)
    else:
        cd = loss_cd_kl(yt, ys)
        ad = loss_ad_mse(at, student_trace.attention)
        fd = loss_fd_mse(ft, fs, pairs)
    total = ag.scale(cd, kd.lambda_cd)
    total = total + ag.scale(ad, kd.lambda_ad)
    total = total + ag.scale(fd, kd.lambda_fd)
    return total


# -- epoch loops --------------------------------------------------------------


@dataclass
class EpochStats:
    stage: str
    epoch: int
    steps: int
    mean_loss: float
    last_lr: float


def _step_seed(seed, stage, epoch, i):
    return seed_for(seed, f"{stage}.e{epoch}.b{i}")


def train_supernet_epoch(net, opt, cfg, chunks, *, stage: str, epoch: int,
                         seed: int, total_steps: int, step_offset: int,
                         kd: KdContext = None,
                         verify_f64: bool = False) -> EpochStats:
    """One pass over `chunks` with a fresh uniformly sampled path per
    step. Returns per-epoch aggregates for the training log."""
    objective = cfg["train.objective"]
    causal = objective == "clm"
    rng_batches = rng_for(seed, f"{stage}.e{epoch}.batches")
    rng_paths = rng_for(seed, f"{stage}.e{epoch}.paths")
    slices = batch_slices(chunks.shape[0], cfg["train.batch_size"],
                          rng_batches)
    losses = []
    lr = 0.0
    for i, rows in enumerate(slices):
        genome = random_genome(rng_paths, net.dims, net.current_ffn_table())
        batch = make_batch(chunks[rows], objective, cfg["train.mask_prob"],
                           _step_seed(seed, stage, epoch, i),
                           net.dims.vocab_size)
        logits, trace = net.forward_path(genome, batch.input_ids,
                                         causal=causal, trace=kd is not None)
        loss, n_scored = batch_loss(logits, batch)
        if loss is None:
            continue
        if kd is not None:
            extra = kd_loss(kd, logits, trace, batch, causal)
            if extra is not None:
                loss = loss + extra
        if verify_f64 and i == 0:
            task_only, _ = batch_loss(logits, batch)
            verify_loss_f64(logits.data, batch, float(task_only.data))
        opt.zero_grads()
        ag.backward(loss)
        lr = lr_schedule(step_offset + i, total_steps, cfg["train.lr"],
                         cfg["train.warmup_ratio"])
        opt.step(lr)
        losses.append(float(loss.data))
    return EpochStats(stage=stage, epoch=epoch, steps=len(slices),
                      mean_loss=float(np.mean(losses)) if losses else 0.0,
                      last_lr=lr)


def train_model_epoch(model, opt, cfg, chunks, *, stage: str, epoch: int,
                      seed: int, total_steps: int, step_offset: int,
                      kd: KdContext = None,
                      verify_f64: bool = False) -> EpochStats:
    """Same loop for a standalone model (fixed architecture)."""
    objective = cfg["train.objective"]
    causal = objective == "clm"
    rng_batches = rng_for(seed, f"{stage}.e{epoch}.batches")
    slices = batch_slices(chunks.shape[0], cfg["train.batch_size"],
                          rng_batches)
    losses = []
    lr = 0.0
    for i, rows in enumerate(slices):
        batch = make_batch(chunks[rows], objective, cfg["train.mask_prob"],
                           _step_seed(seed, stage, epoch, i),
                           model.dims.vocab_size)
        logits, trace = model.forward(batch.input_ids, causal=causal,
                                      trace=kd is not None)
        loss, n_scored = batch_loss(logits, batch)
        if loss is None:
            continue
        if kd is not None:
            extra = kd_loss(kd, logits, trace, batch, causal)
            if extra is not None:
                loss = loss + extra
        if verify_f64 and i == 0:
            task_only, _ = batch_loss(logits, batch)
            verify_loss_f64(logits.data, batch, float(task_only.data))
        opt.zero_grads()
        ag.backward(loss)
        lr = lr_schedule(step_offset + i, total_steps, cfg["train.lr"],
                         cfg["train.warmup_ratio"])
        opt.step(lr)
        losses.append(float(loss.data))
    return EpochStats(stage=stage, epoch=epoch, steps=len(slices),
                      mean_loss=float(np.mean(losses)) if losses else 0.0,
                      last_lr=lr)


# -- growth -------------------------------------------------------------------


def measure_pca_scores(net, probes, tau: float) -> dict:
    """PCA score of every candidate block's FFN hidden activations over
    the probe batches. Blocks are exercised with uniform single-candidate
    paths (candidate j at every layer), so each block sees its own
    stack's activations."""
    scores = {}
    for j in net.candidates:
        genome = net.genome_with_current_dims([j] * net.dims.n_layers)
        hidden = [[] for _ in range(net.dims.n_layers)]
        for x in probes:
            _, trace = net.forward_path(genome, x, trace=True)
            for l, t in enumerate(trace.ffn_hidden):
                hidden[l].append(t.data)
        for l in range(net.dims.n_layers):
            scores[(l, j)] = pca_score(np.concatenate(hidden[l], axis=0),
                                       tau=tau)
    return scores


def growth_step(net, opt, scores: dict, policy: GrowthPolicy, epoch: int,
                rng) -> dict:
    """Grow the selected blocks one step each; returns the log row."""
    table = net.current_ffn_table()
    grown = select_growth(scores, policy, net.dims, table)
    entries = []
    for layer, cand in grown:
        old = table[(layer, cand)]
        names = net.grow_ffn(layer, cand, old + net.dims.ffn_step, rng)
        if names is None:
            raise ContractError(
                f"selected block ({layer}, {cand}) refused growth"
            )
        opt.reset_state(names)
        entries.append({"layer": layer, "cand": cand, "old": old,
                        "new": old + net.dims.ffn_step})
    after = count_params(
        max_params_genome(net.dims, net.current_ffn_table()), net.dims)
    return {"epoch": epoch, "grown": entries, "params_after": after}


def record_scores(table: PcaScoreTable, scores: dict, epoch: int,
                  ffn_table: dict) -> None:
    for (layer, cand), score in sorted(scores.items()):
        table.add(epoch, layer, cand, ffn_table[(layer, cand)], score)


# -- evaluation ---------------------------------------------------------------


def evaluate_forward(forward_fn, batches) -> dict:
    """Loss/accuracy of a fixed forward function over corrupted batches."""
    total_nll = 0.0
    total_correct = 0
    total_scored = 0
    for batch in batches:
        causal = batch.objective == "clm"
        logits, _ = forward_fn(batch.input_ids, causal)
        loss, n = batch_loss(logits, batch)
        if loss is None:
            continue
        total_nll += float(loss.data) * n
        correct, _ = batch_accuracy(logits.data, batch)
        total_correct += correct
        total_scored += n
    if total_scored == 0:
        raise ContractError("no scored positions in evaluation batches")
    return {
        "loss": total_nll / total_scored,
        "accuracy": total_correct / total_scored,
        "positions": total_scored,
    }


def evaluate_model(model, batches) -> dict:
    return evaluate_forward(
        lambda ids, causal: model.forward(ids, causal=causal), batches)


def evaluate_sampled_paths(net, batches, seed: int, label: str) -> dict:
    """Supernet-side validation: a fresh uniformly sampled path per
    batch, seeded by `label` so the metric is reproducible."""
    rng = rng_for(seed, label)
    table = net.current_ffn_table()

    def forward(ids, causal):
        genome = random_genome(rng, net.dims, table)
        return net.forward_path(genome, ids, causal=causal)

    return evaluate_forward(forward, batches)


def build_optimizer(params: dict, cfg) -> AdamW:
    return AdamW(params, lr=cfg["train.lr"],
                 betas=(cfg["train.beta1"], cfg["train.beta2"]),
                 weight_decay=cfg["train.weight_decay"])
