"""Staged end-to-end search over a run directory.

Stage order: (1) supernet pretraining with per-epoch dimension growth,
(2) supernet finetuning on the downstream stand-in slice, (3)
constraint-aware evolutionary search over the frozen supernet, (4)
head-count search on the winner. Each stage ends with a checkpoint in
the workdir; a resumed run loads completed stages instead of rerunning
them, and any stage failure carries a stage tag in its message.

Workdir layout:

    config.resolved     canonical config snapshot (hash source)
    .lock               owner pid; one run owns the directory at a time
    stage-<k>.ckpt/     checkpoint after stage k
    logs/train.jsonl    one row per epoch (all stages)
    logs/growth.jsonl   one row per pretraining epoch
    logs/search.jsonl   one row per evaluated slot per generation
    figures/*.csv       exported score/similarity tables
    genome.final        searched architecture with searched head counts
    final.ckpt/         trained final model (train_final)
    teacher.ckpt/       trained teacher (pretrain_teacher)
    report.json         run summary, deterministic given config+seed

Every artifact a later decision depends on (growth choices, search
winners, head counts) is replayable from these files alone.
"""

import json
import math
import os
import sys

import numpy as np

from . import train as tr
from .analysis import (CkaMatrix, PcaScoreTable, SimilarityTable,
                       block_similarity, export_figure_data)
from .checkpoint import checkpoint_exists, load_checkpoint, save_checkpoint
from .config import SearchConfig
from .elastic import GrowthPolicy, apply_head_search
from .errors import ConfigError, ContractError, DataError, ElmError
from .evolution import EvalRecord, fitness, run_evolution
from .genome import ArchGenome, ModelDims, count_params, max_params_genome
from .seeding import rng_for
from .supernet import ElasticSupernet, FinalModel

STAGE_NAMES = ("pretrain", "finetune", "search", "heads")


class RunDir:
    """Filesystem layout plus an exclusive-ownership lockfile."""

    def __init__(self, path: str):
        if not path:
            raise ConfigError("paths.workdir is empty")
        self.path = path
        self.locked = False
        os.makedirs(os.path.join(path, "logs"), exist_ok=True)
        os.makedirs(os.path.join(path, "figures"), exist_ok=True)

    def file(self, *parts) -> str:
        return os.path.join(self.path, *parts)

    def stage_ckpt(self, k: int) -> str:
        return self.file(f"stage-{k}.ckpt")

    def lock(self) -> None:
        lock_path = self.file(".lock")
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                with open(lock_path) as fh:
                    pid = int(fh.read().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise DataError(
                    f"workdir {self.path} is locked by running pid {pid}"
                )
            print(f"clearing stale lock from pid {pid}", file=sys.stderr)
            os.unlink(lock_path)
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self.locked = True

    def unlock(self) -> None:
        if self.locked:
            try:
                os.unlink(self.file(".lock"))
            except OSError:
                pass
            self.locked = False

    def append_log(self, name: str, row: dict) -> None:
        with open(self.file("logs", f"{name}.jsonl"), "a",
                  encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def clear_log(self, name: str, stage: str = None) -> None:
        """Drop a log, or only its rows for one stage; stages call this
        when they (re)run so partial or stale rows never accumulate."""
        path = self.file("logs", f"{name}.jsonl")
        if not os.path.exists(path):
            return
        if stage is None:
            os.unlink(path)
            return
        with open(path, encoding="utf-8") as fh:
            rows = [line for line in fh
                    if line.strip()
                    and json.loads(line).get("stage") != stage]
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(rows)
        os.replace(tmp, path)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _stage_tagged(name: str):
    """Re-raise stage errors with a stage tag, preserving the class."""
    def wrap(exc: Exception):
        if isinstance(exc, ElmError):
            raise type(exc)(f"[stage {name}] {exc}") from exc
        raise exc
    return wrap


# -- checkpoint glue ----------------------------------------------------------


def _net_state(net, opt, extra: dict) -> dict:
    state = {
        "ffn_dims": [[l, j, d] for (l, j), d in sorted(net.ffn_dims.items())],
        "candidates": list(net.candidates),
        "vocab_size": net.dims.vocab_size,
        "opt_steps": opt.step_counts() if opt is not None else {},
        "rng": {"scheme": "per-stage-epoch substreams of run.seed"},
    }
    state.update(extra)
    return state


def _net_arrays(net, opt) -> dict:
    arrays = {name: t.data for name, t in net.params.items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    return arrays


def _restore_supernet(cfg: SearchConfig, vocab_size: int, ckpt):
    """Rebuild a supernet with the checkpointed shapes, then overwrite
    every tensor bitwise."""
    state = ckpt.state
    if state["vocab_size"] != vocab_size:
        raise ConfigError(
            f"checkpoint vocab size {state['vocab_size']} != corpus vocab "
            f"{vocab_size}; the corpus changed under the run"
        )
    dims = cfg.model_dims(vocab_size)
    net = ElasticSupernet(dims, rng_for(cfg["run.seed"], "supernet.init"),
                          candidates=tuple(state["candidates"]))
    throwaway = rng_for(cfg["run.seed"], "restore.grow")
    for l, j, target in state["ffn_dims"]:
        while net.ffn_dims[(l, j)] < target:
            net.grow_ffn(l, j, net.ffn_dims[(l, j)] + dims.ffn_step,
                         throwaway)
    weight_names = {n for n in ckpt.arrays if not n.startswith("opt.")}
    if weight_names != set(net.params):
        missing = sorted(set(net.params) - weight_names)[:3]
        extra = sorted(weight_names - set(net.params))[:3]
        raise DataError(
            f"checkpoint tensor names do not match the supernet "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, t in net.params.items():
        arr = ckpt.arrays[name]
        if arr.shape != t.data.shape:
            raise DataError(f"{name}: checkpoint shape {arr.shape} != "
                            f"model shape {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    opt = tr.build_optimizer(net.params, cfg)
    opt.load_state({k: v for k, v in ckpt.arrays.items()
                    if k.startswith("opt.")}, state.get("opt_steps", {}))
    return net, opt


def _restore_final_model(cfg: SearchConfig, ckpt, vocab_size: int):
    state = ckpt.state
    if state["vocab_size"] != vocab_size:
        raise ConfigError(
            f"checkpoint vocab size {state['vocab_size']} != corpus vocab "
            f"{vocab_size}"
        )
    dims = ModelDims(**state["dims"])
    genome = ArchGenome.from_text(state["genome"])
    model = FinalModel(dims, genome, rng_for(0, "restore.final"),
                       zeros_init=True)
    model_names = {n for n in ckpt.arrays
                   if not n.startswith(("opt.", "kd.proj."))}
    if model_names != set(model.params):
        raise DataError("checkpoint tensor names do not match the model")
    for name, t in model.params.items():
        t.data = ckpt.arrays[name].astype(t.data.dtype, copy=True)
    return model


def _dims_fields(dims) -> dict:
    return {
        "n_layers": dims.n_layers, "hidden": dims.hidden,
        "heads": dims.heads, "inner": dims.inner,
        "ffn_init": dims.ffn_init, "ffn_step": dims.ffn_step,
        "ffn_max": dims.ffn_max, "n_max": dims.n_max,
        "vocab_size": dims.vocab_size, "tie_head": dims.tie_head,
    }


# -- stages -------------------------------------------------------------------


def _total_steps(rows: int, batch: int, epochs: int) -> int:
    return max(1, math.ceil(rows / batch) * epochs)


def _pca_from_state(rows) -> PcaScoreTable:
    table = PcaScoreTable()
    for e, l, c, d, s in rows:
        table.add(int(e), int(l), int(c), int(d), float(s))
    return table


def stage_pretrain(cfg, rundir, bundle, verify_f64=False):
    rundir.clear_log("growth")
    rundir.clear_log("train", "pretrain")
    seed = cfg["run.seed"]
    dims = cfg.model_dims(bundle.vocab.size)
    net = ElasticSupernet(dims, rng_for(seed, "supernet.init"),
                          candidates=cfg.candidate_set())
    budget = cfg.budget()
    start = count_params(max_params_genome(dims, net.current_ffn_table()),
                         dims, budget.embedding_counted)
    if start > budget.ceiling:
        raise ConfigError(
            f"budget.ceiling {budget.ceiling} is below the ungrown "
            f"supernet's most expensive path ({start} params)"
        )
    opt = tr.build_optimizer(net.params, cfg)
    policy = GrowthPolicy(k=cfg["growth.k"], step=dims.ffn_step,
                          ffn_max=dims.ffn_max, budget=budget)
    probes = tr.probe_inputs(bundle, seed, cfg["train.batch_size"])
    vbatches = tr.val_batches(bundle, cfg["train.objective"],
                              cfg["train.mask_prob"], seed,
                              cfg["train.batch_size"])
    pca = PcaScoreTable()
    epochs = cfg["train.epochs_pretrain"]
    total = _total_steps(bundle.pretrain.shape[0], cfg["train.batch_size"],
                         epochs)
    steps_done = 0
    for epoch in range(epochs):
        stats = tr.train_supernet_epoch(
            net, opt, cfg, bundle.pretrain, stage="pretrain", epoch=epoch,
            seed=seed, total_steps=total, step_offset=steps_done,
            verify_f64=verify_f64)
        steps_done += stats.steps
        scores = tr.measure_pca_scores(net, probes, cfg["growth.tau"])
        tr.record_scores(pca, scores, epoch, net.current_ffn_table())
        row = tr.growth_step(net, opt, scores, policy, epoch,
                             rng_for(seed, f"growth.e{epoch}"))
        rundir.append_log("growth", row)
        val = tr.evaluate_sampled_paths(net, vbatches, seed,
                                        f"pretrain.e{epoch}.val")
        rundir.append_log("train", {
            "stage": "pretrain", "epoch": epoch, "loss": stats.mean_loss,
            "lr": stats.last_lr, "val_loss": val["loss"],
            "val_accuracy": val["accuracy"],
        })
    save_checkpoint(rundir.stage_ckpt(1), "pretrain", max(epochs - 1, 0),
                    cfg.config_hash(), _net_arrays(net, opt),
                    _net_state(net, opt, {"pca": pca.rows}))
    return net, opt, pca


def stage_finetune(cfg, rundir, bundle, net, opt_unused, pca,
                   verify_f64=False):
    rundir.clear_log("train", "finetune")
    seed = cfg["run.seed"]
    opt = tr.build_optimizer(net.params, cfg)  # fresh moments per stage
    vbatches = tr.val_batches(bundle, cfg["train.objective"],
                              cfg["train.mask_prob"], seed,
                              cfg["train.batch_size"])
    epochs = cfg["train.epochs_finetune"]
    total = _total_steps(bundle.downstream.shape[0], cfg["train.batch_size"],
                         epochs)
    steps_done = 0
    last_val = None
    for epoch in range(epochs):
        stats = tr.train_supernet_epoch(
            net, opt, cfg, bundle.downstream, stage="finetune", epoch=epoch,
            seed=seed, total_steps=total, step_offset=steps_done,
            verify_f64=verify_f64)
        steps_done += stats.steps
        last_val = tr.evaluate_sampled_paths(net, vbatches, seed,
                                             f"finetune.e{epoch}.val")
        rundir.append_log("train", {
            "stage": "finetune", "epoch": epoch, "loss": stats.mean_loss,
            "lr": stats.last_lr, "val_loss": last_val["loss"],
            "val_accuracy": last_val["accuracy"],
        })
    if last_val is None:
        last_val = tr.evaluate_sampled_paths(net, vbatches, seed,
                                             "finetune.val")
    save_checkpoint(
        rundir.stage_ckpt(2), "finetune", max(epochs - 1, 0),
        cfg.config_hash(), _net_arrays(net, opt),
        _net_state(net, opt, {"pca": pca.rows,
                              "val_loss": last_val["loss"],
                              "val_accuracy": last_val["accuracy"]}))
    return net, opt


def stage_search(cfg, rundir, bundle, net, pca):
    rundir.clear_log("search")
    seed = cfg["run.seed"]
    snapshot = net.snapshot()
    vbatches = tr.val_batches(bundle, cfg["train.objective"],
                              cfg["train.mask_prob"], seed,
                              cfg["train.batch_size"])
    result = run_evolution(
        cfg.evo(), net.dims, cfg.budget(), net.current_ffn_table(),
        rng_for(seed, "search.evo"),
        lambda g: fitness(snapshot, g, vbatches))
    for row in result.generation_rows:
        rundir.append_log("search", row)
    best = result.best
    save_checkpoint(
        rundir.stage_ckpt(3), "search", 0, cfg.config_hash(),
        _net_arrays(net, None),
        _net_state(net, None, {
            "pca": pca.rows,
            "best_genome": best.genome.to_text(),
            "best_fitness": best.fitness,
            "best_params": best.params,
        }))
    return best


def stage_heads(cfg, rundir, bundle, net, pca, best):
    seed = cfg["run.seed"]
    snapshot = net.snapshot()
    probes = tr.probe_inputs(bundle, seed, cfg["train.batch_size"])
    causal = cfg["train.objective"] == "clm"
    final_genome, matrices = apply_head_search(
        snapshot, best.genome, cfg["heads.eta"], probes, causal=causal)
    final_genome.save(rundir.file("genome.final"))
    cka_rows = []
    for m in matrices:
        h = m.q.shape[0]
        for i in range(h):
            for j in range(h):
                cka_rows.append([m.layer, i, j, float(m.q[i, j])])
    export_figures_from_state(rundir, pca.rows, cka_rows)
    save_checkpoint(
        rundir.stage_ckpt(4), "heads", 0, cfg.config_hash(),
        _net_arrays(net, None),
        _net_state(net, None, {
            "pca": pca.rows,
            "best_genome": best.genome.to_text(),
            "best_fitness": best.fitness,
            "best_params": best.params,
            "final_genome": final_genome.to_text(),
            "cka": cka_rows,
        }))
    return final_genome


def export_figures_from_state(rundir, pca_rows, cka_rows) -> None:
    export_figure_data(_pca_from_state(pca_rows), rundir.file("figures",
                                                              "pca.csv"))
    by_layer = {}
    for layer, i, j, value in cka_rows:
        by_layer.setdefault(int(layer), []).append((int(i), int(j),
                                                    float(value)))
    for layer, entries in sorted(by_layer.items()):
        h = max(i for i, _, _ in entries) + 1
        q = np.zeros((h, h))
        for i, j, value in entries:
            q[i, j] = value
        export_figure_data(CkaMatrix(layer=layer, q=q),
                           rundir.file("figures", f"cka-layer-{layer}.csv"))


# -- run orchestration --------------------------------------------------------


def _write_or_check_config(cfg, rundir, resume: bool, force: bool) -> None:
    path = rundir.file("config.resolved")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            existing = SearchConfig.from_text(fh.read())
        if existing.config_hash() != cfg.config_hash() and resume and \
                not force:
            raise ConfigError(
                f"config.resolved in {rundir.path} hashes to "
                f"{existing.config_hash()}, current config to "
                f"{cfg.config_hash()}; pass force to resume anyway"
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.to_text())


def _try_load_stage(rundir, k: int, cfg, force: bool):
    path = rundir.stage_ckpt(k)
    if not checkpoint_exists(path):
        return None
    try:
        return load_checkpoint(path, expect_hash=cfg.config_hash(),
                               force=force)
    except DataError as e:
        print(f"stage-{k} checkpoint unusable, rerunning: {e}",
              file=sys.stderr)
        return None


def run_until(cfg: SearchConfig, last_stage: str, resume: bool = False,
              force: bool = False, verify_f64: bool = False,
              require_previous: bool = False) -> dict:
    """Run stages in order through `last_stage`.

    With `require_previous`, stages before `last_stage` must already
    have checkpoints (the per-stage CLI contract); without it, missing
    stages are run (the run-all contract). With `resume`, a completed
    `last_stage` is loaded instead of rerun.
    """
    if last_stage not in STAGE_NAMES:
        raise ContractError(f"unknown stage {last_stage!r}")
    cfg.validate()
    last_idx = STAGE_NAMES.index(last_stage)
    rundir = RunDir(cfg["paths.workdir"])
    rundir.lock()
    try:
        _write_or_check_config(cfg, rundir, resume, force)
        bundle = tr.load_corpus(cfg["paths.corpus"], cfg["train.seq_len"],
                                cfg["model.vocab_limit"])
        vocab_path = rundir.file("vocab.txt")
        bundle.vocab.save(vocab_path)

        net = opt = pca = best = final_genome = None

        for k, name in enumerate(STAGE_NAMES[: last_idx + 1], start=1):
            is_last = k - 1 == last_idx
            # Earlier stages load only under --resume, or when the
            # per-stage CLI contract demands their checkpoints exist;
            # a fresh run-all recomputes everything.
            may_load = resume or (require_previous and not is_last)
            ckpt = _try_load_stage(rundir, k, cfg, force) if may_load else None
            if ckpt is not None:
                try:
                    if name in ("pretrain", "finetune"):
                        net, opt = _restore_supernet(cfg, bundle.vocab.size,
                                                     ckpt)
                        pca = _pca_from_state(ckpt.state["pca"])
                    elif name == "search":
                        net, _ = _restore_supernet(cfg, bundle.vocab.size,
                                                   ckpt)
                        pca = _pca_from_state(ckpt.state["pca"])
                        best = _best_from_state(ckpt.state)
                    else:
                        net, _ = _restore_supernet(cfg, bundle.vocab.size,
                                                   ckpt)
                        pca = _pca_from_state(ckpt.state["pca"])
                        best = _best_from_state(ckpt.state)
                        final_genome = ArchGenome.from_text(
                            ckpt.state["final_genome"])
                except ElmError as e:
                    _stage_tagged(name)(e)
                continue
            if not is_last and require_previous:
                raise DataError(
                    f"stage {name} has no checkpoint in {rundir.path}; "
                    f"run its subcommand first"
                )
            try:
                if name == "pretrain":
                    net, opt, pca = stage_pretrain(cfg, rundir, bundle,
                                                   verify_f64)
                elif name == "finetune":
                    net, opt = stage_finetune(cfg, rundir, bundle, net, opt,
                                              pca, verify_f64)
                elif name == "search":
                    best = stage_search(cfg, rundir, bundle, net, pca)
                else:
                    final_genome = stage_heads(cfg, rundir, bundle, net, pca,
                                               best)
            except ElmError as e:
                _stage_tagged(name)(e)

        report = {"config_hash": cfg.config_hash(),
                  "vocab_size": bundle.vocab.size}
        if best is not None:
            report["best_genome"] = best.genome.to_text()
            report["best_fitness"] = best.fitness
            report["best_params"] = best.params
        if final_genome is not None:
            dims = cfg.model_dims(bundle.vocab.size)
            report["final_genome"] = final_genome.to_text()
            report["final_heads"] = list(final_genome.heads)
            report["final_params"] = count_params(final_genome, dims)
        if last_stage == "heads":
            with open(rundir.file("report.json"), "w", encoding="utf-8",
                      newline="\n") as fh:
                json.dump(report, fh, sort_keys=True, indent=2)
                fh.write("\n")
        return report
    finally:
        rundir.unlock()


def _best_from_state(state: dict):
    return EvalRecord(genome=ArchGenome.from_text(state["best_genome"]),
                      fitness=float(state["best_fitness"]),
                      params=int(state["best_params"]), generation=-1)


def run_search(cfg: SearchConfig, resume: bool = False, force: bool = False,
               verify_f64: bool = False) -> dict:
    """All four stages in order; the run-all contract."""
    return run_until(cfg, "heads", resume=resume, force=force,
                     verify_f64=verify_f64, require_previous=False)


# -- final model / teacher ----------------------------------------------------


def teacher_genome(dims) -> ArchGenome:
    """The fixed wide architecture used for teacher pretraining: plain
    attention without sharing and fully grown FFNs at every layer."""
    n = dims.n_layers
    return ArchGenome(tuple(0 for _ in range(n)),
                      tuple(dims.ffn_max for _ in range(n)),
                      tuple(dims.heads for _ in range(n)))


def _load_teacher(cfg, vocab_size: int):
    path = cfg["kd.teacher"]
    if not checkpoint_exists(path):
        raise ConfigError(f"kd.teacher {path!r} is not a checkpoint")
    ckpt = load_checkpoint(path)
    return _restore_final_model(cfg, ckpt, vocab_size)


def train_final(cfg: SearchConfig, genome: ArchGenome, *,
                out_name: str = "final.ckpt", stage_tag: str = "final",
                verify_f64: bool = False) -> dict:
    """Fresh model for the genome, trained on the pretraining slice and
    evaluated on the validation slice."""
    cfg.validate()
    seed = cfg["run.seed"]
    rundir = RunDir(cfg["paths.workdir"])
    rundir.lock()
    try:
        rundir.clear_log("train", stage_tag)
        bundle = tr.load_corpus(cfg["paths.corpus"], cfg["train.seq_len"],
                                cfg["model.vocab_limit"])
        dims = cfg.model_dims(bundle.vocab.size)
        genome.validate(dims)
        model = FinalModel(dims, genome,
                           rng_for(seed, f"{stage_tag}.init"))
        kd = None
        if cfg["kd.mode"] != "none" and stage_tag == "final":
            teacher_model = _load_teacher(cfg, bundle.vocab.size)
            kd = tr.make_kd_context(
                teacher_model, dims.n_layers, dims.hidden, cfg["kd.mode"],
                (cfg["kd.lambda_cd"], cfg["kd.lambda_ad"],
                 cfg["kd.lambda_fd"]), rng_for(seed, f"{stage_tag}.kdproj"))
        params = dict(model.params)
        if kd is not None:
            params.update(kd.param_dict())
        opt = tr.build_optimizer(params, cfg)
        epochs = cfg["train.epochs_final"]
        total = _total_steps(bundle.pretrain.shape[0],
                             cfg["train.batch_size"], epochs)
        vbatches = tr.val_batches(bundle, cfg["train.objective"],
                                  cfg["train.mask_prob"], seed,
                                  cfg["train.batch_size"])
        steps_done = 0
        for epoch in range(epochs):
            stats = tr.train_model_epoch(
                model, opt, cfg, bundle.pretrain, stage=stage_tag,
                epoch=epoch, seed=seed, total_steps=total,
                step_offset=steps_done, kd=kd, verify_f64=verify_f64)
            steps_done += stats.steps
            val = tr.evaluate_model(model, vbatches)
            rundir.append_log("train", {
                "stage": stage_tag, "epoch": epoch, "loss": stats.mean_loss,
                "lr": stats.last_lr, "val_loss": val["loss"],
                "val_accuracy": val["accuracy"], "kd_mode": cfg["kd.mode"],
            })
        metrics = tr.evaluate_model(model, vbatches)
        metrics["params"] = count_params(genome, dims)
        arrays = {name: t.data for name, t in model.params.items()}
        if kd is not None:
            arrays.update({name: t.data
                           for name, t in kd.projections.items()})
        save_checkpoint(
            rundir.file(out_name), stage_tag, max(epochs - 1, 0),
            cfg.config_hash(), arrays,
            {"genome": genome.to_text(), "vocab_size": bundle.vocab.size,
             "dims": _dims_fields(dims), "metrics": metrics,
             "kd_mode": cfg["kd.mode"]})
        return metrics
    finally:
        rundir.unlock()


def pretrain_teacher(cfg: SearchConfig, verify_f64: bool = False) -> dict:
    """Teacher provisioning: train_final on the fixed wide genome."""
    dims = cfg.model_dims(max(4, cfg["model.vocab_limit"]))
    return train_final(cfg, teacher_genome(dims), out_name="teacher.ckpt",
                       stage_tag="teacher", verify_f64=verify_f64)


def evaluate_final(cfg: SearchConfig, ckpt_name: str = "final.ckpt") -> dict:
    """Reload a trained model and score it on the validation slice."""
    cfg.validate()
    rundir = RunDir(cfg["paths.workdir"])
    bundle = tr.load_corpus(cfg["paths.corpus"], cfg["train.seq_len"],
                            cfg["model.vocab_limit"])
    path = rundir.file(ckpt_name)
    if not checkpoint_exists(path):
        raise DataError(f"no model checkpoint at {path}")
    ckpt = load_checkpoint(path, expect_hash=cfg.config_hash(), force=True)
    model = _restore_final_model(cfg, ckpt, bundle.vocab.size)
    vbatches = tr.val_batches(bundle, cfg["train.objective"],
                              cfg["train.mask_prob"], cfg["run.seed"],
                              cfg["train.batch_size"])
    metrics = tr.evaluate_model(model, vbatches)
    metrics["params"] = count_params(model.genome, model.dims)
    return metrics


# -- analysis entry points ----------------------------------------------------


def _latest_supernet(cfg, rundir, vocab_size: int):
    for k in (4, 3, 2, 1):
        path = rundir.stage_ckpt(k)
        if checkpoint_exists(path):
            ckpt = load_checkpoint(path, expect_hash=cfg.config_hash(),
                                   force=True)
            net, _ = _restore_supernet(cfg, vocab_size, ckpt)
            return net, ckpt
    raise DataError(f"no supernet checkpoint in {rundir.path}; "
                    "run pretrain-supernet first")


def analyze(cfg: SearchConfig, kind: str, layer: int = None) -> list:
    """Write the requested figure CSVs; returns the paths written."""
    cfg.validate()
    rundir = RunDir(cfg["paths.workdir"])
    rundir.lock()
    try:
        bundle = tr.load_corpus(cfg["paths.corpus"], cfg["train.seq_len"],
                                cfg["model.vocab_limit"])
        net, ckpt = _latest_supernet(cfg, rundir, bundle.vocab.size)
        if kind == "pca":
            table = _pca_from_state(ckpt.state["pca"])
            path = rundir.file("figures", "pca.csv")
            export_figure_data(table, path)
            return [path]
        probes = tr.probe_inputs(bundle, cfg["run.seed"],
                                 cfg["train.batch_size"])
        causal = cfg["train.objective"] == "clm"
        if kind == "cka":
            genome = _analysis_genome(net, ckpt)
            _, matrices = apply_head_search(net.snapshot(), genome,
                                            cfg["heads.eta"], probes,
                                            causal=causal)
            paths = []
            wanted = matrices if layer is None else [matrices[layer]]
            for m in wanted:
                path = rundir.file("figures", f"cka-layer-{m.layer}.csv")
                export_figure_data(m, path)
                paths.append(path)
            return paths
        if kind == "blocksim":
            table = block_similarity_table(net, probes)
            path = rundir.file("figures", "blocksim.csv")
            export_figure_data(table, path)
            return [path]
        raise ConfigError(f"unknown analysis {kind!r}; "
                          "expected pca, cka or blocksim")
    finally:
        rundir.unlock()


def _analysis_genome(net, ckpt) -> ArchGenome:
    if "final_genome" in ckpt.state:
        return ArchGenome.from_text(ckpt.state["final_genome"])
    if "best_genome" in ckpt.state:
        return ArchGenome.from_text(ckpt.state["best_genome"])
    return net.genome_with_current_dims(
        [net.candidates[0]] * net.dims.n_layers)


def block_similarity_table(net, probes) -> SimilarityTable:
    """Pairwise block-output similarity per layer, every candidate pair,
    from single-candidate stack traces on the probe batches."""
    feats = {}
    for j in net.candidates:
        genome = net.genome_with_current_dims([j] * net.dims.n_layers)
        outs = [[] for _ in range(net.dims.n_layers)]
        for x in probes:
            _, trace = net.forward_path(genome, x, trace=True)
            for l, t in enumerate(trace.layer_out):
                outs[l].append(t.data.reshape(-1, t.shape[-1]))
        for l in range(net.dims.n_layers):
            feats[(l, j)] = np.concatenate(outs[l], axis=0)
    table = SimilarityTable()
    for l in range(net.dims.n_layers):
        for a_pos, a in enumerate(net.candidates):
            for b in net.candidates[a_pos + 1:]:
                value = block_similarity([feats[(l, a)], feats[(l, b)]])
                table.add(l, a, b, value)
    return table


def export_figures(cfg: SearchConfig) -> list:
    """Re-derive every figure CSV from checkpoint state alone."""
    cfg.validate()
    rundir = RunDir(cfg["paths.workdir"])
    rundir.lock()
    try:
        for k in (4, 3, 2, 1):
            path = rundir.stage_ckpt(k)
            if checkpoint_exists(path):
                ckpt = load_checkpoint(path, expect_hash=cfg.config_hash(),
                                       force=True)
                export_figures_from_state(rundir, ckpt.state["pca"],
                                          ckpt.state.get("cka", []))
                written = [rundir.file("figures", "pca.csv")]
                layers = sorted({int(r[0])
                                 for r in ckpt.state.get("cka", [])})
                written += [rundir.file("figures", f"cka-layer-{l}.csv")
                            for l in layers]
                return written
        raise DataError(f"no checkpoints in {rundir.path}")
    finally:
        rundir.unlock()
