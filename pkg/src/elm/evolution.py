"""Constraint-aware evolutionary search over architecture genomes.

Standard single-path-supernet recipe: a budget-filtered random initial
population, then per generation keep the top elites, breed offspring
from the top-`parents` pool with uniform per-layer crossover and
per-gene mutation, and reject any offspring that busts the parameter
ceiling (rebreeding up to a cap, after which the ceiling is declared
infeasible). Fitness is evaluated once per distinct genome and memoized.

Breeding prefers genomes not seen in any earlier population: a bounded
number of extra draws (NOVELTY_CAP) is spent looking for a fresh one
before a duplicate is accepted. Over a large space this almost never
triggers; over a small space it keeps the search from stalling on
re-evaluations. Only budget rejections count toward the infeasibility
cap.

Everything is deterministic given (seed, snapshot, batches): selection
sorts by (fitness desc, genome encoding asc), and every random draw
comes from the single generator passed in.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .corpus import PAD_ID
from .errors import ConfigError, ContractError
from .genome import (ArchGenome, ModelDims, ParamBudget, candidate_pools,
                     check_budget, random_genome)

REJECTION_CAP = 1000
NOVELTY_CAP = 100


@dataclass(frozen=True)
class EvoConfig:
    population: int = 50
    generations: int = 40
    crossover_p: float = 1.0
    mutation_p: float = 0.1
    parents: int = 10
    elites: int = 2

    def __post_init__(self):
        if not self.population >= self.parents >= 2:
            raise ContractError(
                f"need population >= parents >= 2, got {self.population} and "
                f"{self.parents}"
            )
        if not 0 <= self.elites <= self.population:
            raise ContractError(f"elites {self.elites} outside population")
        for name, p in (("crossover_p", self.crossover_p),
                        ("mutation_p", self.mutation_p)):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must be in [0, 1], got {p}")
        if self.generations < 1:
            raise ContractError("need at least one generation")


@dataclass(frozen=True)
class EvalRecord:
    genome: ArchGenome
    fitness: float
    params: int
    generation: int


@dataclass
class EvolutionResult:
    best: EvalRecord
    records: list            # one per distinct evaluated genome
    generation_rows: list    # JSONL-ready dicts for the search log


def crossover(a: ArchGenome, b: ArchGenome, rng) -> ArchGenome:
    """Uniform per-layer gene inheritance; one coin per layer."""
    if a.n_layers != b.n_layers:
        raise ContractError(
            f"crossover needs equal depths, got {a.n_layers} and {b.n_layers}"
        )
    choices, ffn, heads = [], [], []
    for l in range(a.n_layers):
        donor = a if rng.random() < 0.5 else b
        choices.append(donor.choices[l])
        ffn.append(donor.ffn_dims[l])
        heads.append(donor.heads[l])
    return ArchGenome(tuple(choices), tuple(ffn), tuple(heads))


def mutate(g: ArchGenome, p: float, rng, dims: ModelDims,
           ffn_table: dict) -> ArchGenome:
    """Re-roll each layer to a uniform random candidate with probability p;
    the re-rolled layer's ffn dim comes from the current supernet state."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"mutation probability {p} outside [0, 1]")
    pools = candidate_pools(ffn_table, g.n_layers)
    choices, ffn = list(g.choices), list(g.ffn_dims)
    for l in range(g.n_layers):
        if rng.random() < p:
            j = pools[l][int(rng.integers(0, len(pools[l])))]
            choices[l] = j
            ffn[l] = ffn_table[(l, j)]
    return ArchGenome(tuple(choices), tuple(ffn), g.heads)


def fitness(snapshot, genome: ArchGenome, val_batches) -> float:
    """Masked-prediction accuracy (or negative loss for the causal
    objective) of one genome over a fixed validation batch list."""
    if not val_batches:
        raise ContractError("fitness needs at least one validation batch")
    objective = val_batches[0].objective
    correct = 0
    total = 0
    loss_sum = 0.0
    for batch in val_batches:
        logits, _ = snapshot.forward_path(
            genome, batch.input_ids, causal=(objective == "clm"))
        mask = batch.loss_mask
        if objective == "mlm":
            pred = np.argmax(logits.data, axis=-1)
            correct += int((pred[mask] == batch.target_ids[mask]).sum())
            total += int(mask.sum())
        else:
            logp = ag.log_softmax_rows(logits)
            picked = np.take_along_axis(
                logp.data, batch.target_ids[..., None], axis=-1)[..., 0]
            loss_sum += -float(picked[mask].sum())
            total += int(mask.sum())
    if total == 0:
        raise ContractError("validation batches select no scored positions")
    if objective == "mlm":
        return correct / total
    return -loss_sum / total


def _sample_until_budgeted(make, dims, budget, seen=frozenset()):
    budget_rejects = 0
    novelty_rejects = 0
    while True:
        g = make()
        res = check_budget(g, dims, budget)
        if not res.ok:
            budget_rejects += 1
            if budget_rejects >= REJECTION_CAP:
                raise ConfigError(
                    f"ceiling infeasible: {REJECTION_CAP} genomes exceeded "
                    f"{budget.ceiling} parameters"
                )
            continue
        if g in seen and novelty_rejects < NOVELTY_CAP:
            novelty_rejects += 1
            continue
        return g, res.count


def run_evolution(cfg: EvoConfig, dims: ModelDims, budget: ParamBudget,
                  ffn_table: dict, rng, fitness_fn,
                  on_generation=None) -> EvolutionResult:
    """Search the genome space under the ceiling; returns the best record.

    `fitness_fn(genome) -> float` is injected so fitness can be the
    supernet evaluation, an ablation variant, or a lookup table in tests.
    """
    memo = {}
    counts = {}
    records = []
    gen_rows = []

    def evaluate(g: ArchGenome, generation: int) -> float:
        if g not in memo:
            memo[g] = float(fitness_fn(g))
            records.append(EvalRecord(g, memo[g], counts[g], generation))
        return memo[g]

    seen = set()
    population = []
    for _ in range(cfg.population):
        g, n = _sample_until_budgeted(
            lambda: random_genome(rng, dims, ffn_table), dims, budget, seen)
        counts[g] = n
        seen.add(g)
        population.append(g)

    best_fitness_seen = -np.inf
    for gen in range(cfg.generations):
        scored = [(evaluate(g, gen), g) for g in population]
        ranked = sorted(scored, key=lambda fg: (-fg[0], fg[1].choices))
        best_fitness_seen = max(best_fitness_seen, ranked[0][0])
        for fit, g in scored:
            gen_rows.append({
                "generation": gen,
                "genome": g.to_text(),
                "fitness": fit,
                "params": counts[g],
            })
        if on_generation is not None:
            on_generation(gen, ranked[0][1], ranked[0][0])
        if gen == cfg.generations - 1:
            break
        elites = [g for _, g in ranked[: cfg.elites]]
        pool = [g for _, g in ranked[: cfg.parents]]
        children = []
        while len(children) < cfg.population - len(elites):
            def breed():
                pa = pool[int(rng.integers(0, len(pool)))]
                pb = pool[int(rng.integers(0, len(pool)))]
                child = crossover(pa, pb, rng) if rng.random() < cfg.crossover_p \
                    else pa
                return mutate(child, cfg.mutation_p, rng, dims, ffn_table)

            child, n = _sample_until_budgeted(breed, dims, budget, seen)
            counts[child] = n
            seen.add(child)
            children.append(child)
        population = elites + children

    best = min(records, key=lambda r: (-r.fitness, r.genome.choices))
    return EvolutionResult(best=best, records=records, generation_rows=gen_rows)
