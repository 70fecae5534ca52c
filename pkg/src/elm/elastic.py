"""Dynamic-search decisions: top-K dimension growth and head-count search.

Both are pure decision functions. Growth selection ranks blocks by PCA
score (descending, ties broken by layer then candidate index), skips
blocks already at ffn_max by promoting the next ranked, and truncates
the list at the first growth that would push the most-expensive-path
param count over the budget ceiling. Head search transcribes the
redundancy-elimination pseudocode literally: the outer index skips
already-removed heads, the inner index compares every later head
(including already-removed ones) against the threshold, and the
resulting count is decremented until it divides the attention width.
"""

from dataclasses import dataclass

import numpy as np

from .analysis import CkaMatrix, cka_heads
from .errors import ContractError
from .genome import (ArchGenome, ModelDims, ParamBudget, count_params,
                     max_params_genome)


@dataclass(frozen=True)
class GrowthPolicy:
    k: int
    step: int
    ffn_max: int
    budget: ParamBudget

    def __post_init__(self):
        if self.k < 0:
            raise ContractError(f"growth K must be >= 0, got {self.k}")
        if self.step <= 0:
            raise ContractError(f"growth step must be positive, got {self.step}")


@dataclass(frozen=True)
class HeadSearchPolicy:
    eta: float
    width: int  # attention width the head count must divide

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ContractError(f"eta must be in (0, 1], got {self.eta}")
        if self.width < 1:
            raise ContractError(f"width must be positive, got {self.width}")


def select_growth(scores: dict, policy: GrowthPolicy, dims: ModelDims,
                  ffn_table: dict) -> list:
    """Choose up to K (layer, cand) blocks to grow by one step.

    `scores` and `ffn_table` must cover exactly the trainable blocks.
    The budget guard prices the most expensive single path under the
    post-growth table; the first unaffordable growth truncates the list.
    """
    if set(scores) != set(ffn_table):
        missing = set(ffn_table) ^ set(scores)
        raise ContractError(
            f"scores must cover exactly the trainable blocks; mismatch at "
            f"{sorted(missing)[:4]}"
        )
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    table = dict(ffn_table)
    chosen = []
    for (layer, cand), _score in ranked:
        if len(chosen) >= policy.k:
            break
        current = table[(layer, cand)]
        if current + policy.step > policy.ffn_max:
            continue  # at cap: skip, next-ranked is promoted
        table[(layer, cand)] = current + policy.step
        guard = max_params_genome(dims, table)
        count = count_params(guard, dims, policy.budget.embedding_counted)
        if count > policy.budget.ceiling:
            break  # ceiling truncation
        chosen.append((layer, cand))
    return chosen


def search_head_count(q, policy: HeadSearchPolicy) -> int:
    """Redundancy-driven head count for one layer's CKA matrix.

    Literal transcription of the published procedure, including its
    quirk that heads already marked removed still serve as comparison
    targets on the inner axis.
    """
    arr = q.q if isinstance(q, CkaMatrix) else np.asarray(q)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ContractError(f"CKA matrix must be square, got {arr.shape}")
    h = arr.shape[0]
    if h < 1:
        raise ContractError("head count must be >= 1")
    removed = set()
    for i in range(h):
        if i in removed:
            continue
        for j in range(i + 1, h):
            if arr[i, j] > policy.eta:
                removed.add(j)
    h_star = h - len(removed)
    while h_star > 1 and policy.width % h_star != 0:
        h_star -= 1
    return h_star


def apply_head_search(snapshot, genome: ArchGenome, eta: float,
                      probe_batches, causal: bool = False):
    """Per-layer head counts for a genome, from supernet traces.

    Traces the genome over the probe batches (at the supernet's default
    head count), builds one CKA matrix per layer from concatenated
    per-head outputs, and returns (genome with searched heads, matrices).
    Supernet weights are untouched; the new counts only take effect at
    final instantiation.
    """
    if not probe_batches:
        raise ContractError("head search needs at least one probe batch")
    dims = snapshot.dims
    per_layer = None
    for batch in probe_batches:
        ids = getattr(batch, "input_ids", batch)
        _, trace = snapshot.forward_path(genome, ids, causal=causal,
                                         trace=True)
        if per_layer is None:
            per_layer = [[[h] for h in layer] for layer in trace.head_outputs]
        else:
            for layer, heads in zip(per_layer, trace.head_outputs):
                for parts, h in zip(layer, heads):
                    parts.append(h)
    matrices = []
    new_heads = []
    for l, layer_parts in enumerate(per_layer):
        heads = [np.vstack(parts) for parts in layer_parts]
        q = cka_heads(heads, layer=l)
        matrices.append(q)
        width = dims.attention_width(genome.choice(l))
        new_heads.append(search_head_count(q, HeadSearchPolicy(eta, width)))
    return genome.with_heads(new_heads), matrices
