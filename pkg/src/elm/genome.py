"""Architecture genomes: the per-layer block choices being searched over.

Each layer picks one of six candidates: {Standard, Bottleneck} crossed
with {no sharing, query/value shared, key/value shared}. A genome adds
per-layer FFN dimensions (set by the growth schedule) and head counts
(set by head search). Parameter counting is closed-form and must equal
tensor enumeration of an instantiated model exactly; the evolutionary
search leans on that equality to enforce the parameter ceiling.
"""

from dataclasses import dataclass

from .errors import ContractError, DataError

KIND_STANDARD = "std"
KIND_BOTTLENECK = "btl"
SHARE_NONE = "none"
SHARE_QV = "qv"
SHARE_KV = "kv"


@dataclass(frozen=True)
class BlockChoice:
    kind: str
    share: str


# candidate order is part of the genome encoding: 0-2 Standard, 3-5
# Bottleneck, sharing cycling none/qv/kv within each kind
CANDIDATES = (
    BlockChoice(KIND_STANDARD, SHARE_NONE),
    BlockChoice(KIND_STANDARD, SHARE_QV),
    BlockChoice(KIND_STANDARD, SHARE_KV),
    BlockChoice(KIND_BOTTLENECK, SHARE_NONE),
    BlockChoice(KIND_BOTTLENECK, SHARE_QV),
    BlockChoice(KIND_BOTTLENECK, SHARE_KV),
)

N_CANDIDATES = len(CANDIDATES)

_GENOME_MAGIC = "ELMGENOME 1"


@dataclass(frozen=True)
class ModelDims:
    """Static model geometry shared by every genome in a run."""

    n_layers: int
    hidden: int          # C: trunk width
    heads: int           # default head count before head search
    inner: int           # c: bottleneck attention width, fixed across growth
    ffn_init: int
    ffn_step: int
    ffn_max: int
    n_max: int           # positional embedding rows
    vocab_size: int
    tie_head: bool = False

    def validate(self) -> None:
        if self.hidden % self.heads != 0:
            raise ContractError(
                f"hidden {self.hidden} not divisible by heads {self.heads}"
            )
        if self.inner % self.heads != 0:
            raise ContractError(
                f"inner width {self.inner} not divisible by heads {self.heads}"
            )
        if self.ffn_init % self.ffn_step != 0 or self.ffn_init <= 0:
            raise ContractError(
                f"ffn_init {self.ffn_init} must be a positive multiple of "
                f"step {self.ffn_step}"
            )
        if self.ffn_max < self.ffn_init:
            raise ContractError(
                f"ffn_max {self.ffn_max} below ffn_init {self.ffn_init}"
            )

    def attention_width(self, choice: BlockChoice) -> int:
        return self.inner if choice.kind == KIND_BOTTLENECK else self.hidden


@dataclass(frozen=True)
class ParamBudget:
    ceiling: int
    embedding_counted: bool = True

    def __post_init__(self):
        if self.ceiling <= 0:
            raise ContractError(f"budget ceiling must be positive, got {self.ceiling}")


@dataclass(frozen=True)
class ArchGenome:
    """One architecture: per-layer (candidate index, ffn_dim, head count)."""

    choices: tuple
    ffn_dims: tuple
    heads: tuple

    def __post_init__(self):
        if not (len(self.choices) == len(self.ffn_dims) == len(self.heads)):
            raise ContractError(
                f"genome field lengths differ: {len(self.choices)} choices, "
                f"{len(self.ffn_dims)} ffn dims, {len(self.heads)} head counts"
            )

    @property
    def n_layers(self) -> int:
        return len(self.choices)

    def choice(self, layer: int) -> BlockChoice:
        return CANDIDATES[self.choices[layer]]

    def validate(self, dims: ModelDims) -> None:
        if self.n_layers != dims.n_layers:
            raise ContractError(
                f"genome has {self.n_layers} layers, model has {dims.n_layers}"
            )
        for l in range(self.n_layers):
            j = self.choices[l]
            if not 0 <= j < N_CANDIDATES:
                raise ContractError(f"layer {l}: candidate index {j} out of range")
            d = self.ffn_dims[l]
            if d < dims.ffn_init:
                raise ContractError(
                    f"layer {l}: ffn_dim {d} below minimum {dims.ffn_init}"
                )
            if d > dims.ffn_max or d % dims.ffn_step != 0:
                raise ContractError(
                    f"layer {l}: ffn_dim {d} not a step multiple within "
                    f"[{dims.ffn_init}, {dims.ffn_max}]"
                )
            h = self.heads[l]
            width = dims.attention_width(self.choice(l))
            if h < 1 or width % h != 0:
                raise ContractError(
                    f"layer {l}: attention width {width} not divisible by "
                    f"heads {h}"
                )

    def with_heads(self, heads) -> "ArchGenome":
        return ArchGenome(self.choices, self.ffn_dims, tuple(heads))

    def to_text(self) -> str:
        lines = [_GENOME_MAGIC]
        for l in range(self.n_layers):
            c = self.choice(l)
            lines.append(
                f"layer={l} kind={c.kind} share={c.share} "
                f"ffn={self.ffn_dims[l]} heads={self.heads[l]}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchGenome":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != _GENOME_MAGIC:
            raise DataError(f"genome text missing '{_GENOME_MAGIC}' header")
        choices, ffn_dims, heads = [], [], []
        by_index = {c: i for i, c in enumerate(CANDIDATES)}
        for ln in lines[1:]:
            fields = {}
            for tok in ln.split():
                if "=" not in tok:
                    raise DataError(f"bad genome token {tok!r}")
                k, v = tok.split("=", 1)
                fields[k] = v
            try:
                layer = int(fields["layer"])
                choice = BlockChoice(fields["kind"], fields["share"])
                j = by_index[choice]
                ffn_dims.append(int(fields["ffn"]))
                heads.append(int(fields["heads"]))
            except (KeyError, ValueError) as e:
                raise DataError(f"bad genome line {ln!r}") from e
            if layer != len(choices):
                raise DataError(f"genome layers out of order at {ln!r}")
            choices.append(j)
        return cls(tuple(choices), tuple(ffn_dims), tuple(heads))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ArchGenome":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


# ---------------------------------------------------------------------------
# parameter counting


def attention_params(width: int, share: str) -> int:
    """Q/K/V/output projections with biases; sharing merges one pair."""
    n_proj = 4 if share == SHARE_NONE else 3
    return n_proj * (width * width + width)


def ffn_params(width: int, d: int) -> int:
    return 2 * width * d + d + width


def block_params(choice: BlockChoice, ffn_dim: int, dims: ModelDims) -> int:
    """Closed-form count for one block; must match tensor enumeration."""
    c_out = dims.hidden
    if choice.kind == KIND_STANDARD:
        return (
            attention_params(c_out, choice.share)
            + ffn_params(c_out, ffn_dim)
            + 4 * c_out
        )
    c_in = dims.inner
    entry = c_out * c_in + c_in
    exit_ = c_in * c_out + c_out
    norms = 6 * c_in + 2 * c_out
    return (
        entry
        + attention_params(c_in, choice.share)
        + ffn_params(c_in, ffn_dim)
        + exit_
        + norms
    )


def shared_params(dims: ModelDims) -> int:
    """Embeddings, final norm and output head, identical for all genomes."""
    c, v = dims.hidden, dims.vocab_size
    emb = v * c + dims.n_max * c
    final_norm = 2 * c
    head = v if dims.tie_head else c * v + v
    return emb + final_norm + head


def count_params(genome: ArchGenome, dims: ModelDims,
                 include_embeddings: bool = True) -> int:
    genome.validate(dims)
    total = sum(
        block_params(genome.choice(l), genome.ffn_dims[l], dims)
        for l in range(genome.n_layers)
    )
    if include_embeddings:
        total += shared_params(dims)
    return total


@dataclass(frozen=True)
class BudgetCheck:
    ok: bool
    count: int


def check_budget(genome: ArchGenome, dims: ModelDims,
                 budget: ParamBudget) -> BudgetCheck:
    """Pass iff the genome's count is at or under the ceiling (inclusive)."""
    count = count_params(genome, dims, budget.embedding_counted)
    return BudgetCheck(ok=count <= budget.ceiling, count=count)


def max_params_genome(dims: ModelDims, ffn_table: dict) -> ArchGenome:
    """The most expensive single path at the current elastic state.

    `ffn_table` maps (layer, candidate) to that block's current ffn_dim.
    Used as the budget guard: if this genome fits the ceiling, every
    sampled path does.
    """
    choices, ffn_dims = [], []
    pools = candidate_pools(ffn_table, dims.n_layers)
    for l in range(dims.n_layers):
        best_j, best_cost = pools[l][0], -1
        for j in pools[l]:
            cost = block_params(CANDIDATES[j], ffn_table[(l, j)], dims)
            if cost > best_cost:
                best_j, best_cost = j, cost
        choices.append(best_j)
        ffn_dims.append(ffn_table[(l, best_j)])
    return ArchGenome(
        tuple(choices), tuple(ffn_dims), tuple(dims.heads for _ in choices)
    )


def candidate_pools(ffn_table: dict, n_layers: int):
    """Per-layer candidate indices present in an ffn table (a supernet
    built with a restricted candidate set exposes a smaller pool)."""
    pools = []
    for l in range(n_layers):
        pool = sorted(j for (l2, j) in ffn_table if l2 == l)
        if not pool:
            raise ContractError(f"layer {l} has no candidate blocks")
        pools.append(tuple(pool))
    return pools


def random_genome(rng, dims: ModelDims, ffn_table=None) -> ArchGenome:
    """Uniform choice per layer over the available candidates, with ffn
    dims taken from the current supernet state (ffn_init if no table)."""
    if ffn_table is None:
        choices = tuple(
            int(j) for j in rng.integers(0, N_CANDIDATES, dims.n_layers))
        ffn_dims = tuple(dims.ffn_init for _ in range(dims.n_layers))
    else:
        pools = candidate_pools(ffn_table, dims.n_layers)
        choices = tuple(
            pool[int(rng.integers(0, len(pool)))] for pool in pools)
        ffn_dims = tuple(ffn_table[(l, choices[l])] for l in range(dims.n_layers))
    heads = tuple(dims.heads for _ in range(dims.n_layers))
    return ArchGenome(choices, ffn_dims, heads)
