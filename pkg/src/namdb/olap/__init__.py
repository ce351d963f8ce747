from .aggregate import AGG_ALGORITHMS, AggFn, AggResult, agg_hierarchical, agg_rdma, aggregate_oracle
from .bloom import BloomFilter, bloom_build, bloom_contains, bloom_parameters
from .join import (
    JOIN_ALGORITHMS,
    JoinResult,
    default_fanout,
    ghj,
    ghj_bloom,
    local_radix_join,
    nested_loop_join,
    rdma_ghj,
    rrj,
)
from .relation import Relation, gen_agg_input, gen_join_pair, gen_random_pair, mix64

__all__ = [
    "AGG_ALGORITHMS", "AggFn", "AggResult", "BloomFilter", "JOIN_ALGORITHMS", "JoinResult", "Relation",
    "agg_hierarchical", "agg_rdma", "aggregate_oracle", "bloom_build", "bloom_contains",
    "bloom_parameters", "default_fanout", "gen_agg_input", "gen_join_pair", "gen_random_pair", "ghj",
    "ghj_bloom", "local_radix_join", "mix64", "nested_loop_join", "rdma_ghj", "rrj",
]
