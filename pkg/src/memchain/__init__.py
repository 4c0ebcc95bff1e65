"""memchain: flat turn-level memory with gated memory-chain evolution."""

from .assembly import count_tokens, merge_chains, render_node
from .chain import EvolutionTrace, evolve, expand_step, gate_score, init_chains, update_chain_embedding
from .embedding import (
    DeterministicTestEmbedder,
    EmbeddingProvider,
    HttpEmbeddingProvider,
    cosine,
    embed_text,
    normalize,
)
from .model import (
    AssembledContext,
    CandidatePool,
    ChainConfig,
    MemoryChain,
    MemoryNode,
    Query,
    Role,
    ScoredNode,
    derive_node_id,
    validate_config,
)
from .store import MemoryStore, ingest_session, load_store, retrieve_top_k, save_store

__version__ = "0.1.0"
