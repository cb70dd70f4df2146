"""Multi-step retrieval over a knowledge graph with a hypergraph working memory."""

from .corpus import Chunk, TokenizerSpec, chunk_document, read_corpus
from .embedding import HashingEmbedder, ScriptedEmbedder, VectorIndex, cosine_similarity, top_k
from .eval import EvalRecord, judge_accuracy, memory_stats, run_eval, score_generative
from .graph import KnowledgeGraph, extract_graph, load_graph, save_graph
from .memory import MemoryDelta, MemoryHypergraph, apply_delta, avg_entities_per_hyperedge
from .orchestrator import SessionConfig, SessionTrace, replay_trace, run_session, run_stepwise
from .providers import OpenAIChatLLM, ScriptedLLM
from .retrieval import GraphIndex, Subquery
from .synthetic import HeuristicLLM

__version__ = "0.1.0"
