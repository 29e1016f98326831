"""Tool-augmented memory engine for long-term conversational QA."""

from .agent import QARecord, SessionCache, TOOL_NAMES, TOOLS, answer_question, dispatch_tool
from .embeddings import HashingEmbedder, RemoteEmbedder, cosine_similarity
from .extractor import (
    ExtractionConfig,
    chunk_baseline,
    extract_notes,
    fallback_extract,
    smooth_overlap,
)
from .llm import ChatCompletionsBackend, ChatTurn, ScriptedBackend, ToolCall, Usage, count_tokens
from .memory import build_store, load_memory, save_memory
from .metrics import bleu1, normalize_answer, token_f1
from .model import (
    Conversation,
    ConversationSession,
    Event,
    Fact,
    MemoryNote,
    MemoryPage,
    Message,
    build_page,
)
from .store import MemoryStore, PersonProfile, QueryOutcome

__version__ = "0.1.0"
