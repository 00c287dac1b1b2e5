"""Uniform model access: remote chat completion, a local logit-level language
model, a quality judge, and deterministic stubs for offline runs.

Every client takes chat messages ({"role", "content"}) and never mutates
them; request/response pairs can be mirrored verbatim to a JSON-lines audit
log. Generation defaults to greedy (temperature 0).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import word_tokenize

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    """Base for gateway failures."""


class RetryableGatewayError(GatewayError):
    """Transient transport failure; safe to retry."""


class ContextOverflowError(GatewayError):
    """Prompt does not fit the model context; not retryable."""


class JudgeParseError(GatewayError):
    """Judge reply did not contain a usable 1-5 score."""


Message = dict  # {"role": ..., "content": ...}


def validate_messages(messages: Sequence[Message]) -> list[Message]:
    """Return a defensive copy after checking roles and non-empty content."""
    out = []
    for m in messages:
        role, content = m.get("role"), m.get("content")
        if role not in ROLES:
            raise ValueError(f"invalid message role {role!r}")
        if not content:
            raise ValueError("message content must be non-empty")
        out.append({"role": role, "content": content})
    return out


@dataclass(frozen=True)
class ChatParams:
    temperature: float = 0.0
    max_tokens: int = 128


class AuditLog:
    """Verbatim request/response log, JSON-lines, safe for concurrent writers."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()

    def record(self, kind: str, request: object, response: object) -> None:
        entry = {"kind": kind, "request": request, "response": response}
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False, default=str) + "\n")


class ChatClient(Protocol):
    model_id: str

    def chat_complete(
        self, messages: Sequence[Message], params: ChatParams | None = None
    ) -> str: ...


class StubChatClient:
    """Deterministic canned client for tests and offline acceptance runs.

    Resolution order: exact/substring table match on the last user message,
    then the scripted queue, then the reply function, then the default.
    """

    model_id = "stub"

    def __init__(
        self,
        table: dict[str, str] | None = None,
        script: Sequence[str] | None = None,
        reply_fn: Callable[[Sequence[Message]], str] | None = None,
        default: str | None = None,
        audit_log: AuditLog | None = None,
        fail_after: int | None = None,
    ):
        self.table = dict(table or {})
        self.script = list(script or [])
        self.reply_fn = reply_fn
        self.default = default
        self.audit_log = audit_log
        self.fail_after = fail_after
        self.calls = 0

    def chat_complete(self, messages: Sequence[Message], params: ChatParams | None = None) -> str:
        messages = validate_messages(messages)
        self.calls += 1
        if self.fail_after is not None and self.calls > self.fail_after:
            raise RetryableGatewayError("stub client configured to fail")
        last_user = next((m["content"] for m in reversed(messages) if m["role"] == "user"), "")
        reply = None
        if last_user in self.table:
            reply = self.table[last_user]
        else:
            for key, value in self.table.items():
                if key in last_user:
                    reply = value
                    break
        if reply is None and self.script:
            reply = self.script.pop(0)
        if reply is None and self.reply_fn is not None:
            reply = self.reply_fn(messages)
        if reply is None:
            if self.default is None:
                raise GatewayError("stub has no reply for this request")
            reply = self.default
        if self.audit_log:
            self.audit_log.record("chat", list(messages), reply)
        return reply


class HttpChatClient:
    """JSON-over-HTTP chat client (OpenAI-style /chat/completions shape).

    Base URL is configurable; the bearer token comes from an environment
    variable so credentials never live in config files.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key_env: str = "GRAMMARCTL_API_KEY",
        timeout: float = 60.0,
        audit_log: AuditLog | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.audit_log = audit_log

    def chat_complete(self, messages: Sequence[Message], params: ChatParams | None = None) -> str:
        import httpx

        messages = validate_messages(messages)
        params = params or ChatParams()
        payload = {
            "model": self.model_id,
            "messages": list(messages),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        headers = {}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            response = httpx.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise RetryableGatewayError(f"transport failure: {exc}") from exc
        if response.status_code == 400 and "context" in response.text.lower():
            raise ContextOverflowError(response.text)
        if response.status_code >= 500:
            raise RetryableGatewayError(f"server error {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(f"request failed {response.status_code}: {response.text[:500]}")
        reply = response.json()["choices"][0]["message"]["content"]
        if self.audit_log:
            self.audit_log.record("chat", payload, reply)
        return reply


# ---------------------------------------------------------------------------
# Local logit-level language model
# ---------------------------------------------------------------------------

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
_SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"]
_NO_SPACE_BEFORE = set(".,!?;:)]}'\"")
_NO_SPACE_AFTER = set("([{")


class WordVocab:
    """Word-level vocabulary with a handful of special tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token = list(_SPECIAL_TOKENS) + list(dict.fromkeys(tokens))
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def fit(cls, texts: Iterable[str], max_size: int = 20000) -> "WordVocab":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in word_tokenize(text):
                key = tok.lower()
                counts[key] = counts.get(key, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ranked[: max_size - len(_SPECIAL_TOKENS)])

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t.lower(), UNK) for t in word_tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        parts: list[str] = []
        for i in ids:
            if i in (PAD, BOS, EOS, SEP):
                continue
            tok = self.id_to_token[i] if 0 <= i < len(self.id_to_token) else "<unk>"
            if parts and tok in _NO_SPACE_BEFORE:
                parts[-1] = parts[-1] + tok
            elif parts and parts[-1] and parts[-1][-1] in _NO_SPACE_AFTER:
                parts[-1] = parts[-1] + tok
            else:
                parts.append(tok)
        return " ".join(parts)


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank update B @ A."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.r = r
        self.scaling = alpha / r
        self.dropout = nn.Dropout(dropout)
        self.lora_a = nn.Parameter(torch.zeros(r, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, r))
        nn.init.normal_(self.lora_a, std=1.0 / r)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * (self.dropout(x) @ self.lora_a.T @ self.lora_b.T)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, ff: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, ff), nn.ReLU(), nn.Linear(ff, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        hd = d // self.heads

        def split(m: torch.Tensor) -> torch.Tensor:
            return m.view(b, t, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        x = x + self.o(attn.transpose(1, 2).reshape(b, t, d))
        return x + self.mlp(self.ln2(x))


class TinyCausalLM(nn.Module):
    """Small word-level causal transformer exposing next-token logits.

    Serves as the local decode target: deterministic on CPU, cheap enough to
    pretrain on a fixture corpus and adapt with low-rank updates.
    """

    def __init__(
        self,
        vocab: WordVocab,
        dim: int = 128,
        n_layers: int = 2,
        heads: int = 4,
        ff: int = 256,
        max_context: int = 256,
        seed: int = 0,
        model_id: str = "tiny-lm",
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.vocab = vocab
        self.model_id = model_id
        self.max_context = max_context
        self.dim = dim
        self.tok_emb = nn.Embedding(len(vocab), dim)
        self.pos_emb = nn.Embedding(max_context, dim)
        self.blocks = nn.ModuleList(_Block(dim, heads, ff) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, len(vocab))
        self.eval()

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        b, t = ids.shape
        if t > self.max_context:
            raise ContextOverflowError(f"sequence length {t} exceeds context {self.max_context}")
        pos = torch.arange(t).unsqueeze(0)
        x = self.tok_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.ln_f(x))

    def next_token_logits(self, prefix_ids: Sequence[int]) -> np.ndarray:
        """One finite logit per vocabulary entry, for the token after the prefix."""
        if not prefix_ids:
            raise ValueError("prefix must contain at least one token (e.g. <bos>)")
        if len(prefix_ids) > self.max_context:
            raise ContextOverflowError(
                f"prefix length {len(prefix_ids)} exceeds context {self.max_context}"
            )
        with torch.no_grad():
            logits = self.forward(torch.tensor([list(prefix_ids)], dtype=torch.long))
        return logits[0, -1].numpy().astype(np.float64)

    def greedy_generate(self, prefix_ids: Sequence[int], max_new_tokens: int = 128) -> list[int]:
        """Plain greedy decode; ties break toward the lowest token id."""
        if len(prefix_ids) >= self.max_context:
            raise ContextOverflowError(
                f"prompt length {len(prefix_ids)} leaves no room in context {self.max_context}"
            )
        out = list(prefix_ids)
        generated: list[int] = []
        for _ in range(max_new_tokens):
            if len(out) >= self.max_context:
                break
            logits = self.next_token_logits(out)
            nxt = int(np.argmax(logits))
            generated.append(nxt)
            out.append(nxt)
            if nxt == EOS:
                break
        return generated

    def apply_lora(self, r: int = 64, alpha: float = 16.0, dropout: float = 0.1) -> list[str]:
        """Wrap attention q/v projections with low-rank adapters; freezes all
        base parameters and returns the adapted module names."""
        for p in self.parameters():
            p.requires_grad_(False)
        adapted = []
        for i, block in enumerate(self.blocks):
            block.q = LoRALinear(block.q, r, alpha, dropout)
            block.v = LoRALinear(block.v, r, alpha, dropout)
            adapted += [f"blocks.{i}.q", f"blocks.{i}.v"]
        self.lora_config = {"r": r, "alpha": alpha, "dropout": dropout}
        return adapted

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def render_chat_prefix(messages: Sequence[Message], vocab: WordVocab) -> list[int]:
    """Flatten chat messages into a token prefix: <bos> msg <sep> msg <sep> ..."""
    ids = [BOS]
    for m in validate_messages(messages):
        ids.extend(vocab.encode(m["content"]))
        ids.append(SEP)
    return ids


def train_language_model(
    lm: TinyCausalLM,
    texts: Sequence[str],
    epochs: int = 3,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> float:
    """Teacher-forced pretraining on raw sentences; returns final mean loss."""
    sequences = [[BOS] + lm.vocab.encode(t)[: lm.max_context - 2] + [EOS] for t in texts]
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(lm.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss(ignore_index=PAD)
    lm.train()
    final_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(len(sequences))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [sequences[i] for i in order[start : start + batch_size]]
            max_len = max(len(s) for s in batch)
            ids = torch.full((len(batch), max_len), PAD, dtype=torch.long)
            for i, s in enumerate(batch):
                ids[i, : len(s)] = torch.tensor(s)
            logits = lm(ids[:, :-1])
            loss = loss_fn(logits.reshape(-1, lm.vocab_size), ids[:, 1:].reshape(-1))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        final_loss = float(np.mean(losses))
    lm.eval()
    return final_loss


def save_language_model(lm: TinyCausalLM, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ff_layer = lm.blocks[0].mlp[0]
    meta = {
        "model_id": lm.model_id,
        "dim": lm.dim,
        "n_layers": len(lm.blocks),
        "heads": lm.blocks[0].heads,
        "ff": ff_layer.out_features,
        "max_context": lm.max_context,
        "lora": getattr(lm, "lora_config", None),
        "vocab": lm.vocab.id_to_token[len(_SPECIAL_TOKENS) :],
    }
    (directory / "model.json").write_text(json.dumps(meta), encoding="utf-8")
    torch.save(lm.state_dict(), directory / "weights.pt")


def load_language_model(directory: str | Path) -> TinyCausalLM:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text(encoding="utf-8"))
    lm = TinyCausalLM(
        WordVocab(meta["vocab"]),
        dim=meta["dim"],
        n_layers=meta["n_layers"],
        heads=meta["heads"],
        ff=meta["ff"],
        max_context=meta["max_context"],
        model_id=meta["model_id"],
    )
    if meta.get("lora"):
        lm.apply_lora(**meta["lora"])
    lm.load_state_dict(torch.load(directory / "weights.pt", weights_only=True))
    lm.eval()
    return lm


class LocalChatClient:
    """Chat interface over a TinyCausalLM: renders messages to a token prefix
    and decodes greedily."""

    def __init__(self, lm: TinyCausalLM, audit_log: AuditLog | None = None):
        self.lm = lm
        self.model_id = lm.model_id
        self.audit_log = audit_log

    def chat_complete(self, messages: Sequence[Message], params: ChatParams | None = None) -> str:
        params = params or ChatParams()
        prefix = render_chat_prefix(messages, self.lm.vocab)
        ids = self.lm.greedy_generate(prefix, max_new_tokens=params.max_tokens)
        reply = self.lm.vocab.decode(ids)
        if self.audit_log:
            self.audit_log.record("chat", list(messages), reply)
        return reply


# ---------------------------------------------------------------------------
# Quality judge
# ---------------------------------------------------------------------------


class QualityDimension(enum.Enum):
    APPROPRIATENESS = "Appropriateness"
    RELEVANCE = "Relevance"
    CONTENT_RICHNESS = "Content Richness"
    GRAMMATICAL_CORRECTNESS = "Grammatical Correctness"


JUDGE_RUBRICS: dict[QualityDimension, str] = {
    QualityDimension.APPROPRIATENESS: (
        "how well the response fits the tone and social context of the dialogue"
    ),
    QualityDimension.RELEVANCE: (
        "how directly the response addresses the preceding dialogue content"
    ),
    QualityDimension.CONTENT_RICHNESS: (
        "how much substantive, specific content the response contributes"
    ),
    QualityDimension.GRAMMATICAL_CORRECTNESS: (
        "whether the response is free of grammatical errors"
    ),
}

JUDGE_TEMPLATE_VERSION = "judge-rubric-v1"

JUDGE_PROMPT = (
    "Rate the final response to the dialogue on the dimension "
    "'{dimension}' ({rubric}).\n"
    "Reply with a single integer score from 1 (worst) to 5 (best).\n\n"
    "{dialog}\n\n"
    "Response: {response}\n\n"
    "Score:"
)


@dataclass(frozen=True)
class JudgeVerdict:
    dimension: QualityDimension
    score: int
    raw_reply: str

    def __post_init__(self) -> None:
        if not (1 <= self.score <= 5):
            raise ValueError(f"score must be 1-5, got {self.score}")


_SCORE_RE = re.compile(r"\b([1-5])\b")


def judge_quality(
    client: ChatClient,
    dialog_block: str,
    response: str,
    dimension: QualityDimension,
    retries: int = 1,
) -> JudgeVerdict:
    """Score a response 1-5 on one quality dimension via the judge client.

    The prompt embeds the dialogue, the response, and the per-dimension
    rubric (dimension name verbatim). An unparseable reply is retried once,
    then raised as JudgeParseError.
    """
    prompt = JUDGE_PROMPT.format(
        dimension=dimension.value,
        rubric=JUDGE_RUBRICS[dimension],
        dialog=dialog_block,
        response=response,
    )
    messages = [{"role": "user", "content": prompt}]
    last_reply = ""
    for _ in range(retries + 1):
        last_reply = client.chat_complete(messages)
        match = _SCORE_RE.search(last_reply)
        if match:
            return JudgeVerdict(dimension=dimension, score=int(match.group(1)), raw_reply=last_reply)
    raise JudgeParseError(f"no 1-5 score in judge reply {last_reply!r}")
