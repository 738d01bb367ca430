"""LLM agents that pick meta-paths for each prediction task.

Every agent call is one conversation: a prompt, a response, and up to three
repair turns if the response holds lines that fail to parse or validate.
Agents answer in the meta-path DSL, one path per line, each followed by
``name:`` and ``reason:`` lines. Anything else in the response is ignored.

The mock client replays fixture files keyed by call purpose, which makes
whole communication rounds deterministic offline.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .kg import ENTITY_TYPES, Schema, default_schema
from .metapath import MetaPathError, MetaPathSchema, format_metapath, parse_metapath

logger = logging.getLogger(__name__)

MAX_REPAIRS = 3
PROMPT_MARK = "=== PROMPT"
RESPONSE_MARK = "=== RESPONSE"


class AgentError(RuntimeError):
    """An agent call that never produced a valid answer; carries the transcript."""

    def __init__(self, message: str, transcript: "AgentTranscript | None" = None):
        super().__init__(message)
        self.transcript = transcript


# ---------------------------------------------------------------- clients


class ChatClient:
    """One agent's connection to a chat model.

    ``complete`` receives the whole conversation so far as a list of
    ``{"role", "content"}`` messages and returns the assistant's reply.
    ``purpose`` tells mock clients which fixture to replay; remote clients
    ignore it.
    """

    mode = "abstract"

    def complete(self, messages: Sequence[Mapping[str, str]], purpose: str) -> str:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"mode": self.mode}


class MockChatClient(ChatClient):
    """Replays responses from a fixture mapping ``purpose -> [response, ...]``.

    Successive calls with the same purpose walk the list (the repair turns);
    the last response repeats once the list runs out.
    """

    mode = "mock"

    def __init__(self, task: str, responses: Mapping[str, Sequence[str] | str], source: str | None = None):
        self.task = task
        self.responses = {k: [v] if isinstance(v, str) else list(v) for k, v in responses.items()}
        self.source = source
        self._calls: dict[str, int] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> "MockChatClient":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if "task" not in data or "responses" not in data:
            raise AgentError(f"mock fixture {path} needs 'task' and 'responses' keys")
        return cls(data["task"], data["responses"], source=str(path))

    @classmethod
    def shipped(cls, task: str) -> "MockChatClient":
        ref = resources.files("slak") / "data" / "mock_agents" / f"{task}.yaml"
        with resources.as_file(ref) as path:
            if not Path(path).exists():
                raise AgentError(f"no shipped mock fixture for task {task!r}")
            return cls.from_file(path)

    def complete(self, messages, purpose: str) -> str:
        options = self.responses.get(purpose)
        if not options:
            raise AgentError(f"mock agent for {self.task!r} has no fixture for purpose {purpose!r}")
        k = self._calls.get(purpose, 0)
        self._calls[purpose] = k + 1
        return options[min(k, len(options) - 1)]

    def describe(self) -> dict:
        return {"mode": self.mode, "task": self.task, "fixture": Path(self.source).name if self.source else None}


class RemoteChatClient(ChatClient):
    """Chat-completions style HTTP endpoint (``{"model", "messages", "temperature"}``)."""

    mode = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str = "",
        api_key: str | None = None,
        temperature: float = 0.0,
        retries: int = 3,
        timeout: float = 120.0,
        backoff: float = 1.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.retries = retries
        self.timeout = timeout
        self.backoff = backoff

    def complete(self, messages, purpose: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "messages": list(messages), "temperature": self.temperature}
        last = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                body = resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                logger.warning("chat request failed (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2**attempt))
                continue
            return _parse_chat_response(body)
        raise AgentError(f"chat endpoint failed after {self.retries} attempts: {last}")

    def describe(self) -> dict:
        return {"mode": self.mode, "model": self.model, "temperature": self.temperature}


def _parse_chat_response(body) -> str:
    try:
        if "choices" in body:
            return str(body["choices"][0]["message"]["content"])
        if "message" in body and isinstance(body["message"], dict):
            return str(body["message"]["content"])
        if "response" in body:
            return str(body["response"])
    except (KeyError, IndexError, TypeError):
        pass
    raise AgentError("malformed chat response: expected choices[0].message.content")


def client_from_env(task: str, mock: bool = False, fixture_dir: str | Path | None = None) -> ChatClient:
    """Remote client when ``LLM_ENDPOINT`` is set and ``mock`` is off, otherwise the mock fixture."""
    endpoint = os.environ.get("LLM_ENDPOINT")
    if endpoint and not mock:
        return RemoteChatClient(endpoint, os.environ.get("LLM_MODEL", ""), os.environ.get("LLM_API_KEY"))
    if fixture_dir is not None:
        return MockChatClient.from_file(Path(fixture_dir) / f"{task}.yaml")
    return MockChatClient.shipped(task)


# ---------------------------------------------------------------- transcripts


@dataclass
class AcceptedPath:
    metapath: MetaPathSchema
    name: str | None = None
    reason: str | None = None


@dataclass
class AgentTranscript:
    task: str
    purpose: str
    turns: list[tuple[str, str]] = field(default_factory=list)
    accepted: list[AcceptedPath] = field(default_factory=list)

    def to_text(self) -> str:
        parts = [f"task: {self.task}", f"purpose: {self.purpose}", ""]
        for k, (prompt, response) in enumerate(self.turns, start=1):
            parts += [f"{PROMPT_MARK} {k} ===", prompt, f"{RESPONSE_MARK} {k} ===", response]
        parts.append("=== ACCEPTED ===")
        for a in self.accepted:
            parts.append(format_metapath(a.metapath, with_label=False))
            parts.append(f"name: {a.name or ''}")
            parts.append(f"reason: {a.reason or ''}")
        return "\n".join(parts) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text(), encoding="utf-8")


_MARK = re.compile(r"^=== (PROMPT|RESPONSE) (\d+) ===$|^=== ACCEPTED ===$")


def load_transcript_turns(path: str | Path) -> list[tuple[str, str]]:
    """Recover the (prompt, response) pairs of a saved transcript, for offline re-parsing."""
    prompts: dict[int, list[str]] = {}
    responses: dict[int, list[str]] = {}
    current: list[str] | None = None
    for line in Path(path).read_text(encoding="utf-8").split("\n"):
        m = _MARK.match(line)
        if m:
            if m.group(1) is None:
                current = None
            else:
                target = prompts if m.group(1) == "PROMPT" else responses
                current = target.setdefault(int(m.group(2)), [])
            continue
        if current is not None:
            current.append(line)
    return [("\n".join(prompts[k]), "\n".join(responses.get(k, []))) for k in sorted(prompts)]


# ---------------------------------------------------------------- prompts


def render_schema_prompt(schema: Schema | None = None) -> str:
    schema = schema or default_schema()
    types = [t for t in ENTITY_TYPES if t in schema.entity_types]
    lines = [
        "You are working with a location-based knowledge graph of a city.",
        f"It has {len(types)} entity types: {', '.join(types)}.",
        f"It has {len(schema.relations)} relation types, listed as 'name: head -> tail. meaning':",
    ]
    for rel in schema.relations:
        meaning = f" {rel.description}" if rel.description else ""
        lines.append(f"- {rel.name}: {rel.head_type} -> {rel.tail_type}.{meaning}")
    return "\n".join(lines)


FORMAT_RULES = """Write each meta-path on its own line in exactly this form:
Region -[RelationName]-> EntityType -[RelationName]-> EntityType
Every meta-path must start at Region, use only the relations listed above, follow their head and tail types, and have at most 6 relations.
After each meta-path add a line 'name: <short name>' and a line 'reason: <why it helps>'."""


def _task_line(task: str, description: str | None) -> str:
    return f"The prediction task is '{task}'." + (f" {description}" if description else "")


def _paths_block(paths: Sequence[MetaPathSchema]) -> str:
    return "\n".join(format_metapath(p, with_label=False) for p in paths)


def render_propose_prompt(schema: Schema, task: str, description: str | None, n: int) -> str:
    return "\n\n".join([
        render_schema_prompt(schema),
        _task_line(task, description),
        f"Propose {n} meta-paths whose instances around a region carry information useful for this task.",
        FORMAT_RULES,
    ])


def render_self_update_prompt(
    schema: Schema,
    task: str,
    description: str | None,
    own_paths: Sequence[MetaPathSchema],
    all_tasks_paths: Mapping[str, Sequence[MetaPathSchema]],
    n: int,
) -> str:
    others = [f"Task '{t}':\n{_paths_block(p)}" for t, p in sorted(all_tasks_paths.items()) if t != task]
    return "\n\n".join([
        render_schema_prompt(schema),
        _task_line(task, description),
        f"Your current meta-paths are:\n{_paths_block(own_paths)}",
        "Agents for other tasks chose these meta-paths:\n" + "\n\n".join(others) if others else "No other tasks.",
        f"Considering the other tasks' choices, give {n} updated meta-paths for your own task. "
        "You may keep meta-paths you already have.",
        FORMAT_RULES,
    ])


def render_recommend_prompt(
    schema: Schema,
    from_task: str,
    to_task: str,
    to_description: str | None,
    all_tasks_paths: Mapping[str, Sequence[MetaPathSchema]],
) -> str:
    listing = [f"Task '{t}':\n{_paths_block(p)}" for t, p in sorted(all_tasks_paths.items())]
    return "\n\n".join([
        render_schema_prompt(schema),
        f"You are the agent for task '{from_task}'. The agents currently use these meta-paths:\n" + "\n\n".join(listing),
        f"Recommend 1 new meta-path to the agent of task '{to_task}'." + (f" {to_description}" if to_description else ""),
        "Think step by step about what your own task taught you, then give the meta-path.",
        FORMAT_RULES,
    ])


# ---------------------------------------------------------------- parsing


@dataclass
class ParsedResponse:
    paths: list[AcceptedPath]
    errors: list[str]


_CANDIDATE = re.compile(r"^[A-Za-z_]\w*\s*-\[")
_DECOR = re.compile(r"^\s*(?:[-*>]|\d+[.):])?\s*")


def _strip_line(line: str) -> str:
    line = line.strip().strip("`").strip()
    line = _DECOR.sub("", line, count=1)
    return line.strip().strip("`").strip()


def parse_response(text: str, schema: Schema | None = None) -> ParsedResponse:
    """Pull DSL lines (plus following ``name:``/``reason:`` lines) out of a free-form reply.

    Pure function of ``text`` and ``schema``; lines that look like a meta-path
    but fail to parse are reported in ``errors``.
    """
    schema = schema or default_schema()
    paths: list[AcceptedPath] = []
    errors: list[str] = []
    last: AcceptedPath | None = None
    for raw in text.splitlines():
        line = _strip_line(raw)
        low = line.lower()
        if low.startswith("name:") and last is not None:
            last.name = line[5:].strip() or None
            continue
        if low.startswith("reason:") and last is not None:
            last.reason = line[7:].strip() or None
            continue
        if not _CANDIDATE.match(line):
            continue
        try:
            mp = parse_metapath(line, schema)
        except MetaPathError as exc:
            errors.append(f"{line!r}: {exc}")
            last = None
            continue
        last = AcceptedPath(mp, name=mp.label)
        paths.append(last)
    return ParsedResponse(paths, errors)


def _dedup(paths: Sequence[AcceptedPath]) -> tuple[list[AcceptedPath], int]:
    seen: set[MetaPathSchema] = set()
    out = []
    for p in paths:
        if p.metapath in seen:
            continue
        seen.add(p.metapath)
        out.append(p)
    return out, len(paths) - len(out)


def _converse(
    client: ChatClient,
    transcript: AgentTranscript,
    prompt: str,
    n: int,
    schema: Schema,
) -> list[MetaPathSchema]:
    messages = [{"role": "user", "content": prompt}]
    for attempt in range(MAX_REPAIRS + 1):
        response = client.complete(messages, transcript.purpose)
        transcript.turns.append((messages[-1]["content"], response))
        parsed = parse_response(response, schema)
        accepted, n_dup = _dedup(parsed.paths)
        problems = list(parsed.errors)
        if n_dup:
            problems.append(f"{n_dup} meta-path(s) repeated")
        if len(accepted) != n:
            problems.append(f"expected exactly {n} distinct valid meta-path(s), found {len(accepted)}")
        if not problems:
            transcript.accepted = accepted
            return [a.metapath.with_label(a.name) for a in accepted]
        if attempt == MAX_REPAIRS:
            break
        logger.info("agent %s/%s: repair %d: %s", transcript.task, transcript.purpose, attempt + 1, problems)
        messages += [
            {"role": "assistant", "content": response},
            {"role": "user", "content": "Your answer could not be used:\n"
             + "\n".join(f"- {p}" for p in problems)
             + f"\nPlease answer again with exactly {n} valid meta-path(s).\n\n{FORMAT_RULES}"},
        ]
    raise AgentError(
        f"agent for {transcript.task!r} ({transcript.purpose}) gave no valid answer after {MAX_REPAIRS} repairs",
        transcript,
    )


def propose_metapaths(
    client: ChatClient,
    task: str,
    n: int = 3,
    description: str | None = None,
    schema: Schema | None = None,
) -> tuple[list[MetaPathSchema], AgentTranscript]:
    if n < 1:
        raise ValueError("n must be >= 1")
    schema = schema or default_schema()
    transcript = AgentTranscript(task, "propose")
    prompt = render_propose_prompt(schema, task, description, n)
    return _converse(client, transcript, prompt, n, schema), transcript


def self_update(
    client: ChatClient,
    task: str,
    own_paths: Sequence[MetaPathSchema],
    all_tasks_paths: Mapping[str, Sequence[MetaPathSchema]],
    n: int = 3,
    description: str | None = None,
    schema: Schema | None = None,
) -> tuple[list[MetaPathSchema], AgentTranscript]:
    schema = schema or default_schema()
    transcript = AgentTranscript(task, "self_update")
    prompt = render_self_update_prompt(schema, task, description, own_paths, all_tasks_paths, n)
    return _converse(client, transcript, prompt, n, schema), transcript


def recommend(
    client: ChatClient,
    from_task: str,
    to_task: str,
    all_tasks_paths: Mapping[str, Sequence[MetaPathSchema]],
    to_description: str | None = None,
    schema: Schema | None = None,
) -> tuple[MetaPathSchema, AgentTranscript]:
    if from_task == to_task:
        raise ValueError(f"an agent cannot recommend to its own task ({from_task!r})")
    schema = schema or default_schema()
    transcript = AgentTranscript(from_task, f"recommend:{to_task}")
    prompt = render_recommend_prompt(schema, from_task, to_task, to_description, all_tasks_paths)
    return _converse(client, transcript, prompt, 1, schema)[0], transcript


# ---------------------------------------------------------------- round 2


@dataclass
class CommunicationResult:
    paths: dict[str, list[MetaPathSchema]]
    self_updated: dict[str, list[MetaPathSchema]]
    recommended: dict[str, dict[str, MetaPathSchema]]  # to_task -> from_task -> path
    pre_dedup_sizes: dict[str, int]
    duplicates: dict[str, list[str]]
    transcripts: list[AgentTranscript]


def run_communication_round(
    clients: Mapping[str, ChatClient],
    round1_paths: Mapping[str, Sequence[MetaPathSchema]],
    n: int = 3,
    descriptions: Mapping[str, str] | None = None,
    no_self_update: bool = False,
    no_rec: bool = False,
    schema: Schema | None = None,
) -> CommunicationResult:
    """Each agent self-updates its own paths and recommends one path to every other task.

    The new set for task i is its self-updated paths followed by the
    recommendations it received (sender order is sorted by task name), with
    repeats removed. The ablation flags drop the corresponding calls entirely.
    """
    tasks = sorted(round1_paths)
    missing = [t for t in tasks if t not in clients]
    if missing:
        raise AgentError(f"no agent client for tasks {missing}")
    schema = schema or default_schema()
    descriptions = descriptions or {}
    transcripts: list[AgentTranscript] = []
    updated: dict[str, list[MetaPathSchema]] = {}
    recs: dict[str, dict[str, MetaPathSchema]] = {t: {} for t in tasks}
    for task in tasks:
        if not no_self_update:
            paths, tr = self_update(
                clients[task], task, round1_paths[task], round1_paths, n, descriptions.get(task), schema
            )
            updated[task] = paths
            transcripts.append(tr)
        if not no_rec:
            for other in tasks:
                if other == task:
                    continue
                path, tr = recommend(clients[task], task, other, round1_paths, descriptions.get(other), schema)
                recs[other][task] = path
                transcripts.append(tr)
    combined: dict[str, list[MetaPathSchema]] = {}
    sizes: dict[str, int] = {}
    dups: dict[str, list[str]] = {}
    for task in tasks:
        pool = list(updated.get(task, [])) + [recs[task][s] for s in sorted(recs[task])]
        sizes[task] = len(pool)
        kept, seen, dropped = [], set(), []
        for p in pool:
            if p in seen:
                dropped.append(format_metapath(p, with_label=False))
                continue
            seen.add(p)
            kept.append(p)
        for d in dropped:
            logger.info("task %s: dropped duplicate meta-path %s", task, d)
        combined[task] = kept
        dups[task] = dropped
    return CommunicationResult(combined, updated, recs, sizes, dups, transcripts)
