"""Multi-temperature ensemble runs against a chat client, with a persistent result cache."""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from ..ontology import Ontology
from .clients import ChatClient, ClientError
from .keys import normalize_key
from .prompt import DEFAULT_MAX_BATCH, SingleRunResult, build_messages, parse_llm_response, prompt_hash

logger = logging.getLogger(__name__)

__all__ = ["DEFAULT_TEMPERATURES", "RunCache", "EnsembleStats", "EnsembleRunner", "run_ensemble"]

DEFAULT_TEMPERATURES = (0.0, 0.25, 0.5, 0.75, 1.0)


def _temp_key(t: float) -> str:
    return f"{float(t):g}"


class RunCache:
    """Single-run results keyed by (normalized key, temperature, prompt hash).

    Reads are lock-free; writes are serialized. ``save`` writes sorted JSON so
    an unchanged cache produces an unchanged file.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            doc = json.loads(self.path.read_text(encoding="utf-8"))
            self._entries = dict(doc.get("entries", {}))

    @staticmethod
    def make_key(normalized: str, temperature: float, phash: str) -> str:
        return f"{phash}|{_temp_key(temperature)}|{normalized}"

    def get(self, normalized: str, temperature: float, phash: str) -> Optional[dict]:
        return self._entries.get(self.make_key(normalized, temperature, phash))

    def put(self, normalized: str, temperature: float, phash: str, result: SingleRunResult) -> None:
        entry = {
            "label": result.label,
            "confidence": result.confidence,
            "explanation": result.explanation,
            "parse_ok": result.parse_ok,
            "error": result.error,
        }
        with self._lock:
            self._entries[self.make_key(normalized, temperature, phash)] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            doc = {"version": 1, "entries": dict(sorted(self._entries.items()))}
        self.path.write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass
class EnsembleStats:
    remote_calls: int = 0
    failed_calls: int = 0
    cache_hits: int = 0
    cache_misses: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


class EnsembleRunner:
    """Classify keys once per temperature and collect every single-run result.

    Keys sharing a normalized form are sent once and share the result. Calls
    that still fail after ``retries`` retries yield parse_ok=False
    placeholders; the run continues.
    """

    def __init__(
        self,
        client: ChatClient,
        ontology: Ontology,
        *,
        model: str = "gpt-4",
        temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
        batch_size: int = DEFAULT_MAX_BATCH,
        retries: int = 3,
        backoff: float = 1.0,
        parallelism: int = 1,
        min_interval: float = 0.0,
        cache: RunCache | None = None,
    ):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.client = client
        self.ontology = ontology
        self.model = model
        self.temperatures = tuple(float(t) for t in temperatures)
        self.batch_size = batch_size
        self.retries = retries
        self.backoff = backoff
        self.parallelism = max(1, parallelism)
        self.min_interval = min_interval
        self.cache = cache if cache is not None else RunCache()
        self.stats = EnsembleStats()
        self._phash = prompt_hash(ontology)
        self._pace_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._last_call = 0.0

    def _pace(self) -> None:
        if self.min_interval <= 0:
            return
        with self._pace_lock:
            wait = self._last_call + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_call = time.monotonic()

    def _call(self, batch: list[str], temperature: float) -> list[SingleRunResult]:
        messages = build_messages(self.ontology, batch, max_batch=self.batch_size)
        for attempt in range(self.retries + 1):
            self._pace()
            with self._stats_lock:
                self.stats.remote_calls += 1
            try:
                text = self.client.complete(messages, model=self.model, temperature=temperature)
            except (ClientError, TimeoutError) as exc:
                logger.warning("call failed (t=%s, attempt %d): %s", temperature, attempt + 1, exc)
                if attempt < self.retries and self.backoff > 0:
                    time.sleep(self.backoff * 2 ** attempt)
                continue
            results = parse_llm_response(text, self.ontology, batch, temperature)
            for r in results:
                self.cache.put(normalize_key(r.key), temperature, self._phash, r)
            return results
        with self._stats_lock:
            self.stats.failed_calls += 1
        return [SingleRunResult.failed(k, temperature, "client_error") for k in batch]

    def run(self, keys: Iterable[str]) -> dict[str, list[SingleRunResult]]:
        """Per raw key, one result per temperature in temperature order; keys sorted."""
        groups: dict[str, list[str]] = defaultdict(list)
        for key in sorted(set(keys)):
            groups[normalize_key(key)].append(key)
        representative = {norm: members[0] for norm, members in groups.items()}

        by_norm: dict[tuple[str, float], SingleRunResult] = {}
        jobs: list[tuple[list[str], float]] = []
        for t in self.temperatures:
            pending = []
            for norm in sorted(groups):
                hit = self.cache.get(norm, t, self._phash)
                if hit is not None:
                    self.stats.cache_hits += 1
                    by_norm[(norm, t)] = SingleRunResult(
                        representative[norm], hit["label"], float(hit["confidence"]),
                        hit.get("explanation", ""), t, bool(hit["parse_ok"]), hit.get("error", ""),
                    )
                else:
                    self.stats.cache_misses += 1
                    pending.append(representative[norm])
            for i in range(0, len(pending), self.batch_size):
                jobs.append((pending[i:i + self.batch_size], t))

        if self.parallelism > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                outputs = list(pool.map(lambda job: self._call(*job), jobs))
        else:
            outputs = [self._call(*job) for job in jobs]
        for (batch, t), results in zip(jobs, outputs):
            for r in results:
                by_norm[(normalize_key(r.key), t)] = r

        out: dict[str, list[SingleRunResult]] = {}
        for norm, members in sorted(groups.items()):
            for key in members:
                out[key] = [replace(by_norm[(norm, t)], key=key) for t in self.temperatures]
        return dict(sorted(out.items()))


def run_ensemble(
    keys: Iterable[str],
    client: ChatClient,
    ontology: Ontology,
    temps: Sequence[float] = DEFAULT_TEMPERATURES,
    **kwargs,
) -> dict[str, list[SingleRunResult]]:
    return EnsembleRunner(client, ontology, temperatures=temps, **kwargs).run(keys)
