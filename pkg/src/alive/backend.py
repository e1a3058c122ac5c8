# ALIVE Generation Backend Module
# Uniform generation interface for the constructor, solver and reviewer roles
# Remote implementation over an OpenAI-compatible chat-completion endpoint

import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import requests

from .config import Config

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class BackendError(RuntimeError):
    """A generation request failed; carries the attempt log and provider detail."""

    def __init__(self, message: str, attempts: Optional[List[str]] = None,
                 status: Optional[int] = None, provider_message: Optional[str] = None):
        super().__init__(message)
        self.attempts = list(attempts or [])
        self.status = status
        self.provider_message = provider_message

    def __str__(self) -> str:
        text = self.args[0]
        if self.provider_message:
            text = f"{text}: {self.provider_message}"
        if self.attempts:
            text = f"{text} (attempts: {'; '.join(self.attempts)})"
        return text


@dataclass(frozen=True)
class GenRequest:
    """One role call: a rendered prompt and how many samples to draw."""

    role: str
    prompt: str
    n: int = 1
    temperature: float = 1.0
    max_tokens: int = 2048
    tag: str = ''

    def violations(self) -> List[str]:
        problems = []
        if self.n < 1:
            problems.append("n must be ≥ 1")
        if self.temperature < 0:
            problems.append("temperature must be ≥ 0")
        if self.max_tokens < 1:
            problems.append("max_tokens must be ≥ 1")
        return problems


@dataclass(frozen=True)
class GenResult:
    """Completions for one request, in provider index order."""

    tag: str
    completions: Tuple[str, ...]
    logprobs: Optional[Tuple[float, ...]] = None
    retries: int = 0


@dataclass(frozen=True)
class BackendConfig:
    """Endpoint, credentials and scheduling limits of a remote backend."""

    base_url: str
    model_name: str
    api_key_env: str = 'ALIVE_API_KEY'
    max_in_flight: int = 4
    timeout_seconds: float = 120.0
    retry_max: int = 3
    retry_backoff_base_seconds: float = 1.0
    native_n: bool = True
    request_logprobs: bool = False

    @classmethod
    def from_config(cls, config: Config) -> 'BackendConfig':
        """
        Build backend settings from a configuration.

        Keys may sit at the top level or under a ``backend`` section.
        """
        def get(key: str, default: Any) -> Any:
            return config.get(f"backend.{key}", config.get(key, default))

        base_url = get('base_url', None)
        model_name = get('model_name', None)
        if not base_url or not model_name:
            raise ValueError("Backend config requires base_url and model_name")
        d = cls(base_url='', model_name='')
        backend = cls(
            base_url=str(base_url).rstrip('/'),
            model_name=str(model_name),
            api_key_env=str(get('api_key_env', d.api_key_env)),
            max_in_flight=int(get('max_in_flight', d.max_in_flight)),
            timeout_seconds=float(get('timeout_seconds', d.timeout_seconds)),
            retry_max=int(get('retry_max', d.retry_max)),
            retry_backoff_base_seconds=float(get('retry_backoff_base_seconds', d.retry_backoff_base_seconds)),
            native_n=bool(get('native_n', d.native_n)),
            request_logprobs=bool(get('request_logprobs', d.request_logprobs)),
        )
        problems = backend.violations()
        if problems:
            raise ValueError(f"Invalid backend config: {'; '.join(problems)}")
        return backend

    @classmethod
    def from_yaml(cls, path: str) -> 'BackendConfig':
        return cls.from_config(Config(path))

    def violations(self) -> List[str]:
        problems = []
        if self.max_in_flight < 1:
            problems.append("max_in_flight must be ≥ 1")
        if self.retry_max < 0:
            problems.append("retry_max must be ≥ 0")
        if self.timeout_seconds <= 0:
            problems.append("timeout_seconds must be > 0")
        return problems


class GenerationBackend(Protocol):
    def generate(self, req: GenRequest) -> GenResult: ...

    def generate_group(self, reqs: Sequence[GenRequest]) -> List[Union[GenResult, BackendError]]: ...

    def health(self) -> bool: ...


def _provider_message(response: requests.Response) -> str:
    try:
        body = response.json()
    except ValueError:
        return response.text[:500]
    if isinstance(body, dict):
        error = body.get('error')
        if isinstance(error, dict) and error.get('message'):
            return str(error['message'])
        if isinstance(error, str):
            return error
    return response.text[:500]


def _summed_logprob(choice: Dict[str, Any]) -> Optional[float]:
    logprobs = choice.get('logprobs')
    if not isinstance(logprobs, dict):
        return None
    content = logprobs.get('content')
    if not isinstance(content, list):
        return None
    if not all(isinstance(token, dict) for token in content):
        return None
    return float(sum(token.get('logprob', 0.0) for token in content))


class RemoteBackend:
    """Chat-completion client with bounded in-flight requests and retries."""

    def __init__(self, config: BackendConfig, api_key: Optional[str] = None,
                 session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep, jitter_seed: Optional[int] = None):
        """
        Initialize the remote backend.

        Args:
            config (BackendConfig): Endpoint and scheduling settings.
            api_key (Optional[str]): Bearer token; read from ``config.api_key_env`` when None.
            session (Optional[requests.Session]): HTTP session to reuse.
            sleep (Callable[[float], None]): Backoff sleep (tests inject a no-op).
            jitter_seed (Optional[int]): Seed for the backoff jitter.
        """
        self.config = config
        self.logger = logging.getLogger(__name__)
        if api_key is None:
            api_key = Config.from_dict({}).get_env(config.api_key_env)
        self.session = session or requests.Session()
        self.session.headers.update({'Content-Type': 'application/json'})
        if api_key:
            self.session.headers.update({'Authorization': f"Bearer {api_key}"})
        self._sleep = sleep
        self._jitter = random.Random(jitter_seed)
        self._jitter_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self.url = f"{config.base_url}/v1/chat/completions"

    def _backoff(self, attempt: int) -> float:
        with self._jitter_lock:
            factor = self._jitter.uniform(0.5, 1.5)
        return self.config.retry_backoff_base_seconds * (2 ** attempt) * factor

    def _post(self, payload: Dict[str, Any], tag: str) -> Tuple[Dict[str, Any], int]:
        """POST with retries; returns (body, retries used)."""
        attempts: List[str] = []
        for attempt in range(self.config.retry_max + 1):
            status = None
            try:
                with self._slots:
                    response = self.session.post(self.url, json=payload, timeout=self.config.timeout_seconds)
                status = response.status_code
                if status == 200:
                    return response.json(), attempt
                message = _provider_message(response)
                attempts.append(f"{attempt + 1}: HTTP {status}")
                if status not in RETRYABLE_STATUS:
                    self.logger.error(f"Request {tag} rejected with HTTP {status}: {message}")
                    raise BackendError(f"HTTP {status}", attempts, status, message)
            except requests.Timeout as e:
                attempts.append(f"{attempt + 1}: timeout ({e})")
            except requests.ConnectionError as e:
                attempts.append(f"{attempt + 1}: connection error ({e})")
            except ValueError as e:
                attempts.append(f"{attempt + 1}: invalid JSON body ({e})")
                raise BackendError("invalid response body", attempts, status) from e
            except requests.RequestException as e:
                attempts.append(f"{attempt + 1}: request error ({e})")
                self.logger.error(f"Request {tag} failed: {e}")
                raise BackendError("request error", attempts, status) from e

            if attempt < self.config.retry_max:
                delay = self._backoff(attempt)
                self.logger.warning(f"Request {tag} attempt {attempt + 1} failed ({attempts[-1]}), "
                                    f"retrying in {delay:.2f}s")
                self._sleep(delay)

        raise BackendError(f"transport failure after {len(attempts)} attempts", attempts, status)

    def _payload(self, req: GenRequest, n: int) -> Dict[str, Any]:
        payload = {
            'model': self.config.model_name,
            'messages': [{'role': 'user', 'content': req.prompt}],
            'temperature': req.temperature,
            'n': n,
            'max_tokens': req.max_tokens,
        }
        if self.config.request_logprobs:
            payload['logprobs'] = True
        return payload

    def _choices(self, body: Any, expected: int) -> List[Dict[str, Any]]:
        if not isinstance(body, dict):
            raise BackendError("malformed response", provider_message=f"body is {type(body).__name__}")
        choices = body.get('choices')
        if not isinstance(choices, list):
            raise BackendError("malformed response: no choices")
        for choice in choices:
            if not isinstance(choice, dict) or not isinstance(choice.get('message') or {}, dict):
                raise BackendError("malformed response", provider_message="choice is not an object")
            if not isinstance(choice.get('index', 0), int):
                raise BackendError("malformed response", provider_message="choice index is not an integer")
        if len(choices) < expected:
            raise BackendError("short completion set",
                               provider_message=f"requested {expected}, received {len(choices)}")
        return sorted(choices, key=lambda c: c.get('index', 0))[:expected]

    def generate(self, req: GenRequest) -> GenResult:
        """
        Draw ``req.n`` completions for one prompt.

        Args:
            req (GenRequest): Request.

        Returns:
            GenResult: Completions ordered by provider index.
        """
        problems = req.violations()
        if problems:
            raise ValueError(f"Invalid request {req.tag}: {'; '.join(problems)}")

        if self.config.native_n:
            body, retries = self._post(self._payload(req, req.n), req.tag)
            choices = self._choices(body, req.n)
        else:
            choices, retries = [], 0
            for _ in range(req.n):
                body, used = self._post(self._payload(req, 1), req.tag)
                choices.extend(self._choices(body, 1))
                retries += used

        completions = tuple(str((c.get('message') or {}).get('content') or '') for c in choices)
        logprobs = None
        if self.config.request_logprobs:
            summed = [_summed_logprob(c) for c in choices]
            if all(lp is not None for lp in summed):
                logprobs = tuple(summed)
        self.logger.debug(f"Request {req.tag} ({req.role}) returned {len(completions)} completions")
        return GenResult(tag=req.tag, completions=completions, logprobs=logprobs, retries=retries)

    def generate_group(self, reqs: Sequence[GenRequest]) -> List[Union[GenResult, BackendError]]:
        """
        Run requests concurrently; results come back in input order.

        A failing request yields its BackendError in place, siblings are unaffected.
        """
        if not reqs:
            return []

        def run(req: GenRequest) -> Union[GenResult, BackendError]:
            try:
                return self.generate(req)
            except BackendError as e:
                return e

        with ThreadPoolExecutor(max_workers=min(len(reqs), self.config.max_in_flight)) as pool:
            return list(pool.map(run, reqs))

    def health(self) -> bool:
        """Minimal round-trip; raises BackendError on any failure."""
        self.generate(GenRequest(role='solver', prompt='ping', n=1, temperature=0.0, max_tokens=1, tag='health'))
        self.logger.info(f"Backend {self.config.base_url} ({self.config.model_name}) is healthy")
        return True

    def close(self) -> None:
        self.session.close()
