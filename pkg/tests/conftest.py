import json
import re
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Dict, List, Optional, Tuple

import pytest

from alive.backend import BackendConfig
from alive.config import Config
from alive.promptio import format_sections

# (payload, call index) -> (status, body, delay seconds)
Responder = Callable[[Dict[str, Any], int], Tuple[int, Dict[str, Any], float]]


def chat_body(texts: List[str], logprobs: Optional[List[float]] = None) -> Dict[str, Any]:
    choices = []
    for i, text in enumerate(texts):
        choice: Dict[str, Any] = {'index': i, 'message': {'role': 'assistant', 'content': text},
                                  'finish_reason': 'stop'}
        if logprobs is not None:
            choice['logprobs'] = {'content': [{'token': 'x', 'logprob': logprobs[i] / 2},
                                              {'token': 'y', 'logprob': logprobs[i] / 2}]}
        choices.append(choice)
    return {'id': 'stub', 'object': 'chat.completion', 'choices': choices}


class StubServer:
    """Scripted chat-completion endpoint recording payloads and peak concurrency."""

    def __init__(self, responder: Responder):
        self.responder = responder
        self.payloads: List[Dict[str, Any]] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.calls = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:
                length = int(self.headers.get('Content-Length', 0))
                payload = json.loads(self.rfile.read(length))
                with stub._lock:
                    index = stub.calls
                    stub.calls += 1
                    stub.payloads.append(payload)
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                try:
                    status, body, delay = stub.responder(payload, index)
                    if delay:
                        time.sleep(delay)
                finally:
                    with stub._lock:
                        stub.in_flight -= 1
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header('Content-Type', 'application/json')
                self.send_header('Content-Length', str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args: Any) -> None:
                pass

        self.httpd = ThreadingHTTPServer(('127.0.0.1', 0), Handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def config(self, **overrides: Any) -> BackendConfig:
        settings = dict(base_url=self.url, model_name='stub-model', max_in_flight=4, timeout_seconds=10.0,
                        retry_max=3, retry_backoff_base_seconds=0.0)
        settings.update(overrides)
        return BackendConfig(**settings)

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    servers: List[StubServer] = []

    def start(responder: Responder) -> StubServer:
        server = StubServer(responder)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()


def _prompt(payload: Dict[str, Any]) -> str:
    return payload['messages'][0]['content']


def policy_responder(payload: Dict[str, Any], index: int) -> Tuple[int, Dict[str, Any], float]:
    """Plays constructor, solver and self-reviewer with distinctive hidden truths ``HT-<i>``."""
    prompt, n = _prompt(payload), payload['n']
    if 'Task Constructor' in prompt:
        texts = [format_sections([('Thought', f"pivot {i}"), ('Task', f"Q-{i}: reconstruct the masked step"),
                                  ('Hidden_Truth', f"HT-{i}")]) for i in range(n)]
    elif 'Task Solver' in prompt:
        task = re.search(r'Q-(\d+)', prompt).group(1)
        texts = [format_sections([('Reasoning', f"attempt {j}"),
                                  ('Answer', f"HT-{task}" if j % 2 == 0 else f"wrong-{j}")]) for j in range(n)]
    else:
        texts = [format_sections([('Analysis', 'compared'), ('Critique', 'Check the second step.'),
                                  ('Score', '0.5')]) for _ in range(n)]
    return 200, chat_body(texts), 0.0


def teacher_responder(payload: Dict[str, Any], index: int) -> Tuple[int, Dict[str, Any], float]:
    texts = [format_sections([('Analysis', 'teacher analysis'), ('Critique', 'TEACHER: recheck the pivot.'),
                              ('Score', '0.75')]) for _ in range(payload['n'])]
    return 200, chat_body(texts), 0.0


@pytest.fixture
def toy_config(tmp_path) -> Config:
    """Small seeded toy configuration."""
    return Config.from_dict({
        'loop': {'M': 2, 'N': 4, 'warmup_steps': 2, 'total_steps': 4, 'seed': 7},
        'toy': {'corpus_size': 16, 'seed': 7},
        'data': {'runs_dir': str(tmp_path / 'runs')},
    })
