"""The HTTP gateway: accepts POSTed trigger envelopes and runs handlers.

Request lifecycle: decode the envelope, resolve the route (honoring tunnel
run tokens on the path), run the route's handler with the envelope's
``request`` string, serialize the result, and append a record to the request
log. The server never dies because of a request; any failure becomes a
structured error response.

Concurrency: requests are processed on one thread each. Executions that
target the same device key are serialized in arrival order through a bounded
FIFO queue per key (overflow rejects with DeviceFault); unrelated keys run
concurrently. A handler that exceeds the configured timeout gets a 500 while
its execution finishes in the background, still holding its key's turn so
mutual exclusion per device is never violated.
"""

from __future__ import annotations

import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional

from . import tunnel
from .devices import DeviceFaultError
from .envelope import (
    ErrorCode,
    GatewayError,
    HandlerResponse,
    TriggerEnvelope,
    decode_envelope,
    serialize_response,
)

DEFAULT_ROUTE_PREFIX = "/trigger"
_ROUTE_NAME_RE = re.compile(r"[A-Za-z0-9._~-]+")
_DEFAULT_ROUTE = ""  # sentinel route name for the default handler


class RegistrationError(Exception):
    """Invalid handler registration (duplicate slot, bad route name)."""


class GatewayStartupError(Exception):
    """The server could not start (typically: port already in use)."""


@dataclass
class GatewayConfig:
    bind_port: int = 0  # 0 = OS-assigned ephemeral port
    route_prefix: str = DEFAULT_ROUTE_PREFIX
    per_device_queue_depth: int = 128
    handler_timeout_ms: int = 10_000

    def validate(self) -> None:
        if not 0 <= self.bind_port <= 65535:
            raise ValueError(f"bind_port {self.bind_port} outside [0, 65535]")
        if self.per_device_queue_depth < 1:
            raise ValueError("per_device_queue_depth must be >= 1")
        if self.handler_timeout_ms <= 0:
            raise ValueError("handler_timeout_ms must be > 0")
        if not self.route_prefix.startswith("/") or self.route_prefix.rstrip("/") == "":
            raise ValueError(f"route_prefix {self.route_prefix!r} must look like '/name'")


class HandlerRegistration:
    """The gateway's handler table: one default slot plus named routes.

    A handler is ``f(payload: str) -> result`` where the result may be a
    plain string, any JSON value, a :class:`HandlerResponse`, a
    :class:`GatewayError`, or None (normalized to an empty-string OK).
    Named routes serialize under their route name as device key unless told
    otherwise. ``pre_dispatch`` is an optional hook called with (envelope,
    route) before the handler; returning a GatewayError rejects the request.
    """

    _UNSET = object()

    def __init__(self):
        self.default_handler: Optional[Callable[[str], Any]] = None
        self.default_key_fn: Optional[Callable[[TriggerEnvelope], Optional[str]]] = None
        self.named_routes: dict[str, Callable[[str], Any]] = {}
        self.route_device_keys: dict[str, Optional[str]] = {}
        self.pre_dispatch: Optional[
            Callable[[TriggerEnvelope, str], Optional[GatewayError]]
        ] = None

    def register_default(
        self,
        handler: Callable[[str], Any],
        key_fn: Optional[Callable[[TriggerEnvelope], Optional[str]]] = None,
    ) -> "HandlerRegistration":
        """Register the default handler. A second registration is an error.

        Requests through the default route serialize under ``key_fn(envelope)``
        when given, otherwise under the envelope's item id (none when empty).
        """
        if self.default_handler is not None:
            raise RegistrationError("a default handler is already registered")
        self.default_handler = handler
        self.default_key_fn = key_fn
        return self

    def register_route(self, name: str, handler: Callable[[str], Any],
                       device_key: Any = _UNSET) -> "HandlerRegistration":
        """Register a named route; ``device_key`` defaults to the route name."""
        if not _ROUTE_NAME_RE.fullmatch(name):
            raise RegistrationError(f"route name {name!r} is not URL-safe")
        if name in self.named_routes:
            raise RegistrationError(f"route {name!r} is already registered")
        self.named_routes[name] = handler
        self.route_device_keys[name] = name if device_key is self._UNSET else device_key
        return self

    def has_handlers(self) -> bool:
        return self.default_handler is not None or bool(self.named_routes)


@dataclass(frozen=True)
class RequestRecord:
    request_id: str
    arrival_order: int
    envelope: Optional[TriggerEnvelope]
    response_status: int
    latency_ms: float
    route: str
    dispatched: bool  # True when a handler was actually invoked


class RequestLog:
    """Append-only, totally ordered record of every completed request."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[RequestRecord] = []
        self._listeners: list[Callable[[RequestRecord], None]] = []

    def append(self, *, request_id: str, envelope: Optional[TriggerEnvelope],
               response_status: int, latency_ms: float, route: str,
               dispatched: bool) -> RequestRecord:
        with self._lock:
            record = RequestRecord(
                request_id=request_id,
                arrival_order=len(self._records),
                envelope=envelope,
                response_status=response_status,
                latency_ms=latency_ms,
                route=route,
                dispatched=dispatched,
            )
            self._records.append(record)
            listeners = list(self._listeners)
        for listener in listeners:
            listener(record)
        return record

    def add_listener(self, fn: Callable[[RequestRecord], None]) -> None:
        with self._lock:
            self._listeners.append(fn)

    def records(self, dispatched_only: bool = False) -> list[RequestRecord]:
        with self._lock:
            records = list(self._records)
        if dispatched_only:
            records = [r for r in records if r.dispatched]
        return records

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


class _KeyQueue:
    """Bounded FIFO of tickets; the head ticket owns the device."""

    def __init__(self, depth: int):
        self.depth = depth
        self.cond = threading.Condition()
        self.waiting: deque = deque()

    def enter(self) -> Optional[object]:
        """Take a queue slot, or None when the queue is full."""
        with self.cond:
            if len(self.waiting) >= self.depth:
                return None
            ticket = object()
            self.waiting.append(ticket)
            return ticket

    def await_turn(self, ticket: object, timeout_s: float) -> bool:
        """Block until the ticket reaches the head; False on timeout (slot freed)."""
        with self.cond:
            reached = self.cond.wait_for(
                lambda: self.waiting and self.waiting[0] is ticket, timeout_s
            )
            if not reached:
                try:
                    self.waiting.remove(ticket)
                except ValueError:
                    pass
                self.cond.notify_all()
            return reached

    def leave(self, ticket: object) -> None:
        with self.cond:
            try:
                self.waiting.remove(ticket)
            except ValueError:
                pass
            self.cond.notify_all()


class RequestDispatcher:
    """Route resolution and handler execution, independent of any socket."""

    def __init__(self, config: GatewayConfig, registration: HandlerRegistration,
                 token_registry: Optional[tunnel.TokenRegistry] = None):
        config.validate()
        self.config = config
        self.registration = registration
        self.token_registry = token_registry or tunnel.default_registry()
        self.request_log = RequestLog()
        self._queues: dict[str, _KeyQueue] = {}
        self._queues_lock = threading.Lock()
        self._inflight = 0
        self._inflight_cond = threading.Condition()

    # -- route resolution ---------------------------------------------------

    def _match_routes(self, path: str) -> Optional[str]:
        prefix = self.config.route_prefix
        if path == prefix or path == prefix + "/":
            return _DEFAULT_ROUTE
        if path.startswith(prefix + "/"):
            name = path[len(prefix) + 1:].strip("/")
            if name and "/" not in name and name in self.registration.named_routes:
                return name
        return None

    def resolve_route(self, path: str) -> Optional[str]:
        """Map a request path to a route name ("" = default), or None (404).

        Accepted shapes: ``<prefix>``, ``<prefix>/<name>``, and the same two
        behind an active tunnel token (``/<token>``, ``/<token><prefix>...``,
        ``/<token>/<name>``). Wrong or revoked tokens resolve to nothing.
        """
        path = path.split("?", 1)[0]
        route = self._match_routes(path)
        if route is not None:
            return route
        first, _, rest = path.lstrip("/").partition("/")
        if first and self.token_registry.is_active(first):
            remainder = "/" + rest if rest else ""
            if remainder in ("", "/"):
                return _DEFAULT_ROUTE
            route = self._match_routes(remainder)
            if route is not None:
                return route
            name = remainder.strip("/")
            if name and "/" not in name and name in self.registration.named_routes:
                return name
        return None

    # -- execution ----------------------------------------------------------

    def _queue_for(self, key: str) -> _KeyQueue:
        with self._queues_lock:
            queue = self._queues.get(key)
            if queue is None:
                queue = self._queues[key] = _KeyQueue(self.config.per_device_queue_depth)
            return queue

    def _device_key(self, route: str, env: TriggerEnvelope) -> Optional[str]:
        if route == _DEFAULT_ROUTE:
            if self.registration.default_key_fn is not None:
                return self.registration.default_key_fn(env)
            return env.item_id or None
        return self.registration.route_device_keys.get(route)

    def _run_handler(self, handler: Callable[[str], Any], env: TriggerEnvelope,
                     queue: Optional[_KeyQueue], ticket: Optional[object]) -> HandlerResponse:
        """Run the handler on its own thread, bounded by the configured timeout."""
        timeout_s = self.config.handler_timeout_ms / 1000.0
        box: dict[str, Any] = {}
        done = threading.Event()

        def runner():
            try:
                box["value"] = handler(env.request)
            except BaseException as exc:  # noqa: BLE001 - becomes a 500, never kills the server
                box["error"] = exc
            finally:
                if queue is not None:
                    queue.leave(ticket)
                done.set()

        thread = threading.Thread(target=runner, daemon=True, name="worldhook-handler")
        thread.start()
        if not done.wait(timeout_s):
            # The runner keeps the device turn until it truly finishes.
            return HandlerResponse.from_error(GatewayError(
                ErrorCode.INTERNAL,
                f"handler timed out after {self.config.handler_timeout_ms}ms",
                env.request_id,
            ))
        if "error" in box:
            exc = box["error"]
            code = ErrorCode.DEVICE_FAULT if isinstance(exc, DeviceFaultError) else ErrorCode.INTERNAL
            return HandlerResponse.from_error(GatewayError(code, str(exc), env.request_id))
        return self._normalize(box.get("value"))

    @staticmethod
    def _normalize(result: Any) -> HandlerResponse:
        if isinstance(result, HandlerResponse):
            return result
        if isinstance(result, GatewayError):
            return HandlerResponse.from_error(result)
        if result is None:
            return HandlerResponse.ok("")
        return HandlerResponse.ok(result)

    def handle_request(self, raw_body: bytes, path: str, method: str = "POST") -> tuple[int, bytes]:
        """Full request lifecycle; always returns a (status, body) pair."""
        start = time.monotonic()
        with self._inflight_cond:
            self._inflight += 1
        try:
            try:
                return self._handle(raw_body, path, method, start)
            except Exception as exc:  # gateway bug: still answer, never die
                err = GatewayError(ErrorCode.INTERNAL, f"internal error: {exc}")
                return self._finish(HandlerResponse.from_error(err), start=start,
                                    envelope=None, route=path, dispatched=False)
        finally:
            with self._inflight_cond:
                self._inflight -= 1
                self._inflight_cond.notify_all()

    def _finish(self, response: HandlerResponse, *, start: float,
                envelope: Optional[TriggerEnvelope], route: str,
                dispatched: bool) -> tuple[int, bytes]:
        status, body = serialize_response(response)
        request_id = envelope.request_id if envelope else ""
        self.request_log.append(
            request_id=request_id,
            envelope=envelope,
            response_status=status,
            latency_ms=(time.monotonic() - start) * 1000.0,
            route=route,
            dispatched=dispatched,
        )
        return status, body

    def _handle(self, raw_body: bytes, path: str, method: str, start: float) -> tuple[int, bytes]:
        route = self.resolve_route(path)
        if route is None:
            err = GatewayError(ErrorCode.UNKNOWN_FUNCTION, f"no route for {path!r}")
            return self._finish(HandlerResponse.from_error(err),
                                start=start, envelope=None, route=path, dispatched=False)
        if method != "POST":
            err = GatewayError(ErrorCode.MALFORMED_ENVELOPE, "only POST is supported")
            return self._finish(HandlerResponse.from_error(err),
                                start=start, envelope=None, route=route, dispatched=False)

        decoded = decode_envelope(raw_body)
        if isinstance(decoded, GatewayError):
            return self._finish(HandlerResponse.from_error(decoded),
                                start=start, envelope=None, route=route, dispatched=False)
        env = decoded

        if self.registration.pre_dispatch is not None:
            rejection = self.registration.pre_dispatch(env, route)
            if rejection is not None:
                return self._finish(HandlerResponse.from_error(rejection),
                                    start=start, envelope=env, route=route, dispatched=False)

        if route == _DEFAULT_ROUTE:
            handler = self.registration.default_handler
        else:
            handler = self.registration.named_routes.get(route)
        if handler is None:
            err = GatewayError(ErrorCode.UNKNOWN_FUNCTION, "no handler for this route",
                               env.request_id)
            return self._finish(HandlerResponse.from_error(err),
                                start=start, envelope=env, route=route, dispatched=False)

        key = self._device_key(route, env)
        queue = ticket = None
        if key is not None:
            queue = self._queue_for(key)
            ticket = queue.enter()
            if ticket is None:
                err = GatewayError(ErrorCode.DEVICE_FAULT,
                                   f"device queue full for key {key!r}", env.request_id)
                return self._finish(HandlerResponse.from_error(err),
                                    start=start, envelope=env, route=route, dispatched=False)
            if not queue.await_turn(ticket, self.config.handler_timeout_ms / 1000.0):
                err = GatewayError(ErrorCode.INTERNAL,
                                   f"timed out waiting for device {key!r}", env.request_id)
                return self._finish(HandlerResponse.from_error(err),
                                    start=start, envelope=env, route=route, dispatched=False)

        response = self._run_handler(handler, env, queue, ticket)
        return self._finish(response, start=start, envelope=env, route=route, dispatched=True)

    def wait_idle(self, timeout_s: float) -> bool:
        with self._inflight_cond:
            return self._inflight_cond.wait_for(lambda: self._inflight == 0, timeout_s)


class _GatewayHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    block_on_close = False
    request_queue_size = 128
    dispatcher: RequestDispatcher  # attached by run()


class _GatewayRequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    timeout = 30

    def _respond(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _serve(self, method: str) -> None:
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            length = 0
        raw = self.rfile.read(length) if length > 0 else b""
        status, body = self.server.dispatcher.handle_request(raw, self.path, method)
        try:
            self._respond(status, body)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away; the request is already logged

    def do_POST(self):
        self._serve("POST")

    def do_GET(self):
        self._serve("GET")

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass  # request logging goes through RequestLog, not stderr


@dataclass
class ServerHandle:
    """A running gateway: bound port, its request log, and shutdown."""

    port: int
    request_log: RequestLog
    dispatcher: RequestDispatcher
    _server: _GatewayHTTPServer
    _thread: threading.Thread
    _closed: bool = field(default=False)
    _close_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    @property
    def trigger_url(self) -> str:
        return self.base_url + self.dispatcher.config.route_prefix

    def shutdown(self) -> None:
        """Stop listening, let in-flight requests finish (bounded), close. Idempotent."""
        with self._close_lock:
            if self._closed:
                return
            self._closed = True
        self._server.shutdown()
        self.dispatcher.wait_idle(self.dispatcher.config.handler_timeout_ms / 1000.0)
        self._server.server_close()
        self._thread.join(timeout=5.0)


def run(config: GatewayConfig, registration: HandlerRegistration,
        token_registry: Optional[tunnel.TokenRegistry] = None) -> ServerHandle:
    """Start the gateway and return once the listener is accepting connections."""
    if not registration.has_handlers():
        raise RegistrationError("at least one handler must be registered before run()")
    dispatcher = RequestDispatcher(config, registration, token_registry)
    try:
        server = _GatewayHTTPServer(("127.0.0.1", config.bind_port), _GatewayRequestHandler)
    except OSError as exc:
        raise GatewayStartupError(f"cannot bind port {config.bind_port}: {exc}") from exc
    server.dispatcher = dispatcher
    thread = threading.Thread(target=server.serve_forever, daemon=True,
                              name="worldhook-gateway")
    thread.start()
    return ServerHandle(
        port=server.server_address[1],
        request_log=dispatcher.request_log,
        dispatcher=dispatcher,
        _server=server,
        _thread=thread,
    )


class GatewayApp:
    """Small app facade: register handlers by decorator, then ``run()``.

    >>> app = GatewayApp()
    >>> @app.receive
    ... def handle(data):
    ...     return data
    >>> handle_ = app.run()   # doctest: +SKIP
    """

    def __init__(self, config: Optional[GatewayConfig] = None,
                 token_registry: Optional[tunnel.TokenRegistry] = None):
        self.config = config or GatewayConfig()
        self.registration = HandlerRegistration()
        self._token_registry = token_registry

    def receive(self, handler: Callable[[str], Any]) -> Callable[[str], Any]:
        self.registration.register_default(handler)
        return handler

    def route(self, name: str, device_key: Any = HandlerRegistration._UNSET):
        def decorator(handler: Callable[[str], Any]) -> Callable[[str], Any]:
            self.registration.register_route(name, handler, device_key)
            return handler
        return decorator

    def run(self) -> ServerHandle:
        return run(self.config, self.registration, self._token_registry)
