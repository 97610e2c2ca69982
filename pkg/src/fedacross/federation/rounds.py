"""One federated round: every client syncs, adapts and uploads; then aggregate."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..errors import FedAcrossError, TransportError
from .client import ClientState, client_session
from .messages import RoundConfig
from .server import ServerState

log = logging.getLogger(__name__)


@dataclass
class RoundMetrics:
    clients: dict[str, dict] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    version_before: int = 0
    version_after: int = 0

    @property
    def accuracies(self) -> dict[str, float]:
        return {cid: m["accuracy"] for cid, m in self.clients.items()}

    @property
    def param_bytes(self) -> dict[str, int]:
        return {cid: m["param_bytes"] for cid, m in self.clients.items()}


def _one(client: ClientState, transport):
    try:
        channel = transport.connect()
    except OSError as exc:
        raise TransportError(str(exc)) from exc
    with channel:
        return client_session(client, channel)


def run_round(server: ServerState, clients, transport, round_cfg: RoundConfig,
              parallel: bool = False) -> RoundMetrics:
    """Collect-then-aggregate. Clients that fail are recorded and skipped."""
    server.round_cfg = round_cfg
    metrics = RoundMetrics(version_before=server.version)
    clients = list(clients)
    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            futures = [pool.submit(_one, c, transport) for c in clients]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except (FedAcrossError, OSError) as exc:
                    outcomes.append(exc)
    else:
        outcomes = []
        for c in clients:
            try:
                outcomes.append(_one(c, transport))
            except (FedAcrossError, OSError) as exc:
                outcomes.append(exc)
    for c, out in zip(clients, outcomes):
        if isinstance(out, Exception):
            log.warning("client %s dropped out: %s", c.client_id, out)
            metrics.failures[c.client_id] = f"{type(out).__name__}: {out}"
        else:
            metrics.clients[c.client_id] = out
    server.close_round()
    metrics.version_after = server.version
    return metrics
