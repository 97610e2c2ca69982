"""Client, server, wire messages and transports for federated rounds."""

from .client import (ClientConfig, ClientState, RetryLater, client_adapt, client_infer, client_predict,
                     client_session, evaluate, prepare_support, support_loss)
from .messages import (ACK_BASELINE, ACK_ERROR, ACK_NEED_SOURCE, ACK_OK, ACK_READY, ACK_WAIT, Ack,
                       AdaptedUpload, ClientHello, ModelDelta, ModelFull, RoundConfig, SourcePrototypes,
                       apply_delta, compute_delta, decode, encode)
from .rounds import RoundMetrics, run_round
from .server import (STRATEGIES, PretrainConfig, ServerState, fedavg_psi, server_pretrain,
                     transmit_params)
from .transport import InProcessTransport, SocketServer, SocketTransport

__all__ = [
    "Ack", "ACK_BASELINE", "ACK_ERROR", "ACK_NEED_SOURCE", "ACK_OK", "ACK_READY", "ACK_WAIT", "AdaptedUpload",
    "apply_delta", "client_adapt", "client_infer", "client_predict", "client_session", "ClientConfig",
    "ClientHello", "ClientState", "compute_delta", "decode", "encode", "evaluate", "fedavg_psi",
    "InProcessTransport", "ModelDelta", "ModelFull", "prepare_support", "PretrainConfig", "RetryLater",
    "RoundConfig", "RoundMetrics", "run_round", "server_pretrain", "ServerState", "SocketServer",
    "SocketTransport", "SourcePrototypes", "STRATEGIES", "support_loss", "transmit_params"
]
