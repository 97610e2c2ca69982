import dataclasses
import typing

import numpy as np
import pytest

from fedacross.data import Dataset, Sample, SupportSet
from fedacross.errors import ConfigError, DivergenceError, ProtocolError, ScarcityError, WeightingError
from fedacross.federation import (ACK_BASELINE, ACK_ERROR, ACK_NEED_SOURCE, ACK_OK, ACK_READY, ACK_WAIT, Ack,
                                  AdaptedUpload, ClientConfig, ClientHello, ClientState, InProcessTransport,
                                  ModelDelta, ModelFull, PretrainConfig, RetryLater, RoundConfig, ServerState,
                                  SocketTransport, SourcePrototypes, apply_delta, client_adapt, client_infer,
                                  client_predict, client_session, compute_delta, decode, encode, evaluate,
                                  fedavg_psi, prepare_support, run_round, server_pretrain, support_loss,
                                  transmit_params)
from fedacross.federation.messages import MESSAGE_TYPES
from fedacross.model import (AdaptationParams, ModelConfig, ModelParams, embed, group_bytes, init_params,
                             params_to_bytes)
from fedacross.numerics import make_rng
from fedacross.prototypes import PrototypeSet, compute_prototypes, nearest_prototype_batch
from fedacross.training import TrainConfig, train


def random_params(rng):
    cfg = ModelConfig(in_dim=int(rng.integers(1, 12)), hidden=tuple(int(h) for h in rng.integers(1, 6, rng.integers(0, 3))),
                      embed_dim=int(rng.integers(1, 6)), n_classes=int(rng.integers(1, 5)))
    p = init_params(cfg, rng)
    p.frozen_phi, p.frozen_nu = bool(rng.integers(2)), bool(rng.integers(2))
    return p


def random_protos(rng, m):
    n = int(rng.integers(0, 5))
    if n == 0:
        return PrototypeSet(m)
    return compute_prototypes(rng.normal(size=(n * 2, m)), rng.integers(0, 7, size=n * 2))


def random_message(rng):
    kind = MESSAGE_TYPES[int(rng.integers(len(MESSAGE_TYPES)))]
    text = "".join(chr(int(c)) for c in rng.integers(32, 0x2FFF, size=rng.integers(0, 12)))
    if kind is ClientHello:
        return ClientHello(text, bool(rng.integers(2)), int(rng.integers(0, 2**63)))
    if kind is ModelFull:
        return ModelFull(int(rng.integers(0, 2**63)), random_params(rng))
    if kind is ModelDelta:
        base = random_params(rng)
        cur = base.with_arrays({k: v + rng.normal(size=v.shape) * (rng.random() < 0.5)
                                for k, v in base.arrays().items()})
        return compute_delta(base, cur, int(rng.integers(1, 100)), int(rng.integers(1, 100)))
    if kind is RoundConfig:
        return RoundConfig(int(rng.integers(0, 50)), tuple(int(c) for c in rng.integers(0, 100, rng.integers(0, 10))),
                           int(rng.integers(0, 500)), float(rng.uniform(1e-4, 1)), int(rng.integers(0, 2**63)))
    if kind is AdaptedUpload:
        p = random_params(rng)
        protos = random_protos(rng, p.embed_dim)
        return AdaptedUpload(text, p.psi, protos, {n: int(rng.integers(0, 20)) for n in protos.classes})
    if kind is SourcePrototypes:
        return SourcePrototypes(random_protos(rng, int(rng.integers(1, 6))))
    return Ack(int(rng.choice([ACK_OK, ACK_READY, ACK_NEED_SOURCE, ACK_BASELINE, ACK_WAIT, ACK_ERROR])))


# wire format

def test_thousand_random_messages_round_trip():
    rng = make_rng(0)
    seen = set()
    for _ in range(1000):
        msg = random_message(rng)
        frame = encode(msg)
        back = decode(frame)
        assert type(back) is type(msg)
        assert encode(back) == frame
        seen.add(type(msg))
    assert seen == set(MESSAGE_TYPES)


def test_frame_layout():
    frame = encode(Ack(ACK_READY))
    assert frame == b"\x00\x00\x00\x03\x07\x01\x01"


@pytest.mark.parametrize("frame", [b"", b"\x00\x00\x00\x02\x07", b"\x00\x00\x00\x03\x63\x01\x00",
                                   b"\x00\x00\x00\x03\x07\x09\x00", b"\x00\x00\x00\x04\x07\x01\x00\x00"])
def test_malformed_frames(frame):
    with pytest.raises(ProtocolError):
        decode(frame)


def test_truncated_payload():
    frame = encode(ModelFull(3, init_params(ModelConfig(in_dim=4, hidden=(), embed_dim=2, n_classes=2), make_rng(1))))
    cut = frame[:-5]
    with pytest.raises(ProtocolError):
        decode(len(cut[4:]).to_bytes(4, "big") + cut[4:])


def _leaf_types(tp, seen=None):
    """Every type reachable through dataclass fields and generic arguments."""
    seen = set() if seen is None else seen
    for arg in typing.get_args(tp) or ():
        _leaf_types(arg, seen)
    if isinstance(tp, type) and tp not in seen:
        seen.add(tp)
        if dataclasses.is_dataclass(tp):
            for f in dataclasses.fields(tp):
                _leaf_types(typing.get_type_hints(tp)[f.name], seen)
    return seen


def test_only_model_messages_carry_weights_and_none_carry_samples():
    for cls in MESSAGE_TYPES:
        reach = _leaf_types(cls)
        assert not reach & {Sample, Dataset, SupportSet}, cls
        if cls not in (ModelFull, ModelDelta):
            assert ModelParams not in reach, cls


# deltas and transmission

def test_delta_of_unchanged_model_is_empty(world):
    d = compute_delta(world.params, world.params, 1, 1)
    assert d.deltas == {} and set(d.shapes) == set(world.params.arrays())


def test_delta_reconstructs_global_exactly(world):
    rng = make_rng(2)
    current = world.params
    for _ in range(3):
        x = rng.uniform(size=(40, 8, 8))
        current = train(current, x, rng.integers(0, 4, size=40), TrainConfig(epochs=2, batch_size=16, lr=0.1), rng)
        current.frozen_phi = bool(rng.integers(2))
        d = decode(encode(compute_delta(world.params, current, 1, 7)))
        assert params_to_bytes(apply_delta(world.params, d)) == params_to_bytes(current)


def _adapted_server(world):
    server = ServerState.from_pretrained(world.params, world.protos, "differential_sync")
    clients = _clients(world, baseline=True)
    run_round(server, clients, InProcessTransport(server), RoundConfig(3, (0, 1, 2, 3), 10, 0.1, 1))
    return server


def test_delta_after_adaptation_is_smaller_than_full_model(world):
    server = _adapted_server(world)
    assert server.version == 2
    d = compute_delta(server.baseline, server.global_params, 1, server.version)
    assert all(k.startswith("psi.") for k in d.deltas)
    assert len(encode(d)) < len(encode(ModelFull(server.version, server.global_params)))


def test_strategies(world):
    server = ServerState.from_pretrained(world.params, world.protos, "on_demand")
    assert isinstance(transmit_params(server, ClientHello("a")), ModelFull)
    assert transmit_params(server, ClientHello("a", True, 1), "pre_configured") == Ack(ACK_BASELINE)
    with pytest.raises(ProtocolError):
        transmit_params(server, ClientHello("a"), "pre_configured")
    assert isinstance(transmit_params(server, ClientHello("a", True, 1), "differential_sync"), ModelDelta)
    assert isinstance(transmit_params(server, ClientHello("a", True, 5), "differential_sync"), ModelFull)
    with pytest.raises(ConfigError):
        transmit_params(server, ClientHello("a"), "carrier_pigeon")


# aggregation

def _psi(rng, m=3):
    return AdaptationParams(rng.normal(size=(m, m)), np.array(rng.normal()), rng.normal(size=m), rng.normal(size=m),
                            rng.normal(size=m), rng.uniform(0.5, 2, size=m))


def _upload(psi, n):
    return AdaptedUpload("c", psi, PrototypeSet(psi.dim), {0: n})


def test_fedavg_of_identical_uploads():
    psi = _psi(make_rng(3))
    out = fedavg_psi([_upload(psi, 2), _upload(psi, 5)])
    for name in ("W", "b", "gamma", "beta", "mu", "sigma"):
        np.testing.assert_allclose(getattr(out, name), getattr(psi, name), rtol=1e-15, atol=0)


def test_fedavg_with_zero_weight():
    rng = make_rng(4)
    a, b = _psi(rng), _psi(rng)
    out = fedavg_psi([_upload(a, 1), _upload(b, 0)])
    for name in ("W", "b", "gamma", "beta", "mu", "sigma"):
        np.testing.assert_array_equal(getattr(out, name), getattr(a, name))


def test_fedavg_weighted_elementwise():
    rng = make_rng(5)
    a, b = _psi(rng), _psi(rng)
    out = fedavg_psi([_upload(a, 1), _upload(b, 3)])
    for name in ("W", "b", "gamma", "beta", "mu", "sigma"):
        got, x, y = getattr(out, name), getattr(a, name), getattr(b, name)
        for idx in np.ndindex(np.shape(got)):
            assert got[idx] == pytest.approx((x[idx] + 3 * y[idx]) / 4, abs=1e-15)


def test_fedavg_errors():
    psi = _psi(make_rng(6))
    with pytest.raises(WeightingError):
        fedavg_psi([_upload(psi, 0)])
    with pytest.raises(WeightingError):
        fedavg_psi([])


# pre-training

def test_zero_epochs_keeps_initialisation(world):
    cfg = PretrainConfig(ModelConfig(in_dim=64, hidden=(32,), embed_dim=8, n_classes=4),
                         TrainConfig(epochs=0, batch_size=32, lr=0.05), seed=3)
    params, protos = server_pretrain(world.source, cfg)
    init = init_params(cfg.model, make_rng([3, 11]))
    assert params_to_bytes(params) == params_to_bytes(init)
    ref = compute_prototypes(embed(init, world.source.flat), world.source.labels)
    for n in range(4):
        np.testing.assert_array_equal(protos[n].vector, ref[n].vector)


def test_separable_toy_problem():
    rng = make_rng(7)
    labels = np.repeat(np.arange(3), 30)
    images = rng.uniform(0, 0.1, size=(90, 6, 6))
    for i, y in enumerate(labels):
        images[i, 2 * y:2 * y + 2, :] += 0.8
    ds = Dataset(images, labels, 3)
    cfg = PretrainConfig(ModelConfig(in_dim=36, hidden=(16,), embed_dim=4, n_classes=3),
                         TrainConfig(epochs=50, batch_size=16, lr=0.05), seed=1)
    params, protos = server_pretrain(ds, cfg)
    pred, _ = nearest_prototype_batch(embed(params, ds.flat), protos)
    assert (pred == labels).mean() >= 0.95


def test_source_loss_decreases(world):
    assert all(np.isfinite(world.loss))
    assert world.loss[-1] < world.loss[0]


def test_source_must_cover_all_classes(world):
    part = world.source.subset(np.flatnonzero(world.source.labels != 2))
    with pytest.raises(ConfigError):
        server_pretrain(part, PretrainConfig(ModelConfig(in_dim=64, hidden=(), embed_dim=4, n_classes=4),
                                             TrainConfig(epochs=1, batch_size=8, lr=0.1)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(world):
    cfg = PretrainConfig(ModelConfig(in_dim=64, hidden=(32,), embed_dim=8, n_classes=4, linear_std=1.0),
                         TrainConfig(epochs=20, batch_size=8, lr=1e6, weight_decay=0.0), seed=0)
    with pytest.raises(DivergenceError, match="epoch"):
        server_pretrain(world.source, cfg)


# client side

def _clients(world, baseline=False, n=3):
    out = []
    for i, (train_ds, test_ds) in enumerate(world.targets[:n]):
        c = ClientState(f"client-{i}", i, train_ds, test_ds, ClientConfig())
        if baseline:
            c.baseline, c.baseline_version = world.params.copy(), 1
        out.append(c)
    return out


def _adapt(world, k=3, epochs=30):
    c = _clients(world, n=1)[0]
    c.install(world.params)
    cfg = RoundConfig(k, (0, 1, 2, 3), epochs, 0.1, 11)
    prepare_support(c, cfg)
    return c, cfg


def test_adaptation_freezes_extractor_and_classifier(world):
    c, cfg = _adapt(world)
    before = {g: group_bytes(c.model, g) for g in ("phi", "nu", "psi")}
    upload = client_adapt(c, cfg)
    assert group_bytes(c.model, "phi") == before["phi"]
    assert group_bytes(c.model, "nu") == before["nu"]
    assert group_bytes(c.model, "psi") != before["psi"]
    assert upload.support_counts == {n: 3 for n in range(4)}


def test_zero_shot_uses_source_prototypes(world):
    c, cfg = _adapt(world, k=0)
    cfg = RoundConfig(0, (1, 3), 30, 0.1, 11)
    prepare_support(c, cfg)
    before = params_to_bytes(c.model)
    upload = client_adapt(c, cfg, world.protos)
    assert params_to_bytes(c.model) == before
    assert upload.prototypes.classes == [1, 3] and upload.total_support == 0
    np.testing.assert_array_equal(upload.prototypes[1].vector, world.protos[1].vector)


def test_adaptation_lowers_support_loss(world):
    c, cfg = _adapt(world, k=5, epochs=60)
    pre = support_loss(c.model, c.support)
    client_adapt(c, cfg)
    assert support_loss(c.model, c.support) < pre


def test_empty_support_with_positive_k(world):
    c, cfg = _adapt(world)
    c.support = None
    with pytest.raises(ScarcityError):
        client_adapt(c, cfg)


def test_inference(world):
    c, cfg = _adapt(world)
    client_adapt(c, cfg)
    test = c.test_data
    pred = client_predict(c, test.images)
    assert [client_infer(c, x) for x in test.images[:20]] == pred[:20].tolist()
    assert client_predict(c, test.images).tolist() == pred.tolist()
    z = embed(c.model, test.flat)
    ids, P = c.protos.matrix()
    d = ((z[:, None, :] - P[None]) ** 2).sum(-1)
    assert (ids[d.argmin(1)] == pred).all()
    # a query whose embedding is exactly a prototype: use a support image and its own one-sample prototype
    img = c.support.per_class[2][0]
    c.protos = compute_prototypes(embed(c.model, img.reshape(1, -1)), [2])
    assert client_infer(c, img) == 2


def test_inference_agrees_with_exhaustive_search_on_thousand_points(world):
    c, cfg = _adapt(world)
    client_adapt(c, cfg)
    x = make_rng(8).uniform(size=(1000, 8, 8))
    pred = client_predict(c, x)
    z = embed(c.model, x.reshape(1000, -1))
    for zi, p in zip(z, pred):
        best = min(c.protos.classes, key=lambda n: (float(((zi - c.protos[n].vector) ** 2).sum()), n))
        assert p == best


# rounds and transports

def test_single_client_round_matches_direct_calls(world):
    cfg = RoundConfig(3, (0, 1, 2, 3), 20, 0.1, 5)
    server = ServerState.from_pretrained(world.params, world.protos)
    a = _clients(world, n=1)
    m = run_round(server, a, InProcessTransport(server), cfg)

    b = _clients(world, n=1)[0]
    b.install(world.params)
    prepare_support(b, cfg)
    client_adapt(b, cfg)
    assert m.accuracies["client-0"] == evaluate(b, classes=cfg.classes)
    assert params_to_bytes(a[0].model) == params_to_bytes(b.model)


def _metrics(world, transport_kind, rounds=2):
    server = ServerState.from_pretrained(world.params, world.protos)
    clients = _clients(world)
    tr = SocketTransport(server) if transport_kind == "socket" else InProcessTransport(server)
    out = []
    try:
        for r in range(rounds):
            m = run_round(server, clients, tr, RoundConfig(3, (0, 1, 2, 3), 15, 0.1, 20 + r))
            out.append((m.clients, m.version_before, m.version_after))
    finally:
        tr.close()
    return out, params_to_bytes(server.global_params)


def test_socket_and_in_process_give_identical_metrics(world):
    assert _metrics(world, "in_process") == _metrics(world, "socket")


def test_three_clients_one_version_step(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    m = run_round(server, _clients(world), InProcessTransport(server), RoundConfig(3, (0, 1, 2, 3), 15, 0.1, 3))
    assert len(m.accuracies) == 3 and not m.failures
    assert m.version_after == m.version_before + 1
    assert server.fused_protos[0].support_count == world.protos[0].support_count + 9


def test_version_strictly_increases(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    clients = _clients(world, n=2)
    versions = [server.version]
    for r in range(3):
        run_round(server, clients, InProcessTransport(server), RoundConfig(3, (0, 1, 2, 3), 5, 0.1, r))
        versions.append(server.version)
    assert versions == [1, 2, 3, 4]


def test_zero_shot_round_leaves_model_alone(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    m = run_round(server, _clients(world), InProcessTransport(server), RoundConfig(0, (0, 1, 2, 3), 5, 0.1, 3))
    assert not m.failures and server.version == 1


def test_churn_is_tolerated(world):
    server = ServerState.from_pretrained(world.params, world.protos, "pre_configured")
    clients = _clients(world, baseline=True)
    clients[1].baseline = None  # this one cannot join a pre-configured round
    scarce = ClientState("client-9", 9, world.targets[2][0].subset([0, 1]), world.targets[2][1])
    scarce.baseline, scarce.baseline_version = world.params, 1
    m = run_round(server, clients + [scarce], InProcessTransport(server), RoundConfig(3, (0, 1, 2, 3), 5, 0.1, 3))
    assert set(m.accuracies) == {"client-0", "client-2"}
    assert "ProtocolError" in m.failures["client-1"] and "ScarcityError" in m.failures["client-9"]
    assert m.version_after == 2


def test_unreachable_server_is_a_transport_failure(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    tr = SocketTransport(None, "127.0.0.1", 1, timeout=1.0)
    m = run_round(server, _clients(world, n=1), tr, RoundConfig(3, (0, 1, 2, 3), 5, 0.1, 3))
    assert "TransportError" in m.failures["client-0"]


def test_second_session_in_a_round_must_wait(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    server.round_cfg = RoundConfig(3, (0, 1, 2, 3), 5, 0.1, 3)
    c = _clients(world, n=1)[0]
    tr = InProcessTransport(server)
    with tr.connect() as ch:
        client_session(c, ch)
    with tr.connect() as ch, pytest.raises(RetryLater):
        client_session(c, ch)
    server.close_round()
    server.round_cfg = None
    with tr.connect() as ch, pytest.raises(RetryLater):
        client_session(c, ch)


def test_upload_size_does_not_depend_on_k(world):
    sizes = set()
    for k in (3, 5, 10):
        c, cfg = _adapt(world, k=k, epochs=2)
        sizes.add(len(encode(client_adapt(c, cfg))))
    assert len(sizes) == 1


def test_protocol_errors_become_error_acks(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    with InProcessTransport(server).connect() as ch:
        assert ch.request(Ack(ACK_READY)) == Ack(ACK_ERROR)


def test_upload_can_be_switched_off(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    c = _clients(world, n=1)[0]
    c.config = ClientConfig(upstream=False)
    m = run_round(server, [c], InProcessTransport(server), RoundConfig(3, (0, 1, 2, 3), 5, 0.1, 3))
    assert m.clients["client-0"]["upload_bytes"] == 0 and server.version == 1


def test_sampled_support_round(world):
    server = ServerState.from_pretrained(world.params, world.protos)
    c = _clients(world, n=1)[0]
    c.config = ClientConfig(sampling=True, sampler_budget=0.3)
    m = run_round(server, [c], InProcessTransport(server), RoundConfig(2, (0, 1, 2, 3), 5, 0.1, 3))
    assert not m.failures
    assert c.support.counts() == {n: 2 for n in range(4)}
    assert m.clients["client-0"]["labels_requested"] >= 8
