import copy
import itertools

import numpy as np
import pytest
import torch
from torch import nn

from dfutissue.data import DatasetPools, RgbImage, TissueMask
from dfutissue.ssl import PoolUnderflowError, SslConfig, generate_pseudo_labels, train_semi_supervised
from dfutissue.trainer import Checkpoint

PIX = np.zeros((2, 2, 3), np.uint8)


class Stub(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return torch.zeros(x.shape[0], 4, *x.shape[-2:]) + self.w


def make_pools(labeled=78, unlabeled=600):
    L = [(RgbImage(PIX, f"l{i}"), TissueMask(np.zeros((2, 2), np.uint8))) for i in range(labeled)]
    U = [RgbImage(PIX, f"u{i:03d}") for i in range(unlabeled)]
    return DatasetPools(L=L, U=U)


def predict_stub(model, images):
    return {im.name: TissueMask(np.ones((2, 2), np.uint8)) for im in images}


class TrainStub:
    """Returns injected validation losses in call order and records what each run saw."""

    def __init__(self, losses):
        self.losses = iter(losses)
        self.calls = []

    def __call__(self, model, pairs, val):
        start = model.w.item()
        with torch.no_grad():
            model.w.fill_(len(self.calls) + 1.0)
        self.calls.append({"size": len(pairs), "start": start})
        return Checkpoint(copy.deepcopy(model.state_dict()), 1, 0.0, 0.0, next(self.losses))


def decreasing(runs):
    # every round's minimum beats the previous one
    return (10.0 - r - 0.1 * k for r in itertools.count() for k in range(runs))


@pytest.mark.parametrize("n,sizes", [(25, [103, 128, 153, 178]), (50, [128, 178, 228, 278])])
def test_round_sizes_follow_the_labeled_pool(n, sizes):
    pools = make_pools()
    stub = TrainStub(decreasing(3))
    res = train_semi_supervised(Stub(), pools, [], SslConfig(rounds=4, runs=3, pick=n), train_fn=stub,
                                predict_fn=predict_stub)
    per_round = [row["train_size"] for row in res.history if row["run"] == 1]
    assert per_round == sizes
    assert len(pools.L) == 78 + 4 * n and len(pools.U) == 600 - 4 * n
    assert res.rounds_completed == 4 and not res.stopped_early


def test_argmin_run_batch_is_transferred():
    pools = make_pools(10, 40)
    stub = TrainStub([0.9, 0.3, 0.7, 0.5])
    res = train_semi_supervised(Stub(), pools, [], SslConfig(rounds=1, runs=4, pick=5), train_fn=stub,
                                predict_fn=predict_stub)
    winner = res.history[1]
    assert winner["selected"] and sum(r["selected"] for r in res.history) == 1
    assert [im.name for im, _ in pools.L[10:]] == sorted(winner["names"])
    assert not set(winner["names"]) & {im.name for im in pools.U}
    assert len(pools.U) == 35
    assert pools.TV == 0.3


def test_stops_on_first_round_without_improvement():
    pools = make_pools(10, 100)
    losses = [0.5, 0.4, 0.6, 0.45, 0.3, 0.2]
    stub = TrainStub(losses)
    res = train_semi_supervised(Stub(), pools, [], SslConfig(rounds=5, runs=2, pick=10), train_fn=stub,
                                predict_fn=predict_stub)
    assert res.stopped_early and res.rounds_completed == 2
    assert len(stub.calls) == 4
    assert pools.TV == 0.4
    # the returned weights are those of the run that set TV
    assert float(res.checkpoint.state_dict["w"]) == 2.0
    # the round-2 batch is still moved before the check
    assert len(pools.L) == 30


def test_runs_restart_from_round_start_and_winner_carries_over():
    pools = make_pools(10, 100)
    stub = TrainStub([0.5, 0.4, 0.6, 0.3, 0.35, 0.2])
    train_semi_supervised(Stub(), pools, [], SslConfig(rounds=3, runs=2, pick=10), train_fn=stub,
                          predict_fn=predict_stub)
    starts = [c["start"] for c in stub.calls]
    # round 1 from the initial weights; round 2 from run 2's weights; round 3 from round 2's run 2
    assert starts == [0.0, 0.0, 2.0, 2.0, 4.0, 4.0]


def test_picked_names_are_deterministic():
    def run(seed):
        pools = make_pools(10, 100)
        return train_semi_supervised(Stub(), pools, [], SslConfig(rounds=2, runs=3, pick=10, seed=seed),
                                     train_fn=TrainStub(decreasing(3)), predict_fn=predict_stub).picked_names()
    assert run(4) == run(4)
    assert run(4) != run(5)


def test_runs_draw_without_replacement():
    pools = make_pools(10, 30)
    res = train_semi_supervised(Stub(), pools, [], SslConfig(rounds=1, runs=5, pick=30), train_fn=TrainStub(
        decreasing(5)), predict_fn=predict_stub)
    for names in res.picked_names():
        assert len(set(names)) == 30


def test_underflow_raises():
    with pytest.raises(PoolUnderflowError):
        train_semi_supervised(Stub(), make_pools(10, 5), [], SslConfig(pick=10), train_fn=TrainStub([]),
                              predict_fn=predict_stub)
    pools = make_pools(10, 15)
    with pytest.raises(PoolUnderflowError, match="round 2"):
        train_semi_supervised(Stub(), pools, [], SslConfig(rounds=3, runs=1, pick=10),
                              train_fn=TrainStub(decreasing(1)), predict_fn=predict_stub)


def test_pseudo_labels_cover_every_image():
    model = Stub()
    images = [RgbImage(np.zeros((4, 4, 3), np.uint8), f"u{i}") for i in range(5)]
    labels = generate_pseudo_labels(model, images, batch_size=2)
    assert sorted(labels) == [f"u{i}" for i in range(5)]
    assert all(m.shape == (4, 4) for m in labels.values())
