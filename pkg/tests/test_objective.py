import math

import numpy as np
import pytest

from procplan import diffcore as dc
from procplan.diffcore import Tape, Tensor
from procplan.objective import action_loss, cross_entropy, similarities, total_loss

from oracles import FROZEN


def test_uniform_dots():
    assert abs(action_loss(Tensor(np.full((2, 3), 4.2)), [0, 2]).item() - 2 * math.log(3)) < 1e-12
    batched = action_loss(Tensor(np.zeros((5, 3, 20))), np.zeros((5, 3), dtype=int)).item()
    assert abs(batched - 3 * math.log(20)) < 1e-12


def test_peaked_dots():
    got = action_loss(Tensor([[5.0, 0.0, 0.0]]), [0]).item()
    assert abs(got - FROZEN["action_loss_500"]) < 1e-12
    assert abs(got - 0.013385) < 1e-6


def test_shift_invariance(rng):
    dots = rng.standard_normal((4, 3, 6))
    gt = rng.integers(0, 6, (4, 3))
    shift = rng.standard_normal((4, 3, 1)) * 10
    a = action_loss(Tensor(dots), gt).item()
    b = action_loss(Tensor(dots + shift), gt).item()
    assert abs(a - b) < 1e-12


def test_action_loss_needs_two_candidates():
    with pytest.raises(ValueError):
        action_loss(Tensor(np.zeros((2, 1))), [0, 0])


def test_similarities_are_dot_products(rng):
    a = rng.standard_normal((2, 3, 4))
    bank = rng.standard_normal((3, 5, 4))
    got = similarities(Tensor(a), Tensor(bank)).data
    assert got.shape == (2, 3, 5)
    np.testing.assert_allclose(got, np.einsum("btd,tnd->btn", a, bank), atol=1e-12)


def test_total_loss():
    assert total_loss(Tensor(1.5), Tensor(0.5)).total.item() == 2.0
    only = total_loss(Tensor(1.5), None)
    assert only.total.item() == 1.5 and only.as_floats()["l_event"] == 0.0
    with pytest.raises(dc.NonFiniteError):
        total_loss(Tensor(float("nan")), None)


def test_gradient_of_total_is_sum_of_parts(rng):
    w = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    x = rng.standard_normal((3, 2, 4))
    gt = rng.integers(0, 3, (3, 2))
    labels = rng.integers(0, 6, 3)

    def parts():
        h = dc.matmul(Tensor(x), w)                              # (3, 2, 6)
        la = action_loss(h[:, :, :3], gt)
        le = cross_entropy(dc.mean(h, axis=1), labels)
        return la, le

    grads = []
    for pick in ("action", "event", "total"):
        w.zero_grad()
        with Tape() as tape:
            la, le = parts()
            loss = {"action": la, "event": le, "total": total_loss(la, le).total}[pick]
        tape.backward(loss)
        grads.append(w.grad.copy())
    np.testing.assert_allclose(grads[2], grads[0] + grads[1], atol=1e-14)


def test_uniform_event_loss():
    assert abs(cross_entropy(Tensor(np.zeros((7, 4))), np.arange(7) % 4).item() - math.log(4)) < 1e-12
