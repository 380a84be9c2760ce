import numpy as np
import pytest

import modse.tensor
from modse import gradcheck as gc


def test_tensor_ops_ten_seeds():
    r = gc.check_tensor_ops(n_seeds=10)
    assert r.passed, {k: v for k, v in r.per_item.items() if v > r.tol}
    assert r.worst_err <= 1e-4


def test_gate_suite():
    r = gc.check_gate()
    assert r.passed, r.per_item


def test_moe_layer_suite():
    r = gc.check_moe_layer()
    assert r.passed, r.per_item


def test_balance_loss_suite():
    r = gc.check_balance_loss()
    assert r.passed, r.per_item


def test_end_to_end_micro():
    r = gc.check_end_to_end("micro")
    assert r.worst_err <= 1e-3, sorted(r.per_item.items(), key=lambda kv: -kv[1])[:5]


def test_corrupted_gradient_is_detected(monkeypatch):
    # negative control: break one backward rule and the suite must fail
    real_silu = modse.tensor.silu

    def broken_silu(x):
        out = real_silu(x)
        if out._backward_fn is not None:
            orig = out._backward_fn
            out._backward_fn = lambda g: tuple(None if p is None else p * 1.01 for p in orig(g))
        return out

    monkeypatch.setattr(modse.tensor, "silu", broken_silu)
    r = gc.check_moe_layer()
    assert not r.passed


def test_repeated_runs_identical():
    a = gc.check_gate()
    b = gc.check_gate()
    assert a.per_item == b.per_item
