import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lwm.errors import ConfigurationError, NumericalFailure
from lwm.losses import (ExperimentId, LossWeights, classification_loss, combined_loss, distillation_loss,
                        top_base_class)

import oracles


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_ce_confident_is_small():
    assert float(classification_loss(t(10.0, 0, 0, 0)[None], [0])) < 1e-3
    margins = [float(classification_loss(t(m, 0, 0)[None], [0])) for m in (1, 5, 20, 40)]
    assert margins == sorted(margins, reverse=True) and margins[-1] < 1e-16


def test_ce_uniform_is_log_c():
    assert abs(float(classification_loss(torch.zeros(1, 7, dtype=torch.float64), [3])) - math.log(7)) < 1e-15


def test_ce_mean_reduction(rng):
    z = torch.as_tensor(rng.normal(size=(1, 5)))
    assert float(classification_loss(z.repeat(2, 1), [2, 2])) == pytest.approx(float(classification_loss(z, [2])),
                                                                                abs=1e-15)


def test_ce_new_head_mode():
    z = t(9.0, 9.0, 1.0, 2.0)[None]
    expect = -math.log(math.exp(2) / (math.exp(1) + math.exp(2)))
    assert float(classification_loss(z, [3], "new", [2, 3])) == pytest.approx(expect, abs=1e-14)


def test_distillation_scalar_values():
    z = torch.zeros(1, 1, dtype=torch.float64)
    assert float(distillation_loss(z, z, "positive-only")) == pytest.approx(-0.5 * math.log(0.5), abs=1e-15)
    assert float(distillation_loss(z, z, "full-bce")) == pytest.approx(math.log(2), abs=1e-15)


def test_full_bce_gradient_zero_at_match(rng):
    y = torch.as_tensor(rng.normal(size=(3, 5)))
    s = y.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(distillation_loss(y, s), s)
    assert float(g.abs().max()) <= 1e-12


def test_distillation_ignores_new_columns(rng):
    y = torch.as_tensor(rng.normal(size=(2, 3)))
    s = torch.as_tensor(rng.normal(size=(2, 5)))
    s2 = s.clone()
    s2[:, 3:] += 100
    assert float(distillation_loss(y, s)) == float(distillation_loss(y, s2))


vec = arrays(np.float64, 5, elements=st.floats(-30, 30))


@given(vec, vec, st.sampled_from(["positive-only", "full-bce"]))
def test_distillation_matches_loop(a, b, form):
    got = float(distillation_loss(torch.as_tensor(a)[None], torch.as_tensor(b)[None], form))
    assert abs(got - oracles.distill_loop(a, b, form)) < 1e-12


def test_top_base_class():
    assert top_base_class(t(0.1, 3.0, -1.0, 7.0), 3) == 1
    assert top_base_class(t(2.0, 2.0, 2.0, 9.0), 3) == 0


@given(arrays(np.float64, 6, elements=st.floats(-50, 50)), st.floats(-1e3, 1e3), st.integers(1, 6))
def test_top_base_class_shift_invariant(z, c, n):
    z = torch.as_tensor(z)
    # shifting can merge nearly-equal values in floating point, so only check when it does not reorder
    shifted = z + c
    if torch.equal(torch.argsort(z[:n], stable=True), torch.argsort(shifted[:n], stable=True)) and \
            len(set(z[:n].tolist())) == len(set(shifted[:n].tolist())):
        assert top_base_class(z, n) == top_base_class(shifted, n)


def test_combined_loss_table():
    assert float(combined_loss(1.0, 5.0, 5.0, LossWeights(1, 1, "Finetuning"))) == 1.0
    assert float(combined_loss(1.0, 2.0, 3.0, LossWeights(1, 1, "LwM"))) == 6.0
    assert float(combined_loss(1.0, 2.0, 3.0, LossWeights(1, 1, "LwF-MC"))) == 3.0
    assert float(combined_loss(1.0, None, None, LossWeights(1, 1, "Finetuning"))) == 1.0


def test_combined_loss_guards():
    with pytest.raises(NumericalFailure):
        combined_loss(torch.tensor(float("nan")), 0.0, 0.0, LossWeights())
    with pytest.raises(ConfigurationError):
        combined_loss(1.0, None, 1.0, LossWeights(1, 1, "LwM"))
    with pytest.raises(ConfigurationError):
        LossWeights(1.0, 0.0, "LwM")


def test_effective_weights_per_id():
    assert LossWeights(2, 3, "Finetuning").effective == (0.0, 0.0)
    assert LossWeights(2, 3, "lwf-mc").effective == (2, 0.0)
    assert LossWeights(2, 3, ExperimentId.LWM).effective == (2, 3)
    with pytest.raises(ConfigurationError):
        ExperimentId.parse("iCaRL")
