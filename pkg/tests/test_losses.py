import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from cilcompress import losses
from cilcompress.losses import LabelError, ParameterError

D = torch.float64


def fd_grad(fn, x, h=1e-6):
    """Central finite differences of scalar fn at x (float64)."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return (a - b).norm().item() / max(a.norm().item(), b.norm().item(), 1e-12)


def np_log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def instance(seed, n=5, c=8):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(n, c, generator=g, dtype=torch.float64) * 2
    t = torch.randn(n, c, generator=g, dtype=torch.float64) * 2
    return s, t


PREV = [0, 1, 2, 3, 4]
CUR = [5, 6, 7]


def composite_cases(lam=1.0, mu=0.1, seed=7):
    """(name, fn(student_logits) -> scalar) for every composite objective."""
    s0, t = instance(seed)
    y_all = torch.tensor([0, 6, 3, 7, 5])
    y_cur = torch.tensor([5, 6, 7, 7, 5])
    y_mem = torch.tensor([0, 4, 2])
    tm = torch.randn(3, 8, generator=torch.Generator().manual_seed(seed + 2), dtype=torch.float64)
    gam = [torch.tensor([0.5, -0.3, 0.2], dtype=D)]
    return s0, [
        ("teacher_init", lambda s: losses.teacher_init_loss(s, y_all)),
        ("student_init", lambda s: losses.student_init_loss(s, t, y_all, 2.0, lam)),
        ("student_sub", lambda s: losses.student_sub_loss(s, t, y_all, PREV, 2.0, lam)),
        ("lwf", lambda s: losses.lwf_loss(s, t, y_all, PREV, 2.0, lam)),
        ("icarl", lambda s: losses.icarl_loss(s, t, y_all, PREV, 2.0, lam)),
        ("icarl_kd", lambda s: losses.icarl_kd_loss(s, t, y_all, PREV, 2.0, lam)),
        ("ssil", lambda s: losses.ssil_loss(s, y_cur, s[:3] * 0.7, y_mem, t, tm, CUR, PREV, 2.0, lam)),
        ("ssil_kd", lambda s: losses.ssil_kd_loss(s, y_cur, s[:3] * 0.7, y_mem, t, tm, CUR, PREV, 2.0, lam)),
        ("prune_regularized", lambda s: losses.prune_regularized_loss(s, y_all, gam, mu)),
        ("kd_kl", lambda s: losses.kd_kl(t, s, PREV, 2.0)),
        ("cls_subset", lambda s: losses.cls_loss(s, y_cur, CUR)),
    ]


@pytest.mark.parametrize("idx", range(11))
def test_gradients_match_central_differences(idx):
    s0, cases = composite_cases()
    name, fn = cases[idx]
    s = s0.clone().requires_grad_(True)
    fn(s).backward()
    num = fd_grad(fn, s0.clone())
    assert rel_err(s.grad, num) < 1e-4, name


def test_sparsity_penalty_gradient_is_sign_and_zero_at_zero():
    g = torch.tensor([0.5, -0.25, 0.0], dtype=D, requires_grad=True)
    losses.sparsity_penalty([g]).backward()
    assert g.grad.tolist() == [1.0, -1.0, 0.0]
    gam = torch.tensor([0.5, -0.3, 0.2], dtype=D)
    num = fd_grad(lambda v: losses.sparsity_penalty([v]), gam.clone())
    assert torch.allclose(num, torch.tensor([1.0, -1.0, 1.0], dtype=D), atol=1e-6)


@pytest.mark.parametrize("kind", ["kd_kl", "student_sub", "lwf", "ssil_kd"])
def test_kd_term_has_zero_gradient_outside_subset(kind):
    s0, t = instance(3)
    s = s0.clone().requires_grad_(True)
    if kind == "kd_kl":
        out = losses.kd_kl(t, s, PREV, 2.0)
    else:
        # isolate the KD term: composite minus its zero-weight version
        y = torch.tensor([5, 6, 7, 5, 6])
        if kind == "ssil_kd":
            mk = lambda lam: losses.ssil_kd_loss(s, y, s[:0], y[:0], t, t[:0], CUR, PREV, 2.0, lam)  # noqa: E731
        else:
            f = getattr(losses, f"{kind}_loss")
            mk = lambda lam: f(s, t, y, PREV, 2.0, lam)  # noqa: E731
        out = mk(10.0) - mk(0.0)
    out.backward()
    assert torch.all(s.grad[:, CUR] == 0.0)
    assert torch.any(s.grad[:, PREV] != 0.0)


def test_teacher_logits_receive_no_gradient():
    s, t = instance(4)
    t = t.clone().requires_grad_(True)
    s = s.clone().requires_grad_(True)
    losses.student_init_loss(s, t, torch.tensor([0, 1, 2, 3, 4]), 2.0, 1.0).backward()
    assert t.grad is None


@pytest.mark.parametrize("idx", range(9))
def test_degenerate_weights_reduce_to_cross_entropy(idx):
    s0, cases = composite_cases(lam=0.0, mu=0.0)
    name, fn = cases[idx]
    y_all = torch.tensor([0, 6, 3, 7, 5])
    y_cur = torch.tensor([5, 6, 7, 7, 5])
    y_mem = torch.tensor([0, 4, 2])
    if name.startswith("ssil"):
        ce = losses.cls_loss(s0, y_cur, CUR) + losses.cls_loss(s0[:3] * 0.7, y_mem, PREV)
    else:
        ce = losses.cls_loss(s0, y_all)
    assert abs(fn(s0).item() - ce.item()) <= 1e-8, name


def test_values_against_numpy_oracle():
    s, t = instance(11)
    sn, tn = s.numpy(), t.numpy()
    y = np.array([1, 0, 4, 2, 3])
    ce = -np_log_softmax(sn)[np.arange(5), y].sum()
    assert losses.cls_loss(s, torch.from_numpy(y)).item() == pytest.approx(ce, rel=1e-12)
    sub = np.array(PREV)
    lt, ls = np_log_softmax(tn[:, sub] / 2.0), np_log_softmax(sn[:, sub] / 2.0)
    kl = (np.exp(lt) * (lt - ls)).sum()
    assert losses.kd_kl(t, s, PREV, 2.0).item() == pytest.approx(kl, rel=1e-10)
    lwf = ce + 3.0 * kl
    assert losses.lwf_loss(s, t, torch.from_numpy(y), PREV, 2.0, 3.0).item() == pytest.approx(lwf, rel=1e-10)


def test_student_init_two_class_hand_value():
    s = torch.tensor([[1.0, 0.0]], dtype=D)
    t = torch.tensor([[0.0, 0.0]], dtype=D)
    ce = np.log1p(np.exp(-1.0))
    ps = np.exp([0.5, 0.0]) / np.exp([0.5, 0.0]).sum()
    kl = 0.5 * np.log(0.5 / ps[0]) + 0.5 * np.log(0.5 / ps[1])
    got = losses.student_init_loss(s, t, torch.tensor([0]), tau=2.0, lambda_init=1.0).item()
    assert got == pytest.approx(ce + kl, rel=1e-12)


def test_lwf_equals_student_sub_structurally():
    s, t = instance(5)
    y = torch.tensor([5, 6, 7, 5, 6])
    assert losses.lwf_loss(s, t, y, PREV, 2.0, 4.0).item() == losses.student_sub_loss(s, t, y, PREV, 2.0, 4.0).item()


def test_parameter_and_label_errors():
    s, t = instance(1)
    with pytest.raises(ParameterError):
        losses.kd_kl(t, s, PREV, 0.0)
    with pytest.raises(ParameterError):
        losses.lwf_loss(s, t, torch.tensor([0] * 5), [], 2.0, 1.0)
    with pytest.raises(ParameterError):
        losses.kd_kl(t, s, [0, 9], 2.0)
    with pytest.raises(LabelError):
        losses.cls_loss(s, torch.tensor([0, 1, 2, 3, 4]), CUR)
    with pytest.raises(LabelError):
        losses.cls_loss(s, torch.tensor([8, 0, 0, 0, 0]))
    with pytest.raises(ParameterError):
        losses.prune_regularized_loss(s, torch.tensor([0] * 5), [], mu=-1.0)


@given(st.integers(0, 2**16), st.floats(0.5, 8.0), st.floats(-5, 5))
def test_property_kl_nonnegative_and_shift_invariant(seed, tau, shift):
    s, t = instance(seed, n=3, c=6)
    kl = losses.kd_kl(t, s, [1, 2, 4], tau).item()
    assert kl >= -1e-12
    assert losses.kd_kl(t, s + shift, [1, 2, 4], tau).item() == pytest.approx(kl, abs=1e-9)
    assert losses.kd_kl(s, s, None, tau).item() == pytest.approx(0.0, abs=1e-12)
    p = losses.softmax_temperature(s, [0, 3, 5], tau)
    assert torch.allclose(p.sum(-1), torch.ones(3, dtype=D))


@pytest.mark.parametrize("idx", [0, 1, 2, 3, 4, 5, 8])
def test_composites_are_additive_over_batch(idx):
    s0, cases = composite_cases()
    name, _ = cases[idx]
    _, t = instance(7)
    y = torch.tensor([0, 6, 3, 7, 5])
    gam = [torch.tensor([0.5, -0.3, 0.2], dtype=D)]

    def one(rows):
        s, tt, yy = s0[rows], t[rows], y[rows]
        return {
            "teacher_init": lambda: losses.teacher_init_loss(s, yy),
            "student_init": lambda: losses.student_init_loss(s, tt, yy, 2.0, 1.0),
            "student_sub": lambda: losses.student_sub_loss(s, tt, yy, PREV, 2.0, 1.0),
            "lwf": lambda: losses.lwf_loss(s, tt, yy, PREV, 2.0, 1.0),
            "icarl": lambda: losses.icarl_loss(s, tt, yy, PREV, 2.0, 1.0),
            "icarl_kd": lambda: losses.icarl_kd_loss(s, tt, yy, PREV, 2.0, 1.0),
            "prune_regularized": lambda: losses.prune_regularized_loss(s, yy, gam, 0.0),
        }[name]().item()

    whole = one(list(range(5)))
    parts = sum(one([i]) for i in range(5))
    assert whole == pytest.approx(parts, rel=1e-6)


@pytest.mark.parametrize("tau", [0.1, 1.0, 2.0, 100.0])
@pytest.mark.parametrize("scale", [1.0, 1e3])
def test_soft_targets_stable(tau, scale):
    z = torch.randn(4, 8, generator=torch.Generator().manual_seed(0), dtype=D) * scale
    p = losses.softmax_temperature(z, None, tau)
    assert torch.isfinite(p).all()
    assert torch.allclose(p.sum(-1), torch.ones(4, dtype=D), atol=1e-6)
    assert torch.isfinite(losses.kd_kl(z, -z, [0, 2, 5], tau))


def test_mu_shifts_gamma_gradient_exactly():
    s, _ = instance(2)
    y = torch.tensor([0, 1, 2, 3, 4])
    grads = []
    for mu in (0.0, 0.1):
        g = torch.tensor([0.5, 0.5, 0.5], dtype=D, requires_grad=True)
        # logits depend on gamma so the CE part has a gradient too
        logits = s * g.sum()
        losses.prune_regularized_loss(logits, y, [g], mu).backward()
        grads.append(g.grad.clone())
    assert torch.allclose(grads[1] - grads[0], torch.full((3,), 0.1, dtype=D), atol=1e-12)
    g = torch.full((6,), 0.5, dtype=D)
    pen = losses.prune_regularized_loss(s, y, [g], 0.1) - losses.cls_loss(s, y)
    assert pen.item() == pytest.approx(0.05 * 6)
