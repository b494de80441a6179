"""Oracle checks bundled as a single pass/fail report.

Every entry compares an implementation quantity against an independent
reference: Monte-Carlo KL, finite differences, brute-force information
sums, an exhaustive channel search, and a second code path for the VAE
loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .layers import InfoDropout, PriorSpec, kl_relu, kl_relu_unit, kl_softplus, kl_softplus_unit, layer_kl
from .losses import IBLossConfig, ib_classification_loss, ib_loss, vae_elbo_loss
from .metrics import LogNormal, LogUniform, discrete_ib_search, factorized_prior_objective, joint_from_channel, \
    mc_kl_estimate
from .nn import ForwardContext, GlobalAvgPool, Linear, Sequential
from .tensor import BatchNormState, Rng, Tensor

GRAD_TOL = 1e-5
FD_STEP = 1e-4
KINK_MARGIN = 10 * FD_STEP
NOISE_SEED = 17


@dataclass
class Check:
    check: str
    value: float
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"check": self.check, "value": float(self.value), "tolerance": self.tolerance, "pass": bool(self.passed)}
        if self.detail:
            out["detail"] = {k: float(v) for k, v in self.detail.items()}
        return out


# ---------------------------------------------------------------- closed-form KL vs Monte Carlo

KL_ALPHAS = (0.1, 0.35, 0.69)
KL_PRIORS = (("log_normal(0,1)", 0.0, 1.0), ("log_normal(0.5,0.7)", 0.5, 0.7), ("log_uniform", None, None))


def kl_checks(seed: int, n: int = 10**6, f_val: float = 1.3,
              softplus_kl: Callable[[float, float, PriorSpec], float] = kl_softplus_unit) -> list[Check]:
    """|closed form - MC| measured in standard errors (pass at <= 3)."""
    rng = Rng(seed, (1,))
    out = []
    for ai, alpha in enumerate(KL_ALPHAS):
        p = LogNormal(math.log(f_val), alpha)
        for pi, (name, mu, sigma) in enumerate(KL_PRIORS):
            if mu is None:
                closed = kl_relu_unit(alpha, f_val, PriorSpec("log_uniform"))
                q = LogUniform(0.0)
            else:
                closed = softplus_kl(alpha, f_val, PriorSpec("log_normal", mu=mu, sigma=sigma))
                q = LogNormal(mu, sigma)
            est, se = mc_kl_estimate(p, q, n, rng.child(ai, pi))
            z = abs(closed - est) / se
            out.append(Check(f"kl_mc/{name}/alpha={alpha}", z, 3.0, z <= 3.0,
                             {"closed_form": closed, "mc_estimate": est, "std_error": se}))
    return out


# ---------------------------------------------------------------- gradients


def _away_from(x: np.ndarray, points: tuple[float, ...], margin: float = 0.05) -> np.ndarray:
    """Push entries at least ``margin`` away from the given kink locations."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin)
    return x


def op_cases(rng: Rng) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """(name, scalar loss builder, parameters) for each differentiable op."""
    def leaf(shape, lo=None, positive=False, kinks=()):
        a = rng.normal(shape)
        if positive:
            a = np.abs(a) + 0.5
        if kinks:
            a = _away_from(a, kinks)
        return Tensor(a, requires_grad=True)

    # fixed random weights make every reduction sensitive to all entries
    weights: dict[tuple, np.ndarray] = {}
    wrng = rng.child(99)

    def probe(t: Tensor) -> Tensor:
        if t.shape not in weights:
            weights[t.shape] = wrng.normal(t.shape)
        return T.sum(T.mask_mul(t, weights[t.shape]))

    a, b = leaf((3, 4)), leaf((3, 4))
    pos = leaf((3, 4), positive=True)
    kinked = leaf((3, 4), kinks=(0.0, -0.5, 0.5))
    s = leaf(())
    bias = leaf((4,))
    m1, m2 = leaf((3, 5)), leaf((5, 4))
    img = leaf((2, 3, 6, 6))
    ker = leaf((4, 3, 3, 3))
    ker1 = leaf((2, 3, 1, 1))
    bn_x = leaf((5, 3))
    bn_img = leaf((3, 2, 4, 4))
    gamma, shift = leaf((3,)), leaf((3,))
    gamma2, shift2 = leaf((2,)), leaf((2,))
    logits = leaf((4, 5))
    labels = np.array([0, 3, 4, 1])
    target = (rng.uniform((4, 5)) > 0.5).astype(float)
    alpha_logit, f_pos, mu, log_sigma = leaf((3, 4)), leaf((3, 4), positive=True), leaf(()), leaf(())
    mask = rng.uniform((3, 4)) > 0.3
    cond = rng.uniform((3, 4)) > 0.5

    cases = [
        ("add", lambda: probe(T.add(a, b)), {"a": a, "b": b}),
        ("sub", lambda: probe(T.sub(a, b)), {"a": a, "b": b}),
        ("mul", lambda: probe(T.mul(a, b)), {"a": a, "b": b}),
        ("scale", lambda: probe(T.scale(a, -1.7)), {"a": a}),
        ("add_scalar", lambda: probe(T.add_scalar(a, 0.3)), {"a": a}),
        ("square", lambda: probe(T.square(a)), {"a": a}),
        ("relu", lambda: probe(T.relu(kinked)), {"a": kinked}),
        ("softplus", lambda: probe(T.softplus(a)), {"a": a}),
        ("sigmoid", lambda: probe(T.sigmoid(a)), {"a": a}),
        ("exp", lambda: probe(T.exp(a)), {"a": a}),
        ("log", lambda: probe(T.log(pos)), {"a": pos}),
        ("clip", lambda: probe(T.clip(kinked, -0.5, 0.5)), {"a": kinked}),
        ("mask_mul", lambda: probe(T.mask_mul(a, mask)), {"a": a}),
        ("where", lambda: probe(T.where(cond, a, b)), {"a": a, "b": b}),
        ("expand", lambda: probe(T.expand(s, (3, 4))), {"s": s}),
        ("add_bias", lambda: probe(T.add_bias(a, bias, axis=1)), {"a": a, "bias": bias}),
        ("reshape", lambda: probe(T.reshape(a, (4, 3))), {"a": a}),
        ("flatten", lambda: probe(T.flatten(img)), {"x": img}),
        ("sum_axis", lambda: probe(T.sum(a, axis=0)), {"a": a}),
        ("mean", lambda: probe(T.mean(a, axis=1)), {"a": a}),
        ("global_avg_pool", lambda: probe(T.global_avg_pool(img)), {"x": img}),
        ("sum_scalars", lambda: T.sum_scalars([T.scale(T.sum(a), 0.7), T.sum(T.square(b))]), {"a": a, "b": b}),
        ("matmul", lambda: probe(T.matmul(m1, m2)), {"a": m1, "b": m2}),
        ("conv2d_same", lambda: probe(T.conv2d(img, ker, 1, "same")), {"x": img, "k": ker}),
        ("conv2d_stride2", lambda: probe(T.conv2d(img, ker, 2, "same")), {"x": img, "k": ker}),
        ("conv2d_valid", lambda: probe(T.conv2d(img, ker, 1, "valid")), {"x": img, "k": ker}),
        ("conv2d_1x1", lambda: probe(T.conv2d(img, ker1, 1, "valid")), {"x": img, "k": ker1}),
        ("batchnorm_dense", lambda: probe(T.batchnorm(bn_x, gamma, shift, BatchNormState(3), True)),
         {"x": bn_x, "gamma": gamma, "beta": shift}),
        ("batchnorm_conv", lambda: probe(T.batchnorm(bn_img, gamma2, shift2, BatchNormState(2), True)),
         {"x": bn_img, "gamma": gamma2, "beta": shift2}),
        ("softmax_cross_entropy", lambda: T.softmax_cross_entropy(logits, labels), {"logits": logits}),
        ("bernoulli_nll", lambda: T.bernoulli_nll(logits, target), {"logits": logits}),
        ("kl_relu", lambda: probe(kl_relu(T.scale(T.sigmoid(alpha_logit), 0.7), f_pos, PriorSpec("log_uniform"))),
         {"g": alpha_logit}),
        ("kl_softplus", lambda: probe(kl_softplus(T.scale(T.sigmoid(alpha_logit), 0.7), f_pos, mu, log_sigma)),
         {"g": alpha_logit, "f": f_pos, "mu": mu, "log_sigma": log_sigma}),
    ]
    return cases


def _dense_net(rng: Rng) -> Sequential:
    return Sequential(
        InfoDropout.dense(6, 5, "relu", rng.child(0)),
        InfoDropout.dense(5, 4, "relu", rng.child(1)),
        Linear(4, 3, rng.child(2)),
    )


def _conv_net(rng: Rng) -> Sequential:
    return Sequential(
        InfoDropout.conv(2, 3, 3, "softplus", rng.child(0), stride=2),
        InfoDropout.conv(3, 3, 3, "softplus", rng.child(1), stride=2),
        GlobalAvgPool(),
    )


def _pre_activations(net: Sequential, x: np.ndarray, noise_seed: int) -> list[np.ndarray]:
    """Inputs to every ReLU (batchnorm outputs) for the kink guard."""
    acts = []
    h = Tensor(x)
    ctx = ForwardContext(training=True, stochastic=True, rng=Rng(noise_seed))
    for layer in net.layers:
        if isinstance(layer, InfoDropout):
            lin, bn, _ = layer.f_branch.layers
            pre = bn(lin(h, ForwardContext(training=True)), ForwardContext(training=True))
            acts.append(pre.data)
        h = layer(h, ctx)
    return acts


def network_case(kind: str, rng: Rng) -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    """Full network with two Information Dropout layers and a fixed noise draw."""
    for attempt in range(50):
        r = rng.child(attempt)
        net = _dense_net(r.child(0)) if kind == "dense_relu" else _conv_net(r.child(0))
        x = r.child(1).normal((4, 6) if kind == "dense_relu" else (3, 2, 7, 7))
        params = net.parameters()
        # move off the initial values (zero biases, unit prior) so every term has a gradient
        for i, p in enumerate(params.values()):
            p.assign(p.data + 0.1 * r.child(2, i).normal(p.shape))
        if kind != "dense_relu" or min(np.abs(a).min() for a in _pre_activations(net, x, NOISE_SEED)) >= KINK_MARGIN:
            break
    y = np.array([0, 2, 1, 0])[: len(x)]
    cfg = IBLossConfig(beta=1.0, n_train=1)

    def loss() -> Tensor:
        ctx = ForwardContext(training=True, stochastic=True, rng=Rng(NOISE_SEED))
        logits = net(Tensor(x), ctx)
        return ib_classification_loss(logits, y, [layer_kl(o)[0] for o in ctx.layer_outputs], cfg)

    return loss, params


def gradient_checks(seed: int, n_seeds: int = 20) -> list[Check]:
    worst: dict[str, float] = {}
    for s in range(n_seeds):
        rng = Rng(seed, (2, s))
        for name, fn, params in op_cases(rng.child(0)):
            err = max(grad_check(fn, params, FD_STEP).values())
            worst[name] = max(worst.get(name, 0.0), err)
        for kind in ("dense_relu", "conv_softplus"):
            fn, params = network_case(kind, rng.child(1, len(kind)))
            err = max(grad_check(fn, params, FD_STEP).values())
            worst[f"network_{kind}"] = max(worst.get(f"network_{kind}", 0.0), err)
    return [Check(f"gradient/{k}", v, GRAD_TOL, v <= GRAD_TOL) for k, v in worst.items()]


# ---------------------------------------------------------------- factorized prior identity


def random_channel(rng: Rng, n_x: int = 4, ks: tuple[int, ...] = (3, 3)) -> tuple[np.ndarray, np.ndarray]:
    px = rng.gen.dirichlet(np.ones(n_x))
    cond = rng.gen.dirichlet(np.ones(int(np.prod(ks))), size=n_x).reshape((n_x,) + ks)
    return cond, px


def factorized_prior_checks(seed: int, n_instances: int = 50) -> list[Check]:
    gap = q_err = 0.0
    for i in range(n_instances):
        r = Rng(seed, (3, i))
        cond, px = random_channel(r)
        value, q = factorized_prior_objective(cond, px, method="iterative", rng=r.child(0))
        joint = joint_from_channel(cond, px)
        identity = joint.mutual_information(["x"], ["z1", "z2"]) + joint.total_correlation(["z1", "z2"])
        gap = max(gap, abs(value - identity))
        q_err = max(q_err, max(np.abs(q[j] - joint.marginal([f"z{j + 1}"])).max() for j in range(2)))
    return [Check("factorized_prior/min_equals_I_plus_TC", gap, 1e-9, gap <= 1e-9),
            Check("factorized_prior/argmin_equals_marginals", q_err, 1e-9, q_err <= 1e-9)]


# ---------------------------------------------------------------- noisy-bit search

H_B_02 = -(0.2 * math.log(0.2) + 0.8 * math.log(0.8))


def discrete_ib_checks(p_noise: float = 0.2, grid_step: float = 0.005) -> list[Check]:
    betas = np.round(np.arange(0.1, 0.6 + 1e-9, 0.02), 10)
    best_margin = -math.inf
    det_err = 0.0
    for beta in betas:
        res = discrete_ib_search(p_noise, float(beta), grid_step)
        det = res["deterministic"]
        det_err = max(det_err, abs(det["identity"] - (H_B_02 + beta * math.log(2))),
                      abs(det["flip"] - (H_B_02 + beta * math.log(2))),
                      abs(det["const0"] - math.log(2)), abs(det["const1"] - math.log(2)))
        margin = res["best_deterministic"][1] - res["best_stochastic"][1]
        best_margin = max(best_margin, margin)
    return [Check("discrete_ib/stochastic_beats_deterministic", best_margin, 0.0, best_margin > 0.0),
            Check("discrete_ib/deterministic_closed_forms", det_err, 1e-12, det_err <= 1e-12)]


# ---------------------------------------------------------------- VAE equivalence


def vae_equivalence_check(seed: int) -> Check:
    from .vae import InfoDropoutVAE, VAEConfig

    rng = Rng(seed, (5,))
    model = InfoDropoutVAE(20, VAEConfig(hidden_units=8, latent_units=4), rng.child(0))
    batch = rng.child(1).uniform((6, 20))
    values = []
    for which in ("vae", "ib"):
        ctx = ForwardContext(training=True, stochastic=True, rng=Rng(seed, (5, 2)))
        logits = model(Tensor(batch), ctx)
        kls = [layer_kl(o)[0] for o in ctx.layer_outputs]
        cfg = IBLossConfig(beta=1.0, n_train=1, task="reconstruction")
        loss = vae_elbo_loss(logits, batch, kls, cfg) if which == "vae" else ib_loss(logits, batch, kls, cfg)
        values.append(np.float64(loss.data))
    same = values[0].tobytes() == values[1].tobytes()
    return Check("vae/elbo_equals_reconstruction_ib_bitwise", float(abs(values[0] - values[1])), 0.0, same)


# ---------------------------------------------------------------- suite


def run_verification_suite(seed: int = 0, softplus_kl: Callable = kl_softplus_unit,
                           grad_seeds: int = 20) -> list[dict]:
    """Run every oracle check; failures are report entries, not exceptions."""
    checks: list[Check] = []
    for name, fn in (("kl", lambda: kl_checks(seed, softplus_kl=softplus_kl)),
                     ("gradient", lambda: gradient_checks(seed, grad_seeds)),
                     ("factorized_prior", lambda: factorized_prior_checks(seed)),
                     ("discrete_ib", discrete_ib_checks),
                     ("vae", lambda: [vae_equivalence_check(seed)])):
        try:
            checks += fn()
        except Exception as exc:  # a crash is reported as a failed check
            checks.append(Check(f"{name}/error: {type(exc).__name__}: {exc}", math.nan, 0.0, False))
    return [c.as_dict() for c in checks]


def report_json(report: list[dict]) -> str:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v
    return json.dumps([{k: clean(v) for k, v in e.items()} for e in report], indent=2)
