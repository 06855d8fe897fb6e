"""Bayesian linear layer trained with the local reparameterization trick.

Each layer keeps a factorized Gaussian posterior over its weight matrix and
bias: trainable means plus pre-softplus spread parameters (rho). A forward
pass propagates the activation mean and variance and samples one standard
normal per output activation, which gives much lower gradient variance than
sampling every weight. The KL divergence of the posterior against a fixed
Gaussian prior is the complexity term of the training objective and is
collected per step by a ``KlAccumulator``.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, ShapeError

KL_MODES = ("standard", "inverted-ratio")


def sigma_from_rho(rho):
    """Positive standard deviation via softplus: sigma = log(1 + exp(rho))."""
    return ad.softplus(rho)


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p, mode="standard"):
    """KL(q || p) between elementwise Gaussians, summed over all elements.

    ``q`` is described by tensors and ``p`` by fixed scalars. The default
    ``standard`` mode computes the usual closed form, rearranged as

        log(sigma_p) - log(sigma_q)
        + (sigma_q^2 - sigma_p^2 + (mu_q - mu_p)^2) / (2 sigma_p^2)

    so that q == p yields exactly zero in floating point. The
    ``inverted-ratio`` mode evaluates an alternative convention that flips
    the variance ratio and the sign of the offset term; it is kept only for
    auditability (its value is -1 per element when q == p, and it can be
    negative). Both modes are differentiable w.r.t. ``mu_q`` and ``sigma_q``.
    """
    sigma_p = float(sigma_p)
    mu_p = float(mu_p)
    if sigma_p <= 0.0:
        raise DomainError("gaussian_kl: prior sigma must be positive")
    if np.any(sigma_q.data <= 0.0):
        raise DomainError("gaussian_kl: posterior sigma must be positive")
    if mu_q.data.shape != sigma_q.data.shape:
        raise ShapeError(
            f"gaussian_kl: mu {mu_q.data.shape} vs sigma {sigma_q.data.shape}"
        )
    log_sp = float(np.log(np.float64(sigma_p)))
    sp2 = float(np.float64(sigma_p) * np.float64(sigma_p))

    log_ratio = ad.add_const(ad.scale(ad.log(sigma_q), -1.0), log_sp)
    diff = ad.add_const(mu_q, -mu_p)
    var_q = ad.mul(sigma_q, sigma_q)

    if mode == "standard":
        numer = ad.add(ad.add_const(var_q, -sp2), ad.mul(diff, diff))
        per_elem = ad.add(log_ratio, ad.scale(numer, 0.5 / sp2))
        return ad.sum_all(per_elem)
    if mode == "inverted-ratio":
        inv_var_q = ad.exp(ad.scale(ad.log(var_q), -1.0))
        ratio_term = ad.scale(ad.add_const(ad.scale(inv_var_q, sp2), 1.0), -0.5)
        quad_term = ad.scale(ad.mul(diff, diff), 0.5 / sp2)
        per_elem = ad.add(ad.add(log_ratio, ratio_term), quad_term)
        return ad.sum_all(per_elem)
    raise ContractError(f"gaussian_kl: unknown mode {mode!r}, expected {KL_MODES}")


class KlAccumulator:
    """Running sum of per-layer KL terms for the current training step.

    Entries are keyed by layer identity, so forwarding the same layer once
    per batch sample still contributes its KL exactly once per step (the KL
    depends only on the parameters, which are constant within a step).
    Reset once per step, before the forward pass.
    """

    def __init__(self):
        self._terms = {}

    def reset(self):
        self._terms.clear()

    def record(self, layer, kl):
        self._terms[id(layer)] = kl

    def total(self):
        """Sum of all recorded layer KL terms, as a graph tensor.

        Raises ``ContractError`` when nothing was recorded since the last
        reset (a stale accumulator would silently drop the KL term).
        """
        if not self._terms:
            raise ContractError(
                "KlAccumulator.total: no Bayesian forward recorded since reset"
            )
        terms = list(self._terms.values())
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out

    def __len__(self):
        return len(self._terms)


class GaussianVariationalLayer:
    """Linear layer with a factorized Gaussian posterior over its weights.

    Fields: ``w_mu``/``w_rho`` of shape [d_out, d_in] and ``b_mu``/``b_rho``
    of shape [d_out], all trainable. The fixed priors are N(0, 1) for the
    weights and N(0, 0.1) for the bias; they never receive gradients.
    """

    PRIOR_W = (0.0, 1.0)
    PRIOR_B = (0.0, 0.1)

    def __init__(
        self,
        d_in,
        d_out,
        rng,
        rho_init=-5.0,
        accumulator=None,
        kl_mode="standard",
    ):
        if d_in < 1 or d_out < 1:
            raise ShapeError(f"layer dims must be positive, got {d_in}x{d_out}")
        bound = 1.0 / math.sqrt(d_in)
        self.d_in = d_in
        self.d_out = d_out
        self.w_mu = Tensor(rng.uniform(-bound, bound, (d_out, d_in)), op="param")
        self.w_rho = Tensor(np.full((d_out, d_in), float(rho_init)), op="param")
        self.b_mu = Tensor(np.zeros(d_out), op="param")
        self.b_rho = Tensor(np.full(d_out, float(rho_init)), op="param")
        self.accumulator = accumulator
        self.kl_mode = kl_mode

    def named_parameters(self):
        return [
            ("w_mu", self.w_mu),
            ("w_rho", self.w_rho),
            ("b_mu", self.b_mu),
            ("b_rho", self.b_rho),
        ]

    def kl(self, mode=None):
        """KL of the current posterior against the fixed priors."""
        mode = self.kl_mode if mode is None else mode
        w_kl = gaussian_kl(
            self.w_mu, sigma_from_rho(self.w_rho), *self.PRIOR_W, mode=mode
        )
        b_kl = gaussian_kl(
            self.b_mu, sigma_from_rho(self.b_rho), *self.PRIOR_B, mode=mode
        )
        return ad.add(w_kl, b_kl)

    def _check_input(self, x):
        if x.data.ndim != 2 or x.data.shape[1] != self.d_in:
            raise ShapeError(
                f"bayes linear: expected [B, {self.d_in}] input, got {x.data.shape}"
            )

    def forward_lrt(self, x, rng):
        """Sampled forward pass with variance propagated to the activations.

        Computes the activation mean gamma = x W_mu^T + b_mu and variance
        delta = (x*x)(W_sigma*W_sigma)^T + b_sigma^2, then returns
        gamma + sqrt(delta) * eps with one eps ~ N(0,1) per activation.
        Side effect: records this layer's KL on the attached accumulator.
        """
        self._check_input(x)
        w_sigma = sigma_from_rho(self.w_rho)
        b_sigma = sigma_from_rho(self.b_rho)
        gamma = ad.add_bias(ad.matmul(x, ad.transpose(self.w_mu)), self.b_mu)
        delta = ad.add_bias(
            ad.matmul(ad.mul(x, x), ad.transpose(ad.mul(w_sigma, w_sigma))),
            ad.mul(b_sigma, b_sigma),
        )
        eps = ad.constant(rng.standard_normal(gamma.data.shape))
        out = ad.add(gamma, ad.mul(ad.sqrt(delta), eps))
        if self.accumulator is not None:
            self.accumulator.record(self, self.kl())
        return out

    def forward_deterministic(self, x):
        """Posterior-mean forward pass; no sampling, no KL side effect."""
        self._check_input(x)
        return ad.add_bias(ad.matmul(x, ad.transpose(self.w_mu)), self.b_mu)
