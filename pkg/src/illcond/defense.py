"""Inference-time latent refinement by Hamiltonian dynamics on a
reconstruction-plus-prior energy, and the adaptive attack that optimizes
against the defended pipeline.

The defense never touches model weights: starting from the encoded latent
it runs Metropolis-adjusted leapfrog chains toward latents that reconstruct
the given input more plausibly. Momentum draws come from a stream keyed by
(seed, sample index, chain iteration), so the clean and adversarial sides
of a comparison, and attack versus evaluation, all see identical
randomness.

The attack-side surrogate treats Metropolis acceptance as always-accept:
accept/reject is not differentiable, so the attack differentiates through
pure Hamiltonian dynamics while evaluation applies the true test. The
energy gradient used inside leapfrog is spelled out as graph operations
(a hand-built vector-Jacobian product through the decoder), which is what
lets the first-order engine differentiate the whole chain with respect to
the perturbation.
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import models as md
from .attacks import run_attack_loop
from .diffcore import Tensor


class DefenseError(Exception):
    pass


@dataclass
class HmcConfig:
    leapfrog_steps: int = 5
    step_size: float = 0.05
    chain_length: int = 10
    noise_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.leapfrog_steps < 1:
            raise DefenseError("leapfrog_steps must be >= 1")
        if self.chain_length < 0:
            raise DefenseError("chain_length must be >= 0")
        if self.step_size <= 0:
            raise DefenseError("step_size must be positive")
        if self.noise_scale <= 0:
            raise DefenseError("noise_scale must be positive")


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def _decoder_forward_nodes(model, z_node):
    # same op sequence as models.decoder_graph, but keeping pre-activations
    # so the explicit VJP below can form activation derivatives
    pre, post = [], []
    h = z_node
    for i in range(model.latent_index, model.layer_count):
        layer = model.layers[i]
        u = dc.add(dc.matmul(h, dc.transpose(dc.constant(layer.weight))),
                   dc.constant(layer.bias))
        a = md._activate(layer.activation, u)
        pre.append(u)
        post.append(a)
        h = a
    return pre, post


def _energy_node(model, z_node, x_node, noise_scale):
    """U(z) = ||psi(z) - x||^2 / (2 s^2) + ||z||^2 / 2, summed over the batch."""
    _, post = _decoder_forward_nodes(model, z_node)
    recon_term = dc.scalar_mul(dc.sqnorm(dc.subtract(post[-1], x_node)),
                               0.5 / (noise_scale * noise_scale))
    return dc.add(recon_term, dc.scalar_mul(dc.sqnorm(z_node), 0.5))


def _energy_rows(model, z, x, noise_scale):
    # per-row energies for the Metropolis test
    recon = md.decode(model, z).values if z.ndim == 2 else md.decode(model, Tensor(z)).values
    dr = recon - x
    return 0.5 * np.sum(dr * dr, axis=-1) / (noise_scale * noise_scale) + 0.5 * np.sum(z * z, axis=-1)


def energy(z, x, model, noise_scale=0.5):
    """Refinement potential for one latent/input pair."""
    z_arr = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    x_arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    node = _energy_node(model, dc.constant(z_arr.reshape(1, -1)),
                        dc.constant(x_arr.reshape(1, -1)), noise_scale)
    return float(node.value)


def _grad_energy_nodes(model, z_node, x_node, noise_scale):
    """grad_z U as graph nodes: J_psi(z)^T (psi(z) - x) / s^2 + z.

    The decoder VJP is written out layer by layer with activation
    derivatives composed from catalog primitives (the relu mask enters as a
    constant, matching its zero second derivative almost everywhere).
    """
    pre, post = _decoder_forward_nodes(model, z_node)
    v = dc.scalar_mul(dc.subtract(post[-1], x_node),
                      1.0 / (noise_scale * noise_scale))
    dec_layers = model.layers[model.latent_index:]
    for i in reversed(range(len(dec_layers))):
        layer = dec_layers[i]
        act = layer.activation
        if act == "tanh":
            a = post[i]
            v = dc.mul(dc.subtract(1.0, dc.mul(a, a)), v)
        elif act == "sigmoid":
            a = post[i]
            v = dc.mul(dc.mul(a, dc.subtract(1.0, a)), v)
        elif act == "relu":
            v = dc.mul(dc.constant((pre[i].value > 0.0).astype(np.float64)), v)
        v = dc.matmul(v, dc.constant(layer.weight))
    return dc.add(v, z_node)


# ---------------------------------------------------------------------------
# leapfrog integration
# ---------------------------------------------------------------------------

def leapfrog(z, momentum, steps, step_size, energy_fn):
    """Stoermer-Verlet integration: ``steps`` half-kick/drift/half-kick
    rounds of the Hamiltonian flow for the supplied energy.

    ``energy_fn`` maps a latent graph node to a scalar energy node; its
    gradient is obtained by reverse-mode sweeps, one per kick.
    """
    z_arr = np.array(z.values if isinstance(z, Tensor) else z, dtype=np.float64)
    p_arr = np.array(momentum.values if isinstance(momentum, Tensor) else momentum,
                     dtype=np.float64)

    def grad_u(zv):
        zl = dc.leaf(zv)
        try:
            grads = dc.backward(energy_fn(zl))
        except dc.EvaluationError as exc:
            raise DefenseError(f"non-finite energy gradient: {exc}") from exc
        return grads[zl].values if zl in grads else np.zeros_like(zv)

    half = 0.5 * step_size
    for _ in range(steps):
        p_arr = p_arr - half * grad_u(z_arr)
        z_arr = z_arr + step_size * p_arr
        p_arr = p_arr - half * grad_u(z_arr)
    return Tensor(z_arr), Tensor(p_arr)


def _momentum_stream(seed, sample_index, iteration):
    return np.random.default_rng([int(seed), int(sample_index), int(iteration)])


def hmc_refine(model, x, config, sample_index=0):
    """Defended reconstruction g(Y(x)): encode, run ``chain_length``
    Metropolis-adjusted leapfrog iterations on the latent, decode.

    chain_length = 0 reproduces Y(x) exactly. ``sample_index`` keys the
    momentum stream so refining x and x+rho for the same sample uses
    identical randomness.
    """
    x_arr = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x_arr.ndim != 1:
        raise DefenseError(f"hmc_refine expects a single input vector, got {x_arr.shape}")
    z = md.encode(model, Tensor(x_arr)).values
    x_row = x_arr.reshape(1, -1)

    def energy_fn(z_node):
        return _energy_node(model, z_node, dc.constant(x_row), config.noise_scale)

    for k in range(config.chain_length):
        rng = _momentum_stream(config.seed, sample_index, k)
        p0 = rng.standard_normal(z.size)
        z_new, p_new = leapfrog(z.reshape(1, -1), p0.reshape(1, -1),
                                config.leapfrog_steps, config.step_size, energy_fn)
        z_new = z_new.values[0]
        p_new = p_new.values[0]
        h_before = _energy_rows(model, z.reshape(1, -1), x_row,
                                config.noise_scale)[0] + 0.5 * p0 @ p0
        h_after = _energy_rows(model, z_new.reshape(1, -1), x_row,
                               config.noise_scale)[0] + 0.5 * p_new @ p_new
        u = rng.uniform()
        if h_after <= h_before or u < np.exp(h_before - h_after):
            z = z_new
    return md.decode(model, Tensor(z))


# ---------------------------------------------------------------------------
# adaptive attack
# ---------------------------------------------------------------------------

def _leapfrog_nodes(model, z_node, p_const, x_node, config):
    half = 0.5 * config.step_size
    z, p = z_node, p_const
    for _ in range(config.leapfrog_steps):
        g = _grad_energy_nodes(model, z, x_node, config.noise_scale)
        p = dc.subtract(p, dc.scalar_mul(g, half))
        z = dc.add(z, dc.scalar_mul(p, config.step_size))
        g = _grad_energy_nodes(model, z, x_node, config.noise_scale)
        p = dc.subtract(p, dc.scalar_mul(g, half))
    return z, p


def defended_forward_nodes(model, x_node, config, momenta):
    """Split activations and output of the defended pipeline g(Y(x)) under
    the always-accept surrogate; encoder splits are untouched, the latent
    split is the refined latent, decoder splits follow the refined latent.
    """
    enc_acts, z, _ = md.encoder_graph(model, x_node)
    for k in range(config.chain_length):
        z, _ = _leapfrog_nodes(model, z, dc.constant(momenta[k]), x_node, config)
    _, post = _decoder_forward_nodes(model, z)
    return enc_acts[:-1] + [z] + post[:-1], post[-1]


def run_adaptive_attack(model, hmc_config, dataset, attack_config):
    """Universal attack against D = g(Y(.)): the same projected Adam loop,
    with every objective term computed through the defended forward."""
    data = np.asarray(dataset, dtype=np.float64)
    n_lat = model.latent_dim
    momenta_cache = {}

    def momenta_for(sample_indices):
        key = (int(sample_indices[0]), len(sample_indices))
        if key not in momenta_cache:
            momenta_cache[key] = [
                np.stack([_momentum_stream(hmc_config.seed, i, k).standard_normal(n_lat)
                          for i in sample_indices])
                for k in range(hmc_config.chain_length)]
        return momenta_cache[key]

    def adv_forward(xb, rho_node, sample_indices):
        x_adv = dc.add(dc.constant(xb), rho_node)
        return defended_forward_nodes(model, x_adv, hmc_config, momenta_for(sample_indices))

    def clean_forward(xb, sample_indices):
        splits, out = defended_forward_nodes(model, dc.constant(xb), hmc_config,
                                             momenta_for(sample_indices))
        return [s.value for s in splits], out.value

    def eval_fn(rho, last_io):
        adv_out, clean_out = last_io
        return float(np.mean(np.sqrt(np.sum((adv_out - clean_out) ** 2, axis=1))))

    return run_attack_loop(model, data, attack_config, adv_forward, clean_forward, eval_fn)
