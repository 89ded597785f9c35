"""JAX setup shared by every kernel module.

Gradient checks and the 1e-12 OPE identities need float64, so x64 is
switched on before any array is created.
"""
import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402

__all__ = ["jax", "jnp"]
