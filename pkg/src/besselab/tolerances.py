"""Numerical tolerance profiles shared by the index pipeline."""
from dataclasses import dataclass, replace

from .errors import InvalidInput


@dataclass(frozen=True)
class Tolerances:
    sp: float = 1e-9  # symplectic defect, relative to max(1, |P|^2)
    eig: float = 1e-7
    block: float = 1e-6
    kernel: float = 1e-6  # kernel of P - Id and of the concavity form, times max(1, |P|)
    ode_rtol: float = 1e-11
    ode_atol: float = 1e-13
    loc: float = 1e-10  # conjugate point localisation in t
    close: float = 1e-6
    neg: float = 1e-6  # discretised Hessian: eigenvalues below -neg*scale are negative
    null_band: float = 1e-2  # initial mesh keeps the kernel window below null_band*scale


PROFILES = {
    "default": Tolerances(),
    "strict": Tolerances(kernel=1e-8, ode_rtol=1e-12, ode_atol=1e-14, loc=1e-11, null_band=2.5e-3),
}


def get_profile(name="default", **overrides) -> Tolerances:
    if name is None:
        name = "default"
    if isinstance(name, Tolerances):
        return replace(name, **overrides) if overrides else name
    try:
        tol = PROFILES[name]
    except KeyError:
        raise InvalidInput(f"unknown tolerance profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(tol, **overrides) if overrides else tol
