"""Exception types shared across the package."""


class DomainError(ValueError):
    """An evaluation point lies outside the parameter domain."""


class UnsupportedDerivativeError(ValueError):
    """A derivative order at or above the spline order was requested."""


class CapacityError(RuntimeError):
    """A computation would exceed its configured size or operation budget."""


class DegenerateGeometryError(RuntimeError):
    """The geometry map has a (near-)singular Jacobian at a quadrature point."""
