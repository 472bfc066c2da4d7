"""Tools for the index theory of closed geodesics and their Poincare maps."""
