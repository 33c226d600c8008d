"""Chain-of-trust tooling for stateless network-booted clients."""

__version__ = "0.1.0"
