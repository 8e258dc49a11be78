"""Dynamic ordinal regression with dependent Dirichlet process mixtures."""

__version__ = "0.1.0"
