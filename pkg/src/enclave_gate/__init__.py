"""De-identification ingress gateway for a hospital-adjacent research enclave."""

__version__ = "0.1.0"
