"""HTTPS over a simulated LoRa tunnel: framing, channel model, proxies and harness."""

__version__ = "0.1.0"
