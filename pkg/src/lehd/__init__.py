"""Light-encoder / heavy-decoder constructive solver for TSP and CVRP."""

__version__ = "0.1.0"
