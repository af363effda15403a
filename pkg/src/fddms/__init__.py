"""False data detection and mitigation for SDN-managed in-vehicle CAN networks."""

__version__ = "0.1.0"
