"""Simulated SDN in-vehicle network: match-action switch, controller, wire protocol and event loop."""
