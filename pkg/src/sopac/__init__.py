"""Semi-on-policy multi-agent actor-critic training at desk scale."""

__version__ = "0.1.0"
