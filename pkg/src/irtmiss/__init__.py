"""Normal-ogive IRT with a selection model for omitted and not-reached responses."""

__version__ = "0.1.0"
