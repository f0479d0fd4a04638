"""Exception types shared across the package."""


class DataFormatError(Exception):
    """An input file or record violates the interchange format."""


class PipelineError(Exception):
    """A pipeline stage failed on otherwise well-formed data."""


class GenerationError(Exception):
    """The synthetic generator could not satisfy its configuration."""
