"""Error hierarchy for the extractor.

ManifestError covers malformed or invalid source manifests,
BackendError covers encoder construction/inference failures, and
WidthError covers embedding-width disagreements with the output
contract (which aborts the run, unlike per-row image failures, which
are skipped and logged).
"""


class ExtractError(Exception):
    """Base class for extractor failures."""


class ManifestError(ExtractError, ValueError):
    """The source manifest is malformed or violates an invariant."""


class BackendError(ExtractError, RuntimeError):
    """An encoder backend could not be built or run."""


class WidthError(ExtractError, ValueError):
    """A backend produced vectors of the wrong width."""
