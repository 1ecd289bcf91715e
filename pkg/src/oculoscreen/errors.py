"""Exception types shared across the package.

Every error carries a stable ``code`` string so the CLI and the HTTP service
can emit machine-parseable diagnostics without matching message text.
"""


class OculoscreenError(Exception):
    code = "ERROR"

    def __init__(self, message: str = ""):
        self.message = message
        super().__init__(message)

    def __str__(self) -> str:  # pragma: no cover - trivial
        return f"{self.code}: {self.message}" if self.message else self.code


class UnreadableImageError(OculoscreenError):
    """Image file is missing, corrupt, or in an unsupported encoding."""

    code = "UNREADABLE_IMAGE"


class ParseError(OculoscreenError):
    """Manifest or config file is malformed; message carries diagnostics."""

    code = "PARSE_ERROR"


class DuplicateIdentityError(OculoscreenError):
    """One identity appears under two cohort labels."""

    code = "DUPLICATE_IDENTITY"


class PolicyOverrideError(OculoscreenError):
    """Quality floors relaxed below defaults without allow_override."""

    code = "POLICY_OVERRIDE_REQUIRED"


class NoEyeFoundError(OculoscreenError):
    """Heuristic detector found no plausible eye region and no hint given."""

    code = "NO_EYE_FOUND"


class DegenerateBoxError(OculoscreenError):
    """Bounding box too small to crop (side under 2 px)."""

    code = "DEGENERATE_BOX"


class ShapeMismatchError(OculoscreenError):
    """Array does not match the shape the operation requires."""

    code = "SHAPE_MISMATCH"


class MissingAngleError(OculoscreenError):
    """A required gaze angle is absent from the session."""

    code = "MISSING_ANGLE"


class SessionInvalidError(OculoscreenError):
    """Session failed protocol validation; holds the violation list."""

    code = "SESSION_INVALID"

    def __init__(self, violations):
        self.violations = list(violations)
        detail = "; ".join(str(v) for v in self.violations)
        super().__init__(detail)


class EmptySplitError(OculoscreenError):
    """Training or validation split contains no sessions."""

    code = "EMPTY_SPLIT"


class SingleClassSplitError(OculoscreenError):
    """All training labels identical; nothing to discriminate."""

    code = "SINGLE_CLASS_SPLIT"


class CohortTooSmallError(OculoscreenError):
    """A cohort has fewer identities than the requested fold count."""

    code = "COHORT_TOO_SMALL"


class OneClassOnlyError(OculoscreenError):
    """ROC needs both target and non-target examples."""

    code = "ONE_CLASS_ONLY"


class UnknownIdentityError(OculoscreenError):
    """Identity id not present in the generated corpus."""

    code = "UNKNOWN_IDENTITY"
