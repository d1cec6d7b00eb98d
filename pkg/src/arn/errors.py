"""Exception hierarchy shared by every module."""


class ArnError(Exception):
    """Base class; ``code`` is what the CLI reports in its JSON error line."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class ShapeMismatch(ArnError, ValueError):
    code = "shape_mismatch"


class SizeMismatch(ShapeMismatch):
    code = "size_mismatch"


class EmptyInput(ArnError, ValueError):
    code = "empty_input"


class InvalidSlope(ArnError, ValueError):
    code = "invalid_slope"


class IndexOutOfRange(ArnError, IndexError):
    code = "index_out_of_range"


class NotADistribution(ArnError, ValueError):
    code = "not_a_distribution"


class NonScalarLoss(ArnError, ValueError):
    code = "non_scalar_loss"


class TapeConsumed(ArnError, RuntimeError):
    code = "tape_consumed"


class InvalidConfig(ArnError, ValueError):
    code = "invalid_config"


class ParseError(ArnError, ValueError):
    code = "parse_error"

    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")

    def to_dict(self):
        return {"error": self.code, "line": self.line, "message": self.reason}


class ValidationError(ArnError, ValueError):
    code = "validation_error"

    def __init__(self, instance_id, reason):
        self.instance_id = instance_id
        self.reason = reason
        super().__init__(f"instance {instance_id!r}: {reason}")

    def to_dict(self):
        return {"error": self.code, "instance": self.instance_id, "message": self.reason}


class EmptyScene(ArnError, ValueError):
    code = "empty_scene"


class EmptyGroundTruth(ArnError, ValueError):
    code = "empty_ground_truth"


class IncompatibleCheckpoint(ArnError, ValueError):
    code = "incompatible_checkpoint"


class NonFiniteLoss(ArnError, FloatingPointError):
    code = "non_finite_loss"


class GradCheckFailed(ArnError):
    code = "grad_check_failed"
