"""Custom exceptions used by vidctl."""

__all__ = (
    'Abort',
    'BridgeError',
    'ContractError',
    'EmptyInputError',
    'GeometryError',
    'InsufficientFramesError',
    'InvalidSettings',
    'NonFiniteLossError',
    'ParseError',
    'ShapeError',
)


class Abort(Exception):
    """An exception that signals to vidctl to stop processing a message.

    When this exception is caught by the application it will immediately
    stop processing the message. None of the remaining callbacks will be
    called. Raised by a consumer, it signals that no more messages will
    be produced.

    Args:
        reason (str): The reason the message is being aborted. It should
            be in the form of "noun.verb" (e.g., "consumer.exhausted").
        message: The message that is being aborted. Usually this will be
            the incoming batch or job, but it can also be a result.
    """

    def __init__(self, reason, message=None):
        """Initialize the class."""
        super().__init__(reason)
        self.message = message


class ContractError(ValueError):
    """A pre-condition of an operation was violated."""


class ShapeError(ContractError):
    """Tensor or array dimensions are inconsistent."""


class GeometryError(ContractError):
    """A frame is too small for the requested resize and crop."""


class EmptyInputError(ContractError):
    """A video source yielded no frames."""


class InsufficientFramesError(ContractError):
    """A video is too short for a single clip at the requested stride."""


class BridgeError(RuntimeError):
    """The external encoder failed.

    Args:
        message (str): What went wrong.
        command (Optional[List[str]]): The command line that was run.
        stderr (Optional[str]): Diagnostics captured from the process.
    """

    def __init__(self, message, command=None, stderr=None):
        """Initialize the class."""
        super().__init__(message)
        self.command = command
        self.stderr = stderr

    def __str__(self):
        message = super().__str__()
        if self.stderr:
            message = '{}\n{}'.format(message, self.stderr.strip())
        return message


class ParseError(BridgeError):
    """An H.264 elementary stream could not be parsed."""


class InvalidSettings(KeyError):
    """One or more settings are missing, unknown, or out of range.

    Args:
        problems (List[str]): Every problem found, one per entry.
    """

    def __init__(self, problems):
        """Initialize the class."""
        super().__init__(problems)
        self.problems = list(problems)

    def __str__(self):
        return 'invalid settings:\n  ' + '\n  '.join(self.problems)


class NonFiniteLossError(ArithmeticError):
    """A training step produced a loss that is NaN or infinite."""
